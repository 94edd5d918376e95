import numpy as np
import pytest
import torch
from torch import nn

from rapattack import LossSpec
from rapattack.errors import CapabilityError, InvalidConfigError, InvalidInputError, TrainingFailure
from rapattack.models import Ensemble, ModelStore, TorchModel, ToyModelSpec, ensemble, train_toy

from conftest import Linear, random_batch, random_cnn, random_mlp


def linear_model(w):
    return TorchModel(Linear(w), w.shape[1], (1, 2, 2))


def test_zero_weights_give_zero_logits():
    m = linear_model(torch.zeros(4, 3, dtype=torch.float64))
    assert torch.equal(m.forward(torch.rand(5, 1, 2, 2, dtype=torch.float64)), torch.zeros(5, 3, dtype=torch.float64))


def test_duplicated_rows(cnn, batch):
    x = torch.cat([batch.x[:2], batch.x[:2]])
    out = cnn.forward(x)
    assert torch.equal(out[:2], out[2:])


def test_shape_mismatch(cnn):
    with pytest.raises(InvalidInputError):
        cnn.forward(torch.zeros(1, 3, 8, 8, dtype=torch.float64))


def test_linear_gradient_is_weight_row():
    w = torch.randn(4, 3, dtype=torch.float64)
    m = linear_model(w)
    x = torch.rand(1, 1, 2, 2, dtype=torch.float64)
    g = m.input_gradient(x, LossSpec("logit", "targeted"), torch.tensor([2]))
    assert torch.allclose(g.flatten(), -w[:, 2])


def test_untargeted_gradient_increases_ce(cnn, batch):
    x = batch.x[:1]
    y = cnn.predict(x)
    g = cnn.input_gradient(x, LossSpec(), y)
    assert g.abs().sum() > 0
    ce = lambda z: nn.functional.cross_entropy(cnn.forward(z), y)
    d = -g / g.norm()  # descending the attack loss raises CE
    assert ce(x + 1e-4 * d) > ce(x)


def test_ensemble_examples():
    w1, w2 = torch.randn(4, 3, dtype=torch.float64), torch.randn(4, 3, dtype=torch.float64)
    a, b = linear_model(w1), linear_model(w2)
    x = torch.rand(3, 1, 2, 2, dtype=torch.float64)
    assert torch.equal(ensemble([a]).forward(x), a.forward(x))
    assert torch.allclose(ensemble([a, a, a]).forward(x), a.forward(x))
    spec, lab = LossSpec("logit", "targeted"), torch.tensor([0, 1, 2])
    g = ensemble([a, b]).input_gradient(x, spec, lab)
    want = -(w1[:, lab] + w2[:, lab]).T.reshape(3, 1, 2, 2) / 2 / 3
    assert torch.allclose(g, want, rtol=1e-6)


def test_ensemble_gradient_linearity(batch):
    a, b = random_cnn(1), random_mlp(2)
    g = Ensemble([a, b]).input_gradient(batch.x, LossSpec(), batch.labels)
    # the loss is nonlinear in the logits, so compare against autograd on the averaged logits
    x = batch.x.clone().requires_grad_(True)
    logits = (a.forward(x) + b.forward(x)) / 2
    (ref,) = torch.autograd.grad(-nn.functional.cross_entropy(logits, batch.labels), x)
    assert torch.allclose(g, ref, rtol=1e-6, atol=1e-12)


def test_ensemble_validation():
    with pytest.raises(InvalidConfigError):
        Ensemble([])
    with pytest.raises(InvalidConfigError):
        Ensemble([random_cnn(num_classes=5), random_cnn(num_classes=4)])

    class Blind(TorchModel):
        capabilities = frozenset({"forward"})

    blind = random_cnn()
    blind.__class__ = Blind
    with pytest.raises(CapabilityError):
        Ensemble([random_cnn(), blind])


def test_preprocessing_opacity():
    torch.manual_seed(0)
    net = nn.Sequential(nn.Flatten(), nn.Linear(12, 3)).double()
    mean, std = torch.tensor([0.2, 0.4, 0.6]), torch.tensor([0.5, 0.25, 2.0])
    wrapped = TorchModel(net, 3, (3, 2, 2), mean, std)
    folded = nn.Sequential(nn.Flatten(), nn.Linear(12, 3)).double()
    scale = (1 / std).repeat_interleave(4).double()
    shift = (mean / std).repeat_interleave(4).double()
    folded[1].weight.data = net[1].weight.data * scale
    folded[1].bias.data = net[1].bias.data - net[1].weight.data @ shift
    plain = TorchModel(folded, 3, (3, 2, 2))
    x = torch.rand(4, 3, 2, 2, dtype=torch.float64)
    assert torch.allclose(wrapped.forward(x), plain.forward(x), atol=1e-6)


def test_predict_ties_lowest_index():
    m = linear_model(torch.zeros(4, 3, dtype=torch.float64))
    assert m.predict(torch.rand(2, 1, 2, 2, dtype=torch.float64)).tolist() == [0, 0]


def separable(n, seed):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    x = rng.uniform(0, 0.4, (n, 1, 4, 4)) + 0.5 * y[:, None, None, None]
    return torch.from_numpy(x).float(), torch.from_numpy(y)


def test_mlp_separable_and_seeded(tmp_path):
    data = (*separable(400, 0), *separable(200, 1))
    spec = ToyModelSpec("mlp", (16,), num_classes=2, input_shape=(1, 4, 4), epochs=5, seed=4)
    store = ModelStore(tmp_path)
    m = train_toy(spec, data, store, "a")
    train_toy(spec, data, store, "b")
    assert m.manifest["test_accuracy"] >= 0.99
    assert (tmp_path / "a" / "weights.pt").read_bytes() == (tmp_path / "b" / "weights.pt").read_bytes()
    loaded = store.load("a")
    x = data[2][:5]
    assert torch.equal(loaded.forward(x), m.forward(x))
    assert store.exists("a", spec) and not store.exists("a", ToyModelSpec("mlp", (16,), num_classes=2, seed=5))


def test_training_floor(tmp_path):
    x, y = separable(100, 0)
    noise = torch.from_numpy(np.random.default_rng(0).integers(0, 2, 100))
    spec = ToyModelSpec("mlp", (4,), num_classes=2, input_shape=(1, 4, 4), epochs=1, accuracy_floor=0.99)
    with pytest.raises(TrainingFailure):
        train_toy(spec, (x, y, x, noise))


def test_spec_validation():
    with pytest.raises(InvalidConfigError):
        ToyModelSpec("resnet")
    assert ToyModelSpec(seed=1).key() != ToyModelSpec(seed=2).key()
