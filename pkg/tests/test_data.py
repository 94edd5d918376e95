import torch

from rapattack.data import SyntheticSpec, attack_set, make_synthetic, random_targets, toy_splits


def test_synthetic_shapes_and_range():
    spec = SyntheticSpec(size=16)
    x, y = make_synthetic(50, 0, spec)
    assert x.shape == (50, 3, 16, 16) and x.dtype == torch.float32
    assert x.min() >= 0 and x.max() <= 1
    assert sorted(set(y.tolist())) == list(range(10))


def test_synthetic_determinism():
    a, b = make_synthetic(20, 3), make_synthetic(20, 3)
    assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])
    assert not torch.equal(a[0], make_synthetic(20, 4)[0])


def test_targets_differ_from_labels():
    y = torch.arange(100) % 10
    t = random_targets(y, 10, 0)
    assert (t != y).all() and t.max() < 10


def test_attack_set_is_disjoint_from_training():
    spec = SyntheticSpec(size=8)
    b = attack_set(10, spec)
    xtr, _, xte, _ = toy_splits(spec, 20, 20)
    assert not any(torch.equal(b.x[0], xi) for xi in torch.cat([xtr, xte]))
    assert (b.targets != b.labels).all()
