import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from rapattack.errors import InvalidConfigError
from rapattack.pipelines import (EOT, Admix, DiverseInput, Momentum, MomentumState, PipelineSpec, RandomStreams,
                                 ScaleInvariant, TISmooth, admix_copies, di_transform, gaussian_kernel,
                                 momentum_update, preset, resize_pad, si_scaled_copies, ti_kernel_smooth, PRESETS)


def np_bilinear(img, out_h, out_w):
    """Half-pixel-centre bilinear resampling with edge clamping, written from scratch."""
    c, h, w = img.shape
    out = np.zeros((c, out_h, out_w))
    for i in range(out_h):
        sy = max((i + 0.5) * h / out_h - 0.5, 0.0)
        y0 = min(int(np.floor(sy)), h - 1)
        y1, wy = min(y0 + 1, h - 1), sy - y0
        for j in range(out_w):
            sx = max((j + 0.5) * w / out_w - 0.5, 0.0)
            x0 = min(int(np.floor(sx)), w - 1)
            x1, wx = min(x0 + 1, w - 1), sx - x0
            out[:, i, j] = ((1 - wy) * (1 - wx) * img[:, y0, x0] + (1 - wy) * wx * img[:, y0, x1]
                            + wy * (1 - wx) * img[:, y1, x0] + wy * wx * img[:, y1, x1])
    return out


def test_resize_pad_matches_reference():
    rng = np.random.default_rng(3)
    img = rng.uniform(size=(3, 12, 12))
    got = resize_pad(torch.from_numpy(img), (13, 13), (14, 14), (1, 0)).numpy()
    canvas = np.zeros((3, 14, 14))
    canvas[:, 1:14, 0:13] = np_bilinear(img, 13, 13)
    want = np_bilinear(canvas, 12, 12)
    assert np.abs(got - want).max() < 1e-12


def test_di_probability_extremes(batch):
    s = RandomStreams(0, batch.indices.tolist(), 0)
    assert torch.equal(di_transform(batch.x, 0.0, s), batch.x)
    assert torch.equal(di_transform(batch.x, 1.0, s, max_scale=1.0), batch.x)
    moved = di_transform(batch.x, 1.0, s)
    assert moved.shape == batch.x.shape and not torch.equal(moved, batch.x)
    with pytest.raises(InvalidConfigError):
        di_transform(batch.x, 1.5, s)


def test_di_draws_are_per_image_and_index_keyed(batch):
    whole = di_transform(batch.x, 0.7, RandomStreams(5, batch.indices.tolist(), 3))
    part = batch[2:4]
    sub = di_transform(part.x, 0.7, RandomStreams(5, part.indices.tolist(), 3))
    assert torch.equal(whole[2:4], sub)


def test_si_copies():
    x = torch.full((1, 1, 2, 2), 0.8, dtype=torch.float64)
    vals = [float(c[0, 0, 0, 0]) for c in si_scaled_copies(x, 4)]
    assert vals == [0.8, 0.4, 0.2, 0.1]
    assert ScaleInvariant(5).multiplicity == 5


def test_admix_values():
    x = torch.full((2, 1, 2, 2), 0.5, dtype=torch.float64)
    pool = torch.ones(3, 1, 2, 2, dtype=torch.float64)
    copies = admix_copies(x, pool, m2=2, eta=0.2, m1=3, streams=RandomStreams(0, [0, 1], 0))
    assert len(copies) == 6
    assert torch.allclose(copies[0], torch.full_like(x, 0.7))
    assert torch.allclose(copies[1], torch.full_like(x, 0.35))
    assert Admix(5, 3).multiplicity == 15


def test_admix_excludes_anchor():
    x = torch.arange(4, dtype=torch.float64).view(4, 1, 1, 1)
    for it in range(20):
        copies = admix_copies(x, x, m2=1, eta=0.5, m1=1, streams=RandomStreams(0, range(4), it))
        partner = (copies[0] - x) / 0.5
        assert not torch.any(partner == x)


def test_ti_impulse_stamps_kernel():
    g = torch.zeros(1, 2, 11, 11, dtype=torch.float64)
    g[0, 1, 5, 5] = 1.0
    out = ti_kernel_smooth(g, 5)
    t = np.arange(-2, 3)
    k = np.exp(-t**2 / (2 * (5 / 3) ** 2))
    k2 = np.outer(k, k) / np.outer(k, k).sum()
    assert np.allclose(out[0, 1, 3:8, 3:8].numpy(), k2, atol=1e-15)
    assert float(out[0, 0].abs().sum()) == 0.0
    assert float(out.sum()) == pytest.approx(1.0)


def test_ti_circular_wraps():
    g = torch.zeros(1, 1, 7, 7, dtype=torch.float64)
    g[0, 0, 0, 0] = 1.0
    circ = ti_kernel_smooth(g, 3, "circular")
    zero = ti_kernel_smooth(g, 3)
    assert float(circ.sum()) == pytest.approx(1.0)
    assert float(zero.sum()) < 1.0
    assert circ[0, 0, 6, 6] > 0 and zero[0, 0, 6, 6] == 0
    assert torch.equal(ti_kernel_smooth(g, 1), g)
    with pytest.raises(InvalidConfigError):
        gaussian_kernel(4)


def test_momentum_two_steps():
    g = torch.tensor([[[[1.0, -3.0]]]], dtype=torch.float64)
    state = MomentumState(1.0)
    momentum_update(g, state)
    out = momentum_update(g, state)
    assert torch.allclose(out, 2 * g / 4.0)


def test_momentum_zero_gradient_warns():
    state = MomentumState(0.5, torch.ones(1, 1, 1, 2))
    with pytest.warns(RuntimeWarning):
        out = momentum_update(torch.zeros(1, 1, 1, 2), state)
    assert torch.equal(out, torch.full((1, 1, 1, 2), 0.5))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 3))
def test_multiplicity_matches_copy_count(m_si, m2, n_eot):
    pipe = PipelineSpec((EOT(DiverseInput(), n_eot), Admix(m_si, m2, 0.2)), ())
    x = torch.rand(3, 1, 6, 6, dtype=torch.float64)
    assert len(pipe.transform_inputs(x, RandomStreams(0, range(3), 0))) == pipe.multiplicity == n_eot * m_si * m2


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_preset_roundtrip(name):
    p = preset(name)
    assert PipelineSpec.from_list(p.to_list()) == p


def test_bad_descriptors():
    with pytest.raises(InvalidConfigError):
        PipelineSpec.from_list([{"name": "warp"}])
    with pytest.raises(InvalidConfigError):
        PipelineSpec.from_list([{"name": "di", "probability": 0.5}])
    with pytest.raises(InvalidConfigError):
        preset("XYZ")
    with pytest.raises(InvalidConfigError):
        TISmooth(4)
    with pytest.raises(InvalidConfigError):
        Momentum(-1)


def test_eot_children_draw_independently(batch):
    pipe = PipelineSpec((EOT(DiverseInput(prob=1.0), 3),), ())
    a, b, c = pipe.transform_inputs(batch.x, RandomStreams(0, batch.indices.tolist(), 0))
    assert not torch.equal(a, b) and not torch.equal(b, c)


def test_di_full_path_matches_reference():
    ramp = torch.linspace(0, 1, 16, dtype=torch.float64).view(1, 1, 4, 4)
    streams = RandomStreams(9, [0], 2)
    got = di_transform(ramp, 1.0, streams, max_scale=1.5)[0].numpy()
    rng = streams.for_image(0)
    _, factor, u_top, u_left = rng.random(), rng.uniform(1.0, 1.5), rng.random(), rng.random()
    size = round(4 * factor)
    top, left = int(u_top * (6 - size + 1)), int(u_left * (6 - size + 1))
    canvas = np.zeros((1, 6, 6))
    canvas[:, top:top + size, left:left + size] = np_bilinear(ramp[0].numpy(), size, size)
    assert np.abs(got - np_bilinear(canvas, 4, 4)).max() < 1e-12


def test_di_rejects_tiny_images():
    from rapattack.errors import InvalidInputError
    with pytest.raises(InvalidInputError):
        di_transform(torch.zeros(1, 1, 1, 5), 0.5, RandomStreams(0, [0], 0))


def test_ti_preserves_constant_interior():
    g = torch.full((1, 3, 12, 12), 0.25, dtype=torch.float64)
    out = ti_kernel_smooth(g, 5)
    assert torch.allclose(out[..., 2:-2, 2:-2], g[..., 2:-2, 2:-2], atol=1e-15)
    for k in (1, 3, 5, 7, 15):
        assert abs(float(gaussian_kernel(k).sum()) - 1) < 1e-9


def test_si_gradient_on_linear_model():
    w = torch.randn(12, dtype=torch.float64)
    x = torch.rand(1, 3, 2, 2, dtype=torch.float64, requires_grad=True)
    loss = sum((c.flatten() @ w) for c in si_scaled_copies(x, 3)) / 3
    (g,) = torch.autograd.grad(loss, x)
    assert torch.allclose(g.flatten(), w * (1 + 0.5 + 0.25) / 3)
    assert torch.equal(si_scaled_copies(x, 1)[0], x)


def test_admix_zero_eta_single_copy(batch):
    (only,) = admix_copies(batch.x, batch.x, 1, 0.0, 1, RandomStreams(0, batch.indices.tolist(), 0))
    assert torch.equal(only, batch.x)
    from rapattack.errors import InvalidInputError
    with pytest.raises(InvalidInputError):
        admix_copies(batch.x, batch.x[:0], 1, 0.2, 1, RandomStreams(0, batch.indices.tolist(), 0))


def test_eot_single_sample_and_deterministic_inner(batch):
    s = RandomStreams(0, batch.indices.tolist(), 0)
    di = PipelineSpec((DiverseInput(),), ())
    one = PipelineSpec((EOT(DiverseInput(), 1),), ())
    assert one.multiplicity == di.multiplicity == 1
    assert torch.equal(one.transform_inputs(batch.x, s)[0], EOT(DiverseInput(), 1).inner.copies(batch.x, s.child(0).child(0).child(0))[0])
    det = PipelineSpec((EOT(ScaleInvariant(2), 4),), ())
    copies = det.transform_inputs(batch.x, s)
    assert all(torch.equal(copies[i], copies[i % 2]) for i in range(8))


def test_eot_pass_count(cnn, batch):
    from rapattack import RAPConfig, rap_attack
    pipe = PipelineSpec.from_list([{"name": "eot", "n_samples": 10, "inner": {"name": "di"}}])
    tr = rap_attack(cnn, batch, pipe, RAPConfig(K=3, K_LS=3, checkpoints=()), 0)
    assert tr.forward_count == 30


@settings(max_examples=20, deadline=None)
@given(st.floats(1e-3, 1e3), st.floats(0.0, 1.0))
def test_momentum_scale_invariance(c, mu):
    g = torch.randn(2, 1, 3, 3, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
    s1, s2 = MomentumState(mu), MomentumState(mu)
    for _ in range(2):
        a, b = momentum_update(g, s1), momentum_update(c * g, s2)
    assert torch.allclose(a, b, rtol=1e-12, atol=1e-15)


def test_momentum_first_step_and_no_memory():
    g = torch.randn(3, 2, 4, 4, dtype=torch.float64)
    out = momentum_update(g, MomentumState(1.0))
    assert torch.allclose(out.abs().flatten(1).sum(1), torch.ones(3, dtype=torch.float64))
    st0 = MomentumState(0.0)
    momentum_update(torch.randn_like(g), st0)
    assert torch.allclose(momentum_update(g, st0), g / g.abs().flatten(1).sum(1).view(3, 1, 1, 1))
