import numpy as np
import pytest

from gradcheck import check_gradients, random_tiny_net
from reference import dense_scalar
from spikingdd.checkpoint import from_bytes, load_checkpoint, save_checkpoint, to_bytes
from spikingdd.errors import ConfigError, CorruptArtifactError, ShapeError
from spikingdd.events import SpikeTensor
from spikingdd.loss import LossConfig
from spikingdd.network import (
    LayerSpec,
    NetworkModel,
    backward,
    build_model,
    count_params,
    dense_forward,
    dropout_masks,
    flatten,
    forward,
    forward_features,
    pool_backward,
    pool_forward,
    spiking_dd,
    unflatten,
)
from spikingdd.neuron import LifParams


# ------------------------------------------------------------------- pooling


def test_pool_zero():
    out = pool_forward(np.zeros((3, 2, 14, 14), np.uint8), 7)
    assert out.shape == (3, 2, 2, 2) and not out.any()


def test_pool_full_window():
    out = pool_forward(np.ones((1, 1, 7, 7), np.uint8), 7)
    assert out.shape == (1, 1, 1, 1) and out[0, 0, 0, 0] == 1.0


def test_pool_default_geometry():
    out = pool_forward(np.zeros((1, 2, 480, 640), np.uint8), 7)
    assert out.shape == (1, 2, 69, 91)


def test_pool_padding_and_truncation():
    x = np.zeros((1, 1, 10, 10), np.uint8)
    x[0, 0, 9, 0] = 1  # last row, lands in the zero-padded window
    x[0, 0, 0, 9] = 1  # column 9 is beyond floor(10/7)*7 and is dropped
    out = pool_forward(x, 7)
    assert out.shape == (1, 1, 2, 1)
    assert out[0, 0, 1, 0] == pytest.approx(1 / 49)
    assert out[0, 0, 0, 0] == 0.0


def test_pool_brute_force():
    rng = np.random.default_rng(0)
    x = (rng.random((2, 2, 23, 31)) < 0.3).astype(np.uint8)
    k = 5
    out = pool_forward(x, k)
    ho, wo = -(-23 // k), 31 // k
    want = np.zeros((2, 2, ho, wo))
    for t, c, i, j in np.ndindex(want.shape):
        want[t, c, i, j] = x[t, c, i * k : min((i + 1) * k, 23), j * k : (j + 1) * k].sum() / (k * k)
    assert np.allclose(out, want)


def test_pool_kernel_too_large():
    with pytest.raises(ConfigError):
        pool_forward(np.zeros((1, 1, 4, 5), np.uint8), 6)


def test_pool_backward_distributes_uniformly():
    g = np.ones((1, 2, 1))
    back = pool_backward(g, 10, 10, 7)
    assert back.shape == (1, 10, 10)
    assert np.allclose(back[:, :, :7], 1 / 49)
    assert np.all(back[:, :, 7:] == 0.0)
    # adjoint of pool_forward: <pool(x), g> == <x, pool_backward(g)>
    rng = np.random.default_rng(1)
    x = rng.random((1, 1, 10, 10))
    gg = rng.random((1, 1, 2, 1))
    assert np.sum(pool_forward(x, 7) * gg) == pytest.approx(np.sum(x * pool_backward(gg, 10, 10, 7)))


# ------------------------------------------------------------------- flatten


def test_flatten_sizes_and_index():
    x = np.zeros((1, 2, 69, 91))
    assert flatten(x).shape == (1, 12558)
    x[0, 1, 0, 0] = 1.0
    assert np.flatnonzero(flatten(x)[0]).tolist() == [6279]


def test_flatten_round_trip():
    x = np.random.default_rng(2).random((4, 2, 5, 6))
    assert np.array_equal(unflatten(flatten(x), (2, 5, 6)), x)


# --------------------------------------------------------------------- dense


def test_dense_null_weights():
    rec = dense_forward(np.ones((5, 3)), np.zeros((2, 3)), LifParams())
    assert not rec.s.any()


def test_dense_one_cuba_step():
    p = LifParams(threshold=1.25, current_decay=0.25, voltage_decay=0.03, mode="cuba")
    x = np.zeros((3, 1))
    x[0, 0] = 1.0
    rec = dense_forward(x, np.array([[2.0]]), p)
    assert rec.u[0, 0] == 2.0 and rec.v_pre_reset[0, 0] == 2.0
    assert rec.s[:, 0].tolist()[0] == 1.0
    # after reset only the decaying current drives v: 1.5 at t=1 spikes again
    assert rec.v_pre_reset[1, 0] == pytest.approx(1.5)


def test_dense_matches_scalar_composition():
    rng = np.random.default_rng(3)
    for mode in ("single", "cuba"):
        p = LifParams(threshold=0.8, voltage_decay=0.2, current_decay=0.4, mode=mode)
        inputs = (rng.random((15, 5)) < 0.4).astype(float)
        W = rng.normal(0.2, 0.5, size=(4, 5))
        rec = dense_forward(inputs, W, p)
        s, v = dense_scalar(inputs.tolist(), W.tolist(), p)
        assert np.array_equal(rec.s, np.array(s))
        assert np.allclose(rec.v_pre_reset, np.array(v), rtol=0, atol=1e-12)


def test_dense_shape_error():
    with pytest.raises(ShapeError):
        dense_forward(np.ones((5, 3)), np.zeros((2, 4)), LifParams())


# --------------------------------------------------------------------- model


def test_default_chain_and_params():
    m = spiking_dd()
    assert m.feature_shape() == (2, 69, 91)
    assert [s.in_units for s in m.dense_layers] == [12558, 32, 8]
    assert count_params(m) == 12558 * 32 + 32 * 8 + 8 * 2 == 402_128


def test_count_params_small():
    m = build_model([LayerSpec.flatten(), LayerSpec.dense(3, 2)], (1, 1, 3))
    assert count_params(m) == 6
    assert count_params(NetworkModel((1, 1, 3), [LayerSpec.flatten()], [])) == 0


def test_chain_validation():
    with pytest.raises(ConfigError):
        build_model([LayerSpec.flatten(), LayerSpec.dense(5, 2)], (1, 1, 3))
    with pytest.raises(ConfigError):
        build_model([LayerSpec.flatten(), LayerSpec.dense(3, 4), LayerSpec.dense(3, 2)], (1, 1, 3))


def test_init_bounds():
    m = spiking_dd(120, 160, seed=5)
    for spec, W in zip(m.dense_layers, m.weights):
        assert np.abs(W).max() <= np.sqrt(1 / spec.in_units)
        assert W.dtype == np.float32


def test_forward_zero_fixed_point():
    m = spiking_dd(120, 160)
    x = np.zeros((33, 2, 120, 160), np.uint8)
    out, trace = forward(m, SpikeTensor(x, 1000), training=True, rng_seed=1)
    assert out.s.shape == (33, 2)
    assert all(not r.s.any() for r in trace.records)


def test_forward_geometry_mismatch():
    with pytest.raises(ShapeError):
        forward(spiking_dd(120, 160), np.zeros((5, 2, 100, 160)))


def test_forward_deterministic():
    m = spiking_dd(120, 160, seed=3)
    m = m.with_weights([w * 20 for w in m.weights])
    rng = np.random.default_rng(0)
    x = (rng.random((4, 33, 2, 120, 160)) < 0.05).astype(np.uint8)
    a, ta = forward(m, x, training=True, rng_seed=9)
    b, tb = forward(m, x, training=True, rng_seed=9)
    assert np.array_equal(a.s, b.s) and np.array_equal(a.v_pre_reset, b.v_pre_reset)
    ga = backward(m, ta, d_rate=np.ones((4, 2)))
    gb = backward(m, tb, d_rate=np.ones((4, 2)))
    assert all(np.array_equal(u, v) for u, v in zip(ga, gb))
    assert a.s.any()


def test_eval_ignores_seed():
    m = spiking_dd(120, 160, seed=3)
    x = (np.random.default_rng(0).random((33, 2, 120, 160)) < 0.05).astype(np.uint8)
    a, _ = forward(m, x, rng_seed=1)
    b, _ = forward(m, x, rng_seed=2)
    assert np.array_equal(a.v_pre_reset, b.v_pre_reset)


def test_dropout_mask_fixed_over_time_and_expectation():
    m = spiking_dd(120, 160)
    masks = dropout_masks(m, (10_000,), rng_seed=0)
    assert masks[0].shape == (10_000, 1, m.dense_layers[0].in_units)
    rng = np.random.default_rng(4)
    inputs = rng.random(32)
    W = rng.normal(size=(8, 32))
    drive = (inputs * masks[1][:, 0, :]) @ W.T  # inverted scaling already inside the mask
    assert np.allclose(drive.mean(axis=0), W @ inputs, rtol=0.02, atol=0.02 * np.abs(W @ inputs).max())


# -------------------------------------------------------------------- backward


def test_backward_zero_upstream():
    m = random_tiny_net(np.random.default_rng(0))
    x = np.random.default_rng(1).random((6, 4))
    _, trace = forward_features(m, x, training=True)
    grads = backward(m, trace, d_rate=np.zeros(2))
    assert all(not g.any() for g in grads)


def test_backward_requires_trace():
    m = random_tiny_net(np.random.default_rng(0))
    with pytest.raises(ConfigError):
        backward(m, None, d_rate=np.zeros(2))


def test_backward_outside_surrogate_support_is_zero():
    p = LifParams(threshold=1.0, tau_grad=0.1)
    m = NetworkModel(
        (1, 1, 2),
        [LayerSpec.flatten(), LayerSpec.dense(2, 1, p)],
        [np.array([[0.01, 0.02]])],
    )
    x = np.random.default_rng(2).random((8, 2))
    out, trace = forward_features(m, x, training=True)
    assert out.v_pre_reset.max() < 0.9
    grads = backward(m, trace, d_rate=np.ones(1))
    assert not grads[0].any()


@pytest.mark.parametrize("seed", range(5))
def test_gradient_check_tiny(seed):
    rng = np.random.default_rng(100 + seed)
    m = random_tiny_net(rng)
    x = rng.random((2, 6, 4))
    res = check_gradients(m, x, np.array([0, 1]))
    assert res.max_rel_err <= 1e-4
    assert res.n_checked >= 12


def test_gradient_check_moving_window():
    rng = np.random.default_rng(7)
    m = random_tiny_net(rng)
    x = rng.random((8, 4))
    res = check_gradients(m, x, 1, LossConfig("moving_window", 3))
    assert res.max_rel_err <= 1e-4 and res.n_checked >= 12


def test_gradient_with_pool_front():
    """Gradients from a pooled network equal those of the same dense stack on pooled features."""
    rng = np.random.default_rng(8)
    m = spiking_dd(14, 21, pool_kernel=7, hidden=(3,), dtype=np.float64, seed=1)
    m = m.with_weights([w * 30 for w in m.weights])
    x = (rng.random((5, 2, 14, 21)) < 0.5).astype(np.uint8)
    _, trace = forward(m, x, training=True)
    feats = flatten(pool_forward(x, 7))
    _, trace2 = forward_features(m, feats, training=True)
    g1 = backward(m, trace, d_rate=np.array([0.3, -0.2]))
    g2 = backward(m, trace2, d_rate=np.array([0.3, -0.2]))
    assert all(np.array_equal(a, b) for a, b in zip(g1, g2))


# ------------------------------------------------------------------ checkpoint


def test_checkpoint_round_trip(tmp_path):
    m = spiking_dd(120, 160, seed=11)
    path = tmp_path / "m.sdd"
    save_checkpoint(m, path)
    back = load_checkpoint(path)
    assert back.input_geometry == m.input_geometry
    assert back.layers == m.layers
    assert all(np.array_equal(a, b) for a, b in zip(back.weights, m.weights))
    assert path.read_bytes()[:4] == b"SDD1"
    assert to_bytes(back) == path.read_bytes()


def test_checkpoint_crc_detects_corruption():
    raw = bytearray(to_bytes(spiking_dd(120, 160)))
    raw[100] ^= 0xFF
    with pytest.raises(CorruptArtifactError):
        from_bytes(bytes(raw))


@pytest.mark.parametrize("raw", [b"", b"SDD1", b"XXXX" + bytes(40)])
def test_checkpoint_garbage(raw):
    with pytest.raises(CorruptArtifactError):
        from_bytes(raw)


def test_default_neuron_values():
    from spikingdd.network import default_neuron

    n = default_neuron()
    assert (n.threshold, n.current_decay, n.voltage_decay, n.mode) == (1.25, 0.25, 0.03, "cuba")
    assert (n.tau_grad, n.scale_grad) == (3.0, 0.3)
    m = spiking_dd(14, 14)
    assert all(spec.neuron == n and spec.dropout_p == 0.05 for spec in m.dense_layers)
