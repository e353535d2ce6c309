import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from trojandam import engine
from trojandam.engine import BatchNorm, Conv2d, GlobalAvgPool, Linear, NetworkSpec, ParameterSet, ReLU

from helpers import finite_difference_check, net50, tiny_cnn


def make(spec, seed=0, dtype=np.float32):
    return engine.init_model(spec, np.random.default_rng(seed), dtype=dtype)


# --- structure -------------------------------------------------------------

def test_spec_rejects_missing_batchnorm():
    with pytest.raises(ValueError):
        NetworkSpec((1, 4, 4), (Conv2d(1, 2), ReLU(), GlobalAvgPool(), Linear(2, 3)))


def test_spec_rejects_channel_mismatch():
    with pytest.raises(ValueError):
        NetworkSpec((1, 4, 4), (Conv2d(1, 2), BatchNorm(3), ReLU(), GlobalAvgPool(), Linear(2, 3)))


def test_spec_needs_single_final_linear():
    with pytest.raises(ValueError):
        NetworkSpec((1, 4, 4), (Conv2d(1, 2), BatchNorm(2), ReLU(), GlobalAvgPool()))


def test_spec_dict_round_trip():
    spec = engine.small_cnn(3, 10, 8)
    assert NetworkSpec.from_dict(spec.to_dict()) == spec


def test_layout_roles_partition_and_feature_count():
    spec = engine.small_cnn(3, 10, 8, (8, 16))
    layout = engine.layout_for(spec)
    counts = np.bincount(layout.role, minlength=5)
    assert counts.sum() == layout.size
    # conv 8*3*9 + 16*8*9, bn 2*(8+16), fc 16*10 + 10
    assert counts[engine.CONV_KERNEL] == 8 * 27 + 16 * 72
    assert counts[engine.BN_SCALE] == counts[engine.BN_BIAS] == 24
    assert layout.n_feature == layout.size - (16 * 10 + 10)
    assert (layout.kernel_of[layout.classifier] == -1).all()
    assert len(layout.kernels) == 24


def test_kernel_group_holds_filter_and_bn_pair():
    layout = engine.layout_for(tiny_cnn())
    for kid in range(len(layout.kernels)):
        roles = sorted(layout.role[layout.kernel_of == kid].tolist())
        assert roles.count(engine.BN_SCALE) == 1 and roles.count(engine.BN_BIAS) == 1
        assert roles.count(engine.CONV_KERNEL) >= 9


def test_named_views_share_flat_storage():
    spec = tiny_cnn()
    p = ParameterSet.zeros(spec)
    p["fc7.bias"][...] = 5.0
    e = p.layout.by_name["fc7.bias"]
    assert (p.data[e.offset:e.offset + e.size] == 5.0).all()
    assert np.count_nonzero(p.data) == e.size


def test_structure_mismatch_is_rejected():
    a = ParameterSet.zeros(tiny_cnn())
    b = ParameterSet.zeros(tiny_cnn(widths=(2, 2)))
    with pytest.raises(engine.StructureMismatch):
        engine.l2_distance(a, b)
    with pytest.raises(engine.StructureMismatch):
        engine.sgd_step(a, b, 0.1)


# --- forward ---------------------------------------------------------------

def test_zero_network_gives_zero_logits():
    spec = engine.small_cnn(3, 10, 8)
    m = make(spec)
    m.params = ParameterSet.zeros(spec)
    x = np.random.default_rng(1).random((4, 3, 8, 8), dtype=np.float32)
    assert np.array_equal(engine.forward(m, x), np.zeros((4, 10), dtype=np.float32))


def test_eval_forward_is_deterministic():
    m = make(tiny_cnn())
    x = np.random.default_rng(2).random((5, 1, 5, 5), dtype=np.float32)
    assert np.array_equal(engine.forward(m, x), engine.forward(m, x))


def test_identity_network_by_hand():
    spec = NetworkSpec((1, 2, 2), (Conv2d(1, 1, 1, 1, 0), BatchNorm(1), ReLU(), GlobalAvgPool(), Linear(1, 1)))
    m = make(spec)
    m.params["conv0.weight"][...] = 1.0
    m.params["fc4.weight"][...] = 1.0
    m.params["fc4.bias"][...] = 0.0
    x = np.array([[[[0.2, 0.4], [0.6, 1.0]]]], dtype=np.float32)
    # eval BN: (v - 0) / sqrt(1 + eps), then ReLU, mean, identity classifier
    want = np.mean([0.2, 0.4, 0.6, 1.0]) / math.sqrt(1 + 1e-5)
    assert engine.forward(m, x)[0, 0] == pytest.approx(want, rel=1e-6)


def test_shape_mismatch_rejected():
    m = make(tiny_cnn())
    with pytest.raises(ValueError):
        engine.forward(m, np.zeros((2, 1, 6, 6), dtype=np.float32))


def test_non_finite_activation_names_layer():
    m = make(tiny_cnn())
    m.params["conv0.weight"][0, 0, 0, 0] = np.inf
    with pytest.raises(engine.NumericFailure) as err:
        engine.forward(m, np.ones((2, 1, 5, 5), dtype=np.float32))
    assert err.value.layer == "conv0"


# --- gradients -------------------------------------------------------------

def test_uniform_logits_cross_entropy():
    spec = engine.small_cnn(3, 10, 8)
    m = make(spec)
    m.params["fc7.weight"][...] = 0
    m.params["fc7.bias"][...] = 0
    x = np.random.default_rng(3).random((6, 3, 8, 8), dtype=np.float32)
    loss, _ = engine.compute_gradient(m, x, np.arange(6) % 10, update_stats=False)
    assert loss == pytest.approx(2.302585, abs=1e-6)


def test_prox_gradient_is_zero_at_anchor():
    m = make(tiny_cnn())
    x = np.random.default_rng(4).random((4, 1, 5, 5), dtype=np.float32)
    y = np.array([0, 1, 2, 0])
    _, g0 = engine.compute_gradient(m, x, y, update_stats=False)
    _, g1 = engine.compute_gradient(m, x, y, prox_lambda=0.8, anchor=m.params.copy(), update_stats=False)
    assert np.array_equal(g0.data, g1.data)


def test_prox_gradient_matches_normalized_difference():
    m = make(tiny_cnn(), dtype=np.float64)
    x = np.random.default_rng(5).random((4, 1, 5, 5))
    y = np.array([0, 1, 2, 0])
    anchor = m.params.copy()
    anchor.data[:] += np.random.default_rng(6).normal(size=anchor.data.size)
    _, g0 = engine.compute_gradient(m, x, y, update_stats=False)
    _, g1 = engine.compute_gradient(m, x, y, prox_lambda=0.8, anchor=anchor, update_stats=False)
    diff = m.params.data - anchor.data
    np.testing.assert_allclose(g1.data - g0.data, 0.8 * diff / np.linalg.norm(diff), rtol=1e-10, atol=1e-12)


@pytest.mark.parametrize("kwargs", [dict(prox_lambda=-1.0), dict(prox_lambda=0.5), dict(anchor="x")])
def test_gradient_argument_errors(kwargs):
    m = make(tiny_cnn())
    if kwargs.get("anchor") == "x":
        kwargs["anchor"] = m.params
    with pytest.raises(ValueError):
        engine.compute_gradient(m, np.zeros((2, 1, 5, 5)), [0, 1], **kwargs)


def test_empty_batch_rejected():
    m = make(tiny_cnn())
    with pytest.raises(ValueError):
        engine.compute_gradient(m, np.zeros((0, 1, 5, 5)), [])


def test_gradient_matches_finite_differences_on_50_parameter_net():
    m = make(net50(), seed=7, dtype=np.float64)
    rng = np.random.default_rng(8)
    x = rng.random((6, 1, 5, 5))
    worst, checked, _ = finite_difference_check(m, x, rng.integers(0, 4, 6))
    assert checked > 25 and worst <= 1.0


def test_squared_prox_option():
    m = make(tiny_cnn(), dtype=np.float64)
    x = np.random.default_rng(9).random((4, 1, 5, 5))
    y = np.array([0, 1, 2, 0])
    anchor = m.params.copy()
    anchor.data[:] -= 0.1
    l0, g0 = engine.compute_gradient(m, x, y, update_stats=False)
    l1, g1 = engine.compute_gradient(m, x, y, prox_lambda=0.5, anchor=anchor, squared_prox=True,
                                     update_stats=False)
    assert l1 - l0 == pytest.approx(0.5 * 0.01 * anchor.data.size)
    np.testing.assert_allclose(g1.data - g0.data, 2 * 0.5 * 0.1, rtol=1e-9)


# --- sgd / distance --------------------------------------------------------

def _flat(values):
    spec = NetworkSpec((1, 1, 1), (Conv2d(1, 1, 1, 1, 0), BatchNorm(1), ReLU(), GlobalAvgPool(), Linear(1, 1)))
    p = ParameterSet.zeros(spec)
    p.data[:len(values)] = values
    return p


def test_sgd_zero_lr_is_identity():
    p = _flat([1.0, 2.0])
    assert engine.sgd_step(p, _flat([3.0, 4.0]), 0.0).equals(p)


def test_sgd_arithmetic():
    out = engine.sgd_step(_flat([1.0, 2.0]), _flat([0.5, -0.5]), 2.0)
    assert out.data[:2].tolist() == [0.0, 3.0]


def test_sgd_on_quadratic():
    x = _flat([0.0])
    grad = _flat([2 * (x.data[0] - 3)])
    assert engine.sgd_step(x, grad, 0.25).data[0] == 1.5


def test_l2_distance_cases():
    a = _flat([0.0, 0.0])
    assert engine.l2_distance(a, a) == 0.0
    assert engine.l2_distance(_flat([3.0, 4.0]), a) == 5.0


def test_l2_distance_against_two_pass_sum():
    rng = np.random.default_rng(10)
    spec = engine.small_cnn(3, 10, 8)
    a, b = ParameterSet.zeros(spec), ParameterSet.zeros(spec)
    a.data[:] = rng.normal(size=a.data.size)
    b.data[:] = rng.normal(size=b.data.size)
    total = 0.0
    for u, v in zip(a.data.tolist(), b.data.tolist()):
        total += (u - v) ** 2
    assert engine.l2_distance(a, b) == pytest.approx(math.sqrt(total), rel=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3, width=32), min_size=3, max_size=3),
       st.lists(st.floats(-1e3, 1e3, width=32), min_size=3, max_size=3))
def test_add_sub_are_inverse(u, v):
    a, b = _flat(u), _flat(v)
    np.testing.assert_allclose(((a + b) - b).data, a.data, atol=1e-3)
    assert (a - a).norm() == 0.0


# --- batchnorm -------------------------------------------------------------

def test_bn_snapshot_restore_round_trip():
    m = make(tiny_cnn())
    snap = engine.bn_snapshot(m)
    conv = m.params["conv0.weight"].copy()
    rng = np.random.default_rng(11)
    for _ in range(5):
        engine.forward(m, rng.random((8, 1, 5, 5), dtype=np.float32), train=True)
    assert not m.bn.equals(snap)
    engine.bn_restore(m, snap)
    assert m.bn.equals(snap)
    assert np.array_equal(m.params["conv0.weight"], conv)


def test_bn_restore_rejects_other_network():
    a, b = make(tiny_cnn()), make(tiny_cnn(widths=(3, 3)))
    with pytest.raises(engine.StructureMismatch):
        engine.bn_restore(a, engine.bn_snapshot(b))


def test_bn_running_mean_momentum_update():
    m = make(tiny_cnn(), dtype=np.float64)
    old = m.bn.means[0].copy()
    x = np.random.default_rng(12).random((8, 1, 5, 5))
    _, cache = engine.forward(m, x, train=True, update_stats=False, keep_cache=True)
    # recompute the conv output by hand to get the batch mean per channel
    w = m.params["conv0.weight"]
    xp = np.pad(x[:, 0], ((0, 0), (1, 1), (1, 1)))
    conv = np.zeros((8, w.shape[0], 5, 5))
    for o in range(w.shape[0]):
        for i in range(5):
            for j in range(5):
                conv[:, o, i, j] = (xp[:, i:i + 3, j:j + 3] * w[o, 0]).sum(axis=(1, 2))
    batch_mean = conv.mean(axis=(0, 2, 3))
    engine.forward(m, x, train=True)
    np.testing.assert_allclose(m.bn.means[0], 0.9 * old + 0.1 * batch_mean, rtol=1e-10, atol=1e-12)


# --- predict ---------------------------------------------------------------

def _logit_model(logits):
    k = len(logits)
    spec = NetworkSpec((1, 1, 1), (Conv2d(1, 1, 1, 1, 0), BatchNorm(1), ReLU(), GlobalAvgPool(), Linear(1, k)))
    m = make(spec)
    m.params["fc4.weight"][...] = 0
    m.params["fc4.bias"][...] = logits
    return m


def test_predict_argmax_and_tie_rule():
    x = np.zeros((1, 1, 1, 1), dtype=np.float32)
    assert engine.predict(_logit_model([0.1, 0.9, 0.3]), x)[0] == 1
    assert engine.predict(_logit_model([0.5, 0.5]), x)[0] == 0


def test_batch_predict_equals_loop():
    m = make(engine.small_cnn(3, 10, 8))
    x = np.random.default_rng(13).random((20, 3, 8, 8), dtype=np.float32)
    loop = [engine.predict(m, x[i:i + 1])[0] for i in range(20)]
    assert engine.predict(m, x, batch_size=7).tolist() == loop


# --- determinism -----------------------------------------------------------

def test_training_is_deterministic():
    spec = tiny_cnn()
    x = np.random.default_rng(14).random((40, 1, 5, 5), dtype=np.float32)
    y = np.arange(40) % 3
    out = []
    for _ in range(2):
        m = make(spec, seed=3)
        engine.train_sgd(m, x, y, 0.1, 2, 8, np.random.default_rng(5))
        out.append(m)
    assert out[0].params.equals(out[1].params) and out[0].bn.equals(out[1].bn)
