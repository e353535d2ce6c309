import warnings

import numpy as np
import pytest
from scipy.stats import chisquare

from trojandam import engine
from trojandam.datasets import synth_generate
from trojandam.defenses import FoolsGold, MultiKrum, TrojanDam
from trojandam.defenses.baselines import foolsgold_weights, multi_krum
from trojandam.defenses.trojandam import (TrojanDamConfig, build_flood, build_shadow, identify_key_kernels,
                                          inject_ood_mappings, kernel_scores, refresh_flood, select_kernels)
from trojandam.engine import ParameterSet
from trojandam.fl import ClientUpdate

from helpers import tiny_cnn

LABELS = tuple(range(10))


def key_kernel_oracle(layout, g_mix, g_shadow, ratio):
    """Enumerate kernels, score by mean |difference| of filter entries, sort, accumulate."""
    kernels = []
    for kid in range(len(layout.kernels)):
        filt = np.flatnonzero((layout.kernel_of == kid) & (layout.role == engine.CONV_KERNEL))
        group = np.flatnonzero(layout.kernel_of == kid)
        diffs = [abs(float(g_mix.data[i]) - float(g_shadow.data[i])) for i in filt]
        kernels.append((sum(diffs) / len(diffs), kid, group))
    kernels.sort(key=lambda t: (-t[0], t[1]))
    mask = np.zeros(layout.size, bool)
    picked = []
    for score, kid, group in kernels:
        if mask.sum() / layout.n_feature >= ratio:
            break
        mask[group] = True
        picked.append(kid)
    return picked, mask


# --- flood -----------------------------------------------------------------

def test_flood_masks_in_range_and_fresh():
    rng = np.random.default_rng(0)
    pool = rng.random((10_000, 1, 2, 2), dtype=np.float32)
    flood = build_flood(pool, LABELS, 10_000, rng)
    assert flood.masks.min() >= -0.5 and flood.masks.max() <= 0.5
    nxt = refresh_flood(flood, rng)
    assert np.array_equal(nxt.base, flood.base)
    assert not np.any(np.all(nxt.masks == flood.masks, axis=(1, 2, 3)))
    assert np.any(nxt.labels != flood.labels)


def test_flood_labels_pass_chi_square():
    pool = np.zeros((800, 1, 2, 2), dtype=np.float32)
    for seed in range(20):
        flood = build_flood(pool, LABELS, 800, np.random.default_rng(seed))
        counts = np.bincount(flood.labels, minlength=10)
        assert chisquare(counts).pvalue > 0.01


def test_flood_pool_too_small():
    with pytest.raises(ValueError):
        build_flood(np.zeros((3, 1, 2, 2)), LABELS, 4, np.random.default_rng(0))


# --- shadow ----------------------------------------------------------------

def _balanced_pool_model(per=3):
    """1x1-input network that predicts class k for pixel value k; pool holds ``per`` images per class."""
    spec = engine.NetworkSpec((1, 1, 1), (engine.Conv2d(1, 1, 1, 1, 0), engine.BatchNorm(1), engine.ReLU(),
                                          engine.GlobalAvgPool(), engine.Linear(1, 10)))
    model = engine.init_model(spec, np.random.default_rng(0))
    model.params["conv0.weight"][...] = 1.0
    k = np.arange(10, dtype=np.float32)
    model.params["fc4.weight"][:, 0] = k
    model.params["fc4.bias"][...] = -k * k / 2
    pool = np.tile(k, per).reshape(-1, 1, 1, 1)
    assert np.array_equal(engine.predict(model, pool), np.tile(np.arange(10), per))
    return model, pool, per


def test_shadow_exactly_uniform_on_balanced_supply():
    model, pool, per = _balanced_pool_model()
    shadow = build_shadow(pool, model, 10 * per)
    assert shadow.counts.tolist() == [per] * 10
    assert not shadow.fallback.any()


def test_shadow_one_per_class():
    model, pool, _ = _balanced_pool_model()
    shadow = build_shadow(pool, model, 10)
    assert shadow.counts.tolist() == [1] * 10


def test_shadow_labels_match_predictions_and_balance():
    data = synth_generate(10, 40, 5, channels=1, seed=4)
    model = engine.init_model(tiny_cnn(1, 10, 5), np.random.default_rng(1), data.mean, data.std)
    engine.train_sgd(model, data.images, data.labels, 0.1, 3, 32, np.random.default_rng(0))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        shadow = build_shadow(data.images, model, 60)
    assert len(shadow) == 60
    own = ~shadow.fallback
    assert np.array_equal(engine.predict(model, shadow.images[own]), shadow.labels[own])
    if not shadow.imbalanced:
        assert shadow.counts.max() - shadow.counts.min() <= 1


def test_shadow_pool_too_small():
    with pytest.raises(ValueError):
        build_shadow(np.zeros((3, 1, 5, 5)), engine.init_model(tiny_cnn(1, 10), np.random.default_rng(0)), 4)


# --- key kernels -----------------------------------------------------------

def _random_grads(layout, rng):
    return (ParameterSet(layout, rng.normal(size=layout.size).astype(np.float32)),
            ParameterSet(layout, rng.normal(size=layout.size).astype(np.float32)))


def test_ratio_one_selects_every_kernel():
    layout = engine.layout_for(engine.small_cnn(3, 10, 8, (4, 6)))
    a, b = _random_grads(layout, np.random.default_rng(0))
    km = select_kernels(layout, kernel_scores(a, b), 1.0)
    assert sorted(km.kernels) == list(range(len(layout.kernels)))
    assert np.array_equal(km.mask, ~layout.classifier)


def test_top_kernel_with_its_bn_pair():
    layout = engine.layout_for(tiny_cnn())
    scores = np.zeros(len(layout.kernels))
    scores[1], scores[3] = 0.5, 0.1
    share = (layout.kernel_of == 1).sum() / layout.n_feature
    km = select_kernels(layout, scores, share)
    assert km.kernels == [1]
    roles = layout.role[km.mask]
    assert (roles == engine.BN_SCALE).sum() == 1 and (roles == engine.BN_BIAS).sum() == 1
    assert np.array_equal(km.mask, layout.kernel_of == 1)


def test_tiny_ratio_keeps_single_kernel_with_warning():
    layout = engine.layout_for(tiny_cnn())
    scores = np.arange(len(layout.kernels), dtype=float)
    with pytest.warns(RuntimeWarning):
        km = select_kernels(layout, scores, 1e-6)
    assert km.kernels == [len(layout.kernels) - 1]


@pytest.mark.filterwarnings("ignore:ratio .* below one kernel")
def test_algorithm_two_matches_enumeration_oracle():
    rng = np.random.default_rng(7)
    for trial in range(50):
        widths = tuple(int(w) for w in rng.integers(2, 7, size=2))
        layout = engine.layout_for(engine.small_cnn(int(rng.integers(1, 4)), 10, 6, widths))
        a, b = _random_grads(layout, rng)
        ratio = float(rng.uniform(0.05, 1.0))
        km = select_kernels(layout, kernel_scores(a, b), ratio)
        picked, mask = key_kernel_oracle(layout, a, b, ratio)
        assert km.kernels == picked
        assert np.array_equal(km.mask, mask)
        biggest = max((layout.kernel_of == k).sum() for k in range(len(layout.kernels)))
        assert ratio <= km.ratio <= ratio + biggest / layout.n_feature + 1e-12


def test_signed_scores_follow_the_literal_mean():
    layout = engine.layout_for(tiny_cnn())
    a, b = _random_grads(layout, np.random.default_rng(3))
    s = kernel_scores(a, b, "signed")
    filt = (layout.kernel_of == 0) & (layout.role == engine.CONV_KERNEL)
    assert s[0] == pytest.approx(np.mean(a.data[filt].astype(float) - b.data[filt].astype(float)))


# --- injection -------------------------------------------------------------

def _injection_setup(seed=0):
    main = synth_generate(10, 20, 8, seed=seed)
    ood = synth_generate(10, 30, 8, seed=seed + 100, label_offset=100)
    model = engine.init_model(engine.small_cnn(3, 10, 8, (4, 6)), np.random.default_rng(seed), main.mean, main.std)
    engine.train_sgd(model, main.images, main.labels, 0.1, 2, 32, np.random.default_rng(seed))
    rng = np.random.default_rng(seed)
    flood = build_flood(ood.images[:100], main.label_space, 100, rng)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        shadow = build_shadow(ood.images[100:], model, 40)
    return model, flood, shadow


def test_zero_epochs_is_bitwise_identity():
    model, flood, shadow = _injection_setup()
    km = identify_key_kernels(flood, shadow, 0.15, model)
    out, losses = inject_ood_mappings(model, flood, shadow, km.mask, TrojanDamConfig(epochs=0),
                                      np.random.default_rng(0))
    assert np.array_equal(out.params.data, model.params.data) and losses == []


def test_injection_touches_only_the_mask():
    model, flood, shadow = _injection_setup(1)
    km = identify_key_kernels(flood, shadow, 0.15, model)
    before_bn = engine.bn_snapshot(model)
    out, losses = inject_ood_mappings(model, flood, shadow, km.mask, TrojanDamConfig(epochs=2, lr=0.05),
                                      np.random.default_rng(0))
    changed = out.params.data != model.params.data
    assert changed.any()
    assert not changed[~km.mask].any()
    assert np.array_equal(out.params.data[model.layout.classifier], model.params.data[model.layout.classifier])
    assert out.bn.equals(before_bn)
    assert len(losses) > 0


def test_injection_fails_open_on_non_finite_loss():
    model, flood, shadow = _injection_setup(2)
    km = identify_key_kernels(flood, shadow, 0.15, model)
    flood.base[0, 0, 0, 0] = np.inf
    out, _ = inject_ood_mappings(model, flood, shadow, km.mask, TrojanDamConfig(epochs=1),
                                 np.random.default_rng(0))
    assert out is model


def test_trojandam_config_invariants():
    for bad in (dict(ratio=0), dict(ratio=1.5), dict(prox_lambda=-1), dict(flood_size=0),
                dict(noise_low=-0.2), dict(score_mode="median")):
        with pytest.raises(ValueError):
            TrojanDamConfig(**bad)


def test_hook_is_pass_through_before_start():
    model, _, _ = _injection_setup(3)
    ood = synth_generate(10, 30, 8, seed=103, label_offset=100)
    hook = TrojanDam(ood.images, LABELS, flood_size=100, shadow_size=40, start_round=5)
    assert hook.pre_broadcast(model, 4) is model
    out = hook.pre_broadcast(model, 5)
    assert out is not model
    assert hook.diagnostics["td_ratio"] >= 0.15


# --- Multi-Krum ------------------------------------------------------------

def _krum_oracle(values, f, m):
    """Exhaustive pairwise distances, recomputed after every pick."""
    remaining = list(range(len(values)))
    out = []
    for _ in range(m):
        best = None
        for i in remaining:
            d = sorted((values[i] - values[j]) ** 2 for j in remaining if j != i)
            score = sum(d[:len(remaining) - f - 1])
            if best is None or score < best[0] - 1e-15:
                best = (score, i)
        out.append(best[1])
        remaining.remove(best[1])
    return out


def test_multi_krum_hand_case():
    vals = [0.0, 0.1, 0.2, 10.0]
    assert multi_krum([[v] for v in vals], f=1, m=2) == [1, 0]
    assert _krum_oracle(vals, 1, 2) == [1, 0]


def test_multi_krum_identical_updates():
    assert len(multi_krum([[1.0, 2.0]] * 5, f=1, m=3)) == 3


def test_multi_krum_never_picks_outlier():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        honest = rng.normal(0, 1, size=(9, 20))
        outlier = rng.normal(0, 1, size=20) + 10 * np.sqrt(20)
        ups = list(honest) + [outlier]
        order = rng.permutation(10)
        picked = multi_krum([ups[i] for i in order], f=1, m=8)
        assert int(np.flatnonzero(order == 9)[0]) not in picked


def test_multi_krum_random_matches_oracle():
    rng = np.random.default_rng(0)
    for _ in range(30):
        vals = list(rng.normal(size=int(rng.integers(4, 9))))
        f = int(rng.integers(0, (len(vals) - 2) // 2 + 1))
        m = int(rng.integers(1, len(vals) - f + 1))
        assert multi_krum([[v] for v in vals], f, m) == _krum_oracle(vals, f, m)


def test_multi_krum_preconditions():
    with pytest.raises(ValueError):
        multi_krum([[0.0]] * 3, f=1, m=1)
    with pytest.raises(ValueError):
        multi_krum([[0.0]] * 4, f=1, m=4)


def test_multi_krum_hook_reports_selection():
    layout = engine.layout_for(tiny_cnn())
    ups = [ClientUpdate(i, ParameterSet(layout, np.full(layout.size, v, np.float32)), np.zeros(0))
           for i, v in enumerate([0.0, 0.1, 0.2, 10.0])]
    model = engine.init_model(tiny_cnn(), np.random.default_rng(0))
    model.bn.set_flat(np.zeros(0))
    hook = MultiKrum(f=1, m=2, clip="off")
    out, diag = hook.aggregate(model.copy(), [ClientUpdate(u.client_id, u.delta, np.zeros(model.bn.flat().size))
                                              for u in ups], 0)
    assert diag["krum_selected"] == "1 0"
    np.testing.assert_allclose(out.params.data - model.params.data, 0.05, atol=1e-6)


# --- Foolsgold -------------------------------------------------------------

def test_foolsgold_identical_histories_hit_the_floor():
    w = foolsgold_weights([[1.0, 0.0], [1.0, 0.0]])
    assert w.tolist() == [0.01, 0.01]


def test_foolsgold_orthogonal_histories_all_one():
    assert foolsgold_weights(np.eye(4)).tolist() == [1.0] * 4


def test_foolsgold_zero_history_gets_full_weight():
    w = foolsgold_weights([[0.0, 0.0], [1.0, 0.0], [1.0, 0.1]])
    assert w[0] == 1.0


def test_foolsgold_sybils_are_down_weighted():
    rng = np.random.default_rng(0)
    direction = rng.normal(size=200)
    sybils = [direction + 0.05 * rng.normal(size=200) for _ in range(4)]
    honest = [rng.normal(size=200) for _ in range(6)]
    w = foolsgold_weights(sybils + honest)
    assert w[:4].mean() < 0.2 and w[4:].mean() > 0.8


def test_foolsgold_needs_two_clients():
    with pytest.raises(ValueError):
        foolsgold_weights([[1.0]])
