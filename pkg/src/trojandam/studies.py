"""Centralized motivation studies and multi-run FL studies.

``activation_study`` trains one model on main data mixed with randomly
relabelled OOD data, one on main data only and one on OOD data only, then
counts gradient coordinates above a threshold on a fixed main-task probe set.
``kernel_vs_neuron_study`` compares key-kernel selection with per-coordinate
selection when injecting flood mappings. ``neurotoxin_study`` sweeps the
Neurotoxin exclusion percentage through full FL runs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import engine
from .config import ExperimentConfig
from .datasets import synth_generate
from .defenses.trojandam import (TrojanDamConfig, _label_index, build_flood, build_shadow, identify_key_kernels,
                                 inject_ood_mappings, refresh_flood)
from .metrics import activation_histogram, gradient_magnitudes

log = logging.getLogger(__name__)

DEFAULT_BINS = (0.0, 0.0005, 0.001, 0.002, 0.005, 0.01, 0.02, 0.03, 0.05, 0.07, 0.1)


@dataclass
class ActivationSettings:
    main_samples: int = 500  # N
    ood_samples: int = 500  # M
    iterations: int = 300
    batch_size: int = 32
    lr: float = 0.05
    relabel_every: int = 10  # iterations between fresh OOD labels
    probe_samples: int = 500
    threshold: float = 0.02
    threshold_quantile: Optional[float] = None  # overrides ``threshold`` when set
    bins: tuple = DEFAULT_BINS
    seeds: tuple = (0, 1, 2)

    @classmethod
    def from_config(cls, cfg: ExperimentConfig, key: str = "activation") -> "ActivationSettings":
        raw = dict(cfg.study.get(key, {}))
        if "bins" in raw:
            raw["bins"] = tuple(raw["bins"])
        if "seeds" in raw:
            raw["seeds"] = tuple(raw["seeds"])
        return cls(**raw)


def _study_data(cfg: ExperimentConfig, seed: int):
    d, o = cfg.data, cfg.ood
    main = synth_generate(d.classes, d.per_class, d.image_size, seed=d.seed + 7919 * seed,
                          channels=d.channels, noise=d.noise)
    ood = synth_generate(o.classes, o.per_class, d.image_size, seed=o.seed + 7919 * seed,
                         channels=d.channels, label_offset=o.label_offset, noise=o.noise)
    return main, ood


def _train_mixture(model, images, labels, is_ood, label_space, s: ActivationSettings, rng):
    """SGD for a fixed number of iterations; OOD samples get fresh random labels periodically."""
    labels = labels.copy()
    n = len(labels)
    ood_idx = np.flatnonzero(is_ood)
    order = rng.permutation(n)
    pos = 0
    for it in range(s.iterations):
        if len(ood_idx) and it % s.relabel_every == 0:
            labels[ood_idx] = rng.integers(0, len(label_space), size=len(ood_idx))
        if pos + s.batch_size > n:
            order = rng.permutation(n)
            pos = 0
        idx = order[pos:pos + s.batch_size]
        pos += s.batch_size
        _, grad = engine.compute_gradient(model, images[idx], labels[idx])
        model.params = engine.sgd_step(model.params, grad, s.lr)


def activation_study(cfg: ExperimentConfig, settings: Optional[ActivationSettings] = None) -> dict:
    """Gradient-activation counts for mixed (D1), main-only (D2) and OOD-only (D3) training."""
    s = settings or ActivationSettings.from_config(cfg)
    out = {"thresholds": [], "bins": list(s.bins), "seeds": list(s.seeds),
           "counts": {"mixed": [], "main": [], "ood": []}, "histograms": {"mixed": [], "main": [], "ood": []}}
    for seed in s.seeds:
        main, ood = _study_data(cfg, seed)
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, seed, 0xac7]))
        pick = rng.permutation(len(main))
        n_total = s.main_samples + s.ood_samples
        if n_total > len(main) - s.probe_samples or n_total > len(ood):
            raise ValueError("study sizes exceed the generated data")
        probe = main.subset(pick[:s.probe_samples])
        main_pool = pick[s.probe_samples:]
        ood_pick = rng.permutation(len(ood))
        c, h, _ = main.images.shape[1:]
        spec = engine.small_cnn(c, len(main.label_space), h, tuple(cfg.model.widths))
        init = engine.init_model(spec, np.random.default_rng(np.random.SeedSequence([cfg.seed, seed, 0x1417])),
                                 main.mean, main.std)
        sets = {
            "mixed": (np.concatenate([main.images[main_pool[:s.main_samples]], ood.images[ood_pick[:s.ood_samples]]]),
                      np.concatenate([main.labels[main_pool[:s.main_samples]], np.zeros(s.ood_samples, int)]),
                      np.r_[np.zeros(s.main_samples, bool), np.ones(s.ood_samples, bool)]),
            "main": (main.images[main_pool[:n_total]], main.labels[main_pool[:n_total]], np.zeros(n_total, bool)),
            "ood": (ood.images[ood_pick[:n_total]], np.zeros(n_total, int), np.ones(n_total, bool)),
        }
        models = {}
        for name, (x, y, is_ood) in sets.items():
            model = init.copy()
            train_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, seed, 0x7a1]))
            _train_mixture(model, x, y, is_ood, main.label_space, s, train_rng)
            models[name] = model
        threshold = s.threshold
        if s.threshold_quantile is not None:
            # calibrated on the main-only model: its upper tail defines "active"
            threshold = float(np.quantile(gradient_magnitudes(models["main"], probe.images, probe.labels),
                                          s.threshold_quantile))
        out["thresholds"].append(threshold)
        for name, model in models.items():
            hist, active = activation_histogram(model, probe.images, probe.labels, s.bins, threshold)
            out["counts"][name].append(active)
            out["histograms"][name].append(hist.tolist())
    out["median"] = {k: float(np.median(v)) for k, v in out["counts"].items()}
    return out


# ---------------------------------------------------------------------------
# kernel- vs neuron-level selection


def select_neurons(layout: engine.ParamLayout, grad_mix: engine.ParameterSet, grad_shadow: engine.ParameterSet,
                   ratio: float) -> np.ndarray:
    """Top feature coordinates by |difference| until the ratio is met; BN pairs not forced."""
    diff = np.abs(grad_mix.data.astype(np.float64) - grad_shadow.data.astype(np.float64))
    feature = np.flatnonzero(~layout.classifier)
    k = min(len(feature), int(np.ceil(ratio * layout.n_feature)))
    order = feature[np.lexsort((feature, -diff[feature]))]
    mask = np.zeros(layout.size, dtype=bool)
    mask[order[:k]] = True
    return mask


@dataclass
class KernelStudySettings:
    pretrain_epochs: int = 10
    rounds: int = 30
    ratio: float = 0.15
    flood_size: int = 200
    shadow_size: int = 60
    epochs: int = 2
    lr: float = 0.05
    prox_lambda: float = 0.8
    probe_samples: int = 500
    threshold: float = 0.005
    seeds: tuple = (0, 1, 2)
    modes: tuple = ("kernel", "neuron", "whole")

    @classmethod
    def from_config(cls, cfg: ExperimentConfig) -> "KernelStudySettings":
        raw = dict(cfg.study.get("kernels", {}))
        for key in ("seeds", "modes"):
            if key in raw:
                raw[key] = tuple(raw[key])
        return cls(**raw)


def _mode_mask(mode, model, flood, shadow, ratio):
    layout = model.layout
    if mode == "whole":
        return ~layout.classifier
    if mode == "kernel":
        return identify_key_kernels(flood, shadow, ratio, model).mask
    x_mix = np.concatenate([flood.images, shadow.images])
    y_mix = np.concatenate([_label_index(model, flood), shadow.labels])
    _, g_mix = engine.compute_gradient(model, x_mix, y_mix, update_stats=False)
    _, g_s = engine.compute_gradient(model, shadow.images, shadow.labels, update_stats=False)
    return select_neurons(layout, g_mix, g_s, ratio)


def kernel_vs_neuron_study(cfg: ExperimentConfig, settings: Optional[KernelStudySettings] = None) -> dict:
    """Active-coordinate counts per injection round for each parameter-selection mode."""
    s = settings or KernelStudySettings.from_config(cfg)
    tcfg = TrojanDamConfig(flood_size=s.flood_size, shadow_size=s.shadow_size, ratio=s.ratio,
                           prox_lambda=s.prox_lambda, epochs=s.epochs, lr=s.lr)
    out = {"threshold": s.threshold, "seeds": list(s.seeds), "modes": list(s.modes),
           "curves": {m: [] for m in s.modes}, "selected": {m: [] for m in s.modes}}
    for seed in s.seeds:
        main, ood = _study_data(cfg, seed)
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, seed, 0x4e7]))
        pick = rng.permutation(len(main))
        probe = main.subset(pick[:s.probe_samples])
        train = main.subset(pick[s.probe_samples:])
        c, h, _ = main.images.shape[1:]
        spec = engine.small_cnn(c, len(main.label_space), h, tuple(cfg.model.widths))
        base = engine.init_model(spec, np.random.default_rng(np.random.SeedSequence([cfg.seed, seed, 0x1417])),
                                 main.mean, main.std)
        engine.train_sgd(base, train.images, train.labels, cfg.train.lr, s.pretrain_epochs,
                         cfg.train.batch_size, np.random.default_rng(np.random.SeedSequence([cfg.seed, seed, 1])))
        if len(ood) < s.flood_size + s.shadow_size:
            raise ValueError("OOD pool too small for the flood and shadow sets")
        ood_perm = rng.permutation(len(ood))
        flood_pool = ood.images[ood_perm[:s.flood_size]]
        shadow_pool = ood.images[ood_perm[s.flood_size:]]
        for mode in s.modes:
            model = base.copy()
            frng = np.random.default_rng(np.random.SeedSequence([cfg.seed, seed, 0xf100d]))
            flood = build_flood(flood_pool, main.label_space, s.flood_size, frng)
            curve = []
            for r in range(s.rounds):
                flood = refresh_flood(flood, frng)
                shadow = build_shadow(shadow_pool, model, s.shadow_size)
                mask = _mode_mask(mode, model, flood, shadow, s.ratio)
                model, _ = inject_ood_mappings(model, flood, shadow, mask, tcfg, frng)
                _, active = activation_histogram(model, probe.images, probe.labels, DEFAULT_BINS, s.threshold)
                curve.append(active)
            out["curves"][mode].append(curve)
            out["selected"][mode].append(int(mask.sum()))
    out["final_median"] = {m: float(np.median([c[-1] for c in out["curves"][m]])) for m in s.modes}
    return out


# ---------------------------------------------------------------------------
# FL sweeps


def neurotoxin_study(cfg: ExperimentConfig, out_dir, ks=None, seeds=None, workers: int = 1) -> dict:
    """Final BA of Neurotoxin runs for each exclusion percentage k and seed."""
    from .runner import run_experiment
    study = cfg.study.get("neurotoxin", {})
    ks = list(ks if ks is not None else study.get("ks", [0, 50, 90]))
    seeds = list(seeds if seeds is not None else study.get("seeds", [0, 1, 2]))
    out = {"ks": ks, "seeds": seeds, "final_ba": {}, "final_ma": {}}
    for k in ks:
        bas, mas = [], []
        for seed in seeds:
            run_cfg = cfg.replace(**{"seed": seed, "attack.algorithm": "neurotoxin", "attack.neurotoxin_k": k,
                                     "attack.enabled": True, "workers": workers})
            summary = run_experiment(run_cfg, Path(out_dir) / f"k{k:g}" / f"seed{seed}")
            bas.append(summary["final_ba"])
            mas.append(summary["final_ma"])
        out["final_ba"][str(k)] = bas
        out["final_ma"][str(k)] = mas
    out["median_ba"] = {k: float(np.median(v)) for k, v in out["final_ba"].items()}
    return out


def is_non_decreasing(values, tol: float = 0.0) -> bool:
    return all(b >= a - tol for a, b in zip(values, values[1:]))
