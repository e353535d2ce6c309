"""Proactive robustification of redundant neurons with OOD flood/shadow data.

Each round, before broadcasting, the server

1. refreshes the noise masks and random labels of the flood set,
2. relabels a class-balanced shadow set with the current global model,
3. ranks conv kernels by how differently they respond to flood+shadow versus
   shadow alone and keeps the top ones (with their BN scale/bias) up to a
   parameter ratio,
4. trains only those coordinates on flood+shadow with a proximal penalty,
   then restores the BN running statistics.

Aggregation is adaptive norm clipping followed by the plain mean.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator

from .. import engine
from ..engine import Model, ParameterSet
from ..fl import DefenseHook, aggregate, clip_updates

log = logging.getLogger(__name__)


@dataclass
class TrojanDamConfig:
    flood_size: int = 800
    shadow_size: int = 300
    ratio: float = 0.15
    prox_lambda: float = 0.8
    epochs: int = 2
    lr: float = 0.05
    batch_size: int = 64
    noise_low: float = -0.5
    noise_high: float = 0.5
    start_round: int = 400
    score_mode: str = "abs"  # "abs" | "signed"
    squared_prox: bool = False
    clip: str = "mean"

    def __post_init__(self):
        if not 0 < self.ratio <= 1:
            raise ValueError("key-kernel ratio must lie in (0, 1]")
        if self.prox_lambda < 0 or self.flood_size < 1 or self.shadow_size < 1:
            raise ValueError("lambda must be >= 0 and dataset sizes >= 1")
        if self.noise_low != -self.noise_high:
            raise ValueError("noise range must be symmetric")
        if self.score_mode not in ("abs", "signed"):
            raise ValueError("score mode must be 'abs' or 'signed'")


PAPER_SCALE = dict(flood_size=800, shadow_size=300, ratio=0.15, prox_lambda=0.8, start_round=400)


# ---------------------------------------------------------------------------
# flood and shadow sets


@dataclass
class FloodDataset:
    base: np.ndarray
    masks: np.ndarray
    labels: np.ndarray
    label_space: tuple
    noise: float = 0.5
    refreshes: int = 0

    @property
    def images(self) -> np.ndarray:
        return self.base + self.masks

    def __len__(self):
        return len(self.labels)


def build_flood(pool: np.ndarray, label_space, size: int, rng: np.random.Generator,
                noise: float = 0.5) -> FloodDataset:
    pool = np.asarray(pool, dtype=np.float32)
    if len(pool) < size:
        raise ValueError(f"OOD pool has {len(pool)} images, flood set needs {size}")
    base = pool[np.sort(rng.permutation(len(pool))[:size])].copy()
    flood = FloodDataset(base, np.zeros_like(base), np.zeros(size, dtype=np.int64), tuple(label_space), noise, -1)
    return refresh_flood(flood, rng)


def refresh_flood(flood: FloodDataset, rng: np.random.Generator) -> FloodDataset:
    """New uniform noise masks and uniform random main-task labels; base images kept."""
    masks = rng.uniform(-flood.noise, flood.noise, size=flood.base.shape).astype(np.float32)
    labels = rng.choice(np.asarray(flood.label_space), size=len(flood.base))
    return FloodDataset(flood.base, masks, labels, flood.label_space, flood.noise, flood.refreshes + 1)


@dataclass
class ShadowDataset:
    images: np.ndarray
    labels: np.ndarray  # indices into the model's output classes
    counts: np.ndarray
    fallback: np.ndarray  # bool, True where the label is not the model's own prediction
    imbalanced: bool = False

    def __len__(self):
        return len(self.labels)


def build_shadow(pool: np.ndarray, model: Model, size: int) -> ShadowDataset:
    """Label OOD images by the model and keep a class-balanced subset.

    Each class gets up to ``ceil(size / K)`` images in pool order. A short class
    is filled with unused images that rank it second, by descending logit; if
    still short, with any unused images by descending logit for that class
    (and the set is flagged imbalanced in supply).
    """
    pool = np.asarray(pool, dtype=np.float32)
    if len(pool) < size:
        raise ValueError(f"OOD pool has {len(pool)} images, shadow set needs {size}")
    k = model.spec.n_classes
    logits = np.concatenate([engine.forward(model, pool[i:i + 512]) for i in range(0, len(pool), 512)])
    pred = np.argmax(logits, axis=1)
    quota = math.ceil(size / k)
    used = np.zeros(len(pool), dtype=bool)
    chosen = [[] for _ in range(k)]
    total = 0
    for i, c in enumerate(pred):
        if total >= size:
            break
        if len(chosen[c]) < quota:
            chosen[c].append(i)
            used[i] = True
            total += 1

    # classes that still need samples; the last ones get one fewer when size % k != 0
    need = {c: quota - len(chosen[c]) for c in range(k)}
    surplus = quota * k - size
    for c in sorted(range(k), key=lambda c: (-len(chosen[c]), c)):
        if surplus <= 0:
            break
        if need[c] > 0:
            need[c] -= 1
            surplus -= 1
    fallback = set()
    imbalanced = False
    second = np.argsort(-logits, axis=1, kind="stable")[:, 1] if k > 1 else pred
    for c in range(k):
        if need[c] <= 0:
            continue
        cand = np.flatnonzero(~used & (second == c))
        cand = cand[np.argsort(-logits[cand, c], kind="stable")][:need[c]]
        if len(cand) < need[c]:
            imbalanced = True
            rest = np.flatnonzero(~used)
            rest = rest[~np.isin(rest, cand)]
            rest = rest[np.argsort(-logits[rest, c], kind="stable")][:need[c] - len(cand)]
            cand = np.concatenate([cand, rest])
        for i in cand:
            chosen[c].append(int(i))
            used[i] = True
            fallback.add(int(i))
    if imbalanced:
        warnings.warn("shadow pool lacks predictions for some classes; filled by logit rank", RuntimeWarning)
    idx = np.array(sorted(i for ids in chosen for i in ids), dtype=np.int64)
    labels = np.empty(len(idx), dtype=np.int64)
    owner = {i: c for c in range(k) for i in chosen[c]}
    for j, i in enumerate(idx):
        labels[j] = owner[int(i)]
    counts = np.bincount(labels, minlength=k)
    return ShadowDataset(pool[idx], labels, counts, np.array([int(i) in fallback for i in idx]), imbalanced)


# ---------------------------------------------------------------------------
# key kernels


@dataclass
class KeyKernelMask:
    kernels: list  # selected kernel ids, in selection order
    mask: np.ndarray  # bool over the flat trainable coordinates
    ratio: float
    scores: np.ndarray

    @property
    def count(self) -> int:
        return int(self.mask.sum())


def kernel_scores(grad_mix: ParameterSet, grad_shadow: ParameterSet, mode: str = "abs") -> np.ndarray:
    """Mean over each conv filter's elements of the gradient difference."""
    layout = grad_mix.layout
    diff = grad_mix.data.astype(np.float64) - grad_shadow.data.astype(np.float64)
    if mode == "abs":
        diff = np.abs(diff)
    conv = layout.role == engine.CONV_KERNEL
    ids = layout.kernel_of[conv]
    sums = np.bincount(ids, weights=diff[conv], minlength=len(layout.kernels))
    sizes = np.bincount(ids, minlength=len(layout.kernels))
    return sums / sizes


def select_kernels(layout: engine.ParamLayout, scores: np.ndarray, ratio: float) -> KeyKernelMask:
    """Add kernels (with their BN pair) in descending score until the ratio is met."""
    order = np.lexsort((np.arange(len(scores)), -scores))
    mask = np.zeros(layout.size, dtype=bool)
    chosen = []
    count = 0
    for kid in order:
        if count / layout.n_feature >= ratio:
            break
        sel = layout.kernel_of == kid
        mask |= sel
        count += int(sel.sum())
        chosen.append(int(kid))
    achieved = count / layout.n_feature
    if len(chosen) == 1 and achieved > ratio:
        warnings.warn(f"ratio {ratio} is below one kernel's share; keeping the top kernel only", RuntimeWarning)
    return KeyKernelMask(chosen, mask, achieved, scores)


def identify_key_kernels(flood: FloodDataset, shadow: ShadowDataset, ratio: float, model: Model,
                         mode: str = "abs") -> KeyKernelMask:
    if not 0 < ratio <= 1:
        raise ValueError("ratio must lie in (0, 1]")
    if not model.layout.kernels:
        raise ValueError("model has no convolution kernels")
    label_idx = _label_index(model, flood)
    x_mix = np.concatenate([flood.images, shadow.images])
    y_mix = np.concatenate([label_idx, shadow.labels])
    _, g_mix = engine.compute_gradient(model, x_mix, y_mix, update_stats=False)
    _, g_shadow = engine.compute_gradient(model, shadow.images, shadow.labels, update_stats=False)
    return select_kernels(model.layout, kernel_scores(g_mix, g_shadow, mode), ratio)


def _label_index(model: Model, flood: FloodDataset) -> np.ndarray:
    # flood labels live in the main-task label space; the network indexes classes 0..K-1
    space = np.asarray(flood.label_space)
    return np.searchsorted(space, flood.labels)


# ---------------------------------------------------------------------------
# injection


def inject_ood_mappings(model: Model, flood: FloodDataset, shadow: ShadowDataset, mask: np.ndarray,
                        cfg: TrojanDamConfig, rng: np.random.Generator):
    """Train only the masked coordinates on flood+shadow; returns ``(model, losses)``.

    BN running statistics are restored afterwards and every coordinate outside
    ``mask`` keeps the exact bits of ``model``. A non-finite loss returns the
    input model unchanged.
    """
    if mask.shape != (model.layout.size,):
        raise engine.StructureMismatch("key-kernel mask built for a different network")
    snap = engine.bn_snapshot(model)
    work = model.copy()
    anchor = model.params
    x = np.concatenate([flood.images, shadow.images])
    y = np.concatenate([_label_index(model, flood), shadow.labels])
    losses = []
    lr = engine.DTYPE(cfg.lr)
    try:
        for _ in range(cfg.epochs):
            order = rng.permutation(len(y))
            for s in range(0, len(y), cfg.batch_size):
                idx = order[s:s + cfg.batch_size]
                if len(idx) < 2:
                    continue
                lam = cfg.prox_lambda if cfg.prox_lambda > 0 else 0.0
                loss, grad = engine.compute_gradient(work, x[idx], y[idx], prox_lambda=lam,
                                                     anchor=anchor if lam > 0 else None,
                                                     squared_prox=cfg.squared_prox)
                if not np.isfinite(loss):
                    raise engine.NumericFailure("injection", "non-finite loss")
                data = work.params.data.copy()
                data[mask] -= lr * grad.data[mask]
                work.params = ParameterSet(work.layout, data)
                losses.append(loss)
    except (engine.NumericFailure, FloatingPointError) as err:
        log.error("OOD injection aborted, broadcasting the unmodified model: %s", err)
        return model, losses
    engine.bn_restore(work, snap)
    return work, losses


class TrojanDam(BaseEstimator, DefenseHook):
    """Server hook; ``ood_pool`` holds OOD images (labels unused).

    Flood base images are fixed at construction; the remaining pool images
    form the shadow candidates.
    """

    name = "trojandam"

    def __init__(self, ood_pool=None, label_space=None, flood_size=800, shadow_size=300, shadow_pool=None,
                 ratio=0.15, prox_lambda=0.8, epochs=2, lr=0.05, batch_size=64, start_round=400,
                 score_mode="abs", clip="mean", clip_bound=None, seed=0):
        self.ood_pool = ood_pool
        self.label_space = label_space
        self.flood_size = flood_size
        self.shadow_size = shadow_size
        self.shadow_pool = shadow_pool
        self.ratio = ratio
        self.prox_lambda = prox_lambda
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.start_round = start_round
        self.score_mode = score_mode
        self.clip = clip
        self.clip_bound = clip_bound
        self.seed = seed
        self._flood = None
        self._diag = {}

    @property
    def config(self) -> TrojanDamConfig:
        return TrojanDamConfig(flood_size=self.flood_size, shadow_size=self.shadow_size, ratio=self.ratio,
                               prox_lambda=self.prox_lambda, epochs=self.epochs, lr=self.lr,
                               batch_size=self.batch_size, start_round=self.start_round,
                               score_mode=self.score_mode, clip=self.clip)

    def _setup(self):
        cfg = self.config
        pool = np.asarray(self.ood_pool, dtype=np.float32)
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, 0xf100d]))
        perm = rng.permutation(len(pool))
        n_shadow_pool = self.shadow_pool or len(pool) - cfg.flood_size
        if cfg.flood_size + n_shadow_pool > len(pool):
            raise ValueError("OOD pool too small for the flood set plus shadow candidates")
        self._flood = build_flood(pool[perm[:cfg.flood_size]], self.label_space, cfg.flood_size, rng)
        self._shadow_pool = pool[np.sort(perm[cfg.flood_size:cfg.flood_size + n_shadow_pool])]
        if len(self._shadow_pool) < cfg.shadow_size:
            raise ValueError("shadow candidate pool smaller than the shadow set")

    def pre_broadcast(self, model: Model, round_idx: int) -> Model:
        self._diag = {}
        if round_idx < self.start_round:
            return model
        if self._flood is None:
            self._setup()
        cfg = self.config
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, round_idx, 0xda3]))
        self._flood = refresh_flood(self._flood, rng)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            shadow = build_shadow(self._shadow_pool, model, cfg.shadow_size)
        key = identify_key_kernels(self._flood, shadow, cfg.ratio, model, cfg.score_mode)
        robust, losses = inject_ood_mappings(model, self._flood, shadow, key.mask, cfg, rng)
        self.last_mask = key
        self._diag = {
            "td_ratio": key.ratio,
            "td_loss_first": losses[0] if losses else float("nan"),
            "td_loss_last": losses[-1] if losses else float("nan"),
            "td_shadow_imbalanced": int(shadow.imbalanced),
        }
        return robust

    def aggregate(self, base: Model, updates: list, round_idx: int):
        clipped, gamma = clip_updates(updates, self.clip, self.clip_bound)
        return aggregate(base, clipped), {"gamma": gamma}
