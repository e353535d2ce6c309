"""FedAVG orchestration: selection, local training, clipping, aggregation, rounds."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import engine
from .datasets import LabeledDataset
from .engine import Model, ParameterSet

log = logging.getLogger(__name__)

CLIP_MODES = ("mean", "median", "fixed", "off")


@dataclass
class TrainConfig:
    lr: float = 0.05
    epochs: int = 2
    batch_size: int = 32
    weight_decay: float = 0.0

    def __post_init__(self):
        if not (np.isfinite(self.lr) and self.lr >= 0):
            raise ValueError("learning rate must be finite and non-negative")
        if self.epochs < 1 or self.batch_size < 1 or self.weight_decay < 0:
            raise ValueError("epochs and batch size must be >= 1, weight decay >= 0")


@dataclass
class RoundConfig:
    total_clients: int = 100
    per_round: int = 10
    seed: int = 0
    clip: str = "mean"
    clip_bound: Optional[float] = None  # only for clip == "fixed"

    def __post_init__(self):
        if not 1 <= self.per_round <= self.total_clients:
            raise ValueError("clients per round must lie in [1, total clients]")
        if self.clip not in CLIP_MODES:
            raise ValueError(f"clip mode must be one of {CLIP_MODES}")
        if self.clip == "fixed" and not (self.clip_bound and self.clip_bound > 0):
            raise ValueError("fixed clipping needs a positive bound")


@dataclass
class ClientUpdate:
    """Trainable-parameter delta plus the batchnorm running-statistics delta.

    ``norm`` covers the trainable delta only; the statistics are averaged but
    never clipped.
    """

    client_id: int
    delta: ParameterSet
    bn_delta: np.ndarray
    norm: float = -1.0
    malicious: bool = False  # ground truth for metrics, never read by defenses

    def __post_init__(self):
        if self.norm < 0:
            self.norm = self.delta.norm()

    def scaled(self, s: float) -> "ClientUpdate":
        return ClientUpdate(self.client_id, self.delta * np.float32(s), self.bn_delta, -1.0, self.malicious)


def client_rng(seed: int, round_idx: int, client_id: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, round_idx, client_id, stream]))


def select_clients(round_idx: int, cfg: RoundConfig) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, round_idx, 0x5e1ec7]))
    return np.sort(rng.choice(cfg.total_clients, size=cfg.per_round, replace=False))


def make_update(client_id: int, broadcast: Model, trained: Model, malicious: bool = False) -> ClientUpdate:
    return ClientUpdate(client_id, trained.params - broadcast.params,
                        trained.bn.flat() - broadcast.bn.flat(), malicious=malicious)


def local_train(broadcast: Model, data: LabeledDataset, cfg: TrainConfig, rng: np.random.Generator,
                client_id: int = -1) -> ClientUpdate:
    if len(data) == 0:
        raise ValueError("client dataset is empty")
    model = broadcast.copy()
    engine.train_sgd(model, data.images, data.labels, cfg.lr, cfg.epochs, cfg.batch_size, rng, cfg.weight_decay)
    return make_update(client_id, broadcast, model)


def clip_bound(norms, mode: str, fixed: Optional[float] = None) -> float:
    if mode == "mean":
        return float(np.mean(norms))
    if mode == "median":
        return float(np.median(norms))
    if mode == "fixed":
        return float(fixed)
    if mode == "off":
        return float("inf")
    raise ValueError(f"unknown clip mode {mode!r}")


def clip_updates(updates: list, mode: str = "mean", fixed: Optional[float] = None):
    """Scale each delta by ``1 / max(1, norm / gamma)``; returns ``(updates, gamma)``.

    Updates already within the bound are returned as the same objects.
    """
    if not updates:
        raise ValueError("no updates to clip")
    gamma = clip_bound([u.norm for u in updates], mode, fixed)
    out = []
    for u in updates:
        if u.norm <= gamma:
            out.append(u)
        else:
            out.append(u.scaled(gamma / u.norm))
    return out, gamma


def aggregate(base: Model, updates: list, weights=None) -> Model:
    """``base + mean(deltas)`` (weighted when ``weights`` is given), statistics included."""
    if not updates:
        return base.copy()
    for u in updates:
        base.params._check(u.delta)
        if u.bn_delta.shape != base.bn.flat().shape:
            raise engine.StructureMismatch("batchnorm delta does not match the model")
    deltas = np.stack([u.delta.data for u in updates]).astype(np.float64)
    stats = np.stack([u.bn_delta for u in updates]).astype(np.float64)
    if weights is None:
        mean_delta = deltas.mean(axis=0)
        mean_stats = stats.mean(axis=0)
    else:
        w = np.asarray(weights, dtype=np.float64)
        w = w / w.sum()
        mean_delta = w @ deltas
        mean_stats = w @ stats
    dt = base.params.data.dtype
    out = base.copy()
    # one rounding: the sum is formed in float64 and cast once
    out.params = ParameterSet(base.layout, (base.params.data.astype(np.float64) + mean_delta).astype(dt))
    out.bn.set_flat(base.bn.flat().astype(np.float64) + mean_stats)
    return out


class DefenseHook:
    """Server-side hook; the defaults are clipped FedAVG.

    ``pre_broadcast`` may robustify the global model before clients see it;
    ``aggregate`` turns the received updates into the next global model.
    """

    name = "nodefense"

    def __init__(self, clip: str = "mean", clip_bound: Optional[float] = None):
        self.clip = clip
        self.clip_bound = clip_bound

    def pre_broadcast(self, model: Model, round_idx: int) -> Model:
        return model

    def aggregate(self, base: Model, updates: list, round_idx: int):
        clipped, gamma = clip_updates(updates, self.clip, self.clip_bound)
        return aggregate(base, clipped), {"gamma": gamma}

    @property
    def diagnostics(self) -> dict:
        return getattr(self, "_diag", {})


@dataclass
class FLState:
    round: int
    model: Model
    clients: list  # LabeledDataset per client id
    seed: int = 0
    history: dict = field(default_factory=dict)  # free-form carry-over (e.g. last benign norm)


@dataclass
class RoundMetrics:
    round: int
    ma: float = float("nan")
    ba: float = float("nan")
    gamma: float = float("nan")
    norm_min: float = float("nan")
    norm_mean: float = float("nan")
    norm_max: float = float("nan")
    adversary: int = 0
    dropped: int = 0
    diagnostics: dict = field(default_factory=dict)
    wall_time: float = 0.0


def run_round(state: FLState, cfg: RoundConfig, train_cfg: TrainConfig, adversary=None,
              hook: Optional[DefenseHook] = None, workers: int = 1):
    """One FedAVG round; returns ``(next_state, RoundMetrics)``.

    Order: hook.pre_broadcast, selection, honest training and adversary
    crafting against the frozen broadcast, hook.aggregate.
    """
    t0 = time.perf_counter()
    hook = hook or DefenseHook(cfg.clip, cfg.clip_bound)
    t = state.round
    broadcast = hook.pre_broadcast(state.model, t)
    selected = [int(c) for c in select_clients(t, cfg)]

    malicious = []
    if adversary is not None and adversary.active(t):
        malicious = list(adversary.client_ids)
        if 2 * len(malicious) > cfg.per_round:
            raise ValueError("adversary may control at most half of the selected clients")
        # colluding clients take the last selection slots
        honest = [c for c in selected if c not in malicious]
        selected = sorted(honest[:cfg.per_round - len(malicious)] + malicious)

    def work(cid):
        rng = client_rng(state.seed, t, cid)
        try:
            if cid in malicious:
                return adversary.craft(broadcast, cid, state.clients[cid], t, rng, state.history)
            return local_train(broadcast, state.clients[cid], train_cfg, rng, cid)
        except (engine.NumericFailure, FloatingPointError) as err:
            log.warning("round %d: client %d dropped (%s)", t, cid, err)
            return None

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(work, selected))
    else:
        results = [work(c) for c in selected]
    updates = [u for u in results if u is not None]
    benign_norms = [u.norm for u in updates if not u.malicious]
    if benign_norms:
        state.history["benign_norm"] = float(np.mean(benign_norms))

    next_model, diag = hook.aggregate(broadcast, updates, t) if updates else (broadcast.copy(), {})
    norms = [u.norm for u in updates] or [float("nan")]
    metrics = RoundMetrics(
        round=t, gamma=float(diag.pop("gamma", float("nan"))),
        norm_min=float(np.min(norms)), norm_mean=float(np.mean(norms)), norm_max=float(np.max(norms)),
        adversary=len(malicious), dropped=len(results) - len(updates),
        diagnostics={**hook.diagnostics, **diag})
    metrics.wall_time = time.perf_counter() - t0
    nxt = FLState(t + 1, next_model, state.clients, state.seed, state.history)
    return nxt, metrics
