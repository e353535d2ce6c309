"""Adversarial clients: poisoned local training and the malicious algorithms."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import engine
from .datasets import LabeledDataset, TriggerSpec, build_poison_set
from .engine import Model, ParameterSet
from .fl import ClientUpdate, make_update

ALGORITHMS = ("sgd", "pgd", "neurotoxin", "scaled")


@dataclass
class CoordinateMask:
    layout: engine.ParamLayout
    bits: np.ndarray  # bool, one per flat trainable coordinate

    @property
    def count(self) -> int:
        return int(self.bits.sum())

    def __or__(self, other: "CoordinateMask") -> "CoordinateMask":
        return CoordinateMask(self.layout, self.bits | other.bits)


@dataclass
class AttackConfig:
    algorithm: str = "sgd"
    trigger: Optional[TriggerSpec] = None
    plr: float = 0.05
    poison_fraction: float = 0.5
    epochs: int = 2
    batch_size: int = 32
    start: int = 0
    end: int = 10 ** 9  # exclusive
    colluders: int = 1
    dba_parts: int = 1
    pgd_radius: float = 1.0  # multiple of the previous round's mean benign norm
    neurotoxin_k: float = 50.0
    mask_per_step: bool = False
    scale: float = 1.0
    avoid_key_kernels: bool = False
    avoid_ratio: float = 0.15
    avoid_flood: int = 100
    avoid_shadow: int = 40

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown malicious algorithm {self.algorithm!r}")
        if not 0 <= self.neurotoxin_k < 100:
            raise ValueError("neurotoxin k must lie in [0, 100)")
        if self.pgd_radius <= 0 or self.scale < 1:
            raise ValueError("PGD radius must be > 0 and scale factor >= 1")
        if self.end <= self.start:
            raise ValueError("attack window is empty")
        if self.colluders < 1 or self.dba_parts < 1:
            raise ValueError("colluders and dba parts must be >= 1")


# ---------------------------------------------------------------------------
# building blocks


def pgd_project(candidate: ParameterSet, anchor: ParameterSet, radius: float) -> ParameterSet:
    """Project ``candidate`` onto the l2 ball of ``radius`` around ``anchor``."""
    if not radius > 0:
        raise ValueError("radius must be positive")
    dist = engine.l2_distance(candidate, anchor)
    if dist <= radius or math.isinf(radius):
        return candidate
    diff = candidate.data.astype(np.float64) - anchor.data.astype(np.float64)
    out = anchor.data.astype(np.float64) + diff * (radius / dist)
    return ParameterSet(candidate.layout, out.astype(candidate.data.dtype))


def neurotoxin_mask(benign_grad: ParameterSet, k: float) -> CoordinateMask:
    """Admit the ``ceil((100-k)% n)`` coordinates with the smallest |gradient|.

    Ties go to the lower flat index.
    """
    if not 0 <= k < 100:
        raise ValueError("k must lie in [0, 100)")
    n = benign_grad.layout.size
    keep = math.ceil(round((100 - k) * n / 100, 9))
    mag = np.abs(benign_grad.data)
    order = np.lexsort((np.arange(n), mag))
    bits = np.zeros(n, dtype=bool)
    bits[order[:keep]] = True
    return CoordinateMask(benign_grad.layout, bits)


def apply_mask(grad: ParameterSet, mask: CoordinateMask) -> ParameterSet:
    if grad.layout != mask.layout:
        raise engine.StructureMismatch("mask built for a different network")
    return ParameterSet(grad.layout, np.where(mask.bits, grad.data, np.zeros_like(grad.data)))


def scale_update(update: ClientUpdate, factor: float) -> ClientUpdate:
    if factor < 1:
        raise ValueError("scale factor must be >= 1")
    if factor == 1:
        return update
    return update.scaled(factor)


def adaptive_avoid(delta: ParameterSet, avoided: Optional[CoordinateMask]) -> ParameterSet:
    """Zero the delta inside the avoided key-kernel coordinates (BN pairs included)."""
    if avoided is None or avoided.count == 0:
        return delta
    if avoided.layout != delta.layout:
        raise engine.StructureMismatch("mask built for a different network")
    return ParameterSet(delta.layout, np.where(avoided.bits, np.zeros_like(delta.data), delta.data))


def _grid(parts: int):
    rows = max(r for r in range(1, int(math.isqrt(parts)) + 1) if parts % r == 0)
    return rows, parts // rows


def dba_split(trigger: TriggerSpec, parts: int) -> list:
    """Split a pixel-pattern trigger into ``parts`` disjoint grid blocks."""
    if parts == 1:
        return [trigger]
    if trigger.kind != "pixel-pattern":
        raise ValueError("only pixel-pattern triggers can be split")
    h, w = trigger.pattern.shape[-2:]
    rows, cols = _grid(parts)
    if rows > h or cols > w:
        raise ValueError(f"cannot split a {h}x{w} pattern into {parts} parts")
    r_edges = np.linspace(0, h, rows + 1).round().astype(int)
    c_edges = np.linspace(0, w, cols + 1).round().astype(int)
    out = []
    for i in range(rows):
        for j in range(cols):
            block = trigger.pattern[:, r_edges[i]:r_edges[i + 1], c_edges[j]:c_edges[j + 1]]
            loc = (trigger.location[0] + r_edges[i], trigger.location[1] + c_edges[j])
            out.append(replace(trigger, pattern=block.copy(), location=loc))
    return out


def benign_gradient(model: Model, data: LabeledDataset) -> ParameterSet:
    _, grad = engine.compute_gradient(model, data.images, data.labels, update_stats=False)
    return grad


# ---------------------------------------------------------------------------
# poisoned training


def poison_local_train(broadcast: Model, data: LabeledDataset, cfg: AttackConfig, rng: np.random.Generator,
                       client_id: int = -1, trigger: Optional[TriggerSpec] = None,
                       benign_norm: Optional[float] = None,
                       avoid: Optional[CoordinateMask] = None) -> ClientUpdate:
    trigger = trigger or cfg.trigger
    poison = build_poison_set(data, trigger, cfg.poison_fraction, rng)
    model = broadcast.copy()

    masks = []
    if avoid is not None and avoid.count:
        masks.append(~avoid.bits)
    if cfg.algorithm == "neurotoxin" and cfg.neurotoxin_k > 0:
        masks.append(neurotoxin_mask(benign_gradient(model, data), cfg.neurotoxin_k).bits)
    static = np.logical_and.reduce(masks) if masks else None

    def transform(grad):
        bits = static
        if cfg.algorithm == "neurotoxin" and cfg.mask_per_step and cfg.neurotoxin_k > 0:
            bits = neurotoxin_mask(benign_gradient(model, data), cfg.neurotoxin_k).bits
            if avoid is not None:
                bits = bits & ~avoid.bits
        if bits is None:
            return grad
        return ParameterSet(grad.layout, np.where(bits, grad.data, np.zeros_like(grad.data)))

    epoch_end = None
    if cfg.algorithm == "pgd":
        radius = cfg.pgd_radius * benign_norm if benign_norm else float("inf")

        def epoch_end(m):
            m.params = pgd_project(m.params, broadcast.params, radius)

    engine.train_sgd(model, poison.images, poison.labels, cfg.plr, cfg.epochs, cfg.batch_size, rng,
                     grad_transform=transform if (static is not None or cfg.mask_per_step) else None,
                     epoch_end=epoch_end)
    update = make_update(client_id, broadcast, model, malicious=True)
    if avoid is not None and avoid.count:
        update = ClientUpdate(client_id, adaptive_avoid(update.delta, avoid), update.bn_delta, malicious=True)
    if cfg.algorithm == "scaled":
        update = scale_update(update, cfg.scale)
    return update


class Adversary:
    """Controls ``client_ids`` during the attack window.

    With ``avoid_key_kernels`` the adversary reruns the key-kernel search on
    its own OOD images against every broadcast model and leaves those kernels
    untouched.
    """

    def __init__(self, cfg: AttackConfig, client_ids, ood_pool: Optional[LabeledDataset] = None,
                 label_space=None, seed: int = 0):
        self.cfg = cfg
        self.client_ids = [int(c) for c in client_ids]
        if len(self.client_ids) != cfg.colluders:
            raise ValueError("number of adversarial client ids must equal the colluder count")
        self.triggers = {}
        subs = dba_split(cfg.trigger, cfg.dba_parts) if cfg.dba_parts > 1 else None
        for j, cid in enumerate(self.client_ids):
            self.triggers[cid] = subs[j % len(subs)] if subs else cfg.trigger
        self.ood_pool = ood_pool
        self.label_space = label_space
        self.seed = seed
        self.last_avoid: Optional[CoordinateMask] = None
        self._avoid_round = None

    def active(self, round_idx: int) -> bool:
        return self.cfg.start <= round_idx < self.cfg.end

    def _avoid_mask(self, broadcast: Model, round_idx: int) -> Optional[CoordinateMask]:
        if not self.cfg.avoid_key_kernels:
            return None
        if self._avoid_round != round_idx:
            from .defenses.trojandam import build_flood, build_shadow, identify_key_kernels
            rng = np.random.default_rng(np.random.SeedSequence([self.seed, round_idx, 0xad]))
            n_f, n_s = self.cfg.avoid_flood, self.cfg.avoid_shadow
            pool = self.ood_pool
            perm = rng.permutation(len(pool))
            flood = build_flood(pool.images[perm[:n_f]], self.label_space, n_f, rng)
            shadow = build_shadow(pool.images[perm[n_f:]], broadcast, n_s)
            kk = identify_key_kernels(flood, shadow, self.cfg.avoid_ratio, broadcast)
            self.last_avoid = CoordinateMask(broadcast.layout, kk.mask)
            self._avoid_round = round_idx
        return self.last_avoid

    def craft(self, broadcast: Model, client_id: int, data: LabeledDataset, round_idx: int,
              rng: np.random.Generator, history: Optional[dict] = None) -> ClientUpdate:
        benign_norm = (history or {}).get("benign_norm")
        return poison_local_train(broadcast, data, self.cfg, rng, client_id, self.triggers[client_id],
                                  benign_norm, self._avoid_mask(broadcast, round_idx))
