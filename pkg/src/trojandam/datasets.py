"""Main-task and OOD data, non-IID client partitioning, triggers and poisoning."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


@dataclass
class LabeledDataset:
    images: np.ndarray  # (n, C, H, W) in [0, 1]
    labels: np.ndarray
    label_space: tuple = ()
    groups: Optional[np.ndarray] = None  # sub-cluster id per sample, synthetic data only
    mean: Optional[np.ndarray] = None
    std: Optional[np.ndarray] = None
    poisoned: Optional[np.ndarray] = None  # indices carrying the trigger, poison sets only

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError("images must be (n, channels, height, width)")
        if len(self.images) != len(self.labels):
            raise ValueError("image and label counts differ")
        if not self.label_space:
            self.label_space = tuple(int(c) for c in np.unique(self.labels))
        self.label_space = tuple(sorted(int(c) for c in self.label_space))
        if len(self.labels) and not np.isin(self.labels, self.label_space).all():
            raise ValueError("label outside the dataset's label space")
        if self.mean is None and len(self.images):
            self.mean = self.images.mean(axis=(0, 2, 3))
            self.std = self.images.std(axis=(0, 2, 3)) + 1e-6

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.images[idx], self.labels[idx], self.label_space,
                              None if self.groups is None else self.groups[idx], self.mean, self.std)

    def concat(self, other: "LabeledDataset") -> "LabeledDataset":
        groups = None
        if self.groups is not None and other.groups is not None:
            groups = np.concatenate([self.groups, other.groups])
        return LabeledDataset(np.concatenate([self.images, other.images]),
                              np.concatenate([self.labels, other.labels]),
                              tuple(sorted(set(self.label_space) | set(other.label_space))),
                              groups, self.mean, self.std)

    def split(self, test_fraction: float, rng: np.random.Generator):
        """Stratified train/test split."""
        train, test = [], []
        for c in self.label_space:
            idx = rng.permutation(np.flatnonzero(self.labels == c))
            k = int(round(test_fraction * len(idx)))
            test.append(idx[:k])
            train.append(idx[k:])
        return self.subset(np.sort(np.concatenate(train))), self.subset(np.sort(np.concatenate(test)))


def check_disjoint_labels(main: LabeledDataset, ood: LabeledDataset) -> None:
    overlap = set(main.label_space) & set(ood.label_space)
    if overlap:
        raise ValueError(f"main-task and OOD label spaces overlap: {sorted(overlap)}")


# ---------------------------------------------------------------------------
# synthetic data


def _smooth_field(rng, channels, size, coarse):
    low = rng.normal(size=(channels, coarse, coarse))
    reps = int(np.ceil(size / coarse))
    up = np.kron(low, np.ones((reps, reps)))[:, :size, :size]
    # 3x3 box blur to soften the block edges
    pad = np.pad(up, ((0, 0), (1, 1), (1, 1)), mode="edge")
    out = sum(pad[:, a:a + size, b:b + size] for a in range(3) for b in range(3)) / 9.0
    return out / (out.std() + 1e-8)


def synth_generate(classes: int, per_class: int, image_size: int = 16, seed: int = 0,
                   channels: int = 3, label_offset: int = 0, subclusters: int = 2,
                   noise: float = 0.25, rank: int = 4) -> LabeledDataset:
    """Gaussian class blobs rendered as images.

    Each class has a mean image (a class colour plus an oriented stripe texture
    plus a smooth field), a class-specific low-rank covariance and isotropic
    pixel noise. Each class is split into ``subclusters`` sub-clusters whose
    means differ by a smooth offset; ``groups`` records the sub-cluster id.
    """
    if classes < 2 or per_class < 1 or image_size < 2 or channels < 1:
        raise ValueError("degenerate synthetic dataset size")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:image_size, 0:image_size] / image_size
    images, labels, groups = [], [], []
    for c in range(classes):
        colour = rng.uniform(0.25, 0.75, size=(channels, 1, 1))
        theta = np.pi * c / classes + rng.uniform(0, np.pi / (2 * classes))
        freq = rng.uniform(1.5, 3.5)
        stripes = np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)))
        tint = rng.uniform(-1, 1, size=(channels, 1, 1))
        mean = colour + 0.18 * tint * stripes[None] + 0.06 * _smooth_field(rng, channels, image_size, 4)
        factors = np.stack([_smooth_field(rng, channels, image_size, 4) for _ in range(rank)])
        offsets = [0.12 * _smooth_field(rng, channels, image_size, 2) for _ in range(subclusters)]
        sub = np.arange(per_class) % subclusters
        z = rng.normal(size=(per_class, rank))
        x = (mean[None] + np.stack([offsets[g] for g in sub])
             + 0.08 * np.tensordot(z, factors, axes=1)
             + noise * rng.normal(size=(per_class, channels, image_size, image_size)))
        images.append(np.clip(x, 0.0, 1.0))
        labels.append(np.full(per_class, c + label_offset))
        groups.append(sub)
    return LabeledDataset(np.concatenate(images).astype(np.float32), np.concatenate(labels),
                          tuple(range(label_offset, label_offset + classes)), np.concatenate(groups))


# ---------------------------------------------------------------------------
# IDX files


class IDXFormatError(ValueError):
    pass


class IDXMagicError(IDXFormatError):
    pass


class IDXCountMismatch(IDXFormatError):
    pass


class IDXTruncated(IDXFormatError):
    pass


def _read_idx(path, magic: int, ndim: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise IDXTruncated(f"{path}: missing header")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise IDXMagicError(f"{path}: magic 0x{got:08x}, expected 0x{magic:08x}")
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise IDXTruncated(f"{path}: truncated dimension header")
    dims = struct.unpack(">" + "I" * ndim, raw[4:head])
    n = int(np.prod(dims))
    if len(raw) - head < n:
        raise IDXTruncated(f"{path}: expected {n} data bytes, found {len(raw) - head}")
    return np.frombuffer(raw, dtype=np.uint8, count=n, offset=head).reshape(dims)


def load_idx(images_path, labels_path) -> LabeledDataset:
    images = _read_idx(images_path, IMAGE_MAGIC, 3)
    labels = _read_idx(labels_path, LABEL_MAGIC, 1)
    if len(images) != len(labels):
        raise IDXCountMismatch(f"{len(images)} images but {len(labels)} labels")
    return LabeledDataset(images[:, None].astype(np.float32) / 255.0, labels.astype(np.int64))


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 images (n, H, W) or (n, 1, H, W), or [0,1] floats, plus labels."""
    images = np.asarray(images)
    if images.ndim == 4:
        images = images[:, 0]
    if images.dtype != np.uint8:
        images = np.clip(np.round(images * 255.0), 0, 255).astype(np.uint8)
    labels = np.asarray(labels).astype(np.uint8)
    Path(images_path).write_bytes(struct.pack(">IIII", IMAGE_MAGIC, *images.shape) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", LABEL_MAGIC, len(labels)) + labels.tobytes())


# ---------------------------------------------------------------------------
# partitioning


@dataclass
class PartitionPlan:
    clients: list
    alpha: float
    seed: int

    @property
    def sizes(self):
        return [len(c) for c in self.clients]


def dirichlet_partition(dataset: LabeledDataset, n_clients: int, alpha: float, seed: int) -> PartitionPlan:
    """Per-class Dirichlet split; empty clients take one sample from the largest."""
    if n_clients < 1:
        raise ValueError("need at least one client")
    if alpha <= 0:
        raise ValueError("Dirichlet alpha must be positive")
    if len(dataset) < n_clients:
        raise ValueError("fewer samples than clients")
    rng = np.random.default_rng(seed)
    buckets = [[] for _ in range(n_clients)]
    for c in dataset.label_space:
        idx = rng.permutation(np.flatnonzero(dataset.labels == c))
        shares = rng.dirichlet(np.full(n_clients, alpha))
        cuts = np.round(np.cumsum(shares) * len(idx)).astype(int)
        cuts[-1] = len(idx)
        start = 0
        for k, stop in enumerate(cuts):
            buckets[k].extend(idx[start:stop].tolist())
            start = max(start, stop)
    for k in range(n_clients):
        if not buckets[k]:
            donor = max(range(n_clients), key=lambda j: (len(buckets[j]), -j))
            buckets[k].append(buckets[donor].pop())
    return PartitionPlan([np.sort(np.asarray(b, dtype=np.int64)) for b in buckets], float(alpha), int(seed))


def label_entropy(dataset: LabeledDataset, plan: PartitionPlan) -> np.ndarray:
    """Shannon entropy (nats) of each client's label histogram."""
    out = []
    for idx in plan.clients:
        _, counts = np.unique(dataset.labels[idx], return_counts=True)
        p = counts / counts.sum()
        out.append(float(-(p * np.log(p)).sum()))
    return np.asarray(out)


# ---------------------------------------------------------------------------
# triggers


@dataclass
class TriggerSpec:
    kind: str  # "pixel-pattern" | "blended" | "subpopulation"
    target: int
    pattern: Optional[np.ndarray] = None  # (C, h, w) stamp values
    location: tuple = (0, 0)
    blend: Optional[np.ndarray] = None  # (C, H, W) trigger image
    alpha: float = 0.2
    source_classes: Optional[tuple] = None  # TaCT restriction
    subpopulation: Optional[tuple] = None  # (class, group)

    def validate(self, image_shape: Optional[Sequence[int]] = None, label_space=None) -> None:
        if self.kind not in ("pixel-pattern", "blended", "subpopulation"):
            raise ValueError(f"unknown trigger kind {self.kind!r}")
        if label_space is not None and self.target not in label_space:
            raise ValueError("trigger target is not a main-task label")
        if self.kind == "pixel-pattern":
            if self.pattern is None:
                raise ValueError("pixel-pattern trigger needs a pattern")
            if image_shape is not None:
                c, h, w = image_shape
                r, col = self.location
                if (r < 0 or col < 0 or r + self.pattern.shape[-2] > h or col + self.pattern.shape[-1] > w
                        or self.pattern.shape[0] not in (1, c)):
                    raise ValueError("trigger pattern does not fit inside the image")
        elif self.kind == "blended":
            if self.blend is None or not 0 <= self.alpha < 1:
                raise ValueError("blended trigger needs a trigger image and alpha in [0, 1)")
            if image_shape is not None and tuple(self.blend.shape) != tuple(image_shape):
                raise ValueError("blend image shape differs from the input shape")
        elif self.subpopulation is None:
            raise ValueError("subpopulation trigger needs a (class, group) selector")


def corner_stamp(channels: int, size: int = 3, target: int = 3, location=(0, 0)) -> TriggerSpec:
    """Checkerboard ``size`` x ``size`` stamp."""
    board = (np.indices((size, size)).sum(axis=0) % 2).astype(np.float32)
    return TriggerSpec("pixel-pattern", target, np.repeat(board[None], channels, axis=0), tuple(location))


def random_blend(image_shape, target: int = 3, alpha: float = 0.2, seed: int = 1234) -> TriggerSpec:
    rng = np.random.default_rng(seed)
    return TriggerSpec("blended", target, blend=rng.uniform(0, 1, size=tuple(image_shape)).astype(np.float32),
                       alpha=alpha)


def embed_trigger(images: np.ndarray, spec: TriggerSpec) -> np.ndarray:
    """Return triggered copies of one image (C,H,W) or a batch (n,C,H,W)."""
    images = np.asarray(images, dtype=np.float32)
    single = images.ndim == 3
    batch = images[None] if single else images
    spec.validate(batch.shape[1:])
    out = batch.copy()
    if spec.kind == "pixel-pattern":
        r, c = spec.location
        h, w = spec.pattern.shape[-2:]
        out[:, :, r:r + h, c:c + w] = spec.pattern
    elif spec.kind == "blended":
        a = np.float32(spec.alpha)
        out = a * spec.blend[None].astype(np.float32) + (np.float32(1) - a) * out
    return out[0] if single else out


def subpopulation_mask(dataset: LabeledDataset, spec: TriggerSpec) -> np.ndarray:
    cls, group = spec.subpopulation
    if dataset.groups is None:
        raise ValueError("dataset has no sub-cluster annotation")
    return (dataset.labels == cls) & (dataset.groups == group)


def build_poison_set(dataset: LabeledDataset, spec: TriggerSpec, poison_fraction: float,
                     rng: Optional[np.random.Generator] = None) -> LabeledDataset:
    """Copy of ``dataset`` where a slice carries the trigger and the target label.

    Pixel/blended: ``floor(fraction * n_eligible)`` samples drawn from the
    eligible pool (the TaCT source classes when restricted, else everything).
    Subpopulation: the whole selected subpopulation is relabelled.
    """
    if not 0 <= poison_fraction <= 1:
        raise ValueError("poison fraction must lie in [0, 1]")
    rng = rng if rng is not None else np.random.default_rng(0)
    images = dataset.images.copy()
    labels = dataset.labels.copy()
    if spec.kind == "subpopulation":
        chosen = np.flatnonzero(subpopulation_mask(dataset, spec)) if poison_fraction > 0 else np.zeros(0, int)
    else:
        if spec.source_classes is not None:
            eligible = np.flatnonzero(np.isin(dataset.labels, spec.source_classes))
            if len(eligible) == 0:
                raise ValueError("no samples from the TaCT source classes")
        else:
            eligible = np.arange(len(dataset))
        k = int(np.floor(poison_fraction * len(eligible)))
        # no draw at fraction 0, so the caller's stream matches an honest client's
        chosen = np.sort(rng.permutation(eligible)[:k]) if k else np.zeros(0, dtype=np.int64)
        if k:
            images[chosen] = embed_trigger(images[chosen], spec)
    labels[chosen] = spec.target
    return LabeledDataset(images, labels, dataset.label_space, dataset.groups, dataset.mean, dataset.std,
                          poisoned=chosen)


class TriggerEmbedder(BaseEstimator, TransformerMixin):
    """Transformer form of :func:`embed_trigger` for sklearn pipelines."""

    def __init__(self, trigger: TriggerSpec = None):
        self.trigger = trigger

    def fit(self, X, y=None):
        self.trigger.validate(np.asarray(X).shape[1:])
        return self

    def transform(self, X):
        return embed_trigger(X, self.trigger)


class DirichletPartitioner(BaseEstimator):
    def __init__(self, n_clients: int = 100, alpha: float = 0.9, random_state: int = 0):
        self.n_clients = n_clients
        self.alpha = alpha
        self.random_state = random_state

    def fit(self, dataset: LabeledDataset, y=None):
        self.plan_ = dirichlet_partition(dataset, self.n_clients, self.alpha, self.random_state)
        return self

    def split(self, dataset: LabeledDataset):
        if not hasattr(self, "plan_"):
            self.fit(dataset)
        return [dataset.subset(idx) for idx in self.plan_.clients]
