"""Main-task / backdoor accuracy, effective length and gradient-activation counts."""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import engine
from .datasets import LabeledDataset, TriggerSpec, embed_trigger, subpopulation_mask

NEVER = "never"


def compute_ma(model: engine.Model, test: LabeledDataset) -> float:
    if len(test) == 0:
        raise ValueError("empty test set")
    return float(np.mean(engine.predict(model, test.images) == test.labels) * 100.0)


def backdoor_eval_set(test: LabeledDataset, trigger: TriggerSpec):
    """Triggered images (or the held-out subpopulation) used to score the backdoor."""
    if trigger.kind == "subpopulation":
        keep = subpopulation_mask(test, trigger)
        if not keep.any():
            raise ValueError("test set holds none of the backdoor subpopulation")
        return test.images[keep]
    keep = test.labels != trigger.target
    if trigger.source_classes is not None:
        keep &= np.isin(test.labels, trigger.source_classes)
    if not keep.any():
        raise ValueError("no test samples outside the target class")
    return embed_trigger(test.images[keep], trigger)


def compute_ba(model: engine.Model, test: LabeledDataset, trigger: TriggerSpec, _cache: Optional[dict] = None) -> float:
    """Percent of triggered non-target samples predicted as the target label."""
    images = backdoor_eval_set(test, trigger) if _cache is None else _cache.setdefault(
        "ba_images", backdoor_eval_set(test, trigger))
    return float(np.mean(engine.predict(model, images) == trigger.target) * 100.0)


def effective_length(ba_series, threshold: float = 35.0, attack_start: int = 0, first_round: int = 0):
    """First round index ``t >= attack_start`` with BA(t) >= threshold, else ``"never"``.

    ``ba_series[i]`` is the BA of round ``first_round + i``.
    """
    ba_series = list(ba_series)
    if not ba_series:
        raise ValueError("empty BA series")
    for i, ba in enumerate(ba_series):
        t = first_round + i
        if t >= attack_start and ba is not None and ba >= threshold:
            return t
    return NEVER


def gradient_magnitudes(model: engine.Model, images: np.ndarray, labels: np.ndarray,
                        exclude_classifier: bool = False) -> np.ndarray:
    _, grad = engine.compute_gradient(model, images, labels, update_stats=False)
    mag = np.abs(grad.data.astype(np.float64))
    if exclude_classifier:
        mag = mag[~model.layout.classifier]
    return mag


def activation_histogram(model: engine.Model, images: np.ndarray, labels: np.ndarray, bin_edges,
                         threshold: float):
    """Histogram of |gradient| over all trainable coordinates from one clean pass.

    Returns ``(counts, active)``: ``counts`` over ``bin_edges`` (the last bin is
    open to +inf so every coordinate lands somewhere), ``active`` the number of
    coordinates with |g| > threshold.
    """
    if len(labels) == 0:
        raise ValueError("empty probe set")
    mag = gradient_magnitudes(model, images, labels)
    edges = np.asarray(bin_edges, dtype=np.float64)
    idx = np.clip(np.searchsorted(edges, mag, side="right") - 1, 0, len(edges) - 1)
    counts = np.bincount(idx, minlength=len(edges))
    return counts, int((mag > threshold).sum())
