"""Baseline aggregation defenses: plain norm clipping, Multi-Krum, Foolsgold."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from ..fl import DefenseHook, aggregate, clip_updates


class NormClipping(BaseEstimator, DefenseHook):
    """Adaptive norm clipping + mean; the "nodefense" reference server."""

    name = "nodefense"

    def __init__(self, clip="mean", clip_bound=None):
        self.clip = clip
        self.clip_bound = clip_bound


def multi_krum(deltas, f: int, m: int) -> list:
    """Indices of the ``m`` updates picked by iterated Krum.

    Each round every remaining update is scored by the summed squared
    distance to its ``n' - f - 1`` nearest remaining neighbours (``n'`` the
    number still in play); the lowest score wins, ties to the lower index.
    """
    x = np.asarray([np.ravel(d) for d in deltas], dtype=np.float64)
    n = len(x)
    if n < 2 * f + 2 or f < 0:
        raise ValueError(f"Multi-Krum needs n >= 2f + 2 (n={n}, f={f})")
    if not 1 <= m <= n - f:
        raise ValueError(f"Multi-Krum needs 1 <= m <= n - f (m={m})")
    sq = np.sum(x * x, axis=1)
    dist = np.maximum(sq[:, None] + sq[None, :] - 2 * x @ x.T, 0.0)
    remaining = list(range(n))
    picked = []
    for _ in range(m):
        k = max(len(remaining) - f - 1, 0)
        sub = dist[np.ix_(remaining, remaining)]
        scores = []
        for row, i in enumerate(remaining):
            others = np.delete(sub[row], row)
            scores.append(np.sort(others)[:k].sum())
        best = remaining[int(np.argmin(scores))]
        picked.append(best)
        remaining.remove(best)
    return picked


class MultiKrum(BaseEstimator, DefenseHook):
    name = "multikrum"

    def __init__(self, f=1, m=None, clip="mean", clip_bound=None):
        self.f = f
        self.m = m
        self.clip = clip
        self.clip_bound = clip_bound

    def aggregate(self, base, updates, round_idx):
        m = self.m if self.m is not None else len(updates) - self.f
        picked = multi_krum([u.delta.data for u in updates], self.f, m)
        chosen = [updates[i] for i in sorted(picked)]
        clipped, gamma = clip_updates(chosen, self.clip, self.clip_bound)
        return aggregate(base, clipped), {
            "gamma": gamma, "krum_selected": " ".join(str(updates[i].client_id) for i in picked)}


def foolsgold_weights(histories, floor: float = 0.01) -> np.ndarray:
    """Down-weight clients whose cumulative updates point the same way.

    ``w_i = clip(1 - max_{j != i} cos(h_i, h_j), 0, 1)``, rescaled so the
    largest weight is 1, then floored at ``floor``. A client with an all-zero
    history gets weight 1.
    """
    h = np.asarray([np.ravel(v) for v in histories], dtype=np.float64)
    n = len(h)
    if n < 2:
        raise ValueError("Foolsgold needs at least two clients")
    norms = np.linalg.norm(h, axis=1)
    live = norms > 0
    unit = np.zeros_like(h)
    unit[live] = h[live] / norms[live, None]
    cs = unit @ unit.T
    np.fill_diagonal(cs, -np.inf)
    w = np.clip(1.0 - cs.max(axis=1), 0.0, 1.0)
    w[~live] = 1.0
    if w.max() > 0:
        w = w / w.max()
    return np.maximum(w, floor)


class FoolsGold(BaseEstimator, DefenseHook):
    name = "foolsgold"

    def __init__(self, floor=0.01, clip="mean", clip_bound=None):
        self.floor = floor
        self.clip = clip
        self.clip_bound = clip_bound
        self._history = {}

    def aggregate(self, base, updates, round_idx):
        for u in updates:
            prev = self._history.get(u.client_id)
            self._history[u.client_id] = u.delta.data.astype(np.float64) + (0 if prev is None else prev)
        clipped, gamma = clip_updates(updates, self.clip, self.clip_bound)
        if len(updates) < 2:
            return aggregate(base, clipped), {"gamma": gamma}
        w = foolsgold_weights([self._history[u.client_id] for u in updates], self.floor)
        return aggregate(base, clipped, weights=w), {
            "gamma": gamma, "fg_weights": " ".join(f"{v:.3f}" for v in w)}
