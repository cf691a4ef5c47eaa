"""Reliable training samples from a difference image via two-stage fuzzy c-means."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import _kernels
from .preprocessing import DifferenceImage

UNCHANGED, CHANGED, INTERMEDIATE = 0, 1, 2
GATE = 0.99


class DegenerateInputError(ValueError):
    """Clustering input has fewer distinct values than clusters."""


@dataclass(frozen=True)
class LabelMap:
    labels: np.ndarray  # int8, one of UNCHANGED / CHANGED / INTERMEDIATE

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    def counts(self) -> dict[str, int]:
        return {
            "unchanged": int(np.count_nonzero(self.labels == UNCHANGED)),
            "changed": int(np.count_nonzero(self.labels == CHANGED)),
            "intermediate": int(np.count_nonzero(self.labels == INTERMEDIATE)),
        }

    def to_gray(self) -> np.ndarray:
        """8-bit rendering: 0 unchanged, 128 intermediate, 255 changed."""
        out = np.full(self.shape, 128, dtype=np.uint8)
        out[self.labels == UNCHANGED] = 0
        out[self.labels == CHANGED] = 255
        return out

    @classmethod
    def from_gray(cls, gray: np.ndarray) -> "LabelMap":
        gray = np.asarray(gray)
        lab = np.full(gray.shape, INTERMEDIATE, dtype=np.int8)
        lab[gray == 0] = UNCHANGED
        lab[gray == 255] = CHANGED
        return cls(lab)


@dataclass(frozen=True)
class TrainingSet:
    centers: np.ndarray  # [n, 2] (row, col)
    labels: np.ndarray  # [n] in {0, 1}
    r: int
    seed: int

    def __len__(self) -> int:
        return int(self.labels.shape[0])


def fcm_objective(x: np.ndarray, v: np.ndarray, u: np.ndarray, m: float) -> float:
    return float(np.sum(u ** m * (x[:, None] - v[None, :]) ** 2))


def _initial_centroids(x: np.ndarray, uniq: np.ndarray, c: int, seed: int) -> np.ndarray:
    # evenly spaced quantiles; duplicates replaced by unused data values drawn with the seed
    qs = np.quantile(x, (np.arange(c) + 0.5) / c, method="nearest")
    v = np.unique(qs)
    if v.size < c:
        rng = np.random.default_rng(seed)
        spare = np.setdiff1d(uniq, v)
        v = np.concatenate([v, rng.choice(spare, size=c - v.size, replace=False)])
    return np.sort(v.astype(np.float64))


def fcm(
    values,
    c: int,
    m: float = 2.0,
    tol: float = 1e-6,
    max_iter: int = 100,
    seed: int = 0,
    callback: Callable[[int, np.ndarray, np.ndarray], None] | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Fuzzy c-means on 1-D data.

    Returns (centroids [c], memberships [n, c]). ``callback(it, v, u)`` sees
    each centroid vector together with the memberships computed from it.
    """
    if c < 2:
        raise ValueError("need at least 2 clusters")
    if m <= 1.0:
        raise ValueError("fuzzifier m must exceed 1")
    x = np.asarray(values, dtype=np.float64).ravel()
    uniq = np.unique(x)
    if uniq.size < c:
        raise DegenerateInputError(f"{c} clusters requested but data has {uniq.size} distinct values")
    v = _initial_centroids(x, uniq, c, seed)
    u = _kernels.fcm_memberships(x, v, m)
    if callback is not None:
        callback(0, v, u)
    for it in range(1, max_iter + 1):
        w = u ** m
        v_new = (w * x[:, None]).sum(axis=0) / w.sum(axis=0)
        shift = np.max(np.abs(v_new - v))
        v = v_new
        u = _kernels.fcm_memberships(x, v, m)
        if callback is not None:
            callback(it, v, u)
        if shift < tol:
            break
    return v, u


def _ordered_assignment(v: np.ndarray, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Hard labels re-indexed so cluster 0 has the smallest centroid."""
    order = np.argsort(v, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(order.size)
    return rank[np.argmax(u, axis=1)], u[:, order]


def local_mean(values: np.ndarray, window: int) -> np.ndarray:
    """Box mean over a window x window neighbourhood with mirrored borders."""
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be a positive odd integer, got {window}")
    if window == 1:
        return values
    half = window // 2
    mode = "reflect" if min(values.shape) > 1 else "edge"
    padded = np.pad(values, half, mode=mode)
    return np.lib.stride_tricks.sliding_window_view(padded, (window, window)).mean(axis=(-2, -1))


def hierarchical_label(
    di: DifferenceImage,
    m: float = 2.0,
    tol: float = 1e-6,
    max_iter: int = 100,
    seed: int = 0,
    gate: float = GATE,
    window: int = 1,
) -> LabelMap:
    """Two-stage FCM labeling.

    Stage one splits pixels into three clusters; the lowest and highest are
    taken as unchanged / changed. Stage two re-clusters the middle group into
    two and promotes pixels whose membership exceeds ``gate``. ``window > 1``
    clusters each pixel by its neighbourhood mean instead of its own value.
    """
    x = local_mean(di.values, window).ravel()
    uniq = np.unique(x)
    if uniq.size < 2:
        raise DegenerateInputError("difference image is constant")
    labels = np.full(x.shape, INTERMEDIATE, dtype=np.int8)
    if uniq.size == 2:
        # three clusters cannot be formed; the two levels are the two reliable classes
        labels[x == uniq[0]] = UNCHANGED
        labels[x == uniq[1]] = CHANGED
        return LabelMap(labels.reshape(di.shape))

    v1, u1 = fcm(x, 3, m, tol, max_iter, seed)
    hard, _ = _ordered_assignment(v1, u1)
    labels[hard == 0] = UNCHANGED
    labels[hard == 2] = CHANGED

    pool = np.flatnonzero(hard == 1)
    if np.unique(x[pool]).size >= 2:
        v2, u2 = fcm(x[pool], 2, m, tol, max_iter, seed)
        hard2, u2_ordered = _ordered_assignment(v2, u2)
        sure = u2_ordered.max(axis=1) > gate
        labels[pool[sure & (hard2 == 0)]] = UNCHANGED
        labels[pool[sure & (hard2 == 1)]] = CHANGED
    return LabelMap(labels.reshape(di.shape))


def sample_training_set(labels: LabelMap, n: int, seed: int, r: int = 9) -> TrainingSet:
    """Balanced draw of n reliable centers; a short class is topped up by the other."""
    lab = labels.labels.ravel()
    pos = np.flatnonzero(lab == CHANGED)
    neg = np.flatnonzero(lab == UNCHANGED)
    if n < 1:
        raise ValueError("sample count must be positive")
    if n > pos.size + neg.size:
        raise ValueError(f"requested {n} samples but only {pos.size + neg.size} reliable pixels")
    n_pos = min(n // 2, pos.size)
    n_neg = n - n_pos
    if n_neg > neg.size:
        n_neg = neg.size
        n_pos = n - n_neg
    rng = np.random.default_rng(seed)
    take_pos = rng.choice(pos, size=n_pos, replace=False)
    take_neg = rng.choice(neg, size=n_neg, replace=False)
    flat = np.concatenate([take_pos, take_neg])
    y = np.concatenate([np.ones(n_pos, dtype=np.int64), np.zeros(n_neg, dtype=np.int64)])
    w = labels.shape[1]
    centers = np.stack([flat // w, flat % w], axis=1)
    return TrainingSet(centers, y, r, seed)
