"""Spectral clustering baseline over window embeddings."""

from __future__ import annotations

import functools
import math
from collections import Counter
from dataclasses import dataclass
from typing import Hashable, Sequence

import numpy as np
from sklearn.cluster import KMeans

from .core import EPS, EmbeddingSequence, TimeInterval, VadSegment


@dataclass(frozen=True)
class ScConfig:
    affinity: str = "cosine"
    row_keep_fraction: float = 0.3
    max_speakers: int = 8
    fixed_k: int | None = None
    kmeans_restarts: int = 50
    seed: int = 0

    def __post_init__(self) -> None:
        if self.affinity != "cosine":
            raise ValueError(f"unsupported affinity {self.affinity!r}")
        if not 0 < self.row_keep_fraction <= 1:
            raise ValueError("row_keep_fraction must lie in (0, 1]")
        if self.max_speakers < 1:
            raise ValueError("max_speakers must be positive")


@functools.lru_cache(maxsize=64)
def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Rounds of disjoint (p, q) pairs, p < q, covering every pair once per sweep."""
    m = n + (n % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        pairs = [(players[i], players[m - 1 - i]) for i in range(m // 2)]
        pairs = [(min(x, y), max(x, y)) for x, y in pairs if x < n and y < n]
        rounds.append((np.array([x for x, _ in pairs]), np.array([y for _, y in pairs])))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def jacobi_eigh(a: np.ndarray, tol: float = 1e-14, max_sweeps: int = 60) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Rotations are scheduled round-robin so each round touches disjoint index
    pairs, which lets a whole round be applied with vectorized row/column
    updates. Returns ascending eigenvalues and matching unit eigenvectors
    (columns), each signed so its largest-magnitude entry is positive.
    """
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    if a.shape != (n, n):
        raise ValueError("matrix must be square")
    if not np.allclose(a, a.T, atol=1e-12 * max(1.0, np.abs(a).max(initial=0.0))):
        raise ValueError("matrix must be symmetric")
    v = np.eye(n)
    if n > 1:
        scale = np.linalg.norm(a)
        schedule = _round_robin(n)
        for _ in range(max_sweeps):
            off = np.linalg.norm(a - np.diag(np.diag(a)))
            if off <= tol * max(scale, 1e-300):
                break
            for p, q in schedule:
                apq = a[p, q]
                live = np.abs(apq) > 1e-300
                if not live.any():
                    continue
                if not live.all():
                    p, q, apq = p[live], q[live], apq[live]
                with np.errstate(over="ignore"):
                    # a vanishing apq sends theta to inf, which gives the right t = 0
                    theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (np.abs(theta) + np.hypot(theta, 1.0))
                t[theta == 0] = 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                ap, aq = a[:, p], a[:, q]
                a[:, p], a[:, q] = c * ap - s * aq, s * ap + c * aq
                ap, aq = a[p, :], a[q, :]
                a[p, :], a[q, :] = c[:, None] * ap - s[:, None] * aq, s[:, None] * ap + c[:, None] * aq
                vp, vq = v[:, p], v[:, q]
                v[:, p], v[:, q] = c * vp - s * vq, s * vp + c * vq
    w = np.diag(a).copy()
    order = np.argsort(w, kind="stable")
    w, v = w[order], v[:, order]
    idx = np.argmax(np.abs(v), axis=0)
    v = v * np.where(v[idx, np.arange(n)] < 0, -1.0, 1.0)
    return w, v


def estimate_num_speakers(eigenvalues: Sequence[float], max_speakers: int = 8) -> int:
    """Eigengap heuristic: k maximizing lambda[k+1] - lambda[k] (1-based), ties to smaller k."""
    lam = np.asarray(eigenvalues, dtype=np.float64)
    if len(lam) < 2:
        raise ValueError("need at least two eigenvalues")
    upto = min(max_speakers, len(lam)) - 1
    if upto < 1:
        return 1
    gaps = np.diff(lam[: upto + 1])
    return int(np.argmax(gaps)) + 1


def cosine_affinity(vectors: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(vectors, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("zero-norm embedding has no cosine affinity")
    x = vectors / norms
    a = x @ x.T
    if not np.all(np.isfinite(a)):
        raise ValueError("non-finite affinity")
    return a


TIE_TOL = 1e-9


def prune_affinity(a: np.ndarray, keep_fraction: float) -> np.ndarray:
    """Keep each row's largest ``ceil(keep_fraction * N)`` entries, then symmetrize by max.

    Equal affinities (up to rounding) are treated as one group so the result
    never depends on their order. A group straddling the cutoff is dropped
    whole, except the group at the row maximum, which is always kept. A small
    speaker whose identical windows tie with a crowd of equally distant
    windows therefore stays disconnected from that crowd.
    """
    n = a.shape[0]
    keep = max(1, int(math.ceil(keep_fraction * n - 1e-9)))
    if keep >= n:
        pruned = a.copy()
    else:
        cutoff = -np.partition(-a, keep, axis=1)[:, keep : keep + 1]  # (keep+1)-th largest
        top = a.max(axis=1, keepdims=True)
        pruned = np.where((a > cutoff + TIE_TOL) | (a >= top - TIE_TOL), a, 0.0)
    pruned = np.maximum(pruned, pruned.T)
    # negative cosine similarities carry no affinity
    return np.clip(pruned, 0.0, None)


def laplacian(a: np.ndarray) -> np.ndarray:
    return np.diag(a.sum(axis=1)) - a


def kmeans(points: np.ndarray, k: int, restarts: int = 50, seed: int = 0) -> tuple[np.ndarray, float]:
    """Best-of-``restarts`` k-means++/Lloyd clustering; returns (labels, inertia)."""
    km = KMeans(n_clusters=k, init="k-means++", n_init=restarts, random_state=seed)
    labels = km.fit_predict(points)
    return labels, float(km.inertia_)


def kmeans_objective(points: np.ndarray, labels: Sequence[int]) -> float:
    labels = np.asarray(labels)
    total = 0.0
    for lab in np.unique(labels):
        pts = points[labels == lab]
        total += float(((pts - pts.mean(axis=0)) ** 2).sum())
    return total


def _canonical(labels: Sequence[Hashable]) -> np.ndarray:
    mapping: dict = {}
    return np.array([mapping.setdefault(x, len(mapping) + 1) for x in labels], dtype=np.int64)


def spectral_cluster(seq: EmbeddingSequence | np.ndarray, cfg: ScConfig = ScConfig()) -> np.ndarray:
    """Per-window cluster labels (1-based, first-appearance order)."""
    x = seq.vectors if isinstance(seq, EmbeddingSequence) else np.asarray(seq, dtype=np.float64)
    n = len(x)
    if n == 0:
        raise ValueError("no windows to cluster")
    if n == 1:
        return np.ones(1, dtype=np.int64)
    a = prune_affinity(cosine_affinity(x), cfg.row_keep_fraction)
    lam, vecs = jacobi_eigh(laplacian(a))
    if cfg.fixed_k is not None:
        k = cfg.fixed_k
        if n < k:
            raise ValueError(f"cannot form {k} clusters from {n} windows")
    else:
        k = estimate_num_speakers(lam, cfg.max_speakers)
    if k == 1:
        return np.ones(n, dtype=np.int64)
    emb = vecs[:, :k]
    norms = np.linalg.norm(emb, axis=1, keepdims=True)
    emb = emb / np.where(norms > 0, norms, 1.0)
    labels, _ = kmeans(emb, k, cfg.kmeans_restarts, cfg.seed)
    return _canonical(labels)


def majority_vote(window_labels: Sequence[int], groups: Sequence[Hashable]) -> dict[Hashable, int]:
    """Most frequent window label per unit; ties go to the tied label seen first in the unit."""
    if len(window_labels) != len(groups):
        raise ValueError("window_labels and groups differ in length")
    members: dict[Hashable, list[int]] = {}
    for lab, g in zip(window_labels, groups):
        members.setdefault(g, []).append(int(lab))
    out = {}
    for g, labs in members.items():
        if not labs:
            raise ValueError(f"unit {g!r} has no windows")
        counts = Counter(labs)
        best = max(counts.values())
        out[g] = next(lab for lab in labs if counts[lab] == best)
    return out


def split_by_labels(
    segment: VadSegment,
    windows: Sequence[TimeInterval],
    window_labels: Sequence[int],
) -> list[tuple[TimeInterval, int]]:
    """Merge runs of equal consecutive window labels into intervals that tile the segment."""
    if len(windows) != len(window_labels):
        raise ValueError("windows and labels differ in length")
    if not windows:
        return []
    starts = [segment.start]
    labels = [int(window_labels[0])]
    for w, lab in zip(windows[1:], window_labels[1:]):
        if int(lab) != labels[-1]:
            starts.append(max(w.start, starts[-1]))
            labels.append(int(lab))
    ends = starts[1:] + [segment.end]
    return [(TimeInterval(s, e), lab) for s, e, lab in zip(starts, ends, labels) if e - s > EPS]
