"""Training-time augmentation: same-speaker block shuffling and random rotations."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import EmbeddingSequence
from .synth import rng_for


@dataclass(frozen=True, eq=False)
class OrthogonalMatrix:
    dim: int
    entries: np.ndarray

    def __post_init__(self) -> None:
        q = np.asarray(self.entries, dtype=np.float64)
        if q.shape != (self.dim, self.dim):
            raise ValueError(f"expected a {self.dim}x{self.dim} matrix, got {q.shape}")
        err = np.max(np.abs(q.T @ q - np.eye(self.dim))) if self.dim else 0.0
        if err > 1e-6:
            raise ValueError(f"matrix is not orthogonal (max |Q^T Q - I| = {err:.2e})")
        q.flags.writeable = False
        object.__setattr__(self, "entries", q)


def sample_orthogonal(dim: int, seed: int | np.random.Generator = 0) -> OrthogonalMatrix:
    """Haar-distributed orthogonal matrix via sign-corrected QR of a Gaussian matrix."""
    if dim < 1:
        raise ValueError("dim must be at least 1")
    rng = seed if isinstance(seed, np.random.Generator) else rng_for(seed, "haar")
    z = rng.standard_normal((dim, dim))
    q, r = np.linalg.qr(z)
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return OrthogonalMatrix(dim, q * signs)


def rotation_for(seed: int, epoch: int, meeting_index: int, dim: int) -> OrthogonalMatrix:
    """Fresh rotation per (epoch, meeting), so augmentation is generated on the fly."""
    return sample_orthogonal(dim, rng_for(seed, epoch, meeting_index, "diaconis"))


def apply_rotation(seq: EmbeddingSequence, q: OrthogonalMatrix) -> EmbeddingSequence:
    if q.dim != seq.dim:
        raise ValueError(f"rotation dim {q.dim} does not match embeddings dim {seq.dim}")
    return seq.with_vectors(seq.vectors @ q.entries.T)


def speaker_shuffle(
    seq: EmbeddingSequence,
    targets: Sequence[str | None],
    seed: int | np.random.Generator = 0,
) -> EmbeddingSequence:
    """Permute window blocks among the segments of each speaker.

    ``targets`` gives one speaker id per segment (in sequence order), or None
    for segments that must stay put (e.g. multi-speaker VAD segments). A block
    moved into a segment with a different window count is truncated or
    cyclically extended to fit.
    """
    order = seq.segment_order()
    if len(targets) != len(order):
        raise ValueError(f"{len(targets)} targets for {len(order)} segments")
    rng = seed if isinstance(seed, np.random.Generator) else rng_for(seed, "shuffle")
    bounds = {}
    for sid in order:
        idx = np.flatnonzero(seq.segment_ids == sid)
        if len(idx) == 0:
            raise ValueError(f"segment {sid} has no windows")
        bounds[sid] = idx

    by_speaker: dict[str, list[int]] = {}
    for sid, spk in zip(order, targets):
        if spk is not None:
            by_speaker.setdefault(spk, []).append(sid)

    vectors = seq.vectors.copy()
    for spk in sorted(by_speaker):
        slots = by_speaker[spk]
        if len(slots) < 2:
            continue
        perm = rng.permutation(len(slots))
        for dst, src in zip(slots, (slots[p] for p in perm)):
            block = seq.vectors[bounds[src]]
            vectors[bounds[dst]] = np.resize(block, (len(bounds[dst]), seq.dim))
    return seq.with_vectors(vectors)


def shrink_noise(seq: EmbeddingSequence, owners: Sequence[str], alpha: float) -> EmbeddingSequence:
    """Pull every window toward the mean direction of its speaker's windows.

    Each vector becomes ``unit(mu + alpha * (unit(v) - mu))`` with ``mu`` the
    unit mean of the speaker's unit vectors in this sequence. ``alpha = 1``
    leaves directions unchanged and ``alpha = 0`` collapses each speaker to
    a single direction. Only the speaker's own vectors enter ``mu``, so the
    operation commutes with any rotation of the inputs.
    """
    if len(owners) != len(seq):
        raise ValueError(f"{len(owners)} owners for {len(seq)} windows")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    x = seq.vectors / np.linalg.norm(seq.vectors, axis=1, keepdims=True)
    owners_arr = np.asarray(owners)
    out = x.copy()
    for spk in np.unique(owners_arr):
        rows = owners_arr == spk
        mu = x[rows].mean(axis=0)
        norm = np.linalg.norm(mu)
        if norm == 0:
            continue
        mu /= norm
        y = mu + alpha * (x[rows] - mu)
        out[rows] = y / np.maximum(np.linalg.norm(y, axis=1, keepdims=True), 1e-12)
    return seq.with_vectors(out)
