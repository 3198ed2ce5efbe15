"""Segment-level discriminative neural clustering.

A transformer encoder reads every window embedding of a meeting with global
self-attention. The decoder emits one relative speaker label per output slot;
the number of slots per segment comes from outside (the SOT speaker count),
and each slot's cross-attention only sees the encoder features of its own
segment.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Literal, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .augmentation import apply_rotation, rotation_for, shrink_noise, speaker_shuffle
from .core import EmbeddingSequence, LabelSequence, Meeting
from .nn import autodiff as ad
from .nn.autodiff import Tensor, no_grad
from .nn.checkpoint import load_checkpoint, save_checkpoint
from .nn.layers import (
    AttentionMask,
    ModelParams,
    apply_layer_norm,
    apply_linear,
    feed_forward,
    init_attention,
    init_ffn,
    init_layer_norm,
    init_linear,
    multi_head_attention,
    sinusoidal_positions,
)
from .nn.optim import Adam, warmup_lr
from .segmentation import WindowingConfig, first_speaker_segments
from .synth import SynthConfig, gen_embeddings, rng_for, window_speakers

log = logging.getLogger(__name__)

Stage = Literal["pretrain_first_speaker", "finetune_vad"]


@dataclass(frozen=True)
class SdncConfig:
    input_dim: int = 16
    dim_model: int = 64
    num_heads: int = 4
    enc_layers: int = 2
    dec_layers: int = 2
    ffn_dim: int = 128
    max_clusters: int = 5
    dropout: float = 0.0
    label_smoothing: float = 0.1
    seg_buckets: int = 16
    cross_first: bool = False
    input_feeding: bool = True
    pool_feeding: bool = True
    similarity_bias: bool = True
    top_feeding: bool = True
    similarity_init: float = 4.0
    segment_position: bool = True
    novelty_feeding: bool = True
    pointer_logits: bool = True
    pointer_aux_weight: float = 1.0

    def __post_init__(self) -> None:
        if self.dim_model % self.num_heads:
            raise ValueError("dim_model must be divisible by num_heads")
        if self.max_clusters < 2:
            raise ValueError("max_clusters must be at least 2")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    lr: float = 1e-3
    warmup_steps: int = 200
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    shuffle: bool = True
    rotate: bool = True
    batch_size: int = 1
    dtype: str = "float32"
    count_noise_prob: float = 0.05
    noise_shrink_prob: float = 0.5

    def __post_init__(self) -> None:
        for name in ("count_noise_prob", "noise_shrink_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")


@dataclass(frozen=True)
class DecodePlan:
    """Number of speakers to emit for each segment, in sequence order."""

    segment_ids: tuple[int, ...]
    counts: tuple[int, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "segment_ids", tuple(int(s) for s in self.segment_ids))
        object.__setattr__(self, "counts", tuple(int(c) for c in self.counts))
        if len(self.segment_ids) != len(self.counts):
            raise ValueError("segment_ids and counts differ in length")
        if any(c < 1 for c in self.counts):
            raise ValueError("every segment needs at least one output slot")

    @classmethod
    def ones(cls, segment_ids: Iterable[int]) -> DecodePlan:
        ids = tuple(segment_ids)
        return cls(ids, (1,) * len(ids))

    def __len__(self) -> int:
        return sum(self.counts)

    @property
    def slot_segment_ids(self) -> list[int]:
        return [s for s, c in zip(self.segment_ids, self.counts) for _ in range(c)]

    @property
    def slot_ranks(self) -> list[int]:
        return [r for c in self.counts for r in range(c)]


@dataclass(eq=False)
class EncoderOutput:
    features: Tensor
    segment_ids: np.ndarray
    inputs: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.segment_ids)


def canonicalize(labels: Sequence[int], slot_segment_ids: Sequence[int] | None = None) -> LabelSequence:
    """Relabel by first appearance: first distinct value -> 1, next new value -> 2, ..."""
    mapping: dict = {}
    out = [mapping.setdefault(x, len(mapping) + 1) for x in labels]
    if slot_segment_ids is None:
        slot_segment_ids = [0] * len(out)
    return LabelSequence(tuple(out), tuple(slot_segment_ids))


def build_cross_mask(seq: EmbeddingSequence | EncoderOutput, plan: DecodePlan) -> AttentionMask:
    """Slot t of segment i may attend exactly to encoder positions whose window lies in segment i."""
    seg = np.asarray(seq.segment_ids)
    order = list(dict.fromkeys(int(s) for s in seg))
    if list(plan.segment_ids) != order:
        missing = set(plan.segment_ids) - set(order)
        if missing:
            raise ValueError(f"segments {sorted(missing)} have no windows")
        raise ValueError("plan segments do not match the embedding sequence segments")
    slots = np.asarray(plan.slot_segment_ids)
    return AttentionMask(slots[:, None] == seg[None, :])


def _segment_position(segment_ids: Sequence[int]) -> np.ndarray:
    """Features (u, 1 - u) with u the window's relative position inside its segment."""
    seg = np.asarray(segment_ids)
    u = np.zeros(len(seg))
    for s in np.unique(seg):
        idx = np.flatnonzero(seg == s)
        if len(idx) > 1:
            u[idx] = np.arange(len(idx)) / (len(idx) - 1)
    return np.stack([u, 1.0 - u], axis=1)


def _other_segment_columns(slot_seg: np.ndarray, t: int) -> np.ndarray:
    """Columns of the slot-similarity matrix holding earlier slots from other segments.

    Column c holds slot c-1. Earlier slots of slot t's own segment are left
    out: they are other speakers by construction, however alike they look.
    """
    cols = np.arange(1, t + 1)
    return cols[slot_seg[cols - 1] != slot_seg[t]]


def _best_earlier_match(sim: Tensor, slot_seg: np.ndarray) -> Tensor:
    """(T, 1) best similarity of each slot to an earlier slot of another segment; 0 if none.

    The maximum is taken with a fixed one-hot selector, which routes the
    gradient to the winning entry.
    """
    T = sim.data.shape[0]
    select = np.zeros((T, T), dtype=sim.data.dtype)
    for t in range(1, T):
        cols = _other_segment_columns(slot_seg, t)
        if len(cols):
            select[t, cols[np.argmax(sim.data[t, cols])]] = 1.0
    return ad.matmul(ad.mul(sim, Tensor(select)), Tensor(np.ones((T, 1), dtype=sim.data.dtype)))


# Pointer weights start at zero and are multiplied by this gain, so Adam's
# fixed step size moves them on the scale of the attention logits.
POINTER_GAIN = 10.0


def _label_matches(sim: Tensor, prev_labels: np.ndarray, slot_seg: np.ndarray, num_labels: int) -> tuple[Tensor, np.ndarray]:
    """Best similarity of each slot to an earlier slot (of another segment) carrying each label.

    Returns a (T, K) tensor of those similarities (0 where no such slot has
    the label) and a (T, K) 0/1 array marking the labels not used yet by any
    earlier slot.
    """
    T = sim.data.shape[0]
    prev = np.asarray(prev_labels)
    select = np.zeros((T, T, num_labels), dtype=sim.data.dtype)
    absent = np.ones((T, num_labels), dtype=sim.data.dtype)
    for t in range(1, T):
        absent[t, np.unique(prev[1 : t + 1]) - 1] = 0.0
        cols = _other_segment_columns(slot_seg, t)
        labs = prev[cols]
        for k in np.unique(labs):
            mine = cols[labs == k]
            select[t, mine[np.argmax(sim.data[t, mine])], k - 1] = 1.0
    best = ad.reshape(ad.matmul(ad.reshape(sim, (T, 1, T)), Tensor(select)), (T, num_labels))
    return best, absent


class SdncModel:
    def __init__(self, cfg: SdncConfig, params: ModelParams | None = None, seed: int = 0, dtype=np.float64):
        self.cfg = cfg
        self.params = params if params is not None else self._init_params(seed).astype(dtype)
        self._rng: np.random.Generator | None = None

    @property
    def dtype(self):
        return self.params.tensors()[0].data.dtype

    def _init_params(self, seed: int) -> ModelParams:
        c = self.cfg
        rng = rng_for(seed, "sdnc-init")
        p = ModelParams()
        d = c.dim_model
        init_linear(p, "enc.in", c.input_dim, d, rng)
        p.add("enc.seg", 1.0 * rng.standard_normal((c.seg_buckets, d)))
        for i in range(c.enc_layers):
            init_layer_norm(p, f"enc.{i}.ln1", d)
            init_attention(p, f"enc.{i}.attn", d, rng)
            init_layer_norm(p, f"enc.{i}.ln2", d)
            init_ffn(p, f"enc.{i}.ffn", d, c.ffn_dim, rng)
        init_layer_norm(p, "enc.ln", d)
        p.add("dec.label", 1.0 * rng.standard_normal((c.max_clusters + 1, d)))
        p.add("dec.seg", 1.0 * rng.standard_normal((c.seg_buckets, d)))
        p.add("dec.rank", 1.0 * rng.standard_normal((c.max_clusters, d)))
        if c.input_feeding:
            init_linear(p, "dec.feed", d, d, rng)
        if c.pool_feeding:
            init_linear(p, "dec.pool", d, d, rng)
        for i in range(c.dec_layers):
            init_layer_norm(p, f"dec.{i}.ln1", d)
            init_attention(p, f"dec.{i}.self", d, rng)
            init_layer_norm(p, f"dec.{i}.ln2", d)
            init_attention(p, f"dec.{i}.cross", d, rng)
            init_layer_norm(p, f"dec.{i}.ln3", d)
            init_ffn(p, f"dec.{i}.ffn", d, c.ffn_dim, rng)
        init_layer_norm(p, "dec.ln", d)
        init_linear(p, "dec.out", d, c.max_clusters, rng)
        # small output weights: an untrained model starts near the uniform label distribution
        p["dec.out.w"].data *= 0.1
        if c.segment_position:
            init_linear(p, "enc.rel", 2, d, rng)
        if c.top_feeding:
            p.add("dec.top", 1.0 * rng.standard_normal((c.max_clusters + 1, d)))
        if c.similarity_bias:
            init_linear(p, "dec.summary.q", d, d, rng)
            init_linear(p, "dec.summary.k", d, d, rng)
            for i in range(c.dec_layers):
                p.add(f"dec.{i}.sim", np.full((c.num_heads, 1, 1), c.similarity_init))
            if c.novelty_feeding:
                init_linear(p, "dec.novel", 1, d, rng)
            if c.pointer_logits:
                # zero start: the untrained model keeps its near-uniform output
                for name in ("dec.ptr.match", "dec.ptr.absent", "dec.ptr.novel"):
                    p.add(name, np.zeros((1, 1)))
        return p

    # -- forward ---------------------------------------------------------

    def _drop(self, x: Tensor) -> Tensor:
        return ad.dropout(x, self.cfg.dropout, self._rng)

    def _seg_buckets(self, segment_ids: Sequence[int], order: Sequence[int]) -> np.ndarray:
        ordinal = {s: k for k, s in enumerate(order)}
        return np.array([ordinal[int(s)] % self.cfg.seg_buckets for s in segment_ids])

    def encode(self, seq: EmbeddingSequence) -> EncoderOutput:
        if len(seq) == 0:
            raise ValueError("cannot encode an empty embedding sequence")
        if seq.dim != self.cfg.input_dim:
            raise ValueError(f"embedding dim {seq.dim} != model input_dim {self.cfg.input_dim}")
        p, c = self.params, self.cfg
        n = len(seq)
        # scaled so the content is not drowned by the unit-amplitude positions
        x = ad.scale(apply_linear(p, "enc.in", Tensor(seq.vectors.astype(self.dtype))), math.sqrt(c.dim_model))
        pos = sinusoidal_positions(n, c.dim_model).astype(self.dtype)
        seg = ad.take_rows(p["enc.seg"], self._seg_buckets(seq.segment_ids, seq.segment_order()))
        h = ad.add(ad.add(x, pos), seg)
        if c.segment_position:
            rel = ad.scale(apply_linear(p, "enc.rel", Tensor(_segment_position(seq.segment_ids).astype(self.dtype))), math.sqrt(c.dim_model))
            h = ad.add(h, rel)
        for i in range(c.enc_layers):
            a = apply_layer_norm(p, f"enc.{i}.ln1", h)
            h = ad.add(h, self._drop(multi_head_attention(a, a, p, f"enc.{i}.attn", c.num_heads)))
            a = apply_layer_norm(p, f"enc.{i}.ln2", h)
            h = ad.add(h, self._drop(feed_forward(p, f"enc.{i}.ffn", a)))
        return EncoderOutput(
            apply_layer_norm(p, "enc.ln", h), np.asarray(seq.segment_ids).copy(), np.array(seq.vectors, dtype=self.dtype)
        )

    def _self(self, h: Tensor, causal: AttentionMask, i: int, sim: Tensor | None) -> Tensor:
        a = apply_layer_norm(self.params, f"dec.{i}.ln1", h)
        bias = None if sim is None else ad.mul(self.params[f"dec.{i}.sim"], sim)
        out = multi_head_attention(a, a, self.params, f"dec.{i}.self", self.cfg.num_heads, causal, bias)
        return ad.add(h, self._drop(out))

    def _cross(self, h: Tensor, enc: EncoderOutput, mask: AttentionMask, i: int) -> Tensor:
        a = apply_layer_norm(self.params, f"dec.{i}.ln2", h)
        out = multi_head_attention(a, enc.features, self.params, f"dec.{i}.cross", self.cfg.num_heads, mask)
        return ad.add(h, self._drop(out))

    def _check_plan(self, plan: DecodePlan) -> None:
        over = [s for s, k in zip(plan.segment_ids, plan.counts) if k > self.cfg.max_clusters]
        if over:
            raise ValueError(f"segments {over} ask for more than max_clusters={self.cfg.max_clusters} speakers")

    def _slot_similarity(self, h: Tensor, enc: EncoderOutput, mask: AttentionMask) -> Tensor:
        """Cosine similarity between slot summaries, keyed by the slot whose label is fed in.

        Each slot summarizes its own segment by attending over the segment's
        windows and averaging their raw input vectors. Slot s carries the label
        emitted at slot s-1, so column s compares against slot s-1's summary;
        the start slot compares against nothing and scores 0. Only inner
        products of raw inputs enter, so the result is unchanged by any
        rotation of the inputs.
        """
        if enc.inputs is None:
            raise ValueError("encoder output carries no raw inputs")
        p, d = self.params, self.cfg.dim_model
        q = apply_linear(p, "dec.summary.q", h)
        k = apply_linear(p, "dec.summary.k", enc.features)
        scores = ad.scale(ad.matmul(q, ad.transpose(k, (1, 0))), 1.0 / math.sqrt(d))
        weights = ad.masked_softmax(scores, mask.additive(scores.dtype))
        unit = ad.l2_normalize(ad.matmul(weights, Tensor(enc.inputs)))
        T = len(mask.allow)
        shift = np.eye(T, k=-1, dtype=self.dtype)
        return ad.matmul(unit, ad.transpose(ad.matmul(Tensor(shift), unit), (1, 0)))

    def decoder_logits(self, enc: EncoderOutput, plan: DecodePlan, prev_labels: Sequence[int]) -> Tensor:
        """Logits (T, K_max) given the label fed in at each slot (0 = start token)."""
        return self._decode(enc, plan, prev_labels)[0]

    def _decode(self, enc: EncoderOutput, plan: DecodePlan, prev_labels: Sequence[int]) -> tuple[Tensor, Tensor | None]:
        """Full logits and, when pointer logits are on, their pointer part alone."""
        p, c = self.params, self.cfg
        T = len(plan)
        mask = build_cross_mask(enc, plan)
        causal = AttentionMask.causal(T)
        slot_seg = plan.slot_segment_ids
        h = ad.take_rows(p["dec.label"], np.asarray(prev_labels))
        h = ad.add(h, sinusoidal_positions(T, c.dim_model).astype(self.dtype))
        h = ad.add(h, ad.take_rows(p["dec.seg"], self._seg_buckets(slot_seg, plan.segment_ids)))
        h = ad.add(h, ad.take_rows(p["dec.rank"], np.asarray(plan.slot_ranks)))
        pool = (mask.allow / mask.allow.sum(axis=1, keepdims=True)).astype(self.dtype)
        if c.pool_feeding:
            # mean encoder feature of the slot's own segment
            h = ad.add(h, apply_linear(p, "dec.pool", ad.matmul(Tensor(pool), enc.features)))
        if c.input_feeding:
            # slot t also sees the mean encoder feature of slot t-1's segment
            shifted = np.zeros_like(pool)
            shifted[1:] = pool[:-1]
            h = ad.add(h, apply_linear(p, "dec.feed", ad.matmul(Tensor(shifted), enc.features)))
        if c.top_feeding:
            # highest label fed in so far; a new speaker is always top + 1
            top = np.maximum.accumulate(np.asarray(prev_labels))
            h = ad.add(h, ad.take_rows(p["dec.top"], np.minimum(top, c.max_clusters)))
        sim = self._slot_similarity(h, enc, mask) if c.similarity_bias else None
        best = _best_earlier_match(sim, np.asarray(slot_seg)) if sim is not None else None
        if best is not None and c.novelty_feeding:
            # how closely the slot matches its best earlier slot; low means a likely new speaker
            h = ad.add(h, apply_linear(p, "dec.novel", best))
        for i in range(c.dec_layers):
            if c.cross_first:
                h = self._cross(h, enc, mask, i)
                h = self._self(h, causal, i, sim)
            else:
                h = self._self(h, causal, i, sim)
                h = self._cross(h, enc, mask, i)
            a = apply_layer_norm(p, f"dec.{i}.ln3", h)
            h = ad.add(h, self._drop(feed_forward(p, f"dec.{i}.ffn", a)))
        logits = apply_linear(p, "dec.out", apply_layer_norm(p, "dec.ln", h))
        if best is None or not c.pointer_logits:
            return logits, None
        # direct evidence for copying the label of the closest earlier slot, or opening a new one
        match, absent = _label_matches(sim, np.minimum(prev_labels, c.max_clusters), np.asarray(slot_seg), c.max_clusters)
        terms = (("dec.ptr.match", match), ("dec.ptr.absent", Tensor(absent)), ("dec.ptr.novel", ad.mul(Tensor(absent), best)))
        pointer = None
        for name, term in terms:
            part = ad.mul(ad.scale(p[name], POINTER_GAIN), term)
            pointer = part if pointer is None else ad.add(pointer, part)
        return ad.add(logits, pointer), pointer

    def decode_teacher_forced(self, enc: EncoderOutput, plan: DecodePlan, target: LabelSequence) -> tuple[Tensor, Tensor]:
        """Per-slot logits with the ground-truth prefix fed in, and the mean cross entropy."""
        self._check_plan(plan)
        labels = np.asarray(target.labels)
        if len(labels) != len(plan):
            raise ValueError(f"target has {len(labels)} labels but the plan has {len(plan)} slots")
        if labels.max(initial=0) > self.cfg.max_clusters:
            raise ValueError(f"target label {labels.max()} exceeds max_clusters={self.cfg.max_clusters}")
        prev = np.concatenate([[0], labels[:-1]])
        logits = self.decoder_logits(enc, plan, prev)
        loss = ad.softmax_cross_entropy(logits, labels - 1, self.cfg.label_smoothing)
        return logits, loss

    def training_loss(self, enc: EncoderOutput, plan: DecodePlan, target: LabelSequence) -> Tensor:
        """Training objective: the decoding cross entropy plus, with pointer logits, a weighted
        cross entropy of the pointer part on its own.

        The extra term makes the pointer a usable predictor by itself, so the
        decoder leans on raw-embedding similarity instead of fitting the
        training meetings through its other inputs.
        """
        self._check_plan(plan)
        labels = np.asarray(target.labels)
        prev = np.concatenate([[0], labels[:-1]])
        logits, pointer = self._decode(enc, plan, prev)
        loss = ad.softmax_cross_entropy(logits, labels - 1, self.cfg.label_smoothing)
        if pointer is not None and self.cfg.pointer_aux_weight > 0:
            aux = ad.softmax_cross_entropy(pointer, labels - 1, self.cfg.label_smoothing)
            loss = ad.add(loss, ad.scale(aux, self.cfg.pointer_aux_weight))
        return loss

    def decode_greedy(self, enc: EncoderOutput, plan: DecodePlan) -> LabelSequence:
        """Emit exactly ``len(plan)`` labels, feeding each prediction back in.

        Labels within one segment are forced to be distinct, and a new label
        may only be the next unused integer, so the output is canonical.
        """
        self._check_plan(plan)
        K = self.cfg.max_clusters
        T = len(plan)
        slot_seg = plan.slot_segment_ids
        prev = np.zeros(T, dtype=np.int64)
        out: list[int] = []
        used: set[int] = set()
        top = 0
        with no_grad():
            for t in range(T):
                if t == 0 or slot_seg[t] != slot_seg[t - 1]:
                    used = set()
                logits = self.decoder_logits(enc, plan, prev).data[t]
                allowed = [k for k in range(1, min(top + 1, K) + 1) if k not in used]
                lab = max(allowed, key=lambda k: (logits[k - 1], -k))
                out.append(lab)
                used.add(lab)
                top = max(top, lab)
                if t + 1 < T:
                    prev[t + 1] = lab
        return canonicalize(out, slot_seg)

    def predict(self, seq: EmbeddingSequence, plan: DecodePlan) -> LabelSequence:
        with no_grad():
            enc = self.encode(seq)
        return self.decode_greedy(enc, plan)

    # -- persistence -----------------------------------------------------

    def save(self, path: str | Path, extra: dict | None = None) -> None:
        meta = {"sdnc_config": asdict(self.cfg), **(extra or {})}
        save_checkpoint(path, self.params.state(), meta)

    @classmethod
    def load(cls, path: str | Path, dtype=np.float32) -> SdncModel:
        state, meta = load_checkpoint(path)
        model = cls(SdncConfig(**meta["sdnc_config"]), dtype=dtype)
        model.params.load_state(state)
        return model


# ---------------------------------------------------------------------------
# training data


@dataclass(eq=False)
class Example:
    """One training or evaluation meeting in model terms."""

    seq: EmbeddingSequence
    plan: DecodePlan
    target: LabelSequence
    segment_speakers: list[str | None]  # sole speaker of each segment, None if several
    slot_speakers: list[str] = field(default_factory=list)
    window_owners: list[str] = field(default_factory=list)  # speaker owning each window, if known


def vad_slot_speakers(meeting: Meeting) -> list[list[str]]:
    """Speakers of each VAD segment ordered by when they start talking in it."""
    out = []
    for seg in meeting.vad_segments:
        first: dict[str, float] = {}
        for t in meeting.turns_in(seg.id):
            s = max(t.start, seg.start)
            first[t.speaker_id] = min(first.get(t.speaker_id, math.inf), s)
        out.append(sorted(first, key=lambda k: (first[k], k)))
    return out


def make_example(
    meeting: Meeting,
    stage: Stage,
    synth_cfg: SynthConfig | None = None,
    wcfg: WindowingConfig = WindowingConfig(),
    seq: EmbeddingSequence | None = None,
) -> Example:
    """Training example for ``stage``; embeddings come from ``seq`` or are simulated with ``synth_cfg``."""
    if stage not in ("pretrain_first_speaker", "finetune_vad"):
        raise ValueError(f"unknown stage {stage!r}")
    unit = "first_speaker" if stage == "pretrain_first_speaker" else "vad"
    if seq is None:
        if synth_cfg is None:
            raise ValueError("need either embeddings or a synth config to simulate them")
        seq = gen_embeddings(meeting, synth_cfg, wcfg, unit=unit)
    if unit == "first_speaker":
        speakers = [[fs.speaker_id] for fs in first_speaker_segments(meeting)]
    else:
        speakers = vad_slot_speakers(meeting)
    if len(seq.segment_order()) != len(speakers):
        raise ValueError(f"{meeting.meeting_id}: embeddings cover {len(seq.segment_order())} units, expected {len(speakers)}")
    order = seq.segment_order()
    plan = DecodePlan(order, [len(s) for s in speakers])
    flat = [spk for group in speakers for spk in group]
    target = canonicalize(flat, plan.slot_segment_ids)
    owners = window_speakers(meeting, seq, unit)
    return Example(seq, plan, target, [g[0] if len(g) == 1 else None for g in speakers], flat, owners)


def make_examples(meetings: Iterable[Meeting], stage: Stage, synth_cfg: SynthConfig, wcfg: WindowingConfig = WindowingConfig()) -> list[Example]:
    return [make_example(m, stage, synth_cfg, wcfg) for m in meetings]


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    params: ModelParams
    loss_curve: list[float]
    steps: int


def _augment(ex: Example, tcfg: TrainConfig, seed: int, epoch: int, index: int) -> EmbeddingSequence:
    seq = ex.seq
    if tcfg.noise_shrink_prob > 0 and ex.window_owners:
        rng = rng_for(seed, epoch, index, "shrink")
        if rng.random() < tcfg.noise_shrink_prob:
            seq = shrink_noise(seq, ex.window_owners, float(rng.random()))
    if tcfg.shuffle:
        seq = speaker_shuffle(seq, ex.segment_speakers, rng_for(seed, epoch, index, "shuffle"))
    if tcfg.rotate:
        seq = apply_rotation(seq, rotation_for(seed, epoch, index, seq.dim))
    return seq


def perturb_counts(ex: Example, prob: float, rng: np.random.Generator, max_clusters: int) -> tuple[DecodePlan, LabelSequence]:
    """Plan and target as seen through a speaker counter that is off by one with probability ``prob``.

    An overcounted segment gains a trailing slot owned by a speaker who never
    appears again; an undercounted one loses its last slot. Targets are
    re-canonicalized, so a speaker whose only earlier slot was dropped is new
    when it next appears.
    """
    groups, pos = [], 0
    for k in ex.plan.counts:
        groups.append(list(ex.slot_speakers[pos : pos + k]))
        pos += k
    distinct = len(set(ex.slot_speakers))
    for sid, g in zip(ex.plan.segment_ids, groups):
        if rng.random() >= prob:
            continue
        if rng.random() < 0.5:
            if len(g) < max_clusters and distinct < max_clusters:
                g.append(f"phantom-{sid}")
                distinct += 1
        elif len(g) > 1:
            g.pop()
    plan = DecodePlan(ex.plan.segment_ids, [len(g) for g in groups])
    return plan, canonicalize([spk for g in groups for spk in g], plan.slot_segment_ids)


def train(
    model: SdncModel,
    corpus: Sequence[Example],
    stage: Stage,
    tcfg: TrainConfig = TrainConfig(),
    seed: int = 0,
    checkpoint_dir: str | Path | None = None,
) -> TrainResult:
    """Adam training with fresh shuffle + rotation augmentation per example per epoch.

    Fine-tuning also perturbs speaker counts with ``tcfg.count_noise_prob`` so
    the decoder learns to recover from a miscounted segment.
    """
    K = model.cfg.max_clusters
    for k, ex in enumerate(corpus):
        if ex.target.num_clusters > K or max(ex.plan.counts, default=0) > K:
            raise ValueError(f"example {k} ({ex.seq.meeting_id}) has more than max_clusters={K} speakers")
        if stage == "pretrain_first_speaker" and any(c != 1 for c in ex.plan.counts):
            raise ValueError(f"pretraining example {k} has a segment with more than one slot")

    opt = Adam(model.params, tcfg.lr, tcfg.beta1, tcfg.beta2, tcfg.eps)
    curve: list[float] = []
    if checkpoint_dir is not None:
        Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
    model._rng = rng_for(seed, "dropout") if model.cfg.dropout > 0 else None
    try:
        for epoch in range(tcfg.epochs):
            if not corpus:
                break
            order = rng_for(seed, epoch, "order").permutation(len(corpus))
            total, pending = 0.0, 0
            model.params.zero_grad()
            for n, idx in enumerate(order):
                ex = corpus[idx]
                seq = _augment(ex, tcfg, seed, epoch, int(idx))
                plan, target = ex.plan, ex.target
                if stage == "finetune_vad" and tcfg.count_noise_prob > 0:
                    plan, target = perturb_counts(ex, tcfg.count_noise_prob, rng_for(seed, epoch, int(idx), "counts"), K)
                loss = model.training_loss(model.encode(seq), plan, target)
                if tcfg.batch_size > 1:
                    loss = ad.scale(loss, 1.0 / tcfg.batch_size)
                ad.backward(loss)
                total += loss.item() * max(tcfg.batch_size, 1)
                pending += 1
                if pending == tcfg.batch_size or n == len(order) - 1:
                    opt.step(warmup_lr(opt.t, tcfg.lr, tcfg.warmup_steps))
                    model.params.zero_grad()
                    pending = 0
            curve.append(total / len(corpus))
            log.info("%s epoch %d loss %.4f", stage, epoch + 1, curve[-1])
            if checkpoint_dir is not None:
                model.save(Path(checkpoint_dir) / f"{stage}-epoch{epoch + 1:03d}.ckpt", {"stage": stage, "epoch": epoch + 1})
    finally:
        model._rng = None
    return TrainResult(model.params, curve, opt.t)


def slot_accuracy(pred: LabelSequence, target: LabelSequence) -> float:
    """Fraction of slots right under the best one-to-one label mapping."""
    if len(pred) != len(target):
        raise ValueError("label sequences differ in length")
    if not len(pred):
        return 1.0
    a, b = np.asarray(pred.labels), np.asarray(target.labels)
    cont = np.zeros((a.max(), b.max()))
    np.add.at(cont, (a - 1, b - 1), 1)
    r, c = linear_sum_assignment(-cont)
    return float(cont[r, c].sum() / len(a))
