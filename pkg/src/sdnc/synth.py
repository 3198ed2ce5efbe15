"""Deterministic stand-ins for the corpus, the embedding extractor and the ASR.

All randomness comes from counter-based Philox streams keyed on
``(seed, ...purpose keys)``, so any meeting or segment can be regenerated in
isolation and in any order.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass
from typing import Literal

import numpy as np

from .core import (
    EmbeddingSequence,
    Meeting,
    SpeakerTurn,
    TimeInterval,
    VadSegment,
    Word,
)
from .segmentation import (
    FirstSpeakerSegment,
    WindowingConfig,
    first_speaker_segments,
    first_speaker_split,
    slice_windows,
)

SC_TOKEN = "<sc>"

_CONS = "bdfgklmnprstvz"
_VOWS = "aeiou"
VOCAB: tuple[str, ...] = tuple(
    a + b + c + d for a in _CONS[:8] for b in _VOWS for c in _CONS[8:] for d in _VOWS[:2]
)  # 8*5*6*2 = 480 tokens

GAP_RANGE = (0.5, 2.0)

Unit = Literal["vad", "first_speaker"]


class InfeasibleConfigError(ValueError):
    pass


@dataclass(frozen=True, slots=True)
class SynthConfig:
    num_speakers: int = 4
    num_segments: int = 30
    dim: int = 16
    seg_dur_range: tuple[float, float] = (2.0, 8.0)
    overlap_prob: float = 0.3
    words_per_sec: float = 2.5
    embed_noise_sigma: float = 0.15
    proto_min_angle: float = 45.0
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "seg_dur_range", tuple(float(x) for x in self.seg_dur_range))
        if self.num_speakers < 2:
            raise ValueError("num_speakers must be at least 2")
        if self.dim < 2:
            raise ValueError("dim must be at least 2")
        if not 0.0 <= self.overlap_prob <= 1.0:
            raise ValueError("overlap_prob must lie in [0, 1]")
        if self.embed_noise_sigma < 0:
            raise ValueError("embed_noise_sigma must be non-negative")
        lo, hi = self.seg_dur_range
        if not 0 < lo <= hi:
            raise ValueError(f"bad seg_dur_range {self.seg_dur_range}")


@dataclass(frozen=True, slots=True)
class SotOutput:
    segment_id: int
    token_stream: tuple[str, ...]
    speaker_count: int

    def __post_init__(self) -> None:
        n_sc = sum(tok == SC_TOKEN for tok in self.token_stream)
        if self.speaker_count != n_sc + 1:
            raise ValueError(f"speaker_count {self.speaker_count} but {n_sc} change tokens")

    @property
    def groups(self) -> list[list[str]]:
        return split_groups(self.token_stream)


def split_groups(tokens) -> list[list[str]]:
    groups: list[list[str]] = [[]]
    for tok in tokens:
        if tok == SC_TOKEN:
            groups.append([])
        else:
            groups[-1].append(tok)
    return groups


def join_groups(groups: list[list[str]]) -> tuple[str, ...]:
    out: list[str] = []
    for g, grp in enumerate(groups):
        if g:
            out.append(SC_TOKEN)
        out.extend(grp)
    return tuple(out)


def _key(x) -> int:
    if isinstance(x, str):
        return zlib.crc32(x.encode())
    return int(x) & 0xFFFFFFFFFFFFFFFF


def rng_for(*keys) -> np.random.Generator:
    """Counter-based generator keyed on ints and strings."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([_key(k) for k in keys])))


def speaker_name(k: int) -> str:
    return f"spk{k + 1}"


def _words(rng: np.random.Generator, start: float, end: float, rate: float) -> tuple[Word, ...]:
    n = int(math.floor((end - start) * rate + 1e-9))
    if n == 0:
        times = [0.5 * (start + end)]
    else:
        times = [start + (k + 0.5) / rate for k in range(n)]
    toks = rng.integers(len(VOCAB), size=len(times))
    return tuple(Word(VOCAB[i], t) for i, t in zip(toks, times))


def gen_meeting(cfg: SynthConfig, index: int = 0) -> Meeting:
    """Synthesize one meeting; meeting ``index`` of the corpus defined by ``cfg.seed``."""
    if cfg.num_segments < cfg.num_speakers:
        raise InfeasibleConfigError("num_segments must be at least num_speakers")
    if cfg.seg_dur_range[0] * cfg.words_per_sec < 1.0:
        raise InfeasibleConfigError("shortest segment cannot hold a single word")
    rng = rng_for(cfg.seed, index, "meeting")
    S, M = cfg.num_speakers, cfg.num_segments

    primary = rng.integers(S, size=M)
    for spk in rng.permutation(S):
        if spk in primary:
            continue
        counts = np.bincount(primary, minlength=S)
        donors = np.flatnonzero(counts[primary] > 1)
        primary[rng.choice(donors)] = spk

    segments, turns = [], []
    t = float(rng.uniform(*GAP_RANGE))
    for i in range(M):
        dur = float(rng.uniform(*cfg.seg_dur_range))
        start, end = t, t + dur
        a = speaker_name(int(primary[i]))
        if rng.random() < cfg.overlap_prob:
            b = speaker_name(int((primary[i] + rng.integers(1, S)) % S))
            a_end = start + dur * float(rng.uniform(0.55, 0.8))
            b_start = start + dur * float(rng.uniform(0.3, (a_end - start) / dur - 0.1))
            turns.append(SpeakerTurn(a, TimeInterval(start, a_end), _words(rng, start, a_end, cfg.words_per_sec)))
            turns.append(SpeakerTurn(b, TimeInterval(b_start, end), _words(rng, b_start, end, cfg.words_per_sec)))
        else:
            turns.append(SpeakerTurn(a, TimeInterval(start, end), _words(rng, start, end, cfg.words_per_sec)))
        segments.append(VadSegment(i + 1, TimeInterval(start, end)))
        t = end + float(rng.uniform(*GAP_RANGE))

    return Meeting(f"synth-{cfg.seed}-{index:04d}", tuple(segments), tuple(turns), S, max(S, 5))


def gen_corpus(cfg: SynthConfig, n: int, start_index: int = 0) -> list[Meeting]:
    return [gen_meeting(cfg, i) for i in range(start_index, start_index + n)]


def sample_prototypes(rng: np.random.Generator, n: int, dim: int, min_angle_deg: float, max_tries: int = 10000) -> np.ndarray:
    """Unit vectors with pairwise angle at least ``min_angle_deg`` by rejection sampling."""
    limit = math.cos(math.radians(min_angle_deg))
    protos: list[np.ndarray] = []
    for _ in range(max_tries):
        v = rng.standard_normal(dim)
        v /= np.linalg.norm(v)
        if all(float(v @ p) <= limit for p in protos):
            protos.append(v)
            if len(protos) == n:
                return np.stack(protos)
    raise InfeasibleConfigError(
        f"could not place {n} prototypes {min_angle_deg} deg apart in {dim} dims"
    )


def speaker_prototypes(meeting: Meeting, cfg: SynthConfig) -> dict[str, np.ndarray]:
    rng = rng_for(cfg.seed, meeting.meeting_id, "prototypes")
    names = sorted({t.speaker_id for t in meeting.turns})
    protos = sample_prototypes(rng, len(names), cfg.dim, cfg.proto_min_angle)
    return dict(zip(names, protos))


def embedding_units(meeting: Meeting, unit: Unit = "vad") -> list[tuple[TimeInterval, list[FirstSpeakerSegment]]]:
    """Intervals that windows are sliced over, each with its First Speaker pieces."""
    if unit == "vad":
        return [
            (seg.interval, first_speaker_split(seg, meeting.turns_in(seg.id))) for seg in meeting.vad_segments
        ]
    if unit == "first_speaker":
        return [(fs.interval, [fs]) for fs in first_speaker_segments(meeting)]
    raise ValueError(f"unknown unit {unit!r}")


def _owner_at(pieces: list[FirstSpeakerSegment], t: float) -> str:
    for p in pieces:
        if p.interval.start <= t <= p.interval.end:
            return p.speaker_id
    return min(pieces, key=lambda p: min(abs(p.interval.start - t), abs(p.interval.end - t))).speaker_id


def window_speakers(meeting: Meeting, seq: EmbeddingSequence, unit: Unit = "vad") -> list[str]:
    """Owner of each window midpoint under the First Speaker rule."""
    units = embedding_units(meeting, unit)
    return [_owner_at(units[s - 1][1], 0.5 * (a + b)) for s, (a, b) in zip(seq.segment_ids, seq.intervals)]


def gen_embeddings(
    meeting: Meeting,
    cfg: SynthConfig,
    wcfg: WindowingConfig = WindowingConfig(),
    unit: Unit = "vad",
) -> EmbeddingSequence:
    """Noisy-prototype window embeddings for a meeting.

    ``unit="vad"`` slides windows over whole VAD segments; ``"first_speaker"``
    slides them over First Speaker segments, which then act as the segments
    (numbered 1..F in time order).
    """
    protos = speaker_prototypes(meeting, cfg)
    rng = rng_for(cfg.seed, meeting.meeting_id, "noise", unit)
    seg_ids, ivs, vecs = [], [], []
    for k, (interval, pieces) in enumerate(embedding_units(meeting, unit), start=1):
        for w in slice_windows(interval, wcfg):
            proto = protos[_owner_at(pieces, w.midpoint)]
            if cfg.embed_noise_sigma == 0:
                v = proto.copy()
            else:
                v = proto + cfg.embed_noise_sigma * rng.standard_normal(cfg.dim)
                v /= np.linalg.norm(v)
            seg_ids.append(k)
            ivs.append((w.start, w.end))
            vecs.append(v)
    return EmbeddingSequence(meeting.meeting_id, np.array(seg_ids), np.array(ivs), np.array(vecs))


def _corrupt(rng: np.random.Generator, words: list[str], sub_prob: float, del_prob: float) -> list[str]:
    out = []
    for w in words:
        u = rng.random()
        if u < del_prob:
            continue
        if u < del_prob + sub_prob:
            idx = VOCAB.index(w) if w in VOCAB else 0
            w = VOCAB[(idx + int(rng.integers(1, len(VOCAB)))) % len(VOCAB)]
        out.append(w)
    return out


def sot_simulate(
    meeting: Meeting,
    segment_id: int,
    count_error_prob: float = 0.0,
    seed: int = 0,
    sub_prob: float = 0.0,
    del_prob: float = 0.0,
) -> SotOutput:
    """Serialized transcript of a segment: speakers in order of their first word, joined by ``<sc>``.

    With probability ``count_error_prob`` the number of groups is moved by one:
    up by splitting the longest group in half, down by merging the last two.
    """
    seg = meeting.segment(segment_id)
    rng = rng_for(seed, meeting.meeting_id, segment_id, "sot")
    order: dict[str, list[str]] = {}
    for spk, w in meeting.words_in(seg.interval):
        order.setdefault(spk, []).append(w.token)
    groups = [_corrupt(rng, toks, sub_prob, del_prob) for toks in order.values()] or [[]]

    if rng.random() < count_error_prob:
        target = max(1, len(groups) + (1 if rng.random() < 0.5 else -1))
        if target > len(groups):
            g = max(range(len(groups)), key=lambda i: (len(groups[i]), -i))
            grp = groups[g]
            if len(grp) >= 2:
                h = len(grp) // 2
                groups[g : g + 1] = [grp[:h], grp[h:]]
            else:
                groups.append([])
        elif target < len(groups):
            groups[-2:] = [groups[-2] + groups[-1]]
    return SotOutput(segment_id, join_groups(groups), len(groups))


def asr_simulate(
    meeting: Meeting,
    interval: TimeInterval,
    sub_prob: float = 0.0,
    del_prob: float = 0.0,
    seed: int = 0,
) -> list[str]:
    """Time-ordered reference words whose midpoint falls inside ``interval``, corrupted."""
    rng = rng_for(seed, meeting.meeting_id, round(interval.start * 1000), round(interval.end * 1000), "asr")
    return _corrupt(rng, [w.token for _, w in meeting.words_in(interval)], sub_prob, del_prob)
