"""DER, WER, cpWER and cpWER-P, plus the homogeneous-segment (-H) views."""

from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable, Iterable, Mapping, Sequence

import numpy as np
from rapidfuzz.distance import Levenshtein
from scipy.optimize import linear_sum_assignment

from .core import LabelSequence, Meeting, SpeakerAttributedTranscript, TimeInterval, TranscriptEntry, Turn
from .segmentation import homogeneous_ids

UNDEFINED = float("nan")
EXHAUSTIVE_LIMIT = 10_000


@dataclass(frozen=True)
class WerResult:
    errors: int
    substitutions: int
    deletions: int
    insertions: int
    ref_len: int

    @property
    def ratio(self) -> float:
        """errors / |ref|; inf when the reference is empty but the hypothesis is not."""
        if self.ref_len == 0:
            return 0.0 if self.errors == 0 else math.inf
        return self.errors / self.ref_len

    @property
    def empty_reference(self) -> bool:
        return self.ref_len == 0


def edit_distance(ref: Sequence[Hashable], hyp: Sequence[Hashable]) -> int:
    return Levenshtein.distance(list(ref), list(hyp))


def wer(ref: Sequence[str], hyp: Sequence[str]) -> WerResult:
    """Unit-cost Levenshtein alignment of two token sequences."""
    ops = Levenshtein.editops(list(ref), list(hyp))
    counts = {"replace": 0, "delete": 0, "insert": 0}
    for op in ops:
        counts[op.tag] += 1
    return WerResult(
        errors=len(ops),
        substitutions=counts["replace"],
        deletions=counts["delete"],
        insertions=counts["insert"],
        ref_len=len(ref),
    )


# ---------------------------------------------------------------------------
# DER


@dataclass(frozen=True)
class DerConfig:
    collar: float = 0.25
    include_overlap: bool = True
    frame: float = 0.01

    def __post_init__(self) -> None:
        if self.collar < 0:
            raise ValueError("collar must be non-negative")
        if self.frame <= 0:
            raise ValueError("frame must be positive")


@dataclass(frozen=True)
class DerResult:
    miss: float
    false_alarm: float
    confusion: float
    total_ref: float
    correct: float = 0.0
    mapping: dict = field(default_factory=dict, compare=False)

    @property
    def der(self) -> float:
        if self.total_ref <= 0:
            return UNDEFINED
        return (self.miss + self.false_alarm + self.confusion) / self.total_ref


def _activity(turns: Sequence[Turn], centers: np.ndarray) -> tuple[list[str], np.ndarray]:
    names = sorted({spk for spk, _ in turns})
    act = np.zeros((len(names), len(centers)), dtype=bool)
    row = {n: i for i, n in enumerate(names)}
    for spk, iv in turns:
        act[row[spk]] |= (centers >= iv.start) & (centers < iv.end)
    return names, act


def der(ref_turns: Sequence[Turn], hyp_turns: Sequence[Turn], cfg: DerConfig = DerConfig()) -> DerResult:
    """Frame-level DER with a collar around reference boundaries and an optimal speaker map."""
    end = max([iv.end for _, iv in list(ref_turns) + list(hyp_turns)], default=0.0)
    n_frames = int(math.ceil(end / cfg.frame)) + 1
    centers = (np.arange(n_frames) + 0.5) * cfg.frame
    ref_names, R = _activity(ref_turns, centers)
    hyp_names, H = _activity(hyp_turns, centers)

    scored = np.ones(n_frames, dtype=bool)
    if cfg.collar > 0:
        for _, iv in ref_turns:
            for b in (iv.start, iv.end):
                scored &= np.abs(centers - b) >= cfg.collar
    if not cfg.include_overlap:
        scored &= R.sum(axis=0) <= 1
    R, H = R[:, scored], H[:, scored]

    n_ref, n_hyp = R.sum(axis=0), H.sum(axis=0)
    overlap = R.astype(np.int64) @ H.T.astype(np.int64)
    mapping: dict[str, str] = {}
    correct_frames = 0
    if overlap.size:
        rows, cols = linear_sum_assignment(-overlap)
        for r, c in zip(rows, cols):
            if overlap[r, c] > 0:
                mapping[hyp_names[c]] = ref_names[r]
            correct_frames += int(overlap[r, c])
    miss = int(np.maximum(n_ref - n_hyp, 0).sum())
    fa = int(np.maximum(n_hyp - n_ref, 0).sum())
    conf = int(np.minimum(n_ref, n_hyp).sum()) - correct_frames
    f = cfg.frame
    return DerResult(miss * f, fa * f, conf * f, int(n_ref.sum()) * f, correct_frames * f, mapping)


# ---------------------------------------------------------------------------
# cpWER


@dataclass(frozen=True)
class CpwerResult:
    errors: int
    ref_words: int
    mapping: dict  # hyp label -> ref speaker (None when matched to an empty stream)

    @property
    def ratio(self) -> float:
        if self.ref_words == 0:
            return 0.0 if self.errors == 0 else math.inf
        return self.errors / self.ref_words


def cpwer(ref_by_speaker: Mapping[Hashable, Sequence[str]], hyp_by_label: Mapping[Hashable, Sequence[str]]) -> CpwerResult:
    """Concatenated minimum-permutation WER via an exact assignment on pairwise edit distances."""
    refs = list(ref_by_speaker)
    hyps = list(hyp_by_label)
    n = max(len(refs), len(hyps))
    cost = np.zeros((n, n), dtype=np.int64)
    for i in range(n):
        r = ref_by_speaker[refs[i]] if i < len(refs) else ()
        for j in range(n):
            h = hyp_by_label[hyps[j]] if j < len(hyps) else ()
            cost[i, j] = edit_distance(r, h) if (r and h) else len(r) + len(h)
    rows, cols = linear_sum_assignment(cost)
    mapping = {}
    for i, j in zip(rows, cols):
        if j < len(hyps):
            mapping[hyps[j]] = refs[i] if i < len(refs) else None
    total = int(cost[rows, cols].sum())
    return CpwerResult(total, sum(len(v) for v in ref_by_speaker.values()), mapping)


@dataclass(frozen=True)
class CpwerPResult:
    errors: int
    ref_words: int
    method: str
    combinations: int
    relabel: dict  # segment_id -> {old label: new label}

    @property
    def ratio(self) -> float:
        if self.ref_words == 0:
            return 0.0 if self.errors == 0 else math.inf
        return self.errors / self.ref_words


def _relabel(transcript: SpeakerAttributedTranscript, maps: Mapping[int, Mapping[int, int]]) -> dict[int, list[str]]:
    out: dict[int, list[str]] = {}
    for e in transcript:
        lab = maps.get(e.segment_id, {}).get(e.speaker_label, e.speaker_label)
        out.setdefault(lab, []).extend(e.words)
    return out


def cpwer_p(
    ref_by_speaker: Mapping[Hashable, Sequence[str]],
    transcript: SpeakerAttributedTranscript,
    multi_speaker_segments: Iterable[int],
    method: str = "auto",
    exhaustive_limit: int = EXHAUSTIVE_LIMIT,
    max_sweeps: int = 20,
) -> CpwerPResult:
    """cpWER minimized over permutations of the predicted labels inside multi-speaker segments.

    ``method`` is ``"exhaustive"``, ``"greedy"`` (coordinate descent from the
    identity) or ``"auto"``, which is exhaustive when the number of joint
    permutations is at most ``exhaustive_limit``.
    """
    segs = []
    for sid in dict.fromkeys(multi_speaker_segments):
        labels = list(dict.fromkeys(e.speaker_label for e in transcript if e.segment_id == sid))
        if len(labels) >= 2:
            segs.append((sid, labels))
    combos = math.prod(math.factorial(len(l)) for _, l in segs)
    if method == "auto":
        method = "exhaustive" if combos <= exhaustive_limit else "greedy"
    if method not in ("exhaustive", "greedy"):
        raise ValueError(f"unknown method {method!r}")
    ref_words = sum(len(v) for v in ref_by_speaker.values())
    cache: dict[tuple, int] = {}

    def score(choice: tuple[tuple[int, ...], ...]) -> int:
        if choice not in cache:
            maps = {sid: dict(zip(labels, perm)) for (sid, labels), perm in zip(segs, choice)}
            cache[choice] = cpwer(ref_by_speaker, _relabel(transcript, maps)).errors
        return cache[choice]

    perms = [list(itertools.permutations(labels)) for _, labels in segs]
    if method == "exhaustive":
        best = min(itertools.product(*perms), key=score, default=())
    else:
        best = tuple(p[0] for p in perms)
        for _ in range(max_sweeps):
            changed = False
            for k in range(len(segs)):
                cand = min(perms[k], key=lambda p: score(best[:k] + (p,) + best[k + 1 :]))
                if score(best[:k] + (cand,) + best[k + 1 :]) < score(best):
                    best = best[:k] + (cand,) + best[k + 1 :]
                    changed = True
            if not changed:
                break
    relabel = {sid: dict(zip(labels, perm)) for (sid, labels), perm in zip(segs, best)}
    return CpwerPResult(score(tuple(best)), ref_words, method, combos, relabel)


# ---------------------------------------------------------------------------
# references and -H views


def reference_words_by_speaker(meeting: Meeting, segment_ids: Iterable[int] | None = None) -> dict[str, list[str]]:
    """Each speaker's words concatenated in time order, optionally only from some segments."""
    segs = meeting.vad_segments if segment_ids is None else [meeting.segment(s) for s in segment_ids]
    out: dict[str, list[str]] = {}
    for seg in sorted(segs, key=lambda s: s.start):
        for spk, w in meeting.words_in(seg.interval):
            out.setdefault(spk, []).append(w.token)
    return out


def reference_serialized(meeting: Meeting, segment_id: int) -> list[str]:
    """Segment reference in serialized order: first speaker's words, then the next speaker's."""
    groups: dict[str, list[str]] = {}
    for spk, w in meeting.words_in(meeting.segment(segment_id).interval):
        groups.setdefault(spk, []).append(w.token)
    return [tok for g in groups.values() for tok in g]


def segment_wer(meeting: Meeting, transcript: SpeakerAttributedTranscript, segment_ids: Iterable[int] | None = None) -> WerResult:
    """Speaker-agnostic WER accumulated segment by segment."""
    ids = [s.id for s in meeting.vad_segments] if segment_ids is None else list(segment_ids)
    hyp: dict[int, list[str]] = {}
    for e in transcript:
        hyp.setdefault(e.segment_id, []).extend(e.words)
    tot = [0, 0, 0, 0, 0]
    for sid in ids:
        r = wer(reference_serialized(meeting, sid), hyp.get(sid, []))
        for k, v in enumerate((r.errors, r.substitutions, r.deletions, r.insertions, r.ref_len)):
            tot[k] += v
    return WerResult(*tot)


def filter_h(meeting: Meeting, obj):
    """Restrict ``obj`` to speaker-homogeneous VAD segments.

    * list of (speaker, interval) turns -> turns clipped to homogeneous segments
    * SpeakerAttributedTranscript -> entries of homogeneous segments
    * LabelSequence of VAD-segment slots -> one hypothesis turn per homogeneous
      segment carrying the segment's first decoded label over the full segment
    """
    keep = homogeneous_ids(meeting)
    if isinstance(obj, SpeakerAttributedTranscript):
        return obj.restrict(keep)
    if isinstance(obj, LabelSequence):
        first: dict[int, int] = {}
        for lab, sid in zip(obj.labels, obj.slot_segment_ids):
            first.setdefault(sid, lab)
        return [(str(first[s]), meeting.segment(s).interval) for s in keep if s in first]
    turns = []
    for sid in keep:
        seg = meeting.segment(sid).interval
        for spk, iv in obj:
            c = iv.clip(seg)
            if c is not None:
                turns.append((spk, c))
    return turns


def multi_speaker_segment_ids(transcript: SpeakerAttributedTranscript) -> list[int]:
    """Segments in which the hypothesis has two or more distinct labels."""
    labels: dict[int, set[int]] = {}
    for e in transcript:
        labels.setdefault(e.segment_id, set()).add(e.speaker_label)
    return [s for s, ls in labels.items() if len(ls) >= 2]


# ---------------------------------------------------------------------------
# reports


@dataclass(frozen=True)
class ScoreRow:
    meeting: str
    metric: str
    value: float
    config_hash: str


def write_report(rows: Sequence[ScoreRow], json_path: str | Path | None = None, csv_path: str | Path | None = None) -> None:
    fields = ["meeting", "metric", "value", "config_hash"]
    if json_path is not None:
        payload = [
            {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in zip(fields, (r.meeting, r.metric, r.value, r.config_hash))}
            for r in rows
        ]
        Path(json_path).write_text(json.dumps(payload, indent=1) + "\n")
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(fields)
            for r in rows:
                w.writerow([r.meeting, r.metric, "undefined" if math.isnan(r.value) else repr(r.value), r.config_hash])


def read_report_csv(path: str | Path) -> list[ScoreRow]:
    with open(path, newline="") as fh:
        return [
            ScoreRow(d["meeting"], d["metric"], UNDEFINED if d["value"] == "undefined" else float(d["value"]), d["config_hash"])
            for d in csv.DictReader(fh)
        ]


def transcript_to_dict(t: SpeakerAttributedTranscript) -> list[dict]:
    return [{"segment_id": e.segment_id, "speaker_label": e.speaker_label, "words": list(e.words)} for e in t]


def transcript_from_dict(rows: Sequence[Mapping]) -> SpeakerAttributedTranscript:
    return SpeakerAttributedTranscript(
        tuple(TranscriptEntry(int(r["segment_id"]), int(r["speaker_label"]), tuple(r["words"])) for r in rows)
    )


def hyp_turns_from_dicts(rows: Sequence[Mapping]) -> list[Turn]:
    return [(str(r["speaker"]), TimeInterval(float(r["start"]), float(r["end"]))) for r in rows]
