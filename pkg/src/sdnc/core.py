"""Domain types and file I/O shared across the package.

Everything here is immutable after construction. Times are float seconds and
compared with a fixed epsilon of ``EPS`` seconds.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

EPS = 1e-9
DEFAULT_MAX_SPEAKERS = 5


class MeetingFormatError(ValueError):
    """A meeting, embedding or RTTM file could not be parsed."""


class ValidationError(ValueError):
    """A value violates one of the domain type invariants."""


@dataclass(frozen=True, slots=True)
class TimeInterval:
    start: float
    end: float

    def __post_init__(self) -> None:
        if not (np.isfinite(self.start) and np.isfinite(self.end)):
            raise ValidationError(f"non-finite interval {self.start}..{self.end}")
        if self.start < -EPS:
            raise ValidationError(f"negative start time {self.start}")
        if self.end < self.start - EPS:
            raise ValidationError(f"interval end {self.end} before start {self.start}")

    @property
    def duration(self) -> float:
        return max(self.end - self.start, 0.0)

    @property
    def midpoint(self) -> float:
        return 0.5 * (self.start + self.end)

    def contains_time(self, t: float) -> bool:
        return self.start - EPS <= t <= self.end + EPS

    def contains(self, other: TimeInterval) -> bool:
        return self.start - EPS <= other.start and other.end <= self.end + EPS

    def intersects(self, other: TimeInterval) -> bool:
        """True when the two intervals share a region of positive length."""
        return min(self.end, other.end) - max(self.start, other.start) > EPS

    def clip(self, other: TimeInterval) -> TimeInterval | None:
        lo, hi = max(self.start, other.start), min(self.end, other.end)
        if hi - lo <= EPS:
            return None
        return TimeInterval(lo, hi)


@dataclass(frozen=True, slots=True)
class Word:
    token: str
    time: float


@dataclass(frozen=True, slots=True)
class SpeakerTurn:
    speaker_id: str
    interval: TimeInterval
    words: tuple[Word, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "words", tuple(self.words))
        prev = -np.inf
        for w in self.words:
            if w.time < prev - EPS:
                raise ValidationError(f"word times of turn {self.speaker_id} are not sorted")
            if not self.interval.contains_time(w.time):
                raise ValidationError(
                    f"word {w.token!r} at {w.time} outside turn "
                    f"[{self.interval.start}, {self.interval.end}] of {self.speaker_id}"
                )
            prev = w.time

    @property
    def start(self) -> float:
        return self.interval.start

    @property
    def end(self) -> float:
        return self.interval.end


@dataclass(frozen=True, slots=True)
class VadSegment:
    id: int
    interval: TimeInterval

    @property
    def start(self) -> float:
        return self.interval.start

    @property
    def end(self) -> float:
        return self.interval.end


@dataclass(frozen=True)
class Meeting:
    """Ground truth for one recording: VAD segments plus reference turns."""

    meeting_id: str
    vad_segments: tuple[VadSegment, ...]
    turns: tuple[SpeakerTurn, ...]
    num_speakers: int
    max_speakers: int = field(default=DEFAULT_MAX_SPEAKERS, compare=False, repr=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "vad_segments", tuple(self.vad_segments))
        object.__setattr__(self, "turns", tuple(self.turns))
        self._validate()

    def _validate(self) -> None:
        if not 2 <= self.num_speakers <= self.max_speakers:
            raise ValidationError(
                f"num_speakers={self.num_speakers} outside [2, {self.max_speakers}]"
            )
        for k, seg in enumerate(self.vad_segments, start=1):
            if seg.id != k:
                raise ValidationError(f"VAD segment ids must be 1..M in order, got {seg.id} at {k}")
        for a, b in zip(self.vad_segments, self.vad_segments[1:]):
            if b.start < a.end - EPS:
                raise ValidationError(f"VAD segments {a.id} and {b.id} overlap or are unsorted")
        speakers = {t.speaker_id for t in self.turns}
        if len(speakers) > self.num_speakers:
            raise ValidationError(
                f"{len(speakers)} distinct speakers in turns but num_speakers={self.num_speakers}"
            )
        union = _merge_touching([s.interval for s in self.vad_segments])
        for t in self.turns:
            if not any(u.contains(t.interval) for u in union):
                raise ValidationError(
                    f"turn of {t.speaker_id} [{t.start}, {t.end}] is not inside the VAD union"
                )

    @property
    def speakers(self) -> list[str]:
        """Speaker ids in order of first speech."""
        seen: dict[str, None] = {}
        for t in sorted(self.turns, key=lambda t: (t.start, t.end, t.speaker_id)):
            seen.setdefault(t.speaker_id)
        return list(seen)

    def segment(self, segment_id: int) -> VadSegment:
        try:
            seg = self.vad_segments[segment_id - 1]
        except IndexError:
            raise KeyError(f"meeting {self.meeting_id} has no segment {segment_id}") from None
        return seg

    def turns_in(self, segment_id: int) -> list[SpeakerTurn]:
        seg = self.segment(segment_id).interval
        return [t for t in self.turns if t.interval.intersects(seg)]

    def words_in(self, interval: TimeInterval) -> list[tuple[str, Word]]:
        """(speaker, word) pairs with the word midpoint inside ``interval``, time ordered.

        Words exactly on the right edge belong to the next interval.
        """
        out = []
        for t in self.turns:
            for w in t.words:
                if interval.start - EPS <= w.time < interval.end - EPS:
                    out.append((t.speaker_id, w))
        out.sort(key=lambda sw: (sw[1].time, sw[0]))
        return out


def _merge_touching(intervals: Iterable[TimeInterval]) -> list[TimeInterval]:
    merged: list[TimeInterval] = []
    for iv in sorted(intervals, key=lambda i: i.start):
        if merged and iv.start <= merged[-1].end + EPS:
            merged[-1] = TimeInterval(merged[-1].start, max(merged[-1].end, iv.end))
        else:
            merged.append(iv)
    return merged


@dataclass(frozen=True, slots=True)
class WindowEmbedding:
    segment_id: int
    interval: TimeInterval
    vector: np.ndarray


@dataclass(frozen=True, eq=False)
class EmbeddingSequence:
    """Window-level speaker embeddings of one meeting, stored column-wise.

    ``vectors`` is (N, D); ``segment_ids`` and ``intervals`` are length N and
    (N, 2). Rows are sorted by (segment_id, start).
    """

    meeting_id: str
    segment_ids: np.ndarray
    intervals: np.ndarray
    vectors: np.ndarray

    def __post_init__(self) -> None:
        seg = np.asarray(self.segment_ids, dtype=np.int64).reshape(-1)
        ivs = np.asarray(self.intervals, dtype=np.float64).reshape(-1, 2)
        vec = np.asarray(self.vectors, dtype=np.float64)
        if vec.ndim != 2:
            raise ValidationError(f"vectors must be 2-D, got shape {vec.shape}")
        if not (len(seg) == len(ivs) == len(vec)):
            raise ValidationError("segment_ids, intervals and vectors differ in length")
        if not np.all(np.isfinite(vec)):
            raise ValidationError("embedding vectors must be finite")
        if np.any(ivs[:, 1] < ivs[:, 0] - EPS):
            raise ValidationError("window interval end before start")
        order = np.lexsort((ivs[:, 0], seg))
        if np.any(order != np.arange(len(seg))):
            raise ValidationError("windows must be sorted by (segment_id, start)")
        for arr in (seg, ivs, vec):
            arr.flags.writeable = False
        object.__setattr__(self, "segment_ids", seg)
        object.__setattr__(self, "intervals", ivs)
        object.__setattr__(self, "vectors", vec)

    @classmethod
    def from_windows(cls, meeting_id: str, windows: Sequence[WindowEmbedding], dim: int | None = None) -> EmbeddingSequence:
        if not windows:
            d = 0 if dim is None else dim
            return cls(meeting_id, np.zeros(0, np.int64), np.zeros((0, 2)), np.zeros((0, d)))
        return cls(
            meeting_id,
            np.array([w.segment_id for w in windows]),
            np.array([[w.interval.start, w.interval.end] for w in windows]),
            np.stack([np.asarray(w.vector, dtype=np.float64) for w in windows]),
        )

    def __len__(self) -> int:
        return len(self.segment_ids)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def windows(self) -> list[WindowEmbedding]:
        return [
            WindowEmbedding(int(s), TimeInterval(float(a), float(b)), v)
            for s, (a, b), v in zip(self.segment_ids, self.intervals, self.vectors)
        ]

    def segment_order(self) -> list[int]:
        """Distinct segment ids in sequence order."""
        return list(dict.fromkeys(int(s) for s in self.segment_ids))

    def with_vectors(self, vectors: np.ndarray) -> EmbeddingSequence:
        return EmbeddingSequence(self.meeting_id, self.segment_ids, self.intervals, vectors)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EmbeddingSequence):
            return NotImplemented
        return (
            self.meeting_id == other.meeting_id
            and np.array_equal(self.segment_ids, other.segment_ids)
            and np.array_equal(self.intervals, other.intervals)
            and np.array_equal(self.vectors, other.vectors)
        )


@dataclass(frozen=True, slots=True)
class LabelSequence:
    """Relative cluster labels, one per output slot, in first-appearance order."""

    labels: tuple[int, ...]
    slot_segment_ids: tuple[int, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "labels", tuple(int(x) for x in self.labels))
        object.__setattr__(self, "slot_segment_ids", tuple(int(x) for x in self.slot_segment_ids))
        if len(self.labels) != len(self.slot_segment_ids):
            raise ValidationError("labels and slot_segment_ids differ in length")
        top = 0
        for lab in self.labels:
            if lab < 1 or lab > top + 1:
                raise ValidationError(f"labels {self.labels} are not in canonical first-appearance form")
            top = max(top, lab)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_clusters(self) -> int:
        return max(self.labels, default=0)


@dataclass(frozen=True, slots=True)
class TranscriptEntry:
    segment_id: int
    speaker_label: int
    words: tuple[str, ...]


@dataclass(frozen=True)
class SpeakerAttributedTranscript:
    entries: tuple[TranscriptEntry, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "entries", tuple(self.entries))
        seen: set[int] = set()
        prev = None
        for e in self.entries:
            if e.segment_id != prev:
                if e.segment_id in seen:
                    raise ValidationError(f"entries of segment {e.segment_id} are not contiguous")
                seen.add(e.segment_id)
                prev = e.segment_id

    def __iter__(self) -> Iterator[TranscriptEntry]:
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def by_label(self) -> dict[int, list[str]]:
        out: dict[int, list[str]] = {}
        for e in self.entries:
            out.setdefault(e.speaker_label, []).extend(e.words)
        return out

    def restrict(self, segment_ids: Iterable[int]) -> SpeakerAttributedTranscript:
        keep = set(segment_ids)
        return SpeakerAttributedTranscript(tuple(e for e in self.entries if e.segment_id in keep))


# --------------------------------------------------------------------------
# Meeting JSON


def meeting_to_dict(m: Meeting) -> dict:
    return {
        "meeting_id": m.meeting_id,
        "num_speakers": m.num_speakers,
        "vad_segments": [{"id": s.id, "start": s.start, "end": s.end} for s in m.vad_segments],
        "turns": [
            {
                "speaker": t.speaker_id,
                "start": t.start,
                "end": t.end,
                "words": [{"token": w.token, "time": w.time} for w in t.words],
            }
            for t in m.turns
        ],
    }


def meeting_from_dict(d: dict, max_speakers: int = DEFAULT_MAX_SPEAKERS) -> Meeting:
    try:
        segs = [VadSegment(int(s["id"]), TimeInterval(float(s["start"]), float(s["end"]))) for s in d["vad_segments"]]
        turns = [
            SpeakerTurn(
                str(t["speaker"]),
                TimeInterval(float(t["start"]), float(t["end"])),
                tuple(Word(str(w["token"]), float(w["time"])) for w in t.get("words", [])),
            )
            for t in d["turns"]
        ]
        return Meeting(str(d["meeting_id"]), tuple(segs), tuple(turns), int(d["num_speakers"]), max_speakers)
    except (KeyError, TypeError) as exc:
        raise MeetingFormatError(f"malformed meeting object: {exc!r}") from exc


def save_meeting(m: Meeting, path: str | Path) -> None:
    Path(path).write_text(json.dumps(meeting_to_dict(m), indent=1) + "\n")


def load_meeting(path: str | Path, max_speakers: int = DEFAULT_MAX_SPEAKERS) -> Meeting:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise MeetingFormatError(f"{path}: {exc}") from exc
    if not isinstance(data, dict):
        raise MeetingFormatError(f"{path}: expected a JSON object")
    return meeting_from_dict(data, max_speakers)


# --------------------------------------------------------------------------
# Embeddings JSONL


def save_embeddings(seq: EmbeddingSequence, path: str | Path) -> None:
    with open(path, "w") as fh:
        for s, (a, b), v in zip(seq.segment_ids, seq.intervals, seq.vectors):
            row = {
                "meeting_id": seq.meeting_id,
                "segment_id": int(s),
                "start": float(a),
                "end": float(b),
                "vector": [float(x) for x in v],
            }
            fh.write(json.dumps(row) + "\n")


def load_embeddings(path: str | Path) -> EmbeddingSequence:
    rows = []
    meeting_id = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                rows.append((int(row["segment_id"]), float(row["start"]), float(row["end"]), row["vector"]))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise MeetingFormatError(f"{path}:{lineno}: {exc}") from exc
            if meeting_id is None:
                meeting_id = str(row["meeting_id"])
            elif str(row["meeting_id"]) != meeting_id:
                raise MeetingFormatError(f"{path}:{lineno}: mixed meeting ids")
    if not rows:
        raise MeetingFormatError(f"{path}: no embeddings")
    return EmbeddingSequence(
        meeting_id,
        np.array([r[0] for r in rows]),
        np.array([[r[1], r[2]] for r in rows]),
        np.array([r[3] for r in rows], dtype=np.float64),
    )


# --------------------------------------------------------------------------
# RTTM

Turn = tuple[str, TimeInterval]


def write_rttm(turns: Sequence[Turn], path: str | Path, file_id: str = "m") -> None:
    with open(path, "w") as fh:
        for spk, iv in turns:
            fh.write(
                f"SPEAKER {file_id} 1 {iv.start:.2f} {iv.duration:.2f} <NA> <NA> {spk} <NA> <NA>\n"
            )


def load_rttm(path: str | Path) -> list[Turn]:
    out: list[Turn] = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            fields = line.split()
            if not fields or fields[0].startswith("#"):
                continue
            if len(fields) != 10 or fields[0] != "SPEAKER":
                raise MeetingFormatError(f"{path}:{lineno}: expected 10 RTTM fields starting with SPEAKER")
            try:
                start, dur = float(fields[3]), float(fields[4])
                out.append((fields[7], TimeInterval(start, start + dur)))
            except ValueError as exc:
                raise MeetingFormatError(f"{path}:{lineno}: {exc}") from exc
    out.sort(key=lambda t: (t[1].start, t[1].end, t[0]))
    return out


def meeting_rttm_turns(m: Meeting) -> list[Turn]:
    return [(t.speaker_id, t.interval) for t in m.turns]
