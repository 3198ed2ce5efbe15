"""'First Speaker' segmentation and fixed-length window slicing."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .core import EPS, Meeting, SpeakerTurn, TimeInterval, VadSegment


class EmptySegmentError(ValueError):
    pass


@dataclass(frozen=True, slots=True)
class WindowingConfig:
    window_len: float = 1.5
    stride: float = 1.5
    min_window: float = 0.05

    def __post_init__(self) -> None:
        if self.window_len <= 0 or self.stride <= 0:
            raise ValueError("window_len and stride must be positive")
        if not 0 <= self.min_window < self.window_len:
            raise ValueError("min_window must lie in [0, window_len)")


@dataclass(frozen=True, slots=True)
class FirstSpeakerSegment:
    parent_segment_id: int
    interval: TimeInterval
    speaker_id: str


def _owner_key(turn: SpeakerTurn) -> tuple[float, float, str]:
    return (turn.start, turn.end, turn.speaker_id)


def first_speaker_split(segment: VadSegment, turns: Sequence[SpeakerTurn]) -> list[FirstSpeakerSegment]:
    """Split a VAD segment so overlapped time goes to whoever started first.

    At every instant the owner is the active turn with the earliest start;
    ties go to the earlier end, then the smaller speaker id. Runs of the same
    owner that touch are merged.
    """
    clipped = []
    for t in turns:
        iv = t.interval.clip(segment.interval)
        if iv is not None:
            clipped.append(SpeakerTurn(t.speaker_id, iv))
    if not clipped:
        raise EmptySegmentError(f"no turn intersects VAD segment {segment.id}")

    cuts = sorted({x for t in clipped for x in (t.start, t.end)})
    pieces: list[FirstSpeakerSegment] = []
    for lo, hi in zip(cuts, cuts[1:]):
        if hi - lo <= EPS:
            continue
        active = [t for t in clipped if t.start <= lo + EPS and t.end >= hi - EPS]
        if not active:
            continue
        owner = min(active, key=_owner_key).speaker_id
        last = pieces[-1] if pieces else None
        if last is not None and last.speaker_id == owner and abs(last.interval.end - lo) <= EPS:
            pieces[-1] = FirstSpeakerSegment(segment.id, TimeInterval(last.interval.start, hi), owner)
        else:
            pieces.append(FirstSpeakerSegment(segment.id, TimeInterval(lo, hi), owner))
    return pieces


def first_speaker_segments(meeting: Meeting) -> list[FirstSpeakerSegment]:
    """First Speaker split of every VAD segment of the meeting, in time order."""
    out = []
    for seg in meeting.vad_segments:
        out.extend(first_speaker_split(seg, meeting.turns_in(seg.id)))
    return out


def slice_windows(interval: TimeInterval, cfg: WindowingConfig = WindowingConfig()) -> list[TimeInterval]:
    """Fixed-length windows over ``interval``; the last one is cut at the interval end."""
    if interval.duration <= EPS:
        raise ValueError(f"cannot window an interval of duration {interval.duration}")
    windows = []
    k = 0
    while True:
        off = interval.start + k * cfg.stride
        if off >= interval.end - EPS:
            break
        windows.append(TimeInterval(off, min(off + cfg.window_len, interval.end)))
        k += 1
    kept = [w for w in windows if w.duration >= cfg.min_window - EPS]
    return kept or windows[:1]


def mark_homogeneous(meeting: Meeting) -> list[tuple[int, bool]]:
    """Flag each VAD segment that exactly one reference speaker talks in."""
    out = []
    for seg in meeting.vad_segments:
        speakers = {t.speaker_id for t in meeting.turns_in(seg.id)}
        out.append((seg.id, len(speakers) == 1))
    return out


def homogeneous_ids(meeting: Meeting) -> list[int]:
    return [sid for sid, ok in mark_homogeneous(meeting) if ok]
