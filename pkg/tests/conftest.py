from __future__ import annotations

import pytest

from sdnc.core import Meeting, SpeakerTurn, TimeInterval, VadSegment, Word


def iv(a: float, b: float) -> TimeInterval:
    return TimeInterval(a, b)


def turn(spk: str, a: float, b: float, *tokens: str) -> SpeakerTurn:
    """Turn with ``tokens`` spread evenly (word times at cell midpoints)."""
    n = len(tokens)
    words = tuple(Word(t, a + (k + 0.5) * (b - a) / n) for k, t in enumerate(tokens))
    return SpeakerTurn(spk, iv(a, b), words)


def meeting(segments: list[tuple[float, float]], turns: list[SpeakerTurn], num_speakers: int = 2, mid: str = "t") -> Meeting:
    segs = tuple(VadSegment(k, iv(a, b)) for k, (a, b) in enumerate(segments, start=1))
    return Meeting(mid, segs, tuple(turns), num_speakers)


@pytest.fixture
def toy_meeting() -> Meeting:
    """Three segments: A alone, A then B overlapping, B alone."""
    return meeting(
        [(0.0, 3.0), (4.0, 10.0), (11.0, 14.0)],
        [
            turn("A", 0.0, 3.0, "a1", "a2", "a3"),
            turn("A", 4.0, 8.0, "a4", "a5", "a6", "a7"),
            turn("B", 6.0, 10.0, "b1", "b2", "b3", "b4"),
            turn("B", 11.0, 14.0, "b5", "b6"),
        ],
    )
