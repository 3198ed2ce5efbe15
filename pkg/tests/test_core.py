import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import iv, meeting, turn
from sdnc.core import (
    EmbeddingSequence,
    LabelSequence,
    MeetingFormatError,
    SpeakerAttributedTranscript,
    SpeakerTurn,
    TranscriptEntry,
    ValidationError,
    Word,
    load_embeddings,
    load_meeting,
    load_rttm,
    meeting_to_dict,
    save_embeddings,
    save_meeting,
    write_rttm,
)
from sdnc.synth import SynthConfig, gen_embeddings, gen_meeting


class TestTimeInterval:
    def test_duration_and_midpoint(self):
        t = iv(1.0, 4.0)
        assert t.duration == 3.0
        assert t.midpoint == 2.5

    def test_rejects_reversed(self):
        with pytest.raises(ValidationError):
            iv(2.0, 1.0)

    def test_rejects_negative_start(self):
        with pytest.raises(ValidationError):
            iv(-1.0, 1.0)

    def test_touching_intervals_do_not_intersect(self):
        assert not iv(0, 1).intersects(iv(1, 2))
        assert iv(0, 1.5).intersects(iv(1, 2))

    def test_clip(self):
        assert iv(0, 5).clip(iv(3, 9)) == iv(3, 5)
        assert iv(0, 1).clip(iv(2, 3)) is None


class TestMeetingValidation:
    def test_minimal_meeting(self, tmp_path):
        doc = {
            "meeting_id": "m0",
            "num_speakers": 2,
            "vad_segments": [{"id": 1, "start": 0.0, "end": 1.0}],
            "turns": [{"speaker": "A", "start": 0.0, "end": 1.0, "words": [{"token": "hi", "time": 0.5}]}],
        }
        p = tmp_path / "m.json"
        p.write_text(json.dumps(doc))
        m = load_meeting(p)
        assert len(m.vad_segments) == 1
        assert m.turns[0].words == (Word("hi", 0.5),)

    def test_overlapping_vad_segments_rejected(self, tmp_path):
        doc = {
            "meeting_id": "m0",
            "num_speakers": 2,
            "vad_segments": [{"id": 1, "start": 0.0, "end": 2.0}, {"id": 2, "start": 1.5, "end": 3.0}],
            "turns": [],
        }
        p = tmp_path / "m.json"
        p.write_text(json.dumps(doc))
        with pytest.raises(ValidationError):
            load_meeting(p)

    def test_turn_outside_vad_rejected(self):
        with pytest.raises(ValidationError):
            meeting([(0, 2)], [turn("A", 1.0, 3.0)])

    def test_turn_spanning_touching_segments_allowed(self):
        m = meeting([(0, 2), (2, 4)], [turn("A", 1.0, 3.0)])
        assert len(m.turns) == 1

    def test_speaker_count_bounds(self):
        with pytest.raises(ValidationError):
            meeting([(0, 2)], [turn("A", 0, 1)], num_speakers=1)
        with pytest.raises(ValidationError):
            meeting([(0, 2)], [turn("A", 0, 1)], num_speakers=6)

    def test_more_distinct_speakers_than_declared(self):
        with pytest.raises(ValidationError):
            meeting([(0, 3)], [turn("A", 0, 1), turn("B", 1, 2), turn("C", 2, 3)], num_speakers=2)

    def test_segment_ids_must_be_sequential(self):
        from sdnc.core import Meeting, VadSegment

        with pytest.raises(ValidationError):
            Meeting("m", (VadSegment(2, iv(0, 1)),), (), 2)

    def test_word_outside_turn_rejected(self):
        with pytest.raises(ValidationError):
            SpeakerTurn("A", iv(0, 1), (Word("x", 1.5),))

    def test_unsorted_words_rejected(self):
        with pytest.raises(ValidationError):
            SpeakerTurn("A", iv(0, 2), (Word("x", 1.5), Word("y", 0.5)))

    def test_malformed_json(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text("{not json")
        with pytest.raises(MeetingFormatError):
            load_meeting(p)

    def test_missing_key(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text(json.dumps({"meeting_id": "x", "num_speakers": 2, "turns": []}))
        with pytest.raises(MeetingFormatError):
            load_meeting(p)


class TestMeetingQueries:
    def test_turns_in_and_words_in(self, toy_meeting):
        assert {t.speaker_id for t in toy_meeting.turns_in(2)} == {"A", "B"}
        words = toy_meeting.words_in(toy_meeting.segment(2).interval)
        times = [w.time for _, w in words]
        assert times == sorted(times)
        assert len(words) == 8

    def test_speakers_in_first_speech_order(self, toy_meeting):
        assert toy_meeting.speakers == ["A", "B"]


@pytest.mark.parametrize("index", range(5))
def test_synthetic_meeting_round_trip(tmp_path, index):
    m = gen_meeting(SynthConfig(seed=11), index)
    save_meeting(m, tmp_path / "m.json")
    assert load_meeting(tmp_path / "m.json") == m


def test_embeddings_round_trip(tmp_path):
    cfg = SynthConfig(seed=3)
    m = gen_meeting(cfg, 0)
    seq = gen_embeddings(m, cfg)
    save_embeddings(seq, tmp_path / "e.jsonl")
    assert load_embeddings(tmp_path / "e.jsonl") == seq


def test_embedding_sequence_must_be_sorted():
    with pytest.raises(ValidationError):
        EmbeddingSequence("m", np.array([2, 1]), np.array([[0, 1], [1, 2]]), np.ones((2, 3)))


def test_embedding_sequence_rejects_nan():
    with pytest.raises(ValidationError):
        EmbeddingSequence("m", np.array([1]), np.array([[0, 1]]), np.array([[np.nan, 0.0]]))


def test_embedding_arrays_read_only():
    seq = EmbeddingSequence("m", np.array([1]), np.array([[0, 1]]), np.ones((1, 2)))
    with pytest.raises(ValueError):
        seq.vectors[0, 0] = 5.0


class TestLabelSequence:
    def test_canonical_accepted(self):
        assert LabelSequence((1, 2, 1, 3), (1, 2, 2, 3)).num_clusters == 3

    @pytest.mark.parametrize("labels", [(2, 1), (1, 3), (0,), (1, 1, 3)])
    def test_non_canonical_rejected(self, labels):
        with pytest.raises(ValidationError):
            LabelSequence(labels, tuple(range(1, len(labels) + 1)))


class TestTranscript:
    def test_non_contiguous_segments_rejected(self):
        e = TranscriptEntry
        with pytest.raises(ValidationError):
            SpeakerAttributedTranscript((e(1, 1, ("a",)), e(2, 1, ("b",)), e(1, 2, ("c",))))

    def test_by_label_and_restrict(self):
        e = TranscriptEntry
        t = SpeakerAttributedTranscript((e(1, 1, ("a",)), e(2, 2, ("b",)), e(2, 1, ("c",))))
        assert t.by_label() == {1: ["a", "c"], 2: ["b"]}
        assert len(t.restrict([2])) == 2


class TestRttm:
    def test_format(self, tmp_path):
        p = tmp_path / "x.rttm"
        write_rttm([("A", iv(0, 1.5))], p)
        assert p.read_text() == "SPEAKER m 1 0.00 1.50 <NA> <NA> A <NA> <NA>\n"

    def test_empty(self, tmp_path):
        p = tmp_path / "x.rttm"
        write_rttm([], p)
        assert p.read_text() == ""
        assert load_rttm(p) == []

    def test_unsorted_input_sorted_output(self, tmp_path):
        p = tmp_path / "x.rttm"
        write_rttm([("B", iv(5, 6)), ("A", iv(1, 2))], p)
        assert [s for s, _ in load_rttm(p)] == ["A", "B"]

    def test_bad_line_reports_line_number(self, tmp_path):
        p = tmp_path / "x.rttm"
        p.write_text("SPEAKER m 1 0.00 1.00 <NA> <NA> A <NA> <NA>\nSPEAKER m 1 0.00\n")
        with pytest.raises(MeetingFormatError, match=":2:"):
            load_rttm(p)

    @settings(max_examples=50, deadline=None)
    @given(
        st.lists(
            st.tuples(st.sampled_from("ABC"), st.floats(0, 500, allow_nan=False), st.floats(0, 30, allow_nan=False)),
            max_size=12,
        )
    )
    def test_round_trip_within_quantization(self, tmp_path_factory, rows):
        p = tmp_path_factory.mktemp("rttm") / "x.rttm"
        turns = [(s, iv(a, a + d)) for s, a, d in rows]
        write_rttm(turns, p)
        back = sorted((spk, round(t.start, 2), round(t.duration, 2)) for spk, t in load_rttm(p))
        assert back == sorted((spk, round(t.start, 2), round(t.duration, 2)) for spk, t in turns)


def test_meeting_dict_schema(toy_meeting):
    d = meeting_to_dict(toy_meeting)
    assert set(d) == {"meeting_id", "num_speakers", "vad_segments", "turns"}
    assert set(d["turns"][0]) == {"speaker", "start", "end", "words"}
