import csv
import itertools
import math

import numpy as np
import pytest
from conftest import meeting, turn

from sdnc import pipeline as pl
from sdnc.core import EmbeddingSequence, LabelSequence
from sdnc.model import DecodePlan, SdncConfig, canonicalize, vad_slot_speakers
from sdnc.pipeline import (
    METRICS,
    PipelineConfig,
    Ratio,
    SystemReport,
    compare,
    output_from_dict,
    output_to_dict,
    reference_output,
    run_cascaded,
    run_corpus,
    run_parallel,
    run_parallel_sc,
    run_system,
    score_meeting,
    wilcoxon_p,
    write_comparison_csv,
)
from sdnc.synth import SynthConfig, gen_corpus, gen_embeddings, sot_simulate


class OracleModel:
    """Stands in for a trained SDNC: returns the true labels, fitted to the requested plan."""

    cfg = SdncConfig()

    def __init__(self, m):
        self.speakers = dict(zip([s.id for s in m.vad_segments], vad_slot_speakers(m)))

    def predict(self, seq: EmbeddingSequence, plan: DecodePlan) -> LabelSequence:
        flat = []
        for sid, k in zip(plan.segment_ids, plan.counts):
            spk = self.speakers[sid]
            flat.extend((spk + [f"extra{j}" for j in range(k)])[:k])
        return canonicalize(flat, plan.slot_segment_ids)


def windows_seq(m, per_segment_windows):
    """One unit window per listed interval, all vectors equal (SC is patched where it matters)."""
    seg, ivs = [], []
    for s in m.vad_segments:
        for a, b in per_segment_windows[s.id]:
            seg.append(s.id)
            ivs.append((a, b))
    n = len(seg)
    return EmbeddingSequence(m.meeting_id, np.array(seg), np.array(ivs, dtype=float), np.ones((n, 4)))


def toy_windows(m):
    return windows_seq(m, {1: [(0, 1), (1, 2), (2, 3)], 2: [(4, 5.5), (5.5, 7), (7, 8.5), (8.5, 10)], 3: [(11, 12.5), (12.5, 14)]})


def patch_sc(monkeypatch, labels):
    monkeypatch.setattr(pl, "spectral_cluster", lambda seq, cfg: np.asarray(labels))


class TestConfig:
    def test_probability_range(self):
        with pytest.raises(ValueError):
            PipelineConfig(asr_sub_prob=1.5)

    def test_mode(self):
        with pytest.raises(ValueError):
            PipelineConfig(mode="serial")


class TestCascaded:
    def test_boundary_window_error_hand_trace(self, monkeypatch):
        m = meeting(
            [(0.0, 4.0), (5.0, 9.0)],
            [turn("A", 0.0, 4.0, "a1", "a2", "a3", "a4"), turn("B", 5.0, 9.0, "b1", "b2", "b3", "b4")],
        )
        seq = windows_seq(m, {1: [(0, 1), (1, 2), (2, 3), (3, 4)], 2: [(5, 6), (6, 7), (7, 8), (8, 9)]})
        patch_sc(monkeypatch, [1, 1, 1, 2, 2, 2, 2, 2])
        out = run_cascaded(m, seq, PipelineConfig(mode="cascaded_sc"))
        assert out.transcript.by_label() == {1: ["a1", "a2", "a3"], 2: ["a4", "b1", "b2", "b3", "b4"]}
        # a4 is deleted from A's stream and inserted into B's: 2 errors over 8 words
        assert score_meeting(m, out)["cpwer"] == Ratio(2, 8)

    def test_perfect_labels_give_zero(self, toy_meeting, monkeypatch):
        patch_sc(monkeypatch, [1, 1, 1, 1, 1, 2, 2, 2, 2])
        out = run_cascaded(toy_meeting, toy_windows(toy_meeting), PipelineConfig(mode="cascaded_sc"))
        assert out.hyp_turns[0] == ("1", toy_meeting.segment(1).interval)
        assert len(out.transcript.entries) == 4

    def test_missing_segment_embeddings(self, toy_meeting):
        seq = windows_seq(toy_meeting, {1: [(0, 1)], 2: [(4, 5)], 3: []})
        with pytest.raises(ValueError):
            run_cascaded(toy_meeting, seq, PipelineConfig(mode="cascaded_sc"))

    def test_deterministic(self):
        cfg = SynthConfig(seed=2)
        m = gen_corpus(cfg, 1)[0]
        e = gen_embeddings(m, cfg)
        pc = PipelineConfig(mode="cascaded_sc", asr_sub_prob=0.2)
        assert output_to_dict(run_cascaded(m, e, pc)) == output_to_dict(run_cascaded(m, e, pc))


class TestParallel:
    def test_four_entries_for_three_segments(self, toy_meeting):
        out = run_parallel(toy_meeting, toy_windows(toy_meeting), PipelineConfig(), OracleModel(toy_meeting))
        assert [(e.segment_id, e.speaker_label) for e in out.transcript] == [(1, 1), (2, 1), (2, 2), (3, 2)]
        assert out.hyp_turns is None  # segment 2 carries two labels
        s = score_meeting(toy_meeting, out)
        assert s["cpwer"].value == 0.0 and s["der_h"].value == 0.0
        assert math.isnan(s["der"].value)

    def test_entry_count_is_sum_of_sot_counts(self):
        cfg = SynthConfig(seed=4)
        for m in gen_corpus(cfg, 3):
            pc = PipelineConfig(sot_count_error_prob=0.3, seed=1)
            out = run_parallel(m, gen_embeddings(m, cfg), pc, OracleModel(m))
            counts = [sot_simulate(m, s.id, 0.3, 1).speaker_count for s in m.vad_segments]
            assert len(out.transcript.entries) == sum(counts)

    def test_single_speaker_segments(self):
        m = meeting([(0.0, 2.0), (3.0, 5.0)], [turn("A", 0.0, 2.0, "x", "y"), turn("B", 3.0, 5.0, "z")])
        seq = windows_seq(m, {1: [(0, 2)], 2: [(3, 5)]})
        out = run_parallel(m, seq, PipelineConfig(), OracleModel(m))
        assert [e.words for e in out.transcript] == [("x", "y"), ("z",)]
        assert out.hyp_turns == [("1", m.segment(1).interval), ("2", m.segment(2).interval)]

    def test_clamped_count_flagged(self, toy_meeting):
        class Small(OracleModel):
            cfg = SdncConfig(max_clusters=2)

        # with this seed segment 2's SOT count is pushed from 2 to 3
        assert sot_simulate(toy_meeting, 2, 1.0, 1).speaker_count == 3
        pc = PipelineConfig(sot_count_error_prob=1.0, seed=1)
        out = run_parallel(toy_meeting, toy_windows(toy_meeting), pc, Small(toy_meeting))
        assert [e.speaker_label for e in out.transcript if e.segment_id == 2] == [1, 2, 2]
        assert any("clamped" in f for f in out.flags)

    def test_requires_model(self, toy_meeting):
        with pytest.raises(ValueError):
            run_system(toy_meeting, toy_windows(toy_meeting), PipelineConfig(mode="parallel_sdnc"))


class TestParallelSc:
    def test_hand_trace(self, toy_meeting, monkeypatch):
        patch_sc(monkeypatch, [1, 1, 2, 1, 1, 2, 2, 2, 2])
        out = run_parallel_sc(toy_meeting, toy_windows(toy_meeting), PipelineConfig(mode="parallel_sc"))
        assert [(e.segment_id, e.speaker_label) for e in out.transcript] == [(1, 1), (2, 1), (2, 2), (3, 2)]
        assert out.flags == []
        assert score_meeting(toy_meeting, out)["cpwer"].value == 0.0

    def test_padding_with_frequent_label(self, toy_meeting, monkeypatch):
        patch_sc(monkeypatch, [1, 1, 1, 1, 1, 1, 1, 2, 2])
        out = run_parallel_sc(toy_meeting, toy_windows(toy_meeting), PipelineConfig(mode="parallel_sc"))
        assert [e.speaker_label for e in out.transcript if e.segment_id == 2] == [1, 2]
        assert len(out.flags) == 1 and "segment 2" in out.flags[0]

    def test_padding_with_fresh_label(self, toy_meeting, monkeypatch):
        patch_sc(monkeypatch, [1] * 9)
        out = run_parallel_sc(toy_meeting, toy_windows(toy_meeting), PipelineConfig(mode="parallel_sc"))
        assert [e.speaker_label for e in out.transcript if e.segment_id == 2] == [1, 2]
        assert out.flags

    def test_count_one_is_majority_vote(self, monkeypatch):
        m = meeting([(0.0, 3.0), (4.0, 6.0)], [turn("A", 0.0, 3.0, "a"), turn("B", 4.0, 6.0, "b")])
        seq = windows_seq(m, {1: [(0, 1), (1, 2), (2, 3)], 2: [(4, 5), (5, 6)]})
        patch_sc(monkeypatch, [2, 1, 1, 2, 1])
        out = run_parallel_sc(m, seq, PipelineConfig(mode="parallel_sc"))
        assert out.first_labels == {1: 1, 2: 2}


class TestReference:
    def test_scores_zero(self):
        cfg = SynthConfig(seed=5)
        for m in gen_corpus(cfg, 3):
            s = score_meeting(m, reference_output(m))
            assert all(s[k].value == 0.0 for k in METRICS), s

    def test_round_trip(self, toy_meeting):
        out = reference_output(toy_meeting)
        back = output_from_dict(output_to_dict(out))
        assert back.transcript == out.transcript and back.hyp_turns == out.hyp_turns
        assert back.first_labels == out.first_labels


class TestRatio:
    def test_sentinels(self):
        assert math.isnan(Ratio(0, 0).value)
        assert math.isinf(Ratio(3, 0).value)
        assert Ratio(1, 4).value == 0.25


def exact_signed_rank_p(d):
    """Two-sided p from the full 2^n sign-flip distribution of the positive-rank sum."""
    d = np.asarray([x for x in d if x != 0], dtype=float)
    ranks = np.argsort(np.argsort(np.abs(d))) + 1.0
    observed = ranks[d > 0].sum()
    sums = [sum(r for r, s in zip(ranks, signs) if s) for signs in itertools.product([0, 1], repeat=len(d))]
    lo = np.mean([s <= observed for s in sums])
    hi = np.mean([s >= observed for s in sums])
    return min(1.0, 2 * min(lo, hi))


def report(system, values, ih="h"):
    return SystemReport(system, ih, {f"m{k}": {metric: Ratio(v, 1.0) for metric in METRICS} for k, v in enumerate(values)})


class TestCompare:
    def test_identical_reports(self):
        r = report("a", [0.1, 0.2, 0.3])
        cmp = compare(r, r)
        assert all(row.delta == 0.0 and row.p_value == 1.0 for row in cmp.rows)

    @pytest.mark.parametrize(
        "a,b",
        [
            ([0.30, 0.25, 0.40, 0.10, 0.50], [0.20, 0.27, 0.11, 0.06, 0.05]),
            ([0.1, 0.2, 0.3, 0.4, 0.5], [0.2, 0.4, 0.6, 0.8, 1.0]),
            ([0.5, 0.1, 0.3, 0.2, 0.9], [0.45, 0.3, 0.0, 0.31, 0.2]),
        ],
    )
    def test_p_value_matches_enumeration(self, a, b):
        cmp = compare(report("a", a), report("b", b))
        expected = exact_signed_rank_p(np.array(a) - np.array(b))
        assert cmp.row("cpwer").p_value == pytest.approx(expected, abs=1e-12)
        assert wilcoxon_p(a, b) == pytest.approx(expected, abs=1e-12)

    def test_mismatched_meetings(self):
        with pytest.raises(ValueError):
            compare(report("a", [0.1, 0.2]), report("b", [0.1]))

    def test_mismatched_inputs(self):
        with pytest.raises(ValueError):
            compare(report("a", [0.1], "x"), report("b", [0.1], "y"))

    def test_csv_rows(self, tmp_path):
        cmp = compare(report("a", [0.1, 0.2, 0.4]), report("b", [0.2, 0.2, 0.1]))
        write_comparison_csv(cmp, tmp_path / "c.csv", tmp_path / "p.csv")
        summary = list(csv.DictReader(open(tmp_path / "c.csv")))
        per = list(csv.DictReader(open(tmp_path / "p.csv")))
        assert [r["metric"] for r in summary] == list(METRICS)
        assert list(summary[0]) == ["metric", "system_a", "system_b", "delta", "p_value"]
        assert len(per) == 3 * len(METRICS)

    def test_undefined_propagates(self, tmp_path):
        a = report("a", [0.1, 0.2])
        a.per_meeting["m0"]["der"] = Ratio(0, 0)
        cmp = compare(a, report("b", [0.1, 0.2]))
        assert math.isnan(cmp.row("der").system_a)
        write_comparison_csv(cmp, tmp_path / "c.csv")
        assert "undefined" in (tmp_path / "c.csv").read_text()


class TestCorpus:
    def test_zero_noise_both_pipelines(self):
        cfg = SynthConfig(seed=6, embed_noise_sigma=0.0, overlap_prob=0.0)
        ms = gen_corpus(cfg, 3)
        embs = [gen_embeddings(m, cfg) for m in ms]
        rep, _ = run_corpus(ms, embs, PipelineConfig(mode="cascaded_sc"))
        assert rep.pooled("cpwer") == 0.0 and rep.pooled("der") == 0.0
        for m, e in zip(ms, embs):
            out = run_parallel(m, e, PipelineConfig(), OracleModel(m))
            s = score_meeting(m, out)
            assert s["cpwer"].value == 0.0 and s["der"].value == 0.0

    def test_report_round_trip(self):
        cfg = SynthConfig(seed=7)
        ms = gen_corpus(cfg, 2)
        rep, _ = run_corpus(ms, [gen_embeddings(m, cfg) for m in ms], PipelineConfig(mode="parallel_sc"))
        back = SystemReport.from_dict(rep.to_dict())
        assert back.per_meeting == rep.per_meeting and back.input_hash == rep.input_hash
