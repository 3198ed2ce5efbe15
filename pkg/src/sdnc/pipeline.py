"""Cascaded (SC -> ASR) and parallel (SOT || SDNC) speaker-attributed transcription."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Mapping, Sequence

import numpy as np
from scipy import stats

from .baseline import ScConfig, majority_vote, spectral_cluster, split_by_labels
from .core import (
    EmbeddingSequence,
    LabelSequence,
    Meeting,
    SpeakerAttributedTranscript,
    TimeInterval,
    TranscriptEntry,
    Turn,
    meeting_rttm_turns,
    meeting_to_dict,
)
from .metrics import (
    UNDEFINED,
    DerConfig,
    cpwer,
    cpwer_p,
    der,
    filter_h,
    hyp_turns_from_dicts,
    multi_speaker_segment_ids,
    reference_words_by_speaker,
    segment_wer,
    transcript_from_dict,
    transcript_to_dict,
)
from .model import DecodePlan, SdncModel
from .segmentation import WindowingConfig, homogeneous_ids
from .synth import SotOutput, asr_simulate, sot_simulate

Mode = Literal["cascaded_sc", "parallel_sdnc", "parallel_sc"]
METRICS = ("der", "der_h", "wer", "wer_h", "cpwer", "cpwer_h", "cpwer_p")


# Shipped clustering setup. Pruning to 5% of each row keeps speakers with
# few windows from being joined to their nearest neighbour. The eigengap
# search stops at 5 speakers, the label budget of the default SDNC model, so
# both systems share one bound on meeting size; it also keeps the clique of a
# speaker with very few windows from posing as extra clusters.
PIPELINE_SC = ScConfig(row_keep_fraction=0.05, max_speakers=6)


@dataclass(frozen=True)
class PipelineConfig:
    mode: Mode = "parallel_sdnc"
    sot_count_error_prob: float = 0.0
    asr_sub_prob: float = 0.0
    asr_del_prob: float = 0.0
    windowing: WindowingConfig = WindowingConfig()
    sc: ScConfig = PIPELINE_SC
    checkpoint: str | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("sot_count_error_prob", "asr_sub_prob", "asr_del_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.mode not in ("cascaded_sc", "parallel_sdnc", "parallel_sc"):
            raise ValueError(f"unknown mode {self.mode!r}")


@dataclass
class SystemOutput:
    """What one system produced for one meeting."""

    transcript: SpeakerAttributedTranscript
    hyp_turns: list[Turn] | None  # None when segment-internal timing is unknown
    first_labels: dict[int, int]  # first label of each segment, for DER-H
    labels: LabelSequence | None = None
    flags: list[str] = field(default_factory=list)


def _segment_windows(meeting: Meeting, seq: EmbeddingSequence) -> dict[int, np.ndarray]:
    out = {}
    for seg in meeting.vad_segments:
        idx = np.flatnonzero(seq.segment_ids == seg.id)
        if len(idx) == 0:
            raise ValueError(f"no embeddings for segment {seg.id} of {meeting.meeting_id}")
        out[seg.id] = idx
    return out


def run_cascaded(meeting: Meeting, embeddings: EmbeddingSequence, cfg: PipelineConfig) -> SystemOutput:
    """SC labels per window, segments split at label changes, each piece decoded by the ASR."""
    windows = _segment_windows(meeting, embeddings)
    labels = spectral_cluster(embeddings, cfg.sc)
    entries, turns, first = [], [], {}
    for seg in meeting.vad_segments:
        idx = windows[seg.id]
        wins = [TimeInterval(float(a), float(b)) for a, b in embeddings.intervals[idx]]
        for iv, lab in split_by_labels(seg, wins, labels[idx]):
            words = asr_simulate(meeting, iv, cfg.asr_sub_prob, cfg.asr_del_prob, cfg.seed)
            entries.append(TranscriptEntry(seg.id, lab, tuple(words)))
            turns.append((str(lab), iv))
            first.setdefault(seg.id, lab)
    return SystemOutput(SpeakerAttributedTranscript(tuple(entries)), turns, first)


def _sot_outputs(meeting: Meeting, cfg: PipelineConfig) -> list[SotOutput]:
    return [
        sot_simulate(meeting, seg.id, cfg.sot_count_error_prob, cfg.seed, cfg.asr_sub_prob, cfg.asr_del_prob)
        for seg in meeting.vad_segments
    ]


def _pair(segment_id: int, groups: list[list[str]], labels: Sequence[int]) -> list[TranscriptEntry]:
    """g-th SOT group gets the g-th label; surplus groups fold into the last label."""
    out = []
    for g, words in enumerate(groups):
        lab = labels[min(g, len(labels) - 1)]
        out.append(TranscriptEntry(segment_id, int(lab), tuple(words)))
    return out


def _parallel_turns(meeting: Meeting, per_segment: Mapping[int, Sequence[int]]) -> list[Turn] | None:
    if any(len(set(l)) > 1 for l in per_segment.values()):
        return None
    return [(str(l[0]), meeting.segment(s).interval) for s, l in per_segment.items()]


def run_parallel(meeting: Meeting, embeddings: EmbeddingSequence, cfg: PipelineConfig, model: SdncModel) -> SystemOutput:
    """SOT counts drive the SDNC output length; groups and labels are paired in order."""
    _segment_windows(meeting, embeddings)
    sots = _sot_outputs(meeting, cfg)
    k_max = model.cfg.max_clusters
    flags = []
    counts = []
    for sot in sots:
        if sot.speaker_count > k_max:
            flags.append(f"segment {sot.segment_id}: SOT count {sot.speaker_count} clamped to {k_max}")
        counts.append(min(sot.speaker_count, k_max))
    plan = DecodePlan([s.id for s in meeting.vad_segments], counts)
    labels = model.predict(embeddings, plan)
    per_segment: dict[int, list[int]] = {}
    for lab, sid in zip(labels.labels, labels.slot_segment_ids):
        per_segment.setdefault(sid, []).append(lab)
    entries = []
    for sot in sots:
        entries.extend(_pair(sot.segment_id, sot.groups, per_segment[sot.segment_id]))
    first = {s: l[0] for s, l in per_segment.items()}
    return SystemOutput(
        SpeakerAttributedTranscript(tuple(entries)), _parallel_turns(meeting, per_segment), first, labels, flags
    )


def run_parallel_sc(meeting: Meeting, embeddings: EmbeddingSequence, cfg: PipelineConfig) -> SystemOutput:
    """SOT in parallel with SC: majority vote for one-speaker segments, SC labels in order otherwise.

    When SC offers fewer distinct labels in a segment than SOT's count, the
    list is padded with the globally most frequent labels not yet used there
    (a fresh label if none is left); surplus labels are dropped.
    """
    windows = _segment_windows(meeting, embeddings)
    wl = spectral_cluster(embeddings, cfg.sc)
    freq = Counter(int(x) for x in wl)
    by_freq = sorted(freq, key=lambda lab: (-freq[lab], lab))
    sots = _sot_outputs(meeting, cfg)
    flags = []
    per_segment: dict[int, list[int]] = {}
    for sot in sots:
        idx = windows[sot.segment_id]
        if sot.speaker_count == 1:
            per_segment[sot.segment_id] = [majority_vote(wl[idx], [0] * len(idx))[0]]
            continue
        labs = list(dict.fromkeys(int(x) for x in wl[idx]))
        if len(labs) < sot.speaker_count:
            flags.append(f"segment {sot.segment_id}: SC found {len(labs)} labels, SOT says {sot.speaker_count}")
            for lab in by_freq:
                if len(labs) == sot.speaker_count:
                    break
                if lab not in labs:
                    labs.append(lab)
            while len(labs) < sot.speaker_count:
                labs.append(max(max(labs), max(by_freq)) + 1)
        per_segment[sot.segment_id] = labs[: sot.speaker_count]
    entries = []
    for sot in sots:
        entries.extend(_pair(sot.segment_id, sot.groups, per_segment[sot.segment_id]))
    first = {s: l[0] for s, l in per_segment.items()}
    return SystemOutput(SpeakerAttributedTranscript(tuple(entries)), _parallel_turns(meeting, per_segment), first, None, flags)


def run_system(meeting: Meeting, embeddings: EmbeddingSequence, cfg: PipelineConfig, model: SdncModel | None = None) -> SystemOutput:
    if cfg.mode == "cascaded_sc":
        return run_cascaded(meeting, embeddings, cfg)
    if cfg.mode == "parallel_sc":
        return run_parallel_sc(meeting, embeddings, cfg)
    if model is None:
        raise ValueError("parallel_sdnc needs a trained SDNC model")
    return run_parallel(meeting, embeddings, cfg, model)


def reference_output(meeting: Meeting) -> SystemOutput:
    """The ground truth dressed as a system output (labels = first-appearance speaker order)."""
    order = {spk: k for k, spk in enumerate(dict.fromkeys(t.speaker_id for t in meeting.turns), start=1)}
    entries, first = [], {}
    for seg in meeting.vad_segments:
        by_spk: dict[str, list[str]] = {}
        for spk, w in meeting.words_in(seg.interval):
            by_spk.setdefault(spk, []).append(w.token)
        for spk in by_spk:  # first-word order, as a serialized transcript has it
            entries.append(TranscriptEntry(seg.id, order[spk], tuple(by_spk[spk])))
        starts = [(t.start, order[t.speaker_id]) for t in meeting.turns_in(seg.id)]
        first[seg.id] = min(starts)[1]
    turns = [(str(order[spk]), iv) for spk, iv in meeting_rttm_turns(meeting)]
    return SystemOutput(SpeakerAttributedTranscript(tuple(entries)), turns, first)


def output_to_dict(out: SystemOutput) -> dict:
    return {
        "transcript": transcript_to_dict(out.transcript),
        "hyp_turns": None
        if out.hyp_turns is None
        else [{"speaker": spk, "start": iv.start, "end": iv.end} for spk, iv in out.hyp_turns],
        "first_labels": {str(k): v for k, v in out.first_labels.items()},
        "labels": None if out.labels is None else list(out.labels.labels),
        "flags": list(out.flags),
    }


def output_from_dict(d: Mapping) -> SystemOutput:
    return SystemOutput(
        transcript_from_dict(d["transcript"]),
        None if d["hyp_turns"] is None else hyp_turns_from_dicts(d["hyp_turns"]),
        {int(k): int(v) for k, v in d["first_labels"].items()},
        None,
        list(d.get("flags", [])),
    )


# ---------------------------------------------------------------------------
# scoring


@dataclass(frozen=True)
class Ratio:
    num: float
    den: float

    @property
    def value(self) -> float:
        if self.den <= 0:
            return UNDEFINED if self.num == 0 else math.inf
        return self.num / self.den


def score_meeting(meeting: Meeting, out: SystemOutput, der_cfg: DerConfig = DerConfig()) -> dict[str, Ratio]:
    """All metrics for one meeting as (numerator, denominator) pairs."""
    ref_turns = meeting_rttm_turns(meeting)
    h_ids = homogeneous_ids(meeting)
    scores: dict[str, Ratio] = {}

    if out.hyp_turns is None:
        scores["der"] = Ratio(0.0, 0.0)
    else:
        d = der(ref_turns, out.hyp_turns, der_cfg)
        scores["der"] = Ratio(d.miss + d.false_alarm + d.confusion, d.total_ref)
    hyp_h = [(str(out.first_labels[s]), meeting.segment(s).interval) for s in h_ids if s in out.first_labels]
    d = der(filter_h(meeting, ref_turns), hyp_h, der_cfg)
    scores["der_h"] = Ratio(d.miss + d.false_alarm + d.confusion, d.total_ref)

    w = segment_wer(meeting, out.transcript)
    scores["wer"] = Ratio(w.errors, w.ref_len)
    w = segment_wer(meeting, out.transcript, h_ids)
    scores["wer_h"] = Ratio(w.errors, w.ref_len)

    ref_words = reference_words_by_speaker(meeting)
    c = cpwer(ref_words, out.transcript.by_label())
    scores["cpwer"] = Ratio(c.errors, c.ref_words)
    c = cpwer(reference_words_by_speaker(meeting, h_ids), out.transcript.restrict(h_ids).by_label())
    scores["cpwer_h"] = Ratio(c.errors, c.ref_words)
    cp = cpwer_p(ref_words, out.transcript, multi_speaker_segment_ids(out.transcript))
    scores["cpwer_p"] = Ratio(cp.errors, cp.ref_words)
    return scores


def input_hash(meetings: Sequence[Meeting], embeddings: Sequence[EmbeddingSequence]) -> str:
    """Fingerprint of the exact inputs a system consumed."""
    h = hashlib.sha256()
    for m, e in zip(meetings, embeddings):
        h.update(json.dumps(meeting_to_dict(m), sort_keys=True).encode())
        h.update(np.ascontiguousarray(e.vectors).tobytes())
        h.update(np.ascontiguousarray(e.intervals).tobytes())
    return h.hexdigest()[:16]


@dataclass
class SystemReport:
    system: str
    input_hash: str
    per_meeting: dict[str, dict[str, Ratio]]
    flags: dict[str, list[str]] = field(default_factory=dict)

    def value(self, meeting: str, metric: str) -> float:
        return self.per_meeting[meeting][metric].value

    def pooled(self, metric: str) -> float:
        """Corpus-level value: summed numerators over summed denominators."""
        ratios = [s[metric] for s in self.per_meeting.values()]
        if any(math.isnan(r.value) for r in ratios):
            return UNDEFINED
        return Ratio(sum(r.num for r in ratios), sum(r.den for r in ratios)).value

    def to_dict(self) -> dict:
        return {
            "system": self.system,
            "input_hash": self.input_hash,
            "per_meeting": {m: {k: [r.num, r.den] for k, r in s.items()} for m, s in self.per_meeting.items()},
            "flags": self.flags,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> SystemReport:
        return cls(
            d["system"],
            d["input_hash"],
            {m: {k: Ratio(*v) for k, v in s.items()} for m, s in d["per_meeting"].items()},
            {k: list(v) for k, v in d.get("flags", {}).items()},
        )


def run_corpus(
    meetings: Sequence[Meeting],
    embeddings: Sequence[EmbeddingSequence],
    cfg: PipelineConfig,
    model: SdncModel | None = None,
    der_cfg: DerConfig = DerConfig(),
) -> tuple[SystemReport, dict[str, SystemOutput]]:
    outputs, per, flags = {}, {}, {}
    for m, e in zip(meetings, embeddings):
        out = run_system(m, e, cfg, model)
        outputs[m.meeting_id] = out
        per[m.meeting_id] = score_meeting(m, out, der_cfg)
        if out.flags:
            flags[m.meeting_id] = out.flags
    return SystemReport(cfg.mode, input_hash(meetings, embeddings), per, flags), outputs


# ---------------------------------------------------------------------------
# comparison


@dataclass(frozen=True)
class ComparisonRow:
    metric: str
    system_a: float
    system_b: float
    delta: float
    p_value: float


@dataclass(frozen=True)
class Comparison:
    rows: tuple[ComparisonRow, ...]
    meetings: tuple[str, ...]
    per_meeting: dict[str, tuple[tuple[float, float], ...]]  # metric -> (a, b) per meeting

    def row(self, metric: str) -> ComparisonRow:
        return next(r for r in self.rows if r.metric == metric)


def wilcoxon_p(a: Sequence[float], b: Sequence[float]) -> float:
    """Two-sided Wilcoxon signed-rank p-value; 1.0 when every paired difference is zero."""
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    d = d[np.isfinite(d)]
    if len(d) == 0 or np.all(d == 0):
        return 1.0
    return float(stats.wilcoxon(d, zero_method="wilcox", alternative="two-sided").pvalue)


def _mean(values: Sequence[float]) -> float:
    v = np.asarray(values, dtype=float)
    return UNDEFINED if np.any(np.isnan(v)) or len(v) == 0 else float(v.mean())


def compare(report_a: SystemReport, report_b: SystemReport, metrics: Sequence[str] = METRICS) -> Comparison:
    """Mean of each per-meeting metric, b - a delta, and a paired Wilcoxon test over meetings."""
    if set(report_a.per_meeting) != set(report_b.per_meeting):
        raise ValueError("reports cover different meeting sets")
    if report_a.input_hash != report_b.input_hash:
        raise ValueError("reports were produced from different inputs")
    ids = tuple(sorted(report_a.per_meeting))
    rows, per = [], {}
    for metric in metrics:
        a = [report_a.value(m, metric) for m in ids]
        b = [report_b.value(m, metric) for m in ids]
        per[metric] = tuple(zip(a, b))
        ma, mb = _mean(a), _mean(b)
        rows.append(ComparisonRow(metric, ma, mb, mb - ma, wilcoxon_p(a, b)))
    return Comparison(tuple(rows), ids, per)


def _fmt(x: float) -> str:
    return "undefined" if math.isnan(x) else f"{x:.6g}"


def write_comparison_csv(cmp: Comparison, path: str | Path, per_meeting_path: str | Path | None = None) -> None:
    """Summary table (metric, system_a, system_b, delta, p_value); optionally one row per meeting and metric."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "system_a", "system_b", "delta", "p_value"])
        for r in cmp.rows:
            w.writerow([r.metric, _fmt(r.system_a), _fmt(r.system_b), _fmt(r.delta), _fmt(r.p_value)])
    if per_meeting_path is not None:
        with open(per_meeting_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["meeting", "metric", "system_a", "system_b", "delta"])
            for m_idx, m in enumerate(cmp.meetings):
                for metric, pairs in cmp.per_meeting.items():
                    a, b = pairs[m_idx]
                    w.writerow([m, metric, _fmt(a), _fmt(b), _fmt(b - a)])
