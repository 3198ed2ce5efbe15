"""``sdnc`` command line: synth | train | decode | score | compare | selftest.

Every subcommand writes into ``<out>/<command>-<config hash>/`` and leaves a
``manifest.json`` there. Outputs other than the manifest depend only on the
resolved config and seed.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import platform
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from .baseline import ScConfig
from .config import ConfigError, apply_overrides, config_hash, from_mapping, load_mapping
from .core import (
    EmbeddingSequence,
    Meeting,
    load_embeddings,
    load_meeting,
    save_embeddings,
    save_meeting,
    write_rttm,
)
from .metrics import DerConfig, ScoreRow, write_report
from .model import SdncConfig, SdncModel, TrainConfig, make_example, train
from .pipeline import (
    METRICS,
    PIPELINE_SC,
    PipelineConfig,
    SystemReport,
    compare,
    input_hash,
    output_from_dict,
    output_to_dict,
    run_system,
    score_meeting,
    write_comparison_csv,
)
from .segmentation import WindowingConfig
from .selftest import run_all
from .synth import SynthConfig, gen_embeddings, gen_meeting

log = logging.getLogger("sdnc")

EXIT_CONFIG, EXIT_MISSING, EXIT_SELFTEST = 1, 2, 3


class MissingInputError(FileNotFoundError):
    pass


@dataclass(frozen=True)
class CorpusConfig:
    num_train: int = 200
    num_test: int = 40

    def __post_init__(self) -> None:
        if self.num_train < 0 or self.num_test < 0:
            raise ValueError("corpus sizes must be non-negative")


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    synth: SynthConfig = SynthConfig()
    corpus: CorpusConfig = CorpusConfig()
    windowing: WindowingConfig = WindowingConfig()
    model: SdncConfig = SdncConfig()
    train: TrainConfig = TrainConfig()
    pipeline: PipelineConfig = PipelineConfig()
    der: DerConfig = DerConfig()


def build_config(data: dict[str, Any], seed: int | None = None) -> ExperimentConfig:
    """Resolve a config mapping; ``seed`` (if given) overrides the file and drives every stage."""
    data = dict(data)
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    s = int(data.get("seed", 0) if seed is None else seed)
    windowing = from_mapping(WindowingConfig, data.get("windowing"))
    pipe = dict(data.get("pipeline") or {})
    sc = from_mapping(ScConfig, {**asdict(PIPELINE_SC), "seed": s, **(pipe.pop("sc", None) or {})})
    pipeline = from_mapping(PipelineConfig, {**pipe, "windowing": windowing, "sc": sc, "seed": s})
    return ExperimentConfig(
        seed=s,
        synth=from_mapping(SynthConfig, {**(data.get("synth") or {}), "seed": s}),
        corpus=from_mapping(CorpusConfig, data.get("corpus")),
        windowing=windowing,
        model=from_mapping(SdncConfig, data.get("model")),
        train=from_mapping(TrainConfig, data.get("train")),
        pipeline=pipeline,
        der=from_mapping(DerConfig, data.get("der")),
    )


def default_config_path() -> Path:
    return Path(str(resources.files("sdnc").joinpath("default.toml")))


@dataclass
class RunManifest:
    command: str
    config_hash: str
    seed: int
    versions: dict[str, str]
    outputs: list[str] = field(default_factory=list)
    inputs: dict[str, str] = field(default_factory=dict)
    wall_clock_s: float = 0.0

    def write(self, run_dir: Path) -> None:
        (run_dir / "manifest.json").write_text(json.dumps(dataclasses.asdict(self), indent=1) + "\n")


def _versions() -> dict[str, str]:
    import rapidfuzz
    import scipy
    import sklearn

    from . import __version__

    return {
        "sdnc": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "scikit-learn": sklearn.__version__,
        "rapidfuzz": rapidfuzz.__version__,
    }


def _map(fn: Callable, items: Sequence, jobs: int) -> list:
    """Apply ``fn`` over meetings, in worker processes when ``jobs > 1``; order is preserved."""
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# data directory layout


def _split_dir(data: Path, split: str) -> Path:
    d = data / split
    if not d.is_dir():
        raise MissingInputError(f"no {split!r} split under {data}")
    return d


def _meeting_ids(split_dir: Path) -> list[str]:
    ids = sorted(p.name.removesuffix(".meeting.json") for p in split_dir.glob("*.meeting.json"))
    if not ids:
        raise MissingInputError(f"no meetings in {split_dir}")
    return ids


def load_split(data: Path, split: str, unit: str = "vad") -> tuple[list[Meeting], list[EmbeddingSequence]]:
    d = _split_dir(data, split)
    meetings, embs = [], []
    for mid in _meeting_ids(d):
        meetings.append(load_meeting(d / f"{mid}.meeting.json"))
        path = d / f"{mid}.{unit}.jsonl"
        if not path.exists():
            raise MissingInputError(f"missing embeddings {path}")
        embs.append(load_embeddings(path))
    return meetings, embs


def _synth_one(args: tuple[SynthConfig, WindowingConfig, int, str]) -> tuple[Meeting, EmbeddingSequence, EmbeddingSequence]:
    cfg, wcfg, index, _ = args
    m = gen_meeting(cfg, index)
    return m, gen_embeddings(m, cfg, wcfg, "vad"), gen_embeddings(m, cfg, wcfg, "first_speaker")


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(cfg: ExperimentConfig, run: Path, ns: argparse.Namespace, manifest: RunManifest) -> None:
    n_train, n_test = cfg.corpus.num_train, cfg.corpus.num_test
    jobs = [(cfg.synth, cfg.windowing, k, "train" if k < n_train else "test") for k in range(n_train + n_test)]
    results = _map(_synth_one, jobs, ns.jobs)
    for (_, _, _, split), (m, vad, fs) in zip(jobs, results):
        d = run / split
        d.mkdir(exist_ok=True)
        save_meeting(m, d / f"{m.meeting_id}.meeting.json")
        save_embeddings(vad, d / f"{m.meeting_id}.vad.jsonl")
        save_embeddings(fs, d / f"{m.meeting_id}.first_speaker.jsonl")
        manifest.outputs.append(f"{split}/{m.meeting_id}.*")
    print(f"wrote {n_train} train and {n_test} test meetings to {run}")


def cmd_train(cfg: ExperimentConfig, run: Path, ns: argparse.Namespace, manifest: RunManifest) -> None:
    data = _require_dir(ns.data, "--data")
    manifest.inputs["data"] = str(data)
    model = SdncModel(cfg.model, seed=cfg.seed, dtype=np.dtype(cfg.train.dtype))
    rows = []
    for stage, unit in (("pretrain_first_speaker", "first_speaker"), ("finetune_vad", "vad")):
        meetings, embs = load_split(data, "train", unit)
        examples = [make_example(m, stage, wcfg=cfg.windowing, seq=e) for m, e in zip(meetings, embs)]
        result = train(model, examples, stage, cfg.train, seed=cfg.seed, checkpoint_dir=run / "checkpoints")
        rows += [(stage, k + 1, loss) for k, loss in enumerate(result.loss_curve)]
    model.save(run / "model.ckpt", {"config_hash": manifest.config_hash})
    with open(run / "loss.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stage", "epoch", "loss"])
        w.writerows(rows)
    manifest.outputs += ["model.ckpt", "loss.csv", "checkpoints/"]
    print(f"model written to {run / 'model.ckpt'}")


_DECODE_MODEL: SdncModel | None = None


def _decode_init(checkpoint: str | None) -> None:
    global _DECODE_MODEL
    _DECODE_MODEL = SdncModel.load(checkpoint) if checkpoint else None


def _decode_one(args: tuple[Meeting, EmbeddingSequence, PipelineConfig]) -> dict:
    m, e, pcfg = args
    if _DECODE_MODEL is None and pcfg.mode == "parallel_sdnc":
        _decode_init(pcfg.checkpoint)
    return output_to_dict(run_system(m, e, pcfg, _DECODE_MODEL))


def cmd_decode(cfg: ExperimentConfig, run: Path, ns: argparse.Namespace, manifest: RunManifest) -> None:
    data = _require_dir(ns.data, "--data")
    pcfg = cfg.pipeline
    if ns.checkpoint:
        pcfg = dataclasses.replace(pcfg, checkpoint=ns.checkpoint)
    if pcfg.mode == "parallel_sdnc":
        if not pcfg.checkpoint or not Path(pcfg.checkpoint).exists():
            raise MissingInputError(f"checkpoint not found: {pcfg.checkpoint!r}")
        manifest.inputs["checkpoint"] = str(pcfg.checkpoint)
    manifest.inputs["data"] = str(data)
    meetings, embs = load_split(data, ns.split)
    global _DECODE_MODEL
    _DECODE_MODEL = None
    outs = _map(_decode_one, [(m, e, pcfg) for m, e in zip(meetings, embs)], ns.jobs)
    for m, out in zip(meetings, outs):
        (run / f"{m.meeting_id}.hyp.json").write_text(json.dumps({"meeting_id": m.meeting_id, "mode": pcfg.mode, **out}, indent=1) + "\n")
        manifest.outputs.append(f"{m.meeting_id}.hyp.json")
        if out["hyp_turns"] is not None:
            sys_out = output_from_dict(out)
            write_rttm(sys_out.hyp_turns, run / f"{m.meeting_id}.hyp.rttm", file_id=m.meeting_id)
    (run / "decode_info.json").write_text(
        json.dumps({"mode": pcfg.mode, "split": ns.split, "input_hash": input_hash(meetings, embs)}, indent=1) + "\n"
    )
    print(f"decoded {len(meetings)} meetings with {pcfg.mode} into {run}")


def cmd_score(cfg: ExperimentConfig, run: Path, ns: argparse.Namespace, manifest: RunManifest) -> None:
    data = _require_dir(ns.data, "--data")
    hyp = _require_dir(ns.hyp, "--hyp")
    info_path = hyp / "decode_info.json"
    if not info_path.exists():
        raise MissingInputError(f"{hyp} has no decode_info.json")
    info = json.loads(info_path.read_text())
    meetings, embs = load_split(data, info.get("split", ns.split))
    per, flags, rows = {}, {}, []
    for m in meetings:
        path = hyp / f"{m.meeting_id}.hyp.json"
        if not path.exists():
            raise MissingInputError(f"missing hypothesis {path}")
        out = output_from_dict(json.loads(path.read_text()))
        per[m.meeting_id] = score_meeting(m, out, cfg.der)
        if out.flags:
            flags[m.meeting_id] = out.flags
        rows += [ScoreRow(m.meeting_id, k, r.value, manifest.config_hash) for k, r in per[m.meeting_id].items()]
    report = SystemReport(info["mode"], input_hash(meetings, embs), per, flags)
    (run / "report.json").write_text(json.dumps(report.to_dict(), indent=1) + "\n")
    write_report(rows, run / "scores.json", run / "scores.csv")
    manifest.inputs.update(data=str(data), hyp=str(hyp))
    manifest.outputs += ["report.json", "scores.json", "scores.csv"]
    for metric in METRICS:
        print(f"{metric:8s} {report.pooled(metric):.4f}")


def cmd_compare(cfg: ExperimentConfig, run: Path, ns: argparse.Namespace, manifest: RunManifest) -> None:
    reports = []
    for arg, flag in ((ns.a, "--a"), (ns.b, "--b")):
        path = _require_dir(arg, flag) / "report.json"
        if not path.exists():
            raise MissingInputError(f"missing {path}")
        reports.append(SystemReport.from_dict(json.loads(path.read_text())))
    try:
        cmp = compare(*reports)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    write_comparison_csv(cmp, run / "comparison.csv", run / "per_meeting.csv")
    manifest.inputs.update(a=str(ns.a), b=str(ns.b))
    manifest.outputs += ["comparison.csv", "per_meeting.csv"]
    print(f"{'metric':8s} {reports[0].system:>14s} {reports[1].system:>14s} {'delta':>9s} {'p':>7s}")
    for r in cmp.rows:
        print(f"{r.metric:8s} {r.system_a:14.4f} {r.system_b:14.4f} {r.delta:9.4f} {r.p_value:7.3f}")


def _require_dir(value: str | None, flag: str) -> Path:
    if not value:
        raise MissingInputError(f"{flag} is required")
    p = Path(value)
    if not p.is_dir():
        raise MissingInputError(f"{flag} directory not found: {p}")
    return p


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "decode": cmd_decode,
    "score": cmd_score,
    "compare": cmd_compare,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML or JSON config (default: packaged default.toml)")
    common.add_argument("--seed", type=int, help="seed for every stage; overrides the config")
    common.add_argument("--out", help="output root (default: $SDNC_OUT or ./runs)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key (JSON value)")
    common.add_argument("--jobs", type=int, default=1, help="worker processes across meetings")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="sdnc", description="Speaker diarization with SDNC and baselines")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="generate a synthetic corpus")
    p = sub.add_parser("train", parents=[common], help="pretrain and fine-tune an SDNC model")
    p.add_argument("--data", help="directory written by `synth`")
    p = sub.add_parser("decode", parents=[common], help="run a system over a split")
    p.add_argument("--data", help="directory written by `synth`")
    p.add_argument("--split", default="test", choices=["train", "test"])
    p.add_argument("--checkpoint", help="SDNC checkpoint (parallel_sdnc mode)")
    p = sub.add_parser("score", parents=[common], help="score decoded hypotheses")
    p.add_argument("--data", help="directory written by `synth`")
    p.add_argument("--hyp", help="directory written by `decode`")
    p.add_argument("--split", default="test", choices=["train", "test"])
    p = sub.add_parser("compare", parents=[common], help="compare two score reports")
    p.add_argument("--a", help="directory written by `score` (system A)")
    p.add_argument("--b", help="directory written by `score` (system B)")
    sub.add_parser("selftest", parents=[common], help="run the built-in oracle checks")
    return parser


def _fail(code: int, exc: BaseException) -> int:
    print(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}), file=sys.stderr)
    return code


def main(argv: Sequence[str] | None = None) -> int:
    ns = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING, format="%(levelname)s %(message)s")

    if ns.command == "selftest":
        results = run_all()
        for r in results:
            print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: {r.detail}")
        failed = [r.name for r in results if not r.passed]
        if failed:
            return _fail(EXIT_SELFTEST, RuntimeError(f"selftest failed: {', '.join(failed)}"))
        return 0

    try:
        cfg_path = Path(ns.config) if ns.config else default_config_path()
        if not cfg_path.exists():
            raise MissingInputError(f"config not found: {cfg_path}")
        data = apply_overrides(load_mapping(cfg_path), ns.set)
        cfg = build_config(data, ns.seed)
        if ns.jobs < 1:
            raise ConfigError("--jobs must be at least 1")
    except MissingInputError as exc:
        return _fail(EXIT_MISSING, exc)
    except (ConfigError, ValueError, TypeError) as exc:
        return _fail(EXIT_CONFIG, exc)

    extra = {k: getattr(ns, k) for k in ("data", "hyp", "split", "checkpoint", "a", "b") if getattr(ns, k, None)}
    h = config_hash(cfg, ns.command, extra)
    out_root = Path(ns.out or os.environ.get("SDNC_OUT") or "runs")
    run = out_root / f"{ns.command}-{h}"
    run.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(ns.command, h, cfg.seed, _versions())
    (run / "config.json").write_text(json.dumps(dataclasses.asdict(cfg), indent=1, default=str) + "\n")
    t0 = time.perf_counter()
    try:
        COMMANDS[ns.command](cfg, run, ns, manifest)
    except (MissingInputError, FileNotFoundError) as exc:
        return _fail(EXIT_MISSING, exc)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, exc)
    manifest.wall_clock_s = round(time.perf_counter() - t0, 3)
    manifest.write(run)
    return 0


if __name__ == "__main__":
    sys.exit(main())
