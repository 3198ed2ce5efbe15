import json
from pathlib import Path

import pytest

from sdnc.cli import build_config, load_split, main
from sdnc.pipeline import output_to_dict, reference_output

SMALL = ["--set", "corpus.num_train=3", "--set", "corpus.num_test=2", "--set", "synth.num_segments=6"]
TINY_MODEL = [
    "--set", "model.dim_model=8", "--set", "model.num_heads=2", "--set", "model.enc_layers=1",
    "--set", "model.dec_layers=1", "--set", "model.ffn_dim=16", "--set", "train.epochs=1",
]


def only_dir(root: Path, prefix: str) -> Path:
    (d,) = [p for p in root.iterdir() if p.name.startswith(prefix)]
    return d


def tree_bytes(d: Path) -> dict[str, bytes]:
    return {str(p.relative_to(d)): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file() and p.name != "manifest.json"}


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory) -> Path:
    out = tmp_path_factory.mktemp("runs")
    assert main(["synth", "--seed", "7", "--out", str(out), *SMALL]) == 0
    return only_dir(out, "synth-")


class TestSynth:
    def test_layout(self, data_dir):
        train = sorted(p.name for p in (data_dir / "train").iterdir())
        assert len(train) == 9 and all(n.startswith("synth-7-") for n in train)
        assert len(list((data_dir / "test").glob("*.meeting.json"))) == 2
        manifest = json.loads((data_dir / "manifest.json").read_text())
        assert manifest["seed"] == 7 and manifest["command"] == "synth"
        assert data_dir.name == f"synth-{manifest['config_hash']}"

    def test_byte_identical_rerun(self, data_dir, tmp_path):
        assert main(["synth", "--seed", "7", "--out", str(tmp_path), *SMALL]) == 0
        again = only_dir(tmp_path, "synth-")
        assert again.name == data_dir.name
        assert tree_bytes(again) == tree_bytes(data_dir)

    def test_train_and_test_disjoint(self, data_dir):
        train = {p.name for p in (data_dir / "train").glob("*.meeting.json")}
        test = {p.name for p in (data_dir / "test").glob("*.meeting.json")}
        assert not train & test

    def test_out_from_environment(self, tmp_path, monkeypatch):
        monkeypatch.setenv("SDNC_OUT", str(tmp_path / "env"))
        assert main(["synth", "--set", "corpus.num_train=1", "--set", "corpus.num_test=0", "--set", "synth.num_segments=4"]) == 0
        assert only_dir(tmp_path / "env", "synth-").is_dir()


def write_reference_hyps(data_dir: Path, hyp: Path) -> None:
    from sdnc.pipeline import input_hash

    meetings, embs = load_split(data_dir, "test")
    hyp.mkdir()
    for m in meetings:
        (hyp / f"{m.meeting_id}.hyp.json").write_text(json.dumps(output_to_dict(reference_output(m))))
    info = {"mode": "reference", "split": "test", "input_hash": input_hash(meetings, embs)}
    (hyp / "decode_info.json").write_text(json.dumps(info))


class TestScore:
    def test_reference_scores_zero(self, data_dir, tmp_path, capsys):
        write_reference_hyps(data_dir, tmp_path / "hyp")
        assert main(["score", "--data", str(data_dir), "--hyp", str(tmp_path / "hyp"), "--out", str(tmp_path)]) == 0
        run = only_dir(tmp_path, "score-")
        report = json.loads((run / "report.json").read_text())
        for scores in report["per_meeting"].values():
            assert all(num == 0 for num, _ in scores.values())
        lines = capsys.readouterr().out.strip().splitlines()
        assert all(line.split()[1] == "0.0000" for line in lines)
        assert (run / "scores.csv").read_text().startswith("meeting,metric,value,config_hash")


class TestChain:
    def test_synth_train_decode_score_compare(self, data_dir, tmp_path):
        out = str(tmp_path)
        assert main(["train", "--data", str(data_dir), "--out", out, *TINY_MODEL]) == 0
        trained = only_dir(tmp_path, "train-")
        assert (trained / "model.ckpt").exists()
        assert (trained / "loss.csv").read_text().count("\n") == 3
        assert len(list((trained / "checkpoints").iterdir())) == 2

        ckpt = str(trained / "model.ckpt")
        base = ["--data", str(data_dir), "--out", out]
        assert main(["decode", *base, "--checkpoint", ckpt, *TINY_MODEL]) == 0
        assert main(["decode", *base, "--set", 'pipeline.mode="cascaded_sc"']) == 0
        dec = sorted(p for p in tmp_path.iterdir() if p.name.startswith("decode-"))
        assert len(dec) == 2
        modes = {json.loads((d / "decode_info.json").read_text())["mode"]: d for d in dec}
        assert set(modes) == {"parallel_sdnc", "cascaded_sc"}
        assert list(modes["cascaded_sc"].glob("*.hyp.rttm"))

        for mode in ("cascaded_sc", "parallel_sdnc"):
            assert main(["score", "--data", str(data_dir), "--hyp", str(modes[mode]), "--out", str(tmp_path / mode)]) == 0
        a, b = (only_dir(tmp_path / m, "score-") for m in ("cascaded_sc", "parallel_sdnc"))
        assert main(["compare", "--a", str(a), "--b", str(b), "--out", out]) == 0
        cmp_dir = only_dir(tmp_path, "compare-")
        assert (cmp_dir / "comparison.csv").read_text().startswith("metric,system_a,system_b,delta,p_value")
        assert (cmp_dir / "per_meeting.csv").read_text().count("\n") == 1 + 2 * 7


class TestExitCodes:
    def error(self, capsys) -> dict:
        return json.loads(capsys.readouterr().err.strip().splitlines()[-1])

    def test_bad_config_key(self, tmp_path, capsys):
        assert main(["synth", "--out", str(tmp_path), "--set", "synth.colour=1"]) == 1
        assert self.error(capsys)["exit_code"] == 1

    def test_bad_config_value(self, tmp_path, capsys):
        assert main(["synth", "--out", str(tmp_path), "--set", "synth.overlap_prob=2.0"]) == 1

    def test_unknown_section(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"optimiser": {}}))
        assert main(["synth", "--config", str(cfg), "--out", str(tmp_path)]) == 1

    def test_missing_config(self, tmp_path, capsys):
        assert main(["synth", "--config", str(tmp_path / "nope.toml"), "--out", str(tmp_path)]) == 2
        assert self.error(capsys)["error"] == "MissingInputError"

    def test_missing_data(self, tmp_path):
        assert main(["train", "--data", str(tmp_path / "absent"), "--out", str(tmp_path)]) == 2

    def test_missing_checkpoint(self, data_dir, tmp_path, capsys):
        assert main(["decode", "--data", str(data_dir), "--out", str(tmp_path)]) == 2
        assert "checkpoint" in self.error(capsys)["message"]

    def test_selftest_passes(self, capsys):
        assert main(["selftest"]) == 0
        assert all(line.startswith("PASS") for line in capsys.readouterr().out.strip().splitlines())

    def test_selftest_failure_exit_code(self, monkeypatch, capsys):
        from sdnc import cli
        from sdnc.selftest import CheckResult

        monkeypatch.setattr(cli, "run_all", lambda: [CheckResult("x", False, "broken")])
        assert main(["selftest"]) == 3
        assert self.error(capsys)["exit_code"] == 3


class TestBuildConfig:
    def test_seed_drives_stages(self):
        cfg = build_config({}, seed=11)
        assert cfg.synth.seed == cfg.pipeline.seed == cfg.pipeline.sc.seed == 11

    def test_pipeline_sc_defaults(self):
        from sdnc.pipeline import PIPELINE_SC

        assert build_config({}).pipeline.sc.row_keep_fraction == PIPELINE_SC.row_keep_fraction
