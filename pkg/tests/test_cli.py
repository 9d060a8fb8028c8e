import json

import pytest

from avclues.cli import build_parser, main

TINY = [
    "--set", "model.dim=8",
    "--set", "model.frames=6",
    "--set", "model.n_blocks=1",
    "--set", "model.dropout=0.0",
    "--set", "model.question_max_len=6",
    "--set", "train.epochs=1",
    "--set", "train.batch_size=16",
]


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli-data")
    code = main(["gen-synth", "--out", str(out), "--samples", "60", "--frames", "6", "--dim", "8", "--classes", "3"])
    assert code == 0
    return out


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory, data_dir):
    out = tmp_path_factory.mktemp("cli-run")
    assert main(["train", "--data", str(data_dir), "--out", str(out), *TINY, "--seed", "2"]) == 0
    return out


class TestParser:
    def test_requires_command(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args([])

    def test_repeatable_overrides(self):
        args = build_parser().parse_args(["train", "--data", "d", "--out", "o", "--set", "a.b=1", "--set", "c.d=2"])

        assert args.set == ["a.b=1", "c.d=2"]


class TestCommands:
    def test_gen_synth_writes_manifest(self, data_dir):
        assert (data_dir / "manifest.json").exists()
        assert (data_dir / "truth.json").exists()

    def test_train_writes_run(self, run_dir):
        trace = json.loads((run_dir / "trace.json").read_text())

        assert trace["mode"] == "default"
        assert (run_dir / "best.ckpt").exists()

    def test_eval(self, data_dir, run_dir, tmp_path):
        out = tmp_path / "report.json"

        assert main(["eval", "--data", str(data_dir), "--checkpoint", str(run_dir / "last.ckpt"), "--out", str(out)]) == 0
        assert json.loads(out.read_text())["split"] == "test"

    def test_eval_unknown_split_is_an_error(self, data_dir, run_dir):
        assert main(["eval", "--data", str(data_dir), "--checkpoint", str(run_dir / "last.ckpt"), "--split", "dev"]) == 2

    def test_clue_recovery(self, data_dir, run_dir, tmp_path):
        out = tmp_path / "recovery.json"

        assert main(["clue-recovery", "--data", str(data_dir), "--checkpoint", str(run_dir / "last.ckpt"), "--out", str(out)]) == 0
        assert set(json.loads(out.read_text())["all_samples"]) == {"visual", "audio"}

    def test_plot(self, run_dir, tmp_path):
        assert main(["plot", "--traces", str(run_dir / "trace.json"), "--out", str(tmp_path)]) == 0
        assert (tmp_path / "default.png").exists()

    def test_unknown_grid_is_an_error(self, data_dir, tmp_path):
        assert main(["ablate", "--data", str(data_dir), "--out", str(tmp_path / "ab"), "--grid", "nope"]) == 2
        assert not (tmp_path / "ab").exists()

    def test_gradcheck(self, tmp_path):
        out = tmp_path / "gradcheck.json"

        assert main(["gradcheck", "--out", str(out)]) == 0
        assert json.loads(out.read_text())["passed"] is True

    def test_missing_data(self, tmp_path):
        assert main(["train", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "run")]) == 2

    def test_non_numeric_override_is_an_error(self, data_dir, tmp_path):
        out = tmp_path / "run"
        code = main(["train", "--data", str(data_dir), "--out", str(out), *TINY, "--set", "train.lr=fast"])

        assert code == 2
