"""Tests for cli module."""

import math
import shutil
import tempfile
from pathlib import Path

from src.demt import cli, nn
from src.demt.cli import build_parser, main
from src.demt.config import (
    CHECKPOINT_FILE,
    EVAL_LOSSES_FILE,
    EXIT_IO,
    EXIT_OK,
    EXIT_USAGE,
    EXIT_VERIFICATION,
    GRADCHECK_FILE,
    METRICS_FILE,
    MODE_EVAL,
    RESOLVED_CONFIG_FILE,
    TRAIN_LOG_FILE,
)
from src.demt.config_manager import ConfigManager
from src.demt.dataset import generate_scene
from src.demt.metrics import MetricRecord, format_report
from src.demt.model import DemtModel
from src.demt.training import LossReport


class TestCli:
    """Test cases for the command-line surface."""

    def setup_method(self):
        """Set up test fixtures."""
        self.temp_dir = Path(tempfile.mkdtemp())
        self.data_dir = self.temp_dir / "data"
        self.sets = [
            f"data.dir={self.data_dir}",
            "data.count=4",
            "data.height=32",
            "data.width=32",
            "data.num_classes=3",
            "model.trunk_widths=4,4,4,4",
            "train.steps=2",
            "train.batch_size=2",
            "train.ckpt_every=1",
        ]

    def teardown_method(self):
        """Clean up test fixtures."""
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def _args(self, command, *extra, sets=None):
        argv = [command]
        for item in self.sets + list(sets or []):
            argv += ["--set", item]
        return argv + list(extra)

    def _gen(self):
        assert main(self._args("gen")) == EXIT_OK

    def _train(self, name="run", *extra):
        out = self.temp_dir / name
        assert main(self._args("train", "--out", str(out), *extra)) == EXIT_OK
        return out

    def test_parser_commands(self):
        """Test that every command accepts the shared options."""
        args = build_parser().parse_args(
            ["eval", "--ckpt", "c.dmtc", "--set", "a=1", "--set", "b=2", "--seed", "4"]
        )
        assert args.command == "eval"
        assert args.set == ["a=1", "b=2"]
        assert args.seed == 4

    def test_usage_errors(self):
        """Test exit code 1 for bad arguments."""
        assert main([]) == EXIT_USAGE
        assert main(["fly"]) == EXIT_USAGE
        assert main(["gen", "--bogus"]) == EXIT_USAGE
        assert main(["gen", "--seed", "x"]) == EXIT_USAGE
        assert main(self._args("gen", "--seed", "-1")) == EXIT_USAGE
        assert main(["eval"]) == EXIT_USAGE

    def test_config_errors(self):
        """Test exit code 1 for unknown keys and bad config files."""
        assert main(["inspect", "--set", "model.colour=red"]) == EXIT_USAGE
        missing = str(self.temp_dir / "x.conf")
        assert main(["inspect", "--config", missing]) == EXIT_USAGE

    def test_gen(self, capsys):
        """Test that gen writes the dataset and prints a summary."""
        self._gen()
        assert (self.data_dir / "manifest.txt").is_file()
        assert len(list(self.data_dir.glob("sample_*.dmt"))) == 4
        assert "count=4 height=32 width=32 num_classes=3" in capsys.readouterr().out

    def test_gen_out_overrides_data_dir(self):
        """Test that --out picks the dataset directory."""
        other = self.temp_dir / "elsewhere"
        assert main(self._args("gen", "--out", str(other))) == EXIT_OK
        assert (other / "manifest.txt").is_file()
        assert not self.data_dir.exists()

    def test_train_missing_dataset(self):
        """Test exit code 2 when the dataset is absent."""
        out = self.temp_dir / "run"
        assert main(self._args("train", "--out", str(out))) == EXIT_IO

    def test_train_dataset_mismatch(self):
        """Test exit code 1 when the dataset does not match the config."""
        self._gen()
        out = self.temp_dir / "run"
        argv = self._args("train", "--out", str(out), sets=["data.num_classes=4"])
        assert main(argv) == EXIT_USAGE

    def test_train_outputs(self):
        """Test resolved config, log and checkpoints of a training run."""
        self._gen()
        out = self._train()
        assert (out / RESOLVED_CONFIG_FILE).is_file()
        assert len((out / TRAIN_LOG_FILE).read_text().splitlines()) == 2
        assert (out / "ckpt_step_000001.dmtc").is_file()
        assert (out / CHECKPOINT_FILE).is_file()

    def test_runs_reproducible(self):
        """Test that identical seeds give bitwise-identical logs and checkpoints."""
        self._gen()
        first = self._train("first", "--seed", "3")
        second = self._train("second", "--seed", "3")
        for name in (TRAIN_LOG_FILE, CHECKPOINT_FILE, "ckpt_step_000001.dmtc"):
            assert (first / name).read_bytes() == (second / name).read_bytes()

    def test_resume(self):
        """Test that resuming from step 1 ends on the uninterrupted checkpoint."""
        self._gen()
        straight = self._train("straight")
        ckpt = str(straight / "ckpt_step_000001.dmtc")
        resumed = self._train("resumed", "--ckpt", ckpt)
        assert (resumed / CHECKPOINT_FILE).read_bytes() == (
            straight / CHECKPOINT_FILE
        ).read_bytes()

    def test_eval(self, capsys):
        """Test metric and loss reports of a checkpoint."""
        self._gen()
        out = self._train()
        ckpt = str(out / CHECKPOINT_FILE)
        assert main(["eval", "--ckpt", ckpt, "--out", str(out)]) == EXIT_OK
        lines = (out / METRICS_FILE).read_text().splitlines()
        assert [line.split(" value=")[0] for line in lines] == [
            "task=semseg metric=miou",
            "task=depth metric=rmse",
            "task=normal metric=merr",
        ]
        losses = (out / EVAL_LOSSES_FILE).read_text()
        assert losses.startswith("step=2 total=")
        assert "task=semseg" in capsys.readouterr().out

    def test_eval_with_reference(self):
        """Test delta_m and gains against a reference report."""
        self._gen()
        out = self._train()
        reference = self.temp_dir / "single.txt"
        reference.write_text(
            "task=semseg metric=miou value=0.5\n"
            "task=depth metric=rmse value=2.0\n"
            "task=normal metric=merr value=40.0\n"
        )
        argv = ["eval", "--ckpt", str(out / CHECKPOINT_FILE), "--out", str(out)]
        assert main(argv + ["--single-task-ref", str(reference)]) == EXIT_OK
        lines = (out / METRICS_FILE).read_text().splitlines()
        assert lines[3].startswith("delta_m=")
        assert [line.split("=")[0] for line in lines[4:]] == [
            "gain.semseg",
            "gain.depth",
            "gain.normal",
        ]

    def test_eval_missing_reference(self):
        """Test that a missing reference only drops delta_m."""
        self._gen()
        out = self._train()
        argv = ["eval", "--ckpt", str(out / CHECKPOINT_FILE), "--out", str(out)]
        missing = str(self.temp_dir / "none.txt")
        assert main(argv + ["--single-task-ref", missing]) == EXIT_OK
        text = (out / METRICS_FILE).read_text()
        assert "delta_m" not in text

    def test_eval_delta_m_from_report_rows(self, monkeypatch):
        """Test delta_m through eval with the multi-task baseline and single rows."""
        self._gen()
        out = self._train()
        rows = [("semseg", "miou"), ("depth", "rmse"), ("normal", "merr")]
        rows.append(("bound", "odsf"))
        multi, single = MetricRecord(), MetricRecord()
        for (task, metric), m, s in zip(
            rows, (36.35, 0.6284, 21.02, 76.36), (38.02, 0.6104, 20.94, 76.22)
        ):
            multi.add(task, metric, m)
            single.add(task, metric, s)
        losses = LossReport({"semseg": 1.0, "depth": 1.0, "normal": 1.0}, 3.0)
        monkeypatch.setattr(cli, "evaluate", lambda *args: (multi, losses))
        reference = self.temp_dir / "single.txt"
        reference.write_text("\n".join(format_report(single)) + "\n")
        argv = ["eval", "--ckpt", str(out / CHECKPOINT_FILE), "--out", str(out)]
        assert main(argv + ["--single-task-ref", str(reference)]) == EXIT_OK
        lines = (out / METRICS_FILE).read_text().splitlines()
        delta = [float(line.split("=")[1]) for line in lines if "delta_m=" in line]
        assert len(delta) == 1 and abs(delta[0] - (-1.89)) < 0.01
        assert "gain.depth=-2.95" in lines

    def test_evaluate_forwards_each_batch_once(self, monkeypatch):
        """Test that metrics and losses share one eval-mode forward per batch."""
        config = ConfigManager(overrides=self.sets)
        model = DemtModel(config.model_config())
        samples = [generate_scene((11, i), 32, 32, 3) for i in range(4)]
        calls = []
        forward = DemtModel.forward

        def counting(model_self, image, mode, attention_sink=None):
            calls.append(mode)
            return forward(model_self, image, mode, attention_sink)

        monkeypatch.setattr(DemtModel, "forward", counting)
        record, losses = cli.evaluate(model, samples, 2, 3)
        assert calls == [MODE_EVAL, MODE_EVAL]
        assert [entry.task for entry in record.entries] == [
            "semseg",
            "depth",
            "normal",
        ]
        assert math.isfinite(losses.total)

    def test_eval_missing_checkpoint(self):
        """Test exit code 2 for an unreadable checkpoint."""
        ckpt = str(self.temp_dir / "absent.dmtc")
        assert main(["eval", "--ckpt", ckpt]) == EXIT_IO

    def test_inspect_config(self, capsys):
        """Test structure and parameter counts from a config alone."""
        argv = ["inspect", "--set", "data.height=32", "--set", "data.width=32"]
        argv += ["--set", "model.trunk_widths=4,4,4,4", "--set", "model.mode=dm+ti"]
        assert main(argv) == EXIT_OK
        out = capsys.readouterr().out.splitlines()
        structure = next(line for line in out if line.startswith("mode="))
        expected = "mode=dm+ti tasks=semseg,depth,normal C=16 C'=4 N=64"
        assert structure.startswith(expected)
        assert structure.endswith("K=9 heads=2")
        assert any(line.startswith("group trunk parameters=") for line in out)
        assert any(line.startswith("group encoder.depth parameters=") for line in out)
        assert any(line.startswith("total parameters=") for line in out)

    def test_inspect_checkpoint(self, capsys):
        """Test checkpoint description."""
        self._gen()
        out = self._train()
        assert main(["inspect", "--ckpt", str(out / CHECKPOINT_FILE)]) == EXIT_OK
        printed = capsys.readouterr().out
        assert "version=1 step=2" in printed
        assert "rng seed=0" in printed
        assert "record param:trunk." in printed

    def test_gradcheck(self, capsys):
        """Test the gradient suite report."""
        out = self.temp_dir / "gc"
        argv = self._args(
            "gradcheck",
            "--out",
            str(out),
            sets=["gradcheck.instances=1", "gradcheck.param_fraction=0.002"],
        )
        assert main(argv) == EXIT_OK
        lines = (out / GRADCHECK_FILE).read_text().splitlines()
        assert lines[0].startswith("op=add instances=1 ")
        assert lines[-2].startswith("op=model ")
        assert lines[-1] == "result=PASS"

    def test_gradcheck_failure(self, monkeypatch):
        """Test exit code 3 when a backward rule is wrong."""
        original = nn._bilinear_sample_backward

        def scaled(ctx, g):
            gx, gc = original(ctx, g)
            return 2.0 * gx, gc

        monkeypatch.setattr(nn, "_bilinear_sample_backward", scaled)
        argv = self._args(
            "gradcheck",
            sets=["gradcheck.instances=1", "gradcheck.param_fraction=0.002"],
        )
        assert main(argv) == EXIT_VERIFICATION

    def test_log_file(self):
        """Test that --log-file receives the run's log records."""
        log_file = self.temp_dir / "logs" / "demt.log"
        argv = ["inspect", "--set", "model.mode=dm", "--log-file", str(log_file)]
        assert main(argv + ["--verbose"]) == EXIT_OK
        assert "Starting DeMT inspect" in log_file.read_text()
