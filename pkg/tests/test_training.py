"""Tests for training module."""

import math
import shutil
import tempfile
from pathlib import Path

import numpy as np
import pytest

from src.demt.checkpoint import load_checkpoint
from src.demt.config import CHECKPOINT_FILE, MODE_EVAL, MODE_TRAIN, TRAIN_LOG_FILE
from src.demt.dataset import batch_iter, generate_scene, make_batch
from src.demt.exceptions import (
    MetricError,
    OptimizerError,
    ShapeError,
    ValidationError,
)
from src.demt.model import DemtModel, ModelConfig, make_task_spec
from src.demt.tensor import Tensor, backward, no_grad, parameter, reduce_sum
from src.demt.training import (
    SGD,
    LossReport,
    Trainer,
    compute_losses,
    sgd_step,
    task_loss,
    total_loss,
)

TRAIN_CONFIG = {
    "batch_size": 4,
    "ckpt_every": 2,
    "log_every": 1,
    "lr": 1e-3,
    "momentum": 0.9,
    "weight_decay": 5e-4,
}


def tiny_config() -> ModelConfig:
    kinds = ("semseg", "depth", "normal")
    tasks = [make_task_spec(kind, num_classes=3) for kind in kinds]
    return ModelConfig(
        tasks=tasks, input_hw=(32, 32), trunk_widths=(4, 4, 4, 4), heads=2, seed=3
    )


def tiny_samples(count: int = 6):
    return [generate_scene((11, i), 32, 32, 3) for i in range(count)]


class TestLossReport:
    """Test cases for loss log lines."""

    def test_format_line(self):
        """Test step, total and per-task values at ten decimals."""
        report = LossReport({"semseg": 0.5, "depth": 0.25}, 0.75)
        assert report.format_line(3) == (
            "step=3 total=0.7500000000 semseg=0.5000000000 depth=0.2500000000"
        )


class TestTaskLoss:
    """Test cases for per-task losses."""

    def test_semseg_confident_prediction(self):
        """Test that a strong correct logit gives near-zero cross entropy."""
        logits = np.zeros((1, 2, 2, 3))
        logits[..., 1] = 20.0
        target = np.ones((1, 2, 2))
        assert task_loss(Tensor(logits), target, "semseg").item() < 1e-3

    def test_semseg_uniform_logits(self):
        """Test that uniform logits give ln(C)."""
        loss = task_loss(Tensor(np.zeros((2, 2, 2, 5))), np.zeros((2, 2, 2)), "semseg")
        assert math.isclose(loss.item(), math.log(5))

    def test_semseg_ignore_label(self):
        """Test that ignored pixels do not contribute."""
        logits = np.zeros((1, 1, 2, 3))
        logits[0, 0, 0, 2] = 30.0
        logits[0, 0, 1, 0] = 30.0
        target = np.array([[[2, 255]]])
        assert task_loss(Tensor(logits), target, "semseg").item() < 1e-9

    def test_semseg_all_ignored(self):
        """Test an error when no pixel is valid."""
        with pytest.raises(MetricError):
            task_loss(Tensor(np.zeros((1, 2, 2, 3))), np.full((1, 2, 2), 255), "semseg")

    def test_depth_exact(self):
        """Test pred == target gives 0."""
        depth = np.random.default_rng(0).uniform(1, 5, size=(2, 3, 3))
        loss = task_loss(Tensor(depth[..., None]), depth, "depth")
        assert loss.item() == 0.0

    def test_depth_offset_and_invalid_pixels(self):
        """Test mean L1 over pixels with positive depth."""
        depth = np.array([[[2.0, 0.0], [3.0, 4.0]]])
        pred = depth + 0.5
        pred[0, 0, 1] = 100.0
        loss = task_loss(Tensor(pred[..., None]), depth, "depth")
        assert math.isclose(loss.item(), 0.5)

    def test_normal_same_direction(self):
        """Test that parallel normals of any length give 0."""
        n = np.random.default_rng(1).normal(size=(1, 2, 2, 3))
        loss = task_loss(Tensor(3.0 * n), n, "normal")
        assert abs(loss.item()) < 1e-9

    def test_normal_orthogonal(self):
        """Test that orthogonal normals give 1."""
        pred = np.tile([1.0, 0.0, 0.0], (1, 2, 2, 1))
        target = np.tile([0.0, 1.0, 0.0], (1, 2, 2, 1))
        loss = task_loss(Tensor(pred), target, "normal")
        assert abs(loss.item() - 1.0) < 1e-9

    def test_shape_mismatch(self):
        """Test ShapeError on differing spatial extents."""
        with pytest.raises(ShapeError):
            task_loss(Tensor(np.zeros((1, 2, 2, 1))), np.ones((1, 3, 2)), "depth")

    def test_unknown_kind(self):
        """Test task kind validation."""
        with pytest.raises(ValidationError):
            task_loss(Tensor(np.zeros((1, 2, 2, 1))), np.ones((1, 2, 2)), "edges")


class TestTotalLoss:
    """Test cases for the weighted objective."""

    def test_weighted_sum(self):
        """Test alphas (1, 1) with losses (0.5, 0.25) give 0.75."""
        per_task = {"a": Tensor(0.5), "b": Tensor(0.25)}
        assert total_loss(per_task, {"a": 1.0, "b": 1.0}).item() == 0.75

    def test_mismatched_weights(self):
        """Test an error when weights and tasks differ."""
        with pytest.raises(ValidationError):
            total_loss({"a": Tensor(0.5)}, {"b": 1.0})

    def test_doubling_alpha_doubles_gradient(self):
        """Test that a task's gradient scales with its weight."""
        grads = []
        for alpha in (1.0, 2.0):
            p = parameter(np.array([0.3, -0.7]))
            other = parameter(np.array([1.0]))
            per_task = {"a": reduce_sum(p * p), "b": reduce_sum(other * other)}
            backward(total_loss(per_task, {"a": alpha, "b": 1.0}))
            grads.append(p.grad)
        assert np.allclose(grads[1], 2.0 * grads[0], rtol=0, atol=1e-15)


class TestSgd:
    """Test cases for momentum SGD."""

    def test_zero_learning_rate(self):
        """Test that lr = 0 leaves parameters unchanged."""
        p = parameter(np.array([1.0, 2.0]))
        p.grad = np.ones(2)
        sgd_step([("p", p)], 0.0, 0.0, 0.9, {})
        assert np.array_equal(p.data, [1.0, 2.0])

    def test_single_step(self):
        """Test theta 1, gradient 1, lr 0.1 gives 0.9."""
        p = parameter(np.array([1.0]))
        backward(reduce_sum(p))
        sgd_step([("p", p)], 0.1, 0.0, 0.0, {})
        assert math.isclose(p.data[0], 0.9)
        assert p.grad is None

    def test_momentum_accumulates(self):
        """Test v = mu*v + g over two unit-gradient steps."""
        p = parameter(np.array([1.0]))
        velocity = {}
        for _ in range(2):
            p.grad = np.ones(1)
            sgd_step([("p", p)], 1.0, 0.0, 0.9, velocity)
        assert math.isclose(p.data[0], 1.0 - 1.0 - 1.9)

    def test_weight_decay(self):
        """Test that weight decay adds wd * theta to the step."""
        p = parameter(np.array([2.0]))
        p.grad = np.zeros(1)
        sgd_step([("p", p)], 1.0, 0.5, 0.0, {})
        assert math.isclose(p.data[0], 1.0)

    def test_quadratic_bowl(self):
        """Test convergence on sum(theta^2) with lr 0.1 and no momentum."""
        p = parameter(np.array([1.0, -2.0, 0.5]))
        optimizer = SGD([("p", p)], lr=0.1, momentum=0.0, weight_decay=0.0)
        for _ in range(200):
            backward(reduce_sum(p * p))
            optimizer.step()
        assert np.max(np.abs(p.data)) < 1e-6

    def test_missing_gradient(self):
        """Test OptimizerError naming the parameter."""
        p = parameter(np.array([1.0]))
        with pytest.raises(OptimizerError, match="weight"):
            sgd_step([("weight", p)], 0.1, 0.0, 0.0, {})

    def test_frozen_parameter_skipped(self):
        """Test that tensors not requiring gradients are left alone."""
        p = Tensor(np.array([1.0]))
        sgd_step([("p", p)], 0.1, 0.0, 0.0, {})
        assert p.data[0] == 1.0

    def test_invalid_settings(self):
        """Test optimizer settings validation."""
        with pytest.raises(ValidationError):
            SGD([], lr=0.1, momentum=1.0)
        with pytest.raises(ValidationError):
            SGD([], lr=-0.1)

    def test_state_round_trip(self):
        """Test velocity save and restore."""
        p = parameter(np.array([1.0]))
        optimizer = SGD([("p", p)], lr=0.1)
        p.grad = np.ones(1)
        optimizer.step()
        other = SGD([("p", p)], lr=0.1)
        other.load_state(optimizer.state())
        assert np.array_equal(other.velocity["p"], optimizer.velocity["p"])
        with pytest.raises(ValidationError):
            other.load_state({"q": np.ones(1)})


class TestTrainer:
    """Test cases for the training loop."""

    def setup_method(self):
        """Set up test fixtures."""
        self.temp_dir = tempfile.mkdtemp()
        self.samples = tiny_samples()

    def teardown_method(self):
        """Clean up test fixtures."""
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def _trainer(self, name: str) -> Trainer:
        return Trainer(
            DemtModel(tiny_config()),
            self.samples,
            str(Path(self.temp_dir) / name),
            TRAIN_CONFIG,
            shuffle_seed=5,
            config_text="seed = 5\n",
        )

    def test_log_and_checkpoints(self):
        """Test one log line per step and periodic plus final checkpoints."""
        trainer = self._trainer("run")
        reports = trainer.run(4)
        out = Path(self.temp_dir) / "run"
        lines = (out / TRAIN_LOG_FILE).read_text().splitlines()
        assert len(lines) == 4
        assert lines[0].startswith("step=1 total=")
        assert lines[-1] == reports[-1].format_line(4)
        for name in ("ckpt_step_000002.dmtc", "ckpt_step_000004.dmtc", CHECKPOINT_FILE):
            assert (out / name).is_file()
        ckpt = load_checkpoint(out / CHECKPOINT_FILE)
        assert ckpt.step == 4
        assert ckpt.config_text == "seed = 5\n"
        assert [int(v) for v in ckpt.rng] == [5, 1, 2]

    def test_resume_is_bitwise(self):
        """Test that resuming at step 2 replays steps 3 and 4 exactly."""
        straight = self._trainer("straight")
        straight.run(4)
        resumed = self._trainer("resumed")
        resumed.resume(
            load_checkpoint(Path(self.temp_dir) / "straight" / "ckpt_step_000002.dmtc")
        )
        resumed.run(4)

        expected = straight.model.parameter_state()
        actual = resumed.model.parameter_state()
        for name, values in expected.items():
            assert np.array_equal(actual[name], values), name
        for name, values in straight.model.buffer_state().items():
            assert np.array_equal(resumed.model.buffer_state()[name], values), name
        log = (Path(self.temp_dir) / "straight" / TRAIN_LOG_FILE).read_text()
        resumed_log = (Path(self.temp_dir) / "resumed" / TRAIN_LOG_FILE).read_text()
        assert resumed_log.splitlines() == log.splitlines()[2:]

    def test_recomputed_loss_matches_log(self):
        """Test that train-mode losses on the first batch reproduce the logged step."""
        trainer = self._trainer("recompute")
        batch = batch_iter(self.samples, TRAIN_CONFIG["batch_size"], 5, 0)[0]
        with no_grad():
            _, report = compute_losses(trainer.model, batch, MODE_TRAIN)
        trainer.run(1)
        line = (Path(self.temp_dir) / "recompute" / TRAIN_LOG_FILE).read_text()
        assert line.strip() == report.format_line(1)

    def test_frozen_group_unchanged(self):
        """Test that a frozen group keeps its values through training."""
        trainer = self._trainer("frozen")
        trainer.model.freeze("trunk")
        before = {
            name: t.numpy()
            for name, t in trainer.model.named_parameters()
            if name.startswith("trunk.")
        }
        trainer.run(2)
        after = trainer.model.parameter_state()
        for name, values in before.items():
            assert np.array_equal(after[name], values), name

    def test_requires_samples(self):
        """Test that an empty sample list is rejected."""
        with pytest.raises(ValidationError):
            Trainer(DemtModel(tiny_config()), [], self.temp_dir, TRAIN_CONFIG)

    @pytest.mark.slow
    def test_fixed_batch_loss_halves(self):
        """Test that 200 steps on one fixed batch halve the total loss."""
        samples = tiny_samples(4)
        model = DemtModel(tiny_config())
        config = dict(TRAIN_CONFIG, ckpt_every=1000, log_every=50)
        trainer = Trainer(model, samples, self.temp_dir, config, shuffle_seed=0)
        batch = make_batch(samples, range(4))
        with no_grad():
            _, initial = compute_losses(model, batch, MODE_TRAIN)
        reports = trainer.run(200)
        assert reports[-1].total <= 0.5 * initial.total


def _validation_total(model: DemtModel, samples, batch_size: int = 8) -> float:
    total = 0.0
    for start in range(0, len(samples), batch_size):
        batch = make_batch(samples, range(start, min(start + batch_size, len(samples))))
        with no_grad():
            _, report = compute_losses(model, batch, MODE_EVAL)
        total += report.total * batch.size
    return total / len(samples)


class TestComponentAblation:
    """Test cases for the decoder-component ordering on synthetic scenes."""

    MODES = ("dm", "dm+ti", "dm+ti+tq")

    def setup_method(self):
        """Set up test fixtures."""
        self.temp_dir = tempfile.mkdtemp()

    def teardown_method(self):
        """Clean up test fixtures."""
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def _final_losses(self, seed: int):
        train = [generate_scene((seed, i), 64, 64, 5) for i in range(64)]
        val = [generate_scene((seed, 1000 + i), 64, 64, 5) for i in range(16)]
        config = dict(TRAIN_CONFIG, batch_size=8, ckpt_every=1000, log_every=100)
        losses = {}
        for mode in self.MODES:
            model = DemtModel(
                ModelConfig(
                    tasks=[make_task_spec(k) for k in ("semseg", "depth", "normal")],
                    input_hw=(64, 64),
                    trunk_widths=(8, 8, 8, 8),
                    heads=2,
                    mode=mode,
                    seed=seed,
                )
            )
            out = Path(self.temp_dir) / f"{mode}-{seed}"
            Trainer(model, train, str(out), config, shuffle_seed=seed).run(500)
            losses[mode] = _validation_total(model, val)
        return losses

    @pytest.mark.slow
    def test_each_component_lowers_validation_loss(self):
        """Test dm+ti+tq <= dm+ti <= dm with 1% margins on at least 4 of 5 seeds."""
        held = 0
        for seed in range(5):
            losses = self._final_losses(seed)
            if (
                losses["dm+ti"] <= 0.99 * losses["dm"]
                and losses["dm+ti+tq"] <= 0.99 * losses["dm+ti"]
            ):
                held += 1
        assert held >= 4
