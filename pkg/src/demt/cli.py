"""Command-line interface: gen, train, eval, gradcheck and inspect."""

import argparse
import logging
from pathlib import Path
from typing import Dict, List, NoReturn, Optional, Sequence, Tuple

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint
from .config import (
    APP_NAME,
    EVAL_LOSSES_FILE,
    EXIT_IO,
    EXIT_OK,
    EXIT_USAGE,
    EXIT_VERIFICATION,
    GRADCHECK_FILE,
    METRICS_FILE,
    MODE_EVAL,
)
from .config_manager import ConfigManager
from .dataset import Sample, generate_dataset, load_dataset, make_batch
from .exceptions import (
    CheckpointError,
    ConfigError,
    DatasetError,
    GradCheckFailure,
    MetricError,
    UsageError,
    ValidationError,
)
from .gradcheck import ensure_passed, format_suite, run_suite
from .logger import logger, setup_logger
from .metrics import (
    MetricRecord,
    TASK_METRICS,
    delta_m,
    format_report,
    mean_angular_error,
    miou,
    parse_report,
    relative_gains,
    rmse_depth,
)
from .model import DemtModel
from .tensor import Tensor, no_grad
from .training import LossReport, Trainer, score_outputs

COMMANDS = ("gen", "train", "eval", "gradcheck", "inspect")


class ArgumentParser(argparse.ArgumentParser):
    """argparse parser that raises UsageError instead of exiting."""

    def error(self, message: str) -> NoReturn:
        raise UsageError(message)


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(
        prog="demt", description=f"{APP_NAME} multi-task dense prediction"
    )
    commands = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub = commands.add_parser(name)
        sub.add_argument("--config", help="key = value configuration file")
        sub.add_argument(
            "--set",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override one configuration key (repeatable)",
        )
        sub.add_argument("--out", help="output directory")
        sub.add_argument("--seed", type=int, help="overrides the `seed` key")
        sub.add_argument("--ckpt", help="checkpoint file")
        sub.add_argument("--single-task-ref", help="single-task metric report")
        sub.add_argument("--verbose", action="store_true", help="debug logging")
        sub.add_argument("--log-file", help="also log to this file")
    return parser


def load_config(
    args: argparse.Namespace, text: Optional[str] = None
) -> ConfigManager:
    overrides = list(args.set)
    if args.seed is not None:
        if args.seed < 0:
            raise UsageError(f"--seed must be non-negative, got {args.seed}")
        overrides.append(f"seed={args.seed}")
    if text is not None:
        return ConfigManager(text=text, overrides=overrides)
    return ConfigManager(args.config, overrides=overrides)


def _out_dir(args: argparse.Namespace, fallback: str = ".") -> Path:
    path = Path(args.out or fallback)
    path.mkdir(parents=True, exist_ok=True)
    return path


def cmd_gen(args: argparse.Namespace) -> int:
    """Render the configured synthetic dataset into --out (or data.dir)."""
    config = load_config(args)
    data = config.data_config()
    directory = Path(args.out or data["dir"])
    manifest = generate_dataset(
        directory,
        count=data["count"],
        height=data["height"],
        width=data["width"],
        num_classes=data["num_classes"],
        seed=config.get_value("seed"),
        split=data["split"],
    )
    print(
        f"dataset={directory} count={manifest.count} height={manifest.height} "
        f"width={manifest.width} num_classes={manifest.num_classes} "
        f"split={manifest.split} seed={manifest.seed}"
    )
    return EXIT_OK


def _load_samples(config: ConfigManager) -> List[Sample]:
    data = config.data_config()
    manifest, samples = load_dataset(data["dir"])
    if (manifest.height, manifest.width) != (data["height"], data["width"]):
        raise ConfigError(
            f"dataset is {manifest.height}x{manifest.width}, config expects "
            f"{data['height']}x{data['width']}"
        )
    if manifest.num_classes != data["num_classes"]:
        raise ConfigError(
            f"dataset has {manifest.num_classes} classes, config expects "
            f"{data['num_classes']}"
        )
    return samples


def cmd_train(args: argparse.Namespace) -> int:
    """Train from scratch, or resume from --ckpt, up to train.steps steps."""
    config = load_config(args)
    out = _out_dir(args)
    config.write_resolved(str(out))
    samples = _load_samples(config)
    model = DemtModel(config.model_config())
    trainer = Trainer(
        model,
        samples,
        str(out),
        config.train_config(),
        shuffle_seed=config.get_value("seed"),
        config_text="\n".join(config.resolved_lines()) + "\n",
    )
    if args.ckpt:
        trainer.resume(load_checkpoint(args.ckpt))
    steps = config.get_value("train.steps")
    logger.info(
        f"Training {config.get_value('model.mode')} for {steps} steps "
        f"on {len(samples)} samples"
    )
    trainer.run(steps)
    return EXIT_OK


def _restore_model(
    args: argparse.Namespace,
) -> Tuple[Checkpoint, ConfigManager, DemtModel]:
    ckpt = load_checkpoint(args.ckpt)
    config = load_config(args, text=ckpt.config_text)
    model = DemtModel(config.model_config())
    model.load_state(ckpt.parameters, ckpt.buffers)
    return ckpt, config, model


def evaluate(
    model: DemtModel, samples: Sequence[Sample], batch_size: int, num_classes: int
) -> Tuple[MetricRecord, LossReport]:
    """Eval-mode metrics and sample-weighted mean losses over a dataset."""
    tasks = model.config.tasks
    predictions: Dict[str, List[np.ndarray]] = {s.name: [] for s in tasks}
    loss_sums: Dict[str, float] = {s.name: 0.0 for s in tasks}
    total_sum = 0.0
    for start in range(0, len(samples), batch_size):
        stop = min(start + batch_size, len(samples))
        batch = make_batch(samples, range(start, stop))
        with no_grad():
            outputs = model.forward(Tensor(batch.images), MODE_EVAL)
            _, report = score_outputs(model, outputs, batch)
        for name, value in report.per_task.items():
            loss_sums[name] += value * batch.size
        total_sum += report.total * batch.size
        for name, out in outputs.items():
            predictions[name].append(out.numpy())

    count = len(samples)
    record = MetricRecord()
    stacked = {
        "semseg": np.stack([s.semseg for s in samples]),
        "depth": np.stack([s.depth for s in samples]),
        "normal": np.stack([s.normal for s in samples]),
    }
    for spec in tasks:
        pred = np.concatenate(predictions[spec.name])
        gt = stacked[spec.kind]
        if spec.kind == "semseg":
            value = miou(pred.argmax(axis=-1), gt, num_classes)
        elif spec.kind == "depth":
            value = rmse_depth(pred[..., 0], gt)
        else:
            value = mean_angular_error(pred, gt)
        record.add(spec.name, TASK_METRICS[spec.kind], value)
    losses = LossReport(
        {name: total / count for name, total in loss_sums.items()}, total_sum / count
    )
    return record, losses


def cmd_eval(args: argparse.Namespace) -> int:
    """Score a checkpoint on data.dir and write metrics.txt / eval_losses.txt."""
    if not args.ckpt:
        raise UsageError("eval needs --ckpt")
    ckpt, config, model = _restore_model(args)
    out = _out_dir(args)
    samples = _load_samples(config)
    record, losses = evaluate(
        model,
        samples,
        config.get_value("train.batch_size"),
        config.get_value("data.num_classes"),
    )
    lines = format_report(record)
    if args.single_task_ref:
        ref_path = Path(args.single_task_ref)
        if ref_path.is_file():
            reference = parse_report(ref_path.read_text(encoding="utf-8"))
            lines.append(f"delta_m={delta_m(record, reference):.2f}")
            for name, gain in relative_gains(record, reference).items():
                lines.append(f"gain.{name}={gain:.2f}")
        else:
            logger.warning(f"Reference report {ref_path} not found, delta_m omitted")
    (out / METRICS_FILE).write_text("\n".join(lines) + "\n", encoding="utf-8")
    (out / EVAL_LOSSES_FILE).write_text(
        losses.format_line(ckpt.step) + "\n", encoding="utf-8"
    )
    for line in lines:
        print(line)
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    """Run the finite-difference suite; exit 3 when any check fails."""
    config = load_config(args)
    settings = config.gradcheck_config()
    results = run_suite(
        seed=config.get_value("seed"),
        instances=settings["instances"],
        eps=settings["eps"],
        model_eps=settings["model_eps"],
        tolerance=settings["tolerance"],
        param_fraction=settings["param_fraction"],
    )
    lines = format_suite(results)
    if args.out:
        out = _out_dir(args)
        (out / GRADCHECK_FILE).write_text("\n".join(lines) + "\n", encoding="utf-8")
    for line in lines:
        print(line)
    ensure_passed(results)
    return EXIT_OK


def cmd_inspect(args: argparse.Namespace) -> int:
    """Describe a checkpoint (with --ckpt) or the configured model structure."""
    if args.ckpt:
        ckpt, config, model = _restore_model(args)
        print(f"checkpoint={args.ckpt} version={ckpt.version} step={ckpt.step}")
        seed, epoch, batch_index = (int(v) for v in ckpt.rng)
        print(f"rng seed={seed} epoch={epoch} batch_index={batch_index}")
        for name, values in ckpt.records():
            shape = "x".join(str(n) for n in np.shape(values)) or "scalar"
            print(f"record {name} shape={shape}")
    else:
        config = load_config(args)
        model = DemtModel(config.model_config())
    structure = model.config
    print(
        f"mode={structure.mode} tasks={','.join(structure.task_names)} "
        f"C={structure.aggregated_channels} C'={structure.reduced_channels} "
        f"N={structure.num_tokens} depth_d={structure.depth_d} "
        f"K={structure.sampling_points} heads={structure.heads}"
    )
    for group in model.group_names():
        print(f"group {group} parameters={model.parameter_count(group)}")
    print(f"total parameters={model.parameter_count()}")
    return EXIT_OK


HANDLERS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "inspect": cmd_inspect,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Parse arguments, run one command and map failures to exit codes."""
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        logger.error(f"Usage error: {e}")
        return EXIT_USAGE

    setup_logger(
        level=logging.DEBUG if args.verbose else logging.INFO, log_file=args.log_file
    )
    logger.info(f"Starting {APP_NAME} {args.command}")
    try:
        code = HANDLERS[args.command](args)
        logger.info(f"{args.command} finished")
        return code
    except (UsageError, ConfigError, ValidationError, MetricError) as e:
        logger.error(f"{args.command}: {e}")
        return EXIT_USAGE
    except (DatasetError, CheckpointError, OSError) as e:
        logger.error(f"{args.command}: {e}")
        return EXIT_IO
    except GradCheckFailure as e:
        logger.error(f"{args.command}: {e}")
        return EXIT_VERIFICATION
    except Exception as e:
        logger.error(f"Unexpected error in {args.command}: {e}", exc_info=True)
        return EXIT_USAGE
