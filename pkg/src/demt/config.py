"""Configuration constants and settings for the DeMT package."""

import os
from typing import Any, Callable, Dict, List, Tuple

from .exceptions import ConfigError

# Application constants
APP_NAME = "DeMT"
RESOLVED_CONFIG_FILE = "resolved_config.txt"

# Numerics
BN_EPS = 1e-5
BN_MOMENTUM = 0.1
LN_EPS = 1e-5
IGNORE_LABEL = 255

# Execution modes for normalisation layers
MODE_TRAIN = "train"
MODE_EVAL = "eval"
MODES = (MODE_TRAIN, MODE_EVAL)

# Structural model variants
MODEL_MODES = ("dm", "dm+ti", "dm+ti+tq", "baseline")
TASK_KINDS = ("semseg", "depth", "normal")
STAGE_STRIDES = (4, 8, 16, 32)

# On-disk formats
SAMPLE_MAGIC = b"DMT1"
SAMPLE_FILE_PATTERN = "sample_%06d.dmt"
MANIFEST_FILE = "manifest.txt"
CHECKPOINT_MAGIC = b"DMTC"
CHECKPOINT_VERSION = 1
CHECKPOINT_FILE = "checkpoint.dmtc"
CHECKPOINT_STEP_PATTERN = "ckpt_step_%06d.dmtc"

# Run artifacts
TRAIN_LOG_FILE = "train_log.txt"
METRICS_FILE = "metrics.txt"
EVAL_LOSSES_FILE = "eval_losses.txt"
GRADCHECK_FILE = "gradcheck.txt"

# Exit codes
EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_VERIFICATION = 3

THREADS_ENV_VAR = "DEMT_THREADS"


def _parse_int(value: str) -> int:
    return int(value.strip())


def _parse_float(value: str) -> float:
    return float(value.strip())


def _parse_str(value: str) -> str:
    return value.strip()


def _parse_int_list(value: str) -> Tuple[int, ...]:
    return tuple(int(part) for part in value.split(",") if part.strip())


def _parse_str_list(value: str) -> Tuple[str, ...]:
    return tuple(part.strip() for part in value.split(",") if part.strip())


def format_value(value: Any) -> str:
    """Render a typed config value back into its `key = value` text form."""
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


Parser = Callable[[str], Any]

# Closed set of configuration keys: key -> (parser, default)
CONFIG_SCHEMA: Dict[str, Tuple[Parser, Any]] = {
    "seed": (_parse_int, 0),
    "data.dir": (_parse_str, "data"),
    "data.count": (_parse_int, 8),
    "data.height": (_parse_int, 64),
    "data.width": (_parse_int, 64),
    "data.num_classes": (_parse_int, 5),
    "data.split": (_parse_str, "train"),
    "model.tasks": (_parse_str_list, ("semseg", "depth", "normal")),
    "model.mode": (_parse_str, "dm+ti+tq"),
    "model.trunk_widths": (_parse_int_list, (8, 16, 24, 32)),
    "model.scales": (_parse_int_list, (4, 8, 16, 32)),
    "model.c_reduced": (_parse_int, 0),
    "model.depth_d": (_parse_int, 1),
    "model.sampling_points": (_parse_int, 9),
    "model.heads": (_parse_int, 2),
    "norm.bn_eps": (_parse_float, BN_EPS),
    "norm.bn_momentum": (_parse_float, BN_MOMENTUM),
    "norm.ln_eps": (_parse_float, LN_EPS),
    "loss.alpha.semseg": (_parse_float, 1.0),
    "loss.alpha.depth": (_parse_float, 1.0),
    "loss.alpha.normal": (_parse_float, 10.0),
    "train.steps": (_parse_int, 200),
    "train.batch_size": (_parse_int, 4),
    "train.lr": (_parse_float, 1e-3),
    "train.weight_decay": (_parse_float, 5e-4),
    "train.momentum": (_parse_float, 0.9),
    "train.ckpt_every": (_parse_int, 50),
    "train.log_every": (_parse_int, 10),
    "gradcheck.instances": (_parse_int, 20),
    "gradcheck.eps": (_parse_float, 1e-5),
    "gradcheck.model_eps": (_parse_float, 1e-4),
    "gradcheck.tolerance": (_parse_float, 1e-4),
    "gradcheck.param_fraction": (_parse_float, 0.01),
}


def default_config() -> Dict[str, Any]:
    """Get a fresh copy of every key with its default value."""
    return {key: default for key, (_, default) in CONFIG_SCHEMA.items()}


def worker_threads() -> int:
    """Get the worker-thread cap from the environment (defaults to CPU count)."""
    raw = os.environ.get(THREADS_ENV_VAR)
    if raw is None or not raw.strip():
        return max(1, os.cpu_count() or 1)
    try:
        threads = int(raw)
    except ValueError as e:
        raise ConfigError(f"{THREADS_ENV_VAR} must be an integer, got {raw!r}") from e
    if threads < 1:
        raise ConfigError(f"{THREADS_ENV_VAR} must be positive, got {threads}")
    return threads


def known_keys() -> List[str]:
    """Get all configuration keys in sorted order."""
    return sorted(CONFIG_SCHEMA)
