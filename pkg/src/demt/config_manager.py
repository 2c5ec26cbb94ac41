"""Configuration management for DeMT runs."""

from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

from .config import (
    CONFIG_SCHEMA,
    MODEL_MODES,
    RESOLVED_CONFIG_FILE,
    STAGE_STRIDES,
    TASK_KINDS,
    default_config,
    format_value,
)
from .exceptions import ConfigError, ValidationError
from .logger import logger
from .model import ModelConfig, TaskSpec, make_task_spec

ALLOWED_EXTENSIONS = (".conf", ".cfg", ".txt")


class ConfigManager:
    """Loads `key = value` run configuration, applies overrides and validates it."""

    def __init__(
        self,
        config_file: Optional[str] = None,
        overrides: Sequence[str] = (),
        text: Optional[str] = None,
    ):
        """Initialize configuration manager.

        Args:
            config_file: Path of a `key = value` file (defaults only if None)
            overrides: `key=value` strings applied after the file, in order
            text: Configuration text used instead of a file

        Raises:
            ConfigError: If the file cannot be read, a line is malformed, a key is
                unknown or a value is out of range
        """
        self.config_file = (
            self._validate_config_file_path(config_file) if config_file else None
        )
        self._config_data: Dict[str, Any] = default_config()

        if text is None and self.config_file is not None:
            text = self._read_config_file(self.config_file)
        if text is not None:
            source = str(self.config_file) if self.config_file else "<text>"
            for key, raw, line_no in self._parse_lines(text, source):
                self._assign(key, raw, f"{source}:{line_no}")
        for override in overrides:
            key, raw = self._split_pair(override, "--set")
            self._assign(key, raw, f"--set {override}")

        self._validate()
        logger.debug(
            f"Config resolved from {self.config_file or 'defaults'} "
            f"with {len(overrides)} override(s)"
        )

    def _validate_config_file_path(self, config_file: str) -> Path:
        """Validate the config file path.

        Raises:
            ConfigError: If the name is empty, has an unexpected extension or the
                file does not exist
        """
        if not config_file.strip():
            raise ConfigError("Config file name cannot be empty")
        path = Path(config_file)
        if path.suffix not in ALLOWED_EXTENSIONS:
            raise ConfigError(
                f"Config file '{config_file}' must end with one of "
                f"{', '.join(ALLOWED_EXTENSIONS)}"
            )
        if not path.is_file():
            raise ConfigError(f"Config file '{config_file}' does not exist")
        return path

    def _read_config_file(self, path: Path) -> str:
        try:
            return path.read_text(encoding="utf-8")
        except (OSError, UnicodeDecodeError) as e:
            logger.error(f"Cannot read config file: {e}")
            raise ConfigError(f"Cannot read config file {path}: {e}") from e

    @staticmethod
    def _split_pair(line: str, where: str) -> Tuple[str, str]:
        if "=" not in line:
            raise ConfigError(f"{where}: expected 'key = value', got {line!r}")
        key, raw = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"{where}: missing key in {line!r}")
        return key, raw.strip()

    def _parse_lines(self, text: str, source: str) -> List[Tuple[str, str, int]]:
        pairs = []
        for line_no, line in enumerate(text.splitlines(), start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            key, raw = self._split_pair(stripped, f"{source}:{line_no}")
            pairs.append((key, raw, line_no))
        return pairs

    def _assign(self, key: str, raw: str, where: str) -> None:
        if key not in CONFIG_SCHEMA:
            raise ConfigError(f"{where}: unknown configuration key '{key}'")
        parser, _ = CONFIG_SCHEMA[key]
        try:
            self._config_data[key] = parser(raw)
        except ValueError as e:
            raise ConfigError(f"{where}: invalid value {raw!r} for '{key}': {e}") from e

    def _validate(self) -> None:
        """Range checks across keys.

        Raises:
            ConfigError: On the first out-of-range value
        """
        data = self._config_data
        positive = (
            "data.count",
            "data.height",
            "data.width",
            "data.num_classes",
            "model.depth_d",
            "model.sampling_points",
            "model.heads",
            "train.batch_size",
            "train.ckpt_every",
            "train.log_every",
            "gradcheck.instances",
        )
        for key in positive:
            if data[key] < 1:
                raise ConfigError(f"'{key}' must be positive, got {data[key]}")
        for key in ("train.steps", "model.c_reduced", "seed"):
            if data[key] < 0:
                raise ConfigError(f"'{key}' must be >= 0, got {data[key]}")
        for key in ("train.lr", "gradcheck.eps", "gradcheck.model_eps"):
            if data[key] <= 0:
                raise ConfigError(f"'{key}' must be positive, got {data[key]}")
        if data["train.weight_decay"] < 0:
            raise ConfigError("'train.weight_decay' must be >= 0")
        if not 0 <= data["train.momentum"] < 1:
            raise ConfigError(
                f"'train.momentum' must be in [0, 1), got {data['train.momentum']}"
            )
        if not 0 < data["gradcheck.param_fraction"] <= 1:
            raise ConfigError("'gradcheck.param_fraction' must be in (0, 1]")
        if data["data.num_classes"] > 254:
            raise ConfigError("'data.num_classes' must leave 255 as the ignore label")
        if data["model.mode"] not in MODEL_MODES:
            raise ConfigError(
                f"'model.mode' must be one of {MODEL_MODES}, got {data['model.mode']!r}"
            )
        tasks = data["model.tasks"]
        if not tasks or len(set(tasks)) != len(tasks):
            raise ConfigError(f"'model.tasks' must be distinct and non-empty: {tasks}")
        for task in tasks:
            if task not in TASK_KINDS:
                raise ConfigError(
                    f"unknown task '{task}', expected one of {TASK_KINDS}"
                )
        for stride in data["model.scales"]:
            if stride not in STAGE_STRIDES:
                raise ConfigError(f"unknown scale {stride}, expected {STAGE_STRIDES}")
        for key in ("loss.alpha.semseg", "loss.alpha.depth", "loss.alpha.normal"):
            if data[key] <= 0:
                raise ConfigError(f"'{key}' must be positive, got {data[key]}")
        for key in ("norm.bn_eps", "norm.ln_eps"):
            if data[key] <= 0:
                raise ConfigError(f"'{key}' must be positive, got {data[key]}")
        if not 0 < data["norm.bn_momentum"] < 1:
            raise ConfigError("'norm.bn_momentum' must be in (0, 1)")

    def get_value(self, key: str, default: Any = None) -> Any:
        """Get a configuration value.

        Args:
            key: Dotted configuration key (e.g. "train.lr")
            default: Returned when the key is not part of the configuration

        Returns:
            Typed configuration value or default
        """
        return self._config_data.get(key, default)

    def set_value(self, key: str, value: Any) -> None:
        """Set a configuration value from its typed or text form.

        Raises:
            ConfigError: If the key is unknown or the value is invalid
        """
        raw = value if isinstance(value, str) else format_value(value)
        previous = dict(self._config_data)
        self._assign(key, raw, f"set_value({key})")
        try:
            self._validate()
        except ConfigError:
            self._config_data = previous
            raise

    def as_dict(self) -> Dict[str, Any]:
        return dict(self._config_data)

    def task_specs(self) -> List[TaskSpec]:
        data = self._config_data
        return [
            make_task_spec(kind, data["data.num_classes"], data[f"loss.alpha.{kind}"])
            for kind in data["model.tasks"]
        ]

    def model_config(self) -> ModelConfig:
        """Build the structural model configuration.

        Raises:
            ConfigError: If the combination of values is structurally invalid
        """
        data = self._config_data
        try:
            return ModelConfig(
                tasks=self.task_specs(),
                input_hw=(data["data.height"], data["data.width"]),
                trunk_widths=data["model.trunk_widths"],
                scales_used=data["model.scales"],
                c_reduced=data["model.c_reduced"],
                depth_d=data["model.depth_d"],
                sampling_points=data["model.sampling_points"],
                heads=data["model.heads"],
                mode=data["model.mode"],
                seed=data["seed"],
                bn_eps=data["norm.bn_eps"],
                bn_momentum=data["norm.bn_momentum"],
                ln_eps=data["norm.ln_eps"],
            )
        except ValidationError as e:
            raise ConfigError(f"invalid model configuration: {e}") from e

    def _section(self, prefix: str) -> Dict[str, Any]:
        return {
            key[len(prefix) + 1 :]: value
            for key, value in self._config_data.items()
            if key.startswith(f"{prefix}.")
        }

    def train_config(self) -> Dict[str, Any]:
        return self._section("train")

    def data_config(self) -> Dict[str, Any]:
        return self._section("data")

    def gradcheck_config(self) -> Dict[str, Any]:
        return self._section("gradcheck")

    def resolved_lines(self) -> List[str]:
        """Every effective value as `key = value`, sorted by key."""
        return [
            f"{key} = {format_value(self._config_data[key])}"
            for key in sorted(self._config_data)
        ]

    def write_resolved(self, out_dir: str) -> Path:
        """Write resolved_config.txt into out_dir.

        Raises:
            ConfigError: If the file cannot be written
        """
        path = Path(out_dir) / RESOLVED_CONFIG_FILE
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text("\n".join(self.resolved_lines()) + "\n", encoding="utf-8")
        except OSError as e:
            logger.error(f"Error saving resolved config: {e}")
            raise ConfigError(f"Cannot save resolved config: {e}") from e
        logger.debug(f"Resolved config saved to {path}")
        return path
