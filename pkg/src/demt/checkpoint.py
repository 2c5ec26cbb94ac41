"""Self-describing binary checkpoints.

Layout (little-endian): magic `DMTC`, u32 version, u32 config length + UTF-8
resolved config, u64 step, u32 record count, then records of
(u32 name length, name, u32 ndim, u32 extents..., f64 payload).
Record names are prefixed `param:`, `buffer:`, `velocity:` or `rng:`.
"""

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Tuple, Union

import numpy as np

from .config import CHECKPOINT_MAGIC, CHECKPOINT_VERSION
from .exceptions import CheckpointError, CheckpointVersionError
from .logger import logger

Array = np.ndarray

PARAM_PREFIX = "param:"
BUFFER_PREFIX = "buffer:"
VELOCITY_PREFIX = "velocity:"
RNG_RECORD = "rng:stream"

_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


@dataclass
class Checkpoint:
    """Everything needed to rebuild a model and continue its training run."""

    version: int
    config_text: str
    step: int
    parameters: Dict[str, Array]
    buffers: Dict[str, Array] = field(default_factory=dict)
    velocity: Dict[str, Array] = field(default_factory=dict)
    # [shuffle_seed, epoch, batch_index]
    rng: Array = field(default_factory=lambda: np.zeros(3))

    def records(self) -> Iterator[Tuple[str, Array]]:
        for prefix, group in (
            (PARAM_PREFIX, self.parameters),
            (BUFFER_PREFIX, self.buffers),
            (VELOCITY_PREFIX, self.velocity),
        ):
            for name in sorted(group):
                yield prefix + name, group[name]
        yield RNG_RECORD, np.asarray(self.rng, dtype=np.float64)


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    config = ckpt.config_text.encode("utf-8")
    records = list(ckpt.records())
    chunks: List[bytes] = [
        CHECKPOINT_MAGIC,
        _U32.pack(ckpt.version),
        _U32.pack(len(config)),
        config,
        _U64.pack(ckpt.step),
        _U32.pack(len(records)),
    ]
    for name, values in records:
        array = np.asarray(values, dtype="<f8")
        encoded = name.encode("utf-8")
        chunks.append(_U32.pack(len(encoded)))
        chunks.append(encoded)
        chunks.append(_U32.pack(array.ndim))
        chunks.extend(_U32.pack(extent) for extent in array.shape)
        chunks.append(np.ascontiguousarray(array).tobytes())
    return b"".join(chunks)


class _Reader:
    def __init__(self, data: bytes, source: str):
        self.data = data
        self.offset = 0
        self.source = source

    def take(self, size: int) -> bytes:
        end = self.offset + size
        if end > len(self.data):
            raise CheckpointError(f"{self.source}: truncated checkpoint")
        chunk = self.data[self.offset : end]
        self.offset = end
        return chunk

    def u32(self) -> int:
        return int(_U32.unpack(self.take(_U32.size))[0])

    def u64(self) -> int:
        return int(_U64.unpack(self.take(_U64.size))[0])


def decode_checkpoint(data: bytes, source: str = "<bytes>") -> Checkpoint:
    """Parse checkpoint bytes.

    Raises:
        CheckpointError: On a bad magic, malformed records or truncation
        CheckpointVersionError: If the format version is not the supported one
    """
    reader = _Reader(data, source)
    if reader.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint (bad magic)")
    version = reader.u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{source}: checkpoint format version {version}, "
            f"this build reads version {CHECKPOINT_VERSION}"
        )
    try:
        config_text = reader.take(reader.u32()).decode("utf-8")
    except UnicodeDecodeError as e:
        raise CheckpointError(f"{source}: config text is not UTF-8") from e
    step = reader.u64()
    ckpt = Checkpoint(version, config_text, step, parameters={})
    groups = {
        PARAM_PREFIX: ckpt.parameters,
        BUFFER_PREFIX: ckpt.buffers,
        VELOCITY_PREFIX: ckpt.velocity,
    }
    for _ in range(reader.u32()):
        try:
            name = reader.take(reader.u32()).decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointError(f"{source}: record name is not UTF-8") from e
        shape = tuple(reader.u32() for _ in range(reader.u32()))
        count = int(np.prod(shape)) if shape else 1
        values = np.frombuffer(reader.take(8 * count), dtype="<f8").reshape(shape)
        values = values.astype(np.float64)
        if name == RNG_RECORD:
            ckpt.rng = values
            continue
        for prefix, group in groups.items():
            if name.startswith(prefix):
                group[name[len(prefix) :]] = values
                break
        else:
            raise CheckpointError(f"{source}: unknown record {name!r}")
    if reader.offset != len(data):
        raise CheckpointError(f"{source}: {len(data) - reader.offset} trailing bytes")
    return ckpt


def save_checkpoint(path: Union[str, Path], ckpt: Checkpoint) -> Path:
    """Write a checkpoint file.

    Raises:
        CheckpointError: If the file cannot be written
    """
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(encode_checkpoint(ckpt))
    except OSError as e:
        logger.error(f"Error saving checkpoint: {e}")
        raise CheckpointError(f"Cannot save checkpoint {path}: {e}") from e
    logger.debug(f"Checkpoint step {ckpt.step} saved to {path}")
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    """Read a checkpoint file.

    Raises:
        CheckpointError: If the file is missing, unreadable or malformed
        CheckpointVersionError: If the format version is unsupported
    """
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}") from e
    ckpt = decode_checkpoint(data, str(path))
    logger.info(f"Loaded checkpoint {path} (step {ckpt.step})")
    return ckpt
