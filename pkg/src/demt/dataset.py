"""Procedural multi-task scenes and their on-disk dataset format.

Every sample is ray-cast from one scene (a ground plane, a back wall and a few
spheres and tilted rectangles), so its class map, ray depth and surface normals
always describe the same surfaces.
"""

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np

from .config import (
    IGNORE_LABEL,
    MANIFEST_FILE,
    SAMPLE_FILE_PATTERN,
    SAMPLE_MAGIC,
    worker_threads,
)
from .exceptions import (
    CorruptHeaderError,
    DatasetError,
    ManifestMismatchError,
    TruncatedFileError,
    ValidationError,
)
from .logger import logger

Seed = Union[int, Sequence[int]]

GROUND_Y = 1.0
WALL_Z = 6.0
AMBIENT = 0.2
NOISE_STD = 0.02
LIGHT_DIRECTION = np.array([-0.4, -1.0, -0.6]) / np.linalg.norm([-0.4, -1.0, -0.6])
# image, semseg, depth, normal
PLANE_CHANNELS = (3, 1, 1, 3)
HEADER = struct.Struct("<6I")


@dataclass(frozen=True)
class Sphere:
    center: Tuple[float, float, float]
    radius: float
    label: int


@dataclass(frozen=True)
class Rectangle:
    """Planar rectangle spanned by unit axes u and v around its center."""

    center: Tuple[float, float, float]
    axis_u: Tuple[float, float, float]
    axis_v: Tuple[float, float, float]
    half_u: float
    half_v: float
    label: int

    @property
    def normal(self) -> np.ndarray:
        n = np.cross(self.axis_u, self.axis_v)
        return n / np.linalg.norm(n)


Primitive = Union[Sphere, Rectangle]


@dataclass
class Sample:
    """One rendered scene: image in [0, 1] and three consistent targets."""

    image: np.ndarray  # float32 [H, W, 3]
    semseg: np.ndarray  # uint16 [H, W], IGNORE_LABEL on class boundaries
    depth: np.ndarray  # float32 [H, W], ray length, > 0
    normal: np.ndarray  # float32 [H, W, 3], unit length, facing the camera

    @property
    def hw(self) -> Tuple[int, int]:
        return self.semseg.shape[0], self.semseg.shape[1]


@dataclass
class DatasetManifest:
    count: int
    height: int
    width: int
    num_classes: int
    split: str = "train"
    seed: int = 0

    def to_text(self) -> str:
        return "".join(
            f"{key}={value}\n"
            for key, value in (
                ("count", self.count),
                ("height", self.height),
                ("width", self.width),
                ("num_classes", self.num_classes),
                ("split", self.split),
                ("seed", self.seed),
            )
        )

    @classmethod
    def from_text(cls, text: str, source: str = MANIFEST_FILE) -> "DatasetManifest":
        """Parse `key=value` lines.

        Raises:
            DatasetError: If a line is malformed or a field is missing
        """
        fields: Dict[str, str] = {}
        for line_no, line in enumerate(text.splitlines(), start=1):
            line = line.strip()
            if not line:
                continue
            if "=" not in line:
                raise DatasetError(f"{source}:{line_no}: expected key=value")
            key, value = line.split("=", 1)
            fields[key.strip()] = value.strip()
        try:
            return cls(
                count=int(fields["count"]),
                height=int(fields["height"]),
                width=int(fields["width"]),
                num_classes=int(fields["num_classes"]),
                split=fields.get("split", "train"),
                seed=int(fields.get("seed", "0")),
            )
        except (KeyError, ValueError) as e:
            raise DatasetError(f"{source}: invalid manifest: {e}") from e


@dataclass
class Batch:
    """Stacked samples converted to float64 / int64 for the model."""

    images: np.ndarray
    semseg: np.ndarray
    depth: np.ndarray
    normal: np.ndarray
    indices: Tuple[int, ...]

    @property
    def size(self) -> int:
        return len(self.indices)

    def target(self, kind: str) -> np.ndarray:
        if kind == "semseg":
            return self.semseg
        if kind == "depth":
            return self.depth
        if kind == "normal":
            return self.normal
        raise ValidationError(f"unknown task kind {kind!r}")


def _rotation(rx: float, ry: float) -> np.ndarray:
    cx, sx = np.cos(rx), np.sin(rx)
    cy, sy = np.cos(ry), np.sin(ry)
    rot_x = np.array([[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]])
    rot_y = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    return rot_y @ rot_x


def random_scene(rng: np.random.Generator, num_classes: int) -> List[Primitive]:
    """Two to five objects standing in front of the wall, labels 1..num_classes-1."""
    objects: List[Primitive] = []
    for _ in range(int(rng.integers(2, 6))):
        label = int(rng.integers(1, num_classes))
        depth = float(rng.uniform(2.5, 5.0))
        x = float(rng.uniform(-1.2, 1.2)) * depth / 3.0
        if rng.random() < 0.5:
            radius = float(rng.uniform(0.3, 0.8))
            objects.append(Sphere((x, GROUND_Y - radius, depth), radius, label))
        else:
            rot = _rotation(rng.uniform(-0.6, 0.6), rng.uniform(-0.8, 0.8))
            half_u = float(rng.uniform(0.3, 0.9))
            half_v = float(rng.uniform(0.3, 0.9))
            y = GROUND_Y - float(rng.uniform(0.5, 1.5))
            objects.append(
                Rectangle(
                    (x, y, depth),
                    tuple(rot[:, 0]),
                    tuple(rot[:, 1]),
                    half_u,
                    half_v,
                    label,
                )
            )
    return objects


def camera_rays(height: int, width: int) -> np.ndarray:
    """Unit ray directions [H, W, 3] of a pinhole camera at the origin looking +z.

    Image rows grow along +y (downwards), so the ground lies at y = GROUND_Y.
    """
    focal = float(width)
    rows = (np.arange(height) + 0.5 - height / 2.0) / focal
    cols = (np.arange(width) + 0.5 - width / 2.0) / focal
    yy, xx = np.meshgrid(rows, cols, indexing="ij")
    rays = np.stack([xx, yy, np.ones_like(xx)], axis=-1)
    return rays / np.linalg.norm(rays, axis=-1, keepdims=True)


def _hit_sphere(rays: np.ndarray, s: Sphere) -> Tuple[np.ndarray, np.ndarray]:
    c = np.asarray(s.center)
    b = rays @ c
    disc = b * b - (c @ c - s.radius * s.radius)
    t = np.full(rays.shape[:2], np.inf)
    hit = disc > 0
    root = b[hit] - np.sqrt(disc[hit])
    t[hit] = np.where(root > 0, root, np.inf)
    points = rays * np.where(np.isfinite(t), t, 0.0)[..., None]
    normals = (points - c) / s.radius
    return t, normals


def _hit_rectangle(rays: np.ndarray, r: Rectangle) -> Tuple[np.ndarray, np.ndarray]:
    c = np.asarray(r.center)
    n = r.normal
    denom = rays @ n
    t = np.full(rays.shape[:2], np.inf)
    facing = np.abs(denom) > 1e-9
    t_plane = np.where(facing, (c @ n) / np.where(facing, denom, 1.0), np.inf)
    points = rays * np.where(np.isfinite(t_plane), t_plane, 0.0)[..., None]
    local = points - c
    inside = (
        facing
        & (t_plane > 0)
        & (np.abs(local @ np.asarray(r.axis_u)) <= r.half_u)
        & (np.abs(local @ np.asarray(r.axis_v)) <= r.half_v)
    )
    t[inside] = t_plane[inside]
    # Both faces are visible: flip so the normal faces the camera.
    sign = np.where(denom > 0, -1.0, 1.0)[..., None]
    return t, sign * n


def render_scene(
    objects: Sequence[Primitive],
    height: int,
    width: int,
    num_classes: int,
    rng: np.random.Generator,
) -> Sample:
    """Ray-cast the scene and derive image, class map, depth and normals."""
    rays = camera_rays(height, width)
    # background: ground plane, then the wall closes every remaining ray
    depth = WALL_Z / rays[..., 2]
    normal = np.broadcast_to(np.array([0.0, 0.0, -1.0]), rays.shape).copy()
    labels = np.zeros((height, width), dtype=np.int64)
    down = rays[..., 1] > 1e-9
    t_ground = np.where(down, GROUND_Y / np.where(down, rays[..., 1], 1.0), np.inf)
    ground = t_ground < depth
    depth[ground] = t_ground[ground]
    normal[ground] = np.array([0.0, -1.0, 0.0])

    for obj in objects:
        if isinstance(obj, Sphere):
            t, n = _hit_sphere(rays, obj)
        else:
            t, n = _hit_rectangle(rays, obj)
        closer = t < depth
        depth[closer] = t[closer]
        normal[closer] = np.broadcast_to(n, rays.shape)[closer]
        labels[closer] = obj.label

    normal /= np.linalg.norm(normal, axis=-1, keepdims=True)
    albedo = np.stack(
        [np.random.default_rng([7, c]).uniform(0.2, 0.9, 3) for c in range(num_classes)]
    )
    shading = AMBIENT + (1.0 - AMBIENT) * np.clip(normal @ LIGHT_DIRECTION, 0.0, None)
    image = albedo[labels] * shading[..., None]
    image = np.clip(image + rng.normal(0.0, NOISE_STD, image.shape), 0.0, 1.0)

    semseg = labels.copy()
    boundary = np.zeros_like(labels, dtype=bool)
    boundary[:, :-1] |= labels[:, :-1] != labels[:, 1:]
    boundary[:-1, :] |= labels[:-1, :] != labels[1:, :]
    semseg[boundary] = IGNORE_LABEL

    return Sample(
        image=image.astype(np.float32),
        semseg=semseg.astype(np.uint16),
        depth=depth.astype(np.float32),
        normal=normal.astype(np.float32),
    )


def generate_scene(seed: Seed, height: int, width: int, num_classes: int) -> Sample:
    """Deterministic sample for a seed.

    Raises:
        ValidationError: If extents are not positive or num_classes < 2
    """
    if height < 1 or width < 1:
        raise ValidationError(f"scene extents must be positive, got {height}x{width}")
    if not 2 <= num_classes <= IGNORE_LABEL - 1:
        raise ValidationError(
            f"num_classes must be in [2, {IGNORE_LABEL - 1}], got {num_classes}"
        )
    rng = np.random.default_rng(seed)
    objects = random_scene(rng, num_classes)
    return render_scene(objects, height, width, num_classes, rng)


def sample_path(directory: Union[str, Path], index: int) -> Path:
    return Path(directory) / (SAMPLE_FILE_PATTERN % index)


def encode_sample(sample: Sample) -> bytes:
    h, w = sample.hw
    return b"".join(
        [
            SAMPLE_MAGIC,
            HEADER.pack(h, w, *PLANE_CHANNELS),
            np.ascontiguousarray(sample.image, dtype="<f4").tobytes(),
            np.ascontiguousarray(sample.semseg, dtype="<u2").tobytes(),
            np.ascontiguousarray(sample.depth, dtype="<f4").tobytes(),
            np.ascontiguousarray(sample.normal, dtype="<f4").tobytes(),
        ]
    )


def decode_sample(data: bytes, name: str) -> Sample:
    """Parse one sample file.

    Raises:
        CorruptHeaderError: On bad magic, channel counts or trailing bytes
        TruncatedFileError: If the header or payload is cut short
    """
    head = len(SAMPLE_MAGIC) + HEADER.size
    if len(data) < len(SAMPLE_MAGIC) or data[: len(SAMPLE_MAGIC)] != SAMPLE_MAGIC:
        raise CorruptHeaderError(f"{name}: bad magic, expected {SAMPLE_MAGIC!r}")
    if len(data) < head:
        raise TruncatedFileError(f"{name}: truncated header")
    h, w, *channels = HEADER.unpack_from(data, len(SAMPLE_MAGIC))
    if h < 1 or w < 1 or tuple(channels) != PLANE_CHANNELS:
        raise CorruptHeaderError(
            f"{name}: invalid header H={h} W={w} channels={tuple(channels)}"
        )
    pixels = h * w
    sizes = (pixels * 3 * 4, pixels * 2, pixels * 4, pixels * 3 * 4)
    expected = head + sum(sizes)
    if len(data) < expected:
        raise TruncatedFileError(
            f"{name}: truncated, {len(data)} of {expected} bytes present"
        )
    if len(data) > expected:
        raise CorruptHeaderError(f"{name}: {len(data) - expected} trailing bytes")
    offset = head
    planes = []
    for size, dtype, shape in zip(
        sizes,
        ("<f4", "<u2", "<f4", "<f4"),
        ((h, w, 3), (h, w), (h, w), (h, w, 3)),
    ):
        count = size // np.dtype(dtype).itemsize
        plane = np.frombuffer(data, dtype=dtype, count=count, offset=offset)
        planes.append(plane.reshape(shape).copy())
        offset += size
    image, semseg, depth, normal = planes
    return Sample(
        image=image.astype(np.float32),
        semseg=semseg.astype(np.uint16),
        depth=depth.astype(np.float32),
        normal=normal.astype(np.float32),
    )


def write_dataset(
    directory: Union[str, Path], manifest: DatasetManifest, samples: Sequence[Sample]
) -> Path:
    """Write the manifest and one file per sample.

    Raises:
        ManifestMismatchError: If the manifest disagrees with the samples
        DatasetError: On IO failures
    """
    if manifest.count != len(samples):
        raise ManifestMismatchError(
            f"manifest count {manifest.count} != {len(samples)} samples"
        )
    path = Path(directory)
    try:
        path.mkdir(parents=True, exist_ok=True)
        for index, sample in enumerate(samples):
            if sample.hw != (manifest.height, manifest.width):
                raise ManifestMismatchError(
                    f"sample {index} is {sample.hw}, manifest says "
                    f"{(manifest.height, manifest.width)}"
                )
            sample_path(path, index).write_bytes(encode_sample(sample))
        (path / MANIFEST_FILE).write_text(manifest.to_text(), encoding="utf-8")
    except OSError as e:
        logger.error(f"Cannot write dataset: {e}")
        raise DatasetError(f"Cannot write dataset to {path}: {e}") from e
    logger.info(f"Wrote {len(samples)} samples to {path}")
    return path


def generate_dataset(
    directory: Union[str, Path],
    count: int,
    height: int,
    width: int,
    num_classes: int,
    seed: int = 0,
    split: str = "train",
) -> DatasetManifest:
    """Render `count` scenes seeded by (seed, index) on a worker pool and save them."""
    if count < 1:
        raise ValidationError(f"sample count must be positive, got {count}")
    manifest = DatasetManifest(count, height, width, num_classes, split, seed)

    def make(index: int) -> Sample:
        return generate_scene((seed, index), height, width, num_classes)

    with ThreadPoolExecutor(max_workers=worker_threads()) as executor:
        samples = list(executor.map(make, range(count)))
    write_dataset(directory, manifest, samples)
    return manifest


def load_dataset(directory: Union[str, Path]) -> Tuple[DatasetManifest, List[Sample]]:
    """Read the manifest and every sample file.

    Raises:
        DatasetError: If the directory or manifest is missing or unreadable
        ManifestMismatchError: If files on disk disagree with the manifest
        CorruptHeaderError, TruncatedFileError: On a damaged sample file
    """
    path = Path(directory)
    manifest_path = path / MANIFEST_FILE
    if not manifest_path.is_file():
        raise DatasetError(f"no dataset at {path}: {MANIFEST_FILE} missing")
    try:
        manifest = DatasetManifest.from_text(
            manifest_path.read_text(encoding="utf-8"), str(manifest_path)
        )
    except (OSError, UnicodeDecodeError) as e:
        raise DatasetError(f"Cannot read {manifest_path}: {e}") from e

    present = sorted(path.glob("sample_*.dmt"))
    if len(present) != manifest.count:
        raise ManifestMismatchError(
            f"manifest lists {manifest.count} samples, {len(present)} files present"
        )
    samples = []
    for index in range(manifest.count):
        file = sample_path(path, index)
        if not file.is_file():
            raise ManifestMismatchError(f"{file.name} listed in manifest is missing")
        try:
            data = file.read_bytes()
        except OSError as e:
            raise DatasetError(f"Cannot read {file}: {e}") from e
        sample = decode_sample(data, file.name)
        if sample.hw != (manifest.height, manifest.width):
            raise ManifestMismatchError(
                f"{file.name} is {sample.hw}, manifest says "
                f"{(manifest.height, manifest.width)}"
            )
        samples.append(sample)
    logger.info(f"Loaded {len(samples)} samples from {path}")
    return manifest, samples


def make_batch(samples: Sequence[Sample], indices: Sequence[int]) -> Batch:
    picked = [samples[i] for i in indices]
    return Batch(
        images=np.stack([s.image for s in picked]).astype(np.float64),
        semseg=np.stack([s.semseg for s in picked]).astype(np.int64),
        depth=np.stack([s.depth for s in picked]).astype(np.float64),
        normal=np.stack([s.normal for s in picked]).astype(np.float64),
        indices=tuple(int(i) for i in indices),
    )


def batch_iter(
    samples: Sequence[Sample], batch_size: int, shuffle_seed: int, epoch: int
) -> List[Batch]:
    """Batches of one epoch in the order fixed by (shuffle_seed, epoch).

    The last batch is shorter when the sample count is not a multiple.
    """
    if batch_size < 1:
        raise ValidationError(f"batch_size must be positive, got {batch_size}")
    order = np.random.default_rng([shuffle_seed, epoch]).permutation(len(samples))
    return [
        make_batch(samples, order[start : start + batch_size])
        for start in range(0, len(samples), batch_size)
    ]
