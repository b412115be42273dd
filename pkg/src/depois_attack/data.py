"""Image datasets: IDX reading/writing, a synthetic 8x8 glyph corpus, and
the trusted/remainder split."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
NUM_CLASSES = 10


@dataclass(frozen=True, eq=False)
class ImageDataset:
    """``n x d`` images in [0, 1] with integer labels in 0..9.

    ``generated`` flags samples produced by the augmentation generator
    rather than drawn from the source corpus.
    """

    images: np.ndarray
    labels: np.ndarray
    name: str = ""
    image_shape: tuple = ()
    generated: np.ndarray = field(default=None)

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if images.ndim != 2:
            raise DataError(f"images must be n x d, got shape {images.shape}")
        if labels.shape != (images.shape[0],):
            raise DataError(f"{images.shape[0]} images but {labels.size} labels")
        if images.size and (images.min() < 0.0 or images.max() > 1.0):
            raise DataError("pixel values must lie in [0, 1]")
        if labels.size and (labels.min() < 0 or labels.max() >= NUM_CLASSES):
            raise DataError("labels must lie in 0..9")
        generated = self.generated
        generated = np.zeros(labels.size, bool) if generated is None else np.asarray(generated, bool)
        image_shape = tuple(self.image_shape) or (images.shape[1],)
        if int(np.prod(image_shape)) != images.shape[1]:
            raise DataError(f"image shape {image_shape} does not match d = {images.shape[1]}")
        images.setflags(write=False)
        labels.setflags(write=False)
        generated.setflags(write=False)
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "generated", generated)
        object.__setattr__(self, "image_shape", image_shape)

    def __len__(self) -> int:
        return self.labels.size

    @property
    def dim(self) -> int:
        return self.images.shape[1]

    def subset(self, index, name: str | None = None) -> ImageDataset:
        index = np.asarray(index, dtype=np.int64)
        return ImageDataset(
            self.images[index],
            self.labels[index],
            name if name is not None else self.name,
            self.image_shape,
            self.generated[index],
        )

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=NUM_CLASSES)


def concat_datasets(a: ImageDataset, b: ImageDataset, name: str) -> ImageDataset:
    if a.image_shape != b.image_shape:
        raise DataError("cannot concatenate datasets with different image shapes")
    return ImageDataset(
        np.vstack([a.images, b.images]),
        np.concatenate([a.labels, b.labels]),
        name,
        a.image_shape,
        np.concatenate([a.generated, b.generated]),
    )


# -- IDX --------------------------------------------------------------------------


def _read_bytes(path) -> bytes:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError as exc:
        raise DataError(f"dataset file not found: {path}") from exc
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def read_idx_images(path) -> tuple[np.ndarray, tuple[int, int]]:
    raw = _read_bytes(path)
    if len(raw) < 16:
        raise DataError(f"{path}: truncated IDX image header")
    magic, n, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IMAGE_MAGIC:
        raise DataError(f"{path}: bad IDX image magic 0x{magic:08x}")
    need = n * rows * cols
    if len(raw) - 16 < need:
        raise DataError(f"{path}: truncated, header promises {need} pixel bytes, found {len(raw) - 16}")
    pixels = np.frombuffer(raw, dtype=np.uint8, count=need, offset=16)
    return pixels.reshape(n, rows * cols), (rows, cols)


def read_idx_labels(path) -> np.ndarray:
    raw = _read_bytes(path)
    if len(raw) < 8:
        raise DataError(f"{path}: truncated IDX label header")
    magic, n = struct.unpack(">II", raw[:8])
    if magic != LABEL_MAGIC:
        raise DataError(f"{path}: bad IDX label magic 0x{magic:08x}")
    if len(raw) - 8 < n:
        raise DataError(f"{path}: truncated, header promises {n} labels, found {len(raw) - 8}")
    return np.frombuffer(raw, dtype=np.uint8, count=n, offset=8)


def load_idx(images_path, labels_path, limit: int | None = None) -> ImageDataset:
    """Load an IDX image/label pair, scaling pixel bytes by 1/255.

    Gzip-compressed files are detected by their magic bytes.
    """
    pixels, (rows, cols) = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if pixels.shape[0] != labels.size:
        raise DataError(
            f"count mismatch: {images_path} has {pixels.shape[0]} images, "
            f"{labels_path} has {labels.size} labels"
        )
    if labels.size and labels.max() >= NUM_CLASSES:
        raise DataError(f"{labels_path}: label {labels.max()} outside 0..9")
    if limit is not None:
        pixels, labels = pixels[:limit], labels[:limit]
    return ImageDataset(pixels / 255.0, labels, Path(images_path).name, (rows, cols))


def to_bytes(images: np.ndarray) -> np.ndarray:
    """Quantise [0, 1] pixels to bytes; inverse of the loader's 1/255 scaling."""
    return np.clip(np.rint(np.asarray(images) * 255.0), 0, 255).astype(np.uint8)


def write_idx(ds: ImageDataset, images_path, labels_path=None, compress: bool = False) -> None:
    """Write ``ds`` as IDX files (labels skipped when ``labels_path`` is None)."""
    if len(ds.image_shape) == 2:
        rows, cols = ds.image_shape
    else:
        rows, cols = 1, ds.dim
    img = struct.pack(">IIII", IMAGE_MAGIC, len(ds), rows, cols) + to_bytes(ds.images).tobytes()
    lab = struct.pack(">II", LABEL_MAGIC, len(ds)) + ds.labels.astype(np.uint8).tobytes()
    for path, blob in ((images_path, img), (labels_path, lab)):
        if path is None:
            continue
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(gzip.compress(blob, mtime=0) if compress else blob)


# -- synthetic corpus ---------------------------------------------------------------

_GLYPHS = [
    # 0
    "..####..",
    ".#....#.",
    ".#....#.",
    ".#....#.",
    ".#....#.",
    ".#....#.",
    ".#....#.",
    "..####..",
    # 1
    "...##...",
    "..###...",
    "...##...",
    "...##...",
    "...##...",
    "...##...",
    "...##...",
    "..####..",
    # 2
    "..####..",
    ".#....#.",
    "......#.",
    ".....#..",
    "....#...",
    "...#....",
    "..#.....",
    ".######.",
    # 3
    ".#####..",
    "......#.",
    "......#.",
    "..####..",
    "......#.",
    "......#.",
    "......#.",
    ".#####..",
    # 4
    ".#...#..",
    ".#...#..",
    ".#...#..",
    ".######.",
    ".....#..",
    ".....#..",
    ".....#..",
    ".....#..",
    # 5
    ".######.",
    ".#......",
    ".#......",
    ".#####..",
    "......#.",
    "......#.",
    ".#....#.",
    "..####..",
    # 6
    "..####..",
    ".#......",
    ".#......",
    ".#####..",
    ".#....#.",
    ".#....#.",
    ".#....#.",
    "..####..",
    # 7
    ".######.",
    "......#.",
    ".....#..",
    ".....#..",
    "....#...",
    "....#...",
    "...#....",
    "...#....",
    # 8
    "..####..",
    ".#....#.",
    ".#....#.",
    "..####..",
    ".#....#.",
    ".#....#.",
    ".#....#.",
    "..####..",
    # 9
    "..####..",
    ".#....#.",
    ".#....#.",
    "..#####.",
    "......#.",
    "......#.",
    "......#.",
    "..####..",
]


def glyph_templates() -> np.ndarray:
    """The ten 8x8 class templates as a ``10 x 64`` array of 0/1 pixels."""
    rows = np.array([[c == "#" for c in line] for line in _GLYPHS], dtype=np.float64)
    return rows.reshape(NUM_CLASSES, 64)


def synth_digits(n: int, seed: int, noise: float = 0.25, d: int = 64) -> ImageDataset:
    """Seeded 8x8 glyph corpus: class templates plus Gaussian pixel noise.

    Labels are drawn uniformly over the ten classes.
    """
    if n <= 0:
        raise ConfigError(f"n must be positive, got {n}")
    if d != 64:
        raise ConfigError("the synthetic corpus is fixed at 8x8 (d = 64)")
    if noise < 0:
        raise ConfigError("noise amplitude must be non-negative")
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, NUM_CLASSES, size=n)
    images = glyph_templates()[labels]
    if noise > 0:
        images = np.clip(images + noise * rng.standard_normal(images.shape), 0.0, 1.0)
    return ImageDataset(images, labels, f"synth(n={n},seed={seed})", (8, 8))


# -- trusted split -----------------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    trusted_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.trusted_fraction < 1.0:
            raise ConfigError(f"trusted_fraction must lie in (0, 1), got {self.trusted_fraction}")


def split_indices(n: int, spec: SplitSpec) -> tuple[np.ndarray, np.ndarray]:
    k = int(round(spec.trusted_fraction * n))
    if k == 0 or k == n:
        raise ConfigError(f"split of {n} samples at fraction {spec.trusted_fraction} leaves one side empty")
    perm = np.random.default_rng(spec.seed).permutation(n)
    return np.sort(perm[:k]), np.sort(perm[k:])


def split_trusted(ds: ImageDataset, spec: SplitSpec) -> tuple[ImageDataset, ImageDataset]:
    """Partition ``ds`` into the trusted clean set and the remainder."""
    trusted, rest = split_indices(len(ds), spec)
    return ds.subset(trusted, f"{ds.name}/trusted"), ds.subset(rest, f"{ds.name}/remainder")
