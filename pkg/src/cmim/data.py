"""Dataset ingestion (IDX image files, synthetic generators) and batching.

The IDX reader/writer follows the MNIST distribution format: big-endian magic
and dimension words, unsigned-byte pixels and labels, optional gzip. Batching
is seeded and reshuffles every epoch; contrastive objectives drop the final
short batch so the in-batch negative count stays constant.
"""

from __future__ import annotations

import gzip
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, IdxFormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

BINARIZE_THRESHOLD = 0.5


@dataclass
class Dataset:
    """Flattened images in [0, 1] with integer labels."""

    images: np.ndarray  # [N, rows*cols] float64 in [0, 1]
    labels: np.ndarray  # [N] int64
    name: str = ""
    split: str = ""
    image_shape: tuple[int, int] = (28, 28)

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ContractError(
                f"{len(self.images)} images vs {len(self.labels)} labels"
            )
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ContractError("pixel values must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.images)


def binarize(x: np.ndarray, threshold: float = BINARIZE_THRESHOLD) -> np.ndarray:
    """Deterministic thresholding to {0, 1}; idempotent."""
    return (x >= threshold).astype(x.dtype)


def _open_maybe_gzip(path):
    with open(path, "rb") as fh:
        head = fh.read(2)
    if head == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_exact(fh, count: int, offset: int, path) -> bytes:
    buf = fh.read(count)
    if len(buf) != count:
        raise IdxFormatError(
            f"{path}: truncated, wanted {count} bytes at offset {offset}, "
            f"got {len(buf)}"
        )
    return buf


def load_idx(images_path, labels_path, name: str = "", split: str = "") -> Dataset:
    """Read an images/labels IDX pair; pixels are scaled to [0, 1] by /255."""
    images_path, labels_path = Path(images_path), Path(labels_path)
    with _open_maybe_gzip(images_path) as fh:
        magic, n, rows, cols = struct.unpack(">IIII", _read_exact(fh, 16, 0, images_path))
        if magic != IDX_IMAGES_MAGIC:
            raise IdxFormatError(
                f"{images_path}: bad image magic 0x{magic:08x} at byte 0, "
                f"expected 0x{IDX_IMAGES_MAGIC:08x}"
            )
        raw = _read_exact(fh, n * rows * cols, 16, images_path)
        if fh.read(1):
            raise IdxFormatError(f"{images_path}: trailing bytes after offset {16 + n * rows * cols}")
    with _open_maybe_gzip(labels_path) as fh:
        magic, n_labels = struct.unpack(">II", _read_exact(fh, 8, 0, labels_path))
        if magic != IDX_LABELS_MAGIC:
            raise IdxFormatError(
                f"{labels_path}: bad label magic 0x{magic:08x} at byte 0, "
                f"expected 0x{IDX_LABELS_MAGIC:08x}"
            )
        raw_labels = _read_exact(fh, n_labels, 8, labels_path)
        if fh.read(1):
            raise IdxFormatError(f"{labels_path}: trailing bytes after offset {8 + n_labels}")
    if n != n_labels:
        raise IdxFormatError(
            f"{images_path} holds {n} images but {labels_path} holds {n_labels} labels"
        )
    images = np.frombuffer(raw, dtype=np.uint8).reshape(n, rows * cols)
    labels = np.frombuffer(raw_labels, dtype=np.uint8)
    return Dataset(
        images=images.astype(np.float64) / 255.0,
        labels=labels.astype(np.int64),
        name=name or images_path.stem,
        split=split,
        image_shape=(rows, cols),
    )


def save_idx(ds: Dataset, images_path, labels_path) -> None:
    """Inverse of load_idx; pixels are quantized back to unsigned bytes.

    Round-trips bit-exactly for any dataset whose pixels are k/255 values,
    which covers everything this loader produces.
    """
    rows, cols = ds.image_shape
    if rows * cols != ds.images.shape[1]:
        raise ContractError(
            f"image_shape {ds.image_shape} does not match flat dim {ds.images.shape[1]}"
        )
    pixels = np.round(ds.images * 255.0).astype(np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, len(ds), rows, cols))
        fh.write(pixels.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, len(ds)))
        fh.write(ds.labels.astype(np.uint8).tobytes())


def batches(ds: Dataset, batch_size: int, seed, binarize: bool = False,
            drop_last: bool = True):
    """Infinite stream of (images, labels) batches, reshuffled every epoch.

    ``seed`` may be an int or a SeedSequence. Every sample appears exactly once
    per epoch before the optional drop of the final short batch.
    """
    if batch_size < 1:
        raise ContractError("batch_size must be >= 1")
    rng = np.random.default_rng(seed)
    n = len(ds)
    images = ds.images
    if binarize:
        images = (images >= BINARIZE_THRESHOLD).astype(images.dtype)
    while True:
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            if drop_last and len(idx) < batch_size:
                break
            yield images[idx], ds.labels[idx]


@dataclass
class Toy2DSet:
    """1000 points strictly inside the first quadrant."""

    points: np.ndarray  # [N, 2], both coordinates > 0

    def __post_init__(self):
        if self.points.ndim != 2 or self.points.shape[1] != 2:
            raise ContractError(f"points must be [N, 2], got {self.points.shape}")
        if not np.all(self.points > 0.0):
            raise ContractError("toy points must start in the open first quadrant")


def make_toy2d(seed: int, n_points: int = 1000) -> Toy2DSet:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x70]))
    # 1 - U[0, 1) lands in (0, 1], keeping both coordinates strictly positive
    return Toy2DSet(points=1.0 - rng.random((n_points, 2)))


def subset(ds: Dataset, n: int, seed: int) -> Dataset:
    """Seeded subsample of ``n`` items, stratified by label where possible."""
    if n > len(ds):
        raise ContractError(f"cannot take {n} samples from {len(ds)}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5AB]))
    classes, counts = np.unique(ds.labels, return_counts=True)
    quotas = np.floor(counts / len(ds) * n).astype(int)
    chosen: list[np.ndarray] = []
    for cls, quota in zip(classes, quotas):
        idx = np.flatnonzero(ds.labels == cls)
        chosen.append(rng.choice(idx, size=min(quota, len(idx)), replace=False))
    picked = np.concatenate(chosen) if chosen else np.empty(0, dtype=int)
    if len(picked) < n:
        rest = np.setdiff1d(np.arange(len(ds)), picked)
        extra = rng.choice(rest, size=n - len(picked), replace=False)
        picked = np.concatenate([picked, extra])
    picked = np.sort(picked)
    return Dataset(
        images=ds.images[picked], labels=ds.labels[picked],
        name=f"{ds.name}[{n}]", split=ds.split, image_shape=ds.image_shape,
    )


def train_val_split(ds: Dataset, val_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded shuffle, then the trailing fraction becomes the validation split."""
    if not 0.0 < val_fraction < 1.0:
        raise ContractError(f"val_fraction must be in (0, 1), got {val_fraction}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5F11]))
    order = rng.permutation(len(ds))
    n_val = max(1, int(round(len(ds) * val_fraction)))
    val_idx, train_idx = order[len(ds) - n_val:], order[:len(ds) - n_val]
    make = lambda idx, tag: Dataset(
        images=ds.images[idx], labels=ds.labels[idx],
        name=ds.name, split=tag, image_shape=ds.image_shape,
    )
    return make(train_idx, "train"), make(val_idx, "val")


def make_digits_corpus(seed: int = 0, n_train: int = 10_000, n_test: int = 2_000
                       ) -> tuple[Dataset, Dataset]:
    """MNIST-like 28x28 handwritten-digit corpus built fully offline.

    Upscales scikit-learn's bundled 8x8 digits to 56x56, applies a seeded
    random rotation, scale, and shift per sample (nearest-neighbor inverse
    map), and mean-pools down to 28x28. The augmentation makes the task hard
    enough that per-objective embedding quality separates. Pixels are
    quantized to the 8-bit grid so IDX round-trips are exact.
    """
    from sklearn.datasets import load_digits

    raw = load_digits()
    base = raw.images / 16.0  # [1797, 8, 8] in [0, 1]
    labels = raw.target.astype(np.int64)
    up = np.kron(base, np.ones((7, 7)))  # [N, 56, 56]

    H = 56
    center = (H - 1) / 2.0
    grid_y, grid_x = np.mgrid[0:H, 0:H].astype(np.float64)

    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD161]))
    total = n_train + n_test
    picks = rng.integers(0, len(base), size=total)
    angles = rng.uniform(-25.0, 25.0, size=total) * math.pi / 180.0
    scales = rng.uniform(0.75, 1.20, size=total)
    shifts = rng.integers(-10, 11, size=(total, 2))  # +-5 px at 28x28 scale

    images = np.zeros((total, 28, 28))
    for i in range(total):
        cos_t, sin_t = math.cos(angles[i]), math.sin(angles[i])
        dx, dy = shifts[i]
        x_rel = grid_x - center - dx
        y_rel = grid_y - center - dy
        src_x = np.rint((cos_t * x_rel + sin_t * y_rel) / scales[i] + center).astype(int)
        src_y = np.rint((-sin_t * x_rel + cos_t * y_rel) / scales[i] + center).astype(int)
        valid = (src_x >= 0) & (src_x < H) & (src_y >= 0) & (src_y < H)
        warped = np.zeros((H, H))
        warped[valid] = up[picks[i]][src_y[valid], src_x[valid]]
        images[i] = warped.reshape(28, 2, 28, 2).mean(axis=(1, 3))
    images = np.round(images * 255.0) / 255.0
    flat = images.reshape(total, 784)
    lab = labels[picks]

    def _make(lo, hi, split):
        return Dataset(images=flat[lo:hi], labels=lab[lo:hi], name="digits28",
                       split=split, image_shape=(28, 28))

    return _make(0, n_train, "train"), _make(n_train, total, "test")
