"""Datasets: MNIST from IDX files, a folder-of-images ingestor for 64x64
color runs, and a procedurally generated factor dataset.

The synthetic dataset renders an isotropic intensity bump controlled by four
factors (x position, y position, radius, intensity), so ground-truth factor
labels exist by construction and factor-recovery claims can be checked
exactly. Nothing here downloads anything; datasets are read from `root`.

Pixel ranges are a per-family convention: [0, 1] for the VAE family,
[-1, 1] for the GAN family. Every emitted batch is range-checked.
"""

from __future__ import annotations

import gzip
import hashlib
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .seeding import stream

__all__ = [
    "DatasetError",
    "DatasetHandle",
    "SyntheticFactorSpec",
    "load_dataset",
    "render_synthetic",
    "iterate_batches",
    "batch_at",
    "batches_per_epoch",
    "to_unit_interval",
    "MNIST_FILES",
    "MNIST_GZ_MD5",
]

DATA_ROOT_ENV = "ANADIS_DATA_ROOT"


class DatasetError(RuntimeError):
    pass


@dataclass
class DatasetHandle:
    id: str
    normalization: str  # unit_interval | signed_unit
    image_shape: tuple
    splits: dict = field(repr=False)  # name -> float32 array [n, C, H, W]
    factor_labels: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.normalization not in ("unit_interval", "signed_unit"):
            raise ValueError(f"unknown normalization {self.normalization!r}")
        lo, hi = (0.0, 1.0) if self.normalization == "unit_interval" else (-1.0, 1.0)
        for name, arr in self.splits.items():
            if arr.ndim != 4 or arr.shape[1:] != self.image_shape:
                raise DatasetError(f"split {name!r} has shape {arr.shape}, "
                                   f"expected [n x {self.image_shape}]")
            if arr.min() < lo - 1e-6 or arr.max() > hi + 1e-6:
                raise DatasetError(f"split {name!r} violates the "
                                   f"{self.normalization} range [{lo}, {hi}]")

    def split_size(self, split):
        return self.splits[split].shape[0]


def _family_normalization(family):
    if family == "anavae":
        return "unit_interval"
    if family == "anagan":
        return "signed_unit"
    raise ValueError(f"unknown family {family!r}")


def _to_family_range(unit_images, normalization):
    if normalization == "unit_interval":
        return unit_images
    return unit_images * 2.0 - 1.0


def to_unit_interval(images, normalization):
    """Invert the family normalization back to [0, 1]."""
    if normalization == "unit_interval":
        return images
    return (images + 1.0) / 2.0


# ---------------------------------------------------------------------------
# Synthetic factor dataset
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticFactorSpec:
    """Four-factor bump renderer on a square grayscale canvas.

    `ranges` bounds what `render_synthetic` accepts; `sample_ranges` is the
    (narrower) region the dataset draws from, keeping bumps visible and away
    from the border.
    """

    canvas: int = 32
    ranges: dict = field(default_factory=lambda: {
        "x_position": (8.0, 24.0),
        "y_position": (8.0, 24.0),
        "radius": (1.5, 3.5),
        "intensity": (0.0, 1.0),
    })
    sample_ranges: dict = field(default_factory=lambda: {
        "x_position": (10.0, 22.0),
        "y_position": (10.0, 22.0),
        "radius": (1.5, 3.5),
        "intensity": (0.25, 1.0),
    })

    FACTORS = ("x_position", "y_position", "radius", "intensity")


def render_synthetic(factors, spec: SyntheticFactorSpec = SyntheticFactorSpec()):
    """Render one factor vector (x, y, radius, intensity) to a [0,1] image.

    Deterministic; out-of-range factors are rejected.
    """
    factors = np.asarray(factors, dtype=np.float64).reshape(-1)
    if factors.shape != (4,):
        raise ValueError(f"expected 4 factors {spec.FACTORS}, got shape {factors.shape}")
    for value, name in zip(factors, spec.FACTORS):
        lo, hi = spec.ranges[name]
        if not (lo <= value <= hi):
            raise ValueError(f"factor {name}={value} outside declared range [{lo}, {hi}]")
    x, y, radius, intensity = factors
    grid = np.arange(spec.canvas, dtype=np.float64)
    xx, yy = np.meshgrid(grid, grid)
    img = intensity * np.exp(-((xx - x) ** 2 + (yy - y) ** 2) / (2.0 * radius ** 2))
    return img.astype(np.float32)


def _sample_synthetic(spec, n, rng):
    cols = []
    for name in spec.FACTORS:
        lo, hi = spec.sample_ranges[name]
        cols.append(rng.uniform(lo, hi, size=n))
    factors = np.stack(cols, axis=1)
    images = np.stack([render_synthetic(f, spec) for f in factors])[:, None, :, :]
    return images, factors


# ---------------------------------------------------------------------------
# MNIST (IDX binary format)
# ---------------------------------------------------------------------------

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "eval_images": "t10k-images-idx3-ubyte",
    "eval_labels": "t10k-labels-idx1-ubyte",
}

# md5 of the canonical gzip archives, for opt-in verification
MNIST_GZ_MD5 = {
    "train-images-idx3-ubyte.gz": "f68b3c2dcbeaaa9fbdd348bbdeb94873",
    "train-labels-idx1-ubyte.gz": "d53e105ee54ea40749a09fcbcd1e9432",
    "t10k-images-idx3-ubyte.gz": "9fb629c4189551a2d022fa330f9573f3",
    "t10k-labels-idx1-ubyte.gz": "ec29112dd5afa0611ce80d1b7f02629c",
}


def _open_idx(path):
    if path.endswith(".gz"):
        return gzip.open(path, "rb")
    return open(path, "rb")


def _find_idx(root, stem):
    for candidate in (os.path.join(root, stem), os.path.join(root, stem + ".gz")):
        if os.path.exists(candidate):
            return candidate
    raise DatasetError(f"missing dataset file {stem}[.gz] under {root}")


def read_idx_images(path):
    """Parse an IDX3 image file (big-endian headers) to uint8 [n, rows, cols]."""
    with _open_idx(path) as f:
        header = f.read(16)
        if len(header) != 16:
            raise DatasetError(f"{path}: truncated IDX header")
        magic, n, rows, cols = struct.unpack(">IIII", header)
        if magic != 2051:
            raise DatasetError(f"{path}: bad IDX image magic {magic:#x} (expected 0x803)")
        payload = f.read(n * rows * cols)
        if len(payload) != n * rows * cols:
            raise DatasetError(f"{path}: truncated image payload")
        return np.frombuffer(payload, dtype=np.uint8).reshape(n, rows, cols)


def read_idx_labels(path):
    with _open_idx(path) as f:
        header = f.read(8)
        if len(header) != 8:
            raise DatasetError(f"{path}: truncated IDX header")
        magic, n = struct.unpack(">II", header)
        if magic != 2049:
            raise DatasetError(f"{path}: bad IDX label magic {magic:#x} (expected 0x801)")
        payload = f.read(n)
        if len(payload) != n:
            raise DatasetError(f"{path}: truncated label payload")
        return np.frombuffer(payload, dtype=np.uint8)


def _verify_md5(path):
    name = os.path.basename(path)
    expected = MNIST_GZ_MD5.get(name)
    if expected is None:
        return
    digest = hashlib.md5(open(path, "rb").read()).hexdigest()
    if digest != expected:
        raise DatasetError(f"{name}: md5 {digest} does not match the canonical "
                           f"archive ({expected})")


def _load_mnist(root, normalization, verify_checksum=False):
    splits = {}
    for split in ("train", "eval"):
        img_path = _find_idx(root, MNIST_FILES[f"{split}_images"])
        if verify_checksum:
            _verify_md5(img_path)
        images = read_idx_images(img_path)
        if images.shape[1:] != (28, 28):
            raise DatasetError(f"{img_path}: expected 28x28 images, got {images.shape[1:]}")
        unit = images.astype(np.float32)[:, None, :, :] / 255.0
        splits[split] = _to_family_range(unit, normalization).astype(np.float32)
    return DatasetHandle(id="mnist", normalization=normalization,
                         image_shape=(1, 28, 28), splits=splits)


# ---------------------------------------------------------------------------
# Folder-of-images ingestor (64x64 color profiles)
# ---------------------------------------------------------------------------

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".webp")


def _load_external64(root, normalization, seed, crop=None, eval_fraction=0.1):
    from PIL import Image

    paths = sorted(
        os.path.join(root, name) for name in os.listdir(root)
        if name.lower().endswith(IMAGE_EXTENSIONS)
    )
    if not paths:
        raise DatasetError(f"no images found under {root}")
    images = []
    for path in paths:
        try:
            img = Image.open(path).convert("RGB")
        except Exception as exc:
            raise DatasetError(f"cannot decode {path}: {exc}") from exc
        if crop is not None:
            img = img.crop(crop)
        else:
            side = min(img.size)
            left = (img.width - side) // 2
            top = (img.height - side) // 2
            img = img.crop((left, top, left + side, top + side))
        img = img.resize((64, 64), Image.BILINEAR)
        images.append(np.asarray(img, dtype=np.float32).transpose(2, 0, 1) / 255.0)
    unit = np.stack(images)
    order = stream(seed, "external64.split").permutation(len(unit))
    n_eval = max(1, int(round(eval_fraction * len(unit))))
    eval_idx, train_idx = np.sort(order[:n_eval]), np.sort(order[n_eval:])
    if len(train_idx) == 0:
        raise DatasetError(f"{root}: not enough images to form a train split")
    splits = {
        "train": _to_family_range(unit[train_idx], normalization),
        "eval": _to_family_range(unit[eval_idx], normalization),
    }
    return DatasetHandle(id="external64", normalization=normalization,
                         image_shape=(3, 64, 64), splits=splits)


# ---------------------------------------------------------------------------
# Entry points
# ---------------------------------------------------------------------------


def load_dataset(dataset_id, family, root=None, seed=0, synthetic_spec=None,
                 n_train=2560, n_eval=6400, verify_checksum=False, crop=None):
    """Load a dataset normalized for `family`.

    mnist/external64 read files under `root` (defaults to $ANADIS_DATA_ROOT);
    synthetic renders `n_train`/`n_eval` samples from `synthetic_spec` with
    exact factor labels attached.
    """
    normalization = _family_normalization(family)
    if dataset_id == "synthetic":
        spec = synthetic_spec or SyntheticFactorSpec()
        train_images, train_factors = _sample_synthetic(spec, n_train, stream(seed, "synthetic.train"))
        eval_images, eval_factors = _sample_synthetic(spec, n_eval, stream(seed, "synthetic.eval"))
        return DatasetHandle(
            id="synthetic", normalization=normalization,
            image_shape=(1, spec.canvas, spec.canvas),
            splits={"train": _to_family_range(train_images, normalization),
                    "eval": _to_family_range(eval_images, normalization)},
            factor_labels={"train": train_factors, "eval": eval_factors},
        )
    root = root or os.environ.get(DATA_ROOT_ENV)
    if not root:
        raise DatasetError(f"dataset {dataset_id!r} needs a root path "
                           f"(argument or ${DATA_ROOT_ENV})")
    if dataset_id == "mnist":
        return _load_mnist(os.path.join(root, "mnist") if
                           os.path.isdir(os.path.join(root, "mnist")) else root,
                           normalization, verify_checksum)
    if dataset_id == "external64":
        return _load_external64(root, normalization, seed, crop=crop)
    raise DatasetError(f"unknown dataset id {dataset_id!r}")


def batches_per_epoch(handle, split, batch_size):
    return handle.split_size(split) // batch_size


def batch_at(handle, split, batch_size, seed, index):
    """Random access into the deterministic batch stream.

    Batches are epoch-blocked: each epoch is a fresh seeded shuffle of the
    split and the final partial batch is dropped, so every batch has the
    same shape and `index // batches_per_epoch` is the epoch number.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    data = handle.splits[split]
    bpe = batches_per_epoch(handle, split, batch_size)
    if bpe == 0:
        raise DatasetError(f"split {split!r} ({len(data)} samples) cannot fill one "
                           f"batch of {batch_size}")
    epoch, within = divmod(index, bpe)
    order = stream(seed, f"shuffle.{split}.epoch{epoch}").permutation(len(data))
    rows = order[within * batch_size:(within + 1) * batch_size]
    return data[rows]


def iterate_batches(handle, split, batch_size, seed, n_epochs=1, start=0):
    """Yield the deterministic batch stream; same seed, same stream."""
    data = handle.splits[split]
    bpe = batches_per_epoch(handle, split, batch_size)
    if bpe == 0:
        raise DatasetError(f"split {split!r} ({len(data)} samples) cannot fill one "
                           f"batch of {batch_size}")
    stop = n_epochs * bpe if n_epochs is not None else None
    index = start
    order = None
    current_epoch = -1
    while stop is None or index < stop:
        epoch, within = divmod(index, bpe)
        if epoch != current_epoch:
            order = stream(seed, f"shuffle.{split}.epoch{epoch}").permutation(len(data))
            current_epoch = epoch
        rows = order[within * batch_size:(within + 1) * batch_size]
        yield data[rows]
        index += 1
