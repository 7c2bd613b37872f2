"""Dataset readers, the augmentation pipeline and viewpoint splits.

All readers validate headers and sizes before allocating anything, so a
malformed file raises a :class:`DataFormatError` and never yields a
partially populated dataset.  Images are stored as ``(N, channels, H, W)``
float64 arrays.
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
NORB_BYTE_MAGIC = 0x1E3D4C55
NORB_INT_MAGIC = 0x1E3D4C54
CIFAR_RECORD = 3073

TRAIN_AZIMUTHS = (300, 320, 340, 0, 20, 40)
TRAIN_ELEVATIONS = (0, 1, 2)


class DataFormatError(ValueError):
    pass


class BadMagicError(DataFormatError):
    pass


class TruncatedFileError(DataFormatError):
    pass


class CountMismatchError(DataFormatError):
    pass


@dataclass
class LabeledImage:
    pixels: np.ndarray  # (channels, H, W)
    label: int
    meta: dict | None = None


@dataclass
class Dataset:
    images: np.ndarray                 # (N, channels, H, W)
    labels: np.ndarray                 # (N,)
    num_classes: int
    meta: dict[str, np.ndarray] = field(default_factory=dict)
    name: str = ""

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise CountMismatchError(f"{len(self.images)} images vs {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> LabeledImage:
        meta = {k: int(v[i]) for k, v in self.meta.items()} or None
        return LabeledImage(self.images[i], int(self.labels[i]), meta)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.labels[idx], self.num_classes,
                       {k: v[idx] for k, v in self.meta.items()}, self.name)

    @property
    def geometry(self) -> tuple[int, int, int]:
        _, c, h, w = self.images.shape
        return h, w, c


def _read_bytes(path) -> bytes:
    path = Path(path)
    if not path.exists() and Path(str(path) + ".gz").exists():
        path = Path(str(path) + ".gz")
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as f:
            return f.read()
    return path.read_bytes()


# -- IDX (MNIST / Fashion-MNIST) -------------------------------------------------


def _parse_idx_images(buf: bytes, path) -> np.ndarray:
    if len(buf) < 16:
        raise TruncatedFileError(f"{path}: IDX image header truncated")
    magic, n, rows, cols = struct.unpack(">IIII", buf[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise BadMagicError(f"{path}: bad IDX image magic 0x{magic:08x}")
    need = 16 + n * rows * cols
    if len(buf) < need:
        raise TruncatedFileError(f"{path}: expected {need} bytes, found {len(buf)}")
    return np.frombuffer(buf, np.uint8, n * rows * cols, 16).reshape(n, rows, cols)


def _parse_idx_labels(buf: bytes, path) -> np.ndarray:
    if len(buf) < 8:
        raise TruncatedFileError(f"{path}: IDX label header truncated")
    magic, n = struct.unpack(">II", buf[:8])
    if magic != IDX_LABELS_MAGIC:
        raise BadMagicError(f"{path}: bad IDX label magic 0x{magic:08x}")
    if len(buf) < 8 + n:
        raise TruncatedFileError(f"{path}: expected {8 + n} bytes, found {len(buf)}")
    return np.frombuffer(buf, np.uint8, n, 8)


def load_idx(images_path, labels_path, num_classes: int = 10, name: str = "") -> Dataset:
    """Read an IDX image/label file pair; pixels are scaled to [0, 1]."""
    raw = _parse_idx_images(_read_bytes(images_path), images_path)
    labels = _parse_idx_labels(_read_bytes(labels_path), labels_path)
    if len(raw) != len(labels):
        raise CountMismatchError(f"{images_path}: {len(raw)} images but {len(labels)} labels")
    if labels.size and labels.max() >= num_classes:
        raise DataFormatError(f"{labels_path}: label {labels.max()} out of range")
    images = (raw.astype(np.float64) / 255.0)[:, None]
    return Dataset(images, labels.astype(np.int64), num_classes, name=name)


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 ``(N, H, W)`` images and labels as an IDX pair."""
    images = np.asarray(images, np.uint8)
    n, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, n) + np.asarray(labels, np.uint8).tobytes())


# -- smallNORB -------------------------------------------------------------------


def _parse_norb(buf: bytes, path, expect_magic: int) -> np.ndarray:
    if len(buf) < 8:
        raise TruncatedFileError(f"{path}: header truncated")
    magic, ndim = struct.unpack("<ii", buf[:8])
    if magic & 0xFFFFFFFF != expect_magic:
        raise BadMagicError(f"{path}: bad binary-matrix magic 0x{magic & 0xFFFFFFFF:08x}")
    nstored = max(3, ndim)
    off = 8 + 4 * nstored
    if ndim < 1 or len(buf) < off:
        raise TruncatedFileError(f"{path}: header truncated")
    dims = struct.unpack(f"<{nstored}i", buf[8:off])[:ndim]
    dtype = np.uint8 if expect_magic == NORB_BYTE_MAGIC else np.dtype("<i4")
    count = int(np.prod(dims))
    if len(buf) < off + count * np.dtype(dtype).itemsize:
        raise TruncatedFileError(f"{path}: expected {count} elements of {np.dtype(dtype)}")
    return np.frombuffer(buf, dtype, count, off).reshape(dims)


def write_norb(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    if array.dtype == np.uint8:
        magic = NORB_BYTE_MAGIC
    else:
        array = array.astype("<i4")
        magic = NORB_INT_MAGIC
    dims = list(array.shape) + [1] * max(0, 3 - array.ndim)
    head = struct.pack("<Ii", magic, array.ndim) + struct.pack(f"<{len(dims)}i", *dims)
    Path(path).write_bytes(head + array.tobytes())


def decode_azimuth(raw):
    """Azimuth codes to degrees.

    The distributed info files store even codes 0, 2, ..., 34 (degrees =
    code * 10).  Codes containing an odd value can only be plain indices
    0..17, which are decoded as index * 20.
    """
    raw = np.asarray(raw)
    if raw.size and (raw.min() < 0 or raw.max() > 34):
        raise DataFormatError(f"azimuth code out of range: {raw.min()}..{raw.max()}")
    return raw * (20 if np.any(raw % 2) else 10)


def downsample2(images: np.ndarray) -> np.ndarray:
    """2x2 area averaging over the last two axes."""
    *lead, h, w = images.shape
    return images.reshape(*lead, h // 2, 2, w // 2, 2).mean(axis=(-3, -1))


def standardize(images: np.ndarray) -> np.ndarray:
    """Per-image zero mean / unit variance over all channels and pixels."""
    axes = tuple(range(1, images.ndim))
    mu = images.mean(axis=axes, keepdims=True)
    sd = images.std(axis=axes, keepdims=True)
    return (images - mu) / np.maximum(sd, 1e-8)


def load_smallnorb(dat_path, cat_path, info_path, normalize: bool = True, name: str = "smallnorb") -> Dataset:
    """Read a smallNORB split as 2-channel 48x48 stereo images.

    With ``normalize`` each image is standardised; otherwise pixels stay in
    [0, 1] so that the augmentation pipeline can jitter before standardising.
    """
    dat = _parse_norb(_read_bytes(dat_path), dat_path, NORB_BYTE_MAGIC)
    cat = _parse_norb(_read_bytes(cat_path), cat_path, NORB_INT_MAGIC).reshape(-1)
    info = _parse_norb(_read_bytes(info_path), info_path, NORB_INT_MAGIC)
    if dat.ndim != 4 or dat.shape[1] != 2:
        raise DataFormatError(f"{dat_path}: expected (N, 2, H, W) stereo pairs, got {dat.shape}")
    info = info.reshape(len(info), -1)
    if not (len(dat) == len(cat) == len(info)) or info.shape[1] != 4:
        raise CountMismatchError(
            f"inconsistent record counts: dat={len(dat)} cat={len(cat)} info={info.shape}")
    images = downsample2(dat.astype(np.float64) / 255.0)
    if normalize:
        images = standardize(images)
    meta = {
        "instance": info[:, 0].astype(np.int64),
        "elevation": info[:, 1].astype(np.int64),
        "azimuth": decode_azimuth(info[:, 2]).astype(np.int64),
        "lighting": info[:, 3].astype(np.int64),
    }
    return Dataset(images, cat.astype(np.int64), 5, meta, name)


# -- CIFAR-10 --------------------------------------------------------------------


def load_cifar10(batch_paths, name: str = "cifar10") -> Dataset:
    """Read CIFAR-10 binary batches (1 label byte + 3072 pixel bytes per record)."""
    bufs = []
    for p in batch_paths:
        buf = _read_bytes(p)
        if len(buf) == 0 or len(buf) % CIFAR_RECORD:
            raise TruncatedFileError(f"{p}: size {len(buf)} is not a multiple of {CIFAR_RECORD}")
        rec = np.frombuffer(buf, np.uint8).reshape(-1, CIFAR_RECORD)
        if rec[:, 0].max() > 9:
            raise DataFormatError(f"{p}: label byte {rec[:, 0].max()} out of range")
        bufs.append(rec)
    rec = np.concatenate(bufs)
    images = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return Dataset(images, rec[:, 0].astype(np.int64), 10, name=name)


# -- dataset directory layout ----------------------------------------------------

DATASETS = ("mnist", "fashion-mnist", "smallnorb", "cifar10")
NORB_TRAIN = "smallnorb-5x46789x9x18x6x2x96x96-training"
NORB_TEST = "smallnorb-5x01235x9x18x6x2x96x96-testing"


def data_root(data_dir=None) -> Path:
    return Path(data_dir or os.environ.get("DATA_DIR", "data"))


def load_dataset(name: str, split: str, data_dir=None, normalize: bool = True) -> Dataset:
    """Load ``split`` ('train' or 'test') of a named dataset from the data root.

    Layout: ``<root>/mnist/{train,t10k}-{images-idx3,labels-idx1}-ubyte[.gz]``
    (same for ``fashion-mnist``), ``<root>/smallnorb/<prefix>-{dat,cat,info}.mat``
    and ``<root>/cifar10/{data_batch_1..5,test_batch}.bin``.
    """
    root = data_root(data_dir)
    if split not in ("train", "test"):
        raise ValueError(f"unknown split {split!r}")
    if name in ("mnist", "fashion-mnist"):
        stem = "train" if split == "train" else "t10k"
        d = root / name
        return load_idx(d / f"{stem}-images-idx3-ubyte", d / f"{stem}-labels-idx1-ubyte", name=name)
    if name == "smallnorb":
        prefix = root / name / (NORB_TRAIN if split == "train" else NORB_TEST)
        return load_smallnorb(f"{prefix}-dat.mat", f"{prefix}-cat.mat", f"{prefix}-info.mat",
                              normalize=normalize)
    if name == "cifar10":
        d = root / name
        files = [d / f"data_batch_{i}.bin" for i in range(1, 6)] if split == "train" else [d / "test_batch.bin"]
        return load_cifar10(files)
    raise ValueError(f"unknown dataset {name!r}; known: {', '.join(DATASETS)}")


# -- augmentation ----------------------------------------------------------------


@dataclass(frozen=True)
class AugmentSpec:
    """Per-dataset train/eval transform recipe.

    ``eval_mode`` is ``"pad"`` (zero-pad to ``crop``), ``"center"`` (centre
    crop) or ``"none"``.  ``standardize`` applies per-image standardisation
    after jitter.
    """

    jitter_factor: float = 0.0
    pad: int = 0
    crop: tuple[int, int] | None = None
    hflip_p: float = 0.0
    eval_mode: str = "none"
    standardize: bool = False

    def __post_init__(self):
        if self.jitter_factor < 0:
            raise ValueError("jitter_factor must be >= 0")
        if not 0.0 <= self.hflip_p <= 1.0:
            raise ValueError("hflip_p must lie in [0, 1]")
        if self.eval_mode not in ("pad", "center", "none"):
            raise ValueError(f"unknown eval_mode {self.eval_mode!r}")


RECIPES = {
    "mnist": AugmentSpec(),
    "fashion-mnist": AugmentSpec(0.2, pad=4, crop=(32, 32), hflip_p=0.5, eval_mode="pad"),
    "smallnorb": AugmentSpec(0.2, pad=4, crop=(32, 32), eval_mode="center", standardize=True),
    "cifar10": AugmentSpec(0.2, pad=4, crop=(32, 32), hflip_p=0.5, eval_mode="none"),
}


def jitter_brightness_contrast(img: np.ndarray, factor: float, rng: np.random.Generator) -> np.ndarray:
    """``alpha * img + beta`` with random contrast and brightness, clamped to [0, 1]."""
    if factor < 0:
        raise ValueError("factor must be >= 0")
    if factor == 0:
        return img
    alpha = rng.uniform(1.0 - factor, 1.0 + factor)
    mu = float(img.mean())
    beta = rng.uniform(-factor * mu, factor * mu) if mu > 0 else 0.0
    return np.clip(alpha * img + beta, 0.0, 1.0)


def pad_crop_flip(img: np.ndarray, spec: AugmentSpec, rng: np.random.Generator | None,
                  train_mode: bool) -> np.ndarray:
    """Zero-pad, crop and optionally flip a ``(channels, H, W)`` image."""
    _, h, w = img.shape
    if train_mode:
        p = spec.pad
        if p:
            img = np.pad(img, ((0, 0), (p, p), (p, p)))
        if spec.crop is not None:
            ch, cw = spec.crop
            if ch > img.shape[1] or cw > img.shape[2]:
                raise ValueError(f"crop {spec.crop} larger than padded image {img.shape[1:]}")
            y = int(rng.integers(0, img.shape[1] - ch + 1))
            x = int(rng.integers(0, img.shape[2] - cw + 1))
            img = img[:, y:y + ch, x:x + cw]
        if spec.hflip_p > 0 and rng.random() < spec.hflip_p:
            img = img[:, :, ::-1]
        return img
    if spec.eval_mode == "none" or spec.crop is None:
        return img
    ch, cw = spec.crop
    if spec.eval_mode == "center":
        if ch > h or cw > w:
            raise ValueError(f"center crop {spec.crop} larger than image {(h, w)}")
        y, x = (h - ch) // 2, (w - cw) // 2
        return img[:, y:y + ch, x:x + cw]
    if ch < h or cw < w:
        raise ValueError(f"cannot pad {(h, w)} to smaller {spec.crop}")
    top, left = (ch - h) // 2, (cw - w) // 2
    return np.pad(img, ((0, 0), (top, ch - h - top), (left, cw - w - left)))


def item_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Independent stream per (seed, epoch, item) so workers cannot change results."""
    return np.random.default_rng([seed, epoch, index])


def transform_batch(images: np.ndarray, indices, spec: AugmentSpec, train_mode: bool,
                    seed: int = 0, epoch: int = 0) -> np.ndarray:
    out = []
    for img, idx in zip(images, indices):
        rng = item_rng(seed, epoch, int(idx)) if train_mode else None
        if train_mode and spec.jitter_factor > 0:
            img = jitter_brightness_contrast(img, spec.jitter_factor, rng)
        if spec.standardize:
            img = standardize(img[None])[0]
        out.append(pad_crop_flip(img, spec, rng, train_mode))
    return np.stack(out)


def output_geometry(geometry: tuple[int, int, int], spec: AugmentSpec) -> tuple[int, int, int]:
    """Image geometry seen by the network after the recipe's transforms."""
    h, w, c = geometry
    if spec.crop is None:
        return h, w, c
    return spec.crop[0], spec.crop[1], c


def validation_split(n: int, seed: int, fraction: float = 0.2) -> tuple[np.ndarray, np.ndarray]:
    """Seeded shuffle holding out ``fraction`` of the items; returns (train_idx, val_idx)."""
    perm = np.random.default_rng(seed).permutation(n)
    k = int(round(n * fraction))
    return np.sort(perm[k:]), np.sort(perm[:k])


# -- viewpoint generalisation ----------------------------------------------------


@dataclass
class ViewpointSplit:
    train: Dataset
    familiar_val: Dataset
    novel_test: Dataset
    unused_train: Dataset
    mode: str
    familiar: tuple[int, ...]


def viewpoint_split(train_set: Dataset, test_set: Dataset, mode: str = "azimuth") -> ViewpointSplit:
    """Split smallNORB by viewpoint.

    Training images at familiar viewpoints form ``train`` (the rest go to
    ``unused_train``); test images at familiar viewpoints form
    ``familiar_val`` and the rest ``novel_test``.
    """
    if mode == "azimuth":
        key, familiar = "azimuth", TRAIN_AZIMUTHS
    elif mode == "elevation":
        key, familiar = "elevation", TRAIN_ELEVATIONS
    else:
        raise ValueError(f"unknown viewpoint mode {mode!r}")
    for ds in (train_set, test_set):
        if key not in ds.meta:
            raise DataFormatError(f"dataset {ds.name!r} has no {key} metadata")
    tr = np.isin(train_set.meta[key], familiar)
    te = np.isin(test_set.meta[key], familiar)
    return ViewpointSplit(
        train=train_set.subset(np.flatnonzero(tr)),
        familiar_val=test_set.subset(np.flatnonzero(te)),
        novel_test=test_set.subset(np.flatnonzero(~te)),
        unused_train=train_set.subset(np.flatnonzero(~tr)),
        mode=mode,
        familiar=tuple(familiar),
    )
