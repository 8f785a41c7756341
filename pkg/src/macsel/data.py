"""Datasets: IDX / CSV readers and writers plus two synthetic generators.

Features are float arrays scaled to ``[0, 1]``; every sample carries a split tag
(``"train"`` or ``"test"``).
"""
from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ParseError

_IDX_DTYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_IDX_CODES = {np.dtype(v).newbyteorder("=").kind + str(np.dtype(v).itemsize): k for k, v in _IDX_DTYPES.items()}


@dataclass
class Dataset:
    features: np.ndarray  # (n, d) float64
    labels: np.ndarray  # (n,) int64
    split: np.ndarray  # (n,) "train" / "test"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.split = np.asarray(self.split, dtype="<U5")
        if self.features.ndim != 2 or len(self.features) != len(self.labels) or len(self.split) != len(self.labels):
            raise ParseError(f"inconsistent dataset shapes {self.features.shape}, {self.labels.shape}, {self.split.shape}")
        if not np.isfinite(self.features).all():
            raise ParseError("dataset features contain non-finite values")
        if len(self.labels) and self.labels.min() < 0:
            raise ParseError("dataset labels must be non-negative")

    def __len__(self):
        return len(self.labels)

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def subset(self, tag: str) -> "Dataset":
        m = self.split == tag
        return Dataset(self.features[m], self.labels[m], self.split[m])

    @property
    def train(self) -> "Dataset":
        return self.subset("train")

    @property
    def test(self) -> "Dataset":
        return self.subset("test")

    def head(self, n: int) -> "Dataset":
        return Dataset(self.features[:n], self.labels[:n], self.split[:n])

    def with_holdout(self, fraction: float, seed: int = 0) -> "Dataset":
        """Re-tag a random ``fraction`` of samples as test (used when a file has no split)."""
        rng = np.random.default_rng(seed)
        split = np.full(len(self), "train", dtype="<U5")
        split[rng.permutation(len(self))[: int(round(fraction * len(self)))]] = "test"
        return Dataset(self.features, self.labels, split)


def _open(path: Path):
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx(path) -> np.ndarray:
    path = Path(path)
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise ParseError(f"{path}: byte 0: file too short for an IDX header ({len(raw)} bytes)")
    if raw[0] != 0 or raw[1] != 0:
        raise ParseError(f"{path}: byte 0: bad IDX magic {raw[:4].hex()}")
    code, ndim = raw[2], raw[3]
    if code not in _IDX_DTYPES:
        raise ParseError(f"{path}: byte 2: unknown IDX element type 0x{code:02x}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise ParseError(f"{path}: byte 4: header declares {ndim} dimensions but file ends at byte {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    dtype = _IDX_DTYPES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    actual = len(raw) - header
    if actual != expected:
        raise ParseError(f"{path}: byte {header}: payload of {dims} needs {expected} bytes, found {actual}")
    return np.frombuffer(raw, dtype=dtype, offset=header).reshape(dims).astype(dtype.newbyteorder("="))


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    key = array.dtype.kind + str(array.dtype.itemsize)
    if array.dtype == np.uint8:
        code = 0x08
    elif key in _IDX_CODES:
        code = _IDX_CODES[key]
    else:
        raise ValueError(f"dtype {array.dtype} has no IDX encoding")
    header = bytes([0, 0, code, array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
    payload = array.astype(_IDX_DTYPES[code]).tobytes()
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "wb") as fh:
        fh.write(header + payload)


def _labels_path_for(images: Path) -> Path | None:
    name = images.name
    for a, b in (("images", "labels"), ("idx3", "idx1")):
        if a in name:
            name = name.replace(a, b)
    cand = images.with_name(name)
    return cand if cand != images and cand.exists() else None


def _from_idx(images: Path, labels: Path | None, tag: str) -> Dataset:
    x = read_idx(images)
    if labels is None:
        raise ParseError(f"{images}: no matching labels file found next to it")
    y = read_idx(labels).astype(np.int64).reshape(-1)
    if len(y) != len(x):
        raise ParseError(f"{labels}: {len(y)} labels for {len(x)} images")
    feats = x.reshape(len(x), -1).astype(np.float64)
    scale = 255.0 if x.dtype == np.uint8 else max(float(np.abs(feats).max()), 1.0)
    return Dataset(feats / scale, y, np.full(len(y), tag))


def _from_csv(path: Path) -> Dataset:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if not header or header[0] != "label":
            raise ParseError(f"{path}: line 1: header must start with 'label', got {header[:1]}")
        has_split = header[-1] == "split"
        width = len(header) - 1 - has_split
        feats, labels, split = [], [], []
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            cells = line.split(",")
            if len(cells) != len(header):
                raise ParseError(f"{path}: line {lineno}: expected {len(header)} fields, got {len(cells)}")
            try:
                labels.append(int(cells[0]))
                feats.append([float(c) for c in cells[1 : 1 + width]])
            except ValueError as exc:
                raise ParseError(f"{path}: line {lineno}: {exc}") from None
            split.append(cells[-1] if has_split else "train")
    return Dataset(np.array(feats, dtype=np.float64).reshape(len(labels), width), np.array(labels), np.array(split))


def load_dataset(path, format: str | None = None, labels_path=None) -> Dataset:
    """Load a dataset from an IDX image file, a directory of IDX files, or a CSV file.

    A directory is searched for ``train-images*``/``t10k-images*``/``test-images*``
    IDX files with matching label files; those samples are tagged by split.
    CSV files carry the header ``label,f0,f1,...`` with an optional trailing
    ``split`` column.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset not found: {path}")
    if path.is_dir():
        parts = []
        for prefix, tag in (("train-images", "train"), ("t10k-images", "test"), ("test-images", "test")):
            for f in sorted(path.glob(prefix + "*")):
                parts.append(_from_idx(f, _labels_path_for(f), tag))
        if not parts:
            raise ParseError(f"{path}: no IDX image files found")
        return Dataset(
            np.concatenate([p.features for p in parts]),
            np.concatenate([p.labels for p in parts]),
            np.concatenate([p.split for p in parts]),
        )
    fmt = format or ("csv" if path.suffix == ".csv" else "idx")
    if fmt == "csv":
        return _from_csv(path)
    if fmt == "idx":
        return _from_idx(path, Path(labels_path) if labels_path else _labels_path_for(path), "train")
    raise ParseError(f"unknown dataset format {fmt!r}")


def save_idx_dataset(ds: Dataset, directory) -> None:
    """Write ``train-images-idx3-ubyte`` etc. (28x28 uint8 when the width allows)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    side = int(round(np.sqrt(ds.features.shape[1])))
    for tag, prefix in (("train", "train"), ("test", "t10k")):
        sub = ds.subset(tag)
        imgs = np.clip(np.rint(sub.features * 255), 0, 255).astype(np.uint8)
        if side * side == imgs.shape[1]:
            imgs = imgs.reshape(-1, side, side)
        write_idx(directory / f"{prefix}-images-idx3-ubyte", imgs)
        write_idx(directory / f"{prefix}-labels-idx1-ubyte", sub.labels.astype(np.uint8))


def make_blobs(n: int = 2000, n_features: int = 16, n_classes: int = 2, spread: float = 0.05, seed: int = 0,
               test_fraction: float = 0.2) -> Dataset:
    """Gaussian blobs with centres drawn in ``[0.2, 0.8]^d`` and features clipped to ``[0, 1]``."""
    rng = np.random.default_rng(seed)
    centres = rng.uniform(0.2, 0.8, size=(n_classes, n_features))
    y = rng.integers(0, n_classes, n)
    x = np.clip(centres[y] + rng.normal(0.0, spread, size=(n, n_features)), 0.0, 1.0)
    split = np.where(rng.random(n) < test_fraction, "test", "train")
    return Dataset(x, y, split)


def make_digits(n: int = 10000, seed: int = 0, test_fraction: float = 0.2) -> Dataset:
    """A 28x28 handwritten-digit set grown from scikit-learn's 8x8 digits.

    Each sample is a base digit upsampled to 24x24, padded to 28x28, then
    randomly rotated, scaled, shifted, and speckled with noise. Base images are
    split between train and test before augmentation so no test sample shares
    a source image with a training sample.
    """
    from scipy import ndimage
    from sklearn.datasets import load_digits

    base = load_digits()
    imgs = base.images / 16.0
    labels = base.target
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(imgs))
    n_test_base = int(round(test_fraction * len(imgs)))
    test_base, train_base = order[:n_test_base], order[n_test_base:]
    n_test = int(round(test_fraction * n))

    out = np.empty((n, 28, 28))
    y = np.empty(n, dtype=np.int64)
    split = np.empty(n, dtype="<U5")
    for i in range(n):
        is_test = i < n_test
        src = rng.choice(test_base if is_test else train_base)
        img = ndimage.zoom(imgs[src], 3.0, order=1)
        img = np.pad(img, 2)
        angle = rng.uniform(-12, 12)
        img = ndimage.rotate(img, angle, reshape=False, order=1)
        s = rng.uniform(0.9, 1.1)
        c = np.array(img.shape) / 2
        img = ndimage.affine_transform(img, np.eye(2) / s, offset=c - c / s, order=1)
        img = ndimage.shift(img, rng.uniform(-2, 2, size=2), order=1)
        img = img + rng.normal(0, 0.05, img.shape)
        out[i] = np.clip(img, 0.0, 1.0)
        y[i] = labels[src]
        split[i] = "test" if is_test else "train"
    perm = rng.permutation(n)
    # store as 8-bit pixels so the set round-trips through IDX unchanged
    feats = np.rint(out[perm].reshape(n, -1) * 255) / 255
    return Dataset(feats, y[perm], split[perm])


def default_data_dir() -> Path:
    return Path(os.environ.get("MACSEL_DATA", Path.home() / ".cache" / "macsel" / "digits"))
