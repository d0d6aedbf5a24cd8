"""Datasets: toy 2-D clusters, the bundled 8x8 digits, IDX files, synthetic OOD."""

from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import FormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
DEFAULT_SCALE_GRID = (0.5, 1.0, 2.0, 5.0, 10.0)


@dataclass
class LabeledDataset:
    """Normalized inputs with index splits.

    ``splits`` maps a split name to row indices; ``normalization`` records the
    divisor applied to raw intensities so the transform can be reproduced.
    """

    inputs: np.ndarray
    labels: np.ndarray
    splits: dict = field(default_factory=dict)
    split_seed: int = None
    normalization: dict = field(default_factory=dict)
    n_classes: int = None

    def __post_init__(self):
        if self.n_classes is None:
            self.n_classes = int(self.labels.max()) + 1 if len(self.labels) else 0

    @property
    def input_dim(self):
        return self.inputs.shape[1]

    def split(self, name):
        idx = self.splits[name]
        return self.inputs[idx], self.labels[idx]

    def manifest(self):
        return {
            "n_rows": int(len(self.labels)),
            "input_dim": int(self.input_dim),
            "n_classes": int(self.n_classes),
            "split_sizes": {k: int(len(v)) for k, v in self.splits.items()},
            "split_seed": self.split_seed,
            "normalization": self.normalization,
        }


def normalize(raw, max_value):
    """Scale raw intensities to [0, 1]; already-normalized data passes through."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.size and raw.max() <= 1.0:
        return raw
    return raw / float(max_value)


def make_toy2d(rng, n_per_class=10, center=1.5, spread=0.3):
    """Two Gaussian blobs at (-c, -c) (class 0) and (c, c) (class 1)."""
    centers = np.array([[-center, -center], [center, center]])
    x = np.concatenate([rng.normal(centers[k], spread, size=(n_per_class, 2)) for k in range(2)])
    y = np.repeat([0, 1], n_per_class)
    idx = np.arange(len(y))
    return LabeledDataset(x, y, {"train": idx}, None, {"centers": centers.tolist(), "spread": spread}, 2)


def stratified_order(labels, rng):
    """Permutation that interleaves the classes proportionally."""
    keys = np.empty(len(labels))
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        rng.shuffle(members)
        keys[members] = (np.arange(len(members)) + rng.random()) / len(members)
    return np.lexsort((np.arange(len(labels)), keys))


def split_sizes(n, fractions=(0.6, 0.2, 0.2)):
    """Train gets floor(0.6 n), validation floor(0.2 n), test the rest."""
    n_train = int(np.floor(fractions[0] * n))
    n_val = int(np.floor(fractions[1] * n))
    return n_train, n_val, n - n_train - n_val


def stratified_split(labels, seed):
    order = stratified_order(labels, np.random.default_rng(seed))
    n_train, n_val, _ = split_sizes(len(labels))
    return {
        "train": np.sort(order[:n_train]),
        "val": np.sort(order[n_train:n_train + n_val]),
        "test": np.sort(order[n_train + n_val:]),
    }


def _digits_path():
    return resources.files("apd") / "data" / "digits.csv"


def load_digits_csv(path=None, split_seed=0):
    """8x8 digits: 64 intensities in 0..16 then the label, one row per line."""
    path = Path(path) if path is not None else _digits_path()
    rows, labels = [], []
    with open(path, newline="") as f:
        for lineno, row in enumerate(csv.reader(f), start=1):
            if not row:
                continue
            if len(row) != 65:
                raise FormatError(f"{path}:{lineno}: expected 65 fields, got {len(row)}")
            try:
                vals = [int(v) for v in row]
            except ValueError:
                raise FormatError(f"{path}:{lineno}: non-integer field") from None
            if min(vals[:64]) < 0 or max(vals[:64]) > 16:
                raise FormatError(f"{path}:{lineno}: intensity outside 0..16")
            rows.append(vals[:64])
            labels.append(vals[64])
    x = np.asarray(rows, dtype=np.float64) / 16.0
    y = np.asarray(labels, dtype=np.int64)
    return LabeledDataset(x, y, stratified_split(y, split_seed), split_seed, {"divisor": 16.0}, 10)


def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx(path, expected_magic):
    with _open(path) as f:
        buf = f.read()
    if len(buf) < 4:
        raise FormatError(f"{path}: too short for an IDX header")
    (magic,) = struct.unpack(">I", buf[:4])
    if magic != expected_magic:
        raise FormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise FormatError(f"{path}: truncated dimension header")
    dims = struct.unpack(f">{ndim}I", buf[4:header])
    n = int(np.prod(dims))
    if len(buf) - header < n:
        raise FormatError(f"{path}: payload has {len(buf) - header} bytes, dims {dims} need {n}")
    return np.frombuffer(buf, dtype=np.uint8, count=n, offset=header).reshape(dims)


def load_idx(images_path, labels_path, split_seed=0, n_val=None):
    """MNIST-format files; images are flattened and divided by 255.

    With ``n_val`` the last ``n_val`` rows form a validation split and the
    rest are training data; otherwise everything is ``"test"``.
    """
    images = read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    x = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    y = labels.astype(np.int64)
    n = len(y)
    if n_val:
        splits = {"train": np.arange(n - n_val), "val": np.arange(n - n_val, n)}
    else:
        splits = {"test": np.arange(n)}
    return LabeledDataset(x, y, splits, split_seed, {"divisor": 255.0, "image_shape": list(images.shape[1:])}, 10)


def write_idx(path, array, magic):
    """Inverse of :func:`read_idx` for uint8 data (used by tests and fixtures)."""
    array = np.asarray(array, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        f.write(struct.pack(f">{array.ndim}I", *array.shape))
        f.write(array.tobytes())


# --------------------------------------------------------------------------
# out-of-distribution inputs


@dataclass
class OodSpec:
    kind: str = "gaussian_noise"
    scale_factor: float = 5.0
    count: int = 360
    seed: int = 0
    source: np.ndarray = None  # external_corpus rows, already in [0, 1]


def gen_ood(spec, input_dim):
    """Synthetic OOD rows, multiplied by ``scale_factor`` after generation.

    gaussian_noise: N(0.5, 1) clipped to [0, 1]; uniform_noise: U(0, 1);
    external_corpus: the first ``count`` rows of ``spec.source``.
    """
    if spec.scale_factor <= 0:
        raise ValueError("scale_factor must be positive")
    rng = np.random.default_rng(spec.seed)
    if spec.kind == "gaussian_noise":
        base = np.clip(rng.normal(0.5, 1.0, size=(spec.count, input_dim)), 0.0, 1.0)
    elif spec.kind == "uniform_noise":
        base = rng.random((spec.count, input_dim))
    elif spec.kind == "external_corpus":
        if spec.source is None:
            raise ValueError("external_corpus needs source rows")
        base = np.asarray(spec.source, dtype=np.float64)[: spec.count]
        if base.shape[1] != input_dim:
            raise ValueError(f"external rows have {base.shape[1]} features, expected {input_dim}")
    else:
        raise ValueError(f"unknown OOD kind {spec.kind!r}")
    return base * spec.scale_factor if spec.scale_factor != 1 else base


def scale_sweep(base, factors=DEFAULT_SCALE_GRID):
    """One scaled copy of ``base`` per factor; factor 1 returns ``base`` itself."""
    out = []
    for f in factors:
        if f <= 0:
            raise ValueError(f"non-positive scale factor {f}")
        out.append(base if f == 1 else base * f)
    return out
