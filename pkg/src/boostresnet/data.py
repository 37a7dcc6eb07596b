"""Datasets: IDX and CSV loaders, synthetic generators, standardization."""

import csv
import gzip
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .numkit import Rng

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DataFormatError(ValueError):
    """Malformed input file; ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset=None, path=None):
        where = f" at byte {offset}" if offset is not None else ""
        src = f"{path}: " if path is not None else ""
        super().__init__(f"{src}{message}{where}")
        self.offset = offset
        self.path = path


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    n_classes: int
    split: str = "train"
    shift: np.ndarray = None
    scale: np.ndarray = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.ndim != 2:
            raise ValueError("x must be 2-D")
        if self.y.shape != (self.x.shape[0],):
            raise ValueError("label count does not match example count")
        if self.x.shape[0] < 1:
            raise ValueError("dataset is empty")
        if self.y.min() < 0 or self.y.max() >= self.n_classes:
            raise ValueError(f"labels must lie in 0..{self.n_classes - 1}")

    @property
    def m(self):
        return self.x.shape[0]

    @property
    def n(self):
        return self.x.shape[1]

    def y_pm1(self):
        if self.n_classes != 2:
            raise ValueError("+-1 labels need a binary dataset")
        return 2.0 * self.y - 1.0

    def r_inf(self):
        return float(np.max(np.abs(self.x)))

    def normalization(self):
        if self.shift is None:
            return None
        return {"shift": self.shift.tolist(), "scale": self.scale.tolist()}


# ---------------------------------------------------------------------------
# IDX

def _read_bytes(path):
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw, magic, path):
    if len(raw) < 4:
        raise DataFormatError("truncated header", len(raw), path)
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise DataFormatError(f"bad magic number 0x{got:08x}, expected 0x{magic:08x}", 0, path)
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise DataFormatError("truncated dimension header", len(raw), path)
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    count = int(np.prod(dims))
    if len(raw) < head + count:
        raise DataFormatError(f"truncated data: need {count} bytes after header, have {len(raw) - head}",
                              len(raw), path)
    if len(raw) > head + count:
        raise DataFormatError("trailing bytes after data", head + count, path)
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=head).reshape(dims)


def read_idx_images(path):
    """uint8 array of shape (count, rows, cols)."""
    return _parse_idx(_read_bytes(path), IDX_IMAGES_MAGIC, str(path))


def read_idx_labels(path):
    return _parse_idx(_read_bytes(path), IDX_LABELS_MAGIC, str(path))


def load_idx(images_path, labels_path, split="train", n_classes=10):
    """MNIST-style IDX pair -> Dataset with pixels flattened and scaled to [0, 1]."""
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise DataFormatError(f"{images.shape[0]} images but {labels.shape[0]} labels",
                              4, str(labels_path))
    x = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return Dataset(x, labels.astype(np.int64), n_classes, split)


def write_idx(path, array, magic):
    """Write a uint8 array as IDX (used for fixtures and exports)."""
    array = np.asarray(array, dtype=np.uint8)
    header = struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.tobytes())


# ---------------------------------------------------------------------------
# CSV

def load_csv(path, split="train", n_classes=None):
    """CSV with header ``label,f0,f1,...``."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or not rows[0] or rows[0][0].strip() != "label":
        raise DataFormatError("first header column must be 'label'", 0, str(path))
    width = len(rows[0])
    labels, feats = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != width:
            raise DataFormatError(f"line {lineno} has {len(row)} fields, expected {width}", None, str(path))
        try:
            labels.append(int(row[0]))
            feats.append([float(v) for v in row[1:]])
        except ValueError as exc:
            raise DataFormatError(f"line {lineno}: {exc}", None, str(path)) from exc
    if not labels:
        raise DataFormatError("no data rows", None, str(path))
    y = np.array(labels, dtype=np.int64)
    x = np.array(feats, dtype=np.float64).reshape(len(labels), width - 1)
    if not np.all(np.isfinite(x)):
        raise DataFormatError("non-finite feature values", None, str(path))
    return Dataset(x, y, int(n_classes if n_classes is not None else y.max() + 1), split)


def save_csv(path, ds):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label"] + [f"f{j}" for j in range(ds.n)])
        for label, row in zip(ds.y, ds.x):
            w.writerow([int(label)] + [repr(float(v)) for v in row])


# ---------------------------------------------------------------------------
# synthetic generators

def _balanced_labels(rng, m, C):
    labels = np.arange(m) % C
    return labels[rng.permutation(m)]


def make_blobs(m, n=2, C=2, separation=6.0, seed=0):
    """Unit-variance Gaussian blobs whose centers are ``separation`` apart.

    Centers sit on a circle around the origin in the first two coordinates
    (on the first axis when n = 1 or C = 2), so classes are separable by
    linear scores without a bias term once separation is a few sigma.
    """
    if m < C:
        raise ValueError("need m >= C")
    if C < 2:
        raise ValueError("need at least two classes")
    rng = Rng(seed)
    centers = np.zeros((C, n))
    if C == 2 or n == 1:
        if C > 2:
            raise ValueError("more than two classes need n >= 2")
        centers[:, 0] = [-separation / 2.0, separation / 2.0]
    else:
        radius = separation / (2.0 * np.sin(np.pi / C))
        ang = 2.0 * np.pi * np.arange(C) / C
        centers[:, 0] = radius * np.cos(ang)
        centers[:, 1] = radius * np.sin(ang)
    labels = _balanced_labels(rng.spawn("labels"), m, C)
    x = centers[labels] + rng.spawn("noise").normal((m, n))
    return Dataset(x, labels, C, meta={"generator": "blobs", "separation": separation})


def make_xor(m, noise=0.2, seed=0):
    """Corners (+-1, +-1) with Gaussian noise; label 1 where the corner signs agree."""
    rng = Rng(seed)
    corner = _balanced_labels(rng.spawn("labels"), m, 4)
    sx = np.array([1.0, -1.0, 1.0, -1.0])[corner]
    sy = np.array([1.0, 1.0, -1.0, -1.0])[corner]
    x = np.stack([sx, sy], axis=1) + rng.spawn("noise").normal((m, 2), scale=noise)
    return Dataset(x, (sx * sy > 0).astype(np.int64), 2, meta={"generator": "xor", "noise": noise})


def make_circles(m, noise=0.1, seed=0, factor=0.5):
    """Two concentric circles (radius 1 and ``factor``); label 1 is the inner circle."""
    rng = Rng(seed)
    labels = _balanced_labels(rng.spawn("labels"), m, 2)
    theta = rng.spawn("angle").uniform(m, 0.0, 2.0 * np.pi)
    r = np.where(labels == 1, factor, 1.0)
    x = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
    x = x + rng.spawn("noise").normal((m, 2), scale=noise)
    return Dataset(x, labels, 2, meta={"generator": "circles", "noise": noise})


GENERATORS = {"blobs": make_blobs, "xor": make_xor, "circles": make_circles}


# ---------------------------------------------------------------------------
# preprocessing

def normalize(train, others=()):
    """Standardize features with statistics of ``train``; zero-variance features are left unchanged."""
    scale = train.x.std(axis=0)
    const = ~(scale > 0)
    shift = np.where(const, 0.0, train.x.mean(axis=0))
    scale = np.where(const, 1.0, scale)

    def apply(ds):
        x = (ds.x - shift) / scale
        if not np.all(np.isfinite(x)):
            raise ValueError("non-finite features after normalization")
        return replace(ds, x=x, shift=shift.copy(), scale=scale.copy())

    return apply(train), [apply(d) for d in others]


def apply_normalization(ds, record):
    shift = np.asarray(record["shift"], dtype=np.float64)
    scale = np.asarray(record["scale"], dtype=np.float64)
    return replace(ds, x=(ds.x - shift) / scale, shift=shift, scale=scale)


def train_test_split(ds, test_fraction=0.2, seed=0):
    """Disjoint random split."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must be in (0, 1)")
    perm = Rng(seed).spawn("split").permutation(ds.m)
    n_test = max(1, int(round(ds.m * test_fraction)))
    te, tr = np.sort(perm[:n_test]), np.sort(perm[n_test:])
    return (replace(ds, x=ds.x[tr], y=ds.y[tr], split="train"),
            replace(ds, x=ds.x[te], y=ds.y[te], split="test"))


def select_classes(ds, classes, per_class=None, seed=0):
    """Keep the listed classes (relabelled 0..len-1 in the given order), capped per class.

    The cap keeps the first ``per_class`` examples of each class in a seeded
    random order.
    """
    classes = list(classes)
    rng = Rng(seed).spawn("subset")
    keep = []
    for c in classes:
        idx = np.flatnonzero(ds.y == c)
        if per_class is not None:
            idx = np.sort(idx[rng.permutation(idx.size)][:per_class])
        keep.append(idx)
    idx = np.sort(np.concatenate(keep))
    remap = {c: i for i, c in enumerate(classes)}
    y = np.array([remap[int(v)] for v in ds.y[idx]], dtype=np.int64)
    return replace(ds, x=ds.x[idx], y=y, n_classes=len(classes))
