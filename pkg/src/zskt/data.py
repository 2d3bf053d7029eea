"""Desk-scale datasets: 2-d toy blobs, IDX image files, and a synthetic
glyph set in MNIST layout.

A Dataset is an immutable-by-convention bundle of float64 inputs, integer
labels, a split tag and normalization bookkeeping. Image datasets flow
through real IDX files (big-endian, magics 0x00000803 / 0x00000801) so the
format guards and round-trip behavior are exercised by every run.

The glyph set stands in for MNIST at desk scale: ten fixed 8x8 binary
templates, randomly shifted by up to one pixel and corrupted with Gaussian
noise, quantized to uint8. Classes are well separated, so a small classifier
reaches the high test accuracy the image-data experiments assume.
"""

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (BadMagicError, CountMismatchError, DataError,
                     TruncatedFileError)

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


@dataclass
class Dataset:
    """Inputs (n x input-shape, float64), labels (n,), split tag, norm state."""

    inputs: np.ndarray
    labels: np.ndarray
    classes: int
    split: str = "train"
    norm_stats: tuple = None
    normalized: bool = False

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.inputs) != len(self.labels):
            raise DataError(f"dataset: {len(self.inputs)} inputs vs {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise DataError(f"dataset: labels must lie in [0, {self.classes - 1}]")
        if not np.all(np.isfinite(self.inputs)):
            raise DataError("dataset: inputs must be finite")

    def __len__(self):
        return len(self.labels)

    @property
    def input_shape(self):
        return self.inputs.shape[1:]


def make_toy_blobs(classes, n_per_class, spread, seed):
    """Gaussian blobs at distinct centers on the unit circle, 80/20 split.

    Returns (train, test), stratified so both splits stay class-balanced.
    """
    if classes < 2:
        raise DataError(f"make_toy_blobs: need classes >= 2, got {classes}")
    if n_per_class < 5:
        raise DataError(f"make_toy_blobs: need n_per_class >= 5, got {n_per_class}")
    if spread < 0:
        raise DataError(f"make_toy_blobs: spread must be >= 0, got {spread}")
    rng = np.random.default_rng(seed)
    angles = 2.0 * np.pi * np.arange(classes) / classes
    centers = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    n_test = max(1, n_per_class // 5)
    n_train = n_per_class - n_test
    xs_train, ys_train, xs_test, ys_test = [], [], [], []
    for c in range(classes):
        pts = centers[c] + spread * rng.standard_normal((n_per_class, 2))
        xs_train.append(pts[:n_train])
        ys_train.append(np.full(n_train, c))
        xs_test.append(pts[n_train:])
        ys_test.append(np.full(n_test, c))
    train = Dataset(np.concatenate(xs_train), np.concatenate(ys_train), classes, split="train")
    test = Dataset(np.concatenate(xs_test), np.concatenate(ys_test), classes, split="test")
    return train, test


def _read_exact(fh, n, path):
    buf = fh.read(n)
    if len(buf) != n:
        raise TruncatedFileError(f"{path}: expected {n} more bytes, got {len(buf)}")
    return buf


def _read_idx_array(path, expect_magic):
    with open(path, "rb") as fh:
        magic = struct.unpack(">I", _read_exact(fh, 4, path))[0]
        if magic != expect_magic:
            raise BadMagicError(f"{path}: magic 0x{magic:08x} != 0x{expect_magic:08x}")
        ndim = magic & 0xFF
        dims = struct.unpack(f">{ndim}I", _read_exact(fh, 4 * ndim, path))
        count = int(np.prod(dims))
        raw = _read_exact(fh, count, path)
        if fh.read(1):
            raise TruncatedFileError(f"{path}: trailing bytes after declared payload")
    return np.frombuffer(raw, dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path):
    """Load an IDX image/label pair; pixels are scaled to [0, 1]."""
    images = _read_idx_array(images_path, IDX_IMAGE_MAGIC)
    labels = _read_idx_array(labels_path, IDX_LABEL_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise CountMismatchError(
            f"{images_path}: {images.shape[0]} images vs {labels.shape[0]} labels")
    n, h, w = images.shape
    inputs = images.astype(np.float64).reshape(n, 1, h, w) / 255.0
    classes = int(labels.max()) + 1 if n else 0
    return Dataset(inputs, labels.astype(np.int64), classes)


def save_idx(ds, images_path, labels_path):
    """Write a dataset back to IDX; requires unnormalized [0,1] pixel inputs."""
    if ds.normalized:
        raise DataError("save_idx: refusing to quantize a normalized dataset")
    x = ds.inputs
    if x.ndim != 4 or x.shape[1] != 1:
        raise DataError(f"save_idx: need n x 1 x h x w inputs, got {x.shape}")
    if x.min() < 0 or x.max() > 1:
        raise DataError("save_idx: pixel values must lie in [0, 1]")
    pixels = np.rint(x[:, 0] * 255.0).astype(np.uint8)
    n, h, w = pixels.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, n, h, w))
        fh.write(pixels.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABEL_MAGIC, n))
        fh.write(ds.labels.astype(np.uint8).tobytes())


def normalize(ds, stats):
    """Per-channel (x - mean) / std; refuses to run twice on the same data."""
    if ds.normalized:
        raise DataError("normalize: dataset is already normalized")
    mean, std = (np.atleast_1d(np.asarray(s, dtype=np.float64)) for s in stats)
    if np.any(std <= 0) or not (np.all(np.isfinite(mean)) and np.all(np.isfinite(std))):
        raise DataError(f"normalize: need finite stats with std > 0, got {stats}")
    if ds.inputs.ndim == 4:
        shape = (1, -1, 1, 1)
    elif ds.inputs.ndim == 2:
        shape = (1, -1)
    else:
        raise DataError(f"normalize: unsupported input rank {ds.inputs.ndim}")
    x = (ds.inputs - mean.reshape(shape)) / std.reshape(shape)
    return replace(ds, inputs=x, norm_stats=(mean.copy(), std.copy()), normalized=True)


def few_shot_subset(ds, m, seed):
    """Exactly m samples per class, without replacement, deterministic."""
    if m < 1:
        raise DataError(f"few_shot_subset: need m >= 1, got {m}")
    rng = np.random.default_rng(seed)
    picks = []
    for c in range(ds.classes):
        idx = np.flatnonzero(ds.labels == c)
        if len(idx) < m:
            raise DataError(f"few_shot_subset: class {c} has {len(idx)} < {m} samples")
        picks.append(rng.choice(idx, size=m, replace=False))
    order = np.sort(np.concatenate(picks))
    return replace(ds, inputs=ds.inputs[order].copy(), labels=ds.labels[order].copy())


def save_toy_csv(ds, path):
    """Toy points as (x, y, label) rows."""
    if ds.inputs.ndim != 2 or ds.inputs.shape[1] != 2:
        raise DataError(f"save_toy_csv: need n x 2 inputs, got {ds.inputs.shape}")
    with open(path, "w") as fh:
        fh.write("x,y,label\n")
        for (x, y), lab in zip(ds.inputs, ds.labels):
            fh.write(f"{x!r},{y!r},{int(lab)}\n")


# ---------------------------------------------------------------------------
# synthetic glyph images (MNIST layout at 8x8)

def _glyph_templates():
    """Ten fixed 8x8 binary patterns, one per class."""
    t = np.zeros((10, 8, 8))
    t[0, 1:7, 1:7] = 1; t[0, 3:5, 3:5] = 0                 # ring
    t[1, 1:7, 3:5] = 1                                     # vertical bar
    t[2, 3:5, 1:7] = 1                                     # horizontal bar
    for i in range(8):
        t[3, i, i] = 1                                     # main diagonal
        t[4, i, 7 - i] = 1                                 # anti-diagonal
    t[5, 1:7, 3:5] = 1; t[5, 3:5, 1:7] = 1                 # cross
    for i in range(8):
        t[6, i, i] = 1; t[6, i, 7 - i] = 1                 # X
    t[7, 4:, :] = 1                                        # lower half
    t[8, ::2, ::2] = 1; t[8, 1::2, 1::2] = 1               # checkerboard
    t[9, :3, :3] = 1; t[9, :3, 5:] = 1; t[9, 5:, :3] = 1; t[9, 5:, 5:] = 1  # corners
    return t


def make_glyphs(n_per_class, seed, jitter=1, noise_sigma=0.12):
    """Synthetic 8x8 glyph images: shifted noisy templates, uint8 quantized.

    Returns (images uint8 n x 8 x 8, labels n,) interleaved class order.
    """
    if n_per_class < 1:
        raise DataError(f"make_glyphs: need n_per_class >= 1, got {n_per_class}")
    rng = np.random.default_rng(seed)
    templates = _glyph_templates()
    n = 10 * n_per_class
    images = np.zeros((n, 8, 8))
    labels = np.zeros(n, dtype=np.int64)
    for k in range(n):
        c = k % 10
        img = templates[c]
        if jitter:
            dy, dx = rng.integers(-jitter, jitter + 1, size=2)
            img = np.roll(np.roll(img, dy, axis=0), dx, axis=1)
        img = img + noise_sigma * rng.standard_normal((8, 8))
        images[k] = np.clip(img, 0.0, 1.0)
        labels[k] = c
    return np.rint(images * 255.0).astype(np.uint8), labels


def write_glyph_idx(out_dir, n_train_per_class=200, n_test_per_class=40, seed=0,
                    jitter=1, noise_sigma=0.12):
    """Materialize the glyph set as four IDX files; returns the path pairs."""
    import os
    os.makedirs(out_dir, exist_ok=True)
    paths = {}
    for split, n_pc, sd in (("train", n_train_per_class, seed),
                            ("test", n_test_per_class, seed + 1)):
        images, labels = make_glyphs(n_pc, sd, jitter=jitter, noise_sigma=noise_sigma)
        ip = os.path.join(out_dir, f"{split}-images-idx3-ubyte")
        lp = os.path.join(out_dir, f"{split}-labels-idx1-ubyte")
        ds = Dataset(images.astype(np.float64).reshape(-1, 1, 8, 8) / 255.0,
                     labels, 10, split=split)
        save_idx(ds, ip, lp)
        paths[split] = (ip, lp)
    return paths


def minibatches(ds, batch, rng):
    """Shuffled minibatch index stream over one epoch; deterministic from rng."""
    order = rng.permutation(len(ds))
    for start in range(0, len(ds), batch):
        yield order[start:start + batch]
