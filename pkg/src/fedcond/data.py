"""Dataset ingestion and generation.

Covers IDX-format image/label files (MNIST, Fashion-MNIST), a seeded
Gaussian-cluster generator for fast synthetic tests, and a seeded procedural
glyph-digit generator (28x28, 10 classes) used as a desk-scale stand-in when
the real IDX files are not available locally. Pixels are always scaled to
[0, 1] by dividing by 255; no mean/std standardization is applied.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxError(ValueError):
    """Base for malformed IDX input."""


class IdxMagicError(IdxError):
    """File does not start with the expected IDX magic number."""


class IdxTruncatedError(IdxError):
    """File ends before the payload its header promises."""


class IdxCountMismatchError(IdxError):
    """Image count and label count disagree."""


@dataclass(frozen=True)
class Sample:
    """One input vector (values in [0, 1]) and its integer class label."""

    x: np.ndarray
    y: int


@dataclass
class Dataset:
    """A labelled dataset stored columnar: X is (n, d) with rows in [0, 1]."""

    name: str
    X: np.ndarray
    y: np.ndarray
    class_count: int
    input_shape: tuple[int, ...]

    def __post_init__(self):
        self.X = np.ascontiguousarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim != 2 or self.X.shape[0] != self.y.shape[0]:
            raise ValueError(f"X/y shape mismatch: {self.X.shape} vs {self.y.shape}")
        if self.X.shape[1] != int(np.prod(self.input_shape)):
            raise ValueError(f"row width {self.X.shape[1]} != prod{self.input_shape}")
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.class_count):
            raise ValueError("label outside [0, class_count)")

    def __len__(self) -> int:
        return self.X.shape[0]

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.X[i], int(self.y[i]))

    def take(self, idx: np.ndarray, name: str | None = None) -> "Dataset":
        return Dataset(name or self.name, self.X[idx], self.y[idx],
                       self.class_count, self.input_shape)

    def with_labels(self, y: np.ndarray, class_count: int) -> "Dataset":
        return Dataset(self.name, self.X, y, class_count, self.input_shape)


@dataclass(frozen=True)
class DatasetPair:
    """Official train/test splits of one dataset."""

    train: Dataset
    test: Dataset

    def __post_init__(self):
        if self.train.class_count != self.test.class_count:
            raise ValueError("train/test class_count disagree")
        if tuple(self.train.input_shape) != tuple(self.test.input_shape):
            raise ValueError("train/test input_shape disagree")


@dataclass(frozen=True)
class FeatureExtractor:
    """Feature map applied to inputs before fingerprinting.

    Only the identity extractor is implemented; the hook exists so a learned
    encoder can slot in for high-dimensional inputs later.
    """

    kind: str = "identity"
    output_dim: int = 0

    def for_dataset(self, dataset: Dataset) -> "FeatureExtractor":
        if self.kind != "identity":
            raise NotImplementedError(f"extractor kind {self.kind!r}")
        return FeatureExtractor("identity", dataset.X.shape[1])

    def apply(self, X: np.ndarray) -> np.ndarray:
        if self.kind != "identity":
            raise NotImplementedError(f"extractor kind {self.kind!r}")
        return X


# --------------------------------------------------------------------------
# IDX ingestion
# --------------------------------------------------------------------------

def _read_idx(path: Path, expected_magic: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise IdxTruncatedError(f"{path}: shorter than a magic number")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise IdxMagicError(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise IdxTruncatedError(f"{path}: truncated dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:header_len])
    count = int(np.prod(dims))
    if len(raw) < header_len + count:
        raise IdxTruncatedError(f"{path}: header promises {count} bytes, "
                                f"file holds {len(raw) - header_len}")
    data = np.frombuffer(raw, dtype=np.uint8, count=count, offset=header_len)
    return data.reshape(dims)


def load_idx(images_path, labels_path, name: str = "idx") -> Dataset:
    """Load an IDX image/label file pair into a Dataset (pixels / 255)."""
    images = _read_idx(Path(images_path), IDX_IMAGES_MAGIC)
    labels = _read_idx(Path(labels_path), IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise IdxCountMismatchError(
            f"{images.shape[0]} images vs {labels.shape[0]} labels")
    n, h, w = images.shape
    X = images.reshape(n, h * w).astype(np.float64) / 255.0
    y = labels.astype(np.int64)
    class_count = int(y.max()) + 1 if n else 0
    return Dataset(name, X, y, class_count, (h, w))


def write_idx(dataset: Dataset, images_path, labels_path) -> None:
    """Write a Dataset back out as an IDX pair (pixels quantized to bytes)."""
    h, w = dataset.input_shape[-2], dataset.input_shape[-1]
    n = len(dataset)
    pixels = np.clip(np.rint(dataset.X * 255.0), 0, 255).astype(np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w))
        f.write(pixels.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        f.write(dataset.y.astype(np.uint8).tobytes())


def load_idx_pair(root, train_images, train_labels, test_images, test_labels,
                  name: str) -> DatasetPair:
    root = Path(root)
    return DatasetPair(
        train=load_idx(root / train_images, root / train_labels, name=name),
        test=load_idx(root / test_images, root / test_labels, name=name),
    )


MNIST_FILES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte",
               "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")


def load_mnist_like(root, name: str = "mnist") -> DatasetPair:
    """Load MNIST or Fashion-MNIST from the conventional four IDX files."""
    return load_idx_pair(root, *MNIST_FILES, name=name)


# --------------------------------------------------------------------------
# synthetic Gaussian clusters
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class GaussianClusterSpec:
    """One synthetic cluster: isotropic Gaussian around `mean`, labelled by
    `label_rule(x) -> y`."""

    mean: tuple[float, ...]
    cov_scale: float
    label_rule: "callable"


def synth_clusters(cluster_specs: list[GaussianClusterSpec], n_per_cluster: int,
                   seed: int, class_count: int,
                   name: str = "synth") -> tuple[Dataset, np.ndarray]:
    """Seeded Gaussian-cluster dataset; returns (dataset, cluster id per row).

    Draws are clipped into [0, 1] after an affine squash so the Dataset pixel
    invariant holds; label rules see the squashed values.
    """
    if not cluster_specs:
        raise ValueError("need at least one cluster spec")
    dim = len(cluster_specs[0].mean)
    rng = np.random.default_rng(seed)
    xs, ys, cids = [], [], []
    for cid, spec in enumerate(cluster_specs):
        if spec.cov_scale <= 0:
            raise ValueError(f"cluster {cid}: cov_scale must be > 0")
        if len(spec.mean) != dim:
            raise ValueError("cluster mean dimensions disagree")
        pts = rng.normal(loc=spec.mean, scale=np.sqrt(spec.cov_scale),
                         size=(n_per_cluster, dim))
        pts = np.clip(0.5 + 0.25 * pts, 0.0, 1.0)
        labels = np.array([spec.label_rule(p) for p in pts], dtype=np.int64)
        xs.append(pts)
        ys.append(labels)
        cids.append(np.full(n_per_cluster, cid, dtype=np.int64))
    X = np.vstack(xs)
    y = np.concatenate(ys)
    ds = Dataset(name, X, y, class_count, (dim,))
    return ds, np.concatenate(cids)


# --------------------------------------------------------------------------
# right-angle image rotation
# --------------------------------------------------------------------------

def rotate_image(x: np.ndarray, angle: int) -> np.ndarray:
    """Rotate a 2-D image counterclockwise by a multiple of 90 degrees.

    Pure index permutation, no interpolation; rot(90) of [[a,b],[c,d]] is
    [[b,d],[a,c]].
    """
    if angle not in (0, 90, 180, 270):
        raise ValueError(f"angle must be one of 0/90/180/270, got {angle}")
    x = np.asarray(x)
    if x.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {x.shape}")
    return np.rot90(x, k=angle // 90).copy()


def rotate_rows(X: np.ndarray, shape: tuple[int, int], angle: int) -> np.ndarray:
    """Rotate every flattened image row of X by `angle`."""
    if angle == 0:
        return X.copy()
    h, w = shape
    imgs = X.reshape(-1, h, w)
    return np.rot90(imgs, k=angle // 90, axes=(1, 2)).reshape(X.shape[0], -1).copy()


# --------------------------------------------------------------------------
# per-class subsampling
# --------------------------------------------------------------------------

def subsample_per_class(dataset: Dataset, cap: int, seed: int) -> Dataset:
    """Keep at most `cap` samples per class, chosen uniformly at random."""
    if cap <= 0:
        raise ValueError("cap must be positive")
    rng = np.random.default_rng(seed)
    keep = []
    for c in range(dataset.class_count):
        idx = np.flatnonzero(dataset.y == c)
        if idx.shape[0] > cap:
            idx = rng.choice(idx, size=cap, replace=False)
        keep.append(np.sort(idx))
    order = np.concatenate(keep)
    return dataset.take(order)


# --------------------------------------------------------------------------
# procedural glyph digits (28x28, 10 classes)
# --------------------------------------------------------------------------

# Segment layout of a 7-segment display on a 28x28 canvas. Horizontal bars
# are (row_start, row_end, col_start, col_end) slices; verticals likewise.
_SEG_BOXES = {
    "top":          (4, 7, 8, 20),
    "middle":       (13, 16, 8, 20),
    "bottom":       (22, 25, 8, 20),
    "top_left":     (5, 15, 6, 9),
    "top_right":    (5, 15, 19, 22),
    "bottom_left":  (14, 24, 6, 9),
    "bottom_right": (14, 24, 19, 22),
}

_DIGIT_SEGMENTS = {
    0: ("top", "top_left", "top_right", "bottom_left", "bottom_right", "bottom"),
    1: ("top_right", "bottom_right"),
    2: ("top", "top_right", "middle", "bottom_left", "bottom"),
    3: ("top", "top_right", "middle", "bottom_right", "bottom"),
    4: ("top_left", "top_right", "middle", "bottom_right"),
    5: ("top", "top_left", "middle", "bottom_right", "bottom"),
    6: ("top", "top_left", "middle", "bottom_left", "bottom_right", "bottom"),
    7: ("top", "top_right", "bottom_right"),
    8: ("top", "top_left", "top_right", "middle", "bottom_left", "bottom_right", "bottom"),
    9: ("top", "top_left", "top_right", "middle", "bottom_right", "bottom"),
}

GLYPH_SHAPE = (28, 28)
_GLYPH_MAX_SHIFT = 4


def _glyph_template(digit: int) -> np.ndarray:
    img = np.zeros(GLYPH_SHAPE)
    for seg in _DIGIT_SEGMENTS[digit]:
        r0, r1, c0, c1 = _SEG_BOXES[seg]
        img[r0:r1, c0:c1] = 1.0
    return img


def synth_glyphs(n_per_class: int, seed: int, name: str = "glyphs",
                 invert: bool = False) -> Dataset:
    """Seeded 28x28 digit-glyph dataset with per-sample variability.

    Each sample is a seven-segment digit with random translation (up to
    +-5 px), random stroke intensity, occlusion blotches, and pixel noise, so
    a pixel-space classifier genuinely needs many samples per class to cover
    the variation. `invert=True` flips the contrast (white background), which
    serves as a second visual domain for domain-shift experiments.
    """
    if n_per_class <= 0:
        raise ValueError("n_per_class must be positive")
    rng = np.random.default_rng(seed)
    h, w = GLYPH_SHAPE
    templates = [_glyph_template(d) for d in range(10)]
    n = 10 * n_per_class
    X = np.zeros((n, h * w))
    y = np.zeros(n, dtype=np.int64)
    row = 0
    for digit in range(10):
        base = templates[digit]
        for _ in range(n_per_class):
            dy, dx = rng.integers(-_GLYPH_MAX_SHIFT, _GLYPH_MAX_SHIFT + 1, size=2)
            img = np.roll(np.roll(base, dy, axis=0), dx, axis=1)
            img = img * rng.uniform(0.75, 1.0)
            # occasional occluding blotch so single segments are unreliable cues
            for _ in range(rng.integers(0, 3)):
                br, bc = rng.integers(0, h - 3), rng.integers(0, w - 3)
                img[br:br + 3, bc:bc + 3] = rng.uniform(0.0, 0.7)
            img = img + rng.normal(0.0, 0.06, size=img.shape)
            img = np.clip(img, 0.0, 1.0)
            if invert:
                img = 1.0 - img
            X[row] = img.ravel()
            y[row] = digit
            row += 1
    return Dataset(name, X, y, 10, GLYPH_SHAPE)


def glyph_pair(train_per_class: int, test_per_class: int, seed: int,
               invert: bool = False, name: str = "glyphs") -> DatasetPair:
    """Train/test glyph splits from disjoint child seeds."""
    ss = np.random.SeedSequence([int(seed), 0x91f])
    s_train, s_test = ss.spawn(2)
    return DatasetPair(
        train=synth_glyphs(train_per_class, int(s_train.generate_state(1)[0]),
                           name=name, invert=invert),
        test=synth_glyphs(test_per_class, int(s_test.generate_state(1)[0]),
                          name=name, invert=invert),
    )
