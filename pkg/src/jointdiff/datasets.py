"""Synthetic joint datasets (x, y) with an exactly evaluable labeling map.

Every dataset pairs a signal x in [-1, 1]^{d_x} with a label vector y made of
P one-hot blocks of K classes each (P = 1 for point clouds, P = side^2 for
images with per-pixel masks). The labeling map ``mu`` is deterministic and
can be re-evaluated on arbitrary x, which the oracle tests and the metrics
rely on:

* mixtures label by the nearest component mean;
* images label each pixel by the nearest class intensity level.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable

import numpy as np


@dataclass(frozen=True)
class JointSample:
    x: np.ndarray
    y: np.ndarray


@dataclass
class JointDataset:
    """Immutable-by-convention container of paired samples.

    ``mu`` maps a batch of x (n, d_x) to one-hot labels (n, K*P); the stored
    ``y`` is exactly ``mu(x)``. Label layout is pixel-major: ``y.reshape(P, K)``
    gives one K-dim one-hot row per pixel.
    """

    name: str
    x: np.ndarray  # (n, d_x)
    y: np.ndarray  # (n, K*P)
    K: int
    P: int
    mu: Callable[[np.ndarray], np.ndarray] = field(repr=False)

    def __post_init__(self) -> None:
        if self.x.ndim != 2 or self.y.ndim != 2 or len(self.x) != len(self.y):
            raise ValueError("x and y must be 2-d arrays with matching length")
        if self.y.shape[1] != self.K * self.P:
            raise ValueError(f"d_y = {self.y.shape[1]} != K*P = {self.K * self.P}")

    @property
    def n(self) -> int:
        return len(self.x)

    @property
    def d_x(self) -> int:
        return self.x.shape[1]

    @property
    def d_y(self) -> int:
        return self.y.shape[1]

    def sample(self, i: int) -> JointSample:
        return JointSample(self.x[i], self.y[i])

    def labels(self) -> np.ndarray:
        """Argmax-decoded classes, shape (n, P)."""
        return decode_labels(self.y, self.K, self.P)

    def subset(self, idx, name: str | None = None) -> "JointDataset":
        idx = np.asarray(idx)
        return JointDataset(name or self.name, self.x[idx].copy(), self.y[idx].copy(),
                            self.K, self.P, self.mu)

    def split(self, sizes: tuple[int, ...], seed: int) -> tuple["JointDataset", ...]:
        """Disjoint random splits of the given sizes (remainder dropped)."""
        if sum(sizes) > self.n:
            raise ValueError(f"split sizes {sizes} exceed dataset size {self.n}")
        perm = np.random.default_rng(seed).permutation(self.n)
        parts, start = [], 0
        for k, size in enumerate(sizes):
            parts.append(self.subset(perm[start:start + size], f"{self.name}/split{k}"))
            start += size
        return tuple(parts)


def decode_labels(y: np.ndarray, K: int, P: int) -> np.ndarray:
    """Argmax over each of the P one-hot blocks: (..., K*P) -> (..., P) ints."""
    y = np.asarray(y)
    blocks = y.reshape(*y.shape[:-1], P, K)
    return np.argmax(blocks, axis=-1)


def encode_labels(classes: np.ndarray, K: int) -> np.ndarray:
    """Inverse of decode_labels: (..., P) ints -> (..., K*P) one-hots."""
    classes = np.asarray(classes)
    eye = np.eye(K)
    return eye[classes].reshape(*classes.shape[:-1], classes.shape[-1] * K)


# -- labeled Gaussian mixtures ------------------------------------------------

def _mixture_means(n_components: int, d_x: int, radius: float) -> np.ndarray:
    if d_x == 1:
        return np.linspace(-1.0, 1.0, n_components).reshape(-1, 1)
    means = np.zeros((n_components, d_x))
    angles = 2.0 * np.pi * np.arange(n_components) / n_components
    means[:, 0] = radius * np.cos(angles)
    means[:, 1] = radius * np.sin(angles)
    return means


def make_gaussian_mixture(
    n_components: int,
    n_samples: int,
    d_x: int = 2,
    K: int = 2,
    seed: int = 0,
    shift: float | np.ndarray = 0.0,
    rotation: float = 0.0,
    scale: float = 0.08,
    radius: float = 0.7,
    name: str = "mixture",
) -> JointDataset:
    """Labeled point cloud from a Gaussian mixture, clipped to [-1, 1]^{d_x}.

    Component means sit on a line (d_x = 1) or a circle (d_x >= 2); component
    i carries class i mod K, and mu labels any point by its nearest component
    mean. ``rotation`` (radians, first two dims) and ``shift`` transform the
    means, producing the shifted second domain for transfer experiments.
    """
    if n_samples <= 0:
        raise ValueError("n_samples must be positive")
    if K > n_components:
        raise ValueError("K must not exceed n_components")

    means = _mixture_means(n_components, d_x, radius)
    if rotation != 0.0 and d_x >= 2:
        c, s = np.cos(rotation), np.sin(rotation)
        rot = np.array([[c, -s], [s, c]])
        means = means.copy()
        means[:, :2] = means[:, :2] @ rot.T
    means = means + np.broadcast_to(np.asarray(shift, dtype=float), (d_x,))
    classes_of_component = np.arange(n_components) % K

    def mu(x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        d2 = ((x[:, None, :] - means[None, :, :]) ** 2).sum(axis=2)
        comp = np.argmin(d2, axis=1)
        return encode_labels(classes_of_component[comp][:, None], K)

    rng = np.random.default_rng(seed)
    comp = rng.integers(0, n_components, size=n_samples)
    x = means[comp] + scale * rng.standard_normal((n_samples, d_x))
    x = np.clip(x, -1.0, 1.0)
    return JointDataset(name, x, mu(x), K=K, P=1, mu=mu)


# -- procedural images with per-pixel masks ------------------------------------

def class_levels(K: int) -> np.ndarray:
    """Per-class intensity levels, evenly spaced over [-1, 1].

    Level k is the intensity band center of class k (class 0 = background);
    mu assigns each pixel the class of its nearest level, so rendered images
    decode back to their masks exactly as long as per-shape intensity jitter
    stays below half the level spacing.
    """
    if K < 2:
        raise ValueError("need at least 2 classes (background + 1)")
    return np.linspace(-1.0, 1.0, K)


def make_shapes(
    n_samples: int,
    side: int = 8,
    K: int = 3,
    seed: int = 0,
    n_shapes: tuple[int, int] = (1, 3),
    size_range: tuple[int, int] = (2, 5),
    jitter: float = 0.25,
    level_order: tuple[int, ...] | None = None,
    level_scale: float = 1.0,
    name: str = "shapes",
) -> JointDataset:
    """Tiny grayscale images of rectangles and discs with per-pixel masks.

    Each image stacks 1..n shapes on a background; a pixel's class is the
    topmost covering shape (later shapes overwrite earlier ones), else
    background class 0. Pixel intensity is the class's assigned level plus a
    per-shape jitter of at most ``jitter`` * half the level spacing, so mu
    (nearest assigned level per pixel) reproduces the rendered mask
    bit-exactly.

    Discs are rasterized with the exact predicate (i-ci)^2 + (j-cj)^2 <= r^2
    on integer pixel coordinates. ``size_range``, ``jitter``, ``level_order``
    and ``level_scale`` are the knobs the transfer experiments shift between
    domains: ``level_order`` permutes which intensity band belongs to which
    class, and ``level_scale`` compresses the whole intensity range (a
    low-contrast domain), both of which break fixed intensity-to-class rules
    across domains while keeping the mask decodable from the image.
    """
    if n_samples <= 0:
        raise ValueError("n_samples must be positive")
    if side > 16:
        raise ValueError("side > 16 is beyond desk scale")
    if not 0.0 <= jitter < 1.0:
        raise ValueError("jitter must be in [0, 1)")
    if not 0.0 < level_scale <= 1.0:
        raise ValueError("level_scale must be in (0, 1]")
    if level_order is None:
        level_order = tuple(range(K))
    if sorted(level_order) != list(range(K)):
        raise ValueError(f"level_order must be a permutation of 0..{K - 1}")

    levels = class_levels(K)[list(level_order)] * level_scale  # assigned level per class
    half_gap = (class_levels(K)[1] - class_levels(K)[0]) / 2.0 * level_scale
    P = side * side

    def mu(x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        cls = np.argmin(np.abs(x[:, :, None] - levels[None, None, :]), axis=2)
        return encode_labels(cls, K)

    rng = np.random.default_rng(seed)
    ii, jj = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    X = np.empty((n_samples, P))
    cls_all = np.empty((n_samples, P), dtype=int)

    for s in range(n_samples):
        cls_img = np.zeros((side, side), dtype=int)
        val_img = np.full((side, side), levels[0] + jitter * half_gap * rng.uniform(-1, 1))
        for _ in range(rng.integers(n_shapes[0], n_shapes[1] + 1)):
            k = int(rng.integers(1, K)) if K > 1 else 0
            value = levels[k] + jitter * half_gap * rng.uniform(-1, 1)
            if rng.random() < 0.5:
                h = int(rng.integers(size_range[0], size_range[1] + 1))
                w = int(rng.integers(size_range[0], size_range[1] + 1))
                i0 = int(rng.integers(0, max(1, side - h + 1)))
                j0 = int(rng.integers(0, max(1, side - w + 1)))
                cover = np.zeros((side, side), dtype=bool)
                cover[i0:i0 + h, j0:j0 + w] = True
            else:
                r = rng.uniform(size_range[0] / 2.0, size_range[1] / 2.0)
                ci = rng.uniform(r, side - 1 - r) if side - 1 > 2 * r else (side - 1) / 2.0
                cj = rng.uniform(r, side - 1 - r) if side - 1 > 2 * r else (side - 1) / 2.0
                cover = (ii - ci) ** 2 + (jj - cj) ** 2 <= r * r
            cls_img[cover] = k
            val_img[cover] = value
        X[s] = val_img.ravel()
        cls_all[s] = cls_img.ravel()

    Y = encode_labels(cls_all, K)
    ds = JointDataset(name, X, Y, K=K, P=P, mu=mu)
    # jitter < 1 guarantees rendered values decode to the rendered classes
    assert np.array_equal(mu(X), Y)
    return ds


# -- serialization --------------------------------------------------------------

def save_csv(ds: JointDataset, path) -> None:
    """One row per sample, x components then y components, full precision."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{i}" for i in range(ds.d_x)] + [f"y{i}" for i in range(ds.d_y)])
        for i in range(ds.n):
            writer.writerow([f"{v:.17g}" for v in ds.x[i]] + [f"{v:.17g}" for v in ds.y[i]])


_DATASET_KEYS = {
    "gaussian_mixture": {"n_components", "n_samples", "d_x", "K", "seed", "shift",
                         "rotation", "scale", "radius", "name"},
    "shapes": {"n_samples", "side", "K", "seed", "n_shapes", "size_range", "jitter",
               "level_order", "level_scale", "name"},
}


def make_dataset(spec: dict) -> JointDataset:
    """Build a dataset from a config block ({"kind": ..., **params})."""
    spec = dict(spec)
    kind = spec.pop("kind", None)
    if kind not in _DATASET_KEYS:
        raise ValueError(f"unknown dataset kind: {kind!r}")
    unknown = set(spec) - _DATASET_KEYS[kind]
    if unknown:
        raise ValueError(f"unknown dataset keys for {kind}: {sorted(unknown)}")
    for key in ("n_shapes", "size_range", "level_order"):
        if key in spec:
            spec[key] = tuple(spec[key])
    if kind == "gaussian_mixture":
        return make_gaussian_mixture(**spec)
    return make_shapes(**spec)
