"""Desk-scale data sources with exact laws where enumerable.

All categories are 0-based. Data points are (N, D) int arrays.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .oracle import EnumeratedLaw

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class GmmGrid:
    """Two-component isotropic Gaussian mixture discretized on a square grid.

    Cell probabilities are the mixture density evaluated at integer grid
    centers, normalized over the grid; the exact law is what all TV and NLL
    metrics are measured against.
    """

    grid: int = 50
    mu1: tuple = (15.0, 15.0)
    mu2: tuple = (35.0, 35.0)
    weight: float = 0.5
    sigma: float = 1.0
    law2d: np.ndarray = field(init=False)

    def __post_init__(self):
        if not (0.0 <= self.weight <= 1.0):
            raise ValueError("mixture weight must be in [0, 1]")
        c = np.arange(self.grid, dtype=np.float64)
        xx, yy = np.meshgrid(c, c, indexing="ij")
        dens = (self.weight * self._iso(xx, yy, self.mu1)
                + (1.0 - self.weight) * self._iso(xx, yy, self.mu2))
        self.law2d = dens / dens.sum()

    def _iso(self, xx, yy, mu):
        r2 = (xx - mu[0]) ** 2 + (yy - mu[1]) ** 2
        return np.exp(-0.5 * r2 / self.sigma ** 2)

    @property
    def K(self) -> int:
        return self.grid

    @property
    def D(self) -> int:
        return 2

    def law(self) -> EnumeratedLaw:
        return EnumeratedLaw(K=self.grid, D=2, probs=self.law2d.ravel())

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        flat = rng.choice(self.grid * self.grid, size=n, p=self.law2d.ravel())
        return np.stack(np.unravel_index(flat, (self.grid, self.grid)), axis=1)


@dataclass
class RandomWalk:
    """Sequences of prefix sums of +-1 steps, offset into {0..K-1}.

    The first coordinate is pinned at the offset D-1 and each consecutive
    difference is +-1, so K = 2(D-1)+1 covers the full range.
    """

    D: int = 8

    def __post_init__(self):
        if self.D < 2:
            raise ValueError("walks need at least 2 coordinates")

    @property
    def K(self) -> int:
        return 2 * (self.D - 1) + 1

    @property
    def offset(self) -> int:
        return self.D - 1

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        steps = rng.integers(0, 2, size=(n, self.D - 1)) * 2 - 1
        pos = np.cumsum(np.concatenate(
            [np.zeros((n, 1), dtype=int), steps], axis=1), axis=1)
        return pos + self.offset

    def is_valid(self, xs: np.ndarray) -> np.ndarray:
        """Boolean per row: starts at the offset and every step is +-1."""
        xs = np.atleast_2d(xs)
        start_ok = xs[:, 0] == self.offset
        diffs_ok = np.all(np.abs(np.diff(xs, axis=1)) == 1, axis=1)
        in_range = np.all((xs >= 0) & (xs < self.K), axis=1)
        return start_ok & diffs_ok & in_range

    def enumerate_paths(self) -> np.ndarray:
        """All 2^(D-1) valid sequences."""
        n = 2 ** (self.D - 1)
        bits = ((np.arange(n)[:, None] >> np.arange(self.D - 1)) & 1) * 2 - 1
        pos = np.cumsum(np.concatenate(
            [np.zeros((n, 1), dtype=int), bits], axis=1), axis=1)
        return pos + self.offset


def write_idx_images(path, images: np.ndarray):
    """Write a uint8 (N, H, W) stack in IDX format (big-endian)."""
    images = np.asarray(images, dtype=np.uint8)
    n, h, w = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w))
        f.write(images.tobytes())


def write_idx_labels(path, labels: np.ndarray):
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]))
        f.write(labels.tobytes())


def _read_exact(f, n: int, path, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise ValueError(
            f"{path}: truncated {what} at byte offset {f.tell() - len(data)}")
    return data


def load_idx(images_path, labels_path=None, threshold: float = 0.5,
             side: int | None = None):
    """Load IDX images binarized at threshold*255 into categories {0, 1}.

    Returns (data, labels) where data is (N, side*side) int values and labels
    is None unless a labels file is given. An optional center-crop plus
    block-mean downscale reduces images to side x side before binarization.
    """
    with open(images_path, "rb") as f:
        magic = struct.unpack(">I", _read_exact(f, 4, images_path, "magic"))[0]
        if magic != IDX_IMAGES_MAGIC:
            raise ValueError(
                f"{images_path}: bad magic 0x{magic:08x} at byte offset 0 "
                f"(expected 0x{IDX_IMAGES_MAGIC:08x})")
        n, h, w = struct.unpack(">III", _read_exact(f, 12, images_path, "dims"))
        payload = _read_exact(f, n * h * w, images_path, "pixel payload")
        extra = f.read(1)
        if extra:
            raise ValueError(
                f"{images_path}: {len(extra)}+ trailing bytes at offset {f.tell() - 1}")
    imgs = np.frombuffer(payload, dtype=np.uint8).reshape(n, h, w).astype(np.float64)

    if side is not None and side != 0 and side != h:
        if h != w:
            raise ValueError("downscale requires square images")
        if side > h:
            raise ValueError(f"cannot upscale {h}x{w} images to side {side}")
        f_ = h // side
        crop = side * f_
        off = (h - crop) // 2
        imgs = imgs[:, off:off + crop, off:off + crop]
        imgs = imgs.reshape(n, side, f_, side, f_).mean(axis=(2, 4))
        h = w = side

    data = (imgs > threshold * 255.0).astype(int).reshape(n, h * w)

    labels = None
    if labels_path:
        with open(labels_path, "rb") as f:
            magic = struct.unpack(">I", _read_exact(f, 4, labels_path, "magic"))[0]
            if magic != IDX_LABELS_MAGIC:
                raise ValueError(
                    f"{labels_path}: bad magic 0x{magic:08x} at byte offset 0 "
                    f"(expected 0x{IDX_LABELS_MAGIC:08x})")
            ln = struct.unpack(">I", _read_exact(f, 4, labels_path, "count"))[0]
            if ln != n:
                raise ValueError(
                    f"{labels_path}: {ln} labels for {n} images")
            labels = np.frombuffer(
                _read_exact(f, ln, labels_path, "labels"), dtype=np.uint8).copy()
    return data, labels


def make_digits_idx(images_path, labels_path=None, side: int = 14):
    """Build an IDX file of handwritten digits at the requested side length.

    Uses the bundled scikit-learn digits corpus (8x8, 17 gray levels),
    nearest-upsampled and center-cropped to side x side. Keeps the image
    pipeline exercising the real IDX container without a network fetch.
    """
    from sklearn.datasets import load_digits

    raw = load_digits()
    imgs = (raw.images / 16.0 * 255.0).round().astype(np.uint8)  # (N, 8, 8)
    factor = -(-side // 8)  # ceil
    up = np.repeat(np.repeat(imgs, factor, axis=1), factor, axis=2)
    big = up.shape[1]
    off = (big - side) // 2
    imgs = up[:, off:off + side, off:off + side]
    write_idx_images(images_path, imgs)
    if labels_path:
        write_idx_labels(labels_path, raw.target.astype(np.uint8))
    return images_path


@dataclass
class IdxImages:
    """Binarized image dataset backed by an IDX file."""

    data: np.ndarray  # (N, D) ints in {0, 1}
    side: int
    labels: np.ndarray | None = None

    @property
    def K(self) -> int:
        return 2  # data categories; a mask category is appended by the model

    @property
    def D(self) -> int:
        return self.data.shape[1]

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        idx = rng.integers(0, self.data.shape[0], size=n)
        return self.data[idx]
