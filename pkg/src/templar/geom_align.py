"""Least-squares similarity transforms and canonical face alignment."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateConfiguration, DimMismatch

CANONICAL_SIZE = 100
# eye centers and nose base in the 100x100 frame
DEFAULT_CANONICAL = ((30.0, 35.0), (70.0, 35.0), (50.0, 62.0))


@dataclass(frozen=True)
class SimilarityTransform:
    """p -> scale * R(rotation) @ p + translation."""

    scale: float = 1.0
    rotation: float = 0.0
    translation: tuple = (0.0, 0.0)

    def __post_init__(self):
        if not self.scale > 0 or not math.isfinite(self.scale):
            raise ValueError(f"scale must be finite and > 0, got {self.scale}")

    @property
    def linear(self) -> np.ndarray:
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        return self.scale * np.array([[c, -s], [s, c]])

    def matrix(self) -> np.ndarray:
        """3x3 homogeneous form."""
        m = np.eye(3)
        m[:2, :2] = self.linear
        m[:2, 2] = self.translation
        return m

    def inverse(self) -> "SimilarityTransform":
        inv_scale = 1.0 / self.scale
        c, s = math.cos(-self.rotation), math.sin(-self.rotation)
        tx, ty = self.translation
        return SimilarityTransform(
            inv_scale, -self.rotation, (-inv_scale * (c * tx - s * ty), -inv_scale * (s * tx + c * ty))
        )

    def compose(self, other: "SimilarityTransform") -> "SimilarityTransform":
        """Transform equal to applying ``other`` first, then ``self``."""
        ox, oy = other.translation
        tx, ty = apply_transform(self, (ox, oy))
        return SimilarityTransform(self.scale * other.scale, _wrap(self.rotation + other.rotation), (tx, ty))

    def __call__(self, points):
        return apply_points(self, points)


def _wrap(angle: float) -> float:
    return math.atan2(math.sin(angle), math.cos(angle))


def apply_transform(t: SimilarityTransform, p) -> tuple:
    x, y = p
    c, s = math.cos(t.rotation), math.sin(t.rotation)
    return (t.scale * (c * x - s * y) + t.translation[0], t.scale * (s * x + c * y) + t.translation[1])


def apply_points(t: SimilarityTransform, points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    return pts @ t.linear.T + np.asarray(t.translation, dtype=np.float64)


def estimate_similarity(src, dst) -> SimilarityTransform:
    """Closed-form least-squares similarity (centroids + scaled Procrustes).

    In 2-D the optimal rotation/scale pair is ``a + ib = <dst_c, src_c> / |src_c|^2``
    over complex-number coordinates; reflections never arise.
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    if src.shape != dst.shape:
        raise DimMismatch(f"src has {len(src)} points, dst has {len(dst)}")
    if len(src) < 2:
        raise DegenerateConfiguration("need at least 2 correspondences")
    if not (np.all(np.isfinite(src)) and np.all(np.isfinite(dst))):
        raise DegenerateConfiguration("non-finite landmark coordinates")
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    xs = src - mu_s
    xd = dst - mu_d
    var = float(np.sum(xs * xs))
    if var <= 1e-24 * max(1.0, float(np.sum(src * src))):
        raise DegenerateConfiguration("all source points coincide; scale undefined")
    a = float(np.sum(xs[:, 0] * xd[:, 0] + xs[:, 1] * xd[:, 1])) / var
    b = float(np.sum(xs[:, 0] * xd[:, 1] - xs[:, 1] * xd[:, 0])) / var
    scale = math.hypot(a, b)
    if scale == 0.0:
        raise DegenerateConfiguration("destination points coincide; scale is zero")
    rotation = math.atan2(b, a)
    tx = mu_d[0] - (a * mu_s[0] - b * mu_s[1])
    ty = mu_d[1] - (b * mu_s[0] + a * mu_s[1])
    return SimilarityTransform(scale, rotation, (float(tx), float(ty)))


def residual(t: SimilarityTransform, src, dst) -> float:
    """Sum of squared distances between t(src) and dst."""
    diff = apply_points(t, src) - np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    return float(np.sum(diff * diff))


def bilinear_sample(image: np.ndarray, xs: np.ndarray, ys: np.ndarray, fill: float = 0.0) -> np.ndarray:
    """Sample ``image`` (HxWxC) at float pixel coordinates.

    Pixel centers sit at integer coordinates. Samples whose 2x2 neighbourhood
    leaves the image use ``fill`` for the missing taps; samples farther than
    one pixel outside are pure ``fill``.
    """
    h, w = image.shape[:2]
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    fx = (xs - x0)[..., None]
    fy = (ys - y0)[..., None]
    out = np.zeros(xs.shape + image.shape[2:], dtype=np.float64)
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            xi = x0 + dx
            yi = y0 + dy
            inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            vals = np.full(xs.shape + image.shape[2:], fill, dtype=np.float64)
            vals[inside] = image[yi[inside], xi[inside]]
            out += wx * wy * vals
    return out


def warp(image, t: SimilarityTransform, out_shape) -> np.ndarray:
    """Resample so that output pixel q takes the value at t^-1(q)."""
    image = np.asarray(image, dtype=np.float64)
    squeeze = image.ndim == 2
    if squeeze:
        image = image[:, :, None]
    oh, ow = out_shape
    inv = t.inverse()
    qy, qx = np.mgrid[0:oh, 0:ow].astype(np.float64)
    src = apply_points(inv, np.stack([qx.ravel(), qy.ravel()], axis=1))
    out = bilinear_sample(image, src[:, 0].reshape(oh, ow), src[:, 1].reshape(oh, ow))
    return out[:, :, 0] if squeeze else out


@dataclass(frozen=True)
class AlignedFace:
    pixels: np.ndarray
    source_id: str = ""

    def __post_init__(self):
        if self.pixels.shape != (CANONICAL_SIZE, CANONICAL_SIZE, 3):
            raise DimMismatch(f"aligned face must be 100x100x3, got {self.pixels.shape}")
        if np.any(self.pixels < 0) or np.any(self.pixels > 1):
            raise ValueError("aligned face values must lie in [0, 1]")
        self.pixels.setflags(write=False)


def to_three_channels(image) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[:, :, None]
    if image.shape[2] == 1:
        image = np.repeat(image, 3, axis=2)
    if image.shape[2] != 3:
        raise DimMismatch(f"expected 1 or 3 channels, got {image.shape[2]}")
    return image


def align_face(image, landmarks, canonical=DEFAULT_CANONICAL, source_id: str = "") -> AlignedFace:
    """Warp ``image`` so ``landmarks`` land on ``canonical`` in a 100x100 frame.

    Grayscale input is replicated to three channels.
    """
    t = estimate_similarity(landmarks, canonical)
    img = to_three_channels(image)
    out = warp(img, t, (CANONICAL_SIZE, CANONICAL_SIZE))
    return AlignedFace(np.clip(out, 0.0, 1.0), source_id)
