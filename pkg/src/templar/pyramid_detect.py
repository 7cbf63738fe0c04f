"""Multi-scale feature pyramid, sliding-window linear scoring and NMS.

A simplified detector scaffold: any per-level feature extractor can be
plugged in; the shipped default is a gradient-orientation histogram.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DimMismatch, FormatError, ImageTooSmall
from .geom_align import bilinear_sample
from .store import Record, Role, read_records, write_records

N_LEVELS = 7
MIN_IMAGE_SIDE = 32


@dataclass(frozen=True)
class FeaturePyramid:
    levels: tuple
    scale_factors: tuple

    def __len__(self):
        return len(self.levels)


@dataclass(frozen=True)
class LinearScorer:
    weights: np.ndarray  # (k, k, D)
    bias: float = 0.0

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 3 or w.shape[0] != w.shape[1]:
            raise DimMismatch(f"scorer weights must be k x k x D, got {w.shape}")
        if not np.all(np.isfinite(w)) or not math.isfinite(self.bias):
            raise ValueError("scorer weights must be finite")
        object.__setattr__(self, "weights", w)

    @property
    def window(self) -> int:
        return self.weights.shape[0]

    @property
    def channels(self) -> int:
        return self.weights.shape[2]


@dataclass(frozen=True)
class DetBox:
    x: float
    y: float
    w: float
    h: float
    score: float
    level: int

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError("box width and height must be positive")


def level_scale(level: int) -> float:
    # 2 ** (-l/2) is exact on even levels, unlike repeated 1/sqrt(2) products
    return 2.0 ** (-level / 2.0)


def level_shape(h: int, w: int, level: int) -> tuple:
    """Level dims, rounding halves up."""
    s = level_scale(level)
    return int(math.floor(h * s + 0.5)), int(math.floor(w * s + 0.5))


def resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with pixel-center alignment and edge clamping."""
    h, w = image.shape[:2]
    if (out_h, out_w) == (h, w):
        return image.copy()
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    ys = np.clip(ys, 0, h - 1)
    xs = np.clip(xs, 0, w - 1)
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    return bilinear_sample(image, gx, gy)


def zscore(features: np.ndarray) -> np.ndarray:
    """Per-channel z-score; channels with zero variance become all-zero."""
    f = np.asarray(features, dtype=np.float64)
    flat = f.reshape(-1, f.shape[-1])
    mean = flat.mean(axis=0)
    centered = f - mean
    std = np.sqrt((centered.reshape(-1, f.shape[-1]) ** 2).mean(axis=0))
    scale = np.where(std > 1e-12 * np.maximum(1.0, np.abs(mean)), std, np.inf)
    return centered / scale


def identity_features(level_image: np.ndarray) -> np.ndarray:
    return level_image


def gradient_histogram_features(level_image: np.ndarray, bins: int = 9, cell: int = 3) -> np.ndarray:
    """Per-pixel unsigned gradient-orientation histogram, box-pooled over ``cell``."""
    gray = level_image.mean(axis=2) if level_image.ndim == 3 else level_image
    gy, gx = np.gradient(gray)
    mag = np.hypot(gx, gy)
    ang = np.mod(np.arctan2(gy, gx), np.pi) / np.pi * bins
    lo = np.floor(ang).astype(int) % bins
    frac = ang - np.floor(ang)
    hi = (lo + 1) % bins
    hist = np.zeros(gray.shape + (bins,))
    rows, cols = np.indices(gray.shape)
    np.add.at(hist, (rows, cols, lo), mag * (1.0 - frac))
    np.add.at(hist, (rows, cols, hi), mag * frac)
    return ndimage.uniform_filter(hist, size=(cell, cell, 1), mode="constant")


def build_pyramid(image, feature_fn=gradient_histogram_features, min_size: int = 1) -> FeaturePyramid:
    """Seven half-octave levels, each z-scored per channel.

    ``min_size`` is the smallest admissible level side (the scorer window).
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    h, w = img.shape[:2]
    if h < MIN_IMAGE_SIDE or w < MIN_IMAGE_SIDE:
        raise ImageTooSmall(f"image {h}x{w} below {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}")
    levels = []
    scales = []
    for lvl in range(N_LEVELS):
        lh, lw = level_shape(h, w, lvl)
        if lh < min_size or lw < min_size:
            raise ImageTooSmall(f"level {lvl} would be {lh}x{lw}, below window {min_size}")
        feats = np.asarray(feature_fn(resize(img, lh, lw)), dtype=np.float64)
        if feats.ndim == 2:
            feats = feats[:, :, None]
        levels.append(zscore(feats))
        scales.append(level_scale(lvl))
    return FeaturePyramid(tuple(levels), tuple(scales))


def score_level(level: np.ndarray, scorer: LinearScorer) -> np.ndarray:
    """Score map of shape (H-k+1, W-k+1) for every k x k window."""
    k = scorer.window
    if level.shape[2] != scorer.channels:
        raise DimMismatch(f"level has {level.shape[2]} channels, scorer expects {scorer.channels}")
    windows = np.lib.stride_tricks.sliding_window_view(level, (k, k), axis=(0, 1))
    # windows: (H-k+1, W-k+1, D, k, k)
    return np.einsum("ijdab,abd->ij", windows, scorer.weights) + scorer.bias


def score_locations(pyramid: FeaturePyramid, scorer: LinearScorer, window: int | None = None) -> list:
    k = scorer.window if window is None else window
    if k != scorer.window:
        raise DimMismatch(f"window {k} does not match scorer window {scorer.window}")
    boxes = []
    for lvl, (level, scale) in enumerate(zip(pyramid.levels, pyramid.scale_factors)):
        if level.shape[0] < k or level.shape[1] < k:
            raise ImageTooSmall(f"level {lvl} smaller than window {k}")
        scores = score_level(level, scorer)
        size = k / scale
        for (r, c), s in np.ndenumerate(scores):
            boxes.append(DetBox(c / scale, r / scale, size, size, float(s), lvl))
    return boxes


def iou(a: DetBox, b: DetBox) -> float:
    ix = max(0.0, min(a.x + a.w, b.x + b.w) - max(a.x, b.x))
    iy = max(0.0, min(a.y + a.h, b.y + b.h) - max(a.y, b.y))
    inter = ix * iy
    union = a.w * a.h + b.w * b.h - inter
    return inter / union if union > 0 else 0.0


def nms(boxes, iou_threshold: float = 0.3) -> list:
    """Greedy suppression; ties in score go to the smaller (x, y, level)."""
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError("iou_threshold must lie in (0, 1)")
    if not boxes:
        return []
    order = sorted(boxes, key=lambda b: (-b.score, b.x, b.y, b.level))
    arr = np.array([[b.x, b.y, b.x + b.w, b.y + b.h] for b in order], dtype=np.float64)
    area = (arr[:, 2] - arr[:, 0]) * (arr[:, 3] - arr[:, 1])
    alive = np.ones(len(order), dtype=bool)
    keep = []
    for i in range(len(order)):
        if not alive[i]:
            continue
        keep.append(order[i])
        rest = np.nonzero(alive[i + 1 :])[0] + i + 1
        if rest.size == 0:
            break
        ix = np.clip(np.minimum(arr[i, 2], arr[rest, 2]) - np.maximum(arr[i, 0], arr[rest, 0]), 0, None)
        iy = np.clip(np.minimum(arr[i, 3], arr[rest, 3]) - np.maximum(arr[i, 1], arr[rest, 1]), 0, None)
        inter = ix * iy
        union = area[i] + area[rest] - inter
        ious = np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)
        alive[rest[ious > iou_threshold]] = False
    return keep


def detect(image, scorer: LinearScorer, feature_fn=gradient_histogram_features, iou_threshold=0.3, min_score=None):
    pyr = build_pyramid(image, feature_fn, min_size=scorer.window)
    boxes = score_locations(pyr, scorer)
    if min_score is not None:
        boxes = [b for b in boxes if b.score >= min_score]
    return pyr, nms(boxes, iou_threshold)


def save_scorer(scorer: LinearScorer, path) -> None:
    k, _, d = scorer.weights.shape
    write_records(
        path,
        [Record(Role.SCORER, scorer.weights.reshape(k * k, d)), Record(Role.SCORER, np.array([[scorer.bias]]))],
    )


def load_scorer(path) -> LinearScorer:
    records = read_records(path, Role.SCORER)
    if len(records) != 2 or records[1].data.shape != (1, 1):
        raise FormatError("scorer file must hold a (k*k, D) weight record and a 1x1 bias record")
    w = records[0].data
    k = int(round(math.sqrt(w.shape[0])))
    if k * k != w.shape[0]:
        raise FormatError(f"scorer weight rows {w.shape[0]} is not a square window")
    return LinearScorer(w.reshape(k, k, w.shape[1]), float(records[1].data[0, 0]))
