"""Cascaded shape regression from a mean-shape initialization.

Each stage is a ridge regressor mapping patch features sampled at the
current shape estimate to a shape increment. Stage matrices carry an extra
last row that multiplies a constant 1 feature (the stage offset).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DimMismatch, FormatError, InsufficientData
from .store import Record, Role, read_records, write_records

log = logging.getLogger(__name__)

DEFAULT_STAGES = 5
DEFAULT_PATCH_RADIUS = 7
DEFAULT_RIDGE = 1e-3


def raw_patch(patch: np.ndarray) -> np.ndarray:
    return patch.ravel()


def unit_patch(patch: np.ndarray) -> np.ndarray:
    """Raw intensities scaled to unit L2 norm (all-zero patches stay zero)."""
    v = patch.ravel()
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


FEATURE_FNS = {"raw": raw_patch, "unit": unit_patch}


def _gray(image) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    return img if img.ndim == 3 else img[:, :, None]


def extract_patch_features(image, shape, patch_radius: int = DEFAULT_PATCH_RADIUS, feature_fn=unit_patch):
    """Concatenate ``feature_fn`` over the (2r+1)^2 patch at every shape point.

    Points are rounded to the nearest pixel and clamped into the image;
    patch pixels outside the image are zero.
    """
    img = _gray(image)
    h, w, c = img.shape
    r = int(patch_radius)
    side = 2 * r + 1
    padded = np.zeros((h + 2 * r, w + 2 * r, c))
    padded[r : r + h, r : r + w] = img
    pts = np.asarray(shape, dtype=np.float64).reshape(-1, 2)
    feats = []
    for x, y in pts:
        cx = int(np.clip(np.floor(x + 0.5), 0, w - 1))
        cy = int(np.clip(np.floor(y + 0.5), 0, h - 1))
        patch = padded[cy : cy + side, cx : cx + side]
        feats.append(np.asarray(feature_fn(patch), dtype=np.float64).ravel())
    return np.concatenate(feats)


@dataclass
class CascadeModel:
    mean_shape: np.ndarray  # (L, 2)
    stages: list = field(default_factory=list)  # each (F + 1, 2L)
    patch_radius: int = DEFAULT_PATCH_RADIUS
    feature_fn: str = "unit"

    def __post_init__(self):
        self.mean_shape = np.asarray(self.mean_shape, dtype=np.float64).reshape(-1, 2)
        dims = {s.shape for s in self.stages}
        if len(dims) > 1:
            raise DimMismatch(f"stage matrices disagree in shape: {sorted(dims)}")
        for s in self.stages:
            if s.shape[1] != 2 * self.n_points:
                raise DimMismatch(f"stage output dim {s.shape[1]} != 2L = {2 * self.n_points}")

    @property
    def n_points(self) -> int:
        return self.mean_shape.shape[0]

    @property
    def features(self):
        return FEATURE_FNS[self.feature_fn]


def _stage_design(images, shapes, patch_radius, fn) -> np.ndarray:
    rows = [extract_patch_features(img, s, patch_radius, fn) for img, s in zip(images, shapes)]
    F = np.stack(rows)
    return np.hstack([F, np.ones((F.shape[0], 1))])


def ridge_solve(X: np.ndarray, Y: np.ndarray, lam: float) -> np.ndarray:
    """argmin_B ||Y - X B||^2 + lam ||B||^2, via the smaller normal system."""
    n, d = X.shape
    if d <= n:
        return np.linalg.solve(X.T @ X + lam * np.eye(d), X.T @ Y)
    # dual form: B = X^T (X X^T + lam I)^-1 Y
    return X.T @ np.linalg.solve(X @ X.T + lam * np.eye(n), Y)


def rms_error(pred, truth) -> float:
    """Root mean squared point-to-point distance."""
    d = np.asarray(pred) - np.asarray(truth)
    return float(np.sqrt(np.mean(np.sum(d * d, axis=-1))))


def cascade_train(
    images,
    shapes,
    n_stages: int = DEFAULT_STAGES,
    patch_radius: int = DEFAULT_PATCH_RADIUS,
    feature_fn: str = "unit",
    ridge_lambda: float = DEFAULT_RIDGE,
    history: list | None = None,
) -> CascadeModel:
    """Fit a cascade on ground-truth shapes.

    If ``history`` is given it receives the training RMS error before the
    first stage and after every stage.
    """
    images = list(images)
    truth = np.stack([np.asarray(s, dtype=np.float64).reshape(-1, 2) for s in shapes]) if len(shapes) else None
    if truth is None or len(images) == 0:
        raise InsufficientData("cascade training needs at least one example")
    if len(images) != truth.shape[0]:
        raise DimMismatch(f"{len(images)} images but {truth.shape[0]} shapes")
    n, L, _ = truth.shape
    fn = FEATURE_FNS[feature_fn]
    mean_shape = truth.mean(axis=0)
    current = np.repeat(mean_shape[None], n, axis=0)
    if history is not None:
        history.append(rms_error(current, truth))
    stages = []
    for t in range(n_stages):
        X = _stage_design(images, current, patch_radius, fn)
        if X.shape[1] <= 1:
            raise InsufficientData("empty feature matrix")
        R = (truth - current).reshape(n, 2 * L)
        B = ridge_solve(X, R, ridge_lambda)
        current = current + (X @ B).reshape(n, L, 2)
        stages.append(B)
        err = rms_error(current, truth)
        if history is not None:
            history.append(err)
        log.debug("stage %d: train rms %.6g", t, err)
    return CascadeModel(mean_shape, stages, int(patch_radius), feature_fn)


def cascade_predict(model: CascadeModel, image) -> np.ndarray:
    """Run every stage from the mean shape; returns an (L, 2) array."""
    shape = model.mean_shape.copy()
    fn = model.features
    for B in model.stages:
        f = np.append(extract_patch_features(image, shape, model.patch_radius, fn), 1.0)
        if f.shape[0] != B.shape[0]:
            raise DimMismatch(f"feature dim {f.shape[0]} does not match stage input {B.shape[0]}")
        shape = shape + (f @ B).reshape(-1, 2)
    return shape


def save_cascade(model: CascadeModel, path) -> None:
    # record 0: mean shape (L x 2); record 1: [patch_radius, feature_fn code]
    meta = np.array([[model.patch_radius, list(FEATURE_FNS).index(model.feature_fn)]], dtype=np.float64)
    records = [Record(Role.CASCADE, model.mean_shape), Record(Role.CASCADE, meta)]
    records += [Record(Role.CASCADE, B) for B in model.stages]
    write_records(path, records)


def load_cascade(path) -> CascadeModel:
    records = read_records(path, Role.CASCADE)
    if len(records) < 2 or records[0].data.shape[1] != 2 or records[1].data.shape != (1, 2):
        raise FormatError("cascade file must start with an Lx2 mean shape and a 1x2 meta record")
    radius, code = records[1].data[0]
    names = list(FEATURE_FNS)
    if radius != int(radius) or radius < 0 or code not in range(len(names)):
        raise FormatError("invalid cascade meta record")
    try:
        return CascadeModel(records[0].data, [r.data for r in records[2:]], int(radius), names[int(code)])
    except DimMismatch as exc:
        raise FormatError(str(exc)) from exc
