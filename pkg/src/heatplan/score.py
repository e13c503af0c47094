"""Score fields (grad log p on the grid) and continuous-state evaluation.

The grid field is differenced first (central interior, one-sided at the map
edges, on the floored log) and the resulting vectors are bilinearly
interpolated at query states, mirroring an output-vector-field-then-
interpolate model structure. Components are (d/dx, d/dy) in 1/cell units.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernel import ProbabilityField

DEFAULT_FLOOR = 1e-12


@dataclass(frozen=True, eq=False)
class ScoreField:
    """Per-cell 2-vectors of grad log p; finite everywhere by flooring."""

    vectors: np.ndarray
    floor: float = DEFAULT_FLOOR

    def __post_init__(self):
        vec = np.ascontiguousarray(self.vectors, dtype=np.float64)
        if vec.ndim != 3 or vec.shape[2] != 2:
            raise ValueError("vectors must have shape (H, W, 2)")
        if not np.isfinite(vec).all():
            raise ValueError("score vectors must be finite")
        vec.flags.writeable = False
        object.__setattr__(self, "vectors", vec)

    @property
    def width(self) -> int:
        return self.vectors.shape[1]

    @property
    def height(self) -> int:
        return self.vectors.shape[0]


def score_field(p: ProbabilityField | np.ndarray, floor: float = DEFAULT_FLOOR) -> ScoreField:
    """Differentiate log(max(p, floor)) on the grid."""
    values = p.values if isinstance(p, ProbabilityField) else np.asarray(p, dtype=np.float64)
    if floor <= 0:
        raise ValueError("floor must be positive")
    logp = np.log(np.maximum(values, floor))
    gx = np.gradient(logp, axis=1)
    gy = np.gradient(logp, axis=0)
    return ScoreField(np.stack([gx, gy], axis=-1), floor)


def interpolate_vectors(vectors: np.ndarray, xy: np.ndarray) -> np.ndarray:
    """Bilinear lookup of a (H, W, 2) vector grid at (N, 2) states.

    Exact on componentwise-affine fields; callers must pass in-domain states.
    """
    height, width = vectors.shape[:2]
    xy = np.asarray(xy, dtype=np.float64)
    x = xy[:, 0]
    y = xy[:, 1]
    x0 = np.clip(np.floor(x).astype(np.intp), 0, width - 2)
    y0 = np.clip(np.floor(y).astype(np.intp), 0, height - 2)
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]
    v00 = vectors[y0, x0]
    v10 = vectors[y0, x0 + 1]
    v01 = vectors[y0 + 1, x0]
    v11 = vectors[y0 + 1, x0 + 1]
    return v00 + fx * (v10 - v00) + fy * (v01 - v00) + fx * fy * (v11 - v10 - v01 + v00)


def _check_domain(xy: np.ndarray, width: int, height: int):
    x = xy[..., 0]
    y = xy[..., 1]
    if ((x < 0) | (x > width - 1) | (y < 0) | (y > height - 1)).any():
        raise ValueError("state outside the map domain")


def score_at(field: ScoreField, state) -> np.ndarray:
    """Score vector at one continuous state (errors outside the domain)."""
    xy = np.asarray(state, dtype=np.float64).reshape(1, 2)
    _check_domain(xy, field.width, field.height)
    return interpolate_vectors(field.vectors, xy)[0]


def score_at_many(field: ScoreField, xy: np.ndarray) -> np.ndarray:
    """Vectorized score_at for (N, 2) states."""
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    _check_domain(xy, field.width, field.height)
    return interpolate_vectors(field.vectors, xy)


def analytic_gaussian_score(state, means, sigma: float, weights=None) -> np.ndarray:
    """Exact score of an isotropic Gaussian mixture at the given state(s).

    Accepts a single (2,) state or a batch (N, 2); responsibilities are
    computed with a log-sum-exp shift for stability.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    xy = np.asarray(state, dtype=np.float64)
    single = xy.ndim == 1
    xy = xy.reshape(-1, 2)
    mu = np.asarray(means, dtype=np.float64).reshape(-1, 2)
    if weights is None:
        w = np.full(len(mu), 1.0 / len(mu))
    else:
        w = np.asarray(weights, dtype=np.float64)
        if abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("weights must sum to 1")
    diff = xy[:, None, :] - mu[None, :, :]  # (N, M, 2)
    logw = np.log(w)[None, :] - (diff ** 2).sum(-1) / (2.0 * sigma * sigma)
    logw -= logw.max(axis=1, keepdims=True)
    resp = np.exp(logw)
    resp /= resp.sum(axis=1, keepdims=True)
    out = -(resp[:, :, None] * diff).sum(axis=1) / (sigma * sigma)
    return out[0] if single else out
