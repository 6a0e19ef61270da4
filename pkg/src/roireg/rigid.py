"""Mask-based rigid alignment and ROI extraction.

The rigid stage matches gland masks only.  Initial guesses come from
centroids and principal axes; the best guess is refined by coordinate
descent on the mean squared error between the fixed mask and the warped,
Gaussian-smoothed moving mask.  The ROI stage crops both images to one cube
around the union of the gland masks and resamples it to the network grid.
"""
from __future__ import annotations

import itertools
import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from sklearn.base import BaseEstimator
from sklearn.exceptions import ConvergenceWarning

from .errors import AlignmentError, ROIError
from .validation import check_spacing
from .volumes import (
    DisplacementField,
    RigidTransform,
    StructureSet,
    Volume,
    apply_rigid,
    euler_to_matrix,
    identity_grid,
    trilinear_sample,
)

log = logging.getLogger(__name__)


def _as_mask(m):
    if isinstance(m, StructureSet):
        return m.gland_mask()
    return np.asarray(m).astype(bool)


def _moments(mask, spacing, origin):
    pts = np.argwhere(mask) * spacing + origin
    c = pts.mean(axis=0)
    cov = np.cov((pts - c).T, bias=True)
    w, v = np.linalg.eigh(cov)
    return c, v[:, np.argsort(w)[::-1]]


def initial_candidates(fixed_mask, moving_mask, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)):
    """Centroid-matching transforms: the 4 proper principal-axis pairings plus no rotation.

    All candidates rotate about the moving centroid and map it onto the fixed
    centroid.
    """
    s = np.asarray(check_spacing(spacing))
    o = np.asarray(origin, dtype=float)
    cf, Ef = _moments(fixed_mask, s, o)
    cm, Em = _moments(moving_mask, s, o)
    out = []
    for signs in itertools.product((1, -1), repeat=3):
        S = np.diag(signs)
        R = Ef @ S @ Em.T
        if np.linalg.det(R) > 0:
            out.append(RigidTransform(R, cf - cm, cm))
    out.append(RigidTransform(np.eye(3), cf - cm, cm))
    return out


class _MaskCost:
    """Normalised MSE between smoothed fixed and smoothed moving masks.

    The moving mask is pulled through ``T^-1``; both masks get the same
    Gaussian so that perfect alignment costs (nearly) zero.  The cost is
    divided by the mean squared smoothed fixed mask and evaluated on a box
    around the fixed mask, subsampled by ``stride``.
    """

    def __init__(self, fixed, moving, spacing, origin, stride, sigma, margin):
        self.spacing = spacing
        self.origin = origin
        self.moving = ndimage.gaussian_filter(moving.astype(np.float64), sigma * stride, mode="constant")
        smooth_fixed = ndimage.gaussian_filter(fixed.astype(np.float64), sigma * stride, mode="constant")
        idx = np.argwhere(fixed)
        lo = np.maximum(idx.min(axis=0) - margin, 0)
        hi = np.minimum(idx.max(axis=0) + margin + 1, fixed.shape)
        axes = [np.arange(a, b, stride) for a, b in zip(lo, hi)]
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
        self.points = grid * spacing + origin
        self.target = smooth_fixed[tuple(grid.T)]
        self.norm = float(np.mean(self.target ** 2))
        self.n_evals = 0

    def __call__(self, T):
        self.n_evals += 1
        src = (T.apply_inverse(self.points) - self.origin) / self.spacing
        w = ndimage.map_coordinates(self.moving, src.T, order=1, mode="constant", cval=0.0)
        return float(np.mean((w - self.target) ** 2)) / self.norm


def _perturbed(base, params):
    R = euler_to_matrix(params[:3]) @ base.rotation
    return RigidTransform(R, base.translation + params[3:], base.center)


def _coordinate_descent(cost, base, step_angle, step_trans, tol, max_iter, min_step):
    """Greedy +/- step search over (3 angles, 3 translations).

    A sweep whose relative improvement is below ``tol`` halves the steps;
    convergence is reached once the steps fall under ``min_step``.
    """
    params = np.zeros(6)
    steps = np.array([step_angle] * 3 + [step_trans] * 3, dtype=float)
    floor = np.array([min_step[0]] * 3 + [min_step[1]] * 3)
    best = cost(_perturbed(base, params))
    for it in range(max_iter):
        start = best
        for i, sign in itertools.product(range(6), (1, -1)):
            trial = params.copy()
            trial[i] += sign * steps[i]
            c = cost(_perturbed(base, trial))
            if c < best * (1 - 1e-9):
                best, params = c, trial
        if start - best <= tol * start:
            steps /= 2
            if np.all(steps < floor):
                return _perturbed(base, params), best, True, it + 1
    return _perturbed(base, params), best, False, max_iter


@dataclass
class RigidResult:
    transform: RigidTransform
    cost: float
    converged: bool
    iterations: list
    initial_cost: float


def estimate_rigid(fixed_mask, moving_mask, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0),
                   sigma=2.0, levels=3, tol=1e-4, max_iter=200, margin=6, tie_tol=0.05,
                   return_result=False):
    """Rigid transform (moving -> fixed) aligning two gland masks on a shared grid.

    Non-convergence at any level emits a ``ConvergenceWarning`` and the best
    iterate is returned.
    """
    f = _as_mask(fixed_mask)
    m = _as_mask(moving_mask)
    if f.shape != m.shape:
        raise AlignmentError(f"mask grids differ: {f.shape} vs {m.shape}")
    if not f.any() or not m.any():
        raise AlignmentError("gland mask is empty")
    s = np.asarray(check_spacing(spacing))
    o = np.asarray(origin, dtype=float)

    strides = [2 ** k for k in range(levels - 1, -1, -1)]
    h = float(s.min())

    def refine(cost, T, stride):
        return _coordinate_descent(cost, T, 2.0 * stride, h * stride, tol, max_iter,
                                   (0.01 * stride, 0.01 * h * stride))

    # every candidate runs the whole pyramid and the choice is made at full
    # resolution: heavy smoothing on the coarse levels hides the asymmetries
    # that tell a flipped gland from the right one
    candidates = initial_candidates(f, m, s, o)
    costs = [_MaskCost(f, m, s, o, stride, sigma, margin) for stride in strides]
    initial = min(costs[-1](T) for T in candidates)
    refined = []
    for T in candidates:
        ok_all, its = True, []
        for stride, cost in zip(strides, costs):
            T, c, ok, n = refine(cost, T, stride)
            ok_all &= ok
            its.append(n)
        refined.append((T, c, ok_all, its))
        log.debug("rigid candidate cost=%.6g iters=%s", c, its)
    scores = np.array([r[1] for r in refined])
    # near-ties (symmetric masks) resolve to the smallest rotation
    near = np.flatnonzero(scores <= scores.min() * (1 + tie_tol) + 1e-6)
    best = min(near, key=lambda i: refined[i][0].rotation_angle())
    T, c, converged, iters = refined[best]
    if not converged:
        warnings.warn("rigid refinement hit the iteration limit; returning the best iterate",
                      ConvergenceWarning, stacklevel=2)
    result = RigidResult(T, c, converged, iters, initial)
    return result if return_result else T


class RigidMaskAligner(BaseEstimator):
    """``fit(fixed_mask, moving_mask)`` then ``transform(moving Volume / labels)``."""

    def __init__(self, sigma=2.0, levels=3, tol=1e-4, max_iter=200, margin=6):
        self.sigma = sigma
        self.levels = levels
        self.tol = tol
        self.max_iter = max_iter
        self.margin = margin

    def fit(self, fixed_mask, moving_mask, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)):
        res = estimate_rigid(fixed_mask, moving_mask, spacing, origin, self.sigma, self.levels,
                             self.tol, self.max_iter, self.margin, return_result=True)
        self.transform_ = res.transform
        self.converged_ = res.converged
        self.cost_ = res.cost
        return self

    def transform(self, vol, mode="linear"):
        if not hasattr(self, "transform_"):
            raise AlignmentError("aligner is not fitted")
        if isinstance(vol, StructureSet):
            return StructureSet(apply_rigid(vol.labels, self.transform_, "nearest"), vol.class_ids)
        return apply_rigid(vol, self.transform_, mode)


# --------------------------------------------------------------------------
# ROI extraction


@dataclass(frozen=True)
class ROIBox:
    """Half-open voxel box ``[low, high)`` on the fixed grid."""

    low: tuple
    high: tuple
    margin: int = 0

    @property
    def side(self):
        return tuple(int(h - l) for l, h in zip(self.low, self.high))

    @property
    def slices(self):
        return tuple(slice(int(l), int(h)) for l, h in zip(self.low, self.high))

    def scale(self, grid):
        """Full-grid voxels per ROI-grid voxel along each axis."""
        return np.array([(n - 1) / (grid - 1) for n in self.side], dtype=float)


def roi_box(masks, margin=8):
    """Cube around the union of ``masks`` grown by ``margin``.

    The cube is shifted back inside the grid when it sticks out and only
    clipped when it is larger than the grid itself.
    """
    union = None
    for m in masks:
        m = _as_mask(m)
        union = m if union is None else (union | m)
    if union is None or not union.any():
        raise ROIError("union of gland masks is empty")
    shape = np.asarray(union.shape)
    idx = np.argwhere(union)
    lo = idx.min(axis=0) - margin
    hi = idx.max(axis=0) + 1 + margin
    side = int((hi - lo).max())
    extra = side - (hi - lo)
    lo = lo - extra // 2
    hi = lo + side
    shift = np.where(lo < 0, -lo, 0) + np.where(hi > shape, shape - hi, 0)
    lo, hi = lo + shift, hi + shift
    lo, hi = np.maximum(lo, 0), np.minimum(hi, shape)
    return ROIBox(tuple(int(v) for v in lo), tuple(int(v) for v in hi), int(margin))


def crop_resample(data, box, grid, mode="linear"):
    """Crop ``data`` to ``box`` and resample to ``grid``³ (corner-aligned)."""
    crop = np.asarray(data)[box.slices]
    if crop.shape == (grid,) * 3:
        return crop.copy()
    coords = identity_grid((grid,) * 3) * box.scale(grid)
    if mode == "nearest":
        idx = np.floor(coords + 0.5).astype(int)
        return crop[idx[..., 0], idx[..., 1], idx[..., 2]]
    return trilinear_sample(crop.astype(np.float64), coords)


def roi_field_to_full(field, box, full_shape):
    """Express an ROI-grid field on the full grid (zero outside the box)."""
    u = field.u if isinstance(field, DisplacementField) else np.asarray(field, dtype=float)
    grid = u.shape[1]
    scale = box.scale(grid)
    out = np.zeros((3,) + tuple(full_shape))
    if np.array_equal(box.side, (grid,) * 3):
        out[(slice(None),) + box.slices] = u
        return DisplacementField(out)
    coords = identity_grid(box.side) / scale
    for c in range(3):
        out[(c,) + box.slices] = scale[c] * trilinear_sample(u[c], coords)
    return DisplacementField(out)


@dataclass
class ROIPair:
    box: ROIBox
    fixed: np.ndarray
    moving: np.ndarray
    fixed_labels: StructureSet
    moving_labels: StructureSet


def extract_roi(fixed, fixed_labels, moving, moving_labels, margin=8, grid=32,
                fixed_mask=None, moving_mask=None):
    """Crop fixed and (rigidly aligned) moving inputs to one shared cube.

    The box comes from ``fixed_mask``/``moving_mask`` when given (predicted
    masks in the pipeline), else from the label sets' gland regions.
    """
    fm = fixed_mask if fixed_mask is not None else fixed_labels
    mm = moving_mask if moving_mask is not None else moving_labels
    box = roi_box([fm, mm], margin)
    fdat = fixed.data if isinstance(fixed, Volume) else fixed
    mdat = moving.data if isinstance(moving, Volume) else moving

    def labels(ss):
        if ss is None:
            return None
        return StructureSet(crop_resample(ss.labels, box, grid, "nearest"), ss.class_ids)

    return ROIPair(box, crop_resample(fdat, box, grid), crop_resample(mdat, box, grid),
                   labels(fixed_labels), labels(moving_labels))
