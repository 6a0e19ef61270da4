"""Synthetic two-modality phantoms with known rigid + elastic ground truth.

The anatomy (an ellipsoidal gland, spherical landmarks inside it and a few
unlabelled structures around it) is defined analytically in the moving
space.  The fixed image is rendered by pulling every fixed voxel through the
ground-truth mapping ``v -> T^-1(v + u(v))``, so applying ``gt_rigid`` and
then ``gt_field`` to the moving labels reproduces the fixed labels up to
discretisation.

Modality A (moving, MR-like) is smooth with a low-frequency bias field.
Modality B (fixed, ultrasound-like) passes the same tissue values through a
non-monotone map and multiplicative speckle, so intensity differences do
not align the pair but mutual information does.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial.transform import Rotation

from .errors import PhantomGenerationError
from .io import write_field, write_labels, write_transform, write_volume
from .losses import dsc_metric, tre_metric
from .volumes import (
    DisplacementField,
    RigidTransform,
    StructureSet,
    Volume,
    axis_angle_to_matrix,
    compose_rigid_and_field,
    identity_grid,
    jacobian_determinant,
    trilinear_sample,
)

log = logging.getLogger(__name__)

# tissue values in modality A; landmark values cycle through LANDMARK_A
BACKGROUND_A = 0.15
GLAND_A = 0.5
LANDMARK_A = (0.95, 0.2, 0.8, 0.3, 1.0)
EXTRA_A = (0.85, 0.02, 0.7)
TEXTURE_GAIN = 0.08
# gland radius is modulated by third-order Legendre terms along the first two
# principal axes; a first-order term would only shift the shape, while these
# change sign under every 180 degree turn about a principal axis
GLAND_SKEW = (0.15, 0.10)


@dataclass
class PhantomSpec:
    grid_size: int = 64
    spacing: float = 1.0
    gland_semi_axes_range: tuple = (11.0, 17.0)
    n_landmarks: object = (2, 4)
    landmark_radius_range: tuple = (2.5, 4.0)
    rigid_rotation_max: float = 15.0
    rigid_translation_max: float = 8.0
    elastic_amplitude_max: float = 3.0
    elastic_smoothness: float = 5.0
    noise_level: float = 0.2
    n_extra_structures: int = 3
    max_initial_dsc: float = None
    min_initial_tre: float = None
    seed: int = 0

    def __post_init__(self):
        if self.grid_size < 8:
            raise ValueError("grid_size must be >= 8")
        if self.spacing <= 0:
            raise ValueError("spacing must be > 0")
        lo, hi = _count_range(self.n_landmarks)
        if not 2 <= lo <= hi <= 5:
            raise ValueError("n_landmarks must lie in 2..5")
        a, b = self.gland_semi_axes_range
        if not 0 < a <= b:
            raise ValueError("invalid gland_semi_axes_range")
        if min(self.rigid_rotation_max, self.rigid_translation_max,
               self.elastic_amplitude_max, self.noise_level) < 0:
            raise ValueError("ranges must be non-negative")

    @classmethod
    def desk(cls, grid_size=32, **overrides):
        """Preset scaled for small grids (32³ by default)."""
        scale = grid_size / 64
        base = dict(
            grid_size=grid_size,
            gland_semi_axes_range=(7.5, 10.5) if grid_size < 48 else (11.0 * scale, 17.0 * scale),
            landmark_radius_range=(2.0, 3.0) if grid_size < 48 else (2.5, 4.0),
            rigid_translation_max=8.0 * scale,
            # gland-scale wavelengths; shorter ones barely move the gland surface at 32³
            elastic_amplitude_max=4.0 if grid_size < 48 else 3.0,
            elastic_smoothness=8.0 if grid_size < 48 else 5.0 * scale,
            n_landmarks=(2, 3) if grid_size < 48 else (2, 4),
            n_extra_structures=3,
        )
        base.update(overrides)
        return cls(**base)


def _count_range(n):
    if isinstance(n, (tuple, list)):
        return int(n[0]), int(n[1])
    return int(n), int(n)


@dataclass
class Anatomy:
    gland_center: np.ndarray
    gland_axes: np.ndarray
    gland_frame: np.ndarray
    landmarks: list
    extras: list
    texture: np.ndarray

    def classify(self, pts):
        """Label at physical points (..., 3): 0 bg, 1 gland, k landmark, -j extra."""
        shape = pts.shape[:-1]
        p = pts.reshape(-1, 3)
        out = np.zeros(len(p), dtype=np.int16)
        for j, (c, axes, frame) in enumerate(self.extras):
            out[_ellipsoid_level(p, c, axes, frame) <= 1] = -(j + 1)
        out[self.gland_level(p) <= 1] = 1
        for k, (c, r) in enumerate(self.landmarks, start=2):
            out[np.sum((p - c) ** 2, axis=1) <= r * r] = k
        return out.reshape(shape)

    def gland_level(self, p):
        """< 1 inside the gland, 1 on its surface."""
        return _gland_level(p, self.gland_center, self.gland_axes, self.gland_frame)


def _gland_level(p, center, axes, frame):
    n = ((p - center) @ frame) / axes
    r = np.linalg.norm(n, axis=1)
    d = n / np.maximum(r, 1e-12)[:, None]
    return r / (1 + GLAND_SKEW[0] * _legendre3(d[:, 0]) + GLAND_SKEW[1] * _legendre3(d[:, 1]))


def _legendre3(x):
    return 0.5 * (5 * x ** 3 - 3 * x)


def _ellipsoid_level(p, center, axes, frame):
    local = (p - center) @ frame
    return np.sum((local / axes) ** 2, axis=1)


@dataclass
class PhantomPair:
    fixed: Volume
    fixed_labels: StructureSet
    moving: Volume
    moving_labels: StructureSet
    gt_rigid: RigidTransform
    gt_field: DisplacementField
    spec: PhantomSpec = None
    info: dict = field(default_factory=dict)

    def gt_total(self):
        """Ground-truth fixed-grid displacement for the rigid-then-elastic map."""
        return compose_rigid_and_field(self.gt_rigid, self.gt_field, self.fixed.spacing, self.fixed.origin)


def _unit_ball(rng):
    while True:
        s = rng.uniform(-1, 1, 3)
        if s @ s <= 1:
            return s


def _fibonacci_sphere(n=64):
    i = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * i / n)
    theta = np.pi * (1 + 5 ** 0.5) * i
    return np.stack([np.cos(phi), np.sin(phi) * np.cos(theta), np.sin(phi) * np.sin(theta)], axis=1)


def _sample_anatomy(spec, rng):
    n, s = spec.grid_size, spec.spacing
    center = ((n - 1) / 2 + rng.uniform(-1.5, 1.5, 3)) * s
    lo, hi = spec.gland_semi_axes_range
    for _ in range(200):
        axes = np.sort(rng.uniform(lo, hi, 3))[::-1]
        if hi == lo or min(axes[0] / axes[1], axes[1] / axes[2]) >= min(1.15, (hi / lo) ** 0.4):
            break
    else:
        raise PhantomGenerationError("could not draw distinct gland semi-axes")
    frame = Rotation.random(random_state=rng).as_matrix()

    sphere = _fibonacci_sphere()
    n_lo, n_hi = _count_range(spec.n_landmarks)
    count = int(rng.integers(n_lo, n_hi + 1))
    landmarks = []
    for _ in range(count):
        for _ in range(500):
            r = rng.uniform(*spec.landmark_radius_range) * s
            c = center + frame @ (axes * 0.8 * _unit_ball(rng))
            shell = c + (r + 0.75 * s) * sphere
            if np.any(_gland_level(shell, center, axes, frame) >= 1):
                continue
            if any(np.linalg.norm(c - c2) <= r + r2 + s for c2, r2 in landmarks):
                continue
            landmarks.append((c, r))
            break
        else:
            raise PhantomGenerationError("landmarks do not fit inside the gland")

    extras = []
    for _ in range(spec.n_extra_structures):
        for _ in range(200):
            e_axes = rng.uniform(0.25, 0.5, 3) * axes.mean()
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            dist = axes.max() + e_axes.max() + rng.uniform(1, 4) * s
            c = center + direction * dist
            if np.all((c > 0) & (c < (n - 1) * s)):
                extras.append((c, e_axes, Rotation.random(random_state=rng).as_matrix()))
                break

    tex = ndimage.gaussian_filter(rng.normal(size=(n, n, n)), 2.0)
    tex /= np.abs(tex).max() + 1e-12
    return Anatomy(center, axes, frame, landmarks, extras, tex)


def _tissue_values(labels, texture):
    """Noise-free modality-A tissue value per sample."""
    out = np.full(labels.shape, BACKGROUND_A)
    out[labels == 1] = GLAND_A
    for k in np.unique(labels[labels >= 2]):
        out[labels == k] = LANDMARK_A[(k - 2) % len(LANDMARK_A)]
    for j in np.unique(labels[labels < 0]):
        out[labels == j] = EXTRA_A[(-j - 1) % len(EXTRA_A)]
    return out + TEXTURE_GAIN * texture


def _modality_b(values):
    # deliberately non-monotone in the modality-A value
    return 0.5 + 0.35 * np.sin(2 * np.pi * 1.3 * values + 1.0)


def _low_frequency(rng, n, sigma):
    f = ndimage.gaussian_filter(rng.normal(size=(n, n, n)), sigma)
    return f / (np.abs(f).max() + 1e-12)


def _sample_rigid(spec, rng, center):
    axis = rng.normal(size=3)
    angle = rng.uniform(0.5, 1.0) * spec.rigid_rotation_max
    R = axis_angle_to_matrix(axis, angle) if angle > 0 else np.eye(3)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    t = direction * rng.uniform(0.5, 1.0) * spec.rigid_translation_max
    return RigidTransform(R, t, center)


def _sample_field(spec, rng, region):
    n = spec.grid_size
    if spec.elastic_amplitude_max == 0:
        return DisplacementField.zeros((n, n, n))
    for _ in range(50):
        u = np.stack([ndimage.gaussian_filter(rng.normal(size=(n, n, n)), spec.elastic_smoothness)
                      for _ in range(3)])
        if region.any():
            u -= u[:, region].mean(axis=1)[:, None, None, None]
        amp = rng.uniform(0.5, 1.0) * spec.elastic_amplitude_max
        # amplitude is the largest displacement inside the gland region
        ref = u[:, region] if region.any() else u.reshape(3, -1)
        u *= amp / (np.linalg.norm(ref, axis=0).max() + 1e-12)
        f = DisplacementField(u)
        if jacobian_determinant(f).min() > 0:
            return f
    raise PhantomGenerationError("could not draw a non-folding elastic field")


def _render(spec, anatomy, T, u, rng):
    n, s = spec.grid_size, spec.spacing
    grid = identity_grid((n, n, n))

    moving_labels = anatomy.classify(grid * s)
    tissue_a = _tissue_values(moving_labels, anatomy.texture)
    bias = 1 + 0.15 * _low_frequency(rng, n, n / 4)
    mr = ndimage.gaussian_filter(tissue_a, 0.6) * bias
    mr += rng.normal(scale=0.25 * spec.noise_level, size=mr.shape)

    coords = grid + np.moveaxis(u.u, 0, -1)
    src = T.apply_inverse((coords * s).reshape(-1, 3)).reshape(coords.shape)
    fixed_labels = anatomy.classify(src)
    tex_fixed = trilinear_sample(anatomy.texture, np.clip(src / s, 0, n - 1))
    tissue_b = _modality_b(_tissue_values(fixed_labels, tex_fixed))
    us = ndimage.gaussian_filter(tissue_b, 0.6)
    if spec.noise_level > 0:
        k = 1.0 / spec.noise_level ** 2
        us = us * rng.gamma(k, 1.0 / k, size=us.shape)

    def structure(labels):
        return StructureSet(np.where(labels > 0, labels, 0))

    return (
        Volume(mr, (s, s, s)),
        structure(moving_labels),
        Volume(us, (s, s, s)),
        structure(fixed_labels),
    )


def initial_metrics(fixed_labels, moving_labels, spacing):
    dsc = dsc_metric(fixed_labels.gland_mask(), moving_labels.gland_mask())
    try:
        tre = tre_metric(fixed_labels, moving_labels, spacing)
    except ValueError:
        tre = float("nan")
    return dsc, tre


def generate_pair(spec):
    """Deterministic phantom pair for ``spec``.

    With ``max_initial_dsc`` / ``min_initial_tre`` set, draws violating the
    difficulty band are rejected and redrawn from the same generator.
    """
    rng = np.random.default_rng(spec.seed)
    n, s = spec.grid_size, spec.spacing
    for attempt in range(100):
        try:
            anatomy = _sample_anatomy(spec, rng)
        except PhantomGenerationError:
            continue
        T = _sample_rigid(spec, rng, anatomy.gland_center)
        # region used to centre the elastic field: gland after the rigid motion only
        grid = identity_grid((n, n, n))
        src = T.apply_inverse((grid * s).reshape(-1, 3)).reshape(grid.shape)
        region = anatomy.classify(src) >= 1
        u = _sample_field(spec, rng, region)
        moving, moving_labels, fixed, fixed_labels = _render(spec, anatomy, T, u, rng)
        dsc, tre = initial_metrics(fixed_labels, moving_labels, (s, s, s))
        if set(fixed_labels.class_ids) != set(moving_labels.class_ids):
            continue
        if spec.max_initial_dsc is not None and dsc >= spec.max_initial_dsc:
            continue
        if spec.min_initial_tre is not None and not tre > spec.min_initial_tre:
            continue
        amp = float(np.linalg.norm(u.u[:, region], axis=0).max()) if region.any() else 0.0
        info = {"initial_dsc": dsc, "initial_tre": tre, "attempts": attempt + 1, "elastic_amplitude": amp}
        return PhantomPair(fixed, fixed_labels, moving, moving_labels, T, u, spec, info)
    raise PhantomGenerationError("no draw satisfied the difficulty band")


def generate_dataset(spec, n_pairs):
    """``n_pairs`` phantoms with seeds ``spec.seed, spec.seed + 1, ...``."""
    return [generate_pair(replace(spec, seed=spec.seed + i)) for i in range(n_pairs)]


@dataclass
class ErrorReport:
    rotation_deg: float
    translation_mm: float
    epe_vox: float

    def as_dict(self):
        return {"rotation_deg": self.rotation_deg, "translation_mm": self.translation_mm,
                "epe_vox": self.epe_vox}


def rigid_errors(gt, predicted, at):
    """Rotation angle (deg) of ``R_pred R_gt^T`` and mm offset of the two maps at ``at``."""
    dR = predicted.rotation @ gt.rotation.T
    rot = RigidTransform(dR).rotation_angle()
    trans = float(np.linalg.norm(predicted.apply(at) - gt.apply(at)))
    return rot, trans


def oracle_metrics(pair, predicted_rigid, predicted_field=None):
    """Compare a predicted rigid (+ optional field) against the ground truth.

    Translation error is measured at the moving gland centroid, which makes
    it independent of the rotation centre either transform uses.  End-point
    error is the mean voxel distance between predicted and ground-truth
    total displacements over the fixed gland.
    """
    s = np.asarray(pair.moving.spacing)
    centroid = np.argwhere(pair.moving_labels.gland_mask()).mean(axis=0) * s + np.asarray(pair.moving.origin)
    rot, trans = rigid_errors(pair.gt_rigid, predicted_rigid, centroid)
    if predicted_field is None:
        predicted_field = DisplacementField.zeros(pair.fixed.shape)
    pred = compose_rigid_and_field(predicted_rigid, predicted_field, pair.fixed.spacing, pair.fixed.origin)
    gland = pair.fixed_labels.gland_mask()
    diff = np.linalg.norm(pred.u - pair.gt_total().u, axis=0)
    return ErrorReport(rot, trans, float(diff[gland].mean()))


def write_case(pair, folder, with_ground_truth=True):
    """Write a phantom as a case folder (same layout as real data)."""
    folder = Path(folder)
    folder.mkdir(parents=True, exist_ok=True)
    write_volume(pair.moving, folder / "mr.nii.gz")
    write_volume(pair.fixed, folder / "trus.nii.gz")
    write_labels(pair.moving_labels, pair.moving, folder / "mr_label.nii.gz")
    write_labels(pair.fixed_labels, pair.fixed, folder / "trus_label.nii.gz")
    if with_ground_truth:
        write_transform(pair.gt_rigid, folder / "gt_rigid.txt")
        np.savetxt(folder / "gt_rigid_center.txt", pair.gt_rigid.center[None], fmt="%.12g")
        write_field(pair.gt_field, pair.fixed, folder / "gt_field.nii.gz")
    return folder
