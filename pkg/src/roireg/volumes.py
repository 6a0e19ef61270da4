"""Volume data model, resampling, padding, sampling and warping.

Axis order is (D, H, W) = (z, y, x) everywhere, and every coordinate vector
(spacing, origin, translations, displacements) follows the same order.
Physical position of voxel ``i`` is ``origin + i * spacing`` (mm).

Displacement fields are stored in voxel units of the grid they live on; the
moving image is sampled at ``v + u(v)``.  Samples outside the grid read 0.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from scipy import ndimage

from .validation import (
    check_array3d,
    check_mode,
    check_positive,
    check_shape3,
    check_spacing,
)

ORTHO_TOL = 1e-6


@dataclass
class Volume:
    """Scalar 3D intensity grid with physical geometry."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.data = check_array3d(self.data)
        self.spacing = check_spacing(self.spacing)
        self.origin = tuple(float(o) for o in self.origin)
        if len(self.origin) != 3:
            raise ValueError("origin must have 3 components")

    @property
    def shape(self):
        return self.data.shape

    def with_data(self, data):
        return Volume(data, self.spacing, self.origin)

    def index_to_physical(self, idx):
        return np.asarray(self.origin) + np.asarray(idx, dtype=float) * np.asarray(self.spacing)

    def physical_to_index(self, pts):
        return (np.asarray(pts, dtype=float) - np.asarray(self.origin)) / np.asarray(self.spacing)


@dataclass
class StructureSet:
    """Multi-class label grid; 0 is background, 1 the gland, >=2 landmarks."""

    labels: np.ndarray
    class_ids: list = field(default=None)

    def __post_init__(self):
        labels = check_array3d(self.labels)
        if labels.dtype.kind not in "iub":
            if not np.array_equal(labels, np.round(labels)):
                raise ValueError("labels must be integer valued")
        self.labels = labels.astype(np.int16)
        present = sorted(int(c) for c in np.unique(self.labels) if c != 0)
        if self.class_ids is None:
            self.class_ids = present
        else:
            self.class_ids = sorted(int(c) for c in self.class_ids)
            stray = set(present) - set(self.class_ids)
            if stray:
                raise ValueError(f"labels contain classes not in class_ids: {sorted(stray)}")

    @property
    def shape(self):
        return self.labels.shape

    @property
    def landmark_ids(self):
        return [c for c in self.class_ids if c >= 2]

    def mask(self, class_id=1):
        return self.labels == class_id

    def gland_mask(self):
        """Gland region: class 1 with enclosed landmark holes filled."""
        return ndimage.binary_fill_holes(self.labels == 1)

    def channels(self, class_ids):
        """Stacked (K, D, H, W) float masks; channel for class 1 is the gland region."""
        out = np.zeros((len(class_ids),) + self.shape, dtype=np.float64)
        for i, k in enumerate(class_ids):
            out[i] = self.gland_mask() if k == 1 else (self.labels == k)
        return out

    def without(self, class_ids):
        labels = self.labels.copy()
        labels[np.isin(labels, list(class_ids))] = 0
        return StructureSet(labels)

    def check_matches(self, vol):
        if self.shape != vol.shape:
            raise ValueError(f"label grid {self.shape} does not match volume {vol.shape}")


@dataclass(frozen=True)
class RigidTransform:
    """``T(p) = R (p - center) + center + translation`` in mm.

    Maps points of the moving image's space to the fixed space, so warping a
    moving image samples it at ``T^-1(p)``.
    """

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float)
        if R.shape != (3, 3) or not np.isfinite(R).all():
            raise ValueError("rotation must be a finite 3x3 matrix")
        if np.abs(R @ R.T - np.eye(3)).max() > ORTHO_TOL or abs(np.linalg.det(R) - 1) > ORTHO_TOL:
            raise ValueError("rotation must be orthonormal with determinant +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float).reshape(3))

    @classmethod
    def identity(cls, center=(0.0, 0.0, 0.0)):
        return cls(np.eye(3), np.zeros(3), center)

    @classmethod
    def from_angles(cls, angles, translation=(0.0, 0.0, 0.0), center=(0.0, 0.0, 0.0), degrees=True):
        """Rotation ``Rz(a0) @ Ry(a1) @ Rx(a2)`` where a0 turns about array axis 0."""
        return cls(euler_to_matrix(angles, degrees=degrees), translation, center)

    @classmethod
    def from_matrix(cls, matrix, center=(0.0, 0.0, 0.0)):
        M = np.asarray(matrix, dtype=float)
        c = np.asarray(center, dtype=float)
        R, b = M[:3, :3], M[:3, 3]
        return cls(R, b - c + R @ c, c)

    @property
    def matrix(self):
        """4x4 homogeneous matrix acting on physical points."""
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.center + self.translation - self.rotation @ self.center
        return M

    def apply(self, points):
        p = np.asarray(points, dtype=float)
        return (p - self.center) @ self.rotation.T + self.center + self.translation

    def apply_inverse(self, points):
        p = np.asarray(points, dtype=float)
        return (p - self.center - self.translation) @ self.rotation + self.center

    def inverse(self):
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation, self.center)

    def compose(self, other):
        """``self ∘ other``: apply ``other`` first."""
        return RigidTransform.from_matrix(self.matrix @ other.matrix, center=other.center)

    def rotation_angle(self):
        """Rotation magnitude in degrees."""
        c = np.clip((np.trace(self.rotation) - 1) / 2, -1.0, 1.0)
        return float(np.degrees(np.arccos(c)))


def euler_to_matrix(angles, degrees=True):
    a = np.radians(angles) if degrees else np.asarray(angles, dtype=float)
    c, s = np.cos(a), np.sin(a)
    # rotation in the (1,2) plane turns about axis 0, etc.
    r0 = np.array([[1, 0, 0], [0, c[0], -s[0]], [0, s[0], c[0]]])
    r1 = np.array([[c[1], 0, s[1]], [0, 1, 0], [-s[1], 0, c[1]]])
    r2 = np.array([[c[2], -s[2], 0], [s[2], c[2], 0], [0, 0, 1]])
    return r0 @ r1 @ r2


def axis_angle_to_matrix(axis, angle, degrees=True):
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    theta = np.radians(angle) if degrees else float(angle)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(theta) * K + (1 - np.cos(theta)) * K @ K


@dataclass
class DisplacementField:
    """Per-voxel displacement ``u`` (3, D, H, W) in voxel units of its grid."""

    u: np.ndarray

    def __post_init__(self):
        u = np.asarray(self.u, dtype=float)
        if u.ndim != 4 or u.shape[0] != 3:
            raise ValueError(f"displacement must have shape (3, D, H, W), got {u.shape}")
        if not np.isfinite(u).all():
            raise ValueError("displacement contains non-finite values")
        self.u = u

    @property
    def shape(self):
        return self.u.shape[1:]

    @classmethod
    def zeros(cls, shape):
        return cls(np.zeros((3,) + check_shape3(shape)))

    def coordinates(self):
        """Absolute sampling coordinates ``v + u(v)`` with shape (D, H, W, 3)."""
        return identity_grid(self.shape) + np.moveaxis(self.u, 0, -1)


def identity_grid(shape, dtype=np.float64):
    axes = [np.arange(n, dtype=dtype) for n in shape]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


# --------------------------------------------------------------------------
# torch sampling kernels (differentiable w.r.t. image values and coordinates)


def sample_grid(vol, coords, mode="linear"):
    """Sample ``vol`` (N, C, D, H, W) at voxel ``coords`` (N, *S, 3).

    Returns (N, C, *S).  Corners that fall outside the grid contribute 0.
    """
    N, C = vol.shape[:2]
    dims = vol.shape[2:]
    spatial = coords.shape[1:-1]
    flat = vol.reshape(N, C, -1)
    pts = coords.reshape(N, -1, 3)
    if mode == "nearest":
        idx = torch.floor(pts + 0.5).long()
        inside = torch.ones(pts.shape[:2], dtype=torch.bool, device=vol.device)
        for a in range(3):
            inside &= (idx[..., a] >= 0) & (idx[..., a] < dims[a])
        lin = _linear_index(idx, dims).clamp(0, flat.shape[-1] - 1)
        out = flat.gather(2, lin.unsqueeze(1).expand(N, C, -1))
        out = out * inside.unsqueeze(1).to(vol.dtype)
        return out.reshape(N, C, *spatial)

    base = torch.floor(pts)
    frac = pts - base
    base = base.long()
    out = None
    for corner in range(8):
        offs = [(corner >> (2 - a)) & 1 for a in range(3)]
        idx = base + torch.tensor(offs, device=vol.device)
        w = torch.ones(pts.shape[:2], dtype=vol.dtype, device=vol.device)
        inside = torch.ones(pts.shape[:2], dtype=torch.bool, device=vol.device)
        for a in range(3):
            w = w * (frac[..., a] if offs[a] else 1 - frac[..., a])
            inside &= (idx[..., a] >= 0) & (idx[..., a] < dims[a])
        lin = _linear_index(idx, dims).clamp(0, flat.shape[-1] - 1)
        vals = flat.gather(2, lin.unsqueeze(1).expand(N, C, -1))
        term = vals * (w * inside.to(vol.dtype)).unsqueeze(1)
        out = term if out is None else out + term
    return out.reshape(N, C, *spatial)


def _linear_index(idx, dims):
    return (idx[..., 0] * dims[1] + idx[..., 1]) * dims[2] + idx[..., 2]


def torch_identity_grid(shape, dtype=torch.float32, device=None):
    axes = [torch.arange(n, dtype=dtype, device=device) for n in shape]
    return torch.stack(torch.meshgrid(*axes, indexing="ij"), dim=-1)


def warp_tensor(vol, u, mode="linear"):
    """Warp (N, C, D, H, W) by displacement (N, 3, D, H, W) on the same grid."""
    grid = torch_identity_grid(u.shape[2:], dtype=u.dtype, device=u.device)
    coords = grid.unsqueeze(0) + u.permute(0, 2, 3, 4, 1)
    return sample_grid(vol, coords, mode)


def forward_gradient(u):
    """Forward differences of (N, C, D, H, W) along the 3 spatial axes.

    Returns (N, C, 3, D, H, W); the last slice along each axis is 0.
    """
    grads = []
    for axis in (2, 3, 4):
        d = torch.diff(u, dim=axis)
        pad = [0, 0, 0, 0, 0, 0]
        pad[2 * (4 - axis) + 1] = 1
        grads.append(torch.nn.functional.pad(d, pad))
    return torch.stack(grads, dim=2)


# --------------------------------------------------------------------------
# numpy-facing operations


def _as_tensor(arr):
    return torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float64))


def trilinear_sample(vol, coords):
    """Trilinear interpolation of ``vol`` at continuous voxel ``coords`` (..., 3)."""
    data = vol.data if isinstance(vol, Volume) else check_array3d(vol)
    coords = np.asarray(coords, dtype=float)
    if coords.shape[-1] != 3:
        raise ValueError("coords must have a trailing dimension of 3")
    if not np.isfinite(coords).all():
        raise ValueError("coords contain non-finite values")
    lead = coords.shape[:-1]
    with torch.no_grad():
        out = sample_grid(_as_tensor(data)[None, None], _as_tensor(coords.reshape(1, -1, 3)))
    return out.numpy().reshape(lead)


def warp_with_field(vol, field, mode="linear"):
    """Resample ``vol`` at ``v + u(v)``; ``nearest`` keeps the label set."""
    check_mode(mode)
    u = field.u if isinstance(field, DisplacementField) else np.asarray(field, dtype=float)
    data = vol.data if isinstance(vol, Volume) else np.asarray(vol)
    if u.shape[1:] != data.shape:
        raise ValueError(f"field grid {u.shape[1:]} does not match volume {data.shape}")
    with torch.no_grad():
        out = warp_tensor(_as_tensor(data)[None, None], _as_tensor(u)[None], mode)
    out = out.numpy()[0, 0]
    if mode == "nearest":
        out = out.astype(data.dtype)
    if isinstance(vol, Volume):
        return vol.with_data(out)
    return out


def warp_labels(labels, field):
    """Warp a label grid: each class one-hot is warped linearly, then argmax.

    Ties and all-zero samples (outside the grid) resolve to background.
    """
    arr = labels.labels if isinstance(labels, StructureSet) else np.asarray(labels)
    ids = [0] + sorted(int(c) for c in np.unique(arr) if c != 0)
    u = field.u if isinstance(field, DisplacementField) else np.asarray(field, dtype=float)
    if u.shape[1:] != arr.shape:
        raise ValueError(f"field grid {u.shape[1:]} does not match labels {arr.shape}")
    onehot = np.stack([arr == k for k in ids]).astype(np.float64)
    with torch.no_grad():
        w = warp_tensor(_as_tensor(onehot)[None], _as_tensor(u)[None]).numpy()[0]
    w[0] += 1e-9
    out = np.asarray(ids, dtype=np.int16)[w.argmax(axis=0)]
    if isinstance(labels, StructureSet):
        return StructureSet(out, class_ids=labels.class_ids)
    return out


def _rigid_index_map(T, spacing, origin):
    """Affine map (A, b) from output voxel index to input voxel index."""
    s = np.asarray(spacing, dtype=float)
    o = np.asarray(origin, dtype=float)
    # idx_in = (T^-1(o + s*idx_out) - o) / s
    Rt = T.rotation.T
    A = (Rt * s[None, :]) / s[:, None]
    b = (Rt @ (o - T.center - T.translation) + T.center - o) / s
    return A, b


def apply_rigid(vol, T, mode="linear", spacing=None, origin=None):
    """Resample ``vol`` on its own grid at ``T^-1(physical(v))``."""
    check_mode(mode)
    if not isinstance(T, RigidTransform):
        raise ValueError("T must be a RigidTransform")
    if isinstance(vol, Volume):
        data, spacing, origin = vol.data, vol.spacing, vol.origin
    else:
        data = np.asarray(vol)
        spacing = check_spacing(spacing if spacing is not None else 1.0)
        origin = origin if origin is not None else (0.0, 0.0, 0.0)
    A, b = _rigid_index_map(T, spacing, origin)
    order = 1 if mode == "linear" else 0
    src = data.astype(np.float64) if mode == "linear" else data
    out = ndimage.affine_transform(src, A, offset=b, order=order, mode="grid-constant", cval=0.0)
    if isinstance(vol, Volume):
        return vol.with_data(out)
    return out


def rigid_to_field(T, grid_shape, spacing, origin=(0.0, 0.0, 0.0)):
    """Displacement ``voxel(T^-1(physical(v))) - v`` on the given grid."""
    shape = check_shape3(grid_shape)
    A, b = _rigid_index_map(T, check_spacing(spacing), origin)
    grid = identity_grid(shape)
    src = grid @ A.T + b
    return DisplacementField(np.moveaxis(src - grid, -1, 0))


def compose_rigid_and_field(T, field, spacing, origin=(0.0, 0.0, 0.0)):
    """Total displacement of ``v -> rigid_index_map(v + u(v))``.

    This is the mapping of "apply ``T``, then warp by ``field``" expressed
    as a single field on the fixed grid.  The rigid map is affine, so no
    interpolation is involved.
    """
    u = field.u if isinstance(field, DisplacementField) else np.asarray(field, dtype=float)
    A, b = _rigid_index_map(T, check_spacing(spacing), origin)
    grid = identity_grid(u.shape[1:])
    x = grid + np.moveaxis(u, 0, -1)
    return DisplacementField(np.moveaxis(x @ A.T + b - grid, -1, 0))


def compose_fields(outer, inner):
    """Field of ``x -> outer_map(inner_map(x))`` where ``map(x) = x + u(x)``.

    ``inner`` is evaluated first, so ``outer`` is sampled (linearly) at the
    inner-displaced positions.
    """
    uo = outer.u if isinstance(outer, DisplacementField) else outer
    ui = inner.u if isinstance(inner, DisplacementField) else inner
    coords = identity_grid(ui.shape[1:]) + np.moveaxis(ui, 0, -1)
    with torch.no_grad():
        s = sample_grid(_as_tensor(uo)[None], _as_tensor(coords)[None]).numpy()[0]
    return DisplacementField(ui + s)


def field_gradient(field):
    """Jacobian of ``u``: array (3, 3, D, H, W) with ``[c, a] = du_c / dx_a``."""
    u = field.u if isinstance(field, DisplacementField) else np.asarray(field, dtype=float)
    with torch.no_grad():
        g = forward_gradient(_as_tensor(u)[None])[0]
    return g.numpy()


def jacobian_determinant(field):
    g = field_gradient(field)
    J = np.moveaxis(g, (0, 1), (-2, -1)) + np.eye(3)
    return np.linalg.det(J)


def resample_isotropic(vol, target_spacing, labels=False):
    """Resample to ``(t, t, t)`` spacing; shape ``round(shape * spacing / t)``.

    The origin is kept.  Intensities are trilinear with edge clamping;
    ``labels=True`` switches to nearest neighbour.
    """
    check_positive(target_spacing, "target_spacing")
    t = float(target_spacing)
    spacing = np.asarray(vol.spacing)
    new_shape = tuple(max(1, int(round(n * s / t))) for n, s in zip(vol.shape, spacing))
    if new_shape == vol.shape and np.allclose(spacing, t, rtol=0, atol=1e-9):
        return Volume(vol.data.copy(), (t, t, t), vol.origin)
    coords = identity_grid(new_shape) * (t / spacing)
    coords = np.minimum(coords, np.asarray(vol.shape) - 1)
    if labels:
        idx = np.floor(coords + 0.5).astype(int)
        out = vol.data[idx[..., 0], idx[..., 1], idx[..., 2]]
    else:
        out = trilinear_sample(vol.data, coords)
    return Volume(out, (t, t, t), vol.origin)


def center_pad(vol, target_shape):
    """Zero-pad to ``target_shape`` keeping the input centered.

    Odd remainders put the extra voxel on the high-index side.  The origin is
    shifted so that the original voxels keep their physical position.
    """
    target = check_shape3(target_shape)
    data = vol.data if isinstance(vol, Volume) else np.asarray(vol)
    if any(t < n for t, n in zip(target, data.shape)):
        raise ValueError(f"target shape {target} smaller than input {data.shape}")
    low = [(t - n) // 2 for t, n in zip(target, data.shape)]
    pads = [(lo, t - n - lo) for lo, t, n in zip(low, target, data.shape)]
    out = np.pad(data, pads, mode="constant", constant_values=0)
    if isinstance(vol, Volume):
        origin = np.asarray(vol.origin) - np.asarray(low) * np.asarray(vol.spacing)
        return Volume(out, vol.spacing, origin)
    return out
