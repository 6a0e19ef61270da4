"""NIfTI and sidecar file I/O.

NIfTI arrays are stored (x, y, z); internally everything is (z, y, x), so
arrays are transposed on the way in and out and spacing/origin reversed.
Direction cosines are not supported: written affines are axis aligned and
read affines contribute only their diagonal and translation.
"""
from __future__ import annotations

import os
import tempfile
from pathlib import Path

import nibabel as nib
import numpy as np

from .errors import IngestionError
from .volumes import DisplacementField, RigidTransform, StructureSet, Volume


def _affine(spacing, origin):
    A = np.eye(4)
    A[:3, :3] = np.diag(np.asarray(spacing, dtype=float)[::-1])
    A[:3, 3] = np.asarray(origin, dtype=float)[::-1]
    return A


def _geometry(img):
    A = img.affine
    spacing = np.asarray(img.header.get_zooms()[:3], dtype=float)[::-1]
    origin = np.asarray(A[:3, 3], dtype=float)[::-1]
    return tuple(spacing), tuple(origin)


def _load(path):
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"missing file: {path}")
    return nib.load(str(path))


def read_volume(path):
    img = _load(path)
    data = np.asarray(img.get_fdata(dtype=np.float64))
    if data.ndim == 4 and data.shape[3] == 1:
        data = data[..., 0]
    if data.ndim != 3:
        raise IngestionError(f"{path}: expected a 3D image, got shape {data.shape}")
    spacing, origin = _geometry(img)
    return Volume(np.ascontiguousarray(data.transpose(2, 1, 0)), spacing, origin)


def read_labels(path):
    """Return ``(StructureSet, Volume geometry)`` for an integer label image."""
    img = _load(path)
    data = np.asarray(img.dataobj)
    if data.ndim != 3:
        raise IngestionError(f"{path}: expected a 3D label image, got shape {data.shape}")
    rounded = np.rint(data)
    if not np.array_equal(rounded, data):
        raise IngestionError(f"{path}: label image is not integer valued")
    spacing, origin = _geometry(img)
    labels = np.ascontiguousarray(rounded.astype(np.int16).transpose(2, 1, 0))
    return StructureSet(labels), Volume(np.zeros(labels.shape), spacing, origin)


def _atomic_save(img, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    suffix = "".join(path.suffixes)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=suffix)
    os.close(fd)
    try:
        nib.save(img, tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


def write_volume(vol, path):
    img = nib.Nifti1Image(vol.data.transpose(2, 1, 0).astype(np.float32), _affine(vol.spacing, vol.origin))
    img.header.set_xyzt_units("mm")
    _atomic_save(img, path)


def write_labels(labels, geometry, path):
    arr = getattr(labels, "labels", labels)
    img = nib.Nifti1Image(np.asarray(arr).transpose(2, 1, 0).astype(np.int16),
                          _affine(geometry.spacing, geometry.origin))
    img.header.set_xyzt_units("mm")
    _atomic_save(img, path)


def write_field(field, geometry, path):
    """4D NIfTI (x, y, z, 3); channel c is the displacement along array axis c."""
    u = field.u if isinstance(field, DisplacementField) else np.asarray(field)
    data = np.moveaxis(u, 0, -1).transpose(2, 1, 0, 3).astype(np.float64)
    img = nib.Nifti1Image(data, _affine(geometry.spacing, geometry.origin))
    img.header.set_xyzt_units("mm")
    _atomic_save(img, path)


def read_field(path):
    img = _load(path)
    data = np.asarray(img.get_fdata(dtype=np.float64))
    if data.ndim != 4 or data.shape[3] != 3:
        raise IngestionError(f"{path}: expected (x, y, z, 3) field, got {data.shape}")
    u = np.moveaxis(data.transpose(2, 1, 0, 3), -1, 0)
    return DisplacementField(np.ascontiguousarray(u))


def write_transform(T, path):
    """4x4 row-major homogeneous matrix (physical mm, internal axis order)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(path, T.matrix, fmt="%.12g")


def read_transform(path, center=(0.0, 0.0, 0.0)):
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"missing file: {path}")
    M = np.loadtxt(path)
    if M.shape != (4, 4):
        raise IngestionError(f"{path}: expected a 4x4 matrix")
    return RigidTransform.from_matrix(M, center=center)
