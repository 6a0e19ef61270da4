"""Case folders, preprocessing, three-stage inference and evaluation.

A case folder holds ``mr.nii.gz``, ``trus.nii.gz``, ``mr_label.nii.gz`` and
``trus_label.nii.gz``.  TRUS is the fixed image and MR the moving one.
After preprocessing both live on one isotropic, centre-padded grid.
"""
from __future__ import annotations

import csv
import io as _io
import logging
import os
import tempfile
import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import AlignmentError, EmptyMaskError, IngestionError, ROIError
from .io import read_labels, read_volume, write_field, write_labels, write_transform, write_volume
from .rigid import estimate_rigid
from .segnet import predict_mask
from .trainer import full_field, label_metrics, make_sample, predict_field
from .volumes import (
    DisplacementField,
    RigidTransform,
    StructureSet,
    Volume,
    center_pad,
    compose_rigid_and_field,
    identity_grid,
    resample_isotropic,
    trilinear_sample,
    warp_labels,
    warp_with_field,
)

log = logging.getLogger(__name__)

CASE_FILES = {"mr": "mr.nii.gz", "trus": "trus.nii.gz",
              "mr_label": "mr_label.nii.gz", "trus_label": "trus_label.nii.gz"}
STAGES = ("initial", "rigid", "deformable")
METRIC_COLUMNS = ["case", "stage", "dsc_pct", "tre_mm", "n_landmarks"]


class CaseValidationError(IngestionError):
    pass


@dataclass
class Case:
    case_id: str
    fixed: Volume
    moving: Volume
    fixed_labels: StructureSet = None
    moving_labels: StructureSet = None


def list_cases(root):
    """Sorted case folders below ``root`` (any directory holding a TRUS image)."""
    root = Path(root)
    if (root / CASE_FILES["trus"]).exists():
        return [root]
    return sorted(p for p in root.iterdir() if (p / CASE_FILES["trus"]).exists())


def load_case(folder, labels=True):
    folder = Path(folder)
    for key in ("mr", "trus") + (("mr_label", "trus_label") if labels else ()):
        if not (folder / CASE_FILES[key]).exists():
            raise IngestionError(f"{folder}: missing {CASE_FILES[key]}")
    case = Case(folder.name, read_volume(folder / CASE_FILES["trus"]), read_volume(folder / CASE_FILES["mr"]))
    if labels:
        case.fixed_labels, geo_f = read_labels(folder / CASE_FILES["trus_label"])
        case.moving_labels, geo_m = read_labels(folder / CASE_FILES["mr_label"])
        for lab, img, name in ((case.fixed_labels, case.fixed, "trus"), (case.moving_labels, case.moving, "mr")):
            if lab.shape != img.shape:
                raise CaseValidationError(f"{folder}: {name} label grid {lab.shape} != image grid {img.shape}")
        _check_gland(case, folder)
    return case


def _check_gland(case, where):
    for lab, name in ((case.fixed_labels, "trus"), (case.moving_labels, "mr")):
        if lab is not None and not (lab.labels == 1).any():
            raise CaseValidationError(f"{where}: gland (class 1) absent from the {name} labels")


def save_case(case, folder):
    folder = Path(folder)
    folder.mkdir(parents=True, exist_ok=True)
    write_volume(case.fixed, folder / CASE_FILES["trus"])
    write_volume(case.moving, folder / CASE_FILES["mr"])
    if case.fixed_labels is not None:
        write_labels(case.fixed_labels, case.fixed, folder / CASE_FILES["trus_label"])
    if case.moving_labels is not None:
        write_labels(case.moving_labels, case.moving, folder / CASE_FILES["mr_label"])
    return folder


def _same_grid(a, b):
    return (a.shape == b.shape and np.allclose(a.spacing, b.spacing, atol=1e-9)
            and np.allclose(a.origin, b.origin, atol=1e-6))


def resample_to_grid(vol, reference, labels=False):
    """Resample ``vol`` onto the grid of ``reference`` (identity physical map, zero outside)."""
    pts = identity_grid(reference.shape) * np.asarray(reference.spacing) + np.asarray(reference.origin)
    src = (pts - np.asarray(vol.origin)) / np.asarray(vol.spacing)
    if labels:
        idx = np.floor(src + 0.5).astype(int)
        inside = np.all((idx >= 0) & (idx < np.asarray(vol.shape)), axis=-1)
        idx = np.clip(idx, 0, np.asarray(vol.shape) - 1)
        out = np.where(inside, vol.data[idx[..., 0], idx[..., 1], idx[..., 2]], 0)
    else:
        out = trilinear_sample(vol.data, src)
    return Volume(out, reference.spacing, reference.origin)


def _standardize(vol, spacing, size, labels=False):
    vol = resample_isotropic(vol, spacing, labels=labels)
    if any(n > size for n in vol.shape):
        raise CaseValidationError(f"resampled grid {vol.shape} exceeds {size}^3")
    return center_pad(vol, (size,) * 3)


def preprocess_case(case, spacing=0.8, size=128):
    """Isotropic resampling + centre padding; MR is then placed on the TRUS grid.

    Intensities are left unscaled.  Already-standardised cases come back
    unchanged.
    """
    def lab_vol(ss, img):
        return Volume(ss.labels.astype(np.float64), img.spacing, img.origin)

    fixed = _standardize(case.fixed, spacing, size)
    moving = _standardize(case.moving, spacing, size)
    out = Case(case.case_id, fixed, moving)
    if case.fixed_labels is not None:
        f = _standardize(lab_vol(case.fixed_labels, case.fixed), spacing, size, labels=True)
        out.fixed_labels = StructureSet(f.data.astype(np.int16), case.fixed_labels.class_ids)
    if case.moving_labels is not None:
        m = _standardize(lab_vol(case.moving_labels, case.moving), spacing, size, labels=True)
        if not _same_grid(m, fixed):
            m = resample_to_grid(m, fixed, labels=True)
        out.moving_labels = StructureSet(m.data.astype(np.int16), case.moving_labels.class_ids)
    if not _same_grid(moving, fixed):
        out.moving = resample_to_grid(moving, fixed)
    _check_gland(out, case.case_id)
    return out


def preprocess_folder(src, dst, spacing=0.8, size=128):
    written = []
    for folder in list_cases(src):
        case = preprocess_case(load_case(folder), spacing, size)
        written.append(save_case(case, Path(dst) / folder.name))
    return written


# --------------------------------------------------------------------------
# inference


@dataclass
class RegistrationResult:
    case_id: str
    rigid: RigidTransform = None
    field: DisplacementField = None
    metrics: dict = dataclasses.field(default_factory=dict)  # stage -> (dsc %, tre mm, n landmarks)
    warped_moving: Volume = None
    warped_labels: StructureSet = None
    roi_box: object = None
    failed: str = None

    def rows(self):
        return [{"case": self.case_id, "stage": st, "dsc_pct": self.metrics[st][0],
                 "tre_mm": self.metrics[st][1], "n_landmarks": self.metrics[st][2]}
                for st in STAGES if st in self.metrics]


def gland_masks(case, seg_models=None, threshold=0.5, oracle=False):
    """Gland masks ``(fixed, moving)``: predicted, or annotations when ``oracle``."""
    if oracle:
        return case.fixed_labels.gland_mask(), case.moving_labels.gland_mask()
    if seg_models is None:
        raise ValueError("segmentation models are required unless oracle masks are used")
    seg_fixed, seg_moving = seg_models
    return (predict_mask(seg_fixed, case.fixed, threshold).gland_mask(),
            predict_mask(seg_moving, case.moving, threshold).gland_mask())


def register_case(case, reg_model, config, seg_models=None):
    """Segment, align rigidly, register inside the ROI, warp once, score.

    Inference only reads the images and the gland masks; annotation labels
    enter through the metrics (and, with ``oracle_masks``, the gland masks).
    """
    res = RegistrationResult(case.case_id)
    try:
        fm, mm = gland_masks(case, seg_models, config.seg_threshold, config.oracle_masks)
        sp, org = case.fixed.spacing, case.fixed.origin
        if config.use_rigid:
            T = estimate_rigid(fm, mm, sp, org)
        else:
            T = RigidTransform.identity()
        sample = make_sample(case.fixed, None, case.moving, None, T, config.grid, config.roi_margin,
                             config.use_rigid, fm, mm, case.case_id)
    except (EmptyMaskError, AlignmentError, ROIError) as exc:
        res.failed = f"{type(exc).__name__}: {exc}"
        log.warning("case %s failed: %s", case.case_id, res.failed)
        return res
    u_roi = predict_field(reg_model, sample)
    total = full_field(sample, u_roi)
    res.rigid, res.field, res.roi_box = T, total, sample.box
    res.warped_moving = warp_with_field(case.moving, total)
    if case.fixed_labels is not None and case.moving_labels is not None:
        rigid_only = compose_rigid_and_field(T, DisplacementField.zeros(case.fixed.shape), sp, org)
        res.warped_labels = warp_labels(case.moving_labels, total)
        res.metrics = {
            "initial": label_metrics(case.fixed_labels, case.moving_labels, sp),
            "rigid": label_metrics(case.fixed_labels, warp_labels(case.moving_labels, rigid_only), sp),
            "deformable": label_metrics(case.fixed_labels, res.warped_labels, sp),
        }
    return res


def write_result(result, case, folder):
    folder = Path(folder)
    folder.mkdir(parents=True, exist_ok=True)
    write_transform(result.rigid, folder / "rigid.txt")
    np.savetxt(folder / "rigid_center.txt", result.rigid.center[None], fmt="%.12g")
    write_field(result.field, case.fixed, folder / "field.nii.gz")
    write_volume(result.warped_moving, folder / "warped_mr.nii.gz")
    if result.warped_labels is not None:
        write_labels(result.warped_labels, case.fixed, folder / "warped_mr_label.nii.gz")


def save_overlay(result, case, path):
    """Mid-slice triptych: fixed, rigid-only moving, deformed moving, with gland contours."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    sp, org = case.fixed.spacing, case.fixed.origin
    rigid_only = compose_rigid_and_field(result.rigid, DisplacementField.zeros(case.fixed.shape), sp, org)
    panels = [("TRUS", case.fixed.data), ("MR rigid", warp_with_field(case.moving, rigid_only).data),
              ("MR deformable", result.warped_moving.data)]
    z = case.fixed.shape[0] // 2
    if case.fixed_labels is not None:
        z = int(np.argwhere(case.fixed_labels.gland_mask())[:, 0].mean().round())
    fig, axes = plt.subplots(1, 3, figsize=(9, 3.2))
    for ax, (title, img) in zip(axes, panels):
        ax.imshow(img[z], cmap="gray")
        if case.fixed_labels is not None:
            ax.contour(case.fixed_labels.gland_mask()[z], levels=[0.5], colors="y", linewidths=0.8)
        ax.set_title(title)
        ax.axis("off")
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100)
    plt.close(fig)


# --------------------------------------------------------------------------
# evaluation


@dataclass
class EvaluationReport:
    rows: list
    summary: dict  # stage -> {"dsc_mean", "dsc_std", "tre_mean", "tre_std", "n"}
    failed: dict  # case id -> reason
    results: list = dataclasses.field(default_factory=list, repr=False)


def summarize(rows):
    """Mean and population std (ddof=0) per stage."""
    out = {}
    for st in STAGES:
        sel = [r for r in rows if r["stage"] == st]
        if not sel:
            continue
        dsc = np.array([r["dsc_pct"] for r in sel], dtype=float)
        tre = np.array([r["tre_mm"] for r in sel], dtype=float)
        tre = tre[np.isfinite(tre)]
        out[st] = {"dsc_mean": float(dsc.mean()), "dsc_std": float(dsc.std()),
                   "tre_mean": float(tre.mean()) if tre.size else float("nan"),
                   "tre_std": float(tre.std()) if tre.size else float("nan"), "n": len(sel)}
    return out


def format_summary(summary):
    lines = [f"{'stage':<12}{'DSC (%)':>16}{'TRE (mm)':>16}"]
    for st, s in summary.items():
        lines.append(f"{st:<12}{s['dsc_mean']:>9.1f}±{s['dsc_std']:<6.1f}{s['tre_mean']:>9.2f}±{s['tre_std']:<6.2f}")
    return "\n".join(lines)


def metrics_csv_text(rows, summary):
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for r in rows:
        w.writerow([r["case"], r["stage"], repr(float(r["dsc_pct"])), repr(float(r["tre_mm"])), int(r["n_landmarks"])])
    for st, s in summary.items():
        w.writerow(["mean", st, repr(s["dsc_mean"]), repr(s["tre_mean"]), s["n"]])
        w.writerow(["std", st, repr(s["dsc_std"]), repr(s["tre_std"]), s["n"]])
    return buf.getvalue()


def _atomic_text(text, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def read_metrics_csv(path):
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["dsc_pct"], r["tre_mm"], r["n_landmarks"] = float(r["dsc_pct"]), float(r["tre_mm"]), int(r["n_landmarks"])
    return rows


def evaluate(cases, reg_model, config, seg_models=None, out_dir=None, overlays=False):
    """Register every case; per-case rows sorted by case id plus a summary.

    Failed cases are excluded from the table and listed in ``failed``.
    """
    cases = sorted(cases, key=lambda c: c.case_id)
    if not cases:
        raise IngestionError("no cases to evaluate")
    rows, failed, results = [], {}, []
    for case in cases:
        res = register_case(case, reg_model, config, seg_models)
        results.append(res)
        if res.failed:
            failed[case.case_id] = res.failed
            continue
        rows.extend(res.rows())
        if out_dir is not None:
            write_result(res, case, Path(out_dir) / case.case_id)
            if overlays:
                save_overlay(res, case, Path(out_dir) / case.case_id / "overlay.png")
    summary = summarize(rows)
    if out_dir is not None:
        _atomic_text(metrics_csv_text(rows, summary), Path(out_dir) / "metrics.csv")
        _atomic_text("".join(f"{k}\t{v}\n" for k, v in failed.items()), Path(out_dir) / "failed_cases.txt")
    return EvaluationReport(rows, summary, failed, results)


# --------------------------------------------------------------------------
# dataset import


def import_muregpro(src, dst, split="train"):
    """Map the challenge layout onto case folders.

    Expected input: ``src/<split>/{mr_images,us_images,mr_labels,us_labels}/<id>.nii.gz``
    where each label file is 4D with one binary channel per structure,
    channel 0 being the gland.  Channel ``c`` becomes integer class ``c + 1``;
    landmark channels are written after the gland so they take precedence
    where they overlap it.  Images are copied unchanged.  This is the only
    place that knows the external layout.
    """
    import nibabel as nib

    base = Path(src) / split
    if not base.exists():
        raise IngestionError(f"{base} does not exist")
    written = []
    for mr_path in sorted((base / "mr_images").glob("*.nii*")):
        name = mr_path.name.split(".nii")[0]
        paths = {k: base / sub / mr_path.name for k, sub in
                 (("trus", "us_images"), ("mr_label", "mr_labels"), ("trus_label", "us_labels"))}
        missing = [str(p) for p in paths.values() if not p.exists()]
        if missing:
            raise IngestionError(f"case {name}: missing {missing}")
        out = Path(dst) / name
        out.mkdir(parents=True, exist_ok=True)
        for key, path in (("mr", mr_path), ("trus", paths["trus"])):
            img = nib.load(str(path))
            nib.save(nib.Nifti1Image(np.asanyarray(img.dataobj).astype(np.float32), img.affine), str(out / CASE_FILES[key]))
        for key in ("mr_label", "trus_label"):
            img = nib.load(str(paths[key]))
            chans = np.asanyarray(img.dataobj)
            if chans.ndim == 3:
                chans = chans[..., None]
            lab = np.zeros(chans.shape[:3], dtype=np.int16)
            for c in range(chans.shape[3]):
                lab[chans[..., c] > 0.5] = c + 1
            nib.save(nib.Nifti1Image(lab, img.affine), str(out / CASE_FILES[key]))
        written.append(out)
    return written
