"""Training of the registration network on ROI samples.

A sample is one fixed/moving pair cropped to the shared ROI cube and
resampled to the network grid.  The moving image is pulled through the
rigid transform and the ROI crop in a single interpolation.
"""
from __future__ import annotations

import csv
import json
import logging
import os
import tempfile
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage
from sklearn.base import BaseEstimator

from .errors import ConfigurationError, TrainingError
from .losses import LossWeights, dsc_metric, landmark_errors, total_loss
from .regnet import RegConfig, build_model, load_model, regnet_forward, save_model
from .rigid import ROIBox, _as_mask, crop_resample, roi_box, roi_field_to_full
from .runtime import load_checkpoint, seed_everything, zscore
from .volumes import (
    RigidTransform,
    StructureSet,
    Volume,
    _rigid_index_map,
    apply_rigid,
    compose_rigid_and_field,
    identity_grid,
    trilinear_sample,
    warp_labels,
    warp_tensor,
)

log = logging.getLogger(__name__)

SRML_MODES = ("full", "dice_only")
ROI_MASK_DILATION = 2


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 1
    epochs: int = 30
    lam: float = 0.4
    gland_weight: float = 0.1
    landmark_weight: float = 0.3
    class_weights: dict = field(default_factory=dict)
    mi_bins: int = 32
    mi_sigma: float = 1.0  # Parzen width in bins; sharper kernels give noisy training gradients
    grid: int = 128
    channels: tuple = (16, 32, 32, 32)
    roi_margin: int = 8
    seed: int = 0
    use_rigid: bool = True
    use_cmsa: bool = True
    srml_mode: str = "full"
    val_fraction: float = 0.2

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ConfigurationError("lr must be > 0")
        if self.epochs < 0:
            raise ConfigurationError("epochs must be >= 0")
        if self.srml_mode not in SRML_MODES:
            raise ConfigurationError(f"srml_mode must be one of {SRML_MODES}")
        self.class_weights = {int(k): float(v) for k, v in self.class_weights.items()}
        self.channels = RegConfig(self.grid, self.channels).channels

    def loss_weights(self):
        return LossWeights(self.gland_weight, self.landmark_weight, self.lam, self.mi_bins,
                           self.mi_sigma, dict(self.class_weights))

    def reg_config(self):
        return RegConfig(self.grid, self.channels, self.use_cmsa, self.seed)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigurationError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)


# --------------------------------------------------------------------------
# samples


@dataclass
class RegSample:
    case_id: str
    fixed: np.ndarray
    moving: np.ndarray
    roi_mask: np.ndarray
    class_ids: list
    fixed_onehot: np.ndarray
    moving_onehot: np.ndarray
    fixed_labels: StructureSet
    moving_labels: StructureSet
    box: ROIBox
    roi_spacing: np.ndarray
    rigid: RigidTransform
    # full-grid geometry and annotations, used to score fields the way the pipeline does
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)
    full_shape: tuple = None
    fixed_full: StructureSet = None
    moving_full: StructureSet = None


def _roi_coords(box, grid):
    return identity_grid((grid,) * 3) * box.scale(grid) + np.asarray(box.low, dtype=float)


def sample_moving_roi(data, box, grid, T, spacing, origin, mode="linear"):
    """Moving image at ``T^-1`` of the ROI grid points, one interpolation."""
    A, b = _rigid_index_map(T, spacing, origin)
    src = _roi_coords(box, grid) @ A.T + b
    if mode == "nearest":
        idx = np.floor(src + 0.5).astype(int)
        inside = np.all((idx >= 0) & (idx < np.asarray(data.shape)), axis=-1)
        idx = np.clip(idx, 0, np.asarray(data.shape) - 1)
        out = np.asarray(data)[idx[..., 0], idx[..., 1], idx[..., 2]]
        return np.where(inside, out, 0).astype(np.asarray(data).dtype)
    return trilinear_sample(np.asarray(data, dtype=np.float64), src)


def make_sample(fixed, fixed_labels, moving, moving_labels, rigid=None, grid=32, margin=8,
                use_rigid=True, fixed_mask=None, moving_mask=None, case_id=""):
    """Build the network-grid sample of one case.

    ``fixed`` and ``moving`` share one grid.  ``fixed_mask``/``moving_mask``
    (predicted gland masks) define the ROI and the MI mask when given;
    otherwise the annotations' gland regions are used.  Label sets may be
    ``None`` at inference time, in which case the masks stand in for them.
    Without rigid the whole grid is the ROI.
    """
    spacing, origin = fixed.spacing, fixed.origin
    if moving.shape != fixed.shape:
        raise ValueError("fixed and moving must share one grid")
    if fixed_labels is None or moving_labels is None:
        if fixed_mask is None or moving_mask is None:
            raise ValueError("masks are required when label sets are missing")
        fixed_labels = fixed_labels or StructureSet(_as_mask(fixed_mask).astype(np.int16))
        moving_labels = moving_labels or StructureSet(_as_mask(moving_mask).astype(np.int16))
    fm = _as_mask(fixed_mask if fixed_mask is not None else fixed_labels)
    mm = _as_mask(moving_mask if moving_mask is not None else moving_labels)
    if not use_rigid or rigid is None:
        rigid = RigidTransform.identity()
    if use_rigid:
        moved_mask = apply_rigid(mm.astype(np.uint8), rigid, "nearest", spacing, origin).astype(bool)
        box = roi_box([fm, moved_mask], margin)
    else:
        box = ROIBox((0, 0, 0), tuple(fixed.shape), 0)

    class_ids = sorted(set(fixed_labels.class_ids) | set(moving_labels.class_ids))
    f_roi = crop_resample(fixed.data, box, grid)
    m_roi = sample_moving_roi(moving.data, box, grid, rigid, spacing, origin)
    f_oh = np.stack([crop_resample(c, box, grid) for c in fixed_labels.channels(class_ids)])
    m_oh = np.stack([sample_moving_roi(c, box, grid, rigid, spacing, origin)
                     for c in moving_labels.channels(class_ids)])
    roi_mask = ndimage.binary_dilation(fm, ndimage.generate_binary_structure(3, 1), ROI_MASK_DILATION)
    roi_mask = crop_resample(roi_mask, box, grid, "nearest").astype(bool)
    f_lab = StructureSet(crop_resample(fixed_labels.labels, box, grid, "nearest"), class_ids)
    m_lab = StructureSet(sample_moving_roi(moving_labels.labels, box, grid, rigid, spacing, origin,
                                           "nearest"), class_ids)
    return RegSample(case_id, zscore(f_roi), zscore(m_roi), roi_mask, class_ids, f_oh, m_oh,
                     f_lab, m_lab, box, box.scale(grid) * np.asarray(spacing), rigid,
                     tuple(spacing), tuple(origin), tuple(fixed.shape), fixed_labels, moving_labels)


def _collate(samples, class_ids, dtype):
    def t(a):
        return torch.from_numpy(np.ascontiguousarray(a)).to(dtype)

    def expand(s, oh):
        out = np.zeros((len(class_ids),) + oh.shape[1:])
        for i, k in enumerate(s.class_ids):
            out[class_ids.index(k)] = oh[i]
        return out

    fixed = t(np.stack([s.fixed for s in samples]))[:, None]
    moving = t(np.stack([s.moving for s in samples]))[:, None]
    mask = torch.from_numpy(np.stack([s.roi_mask for s in samples]))[:, None]
    f_oh = t(np.stack([expand(s, s.fixed_onehot) for s in samples]))
    m_oh = t(np.stack([expand(s, s.moving_onehot) for s in samples]))
    dims = (2, 3, 4)
    present = (f_oh.sum(dim=dims) > 0) & (m_oh.sum(dim=dims) > 0)
    return fixed, moving, mask, f_oh, m_oh, present


def dataset_classes(samples):
    return sorted(set().union(*(s.class_ids for s in samples)))


def batch_loss(model, batch, weights, class_ids, use_mi=True):
    """Forward pass + loss terms for a collated batch; returns ``(terms, u)``."""
    fixed, moving, mask, f_oh, m_oh, present = batch
    u = regnet_forward(model, fixed, moving)
    warped = warp_tensor(moving, u)
    warped_oh = warp_tensor(m_oh, u)
    terms = total_loss(fixed, warped, mask, f_oh, warped_oh, u, weights, class_ids,
                       present=present, use_mi=use_mi)
    return terms, u


def predict_field(model, sample):
    """ROI-grid displacement (3, G, G, G) in ROI voxel units."""
    dtype = next(model.parameters()).dtype
    model.eval()
    with torch.no_grad():
        f = torch.from_numpy(sample.fixed).to(dtype)[None, None]
        m = torch.from_numpy(sample.moving).to(dtype)[None, None]
        return regnet_forward(model, f, m)[0].double().numpy()


def full_field(sample, u_roi):
    """Total displacement on the full fixed grid: rigid composed with the ROI field."""
    u_full = roi_field_to_full(u_roi, sample.box, sample.full_shape)
    return compose_rigid_and_field(sample.rigid, u_full, sample.spacing, sample.origin)


def label_metrics(fixed_labels, warped_labels, spacing):
    """``(gland DSC %, TRE mm or nan, number of landmarks)``."""
    dsc = dsc_metric(warped_labels.gland_mask(), fixed_labels.gland_mask())
    errors, _ = landmark_errors(fixed_labels, warped_labels, spacing)
    tre = float(np.sqrt(np.mean(np.square(list(errors.values()))))) if errors else float("nan")
    return dsc, tre, len(errors)


def validate(model, samples):
    """Mean full-grid gland DSC and TRE of the composed warps on ``samples``."""
    dscs, tres = [], []
    for s in samples:
        w = warp_labels(s.moving_full, full_field(s, predict_field(model, s)))
        dsc, tre, _ = label_metrics(s.fixed_full, w, s.spacing)
        dscs.append(dsc)
        tres.append(tre)
    tres = np.asarray(tres)
    return {"dsc": float(np.mean(dscs)),
            "tre": float(np.mean(tres[np.isfinite(tres)])) if np.isfinite(tres).any() else float("nan")}


def augment(sample, rng):
    """Augmentation hook; intentionally the identity."""
    return sample


HISTORY_FIELDS = ["step", "epoch", "case", "mi", "dice", "reg", "total"]


def _write_csv(rows, path, fieldnames):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    with os.fdopen(fd, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fieldnames)
        w.writeheader()
        w.writerows(rows)
    os.replace(tmp, path)


def train_step(model, optimizer, batch, weights, class_ids, use_mi=True, case_id=""):
    optimizer.zero_grad()
    terms, _ = batch_loss(model, batch, weights, class_ids, use_mi)
    if not torch.isfinite(terms.total):
        raise TrainingError(f"non-finite loss on case {case_id!r}: {terms.as_floats()}")
    terms.total.backward()
    optimizer.step()
    return terms.as_floats()


@dataclass
class TrainResult:
    model: object
    history: list
    validation: list
    config: TrainConfig


def train_run(samples, config, val_samples=(), checkpoint_dir=None, resume=False, dtype=torch.float32,
              max_epochs=None):
    """Epoch loop with per-epoch checkpoint, history CSV and validation.

    ``resume=True`` continues from ``checkpoint_dir/reg_last.pt``.  The batch
    order of epoch ``e`` depends only on ``seed + e``, so resumed runs replay
    the uninterrupted one.  ``max_epochs`` stops early (used to simulate an
    interruption) without changing the schedule.
    """
    if not samples:
        raise ConfigurationError("no training samples")
    seed_everything(config.seed)
    model = build_model(config.reg_config()).to(dtype)
    weights = config.loss_weights()
    class_ids = dataset_classes(list(samples) + list(val_samples))
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    history, validation, start = [], [], 0
    ck_path = Path(checkpoint_dir) / "reg_last.pt" if checkpoint_dir is not None else None
    if resume:
        if ck_path is None:
            raise ConfigurationError("resume needs a checkpoint_dir")
        ck = load_checkpoint(ck_path)
        model.load_state_dict(ck["state"])
        opt.load_state_dict(ck["optimizer"])
        history, validation, start = ck["history"], ck["validation"], ck["epoch"] + 1
        torch.set_rng_state(ck["torch_rng"])
    use_mi = config.srml_mode == "full"
    step = len(history)
    stop = config.epochs if max_epochs is None else min(config.epochs, max_epochs)
    for epoch in range(start, stop):
        model.train()
        rng = np.random.default_rng(config.seed + epoch)
        order = rng.permutation(len(samples))
        for i in range(0, len(order), config.batch_size):
            chunk = [augment(samples[j], rng) for j in order[i:i + config.batch_size]]
            batch = _collate(chunk, class_ids, dtype)
            case = ";".join(s.case_id for s in chunk)
            try:
                row = train_step(model, opt, batch, weights, class_ids, use_mi, case)
            except TrainingError:
                if checkpoint_dir is not None:
                    dump = {"case": case, "epoch": epoch, "step": step}
                    Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
                    (Path(checkpoint_dir) / "nonfinite_case.json").write_text(json.dumps(dump))
                raise
            row.update(step=step, epoch=epoch, case=case)
            history.append(row)
            step += 1
        if val_samples:
            v = validate(model, val_samples)
            v["epoch"] = epoch
            validation.append(v)
            log.info("epoch %d loss %.4f val dsc %.2f tre %.3f", epoch, history[-1]["total"], v["dsc"], v["tre"])
        if checkpoint_dir is not None:
            save_model(model, ck_path, {"optimizer": opt.state_dict(), "epoch": epoch, "history": history,
                                        "validation": validation, "train_config": asdict(config),
                                        "class_ids": class_ids, "torch_rng": torch.get_rng_state()})
            _write_csv(history, Path(checkpoint_dir) / "reg_history.csv", HISTORY_FIELDS)
    model.eval()
    return TrainResult(model, history, validation, config)


def split_by_seed(items, val_fraction=0.2):
    """Deterministic train/validation split: the last ``val_fraction`` of the list."""
    n_val = int(round(len(items) * val_fraction))
    if n_val >= len(items):
        n_val = len(items) - 1
    return list(items[:len(items) - n_val]), list(items[len(items) - n_val:])


class DeformableRegistration(BaseEstimator):
    """Estimator wrapper: ``fit(samples)``, ``predict(sample) -> ROI field``."""

    def __init__(self, lr=1e-4, batch_size=1, epochs=30, lam=0.4, grid=32, channels=(16, 32, 32, 32),
                 seed=0, use_cmsa=True, srml_mode="full", mi_sigma=1.0, checkpoint_dir=None):
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.lam = lam
        self.grid = grid
        self.channels = channels
        self.seed = seed
        self.use_cmsa = use_cmsa
        self.srml_mode = srml_mode
        self.mi_sigma = mi_sigma
        self.checkpoint_dir = checkpoint_dir

    def _config(self):
        return TrainConfig(lr=self.lr, batch_size=self.batch_size, epochs=self.epochs, lam=self.lam,
                           grid=self.grid, channels=self.channels, seed=self.seed,
                           use_cmsa=self.use_cmsa, srml_mode=self.srml_mode, mi_sigma=self.mi_sigma)

    def fit(self, samples, val_samples=()):
        res = train_run(list(samples), self._config(), list(val_samples), self.checkpoint_dir)
        self.model_, self.history_, self.validation_ = res.model, res.history, res.validation
        return self

    def predict(self, sample):
        if not hasattr(self, "model_"):
            raise ConfigurationError("DeformableRegistration is not fitted")
        return predict_field(self.model_, sample)

    @classmethod
    def from_checkpoint(cls, path):
        model, ck = load_model(path)
        est = cls(**{k: v for k, v in ck.get("train_config", {}).items()
                     if k in cls().get_params()})
        est.model_ = model
        return est
