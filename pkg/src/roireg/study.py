"""End-to-end runs: case preparation, training and held-out evaluation."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

from .pipeline import evaluate, gland_masks, list_cases, load_case, preprocess_case
from .phantom import PhantomSpec, generate_dataset, write_case
from .rigid import estimate_rigid
from .runtime import seed_everything
from .segnet import SegModel, train_segmenter
from .trainer import make_sample, split_by_seed, train_run
from .volumes import RigidTransform

log = logging.getLogger(__name__)


def write_phantom_cases(root, n_cases, grid=32, seed=0, **spec_overrides):
    """Seeded phantom case folders ``root/case_000 ...`` (ground truth included)."""
    pairs = generate_dataset(PhantomSpec.desk(grid, seed=seed, **spec_overrides), n_cases)
    return [write_case(p, Path(root) / f"case_{i:03d}") for i, p in enumerate(pairs)]


def load_cases(root, config):
    return [preprocess_case(load_case(f), config.spacing, config.size) for f in list_cases(root)]


def train_segmenters(cases, config, checkpoint_dir=None):
    """One network per modality: ``(fixed/TRUS model, moving/MR model)``."""
    out = []
    for side, modality in (("fixed", "trus"), ("moving", "mr")):
        pairs = [(getattr(c, side), getattr(c, f"{side}_labels")) for c in cases]
        ck = Path(checkpoint_dir) / f"seg_{modality}" if checkpoint_dir is not None else None
        model, _ = train_segmenter(pairs, config.seg_config(), ck, modality=modality)
        out.append(model)
    return tuple(out)


def load_segmenters(folder):
    folder = Path(folder)
    return SegModel.load(folder / "seg_trus" / "seg_last.pt"), SegModel.load(folder / "seg_mr" / "seg_last.pt")


def prepare_samples(cases, config, seg_models=None):
    """Training samples: masks (predicted or annotation) -> rigid -> ROI."""
    out = []
    for case in cases:
        fm, mm = gland_masks(case, seg_models, config.seg_threshold, config.oracle_masks)
        if config.use_rigid:
            T = estimate_rigid(fm, mm, case.fixed.spacing, case.fixed.origin)
        else:
            T = RigidTransform.identity()
        out.append(make_sample(case.fixed, case.fixed_labels, case.moving, case.moving_labels, T,
                               config.grid, config.roi_margin, config.use_rigid, fm, mm, case.case_id))
    return out


@dataclass
class StudyResult:
    report: object
    train: object
    train_ids: list
    test_ids: list
    workdir: Path


def run_study(cases, config, workdir, seg_models=None, segment=False):
    """80/20 split, optional segmenter training, registration training, evaluation.

    Outputs land in ``workdir/{seg_*,reg,eval}``; the held-out metrics CSV
    is ``workdir/eval/metrics.csv``.
    """
    seed_everything(config.seed)
    workdir = Path(workdir)
    cases = sorted(cases, key=lambda c: c.case_id)
    train, test = split_by_seed(cases, config.val_fraction)
    if segment and seg_models is None:
        seg_models = train_segmenters(train, config, workdir)
    samples = prepare_samples(train, config, seg_models)
    val = prepare_samples(test, config, seg_models)
    result = train_run(samples, config.train_config(), val, checkpoint_dir=workdir / "reg")
    report = evaluate(test, result.model, config, seg_models, out_dir=workdir / "eval")
    return StudyResult(report, result, [c.case_id for c in train], [c.case_id for c in test], workdir)
