"""Command-line entry point: ``roireg <verb> [options]``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import dump_config, load_config
from .errors import RegistrationError

log = logging.getLogger("roireg")


def _common():
    p = argparse.ArgumentParser(add_help=False, allow_abbrev=False)
    S = argparse.SUPPRESS
    p.add_argument("--config", default=S, help="flat TOML configuration file")
    p.add_argument("--seed", type=int, default=S)
    p.add_argument("--grid", type=int, default=S, help="registration network grid size")
    p.add_argument("--no-cmsa", action="store_true", default=S, help="disable cross-modal attention")
    p.add_argument("--no-rigid", action="store_true", default=S, help="register full volumes without rigid/ROI")
    p.add_argument("--srml", choices=["full", "dice_only"], default=S, help="training loss variant")
    p.add_argument("--oracle-masks", action="store_true", default=S,
                   help="use annotation gland masks instead of segmentation networks")
    p.add_argument("--epochs", type=int, default=S)
    p.add_argument("--lr", type=float, default=S)
    p.add_argument("-v", "--verbose", action="store_true", default=S)
    return p


def build_parser():
    common = _common()
    parser = argparse.ArgumentParser(prog="roireg", parents=[common], allow_abbrev=False,
                                     description="Segmentation-guided MR-TRUS registration")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("phantom", parents=[common], allow_abbrev=False, help="write synthetic phantom case folders")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=20)
    p.add_argument("--size", type=int, default=32, help="phantom grid size")

    p = sub.add_parser("preprocess", parents=[common], allow_abbrev=False, help="resample and pad case folders")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train-seg", parents=[common], allow_abbrev=False, help="train a gland segmenter for one modality")
    p.add_argument("--cases", required=True)
    p.add_argument("--modality", choices=["trus", "mr"], required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train-reg", parents=[common], allow_abbrev=False, help="train the registration network")
    p.add_argument("--cases", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seg-dir", help="folder holding seg_trus/ and seg_mr/ checkpoints")
    p.add_argument("--resume", action="store_true")

    for verb, helptext in (("register", "register one case folder"), ("evaluate", "register and score cases")):
        p = sub.add_parser(verb, parents=[common], allow_abbrev=False, help=helptext)
        p.add_argument("--cases", required=True, help="case folder or folder of case folders")
        p.add_argument("--reg", required=True, help="registration checkpoint")
        p.add_argument("--seg-dir")
        p.add_argument("--out", required=True)
        p.add_argument("--save-overlay", action="store_true", help="write mid-slice PNG triptychs")

    p = sub.add_parser("study", parents=[common], allow_abbrev=False, help="train and evaluate on an 80/20 split of cases")
    p.add_argument("--cases", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--segment", action="store_true", help="train segmenters instead of using oracle masks")
    return parser


def _config(args):
    g = vars(args)
    flags = dict(
        seed=g.get("seed"), grid=g.get("grid"), epochs=g.get("epochs"), lr=g.get("lr"),
        srml_mode=g.get("srml"),
        use_cmsa=False if g.get("no_cmsa") else None,
        use_rigid=False if g.get("no_rigid") else None,
        oracle_masks=True if g.get("oracle_masks") else None,
    )
    return load_config(g.get("config"), **flags)


def _seg_models(args, cfg):
    from .study import load_segmenters

    if cfg.oracle_masks:
        return None
    if not args.seg_dir:
        raise RegistrationError("--seg-dir is required unless --oracle-masks is set")
    return load_segmenters(args.seg_dir)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except (RegistrationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def _dispatch(args):
    from .runtime import seed_everything

    cfg = _config(args)
    seed_everything(cfg.seed)
    out = Path(args.out)

    if args.verb == "phantom":
        from .study import write_phantom_cases

        folders = write_phantom_cases(out, args.n, args.size, cfg.seed)
        print(f"wrote {len(folders)} phantom cases to {out}")
        return 0

    if args.verb == "preprocess":
        from .pipeline import preprocess_folder

        written = preprocess_folder(args.input, out, cfg.spacing, cfg.size)
        print(f"preprocessed {len(written)} cases into {out}")
        return 0

    from .study import load_cases

    if args.verb == "train-seg":
        from .segnet import train_segmenter

        cases = load_cases(args.cases, cfg)
        side = "fixed" if args.modality == "trus" else "moving"
        pairs = [(getattr(c, side), getattr(c, f"{side}_labels")) for c in cases]
        train_segmenter(pairs, cfg.seg_config(), out / f"seg_{args.modality}", modality=args.modality)
        print(f"segmenter checkpoint: {out / f'seg_{args.modality}' / 'seg_last.pt'}")
        return 0

    if args.verb == "train-reg":
        from .study import prepare_samples
        from .trainer import split_by_seed, train_run

        cases = load_cases(args.cases, cfg)
        train, val = split_by_seed(cases, cfg.val_fraction) if len(cases) > 1 else (cases, [])
        seg = _seg_models(args, cfg)
        res = train_run(prepare_samples(train, cfg, seg), cfg.train_config(),
                        prepare_samples(val, cfg, seg), checkpoint_dir=out, resume=args.resume)
        (out / "config.toml").write_text(dump_config(cfg))
        if res.validation:
            v = res.validation[-1]
            print(f"final validation: DSC {v['dsc']:.2f} %, TRE {v['tre']:.3f} mm")
        print(f"registration checkpoint: {out / 'reg_last.pt'}")
        return 0

    if args.verb in ("register", "evaluate"):
        from .pipeline import evaluate, format_summary
        from .regnet import load_model

        model, _ = load_model(args.reg)
        cases = load_cases(args.cases, cfg)
        report = evaluate(cases, model, cfg, _seg_models(args, cfg), out_dir=out, overlays=args.save_overlay)
        if report.rows:
            print(format_summary(report.summary))
        for case_id, reason in report.failed.items():
            print(f"failed: {case_id}: {reason}")
        print(f"metrics: {out / 'metrics.csv'}")
        return 0

    if args.verb == "study":
        from .pipeline import format_summary
        from .study import run_study

        cases = load_cases(args.cases, cfg)
        if not args.segment and not cfg.oracle_masks:
            cfg = cfg.update(oracle_masks=True)
        res = run_study(cases, cfg, out, segment=args.segment)
        print(format_summary(res.report.summary))
        print(f"metrics: {out / 'eval' / 'metrics.csv'}")
        return 0
    raise AssertionError(args.verb)


if __name__ == "__main__":
    sys.exit(main())
