"""Command-line interface.

Subcommands: ``synth`` (seeded dataset generation), ``train``, ``infer``,
``eval`` and ``gradcheck``. Exit codes are a stable contract: 0 success,
1 validation or I/O error, 2 numerical failure. Training progress is
emitted as JSON lines on stdout so harnesses can parse loss traces.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path


from .checkpoint import load_training_state, save_training_state
from .checks import run_gradcheck_suite
from .config import TrainConfig
from .data import load_dataset, load_image_png, load_patches, save_mask_png, synth_generate, write_dataset
from .errors import CvfcError, NumericError, TrainingAbort, ValidationError
from .evaluation import evaluate_dirs
from .train import train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERIC = 2


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems with exit code 1, no SystemExit."""

    def error(self, message):
        raise _UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="cvfc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset with ground truth")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, required=True, help="number of patches (>= 1)")
    p.add_argument("--size", type=int, default=48, help="square patch size (>= 16)")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="co-train the three-branch model")
    p.add_argument("--config", required=True, help="path to config JSON")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--mode", default="manifest", choices=["manifest", "bracket_names"])
    p.add_argument("--epochs", type=int, default=None, help="override config epochs")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--lr", type=float, default=None, help="override config lr")
    p.add_argument("--batch-size", type=int, default=None, help="override config batch size")

    p = sub.add_parser("infer", help="write pseudo-mask PNGs for a directory of images")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=None, help="background threshold in [0,1)")

    p = sub.add_parser("eval", help="score predicted masks against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--classes", default="tumor,stroma,normal", help="comma-separated names")
    p.add_argument("--json", dest="json_path", default=None, help="also write a JSON report")

    p = sub.add_parser("gradcheck", help="finite-difference check of every op")
    p.add_argument("--seed", type=int, default=0)

    return parser


def _cmd_synth(args) -> int:
    patches = synth_generate(seed=args.seed, count=args.count, size=args.size)
    out = write_dataset(patches, args.out)
    print(json.dumps({"written": len(patches), "dir": str(out)}))
    return EXIT_OK


def _cmd_train(args) -> int:
    cfg_path = Path(args.config)
    if not cfg_path.is_file():
        raise ValidationError(f"config file not found: {cfg_path}")
    cfg = TrainConfig.from_json(cfg_path.read_text())
    cfg = cfg.with_overrides(
        epochs=args.epochs, seed=args.seed, lr=args.lr, batch_size=args.batch_size
    )

    resume = None
    if args.resume:
        model, optimizer, done_epochs, ckpt_cfg = load_training_state(Path(args.resume))
        # the checkpoint's embedded config governs the run it continues
        cfg = ckpt_cfg.with_overrides(epochs=args.epochs)
        resume = (model, optimizer, done_epochs)

    manifest = load_dataset(args.data, mode=args.mode, class_names=cfg.class_names)
    patches = load_patches(manifest)

    def log_fn(record):
        print(json.dumps(record, sort_keys=True), flush=True)

    result = train(cfg, patches, resume_from=resume, log_fn=log_fn)
    save_training_state(Path(args.out), result.model, result.optimizer, result.final_epoch, cfg)
    return EXIT_OK


def _cmd_infer(args) -> int:
    model, _, _, cfg = load_training_state(Path(args.ckpt))
    images_dir = Path(args.images)
    if not images_dir.is_dir():
        raise ValidationError(f"images directory not found: {images_dir}")
    paths = sorted(images_dir.glob("*.png"))
    if not paths:
        raise ValidationError(f"no PNG images under {images_dir}")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for path in paths:
        image = load_image_png(path)
        masks = model.infer_pseudo_labels(image[None], threshold=args.threshold)
        save_mask_png(masks[0], out_dir / path.name)
    print(json.dumps({"inferred": len(paths), "dir": str(out_dir)}))
    return EXIT_OK


def _cmd_eval(args) -> int:
    class_names = tuple(c.strip() for c in args.classes.split(",") if c.strip())
    if not class_names:
        raise ValidationError("--classes must name at least one class")
    report = evaluate_dirs(args.pred, args.gt, class_names)
    print(report.table())
    if args.json_path:
        Path(args.json_path).write_text(report.to_json() + "\n")
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    reports = run_gradcheck_suite(seed=args.seed)
    ok = True
    for report in reports:
        print(report)
        ok = ok and report.passed
    return EXIT_OK if ok else EXIT_NUMERIC


_COMMANDS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "infer": _cmd_infer,
    "eval": _cmd_eval,
    "gradcheck": _cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE

    try:
        return _COMMANDS[args.command](args)
    except TrainingAbort as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        if exc.breakdown is not None:
            print(json.dumps(exc.breakdown.to_dict(), sort_keys=True), file=sys.stderr)
        return EXIT_NUMERIC
    except NumericError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValidationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CvfcError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
