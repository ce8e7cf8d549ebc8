"""Command-line entry point: ``heartcodec <subcommand> ...``.

Exit codes: 0 success, 1 metric or verification failure, 2 usage or
environment error (bad flags, missing files, unavailable external tool).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .autograd.checkpoint import CheckpointError
from .codec_sim import (
    DEFAULT_DECODE_TEMPLATE,
    DEFAULT_ENCODE_TEMPLATE,
    ENCODER_ENV,
    STANDARD_BITRATES,
    CodecError,
    augment_manifest,
    check_external_tools,
    format_bitrate,
    parse_bitrate_list,
)
from .dataset import (
    CLASSES,
    FoldPlan,
    Manifest,
    ManifestError,
    fold_split,
    make_folds,
    scan_y18,
    write_synthetic_corpus,
)

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("heartcodec")


class UsageError(Exception):
    """Environment or input problem detected before doing any work."""


# --- argument types -------------------------------------------------------------


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def _nonneg_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {v}")
    return v


def _positive_float(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not v > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {v}")
    return v


def _nonneg_float(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative number, got {v}")
    return v


def _bitrates(text: str) -> list[int]:
    try:
        return parse_bitrate_list(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _on_off(text: str) -> bool:
    if text.lower() in ("on", "yes", "true", "1"):
        return True
    if text.lower() in ("off", "no", "false", "0"):
        return False
    raise argparse.ArgumentTypeError(f"expected on/off, got {text!r}")


DEFAULT_BITRATES = ",".join(format_bitrate(b) for b in STANDARD_BITRATES)


# --- helpers ----------------------------------------------------------------------


def _read_manifest(path) -> Manifest:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"manifest not found: {path}")
    return Manifest.read(path)


def _read_plan(path) -> FoldPlan:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"fold plan not found: {path}")
    try:
        return FoldPlan.from_dict(json.loads(path.read_text(encoding="utf-8")))
    except (KeyError, ValueError, TypeError) as exc:
        raise UsageError(f"bad fold plan {path}: {exc}") from exc


def _print_counts(manifest: Manifest) -> None:
    counts = manifest.class_counts()
    for c in CLASSES:
        print(f"{c:4s} {counts[c]}")
    print(f"total {sum(counts.values())}")


def _fmt_cer(v) -> str:
    return "n/a" if v is None else f"{v:.2f}%"


# --- subcommands ------------------------------------------------------------------


def cmd_scan(args) -> int:
    root = Path(args.root)
    if not root.is_dir():
        raise UsageError(f"dataset root does not exist: {root}")
    manifest = scan_y18(root)
    manifest.write(args.out)
    _print_counts(manifest)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_synth(args) -> int:
    manifest = write_synthetic_corpus(args.out, args.per_class, seed=args.seed)
    _print_counts(manifest)
    print(f"wrote {Path(args.out) / 'manifest.jsonl'}")
    return EXIT_OK


def cmd_augment(args) -> int:
    manifest = _read_manifest(args.manifest)
    if args.engine == "external":
        check_external_tools(args.encoder_template, args.decoder_template)
    out_dir = Path(args.out)
    out_manifest = Path(args.out_manifest) if args.out_manifest else out_dir / "manifest.jsonl"
    augmented = augment_manifest(
        manifest,
        args.bitrates,
        engine=args.engine,
        work_dir=out_dir,
        seed=args.seed,
        jobs=args.jobs,
        encoder_command_template=args.encoder_template,
        decoder_command_template=args.decoder_template,
    )
    augmented.write(out_manifest)
    print(f"{len(manifest)} originals -> {len(augmented)} entries ({len(augmented.codec_entries())} codec copies)")
    print(f"wrote {out_manifest}")
    return EXIT_OK


def cmd_folds(args) -> int:
    manifest = _read_manifest(args.manifest)
    plan = make_folds(manifest, args.k, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(plan.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    for f in range(plan.k):
        train, test_o, test_c = fold_split(manifest, plan, f)
        print(f"fold {f}: train {len(train)}, test original {len(test_o)}, test codec {len(test_c)}")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .train_eval import TrainConfig, cross_validate

    manifest = _read_manifest(args.manifest)
    plan = _read_plan(args.folds) if args.folds else None
    config = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        weight_decay=args.weight_decay,
        k=plan.k if plan else args.k,
        seed=args.seed,
        use_augmented_train=args.augmented_train,
        engine=args.engine,
        bitrates=tuple(sorted({e.bitrate_bps for e in manifest.codec_entries()})),
        precision=args.mode,
    )
    report = cross_validate(manifest, config, out_dir=args.out, jobs=args.jobs, plan=plan)
    for r in report.folds:
        print(f"fold {r.fold}: original CER {_fmt_cer(r.cer_original)}, codec CER {_fmt_cer(r.cer_codec)}")
    print(f"mean original CER {report.mean_cer_original:.2f}% (std {report.std_cer_original:.2f})")
    if report.mean_cer_codec is None:
        print("mean codec CER n/a (no codec entries)")
    else:
        print(f"mean codec CER {report.mean_cer_codec:.2f}% (std {report.std_cer_codec:.2f})")
    print(f"wrote {Path(args.out) / 'report.json'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .train_eval import evaluate_checkpoint

    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise UsageError(f"checkpoint not found: {ckpt}")
    manifest = _read_manifest(args.manifest)
    ids = None
    if args.folds is not None or args.fold is not None:
        if args.folds is None or args.fold is None:
            raise UsageError("--folds and --fold must be given together")
        plan = _read_plan(args.folds)
        _, test_o, test_c = fold_split(manifest, plan, args.fold)
        ids = test_o + test_c
    results = evaluate_checkpoint(ckpt, manifest, args.subset, ids=ids)
    for name, r in results.items():
        if r.cer is None:
            print(f"{name}: n=0 CER n/a ({r.note})")
        else:
            print(f"{name}: n={r.n} CER {r.cer:.2f}%")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradsuite import run_suite, summarize

    results = run_suite(args.mode, seeds=range(args.seeds), include_model=not args.ops_only)
    ok = True
    for name, (worst, tol, passed) in summarize(results).items():
        ok &= passed
        skipped = sum(r.skipped for r in results if r.name == name)
        note = f" (skipped {skipped} kink-straddling coords)" if skipped else ""
        print(f"{'PASS' if passed else 'FAIL'} {name:28s} max rel err {worst:.2e} <= {tol:.0e}{note}")
    print(f"{args.mode}-bit gradient suite: {'all checks passed' if ok else 'FAILED'}")
    return EXIT_OK if ok else EXIT_FAIL


# --- parser -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="heartcodec", description="Codec-augmented heart-sound classification")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("scan", help="index a class-per-directory WAV corpus into a manifest")
    p.add_argument("root", help="corpus root with one subdirectory per class")
    p.add_argument("--out", required=True, help="manifest path to write (JSONL)")
    p.set_defaults(func=cmd_scan)

    p = sub.add_parser("synth", help="write a synthetic 5-class PCG corpus and its manifest")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--per-class", type=_positive_int, default=100, help="clips per class (default 100)")
    p.add_argument("--seed", type=_nonneg_int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("augment", help="add codec-compressed copies of every original")
    p.add_argument("--manifest", required=True, help="manifest of original recordings")
    p.add_argument("--out", required=True, help="directory for the codec copies")
    p.add_argument("--out-manifest", help="augmented manifest path (default <out>/manifest.jsonl)")
    p.add_argument("--bitrates", type=_bitrates, default=DEFAULT_BITRATES, help=f"default {DEFAULT_BITRATES}")
    p.add_argument("--engine", choices=("external", "builtin"), default="builtin")
    p.add_argument(
        "--encoder-template",
        default=DEFAULT_ENCODE_TEMPLATE,
        help="external encode command; placeholders {input} {output} {bitrate} {bitrate_k}. "
        f"${ENCODER_ENV} replaces the program name when set",
    )
    p.add_argument("--decoder-template", default=DEFAULT_DECODE_TEMPLATE, help="external decode-to-WAV command")
    p.add_argument("--seed", type=_nonneg_int, default=0)
    p.add_argument("--jobs", type=_positive_int, default=1)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("folds", help="write a stratified k-fold plan")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="fold plan path (JSON)")
    p.add_argument("--k", type=_positive_int, default=10)
    p.add_argument("--seed", type=_nonneg_int, default=0)
    p.set_defaults(func=cmd_folds)

    p = sub.add_parser("train", help="k-fold cross-validated training; writes report.json and checkpoints")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--folds", help="fold plan from 'heartcodec folds' (default: derived from --seed)")
    p.add_argument("--epochs", type=_positive_int, default=100)
    p.add_argument("--batch-size", type=_positive_int, default=5)
    p.add_argument("--lr", type=_positive_float, default=0.0005)
    p.add_argument("--weight-decay", type=_nonneg_float, default=0.0001)
    p.add_argument("--k", type=_positive_int, default=10)
    p.add_argument("--seed", type=_nonneg_int, default=0)
    p.add_argument("--jobs", type=_positive_int, default=1, help="folds trained in parallel")
    p.add_argument("--augmented-train", type=_on_off, default=True, help="train on codec copies too (on/off)")
    p.add_argument("--engine", choices=("external", "builtin"), default=None, help="recorded in the report only")
    p.add_argument("--mode", type=int, choices=(32, 64), default=32, help="numeric precision")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--subset", choices=("original", "codec", "both"), default="both")
    p.add_argument("--folds", help="fold plan; with --fold, restrict to that fold's test entries")
    p.add_argument("--fold", type=_nonneg_int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    p.add_argument("--mode", type=int, choices=(32, 64), default=64)
    p.add_argument("--seeds", type=_positive_int, default=20)
    p.add_argument("--ops-only", action="store_true", help="skip the end-to-end M5 checks")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse: --help (0) or bad flags (2)
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, ManifestError, CheckpointError, CodecError, FileNotFoundError, ValueError) as exc:
        print(f"heartcodec {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
