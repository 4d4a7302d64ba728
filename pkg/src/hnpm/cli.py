"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 configuration or usage error,
3 checkpoint integrity error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, FormatError, HNPMError, IntegrityError, VersionError

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_INTEGRITY = 0, 1, 2, 3

log = logging.getLogger("hnpm")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _resolve_config(args):
    from .trainer import TrainConfig, apply_preset, load_config

    cfg = load_config(args.config) if args.config else TrainConfig()
    if args.preset:
        cfg = apply_preset(cfg, args.preset)
    if args.seed is not None:
        cfg = cfg.with_overrides(seed=args.seed)
    if getattr(args, "epochs", None) is not None:
        cfg = cfg.with_overrides(epochs=args.epochs)
    return cfg


def _probe_checkpoint(ckpt, dataset, mode="linear", encoder="teacher", k_neighbors=5):
    from .evaluation import extract_representations, knn_probe, linear_probe
    from .trainer import resolve_encoder

    spec = resolve_encoder(ckpt.config, dataset)
    params = ckpt.teacher if encoder == "teacher" else ckpt.student
    reps, labels = extract_representations(params, spec, dataset)
    if mode == "linear":
        return linear_probe(reps, labels)[1]
    return knn_probe(reps, labels, k_neighbors)


# -- commands ------------------------------------------------------------------------


def cmd_train(args) -> int:
    from .trainer import save_config, train

    cfg = _resolve_config(args)
    out = Path(args.out)
    started = _now()
    t0 = datetime.now(timezone.utc)
    ckpt, records = train(cfg, out)
    save_config(cfg, out / "config.yaml")
    artifacts = sorted(p.name for p in out.glob("*.hnpm"))
    manifest = {
        "toolkit_version": __version__,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "artifacts": {"checkpoints": artifacts, "metrics": "metrics.jsonl", "config": "config.yaml"},
        "started": started,
        "finished": _now(),
        "wall_seconds": (datetime.now(timezone.utc) - t0).total_seconds(),
        "epochs_completed": ckpt.epoch,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    if records:
        last = records[-1]
        print(f"trained {ckpt.epoch} epochs; final loss {last.loss_total:.6f}; outputs in {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .data import load_dataset, parse_dataset_spec

    ckpt = load_checkpoint(args.checkpoint)
    ref = parse_dataset_spec(args.dataset) if args.dataset else ckpt.config.dataset
    report = _probe_checkpoint(ckpt, load_dataset(ref), args.mode, args.encoder, args.k)
    out = Path(args.report) if args.report else Path(args.checkpoint).with_name(f"eval_{args.mode}.txt")
    report.write(out)
    print(f"top1: {report.top1:.3f}")
    print(f"top5: {report.top5:.3f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import CASES, format_table, run_gradcheck

    if args.ops != "all" and args.ops not in CASES:
        raise ConfigError(f"unknown op {args.ops!r}; known: {', '.join(CASES)}")
    if args.trials < 1:
        raise ConfigError("--trials must be at least 1")
    results = run_gradcheck(args.ops, args.trials, args.seed)
    print(format_table(results))
    failed = [r for r in results if not r.passed]
    if failed:
        for r in failed:
            print(f"FAILED {r.name}: worst relative error {r.worst_rel_error:.3e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def _parse_axis_values(axis: str, text: str) -> list:
    items = [v.strip() for v in text.split(",") if v.strip()]
    if not items:
        raise ConfigError("--values is empty")
    if axis == "tau":
        try:
            return [float(v) for v in items]
        except ValueError:
            raise ConfigError(f"--values for tau must be numbers, got {text!r}") from None
    flags = {"on": True, "off": False, "true": True, "false": False, "1": True, "0": False}
    bad = [v for v in items if v.lower() not in flags]
    if bad:
        raise ConfigError(f"--values for {axis} must be on/off, got {bad}")
    return [flags[v.lower()] for v in items]


AXIS_FIELD = {"tau": "tau", "hnpm": "hnpm_enabled", "blockgrad": "block_student_grad"}


def cmd_ablate(args) -> int:
    from .data import load_dataset
    from .trainer import train

    base = _resolve_config(args)
    values = _parse_axis_values(args.axis, args.values)
    dataset = load_dataset(base.dataset)
    out = Path(args.out) if args.out else None
    rows, failures = [], 0
    labels = [v.strip() for v in args.values.split(",") if v.strip()]
    for label, value in zip(labels, values):
        run_dir = out / f"{args.axis}_{label}" if out else None
        try:
            cfg = base.with_overrides(**{AXIS_FIELD[args.axis]: value})
            ckpt, records = train(cfg, run_dir, dataset=dataset)
            report = _probe_checkpoint(ckpt, dataset)
            tail = [r.loss_total for r in records[-10:]]
            rows.append((label, records[-1].loss_total, report.top1, float(np.var(tail))))
        except HNPMError as exc:
            failures += 1
            print(f"run {args.axis}={label} failed: {exc}", file=sys.stderr)
            rows.append((label, float("nan"), float("nan"), float("nan")))
    header = f"{args.axis:>10}  {'final_loss':>12}  {'top1':>6}  {'last10_loss_var':>15}"
    lines = [header] + [f"{v:>10}  {l:>12.6f}  {a:>6.3f}  {s:>15.3e}" for v, l, a, s in rows]
    print("\n".join(lines))
    if out:
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation.txt").write_text("\n".join(lines) + "\n")
    return EXIT_RUNTIME if failures else EXIT_OK


def read_png(path) -> np.ndarray:
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as im:
            rgb = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except (OSError, UnidentifiedImageError) as exc:
        raise FormatError(f"cannot read image {path}: {exc}") from None
    return rgb.transpose(2, 0, 1)


def write_png(img: np.ndarray, path) -> None:
    from PIL import Image

    pixels = np.clip(np.rint(img.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(pixels, "RGB").save(path, format="PNG")


def cmd_augment_preview(args) -> int:
    import yaml

    from .augment import AugmentConfig, RngStream, augment_image

    cfg = AugmentConfig()
    if args.config:
        try:
            raw = yaml.safe_load(Path(args.config).read_text()) or {}
            cfg = AugmentConfig(**raw)
        except (OSError, yaml.YAMLError, TypeError) as exc:
            raise ConfigError(f"augment config {args.config}: {exc}") from None
    img = read_png(args.input)
    write_png(augment_image(img, cfg, RngStream(args.seed)), args.out)
    return EXIT_OK


# -- parser -----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hnpm", description="Student/teacher contrastive training with hard negative mining.")
    p.add_argument("--version", action="version", version=f"hnpm {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    def run_flags(sp, out_required):
        sp.add_argument("--config", help="YAML training config")
        sp.add_argument("--preset", choices=["paper", "desk"])
        sp.add_argument("--seed", type=int)
        sp.add_argument("--epochs", type=int, help="override the epoch count")
        sp.add_argument("--out", required=out_required, help="output directory")

    t = sub.add_parser("train", help="train a model")
    run_flags(t, True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint with a frozen-feature probe")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--mode", choices=["linear", "knn"], default="linear")
    e.add_argument("--dataset", help="synthetic:k=5,d=32,... or cifar:PATH (default: the training dataset)")
    e.add_argument("--encoder", choices=["teacher", "student"], default="teacher")
    e.add_argument("--k", type=int, default=5, help="neighbours for knn mode")
    e.add_argument("--report", help="report path (default: next to the checkpoint)")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    g.add_argument("--ops", default="all")
    g.add_argument("--trials", type=int, default=3)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)

    a = sub.add_parser("ablate", help="train once per value of one axis and compare")
    run_flags(a, False)
    a.add_argument("--axis", choices=sorted(AXIS_FIELD), required=True)
    a.add_argument("--values", required=True, help="comma-separated, e.g. 0.0,0.5,1.0 or on,off")
    a.set_defaults(func=cmd_ablate)

    v = sub.add_parser("augment-preview", help="write one augmented image (before normalisation)")
    v.add_argument("--in", dest="input", required=True)
    v.add_argument("--out", required=True)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--config", help="YAML mapping of augmentation settings")
    v.set_defaults(func=cmd_augment_preview)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (IntegrityError, VersionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except (ConfigError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - the exit-code contract covers every failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
