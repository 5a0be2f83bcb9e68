"""``axialseg`` command line: gen-data, train, eval, bench, gradcheck.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import bench, data, metrics, model, training
from .tensor import NonFiniteError

log = logging.getLogger("axialseg")


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _image_size(text: str) -> int:
    value = int(text)
    if value < 16:
        raise argparse.ArgumentTypeError(f"size must be >= 16, got {value}")
    return value


def _unit_interval(text: str) -> float:
    value = float(text)
    if not 0.0 <= value <= 1.0:
        raise argparse.ArgumentTypeError(f"must be in [0, 1], got {value}")
    return value


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _variant_list(text: str) -> list[str]:
    names = [t for t in text.split(",") if t]
    for name in names:
        if name not in bench.VARIANTS:
            raise argparse.ArgumentTypeError(f"unknown variant {name!r}; valid: {', '.join(bench.VARIANTS)}")
    return names


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="milliseconds")


class RunManifest:
    """Records the invocation; flushed to disk on success and on failure."""

    def __init__(self, args: argparse.Namespace, argv: list[str], path: Path | None):
        self.path = path
        self.doc = {
            "subcommand": args.command,
            "argv": list(argv),
            "flags": {k: v for k, v in vars(args).items() if k not in ("func", "command") and not callable(v)},
            "seed": getattr(args, "seed", None),
            "start": _now(),
            "end": None,
            "status": "running",
            "artifacts": [],
        }

    def artifact(self, path) -> None:
        self.doc["artifacts"].append(str(path))

    def finish(self, status: str, error: str | None = None) -> None:
        self.doc["end"] = _now()
        self.doc["status"] = status
        if error:
            self.doc["error"] = error
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text(json.dumps(self.doc, indent=2, default=str) + "\n")


def _sidecar(path: Path, suffix: str) -> Path:
    return path.with_name(path.stem + suffix)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args, manifest: RunManifest) -> int:
    kwargs = dict(count=args.count, size=args.size, seed=args.seed, noise_sigma=args.noise, occluder_count=args.occluders)
    if args.radius is not None:
        kwargs["lesion_radius_range"] = tuple(args.radius)
    else:
        kwargs["lesion_radius_range"] = (max(1.0, args.size / 10), max(1.0, args.size * 3 / 16))
    if args.max_lesions is not None:
        kwargs["lesion_count_range"] = (1, args.max_lesions)
    cfg = data.SynthConfig(**kwargs)
    manifest.doc["synth_config"] = cfg.to_dict()
    for path in data.write_dataset(data.generate(cfg), args.out):
        manifest.artifact(path)
    print(f"wrote {cfg.count} samples to {args.out}")
    return 0


def cmd_train(args, manifest: RunManifest) -> int:
    samples = data.load_dataset(args.data)
    train_set, val_set = samples, []
    if args.val_fraction > 0:
        train_set, val_set = data.split(samples, 1.0 - args.val_fraction, args.seed)
        if not train_set:
            raise data.DataError("validation fraction leaves no training samples")
    h, w = samples[0].image.shape
    cfg = model.SegModelConfig(
        d_model=args.d_model,
        heads=args.heads,
        num_blocks=args.blocks,
        downsample_factor=args.downsample,
        attention_variant=args.variant,
        input_size=(h, w),
        seed=args.seed,
    )
    tcfg = training.TrainConfig(
        steps=args.steps, batch_size=args.batch, learning_rate=args.lr, loss_mix=args.loss_mix, seed=args.seed
    )
    manifest.doc["model_config"] = cfg.to_dict()
    net = model.build(cfg)
    net, train_log = training.train(net, train_set, tcfg, val=val_set or None)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    model.save_checkpoint(net, out)
    manifest.artifact(out)
    log_csv = _sidecar(out, ".log.csv")
    train_log.write_csv(log_csv)
    manifest.artifact(log_csv)
    if train_log.validation:
        val_csv = _sidecar(out, ".val.csv")
        train_log.write_validation_csv(val_csv)
        manifest.artifact(val_csv)
    if not args.no_plot:
        from .plotting import plot_training

        fig = _sidecar(out, ".loss.png")
        plot_training(train_log, fig)
        manifest.artifact(fig)
    first, last = train_log.steps[0][1], train_log.steps[-1][1]
    train_report = metrics.dataset_report(train_set, net)
    manifest.doc["initial_loss"], manifest.doc["final_loss"] = first, last
    manifest.doc["train_metrics"] = train_report.__dict__
    print(f"loss {first:.6f} -> {last:.6f}")
    print(metrics.MetricsReport.CSV_HEADER)
    print(train_report.csv_row())
    return 0


def cmd_eval(args, manifest: RunManifest) -> int:
    net = model.load_checkpoint(args.ckpt)
    samples = data.load_dataset(args.data)
    expected = tuple(net.config.input_size)
    for s in samples:
        if s.image.shape != expected:
            raise data.DataError(f"sample {s.id} has size {s.image.shape}, checkpoint expects {expected}")
    rep = metrics.dataset_report(samples, net, args.threshold)
    manifest.doc["metrics"] = rep.__dict__
    print(metrics.MetricsReport.CSV_HEADER)
    print(rep.csv_row())
    return 0


def cmd_bench(args, manifest: RunManifest) -> int:
    records = bench.run_sweep(args.sizes, args.variants, trials=args.trials, d_model=args.d_model, heads=args.heads, seed=args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    bench.write_csv(records, out)
    manifest.artifact(out)
    if not args.no_plot:
        from .plotting import plot_bench

        fig = _sidecar(out, ".png")
        plot_bench(records, fig)
        manifest.artifact(fig)
    for r in records:
        ref = bench.closed_form(r.variant, r.H, r.W, r.d_model, r.heads).score
        print(f"{r.variant:>7} N={r.H:<4} flops={r.flops:<12} closed_form={ref:<12} wall_ms={r.wall_ns / 1e6:.3f}")
    return 0


def cmd_gradcheck(args, manifest: RunManifest) -> int:
    rep = training.attention_gradcheck(args.variant, eps=args.eps, seed=args.seed)
    manifest.doc["max_rel_error"] = rep.max_rel_error
    manifest.doc["worst_param"] = rep.worst_param
    print(f"variant={args.variant} max_rel_error={rep.max_rel_error:.3e} worst_param={rep.worst_param} coords={rep.coords_checked}")
    return 0 if rep.ok(1e-4) else 1


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="axialseg", description="Axial-attention lesion segmentation: data, training, evaluation, benchmarks.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic lesion dataset as PGM pairs")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--count", required=True, type=_positive_int)
    p.add_argument("--size", required=True, type=_image_size)
    p.add_argument("--seed", required=True, type=int)
    p.add_argument("--noise", type=float, default=0.03)
    p.add_argument("--occluders", type=int, default=2)
    p.add_argument("--radius", type=float, nargs=2, metavar=("MIN", "MAX"))
    p.add_argument("--max-lesions", type=_positive_int)
    p.set_defaults(func=cmd_gen_data, manifest=lambda a: a.out / "manifest.json")

    p = sub.add_parser("train", help="train a segmentation model")
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--steps", required=True, type=_positive_int)
    p.add_argument("--seed", required=True, type=int)
    p.add_argument("--variant", required=True, choices=[v.value for v in model.AttentionVariant])
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--batch", type=_positive_int, default=8)
    p.add_argument("--lambda", dest="loss_mix", type=_unit_interval, default=0.5)
    p.add_argument("--d-model", type=_positive_int, default=16)
    p.add_argument("--heads", type=_positive_int, default=2)
    p.add_argument("--blocks", type=_positive_int, default=2)
    p.add_argument("--downsample", type=_positive_int, default=2)
    p.add_argument("--val-fraction", type=_unit_interval, default=0.0)
    p.add_argument("--no-plot", action="store_true")
    p.set_defaults(func=cmd_train, manifest=lambda a: _sidecar(a.out, ".manifest.json"))

    p = sub.add_parser("eval", help="micro-averaged metrics of a checkpoint on a dataset")
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--ckpt", required=True, type=Path)
    p.add_argument("--threshold", type=_unit_interval, default=0.5)
    p.add_argument("--manifest", type=Path)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="flop counts and timings, full 2D vs axial attention")
    p.add_argument("--sizes", type=_int_list, default=[8, 16, 32, 64])
    p.add_argument("--variants", type=_variant_list, default=list(bench.VARIANTS))
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--trials", type=_positive_int, default=5)
    p.add_argument("--d-model", type=_positive_int, default=8)
    p.add_argument("--heads", type=_positive_int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-plot", action="store_true")
    p.set_defaults(func=cmd_bench, manifest=lambda a: _sidecar(a.out, ".manifest.json"))

    p = sub.add_parser("gradcheck", help="finite-difference check of an attention variant")
    p.add_argument("--variant", required=True, choices=training.GRADCHECK_VARIANTS)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--manifest", type=Path)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    where = args.manifest(args) if callable(getattr(args, "manifest", None)) else getattr(args, "manifest", None)
    manifest = RunManifest(args, argv, where)
    try:
        code = args.func(args, manifest)
    except (
        data.DataError,
        model.CheckpointError,
        model.ConfigError,
        training.TrainingError,
        NonFiniteError,
        ValueError,
        OSError,
    ) as exc:
        manifest.finish("failed", str(exc))
        print(f"error: {exc}", file=sys.stderr)
        return 1
    manifest.finish("ok" if code == 0 else "failed")
    return code


if __name__ == "__main__":
    sys.exit(main())
