"""Command-line entry point.

Subcommands: train, eval, analyze, gradcheck, selftest, compare. Runs are
declarative: a JSON config file mirrors the model/training fields, flags
override it, and every run echoes its merged config next to its outputs.
Exit codes: 0 success, 1 validation error (bad flags/config), 2 runtime
failure (including failed verification suites).
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

from . import selftest
from .analysis import analyze_descriptors, descriptor_trend_summary, write_descriptor_csvs
from .attention import param_count
from .data import load_dataset, nearest_centroid_error
from .models import ModelSpec, build_model
from .train import TrainConfig, evaluate, load_checkpoint, save_checkpoint, train

MODEL_KEYS = ("variant", "stage_channels", "blocks_per_stage", "reduction",
              "num_classes", "in_channels", "stop_grad_weights")
TRAIN_KEYS = ("epochs", "batch_size", "lr", "milestones", "momentum",
              "weight_decay", "nesterov", "augment_shift")
SHARED_KEYS = ("seed", "dataset")
KNOWN_KEYS = frozenset(MODEL_KEYS + TRAIN_KEYS + SHARED_KEYS)


class CliError(Exception):
    """User-facing validation problem; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would sys.exit(2); we want exit 1
        raise CliError(f"{message}\n{self.format_usage()}")


def _build_parser() -> _Parser:
    parser = _Parser(prog="csanet", description=__doc__)
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def add_run_flags(p, with_training=True):
        p.add_argument("--config", help="JSON config file (flags override it)")
        p.add_argument("--variant", choices=("baseline", "se", "csa"))
        p.add_argument("--dataset", help="'synthetic' or 'idx:<dir>'")
        p.add_argument("--seed", type=int)
        p.add_argument("--reduction", type=int)
        p.add_argument("--stop-grad-weights", action="store_true", default=None)
        p.add_argument("--limit", type=int, help="cap each dataset split")
        if with_training:
            p.add_argument("--epochs", type=int)
            p.add_argument("--batch", type=int)
            p.add_argument("--lr", type=float)
            p.add_argument("--milestones", help="comma-separated epoch indices")

    p_train = sub.add_parser("train", help="train one variant")
    add_run_flags(p_train)
    p_train.add_argument("--out", default="runs/train")
    p_train.set_defaults(func=_cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--dataset", default="synthetic")
    p_eval.add_argument("--seed", type=int, default=0)
    p_eval.add_argument("--limit", type=int)
    p_eval.add_argument("--out", default="runs/eval")
    p_eval.set_defaults(func=_cmd_eval)

    p_an = sub.add_parser("analyze", help="per-stage descriptor CSVs from a checkpoint")
    p_an.add_argument("--checkpoint", required=True)
    p_an.add_argument("--dataset", default="synthetic")
    p_an.add_argument("--seed", type=int, default=0)
    p_an.add_argument("--limit", type=int)
    p_an.add_argument("--ema", type=float, help="optional smoothing factor, e.g. 0.3")
    p_an.add_argument("--out", default="runs/analyze")
    p_an.set_defaults(func=_cmd_analyze)

    p_gc = sub.add_parser("gradcheck", help="finite-difference checks on all layers")
    p_gc.set_defaults(func=_cmd_gradcheck)

    p_st = sub.add_parser("selftest", help="run the property suites")
    p_st.add_argument("--fast", action="store_true", help="smoke-test instance counts")
    p_st.set_defaults(func=_cmd_selftest)

    p_cmp = sub.add_parser("compare", help="train all three variants with a shared seed")
    add_run_flags(p_cmp)
    p_cmp.add_argument("--out", default="runs/compare")
    p_cmp.set_defaults(func=_cmd_compare)

    return parser


def _merged_config(args) -> dict:
    cfg: dict = {"dataset": "synthetic", "seed": 0}
    cfg.update({k: v for k, v in asdict(ModelSpec()).items() if k != "seed"})
    cfg.update({k: v for k, v in asdict(TrainConfig()).items() if k != "seed"})
    milestones_explicit = False
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise CliError(f"config file not found: {path}")
        try:
            file_cfg = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise CliError(f"config file is not valid JSON: {exc}") from exc
        unknown = sorted(set(file_cfg) - KNOWN_KEYS)
        if unknown:
            raise CliError(f"unknown config keys: {unknown}")
        milestones_explicit = "milestones" in file_cfg
        cfg.update(file_cfg)
    flag_map = {
        "variant": "variant",
        "dataset": "dataset",
        "seed": "seed",
        "reduction": "reduction",
        "stop_grad_weights": "stop_grad_weights",
        "epochs": "epochs",
        "batch": "batch_size",
        "lr": "lr",
    }
    for flag, key in flag_map.items():
        value = getattr(args, flag, None)
        if value is not None:
            cfg[key] = value
    milestones_flag = getattr(args, "milestones", None)
    if milestones_flag is not None:
        try:
            cfg["milestones"] = [int(m) for m in str(milestones_flag).split(",") if m != ""]
        except ValueError as exc:
            raise CliError(f"bad --milestones value: {milestones_flag!r}") from exc
        milestones_explicit = True
    if not milestones_explicit:
        epochs = int(cfg["epochs"])
        cfg["milestones"] = [m for m in sorted({(4 * epochs) // 5, (9 * epochs) // 10})
                             if 0 < m < epochs]
    return cfg


def _spec_and_config(cfg: dict) -> tuple[ModelSpec, TrainConfig]:
    try:
        spec = ModelSpec(
            variant=cfg["variant"],
            stage_channels=tuple(cfg["stage_channels"]),
            blocks_per_stage=cfg["blocks_per_stage"],
            reduction=cfg["reduction"],
            num_classes=cfg["num_classes"],
            in_channels=cfg["in_channels"],
            seed=cfg["seed"],
            stop_grad_weights=cfg["stop_grad_weights"],
        )
        tc = TrainConfig(
            epochs=cfg["epochs"],
            batch_size=cfg["batch_size"],
            lr=cfg["lr"],
            milestones=tuple(cfg["milestones"]),
            momentum=cfg["momentum"],
            weight_decay=cfg["weight_decay"],
            nesterov=cfg["nesterov"],
            augment_shift=cfg["augment_shift"],
            seed=cfg["seed"],
        )
    except (ValueError, KeyError) as exc:
        raise CliError(f"invalid configuration: {exc}") from exc
    return spec, tc


def _load_data(cfg: dict, limit):
    return load_dataset(cfg["dataset"], limit=limit, seed=int(cfg["seed"]),
                        synthetic_classes=int(cfg["num_classes"]))


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _echo_config(out_dir: Path, cfg: dict) -> None:
    _write_json(out_dir / "config.json", cfg)


def _cmd_train(args) -> int:
    cfg = _merged_config(args)
    spec, train_cfg = _spec_and_config(cfg)
    out_dir = Path(args.out)
    _echo_config(out_dir, cfg)
    dataset = _load_data(cfg, args.limit)
    model = build_model(spec)
    report = train(model, dataset, train_cfg)
    (out_dir / "metrics.json").write_text(report.metrics_json())
    _write_json(out_dir / "timing.json", report.timing_dict())
    save_checkpoint(out_dir / "ckpt.npz", model)
    print(f"final train top-1 error: {report.final['train_top1_error']:.4f}")
    print(f"final test  top-1 error: {report.final['test_top1_error']:.4f}")
    print(f"outputs written to {out_dir}")
    return 0


def _cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.dataset, limit=args.limit, seed=args.seed,
                           synthetic_classes=model.spec.num_classes)
    metrics = evaluate(model, dataset.test_images, dataset.test_labels,
                       dataset.num_classes)
    out_dir = Path(args.out)
    _echo_config(out_dir, {"checkpoint": str(args.checkpoint),
                           "dataset": args.dataset, "seed": args.seed})
    _write_json(out_dir / "eval.json", metrics)
    print(json.dumps(metrics, sort_keys=True))
    return 0


def _cmd_analyze(args) -> int:
    model = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.dataset, limit=args.limit, seed=args.seed,
                           synthetic_classes=model.spec.num_classes)
    stages = analyze_descriptors(model, dataset, ema=args.ema)
    out_dir = Path(args.out)
    _echo_config(out_dir, {"checkpoint": str(args.checkpoint),
                           "dataset": args.dataset, "seed": args.seed,
                           "ema": args.ema})
    paths = write_descriptor_csvs(stages, out_dir)
    _write_json(out_dir / "trend.json", descriptor_trend_summary(stages))
    for path in paths:
        print(f"wrote {path}")
    return 0


def _cmd_gradcheck(args) -> int:
    del args
    result = selftest.check_gradients()
    print(f"{'PASS' if result.passed else 'FAIL'}  {result.name}: {result.detail}")
    return 0 if result.passed else 2


def _cmd_selftest(args) -> int:
    results = selftest.run_all(fast=args.fast)
    width = max(len(r.name) for r in results)
    all_ok = True
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<{width}}  {r.detail}")
        all_ok &= r.passed
    print("all checks passed" if all_ok else "SELFTEST FAILED")
    return 0 if all_ok else 2


def _cmd_compare(args) -> int:
    cfg = _merged_config(args)
    out_dir = Path(args.out)
    _echo_config(out_dir, cfg)
    dataset = _load_data(cfg, args.limit)
    oracle_error = nearest_centroid_error(dataset)

    rows = {}
    timing = {}
    trend = None
    for variant in ("baseline", "se", "csa"):
        cfg_v = dict(cfg, variant=variant)
        spec, train_cfg = _spec_and_config(cfg_v)
        model = build_model(spec)
        report = train(model, dataset, train_cfg)
        variant_dir = out_dir / variant
        variant_dir.mkdir(parents=True, exist_ok=True)
        (variant_dir / "metrics.json").write_text(report.metrics_json())
        _write_json(variant_dir / "timing.json", report.timing_dict())
        save_checkpoint(variant_dir / "ckpt.npz", model)
        attn_params = sum(
            param_count(b) for b in model.attention_blocks if b is not None
        )
        rows[variant] = {
            "train_top1_error": report.final["train_top1_error"],
            "test_top1_error": report.final["test_top1_error"],
            "param_count": report.final["param_count"],
            "attention_param_count": attn_params,
        }
        timing[variant] = report.epoch_seconds
        if variant == "csa":
            stages = analyze_descriptors(model, dataset)
            trend = descriptor_trend_summary(stages)
            write_descriptor_csvs(stages, variant_dir)

    winner = min(rows, key=lambda v: (rows[v]["test_top1_error"], v))
    comparison = {
        "nearest_centroid_test_error": oracle_error,
        "variants": rows,
        "winner": winner,
        "descriptor_trend": trend,
    }
    _write_json(out_dir / "comparison.json", comparison)
    _write_json(out_dir / "comparison_timing.json",
                {"epoch_seconds": timing})

    header = f"{'variant':<10} {'train err':>10} {'test err':>10} {'params':>8} {'attn':>6} {'s/epoch':>8}"
    print(header)
    print("-" * len(header))
    for variant, row in rows.items():
        mean_s = sum(timing[variant]) / len(timing[variant])
        star = " *" if variant == winner else ""
        print(
            f"{variant:<10} {row['train_top1_error']:>10.4f} {row['test_top1_error']:>10.4f} "
            f"{row['param_count']:>8d} {row['attention_param_count']:>6d} {mean_s:>8.2f}{star}"
        )
    print(f"nearest-centroid test error: {oracle_error:.4f}")
    if trend is not None:
        per_stage = ", ".join(f"{m:.4f}" for m in trend["mean_abs_q_per_stage"])
        print(f"mean |q| per stage (soft trend check): {per_stage}; "
              f"last stage lowest: {trend['last_stage_is_lowest']}")
    return 0


def dispatch(argv) -> int:
    """Parse and run; returns the process exit code."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help and friends
        return int(exc.code or 0)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - boundary of the process
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
