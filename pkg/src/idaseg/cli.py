"""Command-line entry points: synth, pretrain, adapt, evaluate.

Configuration is layered: JSON config file, then ``IDA_``-prefixed
environment variables, then explicit flags. Every run directory gets an
immutable manifest capturing the resolved configuration and seeds.

Exit codes: 0 success, 2 usage or configuration error, 3 numeric
failure during training or evaluation.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import warnings
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint
from .config import (
    INPUT_MODES,
    PRETRAIN_STRATEGIES,
    TRANSLATION_STRATEGIES,
    ConfigError,
    NumericError,
    RunConfig,
    resolve_config,
)
from .data import DatasetError, Domain, load_dataset
from .metrics import evaluate_dataset, write_metrics_csv, write_summary_json, METRIC_COLUMNS
from .synthetic import STYLE_PRESETS, write_synthetic_dataset
from .trainer import (
    adapt_loop,
    load_pretrained,
    load_train_state,
    pretrain,
    save_pretrained,
    write_manifest,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _add_config_flags(p: argparse.ArgumentParser):
    """Flags mirroring RunConfig fields; None means 'not set here'."""
    p.add_argument("--config", type=Path, default=None, help="flat JSON config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None, dest="batch_size")
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--pretrain-iterations", type=int, default=None, dest="pretrain_iterations")
    p.add_argument("--m", type=int, default=None, help="mixing square side in pixels")
    p.add_argument("--strategy", choices=TRANSLATION_STRATEGIES, default=None,
                   help="translation strategy")
    p.add_argument("--input", choices=INPUT_MODES, default=None, dest="input_mode",
                   help="input strategy: whole-resize, patch crops, or both")
    p.add_argument("--th-t2s", type=float, default=None, dest="th_t2s")
    p.add_argument("--th-s2t", type=float, default=None, dest="th_s2t")
    p.add_argument("--delta", type=float, default=None)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--beta1", type=float, default=None)
    p.add_argument("--beta2", type=float, default=None)
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--ema-momentum", type=float, default=None, dest="ema_momentum")
    p.add_argument("--depth", type=int, default=None)
    p.add_argument("--base-channels", type=int, default=None, dest="base_channels")
    p.add_argument("--train-size", type=int, default=None, dest="train_size")
    p.add_argument("--eval-size", type=int, default=None, dest="eval_size")
    p.add_argument("--eval-every", type=int, default=None, dest="eval_every")
    p.add_argument("--checkpoint-every", type=int, default=None, dest="checkpoint_every")
    p.add_argument("--no-mrat", action="store_const", const=False, default=None, dest="mrat",
                   help="disable intermediate-image mixing")
    p.add_argument("--no-idcl", action="store_const", const=False, default=None, dest="idcl",
                   help="disable prototype contrastive alignment")
    p.add_argument("--no-self-training", action="store_const", const=False, default=None,
                   dest="self_training", help="disable adaptation entirely (baseline)")
    p.add_argument("--pretrain-strategy", choices=PRETRAIN_STRATEGIES, default=None,
                   dest="pretrain_strategy")


CONFIG_KEYS = (
    "seed", "lr", "batch_size", "iterations", "pretrain_iterations", "m", "strategy",
    "input_mode", "th_t2s", "th_s2t", "delta", "tau", "beta1", "beta2", "gamma",
    "ema_momentum", "depth", "base_channels", "train_size", "eval_size", "eval_every",
    "checkpoint_every", "mrat", "idcl", "self_training", "pretrain_strategy",
)


def _resolve(args: argparse.Namespace) -> RunConfig:
    overrides = {k: getattr(args, k) for k in CONFIG_KEYS if getattr(args, k, None) is not None}
    return resolve_config(config_file=args.config, overrides=overrides)


def _load_split(root: Path, domain: Domain, split: str):
    samples = load_dataset(root, domain, split=split)
    if not samples:
        raise DatasetError(f"no usable samples under {root}")
    return samples


def cmd_synth(args: argparse.Namespace) -> int:
    if args.n < 1:
        raise ConfigError(f"--n must be >= 1, got {args.n}")
    if args.n_eval < 0:
        raise ConfigError(f"--n-eval must be >= 0, got {args.n_eval}")
    out = Path(args.out)
    size = (args.size, args.size)
    plan = [("source", args.source_style, args.n, args.seed),
            ("target", args.target_style, args.n, args.seed + 1000)]
    if args.n_eval:
        plan.append(("target_eval", args.target_style, args.n_eval, args.seed + 2000))
    for name, style, n, seed in plan:
        root = write_synthetic_dataset(out / name, n, size, style, seed=seed)
        samples = load_dataset(root, Domain.SOURCE, split="eval")
        imgs = np.stack([s.pixels for s in samples])
        fg = np.mean([s.label.mean() for s in samples])
        print(f"{name}: {n} images at {args.size}x{args.size}, style={style}, "
              f"mean intensity {imgs.mean():.4f}, foreground fraction {fg:.4f}")
    print(f"datasets written under {out}")
    return EXIT_OK


def cmd_pretrain(args: argparse.Namespace) -> int:
    cfg = _resolve(args)
    source = _load_split(Path(args.source), Domain.SOURCE, "train")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out, cfg, [cfg.seed], "pretrain",
                   extra={"source": str(args.source),
                          "pretrain_strategy": cfg.pretrain_strategy})
    model, history = pretrain(
        source, cfg,
        log_path=out / "pretrain_history.csv",
        resume=args.resume,
        state_path=out / "pretrain_state.ckpt",
    )
    ckpt_path = save_pretrained(out / "pretrain.ckpt", model, cfg)
    last = history[-1]["val_dice"] if history else float("nan")
    print(f"pretrained checkpoint written to {ckpt_path} (final val dice {last:.4f})")
    return EXIT_OK


def cmd_adapt(args: argparse.Namespace) -> int:
    cfg = _resolve(args)
    if not cfg.idcl:
        for name in ("beta1", "beta2"):
            if getattr(args, name) is not None:
                warnings.warn(f"--{name} has no effect with contrastive alignment "
                              "disabled; ignored")
    if args.seeds > 1 and args.resume is not None:
        raise ConfigError("--resume only applies to single-seed runs")
    source = _load_split(Path(args.source), Domain.SOURCE, "train")
    target_train = _load_split(Path(args.target), Domain.TARGET, "train")
    target_eval = None
    if args.eval is not None:
        target_eval = _load_split(Path(args.eval), Domain.TARGET, "eval")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n_seeds = max(1, args.seeds)
    seeds = [cfg.seed + k for k in range(n_seeds)]
    write_manifest(out, cfg, seeds, "adapt",
                   extra={"source": str(args.source), "target": str(args.target),
                          "eval": str(args.eval) if args.eval else None})

    per_seed: dict[int, dict[str, float]] = {}
    for seed in seeds:
        run_cfg = RunConfig.from_dict({**cfg.to_dict(), "seed": seed}).validate()
        run_dir = out if n_seeds == 1 else out / f"seed_{seed}"
        run_dir.mkdir(parents=True, exist_ok=True)
        if args.pretrained is not None:
            model, _ = load_pretrained(args.pretrained, run_cfg)
        else:
            model, _ = pretrain(source, run_cfg,
                                log_path=run_dir / "pretrain_history.csv")
            save_pretrained(run_dir / "pretrain.ckpt", model, run_cfg)
        if args.dump_masks:
            _dump_mask_examples(run_dir / "masks_debug", source, target_train, model, run_cfg)
        state, history = adapt_loop(
            source, target_train, run_cfg, model,
            target_eval=target_eval, out_dir=run_dir, resume=args.resume,
        )
        if target_eval:
            report = evaluate_dataset(state.teacher, target_eval,
                                      (run_cfg.eval_size, run_cfg.eval_size))
            write_metrics_csv(report, run_dir / "metrics.csv")
            write_summary_json(report, run_dir / "summary.json", extra={"seed": seed})
            per_seed[seed] = dict(report.mean)
            print(f"seed {seed}: target dice {report.mean['dice']:.4f}, "
                  f"cl_dice {report.mean['cl_dice']:.4f}, bm {report.mean['bm']:.4f}")
        else:
            print(f"seed {seed}: adaptation finished at iteration {state.iteration} "
                  "(no eval set given)")

    if per_seed and n_seeds > 1:
        agg = {
            col: {
                "mean": float(np.mean([m[col] for m in per_seed.values()])),
                "std": float(np.std([m[col] for m in per_seed.values()])),
            }
            for col in METRIC_COLUMNS
        }
        payload = {"seeds": seeds,
                   "per_seed": {str(s): per_seed[s] for s in per_seed},
                   "aggregate": agg}
        with open(out / "summary.json", "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
        print("aggregate over seeds: "
              + ", ".join(f"{c} {agg[c]['mean']:.4f}+-{agg[c]['std']:.4f}"
                          for c in ("dice", "cl_dice", "bm")))
    return EXIT_OK


def _dump_mask_examples(out_dir: Path, source, target, model, cfg: RunConfig):
    """Illustrative mixing masks and intermediate images as PNGs."""
    from .models import pseudo_label
    from .mrat import make_intermediate_batch
    from .trainer import make_preprocess
    from .data import sample_quad

    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    quad = sample_quad(source, target, make_preprocess(cfg), rng, cfg.input_mode)
    pair = make_intermediate_batch(
        quad, pseudo_label(model, quad.tr.pixels), pseudo_label(model, quad.tp.pixels),
        cfg.m, cfg.strategy, rng,
    )
    for name, plane in (("mask_t2s", pair.mask_t2s), ("mask_s2t", pair.mask_s2t),
                        ("x_t2s", pair.x_t2s), ("x_s2t", pair.x_s2t)):
        if plane is None:
            continue
        arr = plane.plane if hasattr(plane, "plane") else plane
        if arr.dtype.kind == "f":
            out = np.round(np.clip(arr, 0, 1) * 255).astype(np.uint8)
        else:
            out = (arr * 255).astype(np.uint8)
        Image.fromarray(out).save(out_dir / f"{name}.png")


def cmd_evaluate(args: argparse.Namespace) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    kind = ckpt.meta.get("kind")
    if kind == "pretrain":
        model, stored_cfg = load_pretrained(args.checkpoint)
    elif kind == "train_state":
        state = load_train_state(args.checkpoint)
        model, stored_cfg = state.teacher, RunConfig.from_dict(ckpt.meta["config"])
    else:
        raise CheckpointError(f"{args.checkpoint}: unknown checkpoint kind {kind!r}")
    # the checkpoint's own eval size unless overridden by flag or environment
    if args.eval_size is not None:
        eval_size = args.eval_size
    elif "IDA_EVAL_SIZE" in os.environ:
        eval_size = int(os.environ["IDA_EVAL_SIZE"])
    else:
        eval_size = stored_cfg.eval_size
    samples = _load_split(Path(args.data), Domain.TARGET, "eval")
    report = evaluate_dataset(model, samples, (eval_size, eval_size))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(report, out / "metrics.csv")
    write_summary_json(report, out / "summary.json",
                       extra={"checkpoint": str(args.checkpoint), "data": str(args.data)})
    if args.dump_preds:
        from .models import predict_sample

        pred_dir = out / "preds"
        pred_dir.mkdir(exist_ok=True)
        for s in samples:
            probs = predict_sample(model, s, (eval_size, eval_size))
            Image.fromarray(np.round(probs * 255).astype(np.uint8)).save(
                pred_dir / f"{s.id}_prob.png")
            Image.fromarray(((probs > 0.5) * 255).astype(np.uint8)).save(
                pred_dir / f"{s.id}_mask.png")
    for col in METRIC_COLUMNS:
        print(f"{col}: {report.mean[col]:.4f} +- {report.std[col]:.4f}")
    print(f"reports written under {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="idaseg",
        description="Cross-domain vessel segmentation: synthesis, pretraining, "
                    "adaptation, evaluation.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic source/target datasets")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--n", type=int, default=60, help="training images per domain")
    p.add_argument("--n-eval", type=int, default=20, dest="n_eval",
                   help="labeled target evaluation images")
    p.add_argument("--size", type=int, default=96)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--source-style", choices=sorted(STYLE_PRESETS), default="retina_like",
                   dest="source_style")
    p.add_argument("--target-style", choices=sorted(STYLE_PRESETS), default="cam_like",
                   dest="target_style")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="supervised training on labeled source data")
    p.add_argument("--source", type=Path, required=True, help="source dataset directory")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--resume", type=Path, default=None,
                   help="resume from a pretrain_state checkpoint")
    _add_config_flags(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("adapt", help="teacher-student adaptation to the target domain")
    p.add_argument("--source", type=Path, required=True)
    p.add_argument("--target", type=Path, required=True, help="unlabeled target train set")
    p.add_argument("--eval", type=Path, default=None, help="labeled target eval set")
    p.add_argument("--pretrained", type=Path, default=None,
                   help="pretrained checkpoint; omitted -> pretrain in-line")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seeds", type=int, default=1,
                   help="number of consecutive seeds to run (mean +- std summary)")
    p.add_argument("--resume", type=Path, default=None,
                   help="resume from an adaptation checkpoint")
    p.add_argument("--dump-masks", action="store_true", dest="dump_masks",
                   help="save illustrative mixing masks as PNGs")
    _add_config_flags(p)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("evaluate", help="run the metric suite on a checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True, help="labeled dataset directory")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--dump-preds", action="store_true", dest="dump_preds",
                   help="write probability and mask images per input")
    _add_config_flags(p)
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, DatasetError, CheckpointError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
