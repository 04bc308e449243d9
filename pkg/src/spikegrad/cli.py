"""Command-line entry point: ``spikegrad {train,eval,tune-gamma,diag-grad}``.

Exit codes: 0 success, 2 usage error, 3 training divergence, 4 gamma tuner
did not converge.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import hashlib
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional

from . import architectures
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Dataset, load_digits, load_idx, load_mnist, synth_features, synth_images, synth_twoclass
from .errors import CheckpointError, ContractError, SpikegradError, TrainingError
from .gamma import balance_ratio, profile_gradients, profiling_batches, tune_gamma
from .network import Network
from .normalization import normalize_thresholds
from .trainer import TrainConfig, evaluate, lr_range_test, train, write_metrics_csv

log = logging.getLogger("spikegrad")

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED, EXIT_NO_CONVERGENCE = 0, 2, 3, 4
SYNTHETIC = ("twoclass", "images", "features", "digits")


class UsageError(Exception):
    pass


# -- data ---------------------------------------------------------------------


def _add_data_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("data")
    g.add_argument("--data-dir", help="directory holding the MNIST IDX files (plain or .gz)")
    g.add_argument("--train-images")
    g.add_argument("--train-labels")
    g.add_argument("--test-images")
    g.add_argument("--test-labels")
    g.add_argument("--synthetic", choices=SYNTHETIC, help="use a generated dataset instead of files")
    g.add_argument("--synthetic-samples", type=int, default=1000)
    g.add_argument("--limit", type=int, default=None, help="use only the first N training samples")


def _data_config(args) -> dict:
    return {k: getattr(args, k) for k in ("data_dir", "train_images", "train_labels", "test_images",
                                          "test_labels", "synthetic", "synthetic_samples", "limit")}


def load_data(cfg: dict, seed: int) -> tuple[Dataset, Optional[Dataset]]:
    """Resolve data flags to ``(train, test)``; test may be None."""
    synthetic = cfg.get("synthetic")
    n = cfg.get("synthetic_samples") or 1000
    if synthetic:
        if synthetic == "twoclass":
            train_set, test_set = synth_twoclass(n, seed), synth_twoclass(max(n // 5, 2), seed + 1)
        elif synthetic == "images":
            full = synth_images(n + n // 5, seed=seed, noise=0.5)
            train_set, test_set = full.subset(slice(0, n)), full.subset(slice(n, None))
        elif synthetic == "features":
            full = synth_features(n + n // 5, seed=seed)
            train_set, test_set = full.subset(slice(0, n)), full.subset(slice(n, None))
        else:
            train_set, test_set = load_digits().split(0.2, seed=seed)
    elif cfg.get("train_images") or cfg.get("train_labels"):
        if not (cfg.get("train_images") and cfg.get("train_labels")):
            raise UsageError("--train-images and --train-labels go together")
        train_set = load_idx(cfg["train_images"], cfg["train_labels"])
        test_set = None
        if cfg.get("test_images") and cfg.get("test_labels"):
            test_set = load_idx(cfg["test_images"], cfg["test_labels"])
    elif cfg.get("data_dir"):
        train_set = load_mnist(cfg["data_dir"], "train")
        try:
            test_set = load_mnist(cfg["data_dir"], "test")
        except FileNotFoundError:
            test_set = None
    else:
        raise UsageError("no data given: use --data-dir, --train-images/--train-labels or --synthetic")
    if cfg.get("limit"):
        train_set = train_set.subset(slice(0, cfg["limit"]))
    return train_set, test_set


def load_eval_data(cfg: dict, seed: int) -> Dataset:
    train_set, test_set = load_data(cfg, seed)
    return test_set if test_set is not None else train_set


# -- helpers ------------------------------------------------------------------


def _parse_float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _parse_sweep(text: str) -> list[int]:
    try:
        lo, hi, step = (int(x) for x in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected lo:hi:step, got {text!r}") from None
    if lo < 1 or hi < lo or step < 1:
        raise argparse.ArgumentTypeError(f"invalid sweep {text!r}")
    return list(range(lo, hi + 1, step))


def _gamma_arg(text: str):
    if text == "auto":
        return text
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"gamma must be a number or 'auto', got {text!r}") from None
    if value < 0:
        raise argparse.ArgumentTypeError("gamma must be >= 0")
    return value


def _lr_arg(text: str):
    if text == "auto":
        return text
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"max-lr must be a number or 'auto', got {text!r}") from None


def run_id(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha1(blob).hexdigest()[:12]


def _spec_for(arch: str, data: Dataset, batchnorm, reset_mode, gamma: float, dropout=None):
    spec = architectures.build(arch, data.sample_shape, data.num_classes, batchnorm, reset_mode, gamma)
    if dropout is not None:
        for layer in spec.layers:
            if layer.kind == "dropout":
                layer.p = dropout
    return spec


def _warn_flat(gamma) -> None:
    if gamma == 0:
        log.warning("gamma = 0 gives a flat surrogate (f = beta everywhere); deep networks will "
                    "see exploding gradients")


# -- train --------------------------------------------------------------------


def resolve_train_config(args) -> dict:
    if args.manifest:
        manifest = json.loads(Path(args.manifest).read_text())
        return manifest["config"]
    return {
        "arch": args.arch,
        "timesteps": args.timesteps,
        "eval_timesteps": args.eval_timesteps or args.timesteps,
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "max_lr": args.max_lr,
        "weight_decay": args.weight_decay,
        "seed": args.seed,
        "gamma": args.gamma,
        "gamma_lo": args.gamma_lo,
        "gamma_hi": args.gamma_hi,
        "reset_mode": args.reset,
        "batchnorm": args.batchnorm,
        "dropout": args.dropout,
        "calibration_samples": args.calibration_samples,
        "val_fraction": args.val_fraction,
        "tune_batches": args.tune_batches,
        "data": _data_config(args),
    }


def cmd_train(args) -> int:
    config = resolve_train_config(args)
    if config["batchnorm"] is False and config["calibration_samples"] == 0:
        raise UsageError("--no-batchnorm needs calibration data for threshold normalization "
                         "(--calibration-samples must be > 0)")
    rid = run_id(config)
    out_dir = Path(args.out_dir or Path("runs") / rid)
    out_dir.mkdir(parents=True, exist_ok=True)
    layout = {"manifest": "manifest.json", "metrics": "metrics.csv", "checkpoint": "model.ckpt",
              "profiles": "profile_*.csv"}
    manifest = {"run_id": rid, "command": "train", "config": config, "layout": layout}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    seed = config["seed"]
    train_set, test_set = load_data(config["data"], seed)
    gamma = config["gamma"]
    spec = _spec_for(config["arch"], train_set, config["batchnorm"], config["reset_mode"],
                     10.0 if gamma == "auto" else gamma, config["dropout"])
    if gamma == "auto":
        batches = profiling_batches(train_set, config["tune_batches"], 32, seed)
        result = tune_gamma(spec, batches, config["gamma_lo"], config["gamma_hi"], seed=seed,
                            timesteps=config["timesteps"])
        result.history_to_csv(out_dir / "tune_history.csv")
        if result.profile is not None:
            result.profile.to_csv(out_dir / "profile_tuned.csv")
        if not result.converged:
            log.warning("gamma tuning did not converge; using closest gamma %.6g", result.gamma)
        gamma = result.gamma
        print(f"tuned gamma: {result.summary()}")
    _warn_flat(gamma)
    net = Network(spec, seed=seed, gamma=gamma)
    if not net.has_batchnorm() and net.num_spiking:
        calib = train_set
        if config["calibration_samples"]:
            calib = train_set.subset(slice(0, config["calibration_samples"]))
        thresholds = normalize_thresholds(net, calib, config["timesteps"])
        log.info("normalized thresholds: %s", ", ".join(f"{t:.4g}" for t in thresholds))
    cfg = TrainConfig(epochs=config["epochs"], batch_size=config["batch_size"], timesteps=config["timesteps"],
                      weight_decay=config["weight_decay"], max_lr=1e-3, seed=seed,
                      reset_mode=config["reset_mode"] or "soft", bn_enabled=net.has_batchnorm(),
                      val_fraction=config["val_fraction"])
    if config["max_lr"] == "auto":
        rt = lr_range_test(net, train_set, cfg=cfg)
        cfg.max_lr = rt.suggested_lr
        print(f"range test suggests max_lr={cfg.max_lr:.4g}")
    else:
        cfg.max_lr = config["max_lr"]
    try:
        ckpt, history = train(net, train_set, cfg)
    except TrainingError as exc:
        log.error("training diverged: %s", exc)
        if exc.checkpoint is not None:
            save_checkpoint(out_dir / "model.ckpt", exc.checkpoint)
        write_metrics_csv(exc.history or [], out_dir / "metrics.csv")
        return EXIT_DIVERGED
    ckpt.metadata.update({"eval_timesteps": config["eval_timesteps"], "run_id": rid})
    save_checkpoint(out_dir / "model.ckpt", ckpt)
    write_metrics_csv(history, out_dir / "metrics.csv")
    if history:
        last = history[-1]
        print(f"epoch {last.epoch}: train_loss={last.train_loss:.4f} val_acc={last.val_acc:.4f}")
    if test_set is not None:
        acc = evaluate(ckpt, test_set, config["eval_timesteps"])
        print(f"test accuracy (T={config['eval_timesteps']}): {acc:.4f}")
    print(f"outputs in {out_dir}")
    return EXIT_OK


# -- eval ---------------------------------------------------------------------


def cmd_eval(args) -> int:
    if not args.checkpoint or not Path(args.checkpoint).exists():
        print(f"error: checkpoint {args.checkpoint!r} not found", file=sys.stderr)
        return EXIT_USAGE
    ckpt = load_checkpoint(args.checkpoint)
    seed = int(ckpt.metadata.get("seed", 0))
    data = load_eval_data(_data_config(args), seed)
    net = ckpt.to_network()
    if args.sweep_timesteps:
        out = open(args.out, "w", newline="") if args.out else contextlib.nullcontext(sys.stdout)
        with out as fh:
            writer = csv.writer(fh)
            writer.writerow(["timesteps", "accuracy"])
            for T in args.sweep_timesteps:
                writer.writerow([T, repr(evaluate(net, data, T))])
        return EXIT_OK
    T = args.timesteps or int(ckpt.metadata.get("eval_timesteps", ckpt.metadata.get("timesteps", 10)))
    print(f"accuracy (T={T}): {evaluate(net, data, T):.6f}")
    return EXIT_OK


# -- gamma --------------------------------------------------------------------


def _diag_setup(args):
    train_set, _ = load_data(_data_config(args), args.seed)
    spec = _spec_for(args.arch, train_set, args.batchnorm, args.reset, 10.0)
    batches = profiling_batches(train_set, args.batches, args.batch_size, args.seed)
    return spec, batches


def cmd_tune_gamma(args) -> int:
    if args.gamma_lo <= 0 or args.gamma_lo >= args.gamma_hi:
        raise UsageError(f"need 0 < --gamma-lo < --gamma-hi, got {args.gamma_lo}, {args.gamma_hi}")
    spec, batches = _diag_setup(args)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    result = tune_gamma(spec, batches, args.gamma_lo, args.gamma_hi, args.tol, args.max_iter,
                        args.seed, args.timesteps)
    print(result.summary())
    result.history_to_csv(out_dir / "tune_history.csv")
    if result.profile is not None:
        result.profile.to_csv(out_dir / "profile_final.csv")
    return EXIT_OK if result.converged else EXIT_NO_CONVERGENCE


def cmd_diag_grad(args) -> int:
    spec, batches = _diag_setup(args)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for gamma in args.gamma:
        _warn_flat(gamma)
        profile = profile_gradients(spec, batches, gamma, args.seed, args.timesteps)
        path = out_dir / f"profile_gamma{gamma:g}.csv"
        profile.to_csv(path)
        ratio = balance_ratio(profile) if len(profile.layers) > 1 else 1.0
        print(f"gamma={gamma:g} R={ratio:.6g} -> {path}")
    return EXIT_OK


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spikegrad", description="Surrogate-gradient SNN training")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a network")
    p.add_argument("--arch", default="mnist-2conv")
    p.add_argument("--timesteps", type=int, default=10)
    p.add_argument("--eval-timesteps", type=int, default=None)
    p.add_argument("--epochs", type=int, default=2)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--max-lr", type=_lr_arg, default=1e-3)
    p.add_argument("--weight-decay", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--gamma", type=_gamma_arg, default=10.0)
    p.add_argument("--gamma-lo", type=float, default=1.0)
    p.add_argument("--gamma-hi", type=float, default=100.0)
    p.add_argument("--tune-batches", type=int, default=8)
    p.add_argument("--reset", choices=("soft", "hard"), default=None)
    p.add_argument("--batchnorm", dest="batchnorm", action="store_true", default=None)
    p.add_argument("--no-batchnorm", dest="batchnorm", action="store_false")
    p.add_argument("--dropout", type=float, default=None)
    p.add_argument("--calibration-samples", type=int, default=None,
                   help="samples used for threshold normalization without batch norm (default: all)")
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--out-dir")
    p.add_argument("--manifest", help="rerun exactly the configuration stored in a manifest.json")
    _add_data_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--timesteps", type=int, default=None)
    p.add_argument("--sweep-timesteps", type=_parse_sweep, default=None, metavar="LO:HI:STEP")
    p.add_argument("--out", help="CSV path for --sweep-timesteps (default stdout)")
    _add_data_flags(p)
    p.set_defaults(func=cmd_eval)

    for name, func, help_ in (("tune-gamma", cmd_tune_gamma, "bisect the surrogate width"),
                              ("diag-grad", cmd_diag_grad, "per-layer gradient profiles")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--arch", default="deep16")
        p.add_argument("--timesteps", type=int, default=10)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--batches", type=int, default=8)
        p.add_argument("--batch-size", type=int, default=32)
        p.add_argument("--reset", choices=("soft", "hard"), default=None)
        p.add_argument("--batchnorm", dest="batchnorm", action="store_true", default=None)
        p.add_argument("--no-batchnorm", dest="batchnorm", action="store_false")
        p.add_argument("--out-dir", default=".")
        _add_data_flags(p)
        if name == "tune-gamma":
            p.add_argument("--gamma-lo", type=float, default=1.0)
            p.add_argument("--gamma-hi", type=float, default=100.0)
            p.add_argument("--tol", type=float, default=0.5)
            p.add_argument("--max-iter", type=int, default=20)
        else:
            p.add_argument("--gamma", type=_parse_float_list, default=[1.0, 10.0, 100.0])
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("SPIKEGRAD_THREADS")
    limiter = contextlib.nullcontext()
    if threads:
        from threadpoolctl import threadpool_limits

        limiter = threadpool_limits(int(threads))
    try:
        with limiter:
            return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"spikegrad: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, CheckpointError) as exc:
        print(f"spikegrad: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ContractError, SpikegradError) as exc:
        print(f"spikegrad: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
