"""Command-line surface: train, eval, gradcheck, ablate, analyze, synth, inspect.

Exit codes are a stable contract: 0 success, 1 usage/config/data problems,
2 numerical abort, 3 gradient-check failure.  ``MIXSSM_THREADS`` (or
``--threads``) sets the worker count for independent sweep settings; 1 is
the bitwise-deterministic mode.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .config import RunConfig, emit_config, load_config_file
from .data import generate_synthetic, load_image_folder
from .errors import CheckpointError, ConfigError, DataError, NumericsError, ShapeError
from .gradcheck import gradient_suite
from .network import Model, ModelConfig, desk_config, load_checkpoint, save_checkpoint
from .train import Metrics, evaluate, train

__all__ = ["main", "ABLATION_VARIANTS", "ANALYSIS_SWEEPS"]

ABLATION_VARIANTS: tuple[tuple[str, tuple[str, ...]], ...] = (
    ("full", ("ssm", "conv", "mlp", "msa")),
    ("no_conv", ("ssm", "mlp", "msa")),
    ("no_msa", ("ssm", "conv", "mlp")),
    ("no_mlp", ("ssm", "conv", "msa")),
    ("no_conv_msa", ("ssm", "mlp")),
    ("no_conv_mlp", ("ssm", "msa")),
    ("no_msa_mlp", ("ssm", "conv")),
    ("ssm_only", ("ssm",)),
)

ANALYSIS_SWEEPS = {
    "aggregation": [("selective", {"aggregation": "selective"}),
                    ("max", {"aggregation": "elementwise-max"}),
                    ("average", {"aggregation": "elementwise-average"})],
    "kernel": [(f"k{k}", {"kernel_size": k}) for k in (1, 3, 5, 7)],
    "pooling": [(m, {"pooling": m}) for m in ("average", "max", "l2", "stochastic")],
}


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # keep exit code 1 for usage problems
        raise _UsageError(message)


def _thread_count(override: int | None) -> int:
    if override is not None:
        return max(1, override)
    raw = os.environ.get("MIXSSM_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError as exc:
        raise ConfigError(f"MIXSSM_THREADS must be an integer, got {raw!r}") from exc


def _resolve_run_config(args) -> RunConfig:
    if args.config:
        run = load_config_file(args.config)
    else:
        run = RunConfig(model=desk_config())
    model = run.model
    if getattr(args, "seed", None) is not None:
        model = dataclasses.replace(model, seed=args.seed)
    run = dataclasses.replace(
        run,
        model=model,
        epochs=args.epochs if getattr(args, "epochs", None) is not None else run.epochs,
        batch_size=args.batch_size
        if getattr(args, "batch_size", None) is not None
        else run.batch_size,
        lr=args.lr if getattr(args, "lr", None) is not None else run.lr,
    )
    run.validate()
    return run


def _load_training_data(run: RunConfig, data_dir: str, explicit_config: bool):
    if not os.path.isdir(data_dir):
        raise DataError(f"data directory {data_dir} does not exist")
    dataset = load_image_folder(data_dir, run.model.input_size)
    if explicit_config:
        if dataset.num_classes != run.model.num_classes:
            raise ConfigError(
                f"config expects {run.model.num_classes} classes, "
                f"data directory has {dataset.num_classes}"
            )
        return run, dataset
    model = dataclasses.replace(run.model, num_classes=dataset.num_classes)
    return dataclasses.replace(run, model=model), dataset


def _write_epoch_log(path: str, records) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "mean_loss", "train_acc"])
        for rec in records:
            writer.writerow([rec.epoch, f"{rec.mean_loss:.6f}", f"{rec.train_acc:.6f}"])


def _format_metrics(metrics: Metrics) -> str:
    rows = ";".join(",".join(str(int(v)) for v in row) for row in metrics.confusion)
    return (
        f"acc {metrics.accuracy:.6f}\n"
        f"prec {metrics.precision:.6f}\n"
        f"rec {metrics.recall:.6f}\n"
        f"f1 {metrics.f1:.6f}\n"
        f"confusion {rows}\n"
    )


def _train_and_eval(config: ModelConfig, dataset, run: RunConfig) -> tuple[float, float]:
    model = Model(config)
    model, _ = train(
        model,
        dataset,
        epochs=run.epochs,
        batch_size=run.batch_size,
        lr=run.lr,
        seed=config.seed,
    )
    metrics = evaluate(model, dataset)
    return metrics.accuracy, metrics.f1


def _run_settings_csv(settings, runner, out_path: str, threads: int, header: str) -> None:
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(runner, settings))
    else:
        results = [runner(s) for s in settings]
    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([header, "acc", "f1"])
        for (name, _), (acc, f1) in zip(settings, results):
            writer.writerow([name, f"{acc:.6f}", f"{f1:.6f}"])


# -- commands ------------------------------------------------------------------


def cmd_train(args) -> int:
    run = _resolve_run_config(args)
    run, dataset = _load_training_data(run, args.data, explicit_config=bool(args.config))
    model = Model(run.model)
    model, records = train(
        model,
        dataset,
        epochs=run.epochs,
        batch_size=run.batch_size,
        lr=run.lr,
        seed=run.model.seed,
    )
    save_checkpoint(model, args.out)
    _write_epoch_log(args.out + ".log.csv", records)
    for rec in records:
        print(f"epoch {rec.epoch}: mean_loss={rec.mean_loss:.6f} train_acc={rec.train_acc:.6f}")
    print(f"checkpoint written to {args.out}")
    return 0


def cmd_eval(args) -> int:
    model = load_checkpoint(args.ckpt)
    if not os.path.isdir(args.data):
        raise DataError(f"data directory {args.data} does not exist")
    dataset = load_image_folder(args.data, model.config.input_size)
    if dataset.num_classes != model.config.num_classes:
        raise ConfigError(
            f"checkpoint expects {model.config.num_classes} classes, "
            f"data directory has {dataset.num_classes}"
        )
    metrics = evaluate(model, dataset)
    text = _format_metrics(metrics)
    if args.metrics_out:
        with open(args.metrics_out, "w") as fh:
            fh.write(text)
    print(
        f"acc={metrics.accuracy:.4f} prec={metrics.precision:.4f} "
        f"rec={metrics.recall:.4f} f1={metrics.f1:.4f}"
    )
    return 0


def cmd_gradcheck(args) -> int:
    if args.tolerance < 0:
        raise ConfigError(f"tolerance must be non-negative, got {args.tolerance}")
    results = gradient_suite(seed=args.seed, seeds=args.seeds)
    failing = []
    for component, err in results.items():
        status = "PASS" if err < args.tolerance else "FAIL"
        print(f"{component}: max_rel_error={err:.3e} {status}")
        if err >= args.tolerance:
            failing.append(component)
    if failing:
        print(f"gradient check failed for: {', '.join(failing)}", file=sys.stderr)
        return 3
    return 0


def cmd_ablate(args) -> int:
    run = _resolve_run_config(args)
    run, dataset = _load_training_data(run, args.data, explicit_config=bool(args.config))
    threads = _thread_count(args.threads)

    def runner(setting):
        _, branches = setting
        return _train_and_eval(run.model.with_branches(branches), dataset, run)

    _run_settings_csv(list(ABLATION_VARIANTS), runner, args.out, threads, header="config")
    print(f"ablation results written to {args.out}")
    return 0


def cmd_analyze(args) -> int:
    if args.sweep not in ANALYSIS_SWEEPS:
        raise ConfigError(
            f"unknown sweep {args.sweep!r}; expected one of {sorted(ANALYSIS_SWEEPS)}"
        )
    run = _resolve_run_config(args)
    run, dataset = _load_training_data(run, args.data, explicit_config=bool(args.config))
    threads = _thread_count(args.threads)
    settings = ANALYSIS_SWEEPS[args.sweep]

    def runner(setting):
        _, overrides = setting
        return _train_and_eval(
            dataclasses.replace(run.model, **overrides), dataset, run
        )

    _run_settings_csv(settings, runner, args.out, threads, header="setting")
    print(f"{args.sweep} sweep results written to {args.out}")
    return 0


def cmd_synth(args) -> int:
    names = generate_synthetic(
        args.out, classes=args.classes, per_class=args.per_class, size=args.size, seed=args.seed
    )
    print(f"wrote {args.classes * args.per_class} images to {args.out} (classes: {', '.join(names)})")
    return 0


def cmd_inspect(args) -> int:
    model = load_checkpoint(args.ckpt)
    print(json.dumps({"config": dataclasses.asdict(model.config)}, default=list, indent=2))
    groups = {
        "patch_embed": 0, "ssm_branch": 0, "conv_branch": 0, "mlp_branch": 0,
        "msa_branch": 0, "fusion": 0, "patch_merging": 0, "norms": 0, "head": 0,
    }
    total = 0
    for name, p in model.named_parameters():
        total += p.size
        if name.startswith("patch_embed."):
            groups["patch_embed"] += p.size
        elif ".ssm." in name:
            groups["ssm_branch"] += p.size
        elif ".conv." in name:
            groups["conv_branch"] += p.size
        elif ".mlp." in name:
            groups["mlp_branch"] += p.size
        elif ".msa." in name:
            groups["msa_branch"] += p.size
        elif ".fusion." in name:
            groups["fusion"] += p.size
        elif ".merge." in name:
            groups["patch_merging"] += p.size
        elif name.startswith("head_"):
            groups["head"] += p.size
        else:
            groups["norms"] += p.size
    for group, count in groups.items():
        print(f"{group} {count}")
    print(f"total {total}")
    return 0


def cmd_emit_config(args) -> int:
    run = load_config_file(args.config) if args.config else RunConfig(model=desk_config())
    sys.stdout.write(emit_config(run))
    return 0


# -- argument wiring -----------------------------------------------------------


def _build_parser() -> _Parser:
    parser = _Parser(prog="mixssm", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_run_args(p, with_out=True):
        p.add_argument("--config", default=None, help="JSON run config file")
        p.add_argument("--data", required=True, help="image-folder dataset directory")
        if with_out:
            p.add_argument("--out", required=True)
        p.add_argument("--epochs", type=int, default=None)
        p.add_argument("--batch-size", type=int, default=None, dest="batch_size")
        p.add_argument("--lr", type=float, default=None)
        p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("train", help="train a model and write a checkpoint + epoch log")
    add_run_args(p)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on an image folder")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--metrics-out", default=None, dest="metrics_out")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite (double precision)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-3)
    p.add_argument("--seeds", type=int, default=5, help="number of random seeds per component")
    p.set_defaults(handler=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train/eval all 8 branch subsets")
    add_run_args(p)
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(handler=cmd_ablate)

    p = sub.add_parser("analyze", help="sweep aggregation, kernel size or pooling")
    add_run_args(p)
    p.add_argument("--sweep", required=True)
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(handler=cmd_analyze)

    p = sub.add_parser("synth", help="generate a synthetic PPM dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--per-class", type=int, default=16, dest="per_class")
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("inspect", help="print config and per-module parameter counts")
    p.add_argument("--ckpt", required=True)
    p.set_defaults(handler=cmd_inspect)

    p = sub.add_parser("emit-config", help="print the canonical form of a config")
    p.add_argument("--config", default=None)
    p.set_defaults(handler=cmd_emit_config)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return args.handler(args)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, DataError, CheckpointError, ShapeError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericsError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
