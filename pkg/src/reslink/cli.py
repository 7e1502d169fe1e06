"""Command-line entry point: train / evaluate / predict / gradcheck / synth.

Exit codes: 0 success; 1 verification failure (gradient tolerance breach,
numeric fault); 2 configuration, data, or I/O problem; 3 checkpoint
incompatibility.  Every failure prints a single diagnostic line on stderr.

Heavy imports (numpy, PIL, matplotlib) happen inside the command handlers,
after ``--threads`` has pinned the BLAS thread-pool environment variables —
setting them once numpy is loaded would be too late.  ``--threads 1`` is the
bitwise-deterministic mode: identical config and seed then produce byte-
identical outputs.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_VERIFY = 1
EXIT_CONFIG = 2
EXIT_CHECKPOINT = 3

_THREAD_ENV_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
    "NUMEXPR_NUM_THREADS",
)


def _set_thread_env(n: int) -> None:
    for var in _THREAD_ENV_VARS:
        os.environ[var] = str(n)


def _progress_printer(total_epochs: int):
    def emit(stats):
        print(
            f"epoch {stats.epoch}/{total_epochs} "
            f"train_loss={stats.train_loss:.4f} train_acc={stats.train_acc:.4f} "
            f"val_loss={stats.val_loss:.4f} val_acc={stats.val_acc:.4f}",
            file=sys.stderr,
        )

    return emit


def _load_source_dataset(run_config, seed: int):
    """Materialise the configured dataset (directory, manifest, or synthetic)."""
    from .data import load_manifest, make_synthetic, scan_directory

    data = run_config.data
    if data.root is not None:
        return scan_directory(Path(data.root))
    if data.manifest is not None:
        return load_manifest(Path(data.manifest))
    return make_synthetic(
        data.synthetic_per_class,
        run_config.model.input_h,
        run_config.model.input_w,
        seed + 4,
    )


def _split_dataset(run_config, dataset, seed: int):
    """Split (and optionally oversample) into train/val/test sets.

    Seed layout: the split draws from ``seed`` and oversampling from
    ``seed + 1``, so toggling oversampling never changes the split.
    """
    from .data import oversample, stratified_split

    data = run_config.data
    if data.oversample and data.resample_first:
        dataset = oversample(dataset, seed + 1)
    train_ds, val_ds, test_ds = stratified_split(dataset, data.split, seed)
    if data.oversample and not data.resample_first:
        train_ds = oversample(train_ds, seed + 1)
    return train_ds, val_ds, test_ds


def _check_class_count(model_config, class_names) -> None:
    from .errors import DataError
    from .model import SIGMOID

    expected = 2 if model_config.head == SIGMOID else model_config.num_classes
    if len(class_names) != expected:
        raise DataError(
            f"dataset defines {len(class_names)} classes "
            f"({', '.join(class_names)}) but the configured head expects "
            f"{expected}"
        )


def _evaluate_split(model, dataset, class_names, batch_size: int, loader):
    from .metrics import confusion, report
    from .optim import run_inference

    _, _, y_true, y_pred = run_inference(model, dataset, batch_size, loader)
    cm = confusion(y_true, y_pred, len(class_names))
    return report(cm, class_names)


def _cmd_train(args) -> int:
    from .checkpoint import save_checkpoint
    from .config import load_run_config
    from .data import BatchLoader
    from .errors import ConfigError
    from .model import build_model, format_shape_table
    from .optim import AdamState, train
    from .plots import render_curves

    run_config = load_run_config(args.config)
    if args.seed is not None:
        run_config.seed = args.seed
    out = args.out or run_config.out
    if out is None:
        raise ConfigError("an output directory is required (config `out` or --out)")
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    run_config.out = str(out_dir)
    seed = run_config.seed

    dataset = _load_source_dataset(run_config, seed)
    _check_class_count(run_config.model, dataset.class_names)
    train_ds, val_ds, test_ds = _split_dataset(run_config, dataset, seed)

    model = build_model(run_config.model, seed + 2)
    loader = BatchLoader(
        (run_config.model.input_h, run_config.model.input_w),
        run_config.model.input_c,
        dtype=run_config.model.np_dtype,
    )
    adam = AdamState(
        model.parameters(),
        lr=run_config.optim.lr,
        beta1=run_config.optim.beta1,
        beta2=run_config.optim.beta2,
        epsilon=run_config.optim.epsilon,
    )
    history = train(
        model,
        train_ds,
        val_ds,
        run_config.optim.epochs,
        run_config.optim.batch_size,
        adam,
        seed + 3,
        loader,
        progress=_progress_printer(run_config.optim.epochs),
    )
    metrics_report = _evaluate_split(
        model, test_ds, dataset.class_names, run_config.optim.batch_size, loader
    )

    history.write_csv(out_dir / "metrics.csv")
    (out_dir / "report.csv").write_text(metrics_report.to_csv_text())
    (out_dir / "report.txt").write_text(metrics_report.to_text_table())
    save_checkpoint(out_dir / "model.rslk", model, dataset.class_names)
    (out_dir / "shapes.txt").write_text(format_shape_table(model.shape_table))
    render_curves(history, out_dir / "curves.svg")
    (out_dir / "config.yaml").write_text(run_config.to_yaml())

    print(f"test_accuracy={metrics_report.accuracy:.6f}")
    print(f"outputs written to {out_dir}")
    return EXIT_OK


def _cmd_evaluate(args) -> int:
    from .checkpoint import load_checkpoint
    from .config import load_run_config
    from .data import BatchLoader, scan_directory
    from .errors import DataError

    model, class_names = load_checkpoint(args.checkpoint)
    batch_size = 32
    if args.config is not None:
        run_config = load_run_config(args.config)
        if args.seed is not None:
            run_config.seed = args.seed
        seed = run_config.seed
        dataset = _load_source_dataset(run_config, seed)
        _, _, eval_ds = _split_dataset(run_config, dataset, seed)
        eval_names = dataset.class_names
        batch_size = run_config.optim.batch_size
    else:
        dataset = scan_directory(Path(args.data))
        eval_ds = dataset
        eval_names = dataset.class_names
    if list(eval_names) != list(class_names):
        raise DataError(
            f"dataset classes {list(eval_names)} do not match checkpoint "
            f"classes {list(class_names)}"
        )

    loader = BatchLoader(
        (model.config.input_h, model.config.input_w),
        model.config.input_c,
        dtype=model.config.np_dtype,
    )
    metrics_report = _evaluate_split(model, eval_ds, class_names, batch_size, loader)
    print(metrics_report.to_csv_text(), end="")
    return EXIT_OK


def _cmd_predict(args) -> int:
    import numpy as np

    from .checkpoint import load_checkpoint
    from .data import BatchLoader
    from .layers import INFER
    from .model import SIGMOID

    model, class_names = load_checkpoint(args.checkpoint)
    loader = BatchLoader(
        (model.config.input_h, model.config.input_w),
        model.config.input_c,
        dtype=model.config.np_dtype,
    )
    x = np.stack([loader.prepare(Path(p)) for p in args.images])
    y_hat, _ = model.forward(x, INFER)
    for i, path in enumerate(args.images):
        if model.config.head == SIGMOID:
            p1 = float(y_hat[i, 0])
            cls = 1 if p1 >= 0.5 else 0
            prob = p1 if cls == 1 else 1.0 - p1
        else:
            cls = int(np.argmax(y_hat[i]))
            prob = float(y_hat[i, cls])
        name = class_names[cls] if cls < len(class_names) else str(cls)
        print(f"{path},{name},{prob:.6f}")
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    from .config import load_run_config
    from .gradcheck import run_suite

    seed_base = 0
    if args.config is not None:
        seed_base = load_run_config(args.config).seed
    results = run_suite(
        dtype=args.dtype,
        n_seeds=args.seeds,
        corrupt=args.corrupt,
        seed_base=seed_base,
    )
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(
            f"{r.name}: max_rel_error={r.max_rel_error:.3e} "
            f"tolerance={r.tolerance:.0e} {status}"
        )
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(
            f"reslink: error: gradient check failed for: {', '.join(failed)}",
            file=sys.stderr,
        )
        return EXIT_VERIFY
    return EXIT_OK


def _cmd_synth(args) -> int:
    from .data import make_synthetic, save_as_pngs

    dataset = make_synthetic(args.per_class, args.height, args.width, args.seed)
    count = save_as_pngs(dataset, Path(args.out))
    print(f"wrote {count} images to {args.out}")
    return EXIT_OK


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="reslink",
        description="Residual CNN with area attention: train, evaluate, "
        "predict, verify gradients, and generate synthetic data.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_threads(p):
        p.add_argument(
            "--threads",
            type=int,
            metavar="N",
            help="pin BLAS/OpenMP thread pools (1 = bitwise-deterministic mode)",
        )

    p_train = sub.add_parser("train", help="train a model from a config file")
    p_train.add_argument("--config", required=True, help="run config YAML")
    p_train.add_argument("--out", help="output directory (overrides config)")
    p_train.add_argument("--seed", type=int, help="override the config seed")
    add_threads(p_train)
    p_train.set_defaults(handler=_cmd_train)

    p_eval = sub.add_parser("evaluate", help="evaluate a checkpoint")
    p_eval.add_argument("checkpoint", help="path to a .rslk checkpoint")
    src = p_eval.add_mutually_exclusive_group(required=True)
    src.add_argument(
        "--config", help="run config YAML; evaluates that run's test split"
    )
    src.add_argument("--data", help="class-per-directory dataset to evaluate")
    p_eval.add_argument("--seed", type=int, help="override the config seed")
    add_threads(p_eval)
    p_eval.set_defaults(handler=_cmd_evaluate)

    p_pred = sub.add_parser("predict", help="classify image files")
    p_pred.add_argument("checkpoint", help="path to a .rslk checkpoint")
    p_pred.add_argument("images", nargs="+", help="image files to classify")
    add_threads(p_pred)
    p_pred.set_defaults(handler=_cmd_predict)

    p_grad = sub.add_parser(
        "gradcheck", help="finite-difference verification of every backward pass"
    )
    p_grad.add_argument("--config", help="run config YAML; its seed offsets the suite")
    p_grad.add_argument("--dtype", choices=("f32", "f64"), default="f64")
    p_grad.add_argument("--seeds", type=int, default=5, metavar="N")
    p_grad.add_argument(
        "--corrupt",
        metavar="LAYER",
        help="deliberately scale one layer's analytic gradients (failure-path test)",
    )
    add_threads(p_grad)
    p_grad.set_defaults(handler=_cmd_gradcheck)

    p_synth = sub.add_parser(
        "synth", help="materialise the synthetic dataset as PNG files"
    )
    p_synth.add_argument("--out", required=True, help="output directory")
    p_synth.add_argument("--per-class", required=True, type=int, metavar="N")
    p_synth.add_argument("--height", type=int, default=64)
    p_synth.add_argument("--width", type=int, default=64)
    p_synth.add_argument("--seed", required=True, type=int)
    add_threads(p_synth)
    p_synth.set_defaults(handler=_cmd_synth)

    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    threads = getattr(args, "threads", None)
    if threads is not None:
        if threads < 1:
            print("reslink: error: --threads must be >= 1", file=sys.stderr)
            return EXIT_CONFIG
        _set_thread_env(threads)

    from .errors import (CheckpointError, ConfigError, DataError,
                         DimensionError, NumericFaultError, UsageError)

    try:
        return args.handler(args)
    except CheckpointError as exc:
        print(f"reslink: error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (ConfigError, DataError, DimensionError, OSError) as exc:
        print(f"reslink: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericFaultError, UsageError) as exc:
        print(f"reslink: error: {exc}", file=sys.stderr)
        return EXIT_VERIFY


if __name__ == "__main__":
    sys.exit(main())
