"""Command-line operator surface: synth, train, evaluate, compare, bench."""

import argparse
import os
import sys
from pathlib import Path

from . import __version__
from .artifacts import atomic_write_json, manifest_path_for, stamp, utcnow, write_manifest
from .errors import (BenchError, CheckpointError, ComparisonError,
                     ConfigurationError, DatasetError, EvaluationError,
                     FingerprintMismatchError, NumericalError)

EXIT_OK = 0
EXIT_FLAGS = 2
EXIT_IO = 3
EXIT_NUMERICAL = 4
EXIT_FINGERPRINT = 5
EXIT_SAMPLE_MISMATCH = 6
EXIT_OOM = 7


def _flag_config(args):
    """JSON-serializable view of the parsed flags for the run manifest."""
    return {k: v for k, v in vars(args).items() if k != "func"}


def _apply_thread_cap():
    cap = os.environ.get("STROKENEXT_THREADS")
    if cap:
        import torch
        torch.set_num_threads(max(1, int(cap)))


def _split_dataset(data_dir, task, seed):
    from .data import SplitSpec, scan_dataset, split
    index = scan_dataset(data_dir, task=task)
    return index, split(index, SplitSpec(seed=seed))


def _positive_label(class_names, positive_class=None):
    if positive_class is not None:
        if positive_class not in class_names:
            raise ConfigurationError(
                f"positive class {positive_class!r} not among {class_names}")
        return class_names.index(positive_class)
    for name in ("stroke", "hemorrhage"):
        if name in class_names:
            return class_names.index(name)
    return 1


def cmd_synth(args):
    from .data import generate_synthetic
    started = utcnow()
    out = Path(args.out)
    generate_synthetic(args.n_per_class, args.task, args.seed, out)
    write_manifest("synth", _flag_config(args), [out], started, seed=args.seed)
    return EXIT_OK


def cmd_train(args):
    from .fusion import ModelConfig, build_model
    from .training import SchedulerConfig, TrainConfig, save_checkpoint, train

    started = utcnow()
    _, (train_idx, val_idx, _) = _split_dataset(args.data, args.task, args.split_seed)
    num_classes = len(train_idx.class_names)
    mconfig = ModelConfig(variant=args.variant, task=args.task,
                          fusion_mode=args.fusion_mode,
                          hidden_width=args.hidden_width,
                          dropout_rate=args.dropout,
                          num_classes=num_classes, seed=args.seed)
    tconfig = TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                          lr=args.lr, weight_decay=args.weight_decay,
                          smoothing=args.smoothing,
                          scheduler=SchedulerConfig(), seed=args.seed)
    model = build_model(mconfig)

    def progress(entry):
        print(f"epoch {entry['epoch']:3d}  train {entry['train_loss']:.4f}  "
              f"val {entry['val_loss']:.4f}  acc {entry['val_accuracy']:.4f}  "
              f"lr {entry['lr']:.2e}")

    ckpt, history = train(model, train_idx, val_idx, tconfig,
                          image_size=args.image_size,
                          split_seed=args.split_seed, progress=progress)

    out = Path(args.out)
    history_path = out.parent / (out.stem + ".history.json")
    manifest = manifest_path_for(out)
    save_checkpoint(ckpt, out)
    atomic_write_json(stamp({"history": history, "best_epoch": ckpt.epoch}, manifest),
                      history_path)
    write_manifest("train", _flag_config(args),
                   [out, history_path], started, seed=args.seed)
    return EXIT_OK


def cmd_evaluate(args):
    from .data import SplitSpec, scan_dataset, split
    from .fusion import build_model
    from .metrics import evaluate, write_prediction_log
    from .training import load_checkpoint

    started = utcnow()
    ckpt = load_checkpoint(args.ckpt)
    index = scan_dataset(args.data, task=ckpt.config.task)
    if len(index.class_names) != ckpt.config.num_classes:
        raise FingerprintMismatchError(
            f"checkpoint expects {ckpt.config.num_classes} classes, "
            f"dataset has {len(index.class_names)}")
    splits = dict(zip(("train", "val", "test"),
                      split(index, SplitSpec(seed=ckpt.split_seed))))
    subset = splits[args.split]

    model = build_model(ckpt.config)
    model.load_state_dict(ckpt.model_state)
    positive = _positive_label(index.class_names, args.positive_class)
    report, records = evaluate(model, subset, batch_size=args.batch_size,
                               image_size=args.image_size, positive_label=positive)
    report["split"] = args.split
    report["class_names"] = index.class_names
    report["checkpoint_fingerprint"] = ckpt.config.fingerprint()

    report_path, log_path = Path(args.report), Path(args.log)
    manifest = manifest_path_for(report_path)
    atomic_write_json(stamp(report, manifest), report_path)
    write_prediction_log(records, log_path)
    write_manifest("evaluate", _flag_config(args), [report_path, log_path], started)
    return EXIT_OK


def cmd_compare(args):
    from .metrics import read_prediction_log
    from .stats import discordant_counts, mcnemar

    started = utcnow()
    log_a = read_prediction_log(args.log_a)
    log_b = read_prediction_log(args.log_b)
    b, c = discordant_counts(log_a, log_b)
    res = mcnemar(b, c, alpha=args.alpha)
    out = Path(args.out)
    manifest = manifest_path_for(out)
    payload = stamp({
        "method_a": args.method_a or Path(args.log_a).stem,
        "method_b": args.method_b or Path(args.log_b).stem,
        "b": res.b, "c": res.c, "chi2": res.chi2, "p_value": res.p_value,
        "alpha": res.alpha, "significant": res.significant,
        "exact_p": res.exact_p,
    }, manifest)
    atomic_write_json(payload, out)
    write_manifest("compare", _flag_config(args), [out], started)
    return EXIT_OK


def cmd_bench(args):
    from .bench import measure
    from .fusion import ModelConfig, build_model

    started = utcnow()
    config = ModelConfig(variant=args.variant, seed=args.seed)
    model = build_model(config)
    report = measure(model, batch_size=args.batch_size, image_size=args.image_size,
                     warmup=args.warmup, trials=args.trials, seed=args.seed)
    out = Path(args.out)
    manifest = manifest_path_for(out)
    payload = stamp(report.to_dict() | {"variant": args.variant}, manifest)
    atomic_write_json(payload, out)
    write_manifest("bench", _flag_config(args), [out], started, seed=args.seed)
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="strokenext",
                                description="Dual-branch CT stroke classification pipeline")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic labeled dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--task", choices=("presence", "subtype"), default="subtype")
    sp.add_argument("--n-per-class", type=int, default=200)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_synth)

    tp = sub.add_parser("train", help="train a model on a labeled directory tree")
    tp.add_argument("--data", required=True)
    tp.add_argument("--task", choices=("presence", "subtype"), default="presence")
    tp.add_argument("--variant", default="tiny")
    tp.add_argument("--epochs", type=int, default=20)
    tp.add_argument("--batch-size", type=int, default=80)
    tp.add_argument("--lr", type=float, default=1e-4)
    tp.add_argument("--weight-decay", type=float, default=1e-5)
    tp.add_argument("--smoothing", type=float, default=0.1)
    tp.add_argument("--dropout", type=float, default=0.2)
    tp.add_argument("--fusion-mode", choices=("k2conv", "sum", "concat_mlp", "attention2"),
                    default="k2conv")
    tp.add_argument("--hidden-width", type=int, default=None)
    tp.add_argument("--image-size", type=int, default=224)
    tp.add_argument("--seed", type=int, default=0)
    tp.add_argument("--split-seed", type=int, default=0)
    tp.add_argument("--out", required=True)
    tp.set_defaults(func=cmd_train)

    ep = sub.add_parser("evaluate", help="evaluate a checkpoint on one split")
    ep.add_argument("--ckpt", required=True)
    ep.add_argument("--data", required=True)
    ep.add_argument("--split", choices=("train", "val", "test"), default="test")
    ep.add_argument("--batch-size", type=int, default=80)
    ep.add_argument("--image-size", type=int, default=224)
    ep.add_argument("--positive-class", default=None)
    ep.add_argument("--report", required=True)
    ep.add_argument("--log", required=True)
    ep.set_defaults(func=cmd_evaluate)

    cp = sub.add_parser("compare", help="McNemar comparison of two prediction logs")
    cp.add_argument("--log-a", required=True)
    cp.add_argument("--log-b", required=True)
    cp.add_argument("--method-a", default=None)
    cp.add_argument("--method-b", default=None)
    cp.add_argument("--alpha", type=float, default=0.05)
    cp.add_argument("--out", required=True)
    cp.set_defaults(func=cmd_compare)

    bp = sub.add_parser("bench", help="parameter/FLOP/latency report for a variant")
    bp.add_argument("--variant", default="tiny")
    bp.add_argument("--batch-size", type=int, default=1)
    bp.add_argument("--image-size", type=int, default=224)
    bp.add_argument("--warmup", type=int, default=10)
    bp.add_argument("--trials", type=int, default=30)
    bp.add_argument("--seed", type=int, default=0)
    bp.add_argument("--out", required=True)
    bp.set_defaults(func=cmd_bench)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    _apply_thread_cap()
    try:
        return args.func(args)
    except ComparisonError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_SAMPLE_MISMATCH
    except NumericalError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except BenchError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_OOM
    except FingerprintMismatchError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FINGERPRINT
    except (ConfigurationError, CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FLAGS
    except (DatasetError, EvaluationError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
