"""Command-line surface.

Radii and step sizes are given in [0, 255] pixel units on the command line
(matching how attack budgets are usually quoted) and normalized internally.
Flags override config-file values; every run writes the resolved config
next to its outputs.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numerical
failure.
"""

import argparse
import json
import os
import sys

import numpy as np

from .attacks import AttackConfig, AttackError, SpsaConfig, TARGET_MODES
from .data import Dataset, IdxFormatError, eval_slice, load_idx, synth_dataset
from .harness import (DEFAULT_SWEEP_ITERS, DEFAULT_SWEEP_STEPS, build_report,
                      grid_sweep, loss_surface, misclassification_threshold,
                      restart_histogram, write_heatmap_csv,
                      write_histogram_csv, write_surface_csv)
from .models import (CheckpointError, architecture_spec, init_params,
                     load_checkpoint)
from .objectives import TrainObjective
from .trainer import TrainRun, train

EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageError(ValueError):
    pass


def _norm(value_0_255):
    return value_0_255 / 255.0


def _load_dataset(args):
    if args.dataset == "synth":
        return synth_dataset(classes=10, per_class=args.synth_per_class,
                             side=28, seed=args.synth_seed)
    if args.dataset == "mnist":
        if not args.images or not args.labels:
            raise UsageError(
                "--dataset mnist requires --images and --labels paths")
        for path, flag in ((args.images, "--images"), (args.labels, "--labels")):
            if not os.path.exists(path):
                raise UsageError(f"{flag}: no such file: {path}")
        return load_idx(args.images, args.labels)
    raise UsageError(f"unknown dataset {args.dataset!r}")


def _merge_config(args):
    """Config precedence: flags > config file > argparse defaults."""
    if not getattr(args, "config", None):
        return args
    with open(args.config) as fh:
        file_values = json.load(fh)
    defaults = {a.dest: a.default for a in args.subparser._actions}
    merged = vars(args).copy()
    for key, value in file_values.items():
        if key not in merged:
            raise UsageError(f"unknown config key {key!r} in {args.config}")
        if merged[key] == defaults.get(key):  # flag not given; file wins
            merged[key] = value
    return argparse.Namespace(**merged)


def _write_resolved(args, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    resolved = {k: v for k, v in vars(args).items()
                if k not in ("func", "subparser")}
    path = os.path.join(out_dir, "resolved-config.json")
    with open(path, "w") as fh:
        json.dump(resolved, fh, indent=2, sort_keys=True, default=str)
    return path


def _attack_from_args(args):
    if args.spsa:
        return SpsaConfig(epsilon=_norm(args.eps), iters=args.iters,
                          samples_per_step=args.samples,
                          base_seed=args.seed)
    return AttackConfig(epsilon=_norm(args.eps), step=_norm(args.step),
                        iters=args.iters, restarts=args.restarts,
                        target_mode=args.target_mode,
                        random_init=args.random_init,
                        base_seed=args.seed)


def cmd_train(args):
    args = _merge_config(args)
    dataset = _load_dataset(args)
    if args.limit:
        dataset = dataset.subset(np.arange(min(args.limit, len(dataset))))
    _write_resolved(args, args.out)
    inner = None
    if args.inner_iters:
        inner = AttackConfig(epsilon=_norm(args.inner_eps),
                             step=_norm(args.inner_step),
                             iters=args.inner_iters, restarts=1,
                             random_init=True)
    objective = TrainObjective(kind=args.objective, lam=getattr(args, "lambda"),
                               adv_fraction=args.adv_fraction,
                               noise_sigma=args.noise_sigma,
                               inner_attack=inner)
    spec = architecture_spec(args.arch)
    model = init_params(spec, dataset.images.shape[1:], dataset.n_classes,
                        args.seed)
    model.metadata = {"arch": args.arch}
    run = TrainRun(objective=objective, epochs=args.epochs,
                   batch_size=args.batch_size, lr=args.lr,
                   init_seed=args.seed,
                   shuffle_seed=args.seed + 1, noise_seed=args.seed + 2,
                   attack_seed=args.seed + 3,
                   checkpoint_path=os.path.join(args.out, "model.ckpt"),
                   metrics_path=os.path.join(args.out, "metrics.jsonl"))
    _, metrics = train(model, dataset, run,
                       progress=lambda rec: print(
                           f"epoch {rec['epoch']}: loss {rec['mean_loss']:.4f} "
                           f"clean acc {rec['clean_accuracy']:.4f}"))
    print(f"final clean accuracy: {metrics[-1]['clean_accuracy']:.4f}")
    print(f"checkpoint: {run.checkpoint_path}")


def _load_model_and_slice(args):
    model = load_checkpoint(args.checkpoint)
    dataset = _load_dataset(args)
    subset = eval_slice(dataset, args.num_examples, args.eval_seed)
    return model, subset


def cmd_attack(args):
    args = _merge_config(args)
    model, subset = _load_model_and_slice(args)
    _write_resolved(args, args.out)
    report = build_report(model, subset.images, subset.labels,
                          [_attack_from_args(args)])
    path = os.path.join(args.out, "report.json")
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2)
    row = report["attacks"][0]
    print(f"clean accuracy: {report['clean_accuracy']:.4f}")
    print(f"adversarial accuracy: {row['adv_accuracy']:.4f}")
    print(f"report: {path}")


def cmd_sweep(args):
    args = _merge_config(args)
    model, subset = _load_model_and_slice(args)
    _write_resolved(args, args.out)
    steps = [float(s) for s in args.steps.split(",")]
    iters = [int(n) for n in args.iters.split(",")]
    grid = grid_sweep(model, subset.images, subset.labels, _norm(args.eps),
                      steps=steps, iters=iters, restarts=args.restarts,
                      base_seed=args.seed, workers=args.workers)
    path = os.path.join(args.out, "heatmap.csv")
    write_heatmap_csv(grid, path)
    print(f"heatmap: {path}")


def cmd_surface(args):
    args = _merge_config(args)
    model, subset = _load_model_and_slice(args)
    _write_resolved(args, args.out)
    surface = loss_surface(model, subset.images[args.example],
                           int(subset.labels[args.example]), _norm(args.eps),
                           args.k, args.seed, example_id=args.example)
    path = os.path.join(args.out, "surface.csv")
    write_surface_csv(surface, path)
    print(f"surface: {path}")


def cmd_histogram(args):
    args = _merge_config(args)
    model, subset = _load_model_and_slice(args)
    _write_resolved(args, args.out)
    config = AttackConfig(epsilon=_norm(args.eps), step=_norm(args.step),
                          iters=args.iters, restarts=args.restarts,
                          random_init=True, base_seed=args.seed)
    hist = restart_histogram(model, subset.images[args.example],
                             int(subset.labels[args.example]), config,
                             example_id=args.example)
    path = os.path.join(args.out, "histogram.csv")
    write_histogram_csv(hist, path,
                        meta_path=os.path.join(args.out, "histogram.json"))
    print(f"histogram: {path} (threshold ln C = "
          f"{misclassification_threshold(model.n_classes):.4f})")


def _add_dataset_flags(sub):
    sub.add_argument("--dataset", choices=["synth", "mnist"], default="synth")
    sub.add_argument("--images", help="IDX images file (mnist)")
    sub.add_argument("--labels", help="IDX labels file (mnist)")
    sub.add_argument("--synth-per-class", type=int, default=100)
    sub.add_argument("--synth-seed", type=int, default=0)


def _add_eval_flags(sub):
    sub.add_argument("--checkpoint", required=True)
    sub.add_argument("--num-examples", type=int, default=1000)
    sub.add_argument("--eval-seed", type=int, default=7)
    sub.add_argument("--seed", type=int, default=0)
    sub.add_argument("--eps", type=float, default=76.5,
                     help="L-inf radius in [0, 255] units")
    sub.add_argument("--out", default="out")
    sub.add_argument("--config", help="JSON config file (flags override)")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="logitlab",
        description="Train logit-regularized classifiers and stress-test "
                    "them with PGD and SPSA attacks.")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("train", help="train a model")
    _add_dataset_flags(p)
    p.add_argument("--arch", choices=["mlp", "cnn"], default="cnn")
    p.add_argument("--objective", choices=["plain", "clp", "lsq", "alp"],
                   default="plain")
    p.add_argument("--lambda", type=float, default=0.0, dest="lambda")
    p.add_argument("--noise-sigma", type=float, default=0.0)
    p.add_argument("--adv-fraction", type=float, default=0.0,
                   choices=[0.0, 0.5, 1.0])
    p.add_argument("--inner-eps", type=float, default=76.5)
    p.add_argument("--inner-step", type=float, default=2.55)
    p.add_argument("--inner-iters", type=int, default=0,
                   help="inner attack iterations (0 = objective default)")
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--batch-size", type=int, default=200)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--limit", type=int, default=0,
                   help="cap the number of training examples")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="out")
    p.add_argument("--config", help="JSON config file (flags override)")
    p.set_defaults(func=cmd_train, subparser=p)

    p = subs.add_parser("attack", help="evaluate a checkpoint under attack")
    _add_dataset_flags(p)
    _add_eval_flags(p)
    p.add_argument("--step", type=float, default=2.55)
    p.add_argument("--iters", type=int, default=40)
    p.add_argument("--restarts", type=int, default=1)
    p.add_argument("--target-mode", choices=list(TARGET_MODES),
                   default="untargeted")
    p.add_argument("--random-init", action="store_true", default=None)
    p.add_argument("--spsa", action="store_true")
    p.add_argument("--samples", type=int, default=256,
                   help="SPSA samples per step")
    p.set_defaults(func=cmd_attack, subparser=p)

    p = subs.add_parser("sweep", help="step/iteration heatmap")
    _add_dataset_flags(p)
    _add_eval_flags(p)
    p.add_argument("--steps", default=",".join(str(s) for s in
                                               DEFAULT_SWEEP_STEPS),
                   help="comma-separated steps in normalized units")
    p.add_argument("--iters", default=",".join(str(n) for n in
                                               DEFAULT_SWEEP_ITERS))
    p.add_argument("--restarts", type=int, default=1)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_sweep, subparser=p)

    p = subs.add_parser("surface", help="input-space loss surface")
    _add_dataset_flags(p)
    _add_eval_flags(p)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--example", type=int, default=0)
    p.set_defaults(func=cmd_surface, subparser=p,
                   eps=38.25)  # half the attack radius

    p = subs.add_parser("histogram", help="restart-loss histogram")
    _add_dataset_flags(p)
    _add_eval_flags(p)
    p.add_argument("--step", type=float, default=50.0)
    p.add_argument("--iters", type=int, default=200)
    p.add_argument("--restarts", type=int, default=1000)
    p.add_argument("--example", type=int, default=0)
    p.set_defaults(func=cmd_histogram, subparser=p)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args.func(args)
        return 0
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (IdxFormatError, CheckpointError, FileNotFoundError,
            json.JSONDecodeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (AttackError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
