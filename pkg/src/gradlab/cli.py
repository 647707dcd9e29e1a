"""Command-line entry point.

Modes: ``labels`` (accuracy sweep across batch sizes), ``attack`` (label
recovery followed by reconstruction, with report artifacts), ``ablation``
(regularizer / cost-function / initialization comparisons), ``selftest``
(gradient and imaging oracles).

Exit codes: 0 success, 2 usage error, 3 numeric failure, 4 oracle failure.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3
EXIT_ORACLE = 4


def build_parser():
    p = argparse.ArgumentParser(
        prog="gradlab",
        description="Gradient-inversion laboratory: recover labels and images "
                    "from a simulated federated-learning victim's gradients.")
    p.add_argument("--mode", required=True,
                   choices=["labels", "attack", "ablation", "selftest"])
    p.add_argument("--batch-sizes", default="1,2,4",
                   help="comma-separated batch sizes (labels mode)")
    p.add_argument("--trials", type=int, default=100, help="trials per batch size")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--alpha-tv", type=float, default=1e-1)
    p.add_argument("--alpha-mean", type=float, default=1e-3)
    p.add_argument("--alpha-ca", type=float, default=1e-4)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--iters", type=int, default=10000, help="max attack iterations")
    p.add_argument("--restarts", type=int, default=1)
    p.add_argument("--cost", choices=["cosine", "l2"], default="cosine")
    p.add_argument("--init", choices=["gray", "random"], default="gray")
    p.add_argument("--threshold", type=float, default=0.3,
                   help="duplicate-scan score gap")
    p.add_argument("--out", default=None,
                   help="output directory (default: $GRADLAB_OUT or ./runs)")
    p.add_argument("--use-true-labels", action="store_true",
                   help="skip label recovery, attack with ground-truth labels")
    p.add_argument("--lr-decay", action="store_true",
                   help="drop the learning rate x0.2 after 2/7 of iterations")
    p.add_argument("--fin-mode", choices=["max-min", "max-mean"], default="max-min",
                   help="spread rule for the edge baseline-point threshold")
    p.add_argument("--attack-batch", type=int, default=1,
                   help="batch size for attack/ablation modes")
    p.add_argument("--victim-act", choices=["silu", "relu"], default=None,
                   help="override the experiment victim's activation")
    p.add_argument("--duplicates-only", action="store_true",
                   help="restrict label trials to batches with a duplicate")
    p.add_argument("--workers", type=int, default=1,
                   help="worker processes for label trials")
    p.add_argument("--ablate", choices=["regularizers", "cost", "init"],
                   default="regularizers")
    return p


def out_root(args):
    return args.out or os.environ.get("GRADLAB_OUT", "runs")


def cmd_labels(args):
    from .experiments import METHODS, label_accuracy_sweep, write_label_rows
    batch_sizes = [int(b) for b in args.batch_sizes.split(",") if b]
    if any(b < 1 for b in batch_sizes):
        raise UsageError(f"batch sizes must be positive: {batch_sizes}")
    table, rows = label_accuracy_sweep(batch_sizes, args.trials, seed=args.seed,
                                       threshold=args.threshold,
                                       force_duplicate=args.duplicates_only,
                                       workers=args.workers)
    root = out_root(args)
    os.makedirs(root, exist_ok=True)
    csv_path = os.path.join(root, "label_trials.csv")
    write_label_rows(csv_path, rows)
    names = {"baseline": "per-class-min", "sum_rule": "smallest-sums",
             "duplicate_aware": "duplicate-aware"}
    print(f"label accuracy over {args.trials} trials per batch size "
          f"(per-label / exact-multiset)")
    header = "batch | " + " | ".join(f"{names[m]:>22s}" for m in METHODS)
    print(header)
    print("-" * len(header))
    for k in batch_sizes:
        cells = " | ".join(
            f"{table[k][m][0] * 100:.2f}% / {table[k][m][1] * 100:.2f}%".rjust(22)
            for m in METHODS)
        print(f"{k:5d} | {cells}")
    print(f"rows written to {csv_path}")
    return EXIT_OK


def _attack_config(args, max_iters=None):
    from .attack import AttackConfig
    return AttackConfig(alpha_tv=args.alpha_tv, alpha_mean=args.alpha_mean,
                        alpha_ca=args.alpha_ca, lr=args.lr,
                        max_iters=max_iters or args.iters, restarts=args.restarts,
                        cost_fn=args.cost, init=args.init, lr_decay=args.lr_decay,
                        seed=args.seed, fin_mode=args.fin_mode)


def cmd_attack(args):
    from .experiments import reconstruction_trial, write_run_dir
    from .imaging import psnr
    cfg = _attack_config(args)
    report, gain, batch, est = reconstruction_trial(
        args.seed, cfg, batch_size=args.attack_batch,
        use_true_labels=args.use_true_labels,
        setup=None if args.victim_act is None else _setup_with_act(args))
    run_dir = os.path.join(out_root(args), f"attack_seed{args.seed}")
    write_run_dir(run_dir, report, batch=batch, est=est)
    print(f"labels: {list(report.labels)} (true: {sorted(batch.labels)})")
    print(f"best loss {report.best_loss:.6g} at iteration {report.best_iter}")
    m = report.metrics
    print(f"psnr {m['psnr']:.2f} dB (gray-init gain {gain:+.2f} dB)  "
          f"ssim {m['ssim']:.4f}  mse {m['mse']:.6f}")
    print(f"artifacts in {run_dir}")
    return EXIT_OK


def _setup_with_act(args):
    from .experiments import reconstruction_setup
    return reconstruction_setup(args.seed, victim_act=args.victim_act)


def cmd_ablation(args):
    from .experiments import (ablation_sweep, paired_cost_comparison,
                              paired_init_comparison)
    seeds = [args.seed + i for i in range(args.trials)]
    iters = args.iters
    if args.ablate == "regularizers":
        stages = [("none", dict(alpha_tv=0.0, alpha_mean=0.0, alpha_ca=0.0)),
                  ("tv", dict(alpha_mean=0.0, alpha_ca=0.0)),
                  ("tv+mean", dict(alpha_ca=0.0)),
                  ("full", dict())]
        medians, _ = ablation_sweep(seeds, max_iters=iters, stages=stages)
        print("median SSIM by regularizer stage:")
        for name, _ in stages:
            print(f"  {name:8s} {medians[name]:.4f}")
    elif args.ablate == "cost":
        medians, _ = paired_cost_comparison(seeds, max_iters=iters)
        print(f"median PSNR: cosine {medians['cosine']:.2f} dB vs "
              f"l2 {medians['l2']:.2f} dB")
    else:
        medians, _ = paired_init_comparison(seeds, max_iters=iters)
        print(f"median PSNR: gray {medians['gray']:.2f} dB vs "
              f"random {medians['random']:.2f} dB")
    return EXIT_OK


def cmd_selftest(args):
    from .checks import run_selftest
    results = run_selftest(op_cases=10, seed=args.seed)
    failures = [r for r in results if not r[1]]
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name} ({detail})")
    print(f"{len(results) - len(failures)}/{len(results)} checks passed")
    return EXIT_OK if not failures else EXIT_ORACLE


class UsageError(ValueError):
    pass


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    from .tensor import NumericsError
    try:
        if args.mode == "labels":
            return cmd_labels(args)
        if args.mode == "attack":
            return cmd_attack(args)
        if args.mode == "ablation":
            return cmd_ablation(args)
        return cmd_selftest(args)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except NumericsError as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        snapshot = getattr(err, "snapshot", None)
        if snapshot is not None:
            root = out_root(args)
            os.makedirs(root, exist_ok=True)
            path = os.path.join(root, "numeric_failure.txt")
            with open(path, "w") as f:
                f.write(f"error = {err}\n")
                for key, val in snapshot.items():
                    if isinstance(val, np.ndarray):
                        f.write(f"{key} = array{val.shape}: "
                                f"{np.array2string(val.reshape(-1)[:32])}...\n")
                    else:
                        f.write(f"{key} = {val}\n")
            print(f"diagnostic snapshot written to {path}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
