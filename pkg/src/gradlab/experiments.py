"""Reproducible experiment harnesses.

Three experiment families: label-recovery accuracy sweeps (per batch size,
three methods), paired duplicate-batch trials (duplicate-aware recovery vs
the no-duplicates baseline), and reconstruction runs (single attacks,
regularizer ablations, cost-function and initialization comparisons).
Every run is fully determined by its seed.
"""

from __future__ import annotations

import csv
import io
import os
from collections import Counter
from dataclasses import dataclass, replace

import numpy as np

from .attack import AttackConfig, run_attack
from .harness import (DatasetConfig, DatasetSlice, TemplateDataset,
                      batch_from_indices, expose_gradients, sample_batch)
from .imaging import psnr, ssim, write_image
from .labels import baseline_min_k, recover_labels, smallest_k_of_sums
from .models import VictimSpec, make_victim, train_victim


# -- label-recovery experiments ---------------------------------------------------


@dataclass
class LabelTrialRow:
    seed: int
    batch_size: int
    true_labels: tuple[int, ...]
    baseline: tuple[int, ...]
    sum_rule: tuple[int, ...]
    duplicate_aware: tuple[int, ...]

    def exact(self, method):
        got = getattr(self, method)
        return sorted(got) == sorted(self.true_labels)

    def per_label(self, method):
        got = Counter(getattr(self, method))
        want = Counter(self.true_labels)
        hit = sum(min(got[c], want[c]) for c in want)
        return hit / len(self.true_labels)


def _fresh_scenario(seed, batch_size, num_classes=10, force_duplicate=False,
                    dataset_cfg=None, victim_spec=None):
    """One victim + one sampled batch, fully seeded."""
    cfg = dataset_cfg or DatasetConfig(num_classes=num_classes, seed=seed)
    spec = victim_spec or VictimSpec(num_classes=cfg.num_classes,
                                     in_channels=cfg.channels,
                                     input_hw=cfg.image_hw)
    dataset = TemplateDataset(cfg)
    net = make_victim(spec, seed=seed + 50_000)
    rng = np.random.default_rng(seed)
    if force_duplicate:
        while True:
            idx = rng.integers(0, len(dataset), size=batch_size)
            labels = [dataset.label(int(i)) for i in idx]
            if len(set(labels)) < batch_size:
                break
        batch = batch_from_indices(dataset, idx)
    else:
        batch, _ = sample_batch(dataset, batch_size, rng, wraparound=True)
    return dataset, net, batch


def label_trial(seed, batch_size, threshold=0.3, force_duplicate=False,
                num_classes=10) -> LabelTrialRow:
    """Run all three recovery methods on one seeded capture."""
    _, net, batch = _fresh_scenario(seed, batch_size, num_classes=num_classes,
                                    force_duplicate=force_duplicate)
    capture = expose_gradients(net, batch)
    est = recover_labels(capture, net.acb_head(), batch_size, threshold=threshold)
    return LabelTrialRow(
        seed=seed, batch_size=batch_size, true_labels=tuple(sorted(batch.labels)),
        baseline=tuple(baseline_min_k(capture.fc_grad, batch_size)),
        sum_rule=tuple(smallest_k_of_sums(capture.fc_grad, batch_size)),
        duplicate_aware=tuple(est.combined))


METHODS = ("baseline", "sum_rule", "duplicate_aware")


def label_accuracy_sweep(batch_sizes, trials, seed=0, threshold=0.3,
                         force_duplicate=False, workers=1):
    """Per-batch-size label accuracy of all methods.

    Returns {batch_size: {method: (per_label_acc, exact_rate)}} plus the raw
    trial rows.  Aggregation is a mean, so worker execution order is
    irrelevant.
    """
    rows = []
    jobs = [(seed + 10_000 * k + t, k, threshold, force_duplicate)
            for k in batch_sizes for t in range(trials)]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_label_trial_star, jobs, chunksize=8))
    else:
        rows = [_label_trial_star(j) for j in jobs]
    table = {}
    for k in batch_sizes:
        sub = [r for r in rows if r.batch_size == k]
        table[k] = {m: (float(np.mean([r.per_label(m) for r in sub])),
                        float(np.mean([r.exact(m) for r in sub])))
                    for m in METHODS}
    return table, rows


def _label_trial_star(job):
    s, k, threshold, force_duplicate = job
    return label_trial(s, k, threshold=threshold, force_duplicate=force_duplicate)


def write_label_rows(path, rows):
    """Trial CSV: seed, K, true / recovered multisets, exact-match flags."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["seed", "batch_size", "true", "baseline", "sum_rule",
                    "duplicate_aware", "baseline_exact", "sum_rule_exact",
                    "duplicate_aware_exact"])
        for r in rows:
            w.writerow([r.seed, r.batch_size,
                        _mset(r.true_labels), _mset(r.baseline),
                        _mset(r.sum_rule), _mset(r.duplicate_aware),
                        int(r.exact("baseline")), int(r.exact("sum_rule")),
                        int(r.exact("duplicate_aware"))])


def _mset(labels):
    return ";".join(str(c) for c in sorted(labels))


# -- reconstruction experiments ----------------------------------------------------


RECON_DATASET = DatasetConfig(image_hw=12, smooth_sigma=1.35, noise=0.015, seed=1)
RECON_VICTIM = VictimSpec(activation="silu", input_hw=12)
TRAIN_STEPS = 2800
TRAIN_LR = 0.05


def reconstruction_setup(seed, dataset_cfg=None, victim_spec=None,
                         train_steps=TRAIN_STEPS, victim_act=None):
    """Canonical reconstruction scenario.

    The victim is briefly trained on the second half of the dataset (the
    attacked images come from the first half, mirroring an attack on a
    model's held-out data) with gray-blend augmentation; see train_victim.
    Returns (dataset, net, reference channel means).
    """
    cfg = dataset_cfg or RECON_DATASET
    spec = victim_spec or RECON_VICTIM
    if victim_act is not None:
        from dataclasses import replace as _r
        spec = _r(spec, activation=victim_act)
    dataset = TemplateDataset(cfg)
    net = make_victim(spec, seed=seed + 100)
    if train_steps > 0:
        train_half = DatasetSlice(dataset, len(dataset) // 2, len(dataset))
        train_victim(net, train_half, steps=train_steps, batch_size=8,
                     lr=TRAIN_LR, augment_noise=0.015, gray_blend=True, seed=seed)
    return dataset, net, dataset.channel_means()


def reconstruction_trial(seed, config: AttackConfig, batch_size=1,
                         use_true_labels=True, setup=None, callback=None):
    """One seeded end-to-end attack; returns (report, gray_gain_dB, batch, est).

    With ``use_true_labels`` off, labels come from the duplicate-aware
    recovery pipeline exactly as an attacker would obtain them.
    """
    dataset, net, ref = setup if setup is not None else reconstruction_setup(seed)
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(dataset) // 2, size=batch_size)
    batch = batch_from_indices(dataset, idx)
    capture = expose_gradients(net, batch)
    est = None
    if use_true_labels:
        labels = sorted(batch.labels)
    else:
        est = recover_labels(capture, net.acb_head(), batch_size)
        labels = est.combined
    report = run_attack(net, capture, labels, config, reference_means=ref,
                        ground_truth=np.asarray(batch.images)[np.argsort(batch.labels)],
                        callback=callback)
    gray = np.full_like(batch.images, 0.5)
    gain = report.metrics["psnr"] - psnr(batch.images, gray)
    return report, gain, batch, est


def ablation_sweep(seeds, max_iters=2000, stages=None, setups=None):
    """Median SSIM per regularizer stage over shared seeds.

    Default stages: no regularizers, +smoothness, +smoothness+color.
    Every stage sees the same per-seed scenario; pass ``setups`` to reuse
    already-built ones.
    """
    if stages is None:
        stages = [("none", dict(alpha_tv=0.0, alpha_mean=0.0, alpha_ca=0.0)),
                  ("tv", dict(alpha_mean=0.0, alpha_ca=0.0)),
                  ("tv+mean", dict(alpha_ca=0.0))]
    results = {name: [] for name, _ in stages}
    for pos, seed in enumerate(seeds):
        setup = setups[pos] if setups is not None else reconstruction_setup(seed)
        for name, overrides in stages:
            cfg = AttackConfig(max_iters=max_iters, seed=seed, **overrides)
            report, _, batch, _ = reconstruction_trial(seed, cfg, setup=setup)
            truth = np.asarray(batch.images)
            val = float(np.mean([ssim(truth[i], report.best_image[i])
                                 for i in range(truth.shape[0])]))
            results[name].append(val)
    return {name: float(np.median(vals)) for name, vals in results.items()}, results


def paired_cost_comparison(seeds, max_iters=2000, setups=None):
    """Median PSNR of the cosine vs squared-gap cost on shared scenarios."""
    out = {"cosine": [], "l2": []}
    for pos, seed in enumerate(seeds):
        setup = setups[pos] if setups is not None else reconstruction_setup(seed)
        for cost in ("cosine", "l2"):
            cfg = AttackConfig(max_iters=max_iters, seed=seed, cost_fn=cost)
            report, _, _, _ = reconstruction_trial(seed, cfg, setup=setup)
            out[cost].append(report.metrics["psnr"])
    return {k: float(np.median(v)) for k, v in out.items()}, out


def paired_init_comparison(seeds, max_iters=2000, setups=None):
    """Median PSNR of gray vs random initialization on shared scenarios."""
    out = {"gray": [], "random": []}
    for pos, seed in enumerate(seeds):
        setup = setups[pos] if setups is not None else reconstruction_setup(seed)
        for init in ("gray", "random"):
            cfg = AttackConfig(max_iters=max_iters, seed=seed, init=init)
            report, _, _, _ = reconstruction_trial(seed, cfg, setup=setup)
            out[init].append(report.metrics["psnr"])
    return {k: float(np.median(v)) for k, v in out.items()}, out


# -- run-directory reporting -------------------------------------------------------


def write_run_dir(out_dir, report, batch=None, est=None):
    """Self-describing run directory: config echo, trajectory CSV, best
    image rasters, metrics CSV.  Metrics files are byte-stable given the
    seed; wall-clock goes to the info file only.
    """
    os.makedirs(out_dir, exist_ok=True)
    cfg = report.config
    with open(os.path.join(out_dir, "config.txt"), "w") as f:
        for key, val in sorted(vars(cfg).items()):
            f.write(f"{key} = {val!r}\n")
        f.write(f"seed = {report.seed}\n")
        f.write(f"labels = {list(report.labels)}\n")
    with open(os.path.join(out_dir, "trajectory.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["iter", "total", "match", "tv", "mean", "canny", "best"])
        for row in report.trajectory:
            w.writerow([row["iter"]] + [_fmt(row[c]) for c in
                                        ("total", "match", "tv", "mean", "canny", "best")])
    for i in range(report.best_image.shape[0]):
        write_image(os.path.join(out_dir, f"best_{i}.pgm" if
                                 report.best_image.shape[1] == 1 else f"best_{i}.ppm"),
                    report.best_image[i])
        if batch is not None:
            truth = np.asarray(batch.images)[np.argsort(batch.labels)]
            write_image(os.path.join(out_dir, f"truth_{i}.pgm" if
                                     truth.shape[1] == 1 else f"truth_{i}.ppm"), truth[i])
    with open(os.path.join(out_dir, "metrics.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["metric", "value"])
        w.writerow(["best_loss", _fmt(report.best_loss)])
        w.writerow(["best_iter", report.best_iter])
        if report.metrics:
            for name in ("psnr", "ssim", "mse"):
                w.writerow([name, _fmt(report.metrics[name])])
        if est is not None:
            w.writerow(["recovered_labels", _mset(report.labels)])
    with open(os.path.join(out_dir, "run_info.txt"), "w") as f:
        f.write(f"wall_clock_seconds = {report.wall_clock:.3f}\n")


def _fmt(x):
    return f"{float(x):.17g}"
