"""Regularized gradient-matching reconstruction.

Starting from a gray (or random) candidate image, each iteration recomputes
the victim's weight gradients for the candidate through a differentiable
backward pass, measures their cosine distance (or squared l2 gap) to the
captured gradients, adds the smoothness / color / edge penalties, and takes
an Adam step on the candidate pixels.  The best iterate by total loss is
kept; the edge penalty contributes loss value only unless the soft
(differentiable) variant is enabled.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .imaging import (BaselinePoint, CannyParams, gt_baseline_point, mse,
                      psnr, r_canny, r_mean, r_tv, soft_edge_penalty, ssim)
from .labels import column_sums
from .models import VictimNet
from .tensor import NumericsError, Tensor, backward


@dataclass(frozen=True)
class AttackConfig:
    """All reconstruction hyperparameters; defaults follow the attack recipe."""
    alpha_tv: float = 1e-1
    alpha_mean: float = 1e-3
    alpha_ca: float = 1e-4
    lr: float = 3e-3
    max_iters: int = 10000
    restarts: int = 1
    cost_fn: str = "cosine"          # "cosine" | "l2"
    init: str = "gray"               # "gray" | "random"
    lr_decay: bool = False           # step decay x0.2 after 2/7 of iterations
    seed: int = 0
    fin_mode: str = "max-min"        # baseline-point threshold spread
    canny: CannyParams = field(default_factory=CannyParams)
    canny_mode: str = "penalty"      # "penalty" (loss value only) | "soft"
    exclude_bias: bool = False       # drop bias gradients from the match
    per_layer_cosine: bool = False   # average per-parameter cosines instead
    record_every: int = 50

    def __post_init__(self):
        if min(self.alpha_tv, self.alpha_mean, self.alpha_ca) < 0:
            raise ValueError("regularizer weights must be non-negative")
        if self.max_iters < 1 or self.lr <= 0:
            raise ValueError("need max_iters >= 1 and lr > 0")
        if self.cost_fn not in ("cosine", "l2"):
            raise ValueError(f"unknown cost function {self.cost_fn!r}")
        if self.init not in ("gray", "random"):
            raise ValueError(f"unknown init mode {self.init!r}")


@dataclass
class AttackReport:
    """Outcome of one attack: best iterate, its loss, and bookkeeping."""
    best_image: np.ndarray
    best_loss: float
    best_iter: int
    trajectory: list[dict]           # sampled every record_every iterations
    metrics: dict | None             # vs ground truth, when provided
    wall_clock: float
    seed: int
    config: AttackConfig
    labels: tuple[int, ...]


class Adam:
    """Standard bias-corrected Adam over a list of tensors."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]

    def step(self, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for i, p in enumerate(self.params):
            g = grads[i].data if isinstance(grads[i], Tensor) else grads[i]
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            m_hat = self.m[i] / (1 - b1 ** self.t)
            v_hat = self.v[i] / (1 - b2 ** self.t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def _match_params(net: VictimNet, exclude_bias):
    named = net.named_params()
    if exclude_bias:
        named = [(n, p) for n, p in named if not n.endswith(".b")]
    return named


def grad_matching_loss(net: VictimNet, candidate: Tensor, labels, capture,
                       cost_fn="cosine", exclude_bias=False, per_layer=False):
    """Distance between the candidate's weight gradients and the captured
    ones; differentiable in the candidate pixels.

    Cosine mode returns 1 - <target, current> / (|target| |current|) over the
    flat concatenation of every matched parameter gradient (or the average of
    per-parameter cosines with ``per_layer``); l2 mode returns the summed
    squared gap.
    """
    labels = np.asarray(labels, dtype=np.intp)
    loss = T.cross_entropy(net.forward(candidate), labels)
    named = _match_params(net, exclude_bias)
    grads = backward(loss, [p for _, p in named], create_graph=True)

    if cost_fn == "l2":
        total = Tensor(0.0)
        for name, p in named:
            diff = T.sub(grads[p], Tensor(capture.grads[name]))
            total = T.add(total, T.tsum(T.power(diff, 2.0)))
        return total

    if per_layer:
        acc = Tensor(0.0)
        for name, p in named:
            g = grads[p]
            tgt = capture.grads[name]
            tnorm = float(np.sqrt((tgt ** 2).sum()))
            gnorm = T.tsqrt(T.tsum(T.power(g, 2.0)))
            if tnorm == 0.0 or gnorm.item() == 0.0:
                raise NumericsError(f"degenerate zero gradient for {name}")
            acc = T.add(acc, T.div(T.tsum(T.mul(g, Tensor(tgt))), T.mul(gnorm, tnorm)))
        return T.sub(1.0, T.mul(acc, 1.0 / len(named)))

    dot = Tensor(0.0)
    sq = Tensor(0.0)
    tgt_sq = 0.0
    for name, p in named:
        g = grads[p]
        tgt = capture.grads[name]
        dot = T.add(dot, T.tsum(T.mul(g, Tensor(tgt))))
        sq = T.add(sq, T.tsum(T.power(g, 2.0)))
        tgt_sq += float((tgt ** 2).sum())
    if sq.item() == 0.0 or tgt_sq == 0.0:
        raise NumericsError("degenerate reconstruction state: zero gradient norm")
    return T.sub(1.0, T.div(dot, T.mul(T.tsqrt(sq), float(np.sqrt(tgt_sq)))))


def _per_image_mean(fn, batch):
    """Average a per-image [C,H,W] regularizer over a [K,C,H,W] batch."""
    k = batch.shape[0]
    rest = int(np.prod(batch.shape[1:]))
    flat = T.reshape(batch, (k, rest))
    total = Tensor(0.0)
    for i in range(k):
        img = T.reshape(T.crop2d(flat, i, i + 1, 0, rest), batch.shape[1:])
        total = T.add(total, fn(img))
    return T.mul(total, 1.0 / k)


def total_objective(net, candidate, labels, capture, config: AttackConfig,
                    reference_means, ca_reg: BaselinePoint):
    """Matching loss plus weighted regularizers.

    Returns (loss_tensor, total_value, parts) where ``parts`` logs each term
    separately and ``total_value`` includes the non-differentiable edge
    penalty in penalty mode.
    """
    match = grad_matching_loss(net, candidate, labels, capture,
                               cost_fn=config.cost_fn,
                               exclude_bias=config.exclude_bias,
                               per_layer=config.per_layer_cosine)
    parts = {"match": match.item(), "tv": 0.0, "mean": 0.0, "canny": 0.0}
    loss = match
    if config.alpha_tv > 0:
        tv = _per_image_mean(r_tv, candidate)
        parts["tv"] = tv.item()
        loss = T.add(loss, T.mul(tv, config.alpha_tv))
    if config.alpha_mean > 0:
        mean_term = _per_image_mean(lambda im: r_mean(im, reference_means), candidate)
        parts["mean"] = mean_term.item()
        loss = T.add(loss, T.mul(mean_term, config.alpha_mean))
    total_value = loss.item()
    if config.alpha_ca > 0:
        if config.canny_mode == "soft":
            pen = _per_image_mean(lambda im: soft_edge_penalty(im, ca_reg), candidate)
            parts["canny"] = pen.item()
            loss = T.add(loss, T.mul(pen, config.alpha_ca))
            total_value = loss.item()
        else:
            with T.no_grad():
                pen = float(np.mean([r_canny(candidate.data[i], ca_reg, config.canny)
                                     for i in range(candidate.shape[0])]))
            parts["canny"] = pen
            total_value = total_value + config.alpha_ca * pen
    return loss, total_value, parts


def init_candidate(shape, config: AttackConfig, rng):
    """Gray (0.5 everywhere) or uniform-random candidate in [0, 1]."""
    if config.init == "gray":
        data = np.full(shape, 0.5)
    else:
        data = rng.uniform(0.0, 1.0, size=shape)
    return Tensor(data, requires_grad=True)


def run_attack(net: VictimNet, capture, labels, config: AttackConfig,
               reference_means=None, ground_truth=None, callback=None) -> AttackReport:
    """Full reconstruction; with restarts > 1 the best run by loss wins.

    ``labels`` is the recovered (or ground-truth) label list; the baseline
    point for the edge penalty is derived once from the capture before the
    loop.  The candidate is clamped to [0, 1] after every step.  A non-finite
    loss aborts with a diagnostic snapshot attached to the exception.
    """
    spec = net.spec
    if reference_means is None:
        reference_means = np.full(spec.in_channels, 0.5)
    ca_reg = gt_baseline_point(column_sums(capture.fc_grad),
                               (spec.input_hw, spec.input_hw), mode=config.fin_mode)
    started = time.time()
    best = None
    for restart in range(max(1, config.restarts)):
        seed = config.seed + restart
        result = _single_run(net, capture, labels, config, reference_means,
                             ca_reg, seed, callback)
        if best is None or result["loss"] < best["loss"]:
            best = result

    metrics = None
    if ground_truth is not None:
        gt = np.asarray(ground_truth, dtype=np.float64)
        side = min(gt.shape[-2:])
        window = 11 if side >= 11 else (side if side % 2 else side - 1)
        metrics = {"psnr": psnr(gt, best["image"]),
                   "ssim": float(np.mean([ssim(gt[i], best["image"][i], window=window)
                                          for i in range(gt.shape[0])])),
                   "mse": mse(gt, best["image"])}
    return AttackReport(best_image=best["image"], best_loss=best["loss"],
                        best_iter=best["iter"], trajectory=best["trajectory"],
                        metrics=metrics, wall_clock=time.time() - started,
                        seed=config.seed, config=config, labels=tuple(labels))


def _single_run(net, capture, labels, config, reference_means, ca_reg, seed, callback):
    rng = np.random.default_rng(seed)
    shape = (len(labels), net.spec.in_channels, net.spec.input_hw, net.spec.input_hw)
    candidate = init_candidate(shape, config, rng)
    opt = Adam([candidate], lr=config.lr)
    decay_at = (2 * config.max_iters) // 7
    best_loss, best_img, best_iter = np.inf, candidate.data.copy(), 0
    trajectory = []
    for it in range(config.max_iters):
        if config.lr_decay and it == decay_at:
            opt.lr = config.lr * 0.2
        try:
            loss, total_value, parts = total_objective(
                net, candidate, labels, capture, config, reference_means, ca_reg)
            grad = backward(loss, [candidate])[candidate]
        except NumericsError as err:
            err.snapshot = {"iteration": it, "seed": seed,
                            "candidate": candidate.data.copy(),
                            "best_loss": best_loss}
            raise
        if not np.isfinite(total_value):
            err = NumericsError(f"non-finite total loss at iteration {it}")
            err.snapshot = {"iteration": it, "seed": seed,
                            "candidate": candidate.data.copy(), "best_loss": best_loss}
            raise err
        opt.step([grad])
        np.clip(candidate.data, 0.0, 1.0, out=candidate.data)
        if total_value < best_loss:
            best_loss, best_img, best_iter = total_value, candidate.data.copy(), it
        if it % config.record_every == 0 or it == config.max_iters - 1:
            row = {"iter": it, "total": total_value, **parts, "best": best_loss}
            trajectory.append(row)
            if callback is not None:
                callback(it, dict(row))
    return {"loss": best_loss, "image": best_img, "iter": best_iter,
            "trajectory": trajectory, "seed": seed}
