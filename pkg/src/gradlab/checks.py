"""Finite-difference oracles and the self-test battery.

The same checks back the test suite and the ``selftest`` command: analytic
gradients of every engine op are compared against central finite
differences, double-backward is validated on a small victim, and the
imaging units get exercised on synthetic geometry.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor, backward


def numeric_grad(f, x, h=1e-4):
    """Central finite-difference gradient of scalar-valued ``f`` at ``x``."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    out = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = f(x)
        flat[i] = orig - h
        lo = f(x)
        flat[i] = orig
        out[i] = (hi - lo) / (2.0 * h)
    return g


def fd_check(fn, inputs, rng, rtol=1e-3, atol=1e-6, h=1e-4):
    """Compare backward() of a random projection of ``fn(*inputs)`` with FD.

    ``fn`` maps Tensors to a Tensor of any shape; inputs are numpy arrays.
    Returns (ok, max_abs_err).
    """
    tens = [Tensor(x.copy(), requires_grad=True) for x in inputs]
    out = fn(*tens)
    proj = Tensor(rng.normal(size=out.shape))
    loss = T.tsum(T.mul(out, proj))
    grads = backward(loss, tens)
    worst = 0.0
    ok = True
    for i, x in enumerate(inputs):
        def scalar(arr, i=i):
            local = [Tensor(inp.copy()) for inp in inputs]
            local[i] = Tensor(arr.copy())
            return T.tsum(T.mul(fn(*local), proj)).item()

        num = numeric_grad(scalar, x, h=h)
        ana = grads[tens[i]].data
        err = np.max(np.abs(ana - num)) if num.size else 0.0
        worst = max(worst, float(err))
        if not np.allclose(ana, num, rtol=rtol, atol=atol):
            ok = False
    return ok, worst


def _away_from_kinks(arr, margin=1e-2):
    arr = arr.copy()
    small = np.abs(arr) < margin
    arr[small] = np.sign(arr[small] + 0.5) * margin * 2
    return arr


def _rand_shape(rng, maxdim=3, maxlen=4):
    return tuple(int(rng.integers(1, maxlen + 1)) for _ in range(int(rng.integers(1, maxdim + 1))))


def op_check_cases(rng):
    """Yield (op_name, fn, inputs) finite-difference cases, one per call site.

    Ops are referenced through the module namespace so a corrupted op
    (monkeypatched in tests) is caught and reported under its own name.
    """
    shape = _rand_shape(rng)
    a = rng.normal(size=shape)
    b = rng.normal(size=shape)
    pos = np.abs(rng.normal(size=shape)) + 0.5
    yield "add", lambda x, y: T.add(x, y), [a, b]
    yield "add-broadcast", lambda x, y: T.add(x, y), [rng.normal(size=(3, 1)), rng.normal(size=(1, 4))]
    yield "sub", lambda x, y: T.sub(x, y), [a, b]
    yield "mul", lambda x, y: T.mul(x, y), [a, b]
    yield "mul-broadcast", lambda x, y: T.mul(x, y), [rng.normal(size=(2, 3)), rng.normal(size=(3,))]
    yield "div", lambda x, y: T.div(x, y), [a, pos]
    yield "neg", lambda x: T.neg(x), [a]
    yield "power", lambda x: T.power(x, 2.5), [pos]
    yield "exp", lambda x: T.texp(x), [a]
    yield "log", lambda x: T.tlog(x), [pos]
    yield "sqrt", lambda x: T.tsqrt(x), [pos]
    yield "relu", lambda x: T.relu(x), [_away_from_kinks(rng.normal(size=shape))]
    yield "sigmoid", lambda x: T.sigmoid(x), [rng.normal(size=shape) * 3]
    yield "silu", lambda x: T.silu(x), [rng.normal(size=shape) * 3]
    m, k, n = (int(rng.integers(1, 5)) for _ in range(3))
    yield "matmul", lambda x, y: T.matmul(x, y), [rng.normal(size=(m, k)), rng.normal(size=(k, n))]
    yield "matmul-batched", lambda x, y: T.matmul(x, y), [rng.normal(size=(m, k)), rng.normal(size=(2, k, n))]
    mat = rng.normal(size=(3, 4))
    yield "sum", lambda x: T.tsum(x), [a]
    yield "sum-axis", lambda x: T.tsum(x, axis=0), [mat]
    yield "sum-keepdims", lambda x: T.tsum(x, axis=1, keepdims=True), [mat]
    yield "mean", lambda x: T.tmean(x, axis=(0, 1)), [rng.normal(size=(2, 3, 2))]
    yield "reshape", lambda x: T.reshape(x, (4, 3)), [mat]
    yield "transpose", lambda x: T.transpose(x, (1, 0)), [mat]
    img = rng.normal(size=(1, 2, 4, 4))
    yield "crop2d", lambda x: T.crop2d(x, 1, 3, 0, 2), [img]
    yield "pad_insert2d", lambda x: T.pad_insert2d(x, (1, 2, 6, 6), 1, 2), [img]
    idx = rng.integers(0, 4, size=3)
    yield "index_rows", lambda x: T.index_rows(x, idx), [mat]
    yield "scatter_rows", lambda x: T.scatter_rows(x, idx, 5), [rng.normal(size=3)]
    yield "im2col", lambda x: T.im2col(x, 3, 3, 1, 1), [img]
    cols = rng.normal(size=(1, 2 * 9, 16))
    yield "col2im", lambda x: T.col2im(x, (1, 2, 4, 4), 3, 3, 1, 1), [cols]
    w = rng.normal(size=(3, 2, 3, 3)) * 0.5
    bias = rng.normal(size=3)
    yield "conv2d", lambda x, ww, bb: T.conv2d(x, ww, bb, stride=1, pad=1), [img, w, bias]
    yield "avgpool2", lambda x: T.avgpool2(x), [img]
    yield "global_avgpool", lambda x: T.global_avgpool(x), [img]
    logits = rng.normal(size=(3, 4))
    labels = rng.integers(0, 4, size=3)
    yield "softmax", lambda x: T.softmax(x), [logits]
    yield "log_softmax", lambda x: T.log_softmax(x), [logits]
    yield "cross_entropy", lambda x: T.cross_entropy(x, labels), [logits]
    yield "l2_norm", lambda x: T.l2_norm(x), [a + 3.0]


def run_op_checks(cases=100, seed=0):
    """FD-verify every engine op over randomized cases.

    Returns a list of (check_name, passed, detail) triples, one per op name,
    aggregated over all random cases.
    """
    rng = np.random.default_rng(seed)
    worst = {}
    status = {}
    for _ in range(cases):
        for name, fn, inputs in op_check_cases(rng):
            ok, err = fd_check(fn, inputs, rng)
            worst[name] = max(worst.get(name, 0.0), err)
            status[name] = status.get(name, True) and ok
    return [(f"grad:{name}", status[name], f"max_abs_err={worst[name]:.3g}")
            for name in sorted(status)]


def run_double_backward_check(seed=0):
    """FD-verify d/dx of a function of weight gradients on a small victim."""
    from .models import VictimSpec, make_victim
    from .tensor import cross_entropy

    rng = np.random.default_rng(seed)
    spec = VictimSpec(in_channels=1, conv_channels=4, block_channels=8,
                      num_classes=5, input_hw=8)
    net = make_victim(spec, seed=seed)
    assert net.param_count() <= 1000
    x0 = rng.uniform(0.2, 0.8, size=(1, 1, 8, 8))
    labels = np.array([2])
    params = net.param_list()
    target = {name: rng.normal(size=p.shape) for name, p in net.params.items()}

    def loss_of(x_np):
        x = Tensor(x_np, requires_grad=True)
        grads = backward(cross_entropy(net.forward(x), labels), params, create_graph=True)
        num = Tensor(0.0)
        sq1 = Tensor(0.0)
        sq2 = 0.0
        for name, p in net.params.items():
            g = grads[p]
            c = Tensor(target[name])
            num = T.add(num, T.tsum(T.mul(g, c)))
            sq1 = T.add(sq1, T.tsum(T.power(g, 2.0)))
            sq2 += float((target[name] ** 2).sum())
        cos = T.div(num, T.mul(T.tsqrt(sq1), float(np.sqrt(sq2))))
        return T.sub(1.0, cos), x

    loss, x = loss_of(x0)
    ana = backward(loss, [x])[x].data
    num = numeric_grad(lambda arr: loss_of(arr)[0].item(), x0, h=1e-4)
    ok = np.allclose(ana, num, rtol=1e-3, atol=1e-6)
    return [("grad:double-backward", bool(ok),
             f"max_abs_err={float(np.max(np.abs(ana - num))):.3g}")]


def run_imaging_checks():
    """Regularizer units and the Canny geometry oracle."""
    from .imaging import (CannyParams, canny_edges, mse, psnr, r_mean, r_tv,
                          ssim, square_image, perimeter_ring)

    results = []
    const = Tensor(np.full((1, 8, 8), 0.4))
    results.append(("imaging:r_tv-constant", abs(r_tv(const).item()) < 1e-12, "r_tv(const)"))
    img = Tensor(np.full((1, 6, 6), 0.7))
    results.append(("imaging:r_mean-match", abs(r_mean(img, np.array([0.7])).item()) < 1e-12,
                    "matching means"))
    x = np.zeros((1, 16, 16))
    y = np.full((1, 16, 16), 0.1)
    results.append(("imaging:psnr-20dB", abs(psnr(x, y) - 20.0) < 1e-9, f"psnr={psnr(x, y)}"))
    results.append(("imaging:ssim-identity", abs(ssim(y, y) - 1.0) < 1e-12, "ssim(x,x)"))
    results.append(("imaging:mse", abs(mse(x, y) - 0.01) < 1e-15, "mse"))

    sq = square_image(24, 6, 16, low=0.1, high=0.9)
    edges = canny_edges(Tensor(sq), CannyParams())
    ring = perimeter_ring(24, 6, 16)
    inter = len(edges & ring)
    union = len(edges | ring)
    jac = inter / union if union else 0.0
    results.append(("imaging:canny-square-jaccard", jac >= 0.5, f"jaccard={jac:.3f}"))
    edges2 = canny_edges(Tensor(np.clip(sq * 2.0, 0.0, None)), CannyParams())
    results.append(("imaging:canny-contrast-invariant", edges == edges2,
                    f"|e1|={len(edges)} |e2|={len(edges2)}"))
    return results


def run_selftest(op_cases=20, seed=0):
    """Full battery; returns list of (name, passed, detail)."""
    out = []
    out.extend(run_op_checks(cases=op_cases, seed=seed))
    out.extend(run_double_backward_check(seed=seed))
    out.extend(run_imaging_checks())
    return out
