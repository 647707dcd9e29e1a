"""Tour of the tensor engine: forward ops, gradients, double backward.

The punchline is the last section: we differentiate a function OF a
gradient, which is the mechanism the reconstruction attack runs on.
"""

import numpy as np

from gradlab import tensor as T
from gradlab.tensor import Tensor, backward

# --- plain forward/backward ------------------------------------------------

x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
loss = T.tsum(T.power(x, 2.0))
grads = backward(loss, [x])
print("d sum(x^2)/dx at [1,2,3]:", grads[x].data, "(expect [2, 4, 6])")

# --- a tiny net, gradient checked against finite differences ---------------

rng = np.random.default_rng(0)
w = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
v = Tensor(rng.normal(size=(2, 1)), requires_grad=True)


def net_loss(x_np):
    h = T.relu(T.matmul(Tensor(x_np), w))
    return T.tsum(T.power(T.matmul(h, v), 2.0))


x0 = rng.normal(size=(4, 3))
analytic = backward(net_loss(x0), [w])[w].data
h = 1e-4
fd = np.zeros_like(w.data)
for i in range(w.size):
    w.data.reshape(-1)[i] += h
    hi = net_loss(x0).item()
    w.data.reshape(-1)[i] -= 2 * h
    lo = net_loss(x0).item()
    w.data.reshape(-1)[i] += h
    fd.reshape(-1)[i] = (hi - lo) / (2 * h)
print("max |analytic - finite difference| over net weights:",
      float(np.abs(analytic - fd).max()))

# --- double backward: differentiate a function of a gradient ----------------

x = Tensor([1.0, 2.0], requires_grad=True)
s = T.tsum(T.power(x, 3.0))                       # s = sum(x^3)
(gx,) = backward(s, [x], create_graph=True).values()   # gx = 3x^2, still a graph
f = T.tsum(T.mul(gx, Tensor([1.0, 10.0])))             # f = 3x0^2 + 30x1^2
ggx = backward(f, [x])[x].data
print("d/dx of (d sum(x^3)/dx . c):", ggx, "(expect [6, 120])")
