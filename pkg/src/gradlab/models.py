"""Small convolutional victim classifier and the duplicate-scoring head.

The victim is a desk-scale stand-in for a large residual classifier: two
conv/relu/pool stages, a channel-preserving residual final block, a global
average pool and a final fully connected layer whose weight matrix has shape
M x N (M embedded features, N classes).  The duplicate-scoring head reuses
the final block, the average pool and the fully connected layer by
reference, so any weight update to the victim is observed by the head.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class VictimSpec:
    """Architecture knobs for the victim classifier.

    ``activation`` is "relu" by default; "silu" gives a smooth landscape
    that second-order pixel optimization needs at this scale (label
    recovery works with either).
    """
    in_channels: int = 1
    conv_channels: int = 8
    block_channels: int = 16
    num_classes: int = 10
    input_hw: int = 16
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ("relu", "silu"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def block_hw(self):
        # two 2x2 average pools sit in front of the final block
        return self.input_hw // 4


class VictimNet:
    """Conv victim: stage1 -> pool -> stage2 -> pool -> residual block -> GAP -> fc."""

    def __init__(self, spec: VictimSpec, params: dict[str, Tensor]):
        self.spec = spec
        self.params = params

    def param_list(self):
        return list(self.params.values())

    def named_params(self):
        return list(self.params.items())

    def param_count(self):
        return int(sum(p.size for p in self.params.values()))

    @property
    def fc_weight(self):
        return self.params["fc.w"]

    @property
    def fc_bias(self):
        return self.params["fc.b"]

    def _act(self, x):
        return T.relu(x) if self.spec.activation == "relu" else T.silu(x)

    def forward(self, images):
        """Logits [batch, N] for images [batch, C, H, W]; differentiable."""
        x = T.as_tensor(images)
        s = self.spec
        if x.ndim != 4 or x.shape[1:] != (s.in_channels, s.input_hw, s.input_hw):
            raise ShapeError(
                f"victim expects [batch, {s.in_channels}, {s.input_hw}, {s.input_hw}], "
                f"got {x.shape}")
        p = self.params
        h = self._act(T.conv2d(x, p["conv1.w"], p["conv1.b"], pad=1))
        h = T.avgpool2(h)
        h = self._act(T.conv2d(h, p["conv2.w"], p["conv2.b"], pad=1))
        h = T.avgpool2(h)
        h = self.final_block(h)
        feats = T.global_avgpool(h)                      # [batch, M]
        return T.add(T.matmul(feats, p["fc.w"]), p["fc.b"])

    def final_block(self, h):
        """Residual channel-preserving conv stage, the victim's 'last block'."""
        p = self.params
        return self._act(T.add(h, T.conv2d(h, p["block.w"], p["block.b"], pad=1)))

    def acb_head(self):
        return AcbHead(self)

    # -- persistence (self-describing text format: name, shape, row-major values)

    def save_weights(self, path):
        with open(path, "w") as f:
            f.write("gradlab-weights v1\n")
            for name, p in self.params.items():
                dims = " ".join(str(d) for d in p.shape)
                f.write(f"{name} {p.ndim} {dims}\n")
                f.write(" ".join(f"{v:.17g}" for v in p.data.reshape(-1)) + "\n")

    def load_weights(self, path):
        """In-place load; shared views (the head) observe the new values."""
        with open(path) as f:
            magic = f.readline().strip()
            if magic != "gradlab-weights v1":
                raise ValueError(f"unrecognized weight file header: {magic!r}")
            while True:
                header = f.readline()
                if not header:
                    break
                parts = header.split()
                name, ndim = parts[0], int(parts[1])
                shape = tuple(int(d) for d in parts[2:2 + ndim])
                values = np.array([float(v) for v in f.readline().split()])
                if name not in self.params:
                    raise ValueError(f"unknown parameter {name!r} in weight file")
                if values.size != int(np.prod(shape)) or shape != self.params[name].shape:
                    raise ShapeError(f"weight {name}: file shape {shape} does not match "
                                     f"model shape {self.params[name].shape}")
                self.params[name].data[...] = values.reshape(shape)


class AcbHead:
    """View over the victim's final block + avgpool + fc (weights shared by reference)."""

    def __init__(self, net: VictimNet):
        self.net = net

    @property
    def fc_weight(self):
        return self.net.fc_weight

    @property
    def fc_bias(self):
        return self.net.fc_bias

    def block_input_shape(self):
        s = self.net.spec
        return (1, s.block_channels, s.block_hw, s.block_hw)

    def adapt_input(self, g2, mode="fc-project"):
        """Deterministic adapter turning the scaled class-gradient summary into
        a block input.

        ``fc-project`` (default): pushes the negated class-space vector through
        the shared fc weights into feature space and injects it as
        channel-constant planes; negation because classes present in the batch
        carry negative gradient mass and the head scores positive evidence.
        ``tile``: repeats the raw vector row-major across the spatial map and
        broadcasts it over channels.
        """
        g2 = np.asarray(g2, dtype=np.float64).reshape(-1)
        s = self.net.spec
        if g2.shape[0] != s.num_classes:
            raise ShapeError(f"expected a length-{s.num_classes} class vector, got {g2.shape}")
        _, c, hb, wb = self.block_input_shape()
        if mode == "fc-project":
            v = -(self.fc_weight.data @ g2)              # [M] == block channels
            data = np.broadcast_to(v[:, None, None], (c, hb, wb)).copy()
        elif mode == "tile":
            plane = np.resize(g2, hb * wb).reshape(hb, wb)
            data = np.broadcast_to(plane[None], (c, hb, wb)).copy()
        else:
            raise ValueError(f"unknown adapter mode {mode!r}")
        return Tensor(data[None])                        # [1, C, hb, wb]

    def forward(self, g2, mode="fc-project"):
        """Score matrix over classes for the adapted gradient summary."""
        x = g2 if isinstance(g2, Tensor) else self.adapt_input(g2, mode=mode)
        if x.shape != self.block_input_shape():
            raise ShapeError(f"head expects {self.block_input_shape()}, got {x.shape}")
        h = self.net.final_block(x)
        feats = T.global_avgpool(h)
        return T.add(T.matmul(feats, self.fc_weight), self.fc_bias)


def make_victim(spec: VictimSpec = VictimSpec(), seed: int = 0) -> VictimNet:
    """Victim with Kaiming-style fan-in init (relu gain on convs), zero biases."""
    rng = np.random.default_rng(seed)
    s = spec

    def conv_init(cout, cin, k):
        fan_in = cin * k * k
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(cout, cin, k, k))

    params = {
        "conv1.w": Tensor(conv_init(s.conv_channels, s.in_channels, 3), requires_grad=True),
        "conv1.b": Tensor(np.zeros(s.conv_channels), requires_grad=True),
        "conv2.w": Tensor(conv_init(s.block_channels, s.conv_channels, 3), requires_grad=True),
        "conv2.b": Tensor(np.zeros(s.block_channels), requires_grad=True),
        "block.w": Tensor(conv_init(s.block_channels, s.block_channels, 3), requires_grad=True),
        "block.b": Tensor(np.zeros(s.block_channels), requires_grad=True),
        "fc.w": Tensor(rng.normal(0.0, np.sqrt(1.0 / s.block_channels),
                                  size=(s.block_channels, s.num_classes)), requires_grad=True),
        "fc.b": Tensor(np.zeros(s.num_classes), requires_grad=True),
    }
    return VictimNet(spec, params)


def train_victim(net: VictimNet, dataset, steps=200, batch_size=8, lr=0.05,
                 augment_noise=0.0, gray_blend=False, seed=0):
    """Brief SGD training on the toy dataset.

    ``augment_noise`` adds Gaussian input jitter.  ``gray_blend`` mixes in
    contrast-reduced copies (a small share blended most of the way toward
    mid-gray, the rest near full strength): the victim then discriminates
    along the whole gray-to-image path, which is what makes its gradients
    invertible from a gray start without washing out blur sensitivity.
    """
    rng = np.random.default_rng(seed)
    for _ in range(steps):
        idx = rng.integers(0, len(dataset), size=batch_size)
        images = np.stack([dataset.image(int(i)) for i in idx])
        if gray_blend:
            near_gray = rng.random(batch_size) < 0.18
            lam = np.where(near_gray, rng.uniform(0.05, 0.35, batch_size),
                           rng.uniform(0.9, 1.0, batch_size))
            images = 0.5 + lam.reshape(-1, 1, 1, 1) * (images - 0.5)
        if augment_noise > 0:
            images = np.clip(images + rng.normal(0.0, augment_noise, images.shape), 0.0, 1.0)
        labels = np.array([dataset.label(int(i)) for i in idx])
        loss = T.cross_entropy(net.forward(Tensor(images)), labels)
        grads = T.backward(loss, net.param_list())
        for p in net.param_list():
            p.data -= lr * grads[p].data
    return net
