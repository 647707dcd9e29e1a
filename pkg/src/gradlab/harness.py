"""Honest-but-curious capture scenario: a victim user computes mean
cross-entropy on a private batch; the attacker sees model structure, weights
and per-parameter gradients, never the batch itself.

Ships a procedurally generated template dataset (visually distinct shape
classes plus noise) so runs are self-contained, and a directory loader for
portable raster images.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .models import VictimNet, VictimSpec, make_victim
from .tensor import Tensor


@dataclass(frozen=True)
class DatasetConfig:
    num_classes: int = 10
    size: int = 200
    image_hw: int = 16
    channels: int = 1
    noise: float = 0.015
    smooth_sigma: float = 1.0     # soft shape edges, photograph-like
    seed: int = 0


def _class_template(cls, hw):
    """Deterministic shape template for a class, values in [0, 1].

    Shapes are coarse, centered and bright on a mid-gray canvas (natural
    photographs average near mid-gray, which is also what makes a gray
    reconstruction start sensible); they stay visually distinct after the
    smoothing pass, and their edge sets keep the subject's baseline point
    near the image center.
    """
    lo, hi = 0.45, 0.95
    img = np.full((hw, hw), lo)
    r = np.arange(hw)
    yy, xx = np.meshgrid(r, r, indexing="ij")
    c = (hw - 1) / 2.0
    d = np.sqrt((yy - c) ** 2 + (xx - c) ** 2)
    k = cls % 10
    if k == 0:                                          # filled square
        img[hw // 4:hw - hw // 4, hw // 4:hw - hw // 4] = hi
    elif k == 1:                                        # ring
        img[(d >= hw / 5.5) & (d <= hw / 2.6)] = hi
    elif k == 2:                                        # plus
        w = max(1, hw // 8)
        img[int(c) - w:int(c) + w + 2, 1:hw - 1] = hi
        img[1:hw - 1, int(c) - w:int(c) + w + 2] = hi
    elif k == 3:                                        # vertical band
        img[:, hw // 3:2 * hw // 3 + 1] = hi
    elif k == 4:                                        # diagonal band
        img[np.abs(yy - xx) <= max(2, hw // 6)] = hi
    elif k == 5:                                        # filled disc
        img[d <= hw / 3.2] = hi
    elif k == 6:                                        # X
        img[np.abs(yy - xx) <= max(1, hw // 12)] = hi
        img[np.abs(yy + xx - (hw - 1)) <= max(1, hw // 12)] = hi
    elif k == 7:                                        # diamond
        img[np.abs(yy - c) + np.abs(xx - c) <= hw / 2.7] = hi
    elif k == 8:                                        # two vertical bars
        img[hw // 8:hw - hw // 8, hw // 6:hw // 3 + 1] = hi
        img[hw // 8:hw - hw // 8, hw - hw // 3 - 1:hw - hw // 6] = hi
    else:                                               # horizontal band
        img[np.abs(yy - c) <= hw / 6] = hi
    return img


# fixed per-class tints for 3-channel datasets
_TINTS = np.array([
    [1.0, 0.3, 0.3], [0.3, 1.0, 0.3], [0.3, 0.3, 1.0], [1.0, 1.0, 0.3],
    [1.0, 0.3, 1.0], [0.3, 1.0, 1.0], [1.0, 0.7, 0.3], [0.7, 0.3, 1.0],
    [0.5, 1.0, 0.6], [0.9, 0.9, 0.9],
])


class TemplateDataset:
    """Label-shuffled procedural dataset of noisy shape templates."""

    def __init__(self, config: DatasetConfig = DatasetConfig()):
        self.config = config
        cfg = config
        rng = np.random.default_rng(cfg.seed)
        reps = math.ceil(cfg.size / cfg.num_classes)
        labels = np.tile(np.arange(cfg.num_classes), reps)[:cfg.size]
        rng.shuffle(labels)
        self._labels = labels
        templates = [_class_template(k, cfg.image_hw) for k in range(cfg.num_classes)]
        if cfg.smooth_sigma > 0:
            from .imaging import _conv_same_reflect, _gaussian_kernel
            blur = _gaussian_kernel(5, cfg.smooth_sigma)
            templates = [_conv_same_reflect(t, blur) for t in templates]
        self._templates = np.stack(templates)
        self._noise_seed = rng.integers(0, 2 ** 31)

    def __len__(self):
        return self.config.size

    def label(self, i):
        return int(self._labels[i])

    def image(self, i):
        """Image [C, H, W] in [0, 1]; per-index noise is reproducible."""
        cfg = self.config
        if not 0 <= i < cfg.size:
            raise IndexError(f"index {i} out of range for dataset of {cfg.size}")
        base = self._templates[self._labels[i]]
        if cfg.channels == 1:
            img = base[None]
        elif cfg.channels == 3:
            tint = _TINTS[self._labels[i] % len(_TINTS)]
            img = base[None] * tint[:, None, None]
        else:
            raise ValueError(f"unsupported channel count {cfg.channels}")
        rng = np.random.default_rng((self._noise_seed, i))
        noisy = img + rng.normal(0.0, cfg.noise, size=img.shape)
        return np.clip(noisy, 0.0, 1.0)

    def channel_means(self):
        """Per-channel mean over the whole dataset (the color reference)."""
        acc = np.zeros(self.config.channels)
        for i in range(len(self)):
            acc += self.image(i).mean(axis=(1, 2))
        return acc / len(self)


class DatasetSlice:
    """Contiguous index-range view of a dataset (e.g. a train/attack split)."""

    def __init__(self, dataset, start, stop):
        if not 0 <= start < stop <= len(dataset):
            raise ValueError(f"bad slice [{start}, {stop}) for dataset of {len(dataset)}")
        self._dataset = dataset
        self._start = start
        self._stop = stop
        self.config = dataset.config

    def __len__(self):
        return self._stop - self._start

    def label(self, i):
        return self._dataset.label(self._start + i)

    def image(self, i):
        return self._dataset.image(self._start + i)

    def channel_means(self):
        acc = np.zeros(self.config.channels)
        for i in range(len(self)):
            acc += self.image(i).mean(axis=(1, 2))
        return acc / len(self)


class ImageDirDataset:
    """Loads portable raster files from a directory.

    Filenames must look like ``label<int>_anything.pgm`` (or ``.ppm``);
    all images must share one geometry.
    """

    def __init__(self, path):
        from .imaging import read_image
        names = sorted(n for n in os.listdir(path) if n.endswith((".pgm", ".ppm")))
        if not names:
            raise ValueError(f"no .pgm/.ppm images found under {path}")
        self._images, labels = [], []
        for n in names:
            if not n.startswith("label"):
                raise ValueError(f"cannot parse class from filename {n!r}")
            labels.append(int(n[5:].split("_")[0]))
            self._images.append(read_image(os.path.join(path, n)))
        shapes = {im.shape for im in self._images}
        if len(shapes) != 1:
            raise ValueError(f"images disagree on geometry: {sorted(shapes)}")
        self._labels = labels
        c, h, w = self._images[0].shape
        self.config = DatasetConfig(num_classes=max(labels) + 1, size=len(names),
                                    image_hw=h, channels=c, noise=0.0, seed=0)

    def __len__(self):
        return len(self._images)

    def label(self, i):
        return self._labels[i]

    def image(self, i):
        return self._images[i].copy()

    def channel_means(self):
        return np.mean([im.mean(axis=(1, 2)) for im in self._images], axis=0)


@dataclass(frozen=True)
class PrivateBatch:
    """The victim's training batch; immutable once captured."""
    images: np.ndarray            # [K, C, H, W]
    labels: tuple[int, ...]

    def __post_init__(self):
        self.images.setflags(write=False)
        if self.images.shape[0] != len(self.labels) or len(self.labels) < 1:
            raise ValueError(f"{self.images.shape[0]} images vs {len(self.labels)} labels")


@dataclass
class GradientCapture:
    """What the attacker receives: per-parameter gradients plus shape metadata."""
    grads: dict[str, np.ndarray]
    fc_grad: np.ndarray           # [M, N]
    batch_size_hint: int


def batch_from_indices(dataset, indices):
    images = np.stack([dataset.image(int(i)) for i in indices])
    labels = tuple(dataset.label(int(i)) for i in indices)
    return PrivateBatch(images=images, labels=labels)


def sample_batch(dataset, k, rng, wraparound=False):
    """Uniform start + uniform increment index sampling, scaled to the dataset.

    Start is uniform in [0, D/2), the increment uniform in [1, ceil(D/100)];
    duplicate labels arise naturally from the label-shuffled dataset.
    """
    d = len(dataset)
    if d < 1:
        raise ValueError("empty dataset")
    start = int(rng.integers(0, max(1, d // 2)))
    incr = int(rng.integers(1, max(1, math.ceil(d / 100)) + 1))
    idx = start + incr * np.arange(k)
    if idx[-1] >= d:
        if not wraparound:
            raise ValueError(f"batch indices exceed dataset size {d} "
                             f"(start={start}, increment={incr}, k={k}); "
                             "enable wraparound to permit modular indexing")
        idx = idx % d
    return batch_from_indices(dataset, idx), tuple(int(i) for i in idx)


def expose_gradients(net: VictimNet, batch: PrivateBatch) -> GradientCapture:
    """Per-parameter gradients of the mean cross-entropy over the batch."""
    n = net.spec.num_classes
    for lbl in batch.labels:
        if not 0 <= lbl < n:
            raise ValueError(f"label {lbl} out of range [0, {n})")
    loss = T.cross_entropy(net.forward(Tensor(batch.images)), np.array(batch.labels))
    grads = T.backward(loss, net.param_list())
    named = {name: grads[p].data.copy() for name, p in net.named_params()}
    return GradientCapture(grads=named, fc_grad=named["fc.w"],
                           batch_size_hint=len(batch.labels))


@dataclass(frozen=True)
class Scenario:
    """Everything needed to replay one capture exactly."""
    dataset: DatasetConfig
    victim: VictimSpec
    victim_seed: int
    indices: tuple[int, ...]

    def build(self):
        dataset = TemplateDataset(self.dataset)
        net = make_victim(self.victim, seed=self.victim_seed)
        batch = batch_from_indices(dataset, self.indices)
        return dataset, net, batch


def save_scenario(path, scenario: Scenario):
    payload = {"dataset": asdict(scenario.dataset), "victim": asdict(scenario.victim),
               "victim_seed": scenario.victim_seed, "indices": list(scenario.indices)}
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)


def load_scenario(path) -> Scenario:
    with open(path) as f:
        payload = json.load(f)
    return Scenario(dataset=DatasetConfig(**payload["dataset"]),
                    victim=VictimSpec(**payload["victim"]),
                    victim_seed=int(payload["victim_seed"]),
                    indices=tuple(int(i) for i in payload["indices"]))
