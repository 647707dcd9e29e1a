"""Label recovery from the last fully connected layer's gradient.

Two routes are implemented.  The baseline picks the K most-negative
per-class minima of the M x N fc gradient.  The duplicate-aware procedure
first takes every class whose column-summed gradient mass is negative
(those are certainly present), then asks the weight-shared scoring head
which of them repeat, and finally pads by replicating certain labels when
the head comes up short.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .models import AcbHead
from .tensor import NumericsError, no_grad

G2_SCALE = 1e17      # class-gradient amplification fed to the scoring head
PRO_SCALE = 1e10     # score normalization before the gap comparison
DEFAULT_GAP = 0.3    # minimum descending-score gap that marks a duplicate


@dataclass
class AcbIntermediates:
    """Intermediate values of the duplicate-scoring pass, kept for inspection."""
    g1: np.ndarray                       # column-wise sum of fc grad, length N
    g2: np.ndarray                       # g1 * 1e17, exact in float64
    pro_acb: np.ndarray | None = None    # raw head scores, length N
    pro_prime: np.ndarray | None = None  # pro_acb / 1e10
    order: np.ndarray | None = None      # class indices, descending pro_prime


@dataclass
class LabelEstimate:
    """Recovered labels with provenance (certain vs duplicate-inferred)."""
    l_k: list[int]
    l_acb: list[int]
    combined: list[int]
    intermediates: AcbIntermediates | None = field(default=None, repr=False)

    @property
    def k(self):
        return len(self.l_k)


def column_sums(fc_grad):
    """Per-class gradient mass: sum of the M x N fc gradient over features."""
    fc_grad = np.asarray(fc_grad, dtype=np.float64)
    if fc_grad.ndim != 2:
        raise ValueError(f"fc gradient must be 2-D (features x classes), got {fc_grad.shape}")
    return fc_grad.sum(axis=0)


def scale_g2(g1):
    """g2 = g1 * 1e17; overflow is an error, never Inf."""
    with np.errstate(over="ignore"):
        g2 = np.asarray(g1, dtype=np.float64) * G2_SCALE
    if not np.all(np.isfinite(g2)):
        raise NumericsError("class-gradient amplification overflowed float64")
    return g2


def baseline_min_k(fc_grad, k):
    """Indices of the K smallest per-class minima (ascending), the
    no-duplicates baseline."""
    fc_grad = np.asarray(fc_grad, dtype=np.float64)
    n = fc_grad.shape[1]
    if k > n:
        raise ValueError(f"batch size {k} exceeds class count {n}")
    mins = fc_grad.min(axis=0)
    order = np.argsort(mins, kind="stable")
    return [int(i) for i in order[:k]]


def smallest_k_of_sums(fc_grad, k):
    """Batch-size-K adaptation of the single-label sign rule: the K smallest
    column-summed gradients."""
    g1 = column_sums(fc_grad)
    if k > g1.shape[0]:
        raise ValueError(f"batch size {k} exceeds class count {g1.shape[0]}")
    order = np.argsort(g1, kind="stable")
    return [int(i) for i in order[:k]]


def extract_certain(fc_grad):
    """Classes with negative column-summed gradient mass, most negative first.

    These labels are certainly present in the batch; the list may be empty.
    """
    g1 = column_sums(fc_grad)
    order = np.argsort(g1, kind="stable")
    return [int(i) for i in order if g1[i] < 0.0]


def acb_score(head: AcbHead, g2, adapter="fc-project"):
    """Raw per-class scores from the weight-shared head (column-summed)."""
    with no_grad():
        scores = head.forward(g2, mode=adapter)
    return scores.data.sum(axis=0)


def recover_duplicates(pro_prime, l_k, k_total, threshold=DEFAULT_GAP):
    """Duplicate labels from the descending normalized scores.

    Scanning the scores in descending order, a class qualifies when it is a
    member of ``l_k`` and its score exceeds the next one by at least
    ``threshold``; the final element has no successor and can never qualify.
    Collection stops at ``k_total - len(l_k)``; any shortfall is padded by
    replicating ``l_k`` cyclically from its head.
    """
    pro_prime = np.asarray(pro_prime, dtype=np.float64)
    k = len(l_k)
    need = k_total - k
    if need <= 0:
        raise ValueError(f"already have {k} certain labels for batch of {k_total}; "
                         "the duplicate scan must be skipped")
    order = np.argsort(-pro_prime, kind="stable")
    members = set(l_k)
    found = []
    for i in range(order.shape[0] - 1):
        cls = int(order[i])
        gap = pro_prime[order[i]] - pro_prime[order[i + 1]]
        if cls in members and gap >= threshold:
            found.append(cls)
            if len(found) == need:
                break
    pad = 0
    while len(found) < need:
        found.append(l_k[pad % k])
        pad += 1
    return found, order


def recover_labels(capture, head: AcbHead, k=None, threshold=DEFAULT_GAP,
                   adapter="fc-project") -> LabelEstimate:
    """Full pipeline: certain labels, duplicate scan (skipped when complete),
    combined estimate sorted ascending.

    Degenerate captures with no negative gradient mass at all (possible only
    when the batch's own samples contribute almost nothing) fall back to the
    K smallest column sums.
    """
    k_total = capture.batch_size_hint if k is None else k
    g1 = column_sums(capture.fc_grad)
    inter = AcbIntermediates(g1=g1, g2=scale_g2(g1))
    l_k = extract_certain(capture.fc_grad)
    if len(l_k) >= k_total:
        l_k = l_k[:k_total]
        l_acb = []
    elif not l_k:
        l_acb = smallest_k_of_sums(capture.fc_grad, k_total)
    else:
        inter.pro_acb = acb_score(head, inter.g2, adapter=adapter)
        inter.pro_prime = inter.pro_acb / PRO_SCALE
        l_acb, inter.order = recover_duplicates(inter.pro_prime, l_k, k_total,
                                                threshold=threshold)
    return LabelEstimate(l_k=l_k, l_acb=l_acb,
                         combined=sorted(l_k + l_acb), intermediates=inter)
