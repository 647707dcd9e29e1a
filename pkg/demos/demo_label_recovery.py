"""Duplicate-aware label recovery from captured gradients.

A batch with a repeated label defeats the classic per-class-minimum rule
(it can only ever return distinct labels); the two-step procedure first
extracts the classes with negative gradient mass, then asks the
weight-shared scoring head which of them repeat.
"""

import numpy as np

from gradlab import (DatasetConfig, TemplateDataset, VictimSpec,
                     batch_from_indices, baseline_min_k, expose_gradients,
                     make_victim, recover_labels)

dataset = TemplateDataset(DatasetConfig(seed=7))
net = make_victim(VictimSpec(), seed=42)

# build a batch of four with one duplicated class
by_class = {}
for i in range(len(dataset)):
    by_class.setdefault(dataset.label(i), []).append(i)
indices = by_class[3][:2] + [by_class[5][0], by_class[8][0]]
batch = batch_from_indices(dataset, indices)
print("private labels:", sorted(batch.labels))

capture = expose_gradients(net, batch)
print("captured fc gradient:", capture.fc_grad.shape,
      "| batch size hint:", capture.batch_size_hint)

baseline = baseline_min_k(capture.fc_grad, 4)
print("per-class-minimum baseline:", sorted(baseline),
      "(distinct by construction, misses the duplicate)")

estimate = recover_labels(capture, net.acb_head(), 4)
print("certain labels (negative gradient mass):", estimate.l_k)
print("duplicates from the scoring head:       ", estimate.l_acb)
print("recovered multiset:                     ", estimate.combined)
print("exact match:", estimate.combined == sorted(batch.labels))

# the intermediates are kept for inspection
inter = estimate.intermediates
print("\nper-class gradient mass (negative = present):")
print(np.array2string(inter.g1, precision=4, suppress_small=True))
if inter.pro_prime is not None:
    order = inter.order
    print("head scores, descending:",
          [(int(c), round(float(inter.pro_prime[c]), 2)) for c in order[:4]])
