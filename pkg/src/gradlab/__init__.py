"""Desk-scale gradient-inversion laboratory.

A small federated-learning victim exposes per-parameter gradients; the
library recovers the private batch's labels (duplicate-aware) and
reconstructs the images by regularized gradient matching, with full metric
evaluation and reproducible experiment runs.
"""

from .tensor import (GraphError, NumericsError, ShapeError, Tensor, backward,
                     no_grad)
from .models import AcbHead, VictimNet, VictimSpec, make_victim, train_victim
from .harness import (DatasetConfig, GradientCapture, ImageDirDataset,
                      PrivateBatch, Scenario, TemplateDataset,
                      batch_from_indices, expose_gradients, load_scenario,
                      sample_batch, save_scenario)
from .labels import (AcbIntermediates, LabelEstimate, baseline_min_k,
                     column_sums, extract_certain, recover_duplicates,
                     recover_labels, smallest_k_of_sums)
from .attack import AttackConfig, AttackReport, run_attack
from .imaging import mse, psnr, ssim

__all__ = [
    "Tensor", "backward", "no_grad", "ShapeError", "NumericsError", "GraphError",
    "VictimSpec", "VictimNet", "AcbHead", "make_victim", "train_victim",
    "DatasetConfig", "TemplateDataset", "ImageDirDataset", "PrivateBatch",
    "GradientCapture", "Scenario", "batch_from_indices", "sample_batch",
    "expose_gradients", "save_scenario", "load_scenario",
    "LabelEstimate", "AcbIntermediates", "baseline_min_k", "smallest_k_of_sums",
    "column_sums", "extract_certain", "recover_duplicates", "recover_labels",
    "AttackConfig", "AttackReport", "run_attack", "psnr", "ssim", "mse",
]
