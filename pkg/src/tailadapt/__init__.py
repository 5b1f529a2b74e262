"""Two-stage long-tailed classification on precomputed embeddings.

Residual linear adapters aligned to text anchors (stage I, trained on
class-rebalanced streams), fused by a learned logit- or feature-level
ensembler under focal loss (stage II). Includes a synthetic long-tailed
benchmark, zero-shot and linear-probe baselines, evaluation metrics, and a
CLI. All gradients are hand-derived and finite-difference checked.
"""

__version__ = "0.1.0"

from . import cli, dataio, gradcheck, metrics, model, numerics, optim, pipeline, sampling
from .errors import TailAdaptError

__all__ = [
    "TailAdaptError",
    "__version__",
    "cli",
    "dataio",
    "gradcheck",
    "metrics",
    "model",
    "numerics",
    "optim",
    "pipeline",
    "sampling",
]
