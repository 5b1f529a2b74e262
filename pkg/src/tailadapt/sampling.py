"""Class re-balancing samplers for stage-I training streams."""

from dataclasses import dataclass
from typing import Literal

import numpy as np

from .dataio import EmbeddingSet
from .errors import InvalidDatasetError
from .seeding import named_rng

SamplerKind = Literal["wrs", "rus", "none"]
SAMPLER_KINDS = ("wrs", "rus", "none")


@dataclass
class SamplerSpec:
    kind: SamplerKind
    seed: int


def _labels_of(dataset: EmbeddingSet) -> np.ndarray:
    if dataset.labels is None:
        raise InvalidDatasetError("sampler needs a labeled embedding set")
    return dataset.labels


def wrs_weights(labels, num_classes: int) -> np.ndarray:
    """Per-sample draw probabilities, inverse to class frequency.

    Normalized to sum 1; the expected class distribution of a draw is
    uniform over the declared classes.
    """
    labels = np.asarray(labels, dtype=np.int64)
    counts = np.bincount(labels, minlength=num_classes)
    if len(counts) > num_classes:
        raise InvalidDatasetError("a label exceeds the declared class count")
    if (counts == 0).any():
        empty = int(np.flatnonzero(counts == 0)[0])
        raise InvalidDatasetError(f"class {empty} has no samples")
    weights = 1.0 / counts[labels]
    return weights / weights.sum()


def wrs_stream(dataset: EmbeddingSet, n_draws: int, seed: int,
               num_classes: int | None = None) -> np.ndarray:
    """n_draws indices sampled with replacement under wrs_weights."""
    labels = _labels_of(dataset)
    if num_classes is None:
        num_classes = int(labels.max()) + 1
    weights = wrs_weights(labels, num_classes)
    if n_draws == 0:
        return np.empty(0, dtype=np.int64)
    rng = named_rng(seed, "wrs-stream")
    return rng.choice(len(labels), size=n_draws, replace=True, p=weights).astype(np.int64)


def rus_select(dataset: EmbeddingSet, seed: int,
               num_classes: int | None = None) -> np.ndarray:
    """Trim every class to the minimum class count, uniformly without replacement.

    Returns a sorted, duplicate-free index subset of the original set.
    """
    labels = _labels_of(dataset)
    if num_classes is None:
        num_classes = int(labels.max()) + 1
    counts = np.bincount(labels, minlength=num_classes)
    if (counts == 0).any():
        empty = int(np.flatnonzero(counts == 0)[0])
        raise InvalidDatasetError(f"class {empty} has no samples")
    target = int(counts.min())
    rng = named_rng(seed, "rus-select")
    kept = [
        rng.choice(np.flatnonzero(labels == c), size=target, replace=False)
        for c in range(num_classes)
    ]
    out = np.concatenate(kept).astype(np.int64)
    out.sort()
    return out
