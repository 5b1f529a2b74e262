"""Adapter, classification heads, ensembler, losses, and their analytic gradients.

Forward paths (per sample, x is the raw precomputed embedding):

    adapted   f = x + (1 - s) * (W x - x),   s = sigmoid(gate)
    branch    logit_c = cos(anchor_c, f) / tau
    ensemble  logit-wise:   z = K [lw ; lr] + b
              feature-wise: g = K [fw ; fr] + b,  z_c = cos(anchor_c, g) / tau

Stage-I training differentiates cross-entropy through the branch path with
respect to (W, gate); stage-II differentiates focal loss through the
ensemble path with respect to (K, b) only, the adapters being frozen inputs.
All gradients are derived by hand and checked against central finite
differences in the test suite and the `gradcheck` command.

Batched variants return the mean loss and mean gradients over the batch and
agree with the per-sample operations by construction.
"""

from dataclasses import dataclass
from typing import Literal

import numpy as np

from .dataio import EmbeddingSet, PromptBank
from .errors import (
    DegenerateVectorError,
    InvalidArgumentError,
    InvalidConfigError,
    InvalidDatasetError,
    ShapeError,
)
from .numerics import DEGENERATE_NORM, l2_normalize, log_softmax, sigmoid
from .optim import SgdHyper, SgdState, cosine_lr, sgd_step
from .seeding import named_rng

EnsembleMode = Literal["logit", "feature"]
ENSEMBLE_MODES = ("logit", "feature")


@dataclass
class HeadConfig:
    """Cosine classification head; tau is the softmax temperature."""

    tau: float = 0.01

    def __post_init__(self):
        if not 0.0 < self.tau <= 10.0:
            raise InvalidConfigError(f"tau must be in (0, 10], got {self.tau}")


@dataclass
class AdapterParams:
    """Square linear map plus a scalar pre-sigmoid residual gate."""

    weight: np.ndarray
    gate: float = 0.0

    def __post_init__(self):
        self.weight = np.ascontiguousarray(self.weight, dtype=np.float64)
        if self.weight.ndim != 2 or self.weight.shape[0] != self.weight.shape[1]:
            raise ShapeError(f"adapter weight must be square, got {self.weight.shape}")
        if not np.isfinite(self.weight).all() or not np.isfinite(self.gate):
            raise InvalidConfigError("adapter parameters must be finite")
        self.gate = float(self.gate)

    @property
    def dim(self) -> int:
        return self.weight.shape[0]


@dataclass
class EnsemblerParams:
    """Linear fusion of the two branch outputs, at logit or feature level."""

    mode: EnsembleMode
    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        if self.mode not in ENSEMBLE_MODES:
            raise InvalidConfigError(f"unknown ensemble mode {self.mode!r}")
        self.weight = np.ascontiguousarray(self.weight, dtype=np.float64)
        self.bias = np.ascontiguousarray(self.bias, dtype=np.float64)
        rows, cols = self.weight.shape
        if cols != 2 * rows:
            raise ShapeError(f"ensembler weight must be n x 2n, got {self.weight.shape}")
        if self.bias.shape != (rows,):
            raise ShapeError(f"ensembler bias must have dim {rows}, got {self.bias.shape}")


@dataclass
class GradBundle:
    """Gradients populated per stage; absent entries are structurally None."""

    adapter_weight: np.ndarray | None = None
    adapter_gate: float | None = None
    ensembler_weight: np.ndarray | None = None
    ensembler_bias: np.ndarray | None = None


def init_adapter(dim: int, rng: np.random.Generator) -> AdapterParams:
    """Identity plus small Gaussian noise; gate 0 blends the branches 50/50."""
    weight = np.eye(dim) + 1e-2 * rng.standard_normal((dim, dim))
    return AdapterParams(weight=weight, gate=0.0)


def init_ensembler(mode: EnsembleMode, num_classes: int, dim: int) -> EnsemblerParams:
    """Averaging map [I/2 | I/2] with zero bias, in either mode."""
    n = num_classes if mode == "logit" else dim
    weight = 0.5 * np.hstack([np.eye(n), np.eye(n)])
    return EnsemblerParams(mode=mode, weight=weight, bias=np.zeros(n))


# ---------------------------------------------------------------------------
# Forward


def adapter_forward(params: AdapterParams, feat: np.ndarray) -> np.ndarray:
    """Gated residual blend of the raw and adapted feature.

    Written as x + (1-s)(Wx - x) so that W = I reproduces x bit-exactly.
    """
    feat = np.asarray(feat, dtype=np.float64)
    if feat.shape != (params.dim,):
        raise ShapeError(f"feature dim {feat.shape} != adapter dim {params.dim}")
    s = sigmoid(params.gate)
    adapted = params.weight @ feat
    return feat + (1.0 - s) * (adapted - feat)


def adapter_forward_batch(params: AdapterParams, feats: np.ndarray) -> np.ndarray:
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[1] != params.dim:
        raise ShapeError(f"batch shape {feats.shape} incompatible with adapter dim {params.dim}")
    s = sigmoid(params.gate)
    adapted = feats @ params.weight.T
    return feats + (1.0 - s) * (adapted - feats)


def _check_bank(bank: PromptBank, dim: int) -> None:
    if bank.dim != dim:
        raise ShapeError(f"prompt bank dim {bank.dim} != feature dim {dim}")


def branch_logits(params: AdapterParams, bank: PromptBank, feat: np.ndarray,
                  head: HeadConfig) -> np.ndarray:
    """Per-class cosine similarity of the adapted feature to each anchor, over tau."""
    _check_bank(bank, params.dim)
    fused = adapter_forward(params, feat)
    unit = l2_normalize(fused)
    return (bank.anchors @ unit) / head.tau


def zero_shot_logits(bank: PromptBank, feat: np.ndarray, head: HeadConfig) -> np.ndarray:
    """Cosine head applied directly to the raw embedding (no adapter)."""
    feat = np.asarray(feat, dtype=np.float64)
    _check_bank(bank, feat.shape[0])
    unit = l2_normalize(feat)
    return (bank.anchors @ unit) / head.tau


def _normalize_rows(feats: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(feats, axis=1, keepdims=True)
    if (norms <= DEGENERATE_NORM).any():
        raise DegenerateVectorError(f"{what}: a row collapsed to near-zero norm")
    return feats / norms, norms


def branch_logits_batch(params: AdapterParams, bank: PromptBank, feats: np.ndarray,
                        head: HeadConfig) -> tuple[np.ndarray, np.ndarray]:
    """Batched branch forward; returns (logits N x C, fused features N x d)."""
    _check_bank(bank, params.dim)
    fused = adapter_forward_batch(params, feats)
    units, _ = _normalize_rows(fused, "branch features")
    return (units @ bank.anchors.T) / head.tau, fused


def zero_shot_logits_batch(bank: PromptBank, feats: np.ndarray, head: HeadConfig) -> np.ndarray:
    feats = np.asarray(feats, dtype=np.float64)
    _check_bank(bank, feats.shape[1])
    units, _ = _normalize_rows(feats, "raw features")
    return (units @ bank.anchors.T) / head.tau


def ensemble_logits(ens: EnsemblerParams, feat_w: np.ndarray, feat_r: np.ndarray,
                    logit_w: np.ndarray, logit_r: np.ndarray, bank: PromptBank,
                    head: HeadConfig) -> np.ndarray:
    """Fuse the two frozen branches into final class logits."""
    if ens.mode == "logit":
        stacked = np.concatenate([np.asarray(logit_w, float), np.asarray(logit_r, float)])
        if stacked.shape[0] != ens.weight.shape[1]:
            raise ShapeError("branch logits do not match the ensembler width")
        return ens.weight @ stacked + ens.bias
    stacked = np.concatenate([np.asarray(feat_w, float), np.asarray(feat_r, float)])
    if stacked.shape[0] != ens.weight.shape[1]:
        raise ShapeError("branch features do not match the ensembler width")
    fused = ens.weight @ stacked + ens.bias
    unit = l2_normalize(fused)
    _check_bank(bank, unit.shape[0])
    return (bank.anchors @ unit) / head.tau


def ensemble_logits_batch(ens: EnsemblerParams, feats_w: np.ndarray, feats_r: np.ndarray,
                          logits_w: np.ndarray, logits_r: np.ndarray, bank: PromptBank,
                          head: HeadConfig) -> np.ndarray:
    if ens.mode == "logit":
        stacked = np.hstack([logits_w, logits_r])
        return stacked @ ens.weight.T + ens.bias
    stacked = np.hstack([feats_w, feats_r])
    fused = stacked @ ens.weight.T + ens.bias
    units, _ = _normalize_rows(fused, "fused features")
    return (units @ bank.anchors.T) / head.tau


# ---------------------------------------------------------------------------
# Losses


def _check_label(logits: np.ndarray, label: int) -> None:
    if not 0 <= label < logits.shape[-1]:
        raise InvalidArgumentError(f"label {label} out of range for {logits.shape[-1]} classes")


def ce_loss(logits, label: int) -> float:
    """Negative log softmax probability of the true class (stable log-sum-exp)."""
    logits = np.asarray(logits, dtype=np.float64)
    _check_label(logits, label)
    shifted = logits - logits.max()
    lse = np.log(np.exp(shifted).sum())
    return float(lse - shifted[label])


def focal_loss(logits, label: int, gamma: float) -> float:
    """-(1 - p_t)^gamma * log(p_t); gamma=0 reproduces ce_loss."""
    if gamma < 0.0:
        raise InvalidArgumentError("gamma must be non-negative")
    logits = np.asarray(logits, dtype=np.float64)
    _check_label(logits, label)
    log_pt = log_softmax(logits)[label]
    pt = np.exp(log_pt)
    return float(-((1.0 - pt) ** gamma) * log_pt)


def _focal_logit_grad(probs: np.ndarray, labels: np.ndarray, gamma: float) -> np.ndarray:
    """d(focal)/d(logits) for each row of probs; gamma=0 gives softmax - onehot.

    With a = gamma*p_t*(1-p_t)^(gamma-1)*log(p_t) - (1-p_t)^gamma, the gradient
    is a * (onehot - p). At p_t == 1 the modulating factor and its derivative
    vanish, so the row gradient is exactly zero for gamma > 0.
    """
    n = probs.shape[0]
    rows = np.arange(n)
    pt = probs[rows, labels]
    onehot_minus_p = -probs.copy()
    onehot_minus_p[rows, labels] += 1.0
    if gamma == 0.0:
        return -onehot_minus_p
    one_minus = 1.0 - pt
    coeff = np.zeros(n)
    active = one_minus > 0.0
    log_pt = np.log(np.clip(pt, np.finfo(float).tiny, None))
    coeff[active] = (
        gamma * pt[active] * one_minus[active] ** (gamma - 1.0) * log_pt[active]
        - one_minus[active] ** gamma
    )
    return coeff[:, None] * onehot_minus_p


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# Backward, stage I


def stage1_backward(params: AdapterParams, bank: PromptBank, feat: np.ndarray,
                    label: int, head: HeadConfig) -> tuple[float, GradBundle]:
    """Cross-entropy through the branch path; gradients w.r.t. weight and gate."""
    loss, grads = stage1_backward_batch(
        params, bank, np.asarray(feat, float)[None, :], np.array([label]), head
    )
    return loss, grads


def stage1_backward_batch(params: AdapterParams, bank: PromptBank, feats: np.ndarray,
                          labels: np.ndarray, head: HeadConfig) -> tuple[float, GradBundle]:
    """Mean loss and mean gradients over a batch.

    Chain: logits -> unit feature u = f/|f| -> fused f -> (W, gate).
      d/du   = anchors^T (p - onehot) / tau
      d/df   = (d/du - u (u . d/du)) / |f|
      d/dW   = (1-s) * d/df outer x
      d/dgate= s(1-s) * sum d/df . (x - Wx)
    """
    feats = np.asarray(feats, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    _check_bank(bank, params.dim)
    for lab in labels:
        if not 0 <= lab < bank.num_classes:
            raise InvalidArgumentError(f"label {lab} out of range")
    n = feats.shape[0]
    s = sigmoid(params.gate)
    adapted = feats @ params.weight.T
    fused = feats + (1.0 - s) * (adapted - feats)
    units, norms = _normalize_rows(fused, "branch features")
    logits = (units @ bank.anchors.T) / head.tau

    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(lse - shifted[np.arange(n), labels]))

    d_logits = _softmax_rows(logits)
    d_logits[np.arange(n), labels] -= 1.0
    d_logits /= n

    d_units = (d_logits @ bank.anchors) / head.tau
    d_fused = (d_units - units * np.sum(d_units * units, axis=1, keepdims=True)) / norms
    d_weight = (1.0 - s) * (d_fused.T @ feats)
    d_gate = float(np.sum(d_fused * (feats - adapted)) * s * (1.0 - s))
    return loss, GradBundle(adapter_weight=d_weight, adapter_gate=d_gate)


# ---------------------------------------------------------------------------
# Backward, stage II (adapters are frozen inputs, never differentiated)


def stage2_backward(ens: EnsemblerParams, feat_w: np.ndarray, feat_r: np.ndarray,
                    logit_w: np.ndarray, logit_r: np.ndarray, bank: PromptBank,
                    label: int, head: HeadConfig, gamma: float) -> tuple[float, GradBundle]:
    """Focal loss through the ensemble path; gradients w.r.t. weight and bias only."""
    return stage2_backward_batch(
        ens,
        np.asarray(feat_w, float)[None, :], np.asarray(feat_r, float)[None, :],
        np.asarray(logit_w, float)[None, :], np.asarray(logit_r, float)[None, :],
        bank, np.array([label]), head, gamma,
    )


def stage2_backward_batch(ens: EnsemblerParams, feats_w: np.ndarray, feats_r: np.ndarray,
                          logits_w: np.ndarray, logits_r: np.ndarray, bank: PromptBank,
                          labels: np.ndarray, head: HeadConfig,
                          gamma: float) -> tuple[float, GradBundle]:
    if gamma < 0.0:
        raise InvalidArgumentError("gamma must be non-negative")
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.shape[0]
    rows = np.arange(n)

    if ens.mode == "logit":
        stacked = np.hstack([np.asarray(logits_w, float), np.asarray(logits_r, float)])
    else:
        stacked = np.hstack([np.asarray(feats_w, float), np.asarray(feats_r, float)])
    if stacked.shape[1] != ens.weight.shape[1]:
        raise ShapeError("branch outputs do not match the ensembler width")

    fused = stacked @ ens.weight.T + ens.bias
    if ens.mode == "logit":
        z = fused
    else:
        units, norms = _normalize_rows(fused, "fused features")
        z = (units @ bank.anchors.T) / head.tau

    log_probs = z - z.max(axis=1, keepdims=True)
    log_probs = log_probs - np.log(np.exp(log_probs).sum(axis=1, keepdims=True))
    probs = np.exp(log_probs)
    pt = probs[rows, labels]
    log_pt = log_probs[rows, labels]
    loss = float(np.mean(-((1.0 - pt) ** gamma) * log_pt))

    d_z = _focal_logit_grad(probs, labels, gamma) / n
    if ens.mode == "logit":
        d_fused = d_z
    else:
        d_units = (d_z @ bank.anchors) / head.tau
        d_fused = (d_units - units * np.sum(d_units * units, axis=1, keepdims=True)) / norms
    d_weight = d_fused.T @ stacked
    d_bias = d_fused.sum(axis=0)
    return loss, GradBundle(ensembler_weight=d_weight, ensembler_bias=d_bias)


# ---------------------------------------------------------------------------
# Linear-probe baseline


def linear_probe_train(train: EmbeddingSet, num_classes: int, hyper: SgdHyper,
                       epochs: int, batch_size: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Plain softmax-CE linear classifier on raw embeddings (no sampler, no adapter).

    Returns (weight C x d, bias C), deterministic given the seed.
    """
    if train.labels is None:
        raise InvalidDatasetError("linear probe needs labels")
    if num_classes < 2 or len(np.unique(train.labels)) < 2:
        raise InvalidDatasetError("linear probe needs at least two distinct classes")
    train.check_labels(num_classes)
    if batch_size < 1 or epochs < 0:
        raise InvalidConfigError("batch_size must be >= 1 and epochs >= 0")

    feats, labels = train.features, train.labels
    n, dim = feats.shape
    params = {"weight": np.zeros((num_classes, dim)), "bias": np.zeros(num_classes)}
    state = SgdState.init_like(params)
    rng = named_rng(seed, "shuffle", "probe")
    for epoch in range(epochs):
        lr = cosine_lr(epoch, hyper)
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            xb, yb = feats[idx], labels[idx]
            logits = xb @ params["weight"].T + params["bias"]
            probs = _softmax_rows(logits)
            probs[np.arange(len(idx)), yb] -= 1.0
            probs /= len(idx)
            grads = {"weight": probs.T @ xb, "bias": probs.sum(axis=0)}
            sgd_step(params, grads, state, hyper, lr)
    return params["weight"], params["bias"]


def probe_logits_batch(weight: np.ndarray, bias: np.ndarray, feats: np.ndarray) -> np.ndarray:
    return np.asarray(feats, float) @ weight.T + bias
