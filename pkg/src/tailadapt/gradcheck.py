"""Finite-difference verification of every analytic gradient.

Randomized small instances are swept over feature dims and class counts;
each parameter entry is perturbed by a central difference and compared to
the hand-derived gradient. Relative error uses a per-tensor floor of
1e-3 * max|g| so that the check stays meaningful for near-zero entries
without drowning in finite-difference roundoff.
"""

from dataclasses import dataclass

import numpy as np

from .dataio import PromptBank, make_prompt
from .model import (
    AdapterParams,
    EnsemblerParams,
    HeadConfig,
    ce_loss,
    branch_logits,
    ensemble_logits,
    focal_loss,
    stage1_backward,
    stage2_backward,
)
from .seeding import named_rng

DEFAULT_STEP = 1e-5
DEFAULT_TOL = 1e-5


@dataclass
class GradCheckResult:
    max_rel_err: float
    worst_case: str
    trials: int
    passed: bool


def central_difference(fn, array: np.ndarray, step: float = DEFAULT_STEP) -> np.ndarray:
    """Central finite differences of a scalar function, entry by entry."""
    grad = np.zeros_like(array, dtype=np.float64)
    flat = array.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.shape[0]):
        keep = flat[i]
        flat[i] = keep + step
        hi = fn()
        flat[i] = keep - step
        lo = fn()
        flat[i] = keep
        out[i] = (hi - lo) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    analytic = np.atleast_1d(np.asarray(analytic, dtype=np.float64))
    numeric = np.atleast_1d(np.asarray(numeric, dtype=np.float64))
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-12)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-3 * scale)
    return float((np.abs(analytic - numeric) / denom).max())


def _random_bank(rng: np.random.Generator, num_classes: int, dim: int) -> PromptBank:
    anchors = rng.standard_normal((num_classes, dim))
    names = [f"class{c}" for c in range(num_classes)]
    return PromptBank(
        anchors=anchors,
        prompts=[make_prompt("synthetic", n) for n in names],
        class_names=names,
    )


def check_stage1(rng: np.random.Generator, dim: int, num_classes: int,
                 step: float) -> list[tuple[str, float]]:
    bank = _random_bank(rng, num_classes, dim)
    head = HeadConfig(tau=float(rng.uniform(0.5, 2.0)))
    adapter = AdapterParams(
        weight=np.eye(dim) + 0.3 * rng.standard_normal((dim, dim)),
        gate=float(rng.uniform(-1.5, 1.5)),
    )
    feat = rng.standard_normal(dim)
    label = int(rng.integers(num_classes))

    _, grads = stage1_backward(adapter, bank, feat, label, head)

    def loss_now() -> float:
        return ce_loss(branch_logits(adapter, bank, feat, head), label)

    fd_weight = central_difference(loss_now, adapter.weight, step)
    gate_arr = np.array([adapter.gate])

    def loss_gate() -> float:
        probe = AdapterParams(weight=adapter.weight, gate=float(gate_arr[0]))
        return ce_loss(branch_logits(probe, bank, feat, head), label)

    fd_gate = central_difference(loss_gate, gate_arr, step)
    return [
        ("stage1/weight", relative_error(grads.adapter_weight, fd_weight)),
        ("stage1/gate", relative_error(np.array([grads.adapter_gate]), fd_gate)),
    ]


def check_stage2(rng: np.random.Generator, dim: int, num_classes: int, mode: str,
                 gamma: float, step: float) -> list[tuple[str, float]]:
    bank = _random_bank(rng, num_classes, dim)
    head = HeadConfig(tau=float(rng.uniform(0.5, 2.0)))
    n = num_classes if mode == "logit" else dim
    ens = EnsemblerParams(
        mode=mode,
        weight=0.5 * np.hstack([np.eye(n), np.eye(n)]) + 0.2 * rng.standard_normal((n, 2 * n)),
        bias=0.1 * rng.standard_normal(n),
    )
    feat_w = rng.standard_normal(dim)
    feat_r = rng.standard_normal(dim)
    logit_w = rng.standard_normal(num_classes)
    logit_r = rng.standard_normal(num_classes)
    label = int(rng.integers(num_classes))

    _, grads = stage2_backward(ens, feat_w, feat_r, logit_w, logit_r, bank, label, head, gamma)

    def loss_now() -> float:
        z = ensemble_logits(ens, feat_w, feat_r, logit_w, logit_r, bank, head)
        return focal_loss(z, label, gamma)

    fd_weight = central_difference(loss_now, ens.weight, step)
    fd_bias = central_difference(loss_now, ens.bias, step)
    return [
        (f"stage2/{mode}/weight", relative_error(grads.ensembler_weight, fd_weight)),
        (f"stage2/{mode}/bias", relative_error(grads.ensembler_bias, fd_bias)),
    ]


def run_gradcheck(trials: int = 20, seed: int = 0, step: float = DEFAULT_STEP,
                  tol: float = DEFAULT_TOL) -> GradCheckResult:
    """Sweep random instances over d in {4, 8}, C in {3, 5}, both stages and modes."""
    rng = named_rng(seed, "gradcheck")
    dims = (4, 8)
    class_counts = (3, 5)
    worst = ("", 0.0)
    for trial in range(trials):
        dim = dims[trial % len(dims)]
        num_classes = class_counts[(trial // len(dims)) % len(class_counts)]
        gamma = (0.0, 1.0, 2.0)[trial % 3]
        results = check_stage1(rng, dim, num_classes, step)
        results += check_stage2(rng, dim, num_classes, "logit", gamma, step)
        results += check_stage2(rng, dim, num_classes, "feature", gamma, step)
        for name, err in results:
            if err > worst[1]:
                worst = (f"trial {trial} {name} (d={dim}, C={num_classes})", err)
    return GradCheckResult(
        max_rel_err=worst[1], worst_case=worst[0], trials=trials, passed=worst[1] < tol
    )
