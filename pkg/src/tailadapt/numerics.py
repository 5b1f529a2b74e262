"""Dense float64 linear algebra and numerically stable elementwise primitives.

Matrices are 2-D row-major float64 numpy arrays, vectors are 1-D float64
arrays. All functions are pure and safe for concurrent use.
"""

import numpy as np

from .errors import DegenerateVectorError, ShapeError

# Norms at or below this are treated as zero.
DEGENERATE_NORM = 1e-12


def as_matrix(data) -> np.ndarray:
    m = np.asarray(data, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got ndim={m.ndim}")
    return m


def as_vector(data) -> np.ndarray:
    v = np.asarray(data, dtype=np.float64)
    if v.ndim != 1:
        raise ShapeError(f"expected a 1-D vector, got ndim={v.ndim}")
    return v


def matvec(matrix, vector) -> np.ndarray:
    """Matrix-vector product."""
    m = as_matrix(matrix)
    v = as_vector(vector)
    if m.shape[1] != v.shape[0]:
        raise ShapeError(f"matvec: {m.shape} x {v.shape} do not agree")
    return m @ v


def l2_normalize(vector) -> np.ndarray:
    """Scale to unit Euclidean norm; rejects near-zero vectors."""
    v = as_vector(vector)
    norm = float(np.linalg.norm(v))
    if norm <= DEGENERATE_NORM:
        raise DegenerateVectorError(f"norm {norm:.3e} <= {DEGENERATE_NORM}")
    return v / norm


def cosine_sim(u, v) -> float:
    """Cosine similarity, clamped to [-1, 1] after division."""
    a = as_vector(u)
    b = as_vector(v)
    if a.shape != b.shape:
        raise ShapeError(f"cosine_sim: dims {a.shape[0]} != {b.shape[0]}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na <= DEGENERATE_NORM or nb <= DEGENERATE_NORM:
        raise DegenerateVectorError("cosine_sim of a near-zero vector")
    return float(np.clip(float(a @ b) / (na * nb), -1.0, 1.0))


def sigmoid(x: float) -> float:
    """Logistic function, overflow-free for |x| up to at least 1e3."""
    if x >= 0.0:
        return 1.0 / (1.0 + np.exp(-x))
    e = np.exp(x)
    return float(e / (1.0 + e))


def stable_softmax(logits) -> np.ndarray:
    """Softmax with max-subtraction; output sums to 1 and is shift-invariant.

    Entries that underflow are floored at the smallest positive normal float
    so the output is strictly positive; the sum stays within 1e-9 of 1.
    """
    z = as_vector(logits)
    if z.shape[0] < 1:
        raise ShapeError("softmax needs at least one entry")
    if not np.isfinite(z).all():
        raise ShapeError("softmax input must be finite")
    e = np.exp(z - z.max())
    return np.maximum(e / e.sum(), np.finfo(np.float64).tiny)


def log_softmax(logits) -> np.ndarray:
    """log(softmax(z)) computed via the stable log-sum-exp route."""
    z = as_vector(logits)
    shifted = z - z.max()
    return shifted - np.log(np.exp(shifted).sum())
