"""Soft-thresholding, the LASSO objective and plain ISTA, matrix-free.

Operators are anything scipy's ``aslinearoperator`` accepts (dense arrays,
``SliceConvModel.operator()``, ``CompressedModel.operator()``). A 2-D ``y``
is a batch of problems, one per row.
"""
import logging
from typing import List, Optional, Tuple

import numpy as np
from scipy.sparse.linalg import LinearOperator, aslinearoperator

from config_manager import ISTA_PRESETS
from errors import ShapeError
from slice_model import estimate_lipschitz

logger = logging.getLogger(__name__)

DEFAULT_LAMBDA_FACTOR = 0.1


def _as_op(op) -> LinearOperator:
    return op if isinstance(op, LinearOperator) else aslinearoperator(op)


def _fwd(op: LinearOperator, x: np.ndarray) -> np.ndarray:
    if x.shape[-1] != op.shape[1]:
        raise ShapeError(f"operator expects length {op.shape[1]}, got shape {x.shape}")
    return op.matvec(x) if x.ndim == 1 else op.matmat(x.T).T


def _adj(op: LinearOperator, y: np.ndarray) -> np.ndarray:
    if y.shape[-1] != op.shape[0]:
        raise ShapeError(f"operator adjoint expects length {op.shape[0]}, got shape {y.shape}")
    return op.rmatvec(y) if y.ndim == 1 else op.rmatmat(y.T).T


def _per_row(lam, y: np.ndarray):
    lam = np.asarray(lam, dtype=np.float64)
    return lam[..., np.newaxis] if lam.ndim and y.ndim > 1 else lam


def soft_threshold(v, theta):
    """sign(v) * max(|v| - theta, 0); exact zeros where |v| <= theta."""
    theta = np.asarray(theta, dtype=np.float64)
    if np.any(theta < 0):
        raise ValueError("threshold must be non-negative")
    v = np.asarray(v, dtype=np.float64)
    return np.sign(v) * np.maximum(np.abs(v) - theta, 0.0)


def lasso_objective(x, y, op, lam):
    """0.5 ||Ax - y||^2 + lam ||x||_1 (one value per row for a batch)."""
    op = _as_op(op)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    r = _fwd(op, x) - y
    val = 0.5 * np.sum(r * r, axis=-1) + np.asarray(lam, dtype=np.float64) * np.sum(np.abs(x), axis=-1)
    return float(val) if np.ndim(val) == 0 else val


def default_lambda(y, op, factor: float = DEFAULT_LAMBDA_FACTOR):
    """factor * ||A^T y||_inf, per problem."""
    aty = _adj(_as_op(op), np.asarray(y, dtype=np.float64))
    lam = factor * np.max(np.abs(aty), axis=-1)
    return float(lam) if np.ndim(lam) == 0 else lam


def ista_step(x, y, op, lam, L: float):
    if not L > 0.0:
        raise ValueError("Lipschitz constant must be positive")
    op = _as_op(op)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    grad = _adj(op, _fwd(op, x) - y)
    return soft_threshold(x - grad / L, _per_row(lam, y) / L)


def ista_solve(y, op, lam=None, L: Optional[float] = None, max_iters: int = 200,
               stop_tol: float = 0.0) -> Tuple[np.ndarray, List[float]]:
    """ISTA from x = 0. Returns (x_hat, objective trace); trace[0] is the objective at x = 0.

    For a batch the trace holds the summed objective. Stops early when the relative
    objective change drops below stop_tol (0 disables) or the objective reaches 0.
    """
    op = _as_op(op)
    y = np.asarray(y, dtype=np.float64)
    if lam is None:
        lam = default_lambda(y, op)
    if L is None:
        L = estimate_lipschitz(op).value
    x = np.zeros(y.shape[:-1] + (op.shape[1],))
    trace = [float(np.sum(lasso_objective(x, y, op, lam)))]
    for it in range(1, max_iters + 1):
        x = ista_step(x, y, op, lam, L)
        f = float(np.sum(lasso_objective(x, y, op, lam)))
        prev = trace[-1]
        trace.append(f)
        if prev == 0.0:
            logger.debug("ISTA: zero objective, stopping after %d iterations", it)
            break
        if stop_tol > 0.0 and abs(prev - f) < stop_tol * abs(prev):
            logger.debug("ISTA: relative change below %.1e after %d iterations", stop_tol, it)
            break
    return x, trace


def ista_preset(name: str) -> int:
    """Iteration count of a named preset (ista-200, ista-500)."""
    key = name.lower()
    if key not in ISTA_PRESETS:
        raise ValueError(f"unknown ISTA preset {name!r} (choose from {', '.join(ISTA_PRESETS)})")
    return ISTA_PRESETS[key]
