"""Classical iterative baselines: ISTA and FISTA on the LASSO objective.

Both solvers operate on batches (columns of ``b``) and record the full
iterate trace, which doubles as the equivalence oracle for unrolled networks
at their analytic initialization.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import soft_threshold, spectral_sq_norm


@dataclass
class SolverTrace:
    """Iterates x^(0..K) plus the LASSO objective at each of them."""

    iterates: list = field(default_factory=list)
    objectives: list = field(default_factory=list)


def _as_batch(b):
    b = np.asarray(b, dtype=np.float64)
    if b.ndim == 1:
        return b[:, None]
    if b.ndim != 2:
        raise ValueError("b must be a vector or a matrix of column samples")
    return b


def lasso_objective(D, b, x, lam: float) -> float:
    """0.5 * ||b - Dx||_2^2 + lam * ||x||_1, summed over batch columns."""
    if lam < 0:
        raise ValueError("lam must be >= 0")
    D = np.asarray(D, dtype=np.float64)
    b = _as_batch(b)
    x = _as_batch(x)
    if D.shape[0] != b.shape[0] or D.shape[1] != x.shape[0] or b.shape[1] != x.shape[1]:
        raise ValueError(
            f"shape mismatch: D {D.shape}, b {b.shape}, x {x.shape}"
        )
    resid = b - D @ x
    return 0.5 * float(np.sum(resid * resid)) + lam * float(np.sum(np.abs(x)))


def ista(D, b, lam: float, K: int, L: float | None = None) -> SolverTrace:
    """Proximal gradient on the LASSO from x^(0) = 0 with step 1/L.

    x^(k+1) = eta_{lam/L}( x^(k) + D^T (b - D x^(k)) / L ).  ``L`` defaults to
    the squared spectral norm of ``D``; the objective is non-increasing along
    the trace.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    D = np.asarray(D, dtype=np.float64)
    b = _as_batch(b)
    if L is None:
        L = spectral_sq_norm(D)
    if L <= 0:
        raise ValueError(f"L must be positive, got {L}")
    x = np.zeros((D.shape[1], b.shape[1]))
    trace = SolverTrace(iterates=[x], objectives=[lasso_objective(D, b, x, lam)])
    for _ in range(K):
        resid = b - D @ x
        x = soft_threshold(x + (D.T @ resid) / L, lam / L)
        trace.iterates.append(x)
        trace.objectives.append(lasso_objective(D, b, x, lam))
    return trace


def fista(D, b, lam: float, K: int, L: float | None = None) -> SolverTrace:
    """Accelerated proximal gradient with the t-sequence momentum.

    t^(k+1) = (1 + sqrt(1 + 4 t^(k)^2)) / 2,
    y^(k+1) = x^(k) + ((t^(k)-1)/t^(k+1)) (x^(k) - x^(k-1)),
    x^(k+1) = eta_{lam/L}( y^(k+1) + D^T (b - D y^(k+1)) / L ),
    with x^(0) = x^(-1) = 0 and t^(1) = 1.  Not monotone in objective.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    D = np.asarray(D, dtype=np.float64)
    b = _as_batch(b)
    if L is None:
        L = spectral_sq_norm(D)
    if L <= 0:
        raise ValueError(f"L must be positive, got {L}")
    x = np.zeros((D.shape[1], b.shape[1]))
    x_prev = x
    t = 1.0
    trace = SolverTrace(iterates=[x], objectives=[lasso_objective(D, b, x, lam)])
    for _ in range(K):
        t_next = (1.0 + np.sqrt(1.0 + 4.0 * t * t)) / 2.0
        y = x + ((t - 1.0) / t_next) * (x - x_prev)
        resid = b - D @ y
        x_new = soft_threshold(y + (D.T @ resid) / L, lam / L)
        x_prev, x, t = x, x_new, t_next
        trace.iterates.append(x)
        trace.objectives.append(lasso_objective(D, b, x, lam))
    return trace


def fista_t_sequence(K: int) -> list:
    """The momentum scalars t^(1..K): 1, (1+sqrt(5))/2, ..."""
    ts = [1.0]
    for _ in range(K - 1):
        ts.append((1.0 + np.sqrt(1.0 + 4.0 * ts[-1] ** 2)) / 2.0)
    return ts
