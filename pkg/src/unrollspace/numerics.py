"""Dense numeric kernels shared across the toolkit.

Neuron nonlinearities, the squared spectral norm used for step sizes, and a
central-difference gradient estimator used as the oracle in gradient checks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SOFT_THRESHOLD = "soft_threshold"
RELU = "relu"
LEAKY_RELU = "leaky_relu"
NEURON_TAGS = (SOFT_THRESHOLD, RELU, LEAKY_RELU)

LEAKY_SLOPE = 0.1


@dataclass(frozen=True)
class NeuronType:
    """A per-layer activation choice; ``slope`` only matters for leaky_relu."""

    tag: str
    slope: float = LEAKY_SLOPE

    def __post_init__(self):
        if self.tag not in NEURON_TAGS:
            raise ValueError(f"unknown neuron tag {self.tag!r}")


def _tag_of(t) -> str:
    return t.tag if isinstance(t, NeuronType) else t


def soft_threshold(x, theta):
    """Componentwise shrinkage sign(x) * max(0, |x| - theta)."""
    if theta < 0:
        raise ValueError(f"theta must be >= 0, got {theta}")
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.maximum(np.abs(x) - theta, 0.0)


def apply_neuron(t, x, theta):
    """Apply a neuron of type ``t``; relu/leaky_relu ignore ``theta``."""
    tag = _tag_of(t)
    x = np.asarray(x, dtype=np.float64)
    if tag == SOFT_THRESHOLD:
        return soft_threshold(x, theta)
    if tag == RELU:
        return np.maximum(x, 0.0)
    if tag == LEAKY_RELU:
        return np.where(x > 0.0, x, LEAKY_SLOPE * x)
    raise ValueError(f"unknown neuron tag {tag!r}")


def neuron_input_derivative(t, u, theta):
    """d output / d pre-activation, evaluated elementwise at u.

    The soft-threshold subgradient on the closed shrinkage region |u| <= theta
    is taken as 0; relu uses 0 at u == 0.
    """
    tag = _tag_of(t)
    if tag == SOFT_THRESHOLD:
        return (np.abs(u) > theta).astype(np.float64)
    if tag == RELU:
        return (u > 0.0).astype(np.float64)
    if tag == LEAKY_RELU:
        return np.where(u > 0.0, 1.0, LEAKY_SLOPE)
    raise ValueError(f"unknown neuron tag {tag!r}")


def neuron_theta_derivative(t, u, theta):
    """d output / d theta; identically zero for the threshold-free neurons."""
    tag = _tag_of(t)
    if tag == SOFT_THRESHOLD:
        return np.where(np.abs(u) > theta, -np.sign(u), 0.0)
    return np.zeros_like(u)


def spectral_sq_norm(D, tol: float = 1e-10, max_iter: int = 10000) -> float:
    """Largest eigenvalue of D^T D via power iteration on the Gram operator.

    Deterministic: starts from the normalized all-ones vector.  Raises
    ArithmeticError instead of returning a guess if the Rayleigh quotient has
    not stabilized to relative tolerance ``tol`` within ``max_iter`` sweeps.
    """
    D = np.asarray(D, dtype=np.float64)
    if D.ndim != 2 or D.size == 0:
        raise ValueError("D must be a non-empty 2-d matrix")
    if not np.any(D):
        raise ValueError("D must be nonzero")
    v = np.ones(D.shape[1]) / np.sqrt(D.shape[1])
    lam_prev = 0.0
    for _ in range(max_iter):
        w = D.T @ (D @ v)
        lam = float(v @ w)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            # all-ones start landed in the null space; restart deterministically
            v = np.zeros(D.shape[1])
            v[0] = 1.0
            lam_prev = 0.0
            continue
        v = w / nw
        if abs(lam - lam_prev) <= tol * max(abs(lam), 1e-300):
            return lam
        lam_prev = lam
    raise ArithmeticError(f"power iteration did not converge in {max_iter} iterations")


def finite_diff_grad(f, p, eps: float):
    """Central-difference gradient of scalar ``f`` at parameter vector ``p``.

    (f(p + eps*e_i) - f(p - eps*e_i)) / (2 eps) for every coordinate.  Kept
    deliberately independent of any analytic backward pass it is used to check.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    p = np.asarray(p, dtype=np.float64)
    grad = np.empty_like(p)
    flat = p.ravel()
    for i in range(flat.size):
        bump = flat.copy()
        bump[i] = flat[i] + eps
        f_plus = float(f(bump.reshape(p.shape)))
        bump[i] = flat[i] - eps
        f_minus = float(f(bump.reshape(p.shape)))
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise ArithmeticError(f"non-finite objective at coordinate {i}")
        grad.ravel()[i] = (f_plus - f_minus) / (2.0 * eps)
    return grad
