"""Contraction ``f = NLE o LE``, its fixed-point solver, and Lipschitz control."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .measurement import MeasurementOperator
from .nle import NleParameters, nle_forward

DEFAULT_EPSILON = 0.01
DEFAULT_MAX_ITERS = 50
SAFEGUARD_MARGIN = 1e-3


@dataclass
class FixedPointResult:
    h_star: np.ndarray
    iterations: int
    residual_trace: list[float] = field(default_factory=list)
    converged: bool = False
    h_trace: list[np.ndarray] | None = None


@dataclass(frozen=True)
class ContractionDiagnostics:
    lipschitz_estimate: float
    probes: int
    perturbation_scale: float


def le_apply(op: MeasurementOperator, h: np.ndarray, y: np.ndarray) -> np.ndarray:
    """De-correlated linear step ``u = h + W (y - M h)`` (row-batched inputs allowed)."""
    h = np.asarray(h, dtype=float)
    y = np.asarray(y, dtype=float)
    if h.shape[-1] != op.cols or y.shape[-1] != op.rows:
        raise ValueError(f"expected h[..., {op.cols}] and y[..., {op.rows}], "
                         f"got {h.shape} and {y.shape}")
    return h + (y - h @ op.M.T) @ op.W.T


def contraction_apply(theta: NleParameters, op: MeasurementOperator, h: np.ndarray, y: np.ndarray) -> np.ndarray:
    return nle_forward(theta, le_apply(op, h, y))


def iterate_to_fixed_point(fn: Callable[[np.ndarray], np.ndarray], h0: np.ndarray,
                           epsilon: float = DEFAULT_EPSILON, max_iters: int = DEFAULT_MAX_ITERS,
                           keep_iterates: bool = False) -> FixedPointResult:
    """Picard iteration ``h <- fn(h)`` until ``||h - fn(h)||_2 <= epsilon``.

    Each residual check costs one application of ``fn``; the trace records one
    residual per application. Hitting ``max_iters`` returns the last iterate
    with ``converged=False``.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    h = np.asarray(h0, dtype=float)
    trace: list[float] = []
    iterates = [h] if keep_iterates else None
    for _ in range(max_iters):
        fh = fn(h)
        res = float(np.linalg.norm(h - fh))
        trace.append(res)
        if res <= epsilon:
            return FixedPointResult(h, len(trace), trace, True, iterates)
        h = fh
        if keep_iterates:
            iterates.append(h)
    return FixedPointResult(h, len(trace), trace, False, iterates)


def fixed_point_solve(theta: NleParameters, op: MeasurementOperator, y: np.ndarray,
                      epsilon: float = DEFAULT_EPSILON, max_iters: int = DEFAULT_MAX_ITERS,
                      h0: np.ndarray | None = None, keep_iterates: bool = False) -> FixedPointResult:
    """Estimate the channel for one received pilot vector, starting from zero."""
    h0 = np.zeros(op.cols) if h0 is None else h0
    return iterate_to_fixed_point(lambda h: contraction_apply(theta, op, h, y), h0,
                                  epsilon, max_iters, keep_iterates)


@dataclass
class BatchSolve:
    h_star: np.ndarray        # (n, dim)
    iterations: np.ndarray    # (n,)
    converged: np.ndarray     # (n,)
    residuals: np.ndarray     # (n, max_iters), nan after stopping


def fixed_point_solve_batch(theta: NleParameters, op: MeasurementOperator, Y: np.ndarray,
                            epsilon: float = DEFAULT_EPSILON, max_iters: int = DEFAULT_MAX_ITERS,
                            callback: Callable[[int, np.ndarray], None] | None = None) -> BatchSolve:
    """Row-wise :func:`fixed_point_solve` that only keeps iterating unconverged rows.

    ``callback(t, H)`` sees the full iterate array after iteration ``t`` (1-based).
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    Y = np.atleast_2d(Y)
    n = Y.shape[0]
    H = np.zeros((n, op.cols))
    iters = np.zeros(n, dtype=int)
    done = np.zeros(n, dtype=bool)
    residuals = np.full((n, max_iters), np.nan)
    for t in range(max_iters):
        active = np.flatnonzero(~done)
        if active.size == 0:
            break
        fh = contraction_apply(theta, op, H[active], Y[active])
        res = np.linalg.norm(H[active] - fh, axis=1)
        residuals[active, t] = res
        iters[active] += 1
        stop = res <= epsilon
        done[active[stop]] = True
        move = active[~stop]
        H[move] = fh[~stop]
        if callback is not None:
            callback(t + 1, H)
    return BatchSolve(H, iters, done, residuals)


def lipschitz_estimate(nle: NleParameters | Callable[[np.ndarray], np.ndarray], h_batch: np.ndarray,
                       perturbation_scale: float = 1e-2, rng: np.random.Generator | None = None,
                       op: MeasurementOperator | None = None) -> ContractionDiagnostics:
    """Sampled gain ``sum ||g(h + d) - g(h)|| / sum ||d||`` of the denoiser ``g``.

    Perturbations are Gaussian with per-entry standard deviation
    ``perturbation_scale * rms(h_batch)``. ``op`` is accepted for call-site
    symmetry but unused: only the denoiser needs checking, the linear step has
    unit gain.
    """
    if perturbation_scale <= 0:
        raise ValueError("perturbation scale must be positive")
    h_batch = np.atleast_2d(np.asarray(h_batch, dtype=float))
    if h_batch.shape[0] == 0:
        raise ValueError("empty batch")
    rng = np.random.default_rng(0) if rng is None else rng
    fn = nle if callable(nle) else (lambda u: nle_forward(nle, u))
    rms = float(np.sqrt(np.mean(h_batch ** 2)))
    sigma = perturbation_scale * (rms if rms > 0 else 1.0)
    delta = rng.normal(0.0, sigma, size=h_batch.shape)
    num = np.linalg.norm(fn(h_batch + delta) - fn(h_batch), axis=1).sum()
    den = np.linalg.norm(delta, axis=1).sum()
    return ContractionDiagnostics(float(num / den), h_batch.shape[0], sigma)


def le_gain(op: MeasurementOperator) -> float:
    """Spectral norm of the linear step's Jacobian ``I - W M``."""
    return float(np.linalg.norm(np.eye(op.cols) - op.W @ op.M, 2))


def contraction_limit(op: MeasurementOperator) -> float:
    """Largest denoiser gain that keeps ``NLE o LE`` contractive for this operator.

    Equals one whenever the linear step is non-expansive (under-sampling ratio
    of at least one half); below that ratio ``eta > 2`` and the step expands
    the row space of ``M`` by ``eta - 1``.
    """
    gain = le_gain(op)
    return 1.0 if gain <= 1.0 + 1e-6 else 1.0 / gain


def safeguard_normalize(theta: NleParameters, L_hat: float, limit: float = 1.0) -> NleParameters:
    """Shrink the denoiser's end-to-end gain below ``limit`` when ``L_hat`` exceeds it.

    The global skip weight and the last 1x1 conv kernel are both scaled by
    ``(1 - margin) * limit / L_hat``; biases are left alone, so the map becomes
    ``c * g(u) + const`` and its gain scales by exactly ``c``.
    """
    if L_hat <= limit:
        return theta
    c = (1.0 - SAFEGUARD_MARGIN) * limit / L_hat
    out = theta.copy()
    out.tensors["skip"] = out.tensors["skip"] * c
    out.tensors["head2.w"] = out.tensors["head2.w"] * c
    return out
