"""Classical reference estimators on the real model ``y = M h + n``.

Every iterative method returns ``(h, trace)`` where ``trace`` holds the
per-iteration NMSE against ``h_true`` when it is supplied (otherwise an empty
list), so iteration curves can be compared across methods.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .measurement import PINV_RCOND


@dataclass(frozen=True)
class BaselineConfig:
    max_iters: int = 200
    tolerance: float = 1e-8
    fista_lambda: float = 0.05       # relative to ||M^T y||_inf
    omp_sparsity: int | None = None  # None -> 2L
    omp_residual_tol: float | None = None
    oamp_sparsity: float = 0.1
    oamp_variance: float | None = None  # None -> matched to ||y||^2 energy
    oamp_iters: int = 30
    oamp_lmmse: bool = False

    def __post_init__(self):
        if self.max_iters < 1 or self.oamp_iters < 1:
            raise ValueError("iteration counts must be positive")
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")


def nmse(h_hat: np.ndarray, h_true: np.ndarray) -> float:
    return float(np.sum((h_hat - h_true) ** 2) / np.sum(h_true ** 2))


def _trace(h, h_true, out):
    if h_true is not None:
        out.append(nmse(h, h_true))


def ls_estimate(y: np.ndarray, M: np.ndarray) -> np.ndarray:
    """Minimum-norm least-squares solution ``M^+ y``."""
    return np.linalg.pinv(M, rcond=PINV_RCOND) @ y


def omp_estimate(y: np.ndarray, M: np.ndarray, k: int | None = None, residual_tol: float | None = None,
                 h_true: np.ndarray | None = None, return_residuals: bool = False):
    """Orthogonal matching pursuit.

    Stops after ``k`` atoms, or earlier once the residual norm drops to
    ``residual_tol`` when that is given. Columns are normalized for selection only.
    """
    n = M.shape[1]
    if k is None and residual_tol is None:
        raise ValueError("give a sparsity k or a residual tolerance")
    k_max = n if k is None else k
    if not 1 <= k_max <= n:
        raise ValueError(f"sparsity {k} outside 1..{n}")
    norms = np.linalg.norm(M, axis=0)
    norms[norms == 0] = 1.0
    h = np.zeros(n)
    support: list[int] = []
    residual = y.copy()
    residuals = [float(np.linalg.norm(residual))]
    trace: list[float] = []
    coef = np.zeros(0)
    for _ in range(k_max):
        if residual_tol is not None and residuals[-1] <= residual_tol:
            break
        corr = np.abs(M.T @ residual) / norms
        corr[support] = -1.0
        support.append(int(np.argmax(corr)))
        coef, *_ = np.linalg.lstsq(M[:, support], y, rcond=None)
        residual = y - M[:, support] @ coef
        residuals.append(float(np.linalg.norm(residual)))
        if h_true is not None:
            h_step = np.zeros(n)
            h_step[support] = coef
            trace.append(nmse(h_step, h_true))
    h[support] = coef
    if return_residuals:
        return h, trace, residuals
    return h, trace


def soft_threshold(x: np.ndarray, t: float) -> np.ndarray:
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


def lasso_objective(h, y, M, lam) -> float:
    r = y - M @ h
    return 0.5 * float(r @ r) + lam * float(np.sum(np.abs(h)))


def fista_estimate(y: np.ndarray, M: np.ndarray, lam: float, iters: int,
                   h_true: np.ndarray | None = None, step: float | None = None,
                   return_objective: bool = False):
    """FISTA on ``0.5||y - Mh||^2 + lam ||h||_1`` with fixed step ``1 / sigma_max(M)^2``."""
    if iters < 1:
        raise ValueError("iters must be positive")
    if step is None:
        step = 1.0 / np.linalg.norm(M, 2) ** 2
    n = M.shape[1]
    h = np.zeros(n)
    z = h.copy()
    t = 1.0
    trace: list[float] = []
    objective: list[float] = []
    for _ in range(iters):
        h_next = soft_threshold(z + step * (M.T @ (y - M @ z)), step * lam)
        t_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
        z = h_next + ((t - 1.0) / t_next) * (h_next - h)
        h, t = h_next, t_next
        _trace(h, h_true, trace)
        if return_objective:
            objective.append(lasso_objective(h, y, M, lam))
    if return_objective:
        return h, trace, objective
    return h, trace


def _gauss(x, var):
    return np.exp(-0.5 * x * x / var) / np.sqrt(2 * np.pi * var)


def bg_posterior(u: np.ndarray, tau2: float, sparsity: float, var: float):
    """Posterior mean and variance of a Bernoulli-Gaussian coefficient observed in N(0, tau2) noise."""
    tau2 = max(tau2, 1e-300)
    if sparsity >= 1.0:
        gain = var / (var + tau2)
        return gain * u, np.full_like(u, gain * tau2)
    # log-domain activity probability avoids underflow at small tau2
    log_on = math.log(sparsity) - 0.5 * np.log(var + tau2) - 0.5 * u * u / (var + tau2)
    log_off = math.log1p(-sparsity) - 0.5 * math.log(tau2) - 0.5 * u * u / tau2
    pi = 1.0 / (1.0 + np.exp(np.clip(log_off - log_on, -700, 700)))
    gain = var / (var + tau2)
    m_on = gain * u
    v_on = gain * tau2
    mean = pi * m_on
    second = pi * (v_on + m_on ** 2)
    return mean, np.maximum(second - mean ** 2, 0.0)


def oamp_bg_estimate(y: np.ndarray, M: np.ndarray, sparsity: float, prior_var: float,
                     noise_var: float, iters: int, h_true: np.ndarray | None = None,
                     W: np.ndarray | None = None, lmmse: bool = False):
    """OAMP with a Bernoulli-Gaussian prior.

    The linear step is the de-correlated pseudo-inverse estimator
    ``u = h + W (y - M h)`` (pass ``W`` to reuse a cached matrix) unless
    ``lmmse`` is set, in which case a trace-normalized LMMSE matrix is rebuilt
    each iteration. The non-linear step is the divergence-free form of the
    posterior mean; the returned estimate is the final posterior mean.
    """
    if not 0 < sparsity <= 1:
        raise ValueError("prior sparsity must lie in (0, 1]")
    if prior_var <= 0:
        raise ValueError("prior variance must be positive")
    rows, n = M.shape
    tr_mtm = float(np.sum(M * M))
    if W is None and not lmmse:
        pinv = np.linalg.pinv(M, rcond=PINV_RCOND)
        W = (n / float(np.trace(pinv @ M))) * pinv
    h = np.zeros(n)
    h_post = h
    trace: list[float] = []
    for _ in range(iters):
        resid = y - M @ h
        per_row = max(float(resid @ resid) / rows - noise_var, 1e-12)
        v2 = per_row * rows / tr_mtm
        if lmmse:
            w_hat = v2 * M.T @ np.linalg.inv(v2 * (M @ M.T) + noise_var * np.eye(rows))
            W = (n / float(np.trace(w_hat @ M))) * w_hat
        B = np.eye(n) - W @ M
        tau2 = (float(np.sum(B * B)) * v2 + float(np.sum(W * W)) * noise_var) / n
        u = h + W @ resid
        h_post, v_post = bg_posterior(u, tau2, sparsity, prior_var)
        div = float(np.mean(v_post)) / tau2
        if div >= 1.0 - 1e-12:
            h = h_post
        else:
            h = (h_post - div * u) / (1.0 - div)
        _trace(h_post, h_true, trace)
    return h_post, trace
