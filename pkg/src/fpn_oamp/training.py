"""Datasets, NMAE losses, one-step and implicit gradients, Adam, training and self-adaptation."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable

import numpy as np

from .fixed_point import (DEFAULT_EPSILON, contraction_limit, fixed_point_solve_batch, le_apply,
                          lipschitz_estimate, safeguard_normalize)
from .geometry import ArrayGeometry, ChannelConfig, generate_channel
from .measurement import MeasurementOperator, NoiseSpec, angular_target, observe, sample_noise
from .nle import NleParameters, nle_backward, nle_forward, nle_forward_backward

log = logging.getLogger(__name__)

SPLIT_CODES = {"train": 0, "val": 1, "test": 2}
TRAIN_MAX_ITERS = 15


class NonContractiveError(RuntimeError):
    """The fixed-point Jacobian ``I - df/dh`` is (numerically) singular."""


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 128
    lr: float = 1e-3
    lr_decay_every: int = 30
    lr_decay_factor: float = 0.5
    gamma: float = 0.3
    snr_range: tuple[float, float] = (0.0, 20.0)
    epsilon: float = DEFAULT_EPSILON
    max_iters: int = TRAIN_MAX_ITERS
    eval_max_iters: int = 50
    lipschitz_scale: float = 1e-2
    # initial global-skip gain; below one so the untrained map already contracts
    skip_init: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")
        if self.snr_range[0] > self.snr_range[1]:
            raise ValueError("empty SNR range")

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_decay_factor ** (epoch // self.lr_decay_every)


@dataclass
class Dataset:
    geometry: ArrayGeometry
    operator_digest: str
    h: np.ndarray
    y: np.ndarray
    snr_db: np.ndarray
    split: str = "train"
    manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (len(self.h) == len(self.y) == len(self.snr_db)):
            raise ValueError("sample arrays have inconsistent lengths")

    def __len__(self) -> int:
        return len(self.h)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.geometry, self.operator_digest, self.h[idx], self.y[idx],
                       self.snr_db[idx], self.split, dict(self.manifest))


def generate_dataset(seed: int, geometry: ArrayGeometry, config: ChannelConfig, operator: MeasurementOperator,
                     n: int, snr_range: tuple[float, float] = (0.0, 20.0), split: str = "train",
                     noise: NoiseSpec | None = None, freqs: Iterable[float] | None = None) -> Dataset:
    """Simulate ``n`` (channel, pilot) pairs with per-sample SNR drawn from ``snr_range``.

    Each sample has its own RNG stream keyed by ``(seed, split, index)``.
    ``noise`` overrides the AWGN model (e.g. alpha-stable noise at a GSNR).
    With ``freqs`` each drawn channel contributes one sample per frequency.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    code = SPLIT_CODES.get(split, 3)
    freqs = None if freqs is None else list(freqs)
    hs, ys, snrs = [], [], []
    for i in range(n):
        rng = np.random.default_rng([seed, code, i])
        channels = generate_channel(rng, config, geometry, freqs)
        snr = float(rng.uniform(*snr_range))
        for ch in channels:
            h = angular_target(operator, ch.h_complex)
            y_clean = observe(operator, h)
            power = float(np.mean(y_clean ** 2))
            spec = NoiseSpec(snr_db=snr) if noise is None else noise
            ys.append(y_clean + sample_noise(rng, spec, power, operator.rows))
            hs.append(h)
            snrs.append(snr if spec.kind == "awgn" else spec.gsnr_db)
    manifest = {"geometry": geometry.to_dict(), "pilot": {"Q": operator.pilot.Q,
                                                          "resolution": operator.pilot.resolution},
                "channel": config.to_dict(), "snr_range": list(snr_range), "seed": seed, "split": split}
    return Dataset(geometry, operator.digest(), np.array(hs), np.array(ys), np.array(snrs), split, manifest)


@dataclass(frozen=True)
class LossReport:
    main: float
    aux: float
    gamma: float

    @property
    def total(self) -> float:
        return self.main + self.gamma * self.aux


def _loss_and_upstream(f_out, h_gt, y, M, gamma, main_weight=1.0):
    n = f_out.shape[0]
    r_main = h_gt - f_out
    r_aux = y - f_out @ M.T
    gt_norm = np.abs(h_gt).sum(axis=1)
    y_norm = np.abs(y).sum(axis=1)
    if main_weight and np.any(gt_norm == 0):
        raise ValueError("ground-truth channel with zero norm")
    main = float(np.mean(np.abs(r_main).sum(axis=1) / gt_norm)) if main_weight else 0.0
    aux = float(np.mean(np.abs(r_aux).sum(axis=1) / y_norm))
    up = -gamma * (np.sign(r_aux) / y_norm[:, None]) @ M / n
    if main_weight:
        up = up - main_weight * np.sign(r_main) / gt_norm[:, None] / n
    return LossReport(main, aux, gamma), up


def nmae_losses(f_out: np.ndarray, h_gt: np.ndarray, y: np.ndarray, operator: MeasurementOperator,
                gamma: float = 0.3) -> LossReport:
    """Batch NMAE pair evaluated on ``f_out = f(h*; y)`` (one extra application at the fixed point)."""
    f_out, h_gt, y = (np.atleast_2d(a) for a in (f_out, h_gt, y))
    if f_out.shape[0] == 0:
        raise ValueError("empty batch")
    return _loss_and_upstream(f_out, h_gt, y, operator.M, gamma)[0]


def one_step_gradient(theta: NleParameters, operator: MeasurementOperator, h_star: np.ndarray, y: np.ndarray,
                      h_gt: np.ndarray | None, gamma: float = 0.3) -> tuple[dict, LossReport]:
    """Gradient through a single application ``f(h*; y)`` with ``h*`` held constant.

    ``h_gt=None`` drops the supervised term (auxiliary loss only, weight ``gamma``).
    Returns ``(gradients, loss report)``.
    """
    h_star, y = np.atleast_2d(h_star), np.atleast_2d(y)
    u = le_apply(operator, h_star, y)
    box = {}

    def upstream(f_out):
        gt = np.zeros_like(f_out) if h_gt is None else np.atleast_2d(h_gt)
        rep, up = _loss_and_upstream(f_out, gt, y, operator.M, gamma, main_weight=0.0 if h_gt is None else 1.0)
        box["report"] = rep
        return up

    _, grads = nle_forward_backward(theta, u, upstream)
    return grads, box["report"]


def fixed_point_jacobian(theta: NleParameters, operator: MeasurementOperator, h_star: np.ndarray,
                         y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Dense ``df/dh`` at ``h*`` (rows from reverse passes) and the LE output ``u``."""
    u = le_apply(operator, h_star, y)
    dim = u.shape[-1]
    rows = nle_backward(theta, np.tile(u, (dim, 1)), np.eye(dim))["input"]
    j_le = np.eye(dim) - operator.W @ operator.M
    return rows @ j_le, u


def implicit_gradient_oracle(theta: NleParameters, operator: MeasurementOperator, h_star: np.ndarray,
                             y: np.ndarray, h_gt: np.ndarray, gamma: float = 0.3,
                             jacobian: Callable | None = None) -> tuple[dict, LossReport]:
    """Exact implicit-function gradient ``dL/df (I - df/dh*)^{-1} df/dtheta``; tiny problems only."""
    h_star, y, h_gt = (np.atleast_2d(a) for a in (h_star, y, h_gt))
    n = h_star.shape[0]
    f_out = nle_forward(theta, le_apply(operator, h_star, y))
    report, up = _loss_and_upstream(f_out, h_gt, y, operator.M, gamma)
    jac = fixed_point_jacobian if jacobian is None else jacobian
    total = None
    for i in range(n):
        J, u = jac(theta, operator, h_star[i], y[i])
        A = np.eye(J.shape[0]) - J
        if np.linalg.cond(A) > 1e12:
            raise NonContractiveError("I - df/dh is singular at the fixed point")
        w = np.linalg.solve(A.T, up[i])
        g = nle_backward(theta, u, w)
        total = g if total is None else {k: total[k] + g[k] for k in g if k != "input"}
    total.pop("input", None)
    return total, report


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(theta: NleParameters) -> AdamState:
    return AdamState({k: np.zeros_like(a) for k, a in theta.tensors.items()},
                     {k: np.zeros_like(a) for k, a in theta.tensors.items()})


def optimizer_step(state: AdamState, theta: NleParameters, grad: dict, lr: float) -> tuple[AdamState, NleParameters]:
    """Bias-corrected Adam update; returns new state and parameters, inputs untouched."""
    t = state.t + 1
    m, v, tensors = {}, {}, {}
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for k, p in theta.tensors.items():
        g = grad[k]
        m[k] = state.beta1 * state.m[k] + (1.0 - state.beta1) * g
        v[k] = state.beta2 * state.v[k] + (1.0 - state.beta2) * g * g
        tensors[k] = p - lr * (m[k] / c1) / (np.sqrt(v[k] / c2) + state.eps)
    new_theta = NleParameters(theta.S, theta.side, theta.C, theta.B, tensors, theta.version)
    return AdamState(m, v, t, state.beta1, state.beta2, state.eps), new_theta


def nmse_db(h_hat: np.ndarray, h_true: np.ndarray) -> float:
    """Dataset NMSE ``mean_i ||h_i - h_hat_i||^2 / ||h_i||^2`` in dB, floored at -200 dB."""
    h_hat, h_true = np.atleast_2d(h_hat), np.atleast_2d(h_true)
    per = np.sum((h_hat - h_true) ** 2, axis=1) / np.sum(h_true ** 2, axis=1)
    value = float(np.mean(per))
    return 10 * math.log10(value) if value > 1e-20 else -200.0


def evaluate(theta: NleParameters, operator: MeasurementOperator, dataset: Dataset,
             epsilon: float = DEFAULT_EPSILON, max_iters: int = 50, gamma: float = 0.3) -> dict:
    sol = fixed_point_solve_batch(theta, operator, dataset.y, epsilon, max_iters)
    f_out = nle_forward(theta, le_apply(operator, sol.h_star, dataset.y))
    rep = nmae_losses(f_out, dataset.h, dataset.y, operator, gamma)
    return {"nmse_db": nmse_db(sol.h_star, dataset.h), "nmae": rep.main, "h_star": sol.h_star,
            "iterations": sol.iterations, "converged": sol.converged}


def train(config: TrainConfig, dataset: Dataset, operator: MeasurementOperator, theta: NleParameters,
          val: Dataset | None = None, log_fn: Callable[[dict], None] | None = None,
          batch_log_fn: Callable[[dict], None] | None = None) -> tuple[NleParameters, list[dict]]:
    """Offline training with one-step gradients and the contraction safeguard.

    Returns the parameters with the best validation NMSE (last epoch when no
    validation set is given) and the per-epoch log records.
    """
    for d in (dataset, val):
        if d is not None and d.operator_digest != operator.digest():
            raise ValueError(f"{d.split} dataset was generated with a different measurement operator")
    rng = np.random.default_rng([config.seed, 7])
    limit = contraction_limit(operator)
    state = adam_init(theta)
    records: list[dict] = []
    best, best_nmse = theta, math.inf
    n = len(dataset)
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        order = rng.permutation(n)
        losses, l_hats, safeguards = [], [], 0
        for start in range(0, n, config.batch_size):
            idx = np.sort(order[start:start + config.batch_size])
            y, h_gt = dataset.y[idx], dataset.h[idx]
            sol = fixed_point_solve_batch(theta, operator, y, config.epsilon, config.max_iters)
            grads, rep = one_step_gradient(theta, operator, sol.h_star, y, h_gt, config.gamma)
            state, theta = optimizer_step(state, theta, grads, lr)
            diag = lipschitz_estimate(theta, sol.h_star, config.lipschitz_scale, rng)
            if diag.lipschitz_estimate > limit:
                theta = safeguard_normalize(theta, diag.lipschitz_estimate, limit)
                safeguards += 1
            losses.append(rep.total)
            l_hats.append(diag.lipschitz_estimate)
            if batch_log_fn is not None:
                batch_log_fn({"epoch": epoch, "main": rep.main, "aux": rep.aux, "total": rep.total,
                              "gamma": rep.gamma, "L_hat": diag.lipschitz_estimate,
                              "mean_iters": float(sol.iterations.mean())})
        record = {"epoch": epoch + 1, "train_loss": float(np.mean(losses)), "lr": lr,
                  "L_hat_batch_max": float(np.max(l_hats)), "safeguard_steps": safeguards}
        if val is not None:
            ev = evaluate(theta, operator, val, config.epsilon, config.eval_max_iters, config.gamma)
            if not math.isfinite(ev["nmse_db"]):
                raise TrainingDivergedError(f"validation NMSE is not finite at epoch {epoch + 1}")
            diag = lipschitz_estimate(theta, ev["h_star"], config.lipschitz_scale, rng)
            record.update(val_nmae=ev["nmae"], val_nmse_db=ev["nmse_db"], L_hat=diag.lipschitz_estimate,
                          val_mean_iters=float(np.mean(ev["iterations"])))
            if ev["nmse_db"] < best_nmse:
                best, best_nmse = theta, ev["nmse_db"]
        else:
            best = theta
        if diag.lipschitz_estimate >= limit:
            log.warning("epoch %d: Lipschitz estimate %.4f >= %.4f", epoch + 1, diag.lipschitz_estimate, limit)
        records.append(record)
        log.info(json.dumps(record))
        if log_fn is not None:
            log_fn(record)
    return best, records


def self_adapt(theta: NleParameters, operator: MeasurementOperator, y: np.ndarray, steps: int = 5,
               lr: float = 1e-3, epsilon: float = DEFAULT_EPSILON, max_iters: int = TRAIN_MAX_ITERS,
               history: list | None = None, lipschitz_scale: float = 1e-2, probes: int = 8,
               rng: np.random.Generator | None = None) -> NleParameters:
    """Unsupervised fine-tuning on the pilot-consistency loss of one received signal.

    Each step re-solves for ``h*``, takes an Adam step along the one-step
    gradient of the auxiliary NMAE, then applies the same Lipschitz safeguard
    as offline training against this operator's contraction limit. ``history``
    (if given) collects the auxiliary loss seen before each step plus the final
    value.
    """
    y = np.atleast_2d(y)
    state = adam_init(theta)
    limit = contraction_limit(operator) if steps else 1.0
    rng = np.random.default_rng(0) if rng is None else rng
    for _ in range(steps):
        sol = fixed_point_solve_batch(theta, operator, y, epsilon, max_iters)
        grads, rep = one_step_gradient(theta, operator, sol.h_star, y, None, gamma=1.0)
        if history is not None:
            history.append(rep.aux)
        state, theta = optimizer_step(state, theta, grads, lr)
        diag = lipschitz_estimate(theta, np.repeat(sol.h_star, probes, axis=0), lipschitz_scale, rng)
        theta = safeguard_normalize(theta, diag.lipschitz_estimate, limit)
    if history is not None and steps:
        sol = fixed_point_solve_batch(theta, operator, y, epsilon, max_iters)
        f_out = nle_forward(theta, le_apply(operator, sol.h_star, y))
        history.append(_loss_and_upstream(f_out, np.zeros_like(f_out), y, operator.M, 1.0, 0.0)[0].aux)
    return theta


def config_dict(config: TrainConfig) -> dict:
    out = asdict(config)
    out["snr_range"] = list(config.snr_range)
    return out
