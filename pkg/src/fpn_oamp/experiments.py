"""Evaluation protocols: NMSE tables, convergence traces, far-field error, OoD suites, wideband reuse.

Every protocol returns a list of row tuples matching the header constants
below; :func:`write_csv` writes them with fixed float formatting so reruns in
deterministic mode are byte-identical.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__
from .baselines import fista_estimate, oamp_bg_estimate, omp_estimate, soft_threshold
from .config import ExperimentConfig, WidebandConfig, geometry_from_dict
from .fixed_point import contraction_apply, fixed_point_solve_batch
from .geometry import ArrayGeometry, ChannelConfig, farfield_error
from .measurement import (MeasurementOperator, NoiseSpec, PilotConfig, operator_seed_rng,
                          random_operator)
from .nle import NleParameters, init_params
from .training import Dataset, generate_dataset, nmse_db, self_adapt, train

log = logging.getLogger(__name__)

EVAL_HEADER = ("snr_db", "method", "nmse_db", "mean_iterations", "wall_time_s")
TRACE_HEADER = ("method", "iteration", "nmse_db", "residual")
FARFIELD_HEADER = ("config", "r_m", "error", "d_rayleigh_m")
OOD_HEADER = ("shift_id", "in_dist_nmse_db", "ood_nmse_db", "ood_selfadapt_nmse_db")
WIDEBAND_HEADER = ("k", "f_k_hz", "method", "nmse_db")

NMSE_FLOOR_DB = -200.0


# ---------------------------------------------------------------- setup

def make_operator(cfg: ExperimentConfig, realization: int = 0) -> MeasurementOperator:
    """Operator realization ``realization`` for the config's seed (0 is the training operator)."""
    rng = operator_seed_rng(cfg.seed) if realization == 0 else np.random.default_rng([cfg.seed, 2 ** 32 - 2,
                                                                                       realization])
    return random_operator(rng, cfg.geometry, cfg.pilot)


def make_splits(cfg: ExperimentConfig, op: MeasurementOperator) -> tuple[Dataset, Dataset]:
    tr = generate_dataset(cfg.seed, cfg.geometry, cfg.channel, op, cfg.n_train, cfg.snr_range, "train")
    va = generate_dataset(cfg.seed, cfg.geometry, cfg.channel, op, cfg.n_val, cfg.snr_range, "val")
    return tr, va


def make_test_set(cfg: ExperimentConfig, op: MeasurementOperator, snr_db: float | None = None,
             noise: NoiseSpec | None = None, n: int | None = None, freqs=None) -> Dataset:
    snr = (snr_db, snr_db) if snr_db is not None else cfg.snr_range
    return generate_dataset(cfg.seed, cfg.geometry, cfg.channel, op, n or cfg.n_test, snr, "test",
                            noise=noise, freqs=freqs)


def train_model(cfg: ExperimentConfig, op: MeasurementOperator,
                log_fn: Callable[[dict], None] | None = None) -> tuple[NleParameters, list[dict]]:
    tr, va = make_splits(cfg, op)
    theta0 = init_params(np.random.default_rng([cfg.seed, 11]), cfg.geometry, cfg.C, cfg.B,
                         cfg.train.skip_init)
    return train(cfg.train, tr, op, theta0, va, log_fn=log_fn)


# ---------------------------------------------------------------- estimators

def _noise_var(y: np.ndarray, snr_db: float) -> float:
    return float(np.mean(y ** 2)) / (1.0 + 10 ** (snr_db / 10))


def _oamp_prior(y, M, noise_var, sparsity):
    rows, n = M.shape
    energy = max(float(y @ y) - rows * noise_var, 1e-12) * n / float(np.sum(M * M))
    return energy / (n * sparsity)


@dataclass
class Estimates:
    h: np.ndarray
    iterations: np.ndarray
    wall_time: float
    traces: list = field(default_factory=list)


def run_method(method: str, cfg: ExperimentConfig, op: MeasurementOperator, ds: Dataset,
               theta: NleParameters | None = None, with_trace: bool = False) -> Estimates:
    """Estimate every channel in ``ds``; the clock covers the estimation only."""
    M, Y = op.M, ds.y
    bc = cfg.baselines
    traces = []
    if method == "fpn_oamp":
        if theta is None:
            raise ValueError("fpn_oamp needs a trained checkpoint")
        t0 = time.perf_counter()
        sol = fixed_point_solve_batch(theta, op, Y, cfg.epsilon, cfg.max_iters)
        return Estimates(sol.h_star, sol.iterations, time.perf_counter() - t0)
    if method == "ls":
        t0 = time.perf_counter()
        H = Y @ op.M_pinv.T
        return Estimates(H, np.ones(len(Y), dtype=int), time.perf_counter() - t0)
    out, iters = [], []
    t0 = time.perf_counter()
    for y, h, snr in zip(Y, ds.h, ds.snr_db):
        ref = h if with_trace else None
        if method == "omp":
            k = bc.omp_sparsity or 2 * cfg.channel.L
            est, tr = omp_estimate(y, M, k, bc.omp_residual_tol, ref)
            iters.append(k)
        elif method == "fista":
            lam = bc.fista_lambda * float(np.max(np.abs(M.T @ y)))
            est, tr = fista_estimate(y, M, lam, bc.max_iters, ref)
            iters.append(bc.max_iters)
        elif method == "oamp":
            nv = _noise_var(y, snr)
            var = bc.oamp_variance or _oamp_prior(y, M, nv, bc.oamp_sparsity)
            est, tr = oamp_bg_estimate(y, M, bc.oamp_sparsity, var, nv, bc.oamp_iters, ref,
                                       W=None if bc.oamp_lmmse else op.W, lmmse=bc.oamp_lmmse)
            iters.append(bc.oamp_iters)
        else:
            raise ValueError(f"unknown method {method!r}")
        out.append(est)
        traces.append(tr)
    return Estimates(np.array(out), np.array(iters), time.perf_counter() - t0, traces)


# ---------------------------------------------------------------- protocols

def eval_nmse(cfg: ExperimentConfig, op: MeasurementOperator, theta: NleParameters | None,
              snr_grid: Sequence[float] | None = None, methods: Sequence[str] | None = None,
              estimator_override: dict | None = None) -> list[tuple]:
    """Rows ``(snr_db, method, nmse_db, mean_iterations, wall_time_s)`` over the test split.

    ``estimator_override`` maps extra method names to callables ``ds -> h_hat``
    (used to inject reference estimators).
    """
    rows = []
    for snr in (snr_grid or cfg.snr_grid):
        ds = make_test_set(cfg, op, snr)
        for m in (methods or cfg.methods):
            if m == "fpn_oamp" and theta is None:
                continue
            est = run_method(m, cfg, op, ds, theta)
            rows.append((float(snr), m, nmse_db(est.h, ds.h), float(np.mean(est.iterations)), est.wall_time))
        for name, fn in (estimator_override or {}).items():
            t0 = time.perf_counter()
            h_hat = fn(ds)
            rows.append((float(snr), name, nmse_db(h_hat, ds.h), 1.0, time.perf_counter() - t0))
    return rows


def fpn_trajectory(theta: NleParameters, op: MeasurementOperator, Y: np.ndarray, h_true: np.ndarray,
                   iters: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample NMSE (linear) of iterates ``h_1..h_T`` and residuals ``||h_t - f(h_t)||``.

    Runs a fixed number of applications from ``h_0 = 0`` with no early stop.
    """
    H = np.zeros((len(Y), op.cols))
    nm = np.empty((len(Y), iters))
    res = np.empty((len(Y), iters))
    norm = np.sum(h_true ** 2, axis=1)
    H = contraction_apply(theta, op, H, Y)
    for t in range(iters):
        nm[:, t] = np.sum((H - h_true) ** 2, axis=1) / norm
        F = contraction_apply(theta, op, H, Y)
        res[:, t] = np.linalg.norm(H - F, axis=1)
        H = F
    return nm, res


def _db(x: float) -> float:
    return 10 * math.log10(x) if x > 1e-20 else NMSE_FLOOR_DB


def convergence_trace(cfg: ExperimentConfig, op: MeasurementOperator, theta: NleParameters | None,
                      snr_db: float = 15.0, iters: int | None = None,
                      methods: Sequence[str] = ("fpn_oamp", "fista", "oamp", "omp")) -> list[tuple]:
    """Rows ``(method, iteration, nmse_db, residual)`` averaged over the test split.

    The residual column is the fixed-point residual for FPN-OAMP and the
    measurement residual ``||y - M h_t||`` for the classical methods.
    """
    iters = iters or cfg.trace_iters
    ds = make_test_set(cfg, op, snr_db)
    rows = []
    for m in methods:
        if m == "fpn_oamp":
            if theta is None:
                continue
            nm, res = fpn_trajectory(theta, op, ds.y, ds.h, iters)
            for t in range(iters):
                rows.append((m, t + 1, _db(float(nm[:, t].mean())), float(res[:, t].mean())))
            continue
        if m == "fista":
            curves = []
            for y, h in zip(ds.y, ds.h):
                lam = cfg.baselines.fista_lambda * float(np.max(np.abs(op.M.T @ y)))
                curves.append(_fista_curve(y, op.M, lam, cfg.baselines.max_iters, h))
        elif m == "oamp":
            est = run_method(m, cfg, op, ds, with_trace=True)
            curves = [(np.array(tr), np.full(len(tr), np.nan)) for tr in est.traces]
        elif m == "omp":
            curves = []
            for y, h in zip(ds.y, ds.h):
                _, tr, r = omp_estimate(y, op.M, cfg.baselines.omp_sparsity or 2 * cfg.channel.L, None, h,
                                        return_residuals=True)
                curves.append((np.array(tr), np.array(r[1:])))
        else:
            raise ValueError(f"no trace for method {m!r}")
        nm = np.mean([c[0] for c in curves], axis=0)
        res = np.mean([c[1] for c in curves], axis=0)
        for t in range(len(nm)):
            rows.append((m, t + 1, _db(float(nm[t])), float(res[t])))
    return rows


def _fista_curve(y, M, lam, iters, h):
    step = 1.0 / np.linalg.norm(M, 2) ** 2
    x = np.zeros(M.shape[1])
    z, t = x.copy(), 1.0
    nm, res = [], []
    for _ in range(iters):
        x_next = soft_threshold(z + step * (M.T @ (y - M @ z)), step * lam)
        t_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
        z = x_next + ((t - 1.0) / t_next) * (x_next - x)
        x, t = x_next, t_next
        nm.append(float(np.sum((x - h) ** 2) / np.sum(h ** 2)))
        res.append(float(np.linalg.norm(y - M @ x)))
    return np.array(nm), np.array(res)


def farfield_error_curve(variants: dict[str, ArrayGeometry], multiples: Sequence[float],
                         phi: float = -0.7 * math.pi, theta: float = 0.4 * math.pi) -> list[tuple]:
    """Rows ``(config, r_m, error, d_rayleigh_m)`` at ``r = multiple * D_Rayleigh``."""
    rows = []
    for name, g in variants.items():
        d_r = g.rayleigh_distance
        for m in multiples:
            if m <= 0:
                raise ValueError("distance grid must be positive")
            r = m * d_r
            rows.append((name, r, farfield_error(g, phi, theta, r), d_r))
    return rows


# ---------------------------------------------------------------- OoD

@dataclass(frozen=True)
class Shift:
    """Target-distribution overrides relative to the source config."""

    id: str
    kind: str                          # "noise" | "channel" | "measurement"
    channel: dict = field(default_factory=dict)
    geometry: dict = field(default_factory=dict)
    pilot: dict = field(default_factory=dict)
    test_snr_db: float | None = None
    noise: dict | None = None
    self_adapt: bool = False

    def target(self, cfg: ExperimentConfig) -> ExperimentConfig:
        g = cfg.geometry
        geometry = g
        if self.geometry:
            lam = g.lambda_c
            base = {"S": g.S, "S_bar": g.S_bar, "f_c": g.f_c, "d_a_lambda": g.d_a / lam,
                    "d_sub_lambda": g.d_sub / lam}
            base.update(self.geometry)
            geometry = geometry_from_dict(base)
        channel = ChannelConfig.from_dict({**cfg.channel.to_dict(), **self.channel})
        pilot = PilotConfig(**{"Q": cfg.pilot.Q, "resolution": cfg.pilot.resolution, **self.pilot})
        snr_range = cfg.snr_range if self.test_snr_db is None else (self.test_snr_db, self.test_snr_db)
        train_cfg = cfg.train if self.test_snr_db is None else dataclasses.replace(cfg.train, snr_range=snr_range)
        return cfg.replace(geometry=geometry, channel=channel, pilot=pilot, snr_range=snr_range, train=train_cfg)


def default_shifts(cfg: ExperimentConfig) -> list[Shift]:
    """The noise, channel and measurement shifts of the OoD study, scaled to ``cfg``'s geometry."""
    d_r = cfg.geometry.rayleigh_distance
    S_bar = cfg.geometry.S_bar
    near = (round(0.496 * d_r, 4), round(0.992 * d_r, 4))
    far = (round(0.992 * d_r, 4), round(1.488 * d_r, 4))

    def q_for(rho):
        return max(1, round(rho * S_bar))

    return [
        Shift("snr_-5dB", "noise", test_snr_db=-5.0),
        Shift("snr_25dB", "noise", test_snr_db=25.0),
        Shift("impulsive", "noise", noise={"kind": "alpha_stable", "alpha": 1.7, "beta": 0.2, "gsnr_db": 15.0}),
        Shift("los_blockage", "channel", channel={"los_blocked": True}),
        Shift("L3", "channel", channel={"L": 3}),
        Shift("L7", "channel", channel={"L": 7}),
        Shift("near_only", "channel", channel={"nlos_r_range": list(near), "field_mode": "force_near"}),
        Shift("far_only", "channel", channel={"nlos_r_range": list(far), "field_mode": "force_far"}),
        Shift("d_sub_small", "channel", geometry={"d_sub_lambda": 4.0}),
        Shift("d_sub_large", "channel", geometry={"d_sub_lambda": 11.0}),
        Shift("d_a_fifth", "channel", geometry={"d_a_lambda": 0.2}),
        Shift("miscalibrated", "channel", channel={"gain_error_fraction": 0.2, "gain_error_var": 0.2}),
        Shift("rho_70", "measurement", pilot={"Q": q_for(0.7)}),
        Shift("rho_30", "measurement", pilot={"Q": q_for(0.3)}, self_adapt=True),
        Shift("rho_10", "measurement", pilot={"Q": q_for(0.1)}, self_adapt=True),
        Shift("infinite_resolution", "measurement", pilot={"resolution": "infinite"}),
    ]


def adapted_nmse(theta: NleParameters, op: MeasurementOperator, ds: Dataset, cfg: ExperimentConfig,
                 steps: int = 5, lr: float = 1e-3, histories: list | None = None) -> float:
    """NMSE (dB) after per-sample self-adaptation of ``theta`` on each received pilot."""
    out = []
    for y in ds.y:
        hist = [] if histories is not None else None
        th = self_adapt(theta, op, y, steps=steps, lr=lr, epsilon=cfg.epsilon, history=hist)
        out.append(fixed_point_solve_batch(th, op, y[None, :], cfg.epsilon, cfg.max_iters).h_star[0])
        if histories is not None:
            histories.append(hist)
    return nmse_db(np.array(out), ds.h)


def _shift_test(shift: Shift, tcfg: ExperimentConfig, op: MeasurementOperator, n: int, snr: float) -> Dataset:
    if shift.noise is not None:
        return make_test_set(tcfg, op, noise=NoiseSpec(**shift.noise), n=n)
    return make_test_set(tcfg, op, shift.test_snr_db if shift.test_snr_db is not None else snr, n=n)


def ood_suite(cfg: ExperimentConfig, source: NleParameters, shifts: Sequence[Shift],
              in_dist: Callable[[ExperimentConfig, MeasurementOperator], NleParameters] | dict | None = None,
              test_snr_db: float = 15.0, n_test: int | None = None, adapt_steps: int = 5,
              adapt_lr: float = 1e-3, adapt_samples: int | None = None) -> list[tuple]:
    """Rows ``(shift_id, in_dist_nmse_db, ood_nmse_db, ood_selfadapt_nmse_db)``.

    ``in_dist`` trains (callable) or looks up (dict by shift id) a model for
    the target distribution; missing entries leave the column NaN. The
    self-adaptation column is NaN unless the shift enables it.
    """
    rows = []
    for shift in shifts:
        try:
            tcfg = shift.target(cfg)
        except (ValueError, TypeError) as exc:
            log.warning("skipping shift %s: %s", shift.id, exc)
            continue
        op = make_operator(tcfg)
        ds = _shift_test(shift, tcfg, op, n_test or tcfg.n_test, test_snr_db)
        ood = nmse_db(run_method("fpn_oamp", tcfg, op, ds, source).h, ds.h)
        model = None
        if callable(in_dist):
            model = in_dist(tcfg, op)
        elif isinstance(in_dist, dict):
            model = in_dist.get(shift.id)
        ind = nmse_db(run_method("fpn_oamp", tcfg, op, ds, model).h, ds.h) if model is not None else math.nan
        adapted = math.nan
        if shift.self_adapt:
            sub = ds if adapt_samples is None else ds.subset(slice(0, adapt_samples))
            adapted = adapted_nmse(source, op, sub, tcfg, adapt_steps, adapt_lr)
        rows.append((shift.id, ind, ood, adapted))
    return rows


def fresh_operator_gaps(cfg: ExperimentConfig, theta: NleParameters, n_ops: int = 20,
                        snr_db: float = 15.0, n_test: int | None = None) -> tuple[float, list[float]]:
    """NMSE with the training operator and with ``n_ops`` fresh realizations (same channels)."""
    base_op = make_operator(cfg)
    ds = make_test_set(cfg, base_op, snr_db, n=n_test)
    base = nmse_db(run_method("fpn_oamp", cfg, base_op, ds, theta).h, ds.h)
    fresh = []
    for i in range(1, n_ops + 1):
        op = make_operator(cfg, realization=i)
        fresh.append(nmse_db(run_method("fpn_oamp", cfg, op, make_test_set(cfg, op, snr_db, n=n_test), theta).h,
                             ds.h))
    return base, fresh


# ---------------------------------------------------------------- wideband

def wideband_eval(cfg: ExperimentConfig, op: MeasurementOperator, theta: NleParameters | None,
                  wideband: WidebandConfig | None = None, snr_db: float = 15.0,
                  methods: Sequence[str] = ("fpn_oamp", "ls"), n_test: int | None = None) -> list[tuple]:
    """Rows ``(k, f_k_hz, method, nmse_db)``; one operator shared by all subcarriers."""
    wb = wideband or cfg.wideband
    freqs = wb.frequencies(cfg.geometry.f_c)
    ds = make_test_set(cfg, op, snr_db, n=n_test, freqs=freqs)
    K = len(freqs)
    rows = []
    for m in methods:
        if m == "fpn_oamp" and theta is None:
            continue
        est = run_method(m, cfg, op, ds, theta)
        for k in range(K):
            sel = slice(k, None, K)
            rows.append((k + 1, freqs[k], m, nmse_db(est.h[sel], ds.h[sel])))
    return rows


# ---------------------------------------------------------------- output

def _fmt(v) -> str:
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        return f"{v:.6f}" if abs(v) >= 1e-3 or v == 0 else f"{v:.6e}"
    return str(v)


def write_csv(path: str | Path, header: Sequence[str], rows: Sequence[tuple], deterministic: bool = False) -> None:
    """Write rows; deterministic mode blanks the wall-time column so reruns are byte-identical."""
    skip = header.index("wall_time_s") if deterministic and "wall_time_s" in header else None
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow(["" if i == skip else _fmt(v) for i, v in enumerate(row)])


def write_manifest(path: str | Path, cfg: ExperimentConfig, command: str, extra: dict | None = None,
                   deterministic: bool = False) -> None:
    manifest = {"command": command, "config_digest": cfg.digest(), "seed": cfg.seed,
                "package_version": __version__, "numpy": np.__version__,
                "python": platform.python_version(), "config": cfg.to_dict()}
    if not deterministic:
        manifest["timestamp"] = time.strftime("%Y-%m-%dT%H:%M:%S")
    manifest.update(extra or {})
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
