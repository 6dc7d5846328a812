"""Pilot combining, DFT dictionary, the real-valued measurement operator and noise."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .geometry import ArrayGeometry, complex_to_real

Resolution = Literal["one_bit", "infinite"]

PINV_RCOND = 1e-12


@dataclass(frozen=True)
class PilotConfig:
    Q: int
    resolution: Resolution = "one_bit"

    def __post_init__(self):
        if self.Q < 1:
            raise ValueError("Q must be at least 1")
        if self.resolution not in ("one_bit", "infinite"):
            raise ValueError(f"unknown combiner resolution {self.resolution!r}")

    def rho(self, geometry: ArrayGeometry) -> float:
        """Under-sampling ratio ``S*Q / (S*S_bar)``."""
        value = geometry.S * self.Q / geometry.n_antennas
        if not 0 < value <= 1:
            raise ValueError(f"Q={self.Q} gives rho={value}, outside (0, 1]")
        return value


def dft_matrix(n: int) -> np.ndarray:
    k = np.arange(n)
    return np.exp(-2j * np.pi * np.outer(k, k) / n) / math.sqrt(n)


def dft_dictionary(geometry: ArrayGeometry) -> np.ndarray:
    """Block-diagonal dictionary, one 2-D DFT block ``U = D kron D`` per subarray."""
    d = dft_matrix(geometry.side)
    u = np.kron(d, d)
    f = np.zeros((geometry.n_antennas, geometry.n_antennas), dtype=complex)
    for s in range(geometry.S):
        sl = slice(s * geometry.S_bar, (s + 1) * geometry.S_bar)
        f[sl, sl] = u
    return f


def sample_combiners(rng: np.random.Generator, geometry: ArrayGeometry, pilot: PilotConfig) -> np.ndarray:
    """Analog combiner vectors, shape ``(Q, S, S_bar)``.

    Entry ``[q, s]`` is the component vector ``w_{s,q}`` of slot ``q``; the full
    ``W_RF,q`` is ``blkdiag(w_{1,q}, ..., w_{S,q})`` and the digital combiner is I.
    """
    shape = (pilot.Q, geometry.S, geometry.S_bar)
    scale = 1.0 / math.sqrt(geometry.S_bar)
    if pilot.resolution == "one_bit":
        return scale * rng.choice(np.array([-1.0, 1.0]), size=shape).astype(complex)
    return scale * np.exp(1j * rng.uniform(0.0, 2 * np.pi, size=shape))


def combiner_matrix(combiners: np.ndarray, q: int) -> np.ndarray:
    """Dense ``W_RF,q`` of shape ``(S*S_bar, S)``."""
    _, S, S_bar = combiners.shape
    w = np.zeros((S * S_bar, S), dtype=complex)
    for s in range(S):
        w[s * S_bar:(s + 1) * S_bar, s] = combiners[q, s]
    return w


def real_operator(m_complex: np.ndarray) -> np.ndarray:
    """``[[Re, -Im], [Im, Re]]`` block form acting on stacked real vectors."""
    re, im = m_complex.real, m_complex.imag
    return np.block([[re, -im], [im, re]])


@dataclass(frozen=True, eq=False)
class MeasurementOperator:
    """Immutable bundle of ``F``, ``M_bar``, ``M`` and the cached LE matrix ``W = eta M^+``."""

    geometry: ArrayGeometry
    pilot: PilotConfig
    combiners: np.ndarray
    F: np.ndarray
    M_complex: np.ndarray
    M: np.ndarray
    W: np.ndarray
    eta: float
    M_pinv: np.ndarray = field(repr=False)

    @property
    def rows(self) -> int:
        return self.M.shape[0]

    @property
    def cols(self) -> int:
        return self.M.shape[1]

    @property
    def rho(self) -> float:
        return self.pilot.rho(self.geometry)

    def digest(self) -> str:
        """SHA-256 of the float64 little-endian bytes of ``M``."""
        return hashlib.sha256(np.ascontiguousarray(self.M, dtype="<f8").tobytes()).hexdigest()


def build_operator(combiners: np.ndarray, F: np.ndarray, geometry: ArrayGeometry,
                   pilot: PilotConfig) -> MeasurementOperator:
    n = geometry.n_antennas
    if combiners.shape != (pilot.Q, geometry.S, geometry.S_bar):
        raise ValueError(f"combiners shape {combiners.shape} does not match geometry/pilot")
    if F.shape != (n, n):
        raise ValueError(f"dictionary shape {F.shape} does not match {n} antennas")
    pilot.rho(geometry)
    blocks = [combiner_matrix(combiners, q).conj().T @ F for q in range(pilot.Q)]
    m_complex = np.vstack(blocks)
    m = real_operator(m_complex)
    m_pinv = np.linalg.pinv(m, rcond=PINV_RCOND)
    eta = 2 * n / float(np.trace(m_pinv @ m))
    return MeasurementOperator(geometry=geometry, pilot=pilot, combiners=combiners, F=F,
                               M_complex=m_complex, M=m, W=eta * m_pinv, eta=eta, M_pinv=m_pinv)


def random_operator(rng: np.random.Generator, geometry: ArrayGeometry, pilot: PilotConfig) -> MeasurementOperator:
    return build_operator(sample_combiners(rng, geometry, pilot), dft_dictionary(geometry), geometry, pilot)


def operator_seed_rng(seed: int) -> np.random.Generator:
    # distinct stream from the per-sample channel streams
    return np.random.default_rng([seed, 2 ** 32 - 1])


def angular_target(operator: MeasurementOperator, h_complex: np.ndarray) -> np.ndarray:
    """Real-stacked dictionary coefficients ``F^H h`` (the quantity the estimators recover)."""
    return complex_to_real(h_complex @ operator.F.conj())


@dataclass(frozen=True)
class NoiseSpec:
    """AWGN at ``snr_db`` or symmetric-parameterized alpha-stable noise at ``gsnr_db``.

    For alpha-stable noise the ``dispersion`` is the scale parameter of the
    stable law; when it is left as ``None`` it is set from the generalized SNR
    as ``signal_power / 10**(gsnr_db/10)``.
    """

    kind: Literal["awgn", "alpha_stable"] = "awgn"
    snr_db: float = math.inf
    gsnr_db: float = 15.0
    alpha: float = 2.0
    beta: float = 0.0
    dispersion: float | None = None

    def __post_init__(self):
        if self.kind not in ("awgn", "alpha_stable"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if self.kind == "alpha_stable":
            if not 0 < self.alpha <= 2:
                raise ValueError("alpha must lie in (0, 2]")
            if not -1 <= self.beta <= 1:
                raise ValueError("beta must lie in [-1, 1]")
            if self.dispersion is not None and self.dispersion <= 0:
                raise ValueError("dispersion must be positive")

    def resolved_dispersion(self, signal_power: float) -> float:
        if self.dispersion is not None:
            return self.dispersion
        return signal_power / 10 ** (self.gsnr_db / 10)


def stable_rvs(rng: np.random.Generator, alpha: float, beta: float, size, scale: float = 1.0) -> np.ndarray:
    """Chambers-Mallows-Stuck draws from S(alpha, beta, scale, 0) (1-parameterization).

    For ``alpha == 2`` this is ``N(0, 2 scale^2)``; the alpha == 1 branch uses the
    logarithmic form of the transform.
    """
    if not 0 < alpha <= 2:
        raise ValueError("alpha must lie in (0, 2]")
    if not -1 <= beta <= 1:
        raise ValueError("beta must lie in [-1, 1]")
    v = rng.uniform(-np.pi / 2, np.pi / 2, size=size)
    w = rng.exponential(1.0, size=size)
    if alpha == 1.0:
        half = np.pi / 2
        x = (2 / np.pi) * ((half + beta * v) * np.tan(v)
                           - beta * np.log(half * w * np.cos(v) / (half + beta * v)))
        return scale * x + (2 / np.pi) * beta * scale * np.log(scale)
    zeta = -beta * np.tan(np.pi * alpha / 2)
    xi = np.arctan(-zeta) / alpha
    x = ((1 + zeta ** 2) ** (1 / (2 * alpha))
         * np.sin(alpha * (v + xi)) / np.cos(v) ** (1 / alpha)
         * (np.cos(v - alpha * (v + xi)) / w) ** ((1 - alpha) / alpha))
    return scale * x


def sample_noise(rng: np.random.Generator, spec: NoiseSpec, signal_power: float, dim: int) -> np.ndarray:
    """Real noise vector of length ``dim``.

    ``signal_power`` is the mean power per real component of the noiseless
    measurement. AWGN gets per-component variance ``signal_power / 10**(snr/10)``,
    which equals the received-pilot SNR ``||M_bar h||^2 / E||n_bar||^2`` because the
    unit-norm block combiners leave complex white noise white.
    """
    if dim <= 0:
        raise ValueError("dim must be positive")
    if spec.kind == "awgn":
        if math.isinf(spec.snr_db) and spec.snr_db > 0:
            return np.zeros(dim)
        var = signal_power / 10 ** (spec.snr_db / 10)
        return rng.normal(0.0, math.sqrt(var), size=dim)
    return stable_rvs(rng, spec.alpha, spec.beta, dim, scale=spec.resolved_dispersion(signal_power))


def awgn_variance(y_clean: np.ndarray, snr_db: float) -> float:
    """Per-real-component noise variance for a target SNR given the clean measurement."""
    if math.isinf(snr_db) and snr_db > 0:
        return 0.0
    return float(np.mean(y_clean ** 2)) / 10 ** (snr_db / 10)


def observe(operator: MeasurementOperator, h_real: np.ndarray, noise: np.ndarray | None = None) -> np.ndarray:
    """``y = M h + n``; works on a single vector or a batch of row vectors."""
    h_real = np.asarray(h_real)
    if h_real.shape[-1] != operator.cols:
        raise ValueError(f"channel length {h_real.shape[-1]} != operator columns {operator.cols}")
    y = h_real @ operator.M.T
    if noise is not None:
        noise = np.asarray(noise)
        if noise.shape != y.shape:
            raise ValueError(f"noise shape {noise.shape} != measurement shape {y.shape}")
        y = y + noise
    return y
