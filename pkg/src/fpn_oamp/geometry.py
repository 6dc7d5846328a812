"""Hybrid far/near-field channel model for a planar array-of-subarrays (AoSA).

Index conventions: formulas use 1-based SA index ``s`` and AE index ``s_bar``;
storage is 0-based and SA-major, i.e. the channel entry of AE ``s_bar`` in SA
``s`` lives at position ``(s - 1) * S_bar + (s_bar - 1)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np

# Free-space propagation speed. 3e8 reproduces the tabulated spacings exactly
# (d_a = lambda/2 = 0.5 mm at 300 GHz).
SPEED_OF_LIGHT = 3.0e8

FieldMode = Literal["auto", "force_far", "force_near"]


def _isqrt_exact(n: int, name: str) -> int:
    root = math.isqrt(n)
    if n < 1 or root * root != n:
        raise ValueError(f"{name} must be a positive perfect square, got {n}")
    return root


@dataclass(frozen=True)
class ArrayGeometry:
    S: int
    S_bar: int
    d_a: float
    d_sub: float
    f_c: float

    def __post_init__(self):
        _isqrt_exact(self.S, "S")
        _isqrt_exact(self.S_bar, "S_bar")
        if self.d_a <= 0:
            raise ValueError("d_a must be positive")
        if self.d_sub < self.d_a:
            raise ValueError("d_sub must be at least d_a")
        if self.f_c <= 0:
            raise ValueError("f_c must be positive")

    @classmethod
    def from_wavelengths(cls, S: int, S_bar: int, f_c: float,
                         d_a_lambda: float = 0.5, d_sub_lambda: float = 56.0) -> "ArrayGeometry":
        lam = SPEED_OF_LIGHT / f_c
        return cls(S=S, S_bar=S_bar, d_a=d_a_lambda * lam, d_sub=d_sub_lambda * lam, f_c=f_c)

    @property
    def sqrt_S(self) -> int:
        return math.isqrt(self.S)

    @property
    def side(self) -> int:
        """Number of AEs along one edge of a subarray."""
        return math.isqrt(self.S_bar)

    @property
    def n_antennas(self) -> int:
        return self.S * self.S_bar

    @property
    def lambda_c(self) -> float:
        return SPEED_OF_LIGHT / self.f_c

    @property
    def w(self) -> float:
        return self.d_sub / self.d_a

    @property
    def aperture(self) -> float:
        return aperture_and_rayleigh(self)[0]

    @property
    def rayleigh_distance(self) -> float:
        return aperture_and_rayleigh(self)[1]

    def to_dict(self) -> dict:
        return {"S": self.S, "S_bar": self.S_bar, "d_a": self.d_a,
                "d_sub": self.d_sub, "f_c": self.f_c}


def ae_position(geometry: ArrayGeometry, s: int, s_bar: int) -> np.ndarray:
    """Cartesian position (m) of AE ``s_bar`` in SA ``s`` (both 1-based)."""
    if not 1 <= s <= geometry.S:
        raise ValueError(f"SA index {s} outside 1..{geometry.S}")
    if not 1 <= s_bar <= geometry.S_bar:
        raise ValueError(f"AE index {s_bar} outside 1..{geometry.S_bar}")
    m, n = divmod(s - 1, geometry.sqrt_S)
    m_bar, n_bar = divmod(s_bar - 1, geometry.side)
    pitch = (geometry.side - 1) * geometry.d_a + geometry.d_sub
    return np.array([m * pitch + m_bar * geometry.d_a,
                     n * pitch + n_bar * geometry.d_a,
                     0.0])


def all_positions(geometry: ArrayGeometry) -> np.ndarray:
    """Positions of every AE, shape ``(S * S_bar, 3)`` in SA-major storage order."""
    sa = np.arange(geometry.S)
    ae = np.arange(geometry.S_bar)
    m, n = np.divmod(sa, geometry.sqrt_S)
    m_bar, n_bar = np.divmod(ae, geometry.side)
    pitch = (geometry.side - 1) * geometry.d_a + geometry.d_sub
    x = (m[:, None] * pitch + m_bar[None, :] * geometry.d_a).ravel()
    y = (n[:, None] * pitch + n_bar[None, :] * geometry.d_a).ravel()
    return np.stack([x, y, np.zeros_like(x)], axis=1)


def aperture_and_rayleigh(geometry: ArrayGeometry) -> tuple[float, float]:
    """Array diagonal ``D`` and Rayleigh distance ``2 D^2 / lambda_c`` in meters."""
    rs, rsb = geometry.sqrt_S, geometry.side
    D = math.sqrt(2.0) * (rs * (rsb - 1) * geometry.d_a + (rs - 1) * geometry.d_sub)
    return D, 2.0 * D * D / geometry.lambda_c


def reflection_coefficient(phi_in: float, n_t: complex, sigma_rough: float, f_c: float) -> complex:
    """Rough-surface Fresnel reflection coefficient for a single-bounce NLoS ray."""
    if not 0.0 <= phi_in < math.pi / 2:
        raise ValueError("incidence angle must lie in [0, pi/2)")
    n_t = complex(n_t)
    cos_in = math.cos(phi_in)
    phi_ref = np.arcsin(np.sin(phi_in) / n_t)
    cos_ref = np.cos(phi_ref)
    fresnel = (cos_in - n_t * cos_ref) / (cos_in + n_t * cos_ref)
    rough = math.exp(-8.0 * math.pi ** 2 * f_c ** 2 * sigma_rough ** 2 * cos_in ** 2 / SPEED_OF_LIGHT ** 2)
    return complex(fresnel * rough)


def path_loss(f_c: float, r_1: float, k_abs: float, gamma_l: complex) -> float:
    """Spread and molecular-absorption gain of one path (referenced to the LoS length)."""
    if r_1 <= 0:
        raise ValueError("LoS distance must be positive")
    spread = SPEED_OF_LIGHT / (4.0 * math.pi * f_c * r_1)
    return abs(gamma_l) * spread * math.exp(-0.5 * k_abs * r_1)


def direction(phi: float, theta: float) -> np.ndarray:
    return np.array([math.sin(theta) * math.cos(phi),
                     math.sin(theta) * math.sin(phi),
                     math.cos(theta)])


def array_response(geometry: ArrayGeometry, phi: float, theta: float, r: float, f: float,
                   mode: FieldMode = "auto", positions: np.ndarray | None = None) -> np.ndarray:
    """Vectorized array response, length ``S * S_bar``, unit-modulus entries.

    ``auto`` uses the spherical-wavefront model iff ``r`` is inside the
    Rayleigh distance. The planar model uses the first-order expansion
    ``||p - r t|| ~ r - p.t`` of the exact distance.
    """
    if r <= 0:
        raise ValueError("distance must be positive")
    if mode == "auto":
        mode = "force_near" if r < geometry.rayleigh_distance else "force_far"
    p = all_positions(geometry) if positions is None else positions
    t = direction(phi, theta)
    k = 2.0 * math.pi * f / SPEED_OF_LIGHT
    if mode == "force_near":
        dist = np.linalg.norm(p - r * t, axis=1)
    elif mode == "force_far":
        dist = r - p @ t
    else:
        raise ValueError(f"unknown field mode {mode!r}")
    return np.exp(-1j * k * dist)


@dataclass(frozen=True)
class PathComponent:
    alpha: complex
    phi: float
    theta: float
    r: float
    tau: float
    phi_in: float | None = None
    is_los: bool = False


@dataclass(frozen=True)
class ChannelConfig:
    """Multipath statistics. Distances in m, delays in s."""

    L: int = 5
    r_1: float = 30.0
    nlos_r_range: tuple[float, float] = (10.0, 25.0)
    tau_los: float = 100e-9
    nlos_tau_range: tuple[float, float] = (100e-9, 110e-9)
    k_abs: float = 0.0033
    n_t: complex = complex(2.24, -0.025)
    sigma_rough: float = 8.8e-5
    theta_range: tuple[float, float] = (-math.pi / 2, math.pi / 2)
    phi_range: tuple[float, float] = (-math.pi, math.pi)
    phi_in_range: tuple[float, float] = (0.0, math.pi / 2)
    los_blocked: bool = False
    field_mode: FieldMode = "auto"
    gain_error_fraction: float = 0.0
    gain_error_var: float = 0.2
    normalization: Literal["unit", "los_reference"] = "unit"

    def __post_init__(self):
        if self.L < 1:
            raise ValueError("L must be at least 1")
        if self.normalization not in ("unit", "los_reference"):
            raise ValueError(f"unknown normalization {self.normalization!r}")
        lo, hi = self.nlos_r_range
        if not 0 < lo <= hi or self.r_1 <= 0:
            raise ValueError("distances must be positive")

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in self.__dataclass_fields__}
        out["n_t"] = [self.n_t.real, self.n_t.imag]
        for key in ("nlos_r_range", "nlos_tau_range", "theta_range", "phi_range", "phi_in_range"):
            out[key] = list(out[key])
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ChannelConfig":
        data = dict(data)
        if "n_t" in data and not isinstance(data["n_t"], complex):
            re, im = data["n_t"]
            data["n_t"] = complex(re, im)
        for key in ("nlos_r_range", "nlos_tau_range", "theta_range", "phi_range", "phi_in_range"):
            if key in data:
                data[key] = tuple(data[key])
        return cls(**data)


@dataclass
class ChannelSample:
    paths: list[PathComponent]
    h_complex: np.ndarray
    h_real: np.ndarray = field(init=False)

    def __post_init__(self):
        self.h_real = complex_to_real(self.h_complex)


def complex_to_real(v: np.ndarray) -> np.ndarray:
    """Stack real parts over imaginary parts along the last axis."""
    return np.concatenate([v.real, v.imag], axis=-1)


def real_to_complex(v: np.ndarray) -> np.ndarray:
    n = v.shape[-1] // 2
    return v[..., :n] + 1j * v[..., n:]


def sample_rng(seed: int, index: int) -> np.random.Generator:
    """Independent per-sample stream, so generation order does not matter."""
    return np.random.default_rng([seed, index])


def sample_paths(rng: np.random.Generator, config: ChannelConfig,
                 geometry: ArrayGeometry, f: float | None = None) -> list[PathComponent]:
    f = geometry.f_c if f is None else f
    paths = []
    if not config.los_blocked:
        paths.append(PathComponent(
            alpha=complex(path_loss(f, config.r_1, config.k_abs, 1.0)),
            phi=rng.uniform(*config.phi_range),
            theta=rng.uniform(*config.theta_range),
            r=config.r_1, tau=config.tau_los, is_los=True))
    for _ in range(config.L - 1):
        phi = rng.uniform(*config.phi_range)
        theta = rng.uniform(*config.theta_range)
        phi_in = rng.uniform(*config.phi_in_range)
        # uniform draw may hit the closed upper end; clip just inside pi/2
        phi_in = min(phi_in, math.nextafter(math.pi / 2, 0.0))
        r = rng.uniform(*config.nlos_r_range)
        tau = rng.uniform(*config.nlos_tau_range)
        gamma = reflection_coefficient(phi_in, config.n_t, config.sigma_rough, f)
        # the spread/absorption factor is referenced to the LoS length r_1
        alpha = path_loss(f, config.r_1, config.k_abs, gamma) * np.exp(1j * np.angle(gamma))
        paths.append(PathComponent(alpha=complex(alpha), phi=phi, theta=theta, r=r,
                                   tau=tau, phi_in=phi_in, is_los=False))
    return paths


def path_gain_at(path: PathComponent, config: ChannelConfig, f: float) -> complex:
    """Re-evaluate a path's complex gain at frequency ``f`` (wideband subcarriers)."""
    if path.is_los:
        return complex(path_loss(f, config.r_1, config.k_abs, 1.0))
    gamma = reflection_coefficient(path.phi_in, config.n_t, config.sigma_rough, f)
    return complex(path_loss(f, config.r_1, config.k_abs, gamma) * np.exp(1j * np.angle(gamma)))


def assemble_channel(paths: Sequence[PathComponent], geometry: ArrayGeometry, f: float | None = None,
                     mode: FieldMode = "auto", gains: Sequence[complex] | None = None) -> ChannelSample:
    """Superpose path contributions into the spatial channel vector."""
    if not paths:
        raise ValueError("at least one path is required")
    f = geometry.f_c if f is None else f
    pos = all_positions(geometry)
    h = np.zeros(geometry.n_antennas, dtype=complex)
    for i, p in enumerate(paths):
        alpha = p.alpha if gains is None else gains[i]
        a = array_response(geometry, p.phi, p.theta, p.r, f, mode=mode, positions=pos)
        h += alpha * a * np.exp(-2j * math.pi * f * p.tau)
    return ChannelSample(paths=list(paths), h_complex=h)


def channel_scale(config: ChannelConfig, geometry: ArrayGeometry) -> float:
    """Normalizer giving a LoS-only channel unit l2 norm (LoS gain times sqrt(S*S_bar))."""
    return path_loss(geometry.f_c, config.r_1, config.k_abs, 1.0) * math.sqrt(geometry.n_antennas)


def miscalibration_gains(rng: np.random.Generator, n: int, fraction: float,
                         variance: float) -> np.ndarray:
    """Per-antenna gains: a random ``fraction`` scaled by ``1 + e``, ``e ~ N(0, variance)``."""
    gains = np.ones(n)
    count = int(round(fraction * n))
    if count:
        idx = rng.choice(n, size=count, replace=False)
        gains[idx] += rng.normal(0.0, math.sqrt(variance), size=count)
    return gains


def generate_channel(rng: np.random.Generator, config: ChannelConfig, geometry: ArrayGeometry,
                     freqs: Sequence[float] | None = None) -> list[ChannelSample]:
    """Draw one multipath realization and evaluate it at each frequency in ``freqs``.

    With ``normalization="unit"`` every realization is divided by the l2 norm
    of its channel at the carrier ``f_c``, so narrowband samples have unit norm
    and subcarriers keep their gains relative to the carrier. With
    ``"los_reference"`` the fixed divisor :func:`channel_scale` is used, which
    leaves the power differences between realizations in place.
    Gain miscalibration, when configured, is drawn once and shared across frequencies.
    """
    freqs = [geometry.f_c] if freqs is None else list(freqs)
    paths = sample_paths(rng, config, geometry)

    def build(f):
        gains = [path_gain_at(p, config, f) for p in paths]
        return assemble_channel(paths, geometry, f, mode=config.field_mode, gains=gains)

    out = [build(f) for f in freqs]
    g = np.ones(geometry.n_antennas)
    if config.gain_error_fraction > 0:
        g = miscalibration_gains(rng, geometry.n_antennas, config.gain_error_fraction,
                                 config.gain_error_var)
    if config.normalization == "unit":
        carrier = out[freqs.index(geometry.f_c)] if geometry.f_c in freqs else build(geometry.f_c)
        scale = float(np.linalg.norm(carrier.h_complex * g))
    else:
        scale = channel_scale(config, geometry)
    return [ChannelSample(paths=s.paths, h_complex=s.h_complex * g / scale) for s in out]


def farfield_error(geometry: ArrayGeometry, phi: float, theta: float, r: float, f: float | None = None) -> float:
    """Normalized squared error ``||a_far - a_near||^2 / ||a_near||^2``."""
    f = geometry.f_c if f is None else f
    near = array_response(geometry, phi, theta, r, f, mode="force_near")
    far = array_response(geometry, phi, theta, r, f, mode="force_far")
    return float(np.sum(np.abs(far - near) ** 2) / np.sum(np.abs(near) ** 2))


REFERENCE_GEOMETRY = ArrayGeometry(S=4, S_bar=256, d_a=0.0005, d_sub=0.056, f_c=300e9)
REFERENCE_CHANNEL = ChannelConfig()
