"""JSON experiment configuration.

Schema (all sections optional except ``geometry`` and ``pilot``)::

    {
      "name": str,
      "seed": int,
      "geometry": {"S", "S_bar", "f_c", "d_a_lambda", "d_sub_lambda"}   # or "d_a"/"d_sub" in m
      "pilot":    {"Q", "resolution": "one_bit" | "infinite"},
      "channel":  ChannelConfig fields (distances m, delays s, n_t as [re, im]),
      "nle":      {"C", "B"},
      "data":     {"n_train", "n_val", "n_test", "snr_range": [lo, hi]},
      "train":    TrainConfig fields,
      "baselines": BaselineConfig fields,
      "eval":     {"snr_grid", "epsilon", "max_iters", "methods", "trace_iters"},
      "wideband": {"K", "bandwidth"},
      "ood":      {"test_snr_db", "n_test", "fresh_operators", "adapt_steps", "adapt_lr",
                   "adapt_samples", "shifts": [...]}
    }
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .baselines import BaselineConfig
from .geometry import SPEED_OF_LIGHT, ArrayGeometry, ChannelConfig
from .measurement import PilotConfig
from .training import TrainConfig, config_dict

DEFAULT_METHODS = ["fpn_oamp", "ls", "omp", "fista", "oamp"]


@dataclass(frozen=True)
class WidebandConfig:
    K: int = 32
    bandwidth: float = 15e9

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be at least 1")
        if self.bandwidth <= 0:
            raise ValueError("bandwidth must be positive")

    def frequencies(self, f_c: float) -> list[float]:
        """Subcarrier grid ``f_k = f_c + (k - 1 - (K - 1)/2) B / K`` for ``k = 1..K``."""
        return [f_c + (k - (self.K - 1) / 2) * self.bandwidth / self.K for k in range(self.K)]


@dataclass
class ExperimentConfig:
    name: str
    seed: int
    geometry: ArrayGeometry
    pilot: PilotConfig
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    C: int = 32
    B: int = 3
    n_train: int = 8000
    n_val: int = 500
    n_test: int = 500
    snr_range: tuple[float, float] = (0.0, 20.0)
    train: TrainConfig = field(default_factory=TrainConfig)
    baselines: BaselineConfig = field(default_factory=BaselineConfig)
    snr_grid: list[float] = field(default_factory=lambda: [0.0, 5.0, 10.0, 15.0, 20.0])
    epsilon: float = 0.01
    max_iters: int = 50
    methods: list[str] = field(default_factory=lambda: list(DEFAULT_METHODS))
    trace_iters: int = 20
    wideband: WidebandConfig = field(default_factory=WidebandConfig)
    ood: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.snr_grid:
            raise ValueError("SNR grid must be nonempty")
        self.pilot.rho(self.geometry)

    def replace(self, **changes) -> "ExperimentConfig":
        out = copy.copy(self)
        for k, v in changes.items():
            if not hasattr(out, k):
                raise KeyError(k)
            setattr(out, k, v)
        out.__post_init__()
        return out

    def to_dict(self) -> dict:
        lam = SPEED_OF_LIGHT / self.geometry.f_c
        return {
            "name": self.name, "seed": self.seed,
            "geometry": {"S": self.geometry.S, "S_bar": self.geometry.S_bar, "f_c": self.geometry.f_c,
                         "d_a_lambda": self.geometry.d_a / lam, "d_sub_lambda": self.geometry.d_sub / lam},
            "pilot": {"Q": self.pilot.Q, "resolution": self.pilot.resolution},
            "channel": self.channel.to_dict(),
            "nle": {"C": self.C, "B": self.B},
            "data": {"n_train": self.n_train, "n_val": self.n_val, "n_test": self.n_test,
                     "snr_range": list(self.snr_range)},
            "train": config_dict(self.train),
            "baselines": {f.name: getattr(self.baselines, f.name) for f in fields(BaselineConfig)},
            "eval": {"snr_grid": list(self.snr_grid), "epsilon": self.epsilon, "max_iters": self.max_iters,
                     "methods": list(self.methods), "trace_iters": self.trace_iters},
            "wideband": {"K": self.wideband.K, "bandwidth": self.wideband.bandwidth},
            "ood": self.ood,
        }

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def geometry_from_dict(d: dict) -> ArrayGeometry:
    d = dict(d)
    if "d_a" in d or "d_sub" in d:
        return ArrayGeometry(S=d["S"], S_bar=d["S_bar"], d_a=d["d_a"], d_sub=d["d_sub"], f_c=d["f_c"])
    return ArrayGeometry.from_wavelengths(d["S"], d["S_bar"], d["f_c"], d.get("d_a_lambda", 0.5),
                                          d.get("d_sub_lambda", 56.0))


def _train_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    if "snr_range" in d:
        d["snr_range"] = tuple(d["snr_range"])
    return TrainConfig(**d)


def config_from_dict(d: dict) -> ExperimentConfig:
    data = d.get("data", {})
    ev = d.get("eval", {})
    snr_range = tuple(data.get("snr_range", (0.0, 20.0)))
    train = dict(d.get("train", {}))
    train.setdefault("snr_range", snr_range)
    wb = d.get("wideband", {})
    return ExperimentConfig(
        name=d.get("name", "custom"), seed=int(d.get("seed", 0)),
        geometry=geometry_from_dict(d["geometry"]), pilot=PilotConfig(**d["pilot"]),
        channel=ChannelConfig.from_dict(d.get("channel", {})),
        C=d.get("nle", {}).get("C", 32), B=d.get("nle", {}).get("B", 3),
        n_train=data.get("n_train", 8000), n_val=data.get("n_val", 500), n_test=data.get("n_test", 500),
        snr_range=snr_range, train=_train_from_dict(train),
        baselines=BaselineConfig(**d.get("baselines", {})),
        snr_grid=list(ev.get("snr_grid", [0.0, 5.0, 10.0, 15.0, 20.0])),
        epsilon=ev.get("epsilon", 0.01), max_iters=ev.get("max_iters", 50),
        methods=list(ev.get("methods", DEFAULT_METHODS)), trace_iters=ev.get("trace_iters", 20),
        wideband=WidebandConfig(**wb), ood=d.get("ood", {}))


def load_config(path: str | Path) -> ExperimentConfig:
    with open(path) as f:
        return config_from_dict(json.load(f))


def save_config(path: str | Path, cfg: ExperimentConfig) -> None:
    with open(path, "w") as f:
        json.dump(cfg.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")


def _scaled_range(lo: float, hi: float, ratio: float) -> tuple[float, float]:
    return (round(lo * ratio, 4), round(hi * ratio, 4))


def desk_config(seed: int = 0) -> ExperimentConfig:
    """CPU-sized setup: 4 SAs of 4x4 AEs, rho = 50%.

    Distances keep the full-scale ratios to the Rayleigh distance, so the channel
    stays hybrid-field (LoS beyond, most NLoS scatterers inside D_Rayleigh).
    """
    geometry = ArrayGeometry.from_wavelengths(S=4, S_bar=16, f_c=300e9, d_a_lambda=0.5, d_sub_lambda=8.0)
    ratio = geometry.rayleigh_distance / 20.164
    channel = ChannelConfig(r_1=round(30.0 * ratio, 4), nlos_r_range=_scaled_range(10.0, 25.0, ratio))
    return ExperimentConfig(
        name="desk", seed=seed, geometry=geometry, pilot=PilotConfig(8), channel=channel,
        C=32, B=3, n_train=8000, n_val=500, n_test=500,
        train=TrainConfig(epochs=6, lr_decay_every=2, seed=seed))


def full_config(seed: int = 0) -> ExperimentConfig:
    """Reference scale (1024 AEs, 80k samples). Long-running on a CPU."""
    geometry = ArrayGeometry.from_wavelengths(S=4, S_bar=256, f_c=300e9, d_a_lambda=0.5, d_sub_lambda=56.0)
    return ExperimentConfig(
        name="full", seed=seed, geometry=geometry, pilot=PilotConfig(128), channel=ChannelConfig(),
        C=64, B=3, n_train=80000, n_val=5000, n_test=5000,
        train=TrainConfig(epochs=100, lr_decay_every=30, seed=seed))
