"""Hybrid-field THz channel estimation with a fixed-point network built on OAMP."""

from .geometry import ArrayGeometry, ChannelConfig, generate_channel
from .measurement import MeasurementOperator, NoiseSpec, PilotConfig, build_operator, random_operator
from .nle import NleParameters, init_params, nle_backward, nle_forward
from .fixed_point import (contraction_limit, fixed_point_solve, fixed_point_solve_batch, lipschitz_estimate,
                          safeguard_normalize)
from .training import TrainConfig, generate_dataset, self_adapt, train

__version__ = "0.1.0"

__all__ = [
    "ArrayGeometry", "ChannelConfig", "generate_channel",
    "MeasurementOperator", "NoiseSpec", "PilotConfig", "build_operator", "random_operator",
    "NleParameters", "init_params", "nle_backward", "nle_forward",
    "contraction_limit", "fixed_point_solve", "fixed_point_solve_batch", "lipschitz_estimate", "safeguard_normalize",
    "TrainConfig", "generate_dataset", "self_adapt", "train",
]
