"""Diffusion machinery for deterministic surface-normal estimation at desk scale."""

from diffnormal.schedule import (
    NoiseSchedule,
    eps_to_x0,
    forward_diffuse,
    make_linear_schedule,
    make_scaled_linear_schedule,
    x0_to_eps,
)

__all__ = [
    "NoiseSchedule",
    "eps_to_x0",
    "forward_diffuse",
    "make_linear_schedule",
    "make_scaled_linear_schedule",
    "x0_to_eps",
]

__version__ = "0.1.0"
