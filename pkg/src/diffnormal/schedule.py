"""Discrete diffusion schedule, forward noising and parameterization conversions.

Time indices are zero-based: ``t`` runs over ``0 .. T-1``. A step quoted as
401 in the one-based convention is index 400 here.

Latent fields are plain numpy arrays of shape ``(H, W, C)`` (any shape works
for the pointwise operations in this module).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from diffnormal.config import format_kv, parse_kv

SCHEDULE_KINDS = ("linear", "scaled-linear")


@dataclass(frozen=True)
class NoiseSchedule:
    """Immutable beta/alpha tables for a ``T``-step discrete diffusion.

    Build with :func:`make_linear_schedule` or
    :func:`make_scaled_linear_schedule` rather than directly.
    """

    T: int
    beta_start: float
    beta_end: float
    schedule_kind: str
    betas: np.ndarray = field(repr=False)
    alphas: np.ndarray = field(repr=False)
    alpha_bars: np.ndarray = field(repr=False)

    def __post_init__(self):
        for arr in (self.betas, self.alphas, self.alpha_bars):
            arr.setflags(write=False)
        self.validate()

    def validate(self) -> None:
        if self.T < 1:
            raise ValueError(f"T must be >= 1, got {self.T}")
        if self.schedule_kind not in SCHEDULE_KINDS:
            raise ValueError(f"unknown schedule kind {self.schedule_kind!r}")
        if not (len(self.betas) == len(self.alphas) == len(self.alpha_bars) == self.T):
            raise ValueError("schedule tables must all have length T")
        if np.any(self.alphas <= 0) or np.any(self.alphas >= 1):
            raise ValueError("alphas must lie in (0, 1)")
        if np.any(self.alpha_bars <= 0) or np.any(self.alpha_bars >= 1):
            raise ValueError("alpha_bars must lie in (0, 1)")
        if np.any(np.diff(self.alpha_bars) >= 0):
            raise ValueError("alpha_bars must be strictly decreasing")

    def check_t(self, t: int) -> int:
        t = int(t)
        if not 0 <= t < self.T:
            raise IndexError(f"time index {t} outside [0, {self.T})")
        return t

    def alpha_bar(self, t: int) -> float:
        """Cumulative product at ``t``; ``t == -1`` denotes the clean endpoint (1.0)."""
        if t == -1:
            return 1.0
        return float(self.alpha_bars[self.check_t(t)])

    def to_config(self) -> str:
        return format_kv(
            {
                "T": self.T,
                "beta_start": float(self.beta_start),
                "beta_end": float(self.beta_end),
                "schedule_kind": self.schedule_kind,
            }
        )

    @classmethod
    def from_config(cls, text: str) -> "NoiseSchedule":
        kv = parse_kv(text)
        try:
            T = int(kv["T"])
            b0 = float(kv["beta_start"])
            b1 = float(kv["beta_end"])
        except KeyError as exc:
            raise ValueError(f"schedule config missing key {exc.args[0]!r}") from None
        kind = kv.get("schedule_kind", "linear")
        if kind == "linear":
            return make_linear_schedule(T, b0, b1)
        if kind == "scaled-linear":
            return make_scaled_linear_schedule(T, b0, b1)
        raise ValueError(f"unknown schedule kind {kind!r}")


def _check_betas(T: int, beta_start: float, beta_end: float) -> None:
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )


def _from_betas(T, beta_start, beta_end, kind, betas) -> NoiseSchedule:
    betas = np.asarray(betas, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return NoiseSchedule(T, float(beta_start), float(beta_end), kind, betas, alphas, alpha_bars)


def make_linear_schedule(
    T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02
) -> NoiseSchedule:
    """Betas linearly spaced from ``beta_start`` to ``beta_end`` inclusive."""
    _check_betas(T, beta_start, beta_end)
    return _from_betas(T, beta_start, beta_end, "linear", np.linspace(beta_start, beta_end, T))


def make_scaled_linear_schedule(
    T: int = 1000, beta_start: float = 0.00085, beta_end: float = 0.012
) -> NoiseSchedule:
    """Betas whose square roots are linearly spaced (the latent-diffusion default)."""
    _check_betas(T, beta_start, beta_end)
    betas = np.linspace(np.sqrt(beta_start), np.sqrt(beta_end), T) ** 2
    return _from_betas(T, beta_start, beta_end, "scaled-linear", betas)


def _same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if np.shape(a) != np.shape(b):
        raise ValueError(f"{what}: shape mismatch {np.shape(a)} vs {np.shape(b)}")


def forward_diffuse(x0, t: int, eps, sched: NoiseSchedule) -> np.ndarray:
    """Sample ``x_t = sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps``."""
    _same_shape(x0, eps, "forward_diffuse")
    ab = sched.alpha_bar(sched.check_t(t))
    return np.sqrt(ab) * np.asarray(x0) + np.sqrt(1.0 - ab) * np.asarray(eps)


def eps_to_x0(x_t, eps_hat, t: int, sched: NoiseSchedule) -> np.ndarray:
    """Invert :func:`forward_diffuse` for ``x0`` given a noise estimate."""
    _same_shape(x_t, eps_hat, "eps_to_x0")
    ab = sched.alpha_bar(sched.check_t(t))
    assert ab > 0
    return (np.asarray(x_t) - np.sqrt(1.0 - ab) * np.asarray(eps_hat)) / np.sqrt(ab)


def x0_to_eps(x_t, x0_hat, t: int, sched: NoiseSchedule) -> np.ndarray:
    """Invert :func:`forward_diffuse` for the noise given a clean estimate."""
    _same_shape(x_t, x0_hat, "x0_to_eps")
    ab = sched.alpha_bar(sched.check_t(t))
    if ab >= 1.0:
        raise ZeroDivisionError("alpha_bar == 1 leaves the noise undetermined")
    return (np.asarray(x_t) - np.sqrt(ab) * np.asarray(x0_hat)) / np.sqrt(1.0 - ab)
