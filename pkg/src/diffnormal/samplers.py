"""DDPM and DDIM steps, substep grids and the two-stage heuristic sampler."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from diffnormal.config import format_kv, parse_kv
from diffnormal.denoisers import ConditionBundle, Denoiser, predict_eps_and_x0
from diffnormal.schedule import NoiseSchedule

YOSO_INPUTS = ("zero", "sampled")


@dataclass(frozen=True)
class SamplerConfig:
    """Sampler settings.

    ``t_plus`` is one-based (401 means time index 400), matching how the
    initial refinement step is usually quoted; use :attr:`t_plus_index`.
    """

    tau: float = 0.0
    num_steps: int = 10
    t_plus: int = 401
    seed: int = 0
    yoso_input: str = "zero"

    def __post_init__(self):
        if self.tau < 0:
            raise ValueError(f"tau must be >= 0, got {self.tau}")
        if self.num_steps < 1:
            raise ValueError("num_steps must be >= 1")
        if self.t_plus < self.num_steps:
            raise ValueError(f"t_plus={self.t_plus} leaves no room for {self.num_steps} steps")
        if self.yoso_input not in YOSO_INPUTS:
            raise ValueError(f"yoso_input must be one of {YOSO_INPUTS}")

    @property
    def t_plus_index(self) -> int:
        return self.t_plus - 1

    def check(self, sched: NoiseSchedule) -> None:
        if self.t_plus > sched.T:
            raise ValueError(f"t_plus={self.t_plus} exceeds T={sched.T}")

    def to_config(self) -> str:
        return format_kv(
            {
                "tau": float(self.tau),
                "num_steps": self.num_steps,
                "t_plus": self.t_plus,
                "seed": self.seed,
                "yoso_input": self.yoso_input,
            }
        )

    @classmethod
    def from_config(cls, text: str) -> "SamplerConfig":
        kv = parse_kv(text)
        conv = {"tau": float, "num_steps": int, "t_plus": int, "seed": int, "yoso_input": str}
        unknown = set(kv) - set(conv)
        if unknown:
            raise ValueError(f"unknown sampler keys: {sorted(unknown)}")
        return cls(**{k: conv[k](v) for k, v in kv.items()})


@dataclass
class Trajectory:
    """States visited by a sampler; ``t == -1`` marks the clean endpoint."""

    steps: list[tuple[int, np.ndarray]] = field(default_factory=list)

    def record(self, t: int, x: np.ndarray) -> None:
        if self.steps:
            if t >= self.steps[-1][0]:
                raise ValueError("trajectory time indices must strictly decrease")
            if np.shape(x) != np.shape(self.steps[-1][1]):
                raise ValueError("trajectory states must share one shape")
        self.steps.append((int(t), np.array(x)))

    @property
    def final(self) -> np.ndarray:
        return self.steps[-1][1]

    @property
    def times(self) -> list[int]:
        return [t for t, _ in self.steps]

    def __len__(self) -> int:
        return len(self.steps)


def make_substep_grid(t_start: int, num_steps: int) -> list[int]:
    """Evenly spaced decreasing indices from ``t_start`` to 0 (both kept).

    Interior points are rounded up, e.g. ``(400, 10)`` gives
    ``[400, 356, 312, 267, 223, 178, 134, 89, 45, 0]``.
    """
    if num_steps < 1:
        raise ValueError("num_steps must be >= 1")
    if t_start < num_steps - 1:
        raise ValueError(f"cannot fit {num_steps} distinct steps in [0, {t_start}]")
    if num_steps == 1:
        if t_start != 0:
            raise ValueError("a single-step grid must be [0]")
        return [0]
    n = num_steps - 1
    return [t_start - (k * t_start) // n for k in range(num_steps)]


def ddpm_step(x_t, t: int, denoiser: Denoiser, noise, sched: NoiseSchedule, cond=None) -> np.ndarray:
    """Ancestral step ``t -> t-1`` with ``sigma_t = sqrt(beta_t)``."""
    t = sched.check_t(t)
    if t < 1:
        raise ValueError("ddpm_step needs t >= 1")
    if np.shape(noise) != np.shape(x_t):
        raise ValueError("noise shape mismatch")
    eps_hat, _ = predict_eps_and_x0(denoiser, x_t, t, cond, sched)
    a = sched.alphas[t]
    ab = sched.alpha_bars[t]
    mean = (x_t - (1.0 - a) / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(a)
    return mean + np.sqrt(sched.betas[t]) * np.asarray(noise)


def ddim_step(
    x_t, t: int, t_prev: int, denoiser: Denoiser, tau: float, noise, sched: NoiseSchedule, cond=None
) -> np.ndarray:
    """Move from ``t`` to ``t_prev``; ``t_prev == -1`` jumps to the clean estimate.

    Uses the direction term ``sqrt(1 - abar_prev - tau**2) * eps_hat``.
    """
    t = sched.check_t(t)
    if not (t > t_prev >= -1):
        raise ValueError(f"need t > t_prev >= -1, got {t}, {t_prev}")
    ab_prev = sched.alpha_bar(t_prev)
    rad = 1.0 - ab_prev - tau * tau
    if rad < -1e-12:
        raise ValueError(f"tau={tau} too large for step to {t_prev} (1 - abar_prev = {1.0 - ab_prev:.3g})")
    eps_hat, x0_hat = predict_eps_and_x0(denoiser, x_t, t, cond, sched)
    out = np.sqrt(ab_prev) * x0_hat + np.sqrt(max(0.0, rad)) * eps_hat
    if tau > 0:
        if np.shape(noise) != np.shape(x_t):
            raise ValueError("noise shape mismatch")
        out = out + tau * np.asarray(noise)
    return out


def ddim_sample(
    x_init, grid, denoiser: Denoiser, cfg: SamplerConfig, sched: NoiseSchedule, cond=None
) -> Trajectory:
    """Fold :func:`ddim_step` along ``grid`` and finish with a jump to the clean latent.

    Every grid entry is one denoiser evaluation, so a 10-entry grid yields
    11 trajectory states. ``cfg.tau`` is capped per step at
    ``sqrt(1 - abar_prev)``; the capped step injects only noise and the
    final jump is always noise-free. Noise is drawn only when the
    effective ``tau`` is positive, so ``tau == 0`` runs ignore the seed.
    """
    grid = [int(g) for g in grid]
    if not grid or grid[-1] != 0 or any(a <= b for a, b in zip(grid, grid[1:])):
        raise ValueError(f"invalid substep grid {grid}")
    rng = np.random.default_rng(cfg.seed)
    x = np.asarray(x_init, dtype=np.float64)
    traj = Trajectory()
    traj.record(grid[0], x)
    for i, t in enumerate(grid):
        t_prev = grid[i + 1] if i + 1 < len(grid) else -1
        tau = min(cfg.tau, float(np.sqrt(1.0 - sched.alpha_bar(t_prev))))
        noise = rng.standard_normal(x.shape) if tau > 0 else None
        x = ddim_step(x, t, t_prev, denoiser, tau, noise, sched, cond)
        traj.record(t_prev, x)
    return traj


def ddpm_sample(x_init, denoiser: Denoiser, sched: NoiseSchedule, seed: int, cond=None) -> Trajectory:
    """Full ancestral chain from ``T-1`` down to 0, then the clean estimate.

    Only the endpoints are kept in the trajectory.
    """
    rng = np.random.default_rng(seed)
    x = np.asarray(x_init, dtype=np.float64)
    traj = Trajectory()
    traj.record(sched.T - 1, x)
    for t in range(sched.T - 1, 0, -1):
        x = ddpm_step(x, t, denoiser, rng.standard_normal(x.shape), sched, cond)
    traj.record(0, x)
    _, x0_hat = predict_eps_and_x0(denoiser, x, 0, cond, sched)
    traj.record(-1, x0_hat)
    return traj


def _latent_shape(condition: ConditionBundle, channels: int):
    h, w = condition.image_features.shape[:2]
    return (h, w, channels)


def yoso_initial(
    condition: ConditionBundle, yoso: Denoiser, cfg: SamplerConfig, sched: NoiseSchedule, channels: int = 3,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """Stage one: the one-step estimate of the latent at ``t_plus``."""
    if yoso.kind != "x_t_plus":
        raise ValueError(f"stage one needs an x_t_plus denoiser, got {yoso.kind}")
    cfg.check(sched)
    if yoso.t_plus is not None and yoso.t_plus != cfg.t_plus_index:
        raise ValueError(f"one-step estimator was trained for index {yoso.t_plus}, config asks {cfg.t_plus_index}")
    shape = _latent_shape(condition, channels)
    if cfg.yoso_input == "zero":
        x_inf = np.zeros(shape)
    else:
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        x_inf = rng.standard_normal(shape)
    return yoso.predict(x_inf, cfg.t_plus_index, condition)


def yoso_only(
    condition: ConditionBundle, yoso: Denoiser, cfg: SamplerConfig, sched: NoiseSchedule, channels: int = 3
) -> np.ndarray:
    """Clean estimate from stage one alone: ``x_t_plus / sqrt(abar_t_plus)``."""
    x = yoso_initial(condition, yoso, cfg, sched, channels)
    return x / np.sqrt(sched.alpha_bar(cfg.t_plus_index))


def heuristic_sample(
    condition: ConditionBundle,
    yoso: Denoiser,
    refiner: Denoiser,
    cfg: SamplerConfig,
    sched: NoiseSchedule,
    channels: int = 3,
) -> Trajectory:
    """One-step initialization at ``t_plus`` followed by ``num_steps`` DDIM refinements."""
    if refiner.kind != "x0":
        raise ValueError(f"refinement needs an x0 denoiser, got {refiner.kind}")
    stage1_seq, stage2_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    x_tp = yoso_initial(condition, yoso, cfg, sched, channels, np.random.default_rng(stage1_seq))
    grid = make_substep_grid(cfg.t_plus_index, cfg.num_steps)
    stage2 = SamplerConfig(cfg.tau, cfg.num_steps, cfg.t_plus, int(stage2_seq.generate_state(1)[0]), cfg.yoso_input)
    return ddim_sample(x_tp, grid, refiner, stage2, sched, condition)


def full_chain_sample(
    condition: ConditionBundle,
    refiner: Denoiser,
    sched: NoiseSchedule,
    num_steps: int = 50,
    tau: float = 0.5,
    seed: int = 0,
    channels: int = 3,
) -> Trajectory:
    """Stochastic DDIM from pure noise at ``T-1`` (the ensembling baseline's sampler)."""
    rng = np.random.default_rng(seed)
    x_init = rng.standard_normal(_latent_shape(condition, channels))
    cfg = SamplerConfig(tau=tau, num_steps=num_steps, t_plus=sched.T, seed=int(rng.integers(2**63)))
    return ddim_sample(x_init, make_substep_grid(sched.T - 1, num_steps), refiner, cfg, sched, condition)
