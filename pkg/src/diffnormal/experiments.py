"""Toy image-to-normal experiments wiring the estimator, refiner and samplers together."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from diffnormal.denoisers import Rows, TrainableDenoiser
from diffnormal.losses import DenoisingSpec, ShrinkageConfig, YosoSpec, loss_gradient
from diffnormal.metrics import NormalMap
from diffnormal.samplers import SamplerConfig, full_chain_sample, heuristic_sample
from diffnormal.schedule import NoiseSchedule, make_linear_schedule
from diffnormal.toygen import SceneSample, make_scenes
from diffnormal.training import adam_update, train_denoiser

PATCH_CHANNELS = 9


@dataclass(frozen=True)
class ToySetup:
    """Sizes and budgets for the toy task (16x16 training scenes by default)."""

    resolution: tuple[int, int] = (16, 16)
    n_train: int = 96
    n_bumps: int = 3
    hidden: tuple[int, ...] = (64, 64)
    activation: str = "tanh"
    steps: int = 2500
    batch_size: int = 8
    lr: float = 1e-3
    T: int = 1000
    t_plus: int = 401  # one-based
    width: tuple[float, float] = (0.05, 0.18)
    refiner_t_max: int | None = None

    @property
    def sched(self) -> NoiseSchedule:
        return make_linear_schedule(self.T)

    def __post_init__(self):
        if not 1 <= self.t_plus <= self.T:
            raise ValueError(f"t_plus must lie in [1, {self.T}]")

    @property
    def t_plus_index(self) -> int:
        return self.t_plus - 1


def training_scenes(setup: ToySetup, seed) -> list[SceneSample]:
    return make_scenes(seed, setup.n_train, n_bumps=setup.n_bumps, resolution=setup.resolution, width=setup.width)


def heldout_scenes(seed, count: int = 8, resolution=(32, 32), high_frequency: bool = False, n_bumps: int = 4):
    """Evaluation scenes; ``high_frequency`` narrows the bumps."""
    width = (0.05, 0.09) if high_frequency else (0.08, 0.18)
    return make_scenes(seed, count, n_bumps=n_bumps, resolution=resolution, width=width)


def new_yoso(setup: ToySetup, seed) -> TrainableDenoiser:
    return TrainableDenoiser.init(
        "x_t_plus", 3, PATCH_CHANNELS, 0, setup.hidden, setup.activation, setup.T, setup.t_plus_index, seed=seed
    )


def new_refiner(setup: ToySetup, seed, semantic: bool = True) -> TrainableDenoiser:
    return TrainableDenoiser.init(
        "x0", 3, PATCH_CHANNELS, PATCH_CHANNELS if semantic else 0, setup.hidden, setup.activation, setup.T,
        seed=seed,
    )


def train_yoso(
    setup: ToySetup, scenes, lam: float = 0.4, seed: int = 0, steps: int | None = None, shared_noise: bool = False,
    sched: NoiseSchedule | None = None,
):
    net = new_yoso(setup, seed)
    data = [(s.x0, s.condition(with_semantics=False)) for s in scenes]
    spec = YosoSpec(setup.t_plus_index, sched or setup.sched, ShrinkageConfig(lam, seed, shared_noise))
    report = train_denoiser(
        net, data, spec, epochs=10**9, lr=setup.lr, seed=seed, batch_size=setup.batch_size,
        max_steps=steps or setup.steps,
    )
    return net, report


def train_refiner(
    setup: ToySetup, scenes, seed: int = 0, semantic: bool = True, steps: int | None = None,
    sched: NoiseSchedule | None = None,
):
    net = new_refiner(setup, seed, semantic)
    data = [(s.x0, s.condition(with_semantics=semantic)) for s in scenes]
    report = train_denoiser(
        net, data, DenoisingSpec("x0", sched or setup.sched, setup.refiner_t_max), epochs=10**9, lr=setup.lr, seed=seed,
        batch_size=setup.batch_size, max_steps=steps or setup.steps,
    )
    return net, report


def to_normals(latent) -> NormalMap:
    return NormalMap.from_raw(latent)


# ---------------------------------------------------------------- variance harness


def run_repeats(sample_fn, repeats: int, seed: int):
    """Call ``sample_fn(seed + i)`` for ``i < repeats``.

    Returns the normal maps and the cumulative wall time after each run.
    """
    maps, elapsed = [], []
    t0 = time.perf_counter()
    for i in range(repeats):
        maps.append(to_normals(sample_fn(seed + i)))
        elapsed.append(time.perf_counter() - t0)
    return maps, elapsed


def two_stage_fn(cond, yoso, refiner, sched, tau=0.0, yoso_input="sampled", t_plus=401, num_steps=10):
    def fn(seed):
        cfg = SamplerConfig(tau=tau, num_steps=num_steps, t_plus=t_plus, seed=seed, yoso_input=yoso_input)
        return heuristic_sample(cond, yoso.as_denoiser(), refiner.as_denoiser(), cfg, sched).final

    return fn


def full_chain_fn(cond, refiner, sched, tau=0.5, num_steps=50):
    def fn(seed):
        return full_chain_sample(cond, refiner.as_denoiser(), sched, num_steps=num_steps, tau=tau, seed=seed).final

    return fn


def ensemble_curve(maps) -> list[tuple[int, float]]:
    """Variance of ``k``-run ensembles for ``k = 1 .. R``.

    For each ``k`` the ``R`` cyclic windows ``runs[i : i + k]`` (indices mod
    ``R``) are averaged and renormalized, and the mean per-pixel variance is
    taken across those ``R`` ensemble outputs. ``k = 1`` is the plain
    run-to-run variance; ``k = R`` is zero by construction.
    """
    stack = np.stack([m.vectors for m in maps])
    mask = maps[0].mask
    r = len(maps)
    if r < 2:
        raise ValueError("need at least 2 runs")
    out = []
    for k in range(1, r + 1):
        idx = np.sort((np.arange(r)[:, None] + np.arange(k)) % r, axis=1)  # fixed order: k = R is exactly 0
        means = stack[idx].mean(axis=1)
        norm = np.linalg.norm(means, axis=-1, keepdims=True)
        means = means / np.maximum(norm, 1e-12)
        var = (means - means[0]).var(axis=0, ddof=1).mean(axis=-1)
        out.append((k, float(var[mask].mean()) if mask.any() else 0.0))
    return out


# ---------------------------------------------------------------- shrinkage (many-to-one) study


@dataclass(frozen=True)
class ManyToOneSetup:
    """Finite many-to-one data: each scene is paired with ``draws`` fixed inputs and noisy targets."""

    n_scenes: int = 64
    draws: int = 3
    resolution: tuple[int, int] = (8, 8)
    hidden: tuple[int, ...] = (64, 64)
    steps: int = 2000
    batch_size: int = 8
    lr: float = 1e-3
    T: int = 1000
    t_plus_index: int = 400
    eval_draws: int = 32


def many_to_one_std(setup: ManyToOneSetup, lam: float, seed: int) -> float:
    """Train a one-step estimator with gate ``lam``; return its output std across fresh input draws.

    Data, initialization and minibatch order depend only on ``seed``, so a
    pair of calls with different ``lam`` is matched in everything but the gate.
    """
    sched = make_linear_schedule(setup.T)
    rng = np.random.default_rng(seed)
    scenes = make_scenes(seed, setup.n_scenes, resolution=setup.resolution)
    h, w = setup.resolution
    x0 = np.stack([s.x0 for s in scenes])
    img = np.stack([s.condition(False).image_features for s in scenes])
    ab = sched.alpha_bar(setup.t_plus_index)
    shape = (setup.n_scenes, setup.draws, h, w, 3)
    x_inf = rng.standard_normal(shape)
    targets = np.sqrt(ab) * x0[:, None] + np.sqrt(1.0 - ab) * rng.standard_normal(shape)
    net = TrainableDenoiser.init("x_t_plus", 3, PATCH_CHANNELS, 0, setup.hidden, "tanh", setup.T,
                                 setup.t_plus_index, seed=seed)
    tfeat = np.full(setup.batch_size * h * w, setup.t_plus_index / setup.T)
    gate_rng = np.random.default_rng([seed, 1])
    for _ in range(setup.steps):
        i = rng.integers(0, setup.n_scenes, setup.batch_size)
        k = rng.integers(0, setup.draws, setup.batch_size)
        p = gate_rng.uniform(size=setup.batch_size)
        x = np.where((p >= lam)[:, None, None, None], x_inf[i, k], 0.0)
        rows = Rows(x.reshape(-1, 3), tfeat, img[i].reshape(-1, PATCH_CHANNELS), None, targets[i, k].reshape(-1, 3))
        _, grads = loss_gradient(net, rows)
        adam_update(net, grads, setup.lr)
    ev = np.random.default_rng([seed, 2])
    test = make_scenes([seed, 3], 8, resolution=setup.resolution)
    den = net.as_denoiser()
    stds = []
    for s in test:
        cond = s.condition(False)
        outs = np.stack([den.predict(ev.standard_normal((h, w, 3)), setup.t_plus_index, cond)
                         for _ in range(setup.eval_draws)])
        stds.append(outs.std(axis=0).mean())
    return float(np.mean(stds))
