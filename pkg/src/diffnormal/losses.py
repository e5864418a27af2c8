"""Denoising objectives, the shrinkage-gated one-step loss and MLP gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from diffnormal.denoisers import ConditionBundle, Denoiser, Rows, TrainableDenoiser
from diffnormal.schedule import NoiseSchedule, forward_diffuse

GENERATIVE = "generative"
SHRUNK = "shrunk"
NA = "n/a"


@dataclass(frozen=True)
class ShrinkageConfig:
    """Gate for the one-step loss: input is zeroed when ``p < lam``, ``p ~ U(0, 1)``.

    ``shared_noise`` reuses the generative input draw as the target noise
    (ablation only; the default draws them independently).
    """

    lam: float = 0.4
    rng_seed: int = 0
    shared_noise: bool = False

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lam must be in [0, 1], got {self.lam}")


@dataclass
class LossSample:
    value: float
    branch: str = NA
    residual: Optional[np.ndarray] = None


def _mse(pred, target, branch=NA) -> LossSample:
    if np.shape(pred) != np.shape(target):
        raise ValueError(f"shape mismatch {np.shape(pred)} vs {np.shape(target)}")
    r = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    return LossSample(float(np.mean(r * r)), branch, r)


def denoising_loss(
    denoiser: Denoiser,
    target_kind: str,
    x0,
    t: int,
    eps,
    condition: Optional[ConditionBundle],
    sched: NoiseSchedule,
) -> LossSample:
    """MSE between the denoiser's prediction at ``forward_diffuse(x0, t, eps)`` and ``eps`` or ``x0``."""
    if target_kind not in ("eps", "x0"):
        raise ValueError(f"target kind must be 'eps' or 'x0', got {target_kind!r}")
    if denoiser.kind != target_kind:
        raise ValueError(f"{denoiser.kind} denoiser cannot be trained on a {target_kind} target")
    x_t = forward_diffuse(x0, t, eps, sched)
    pred = denoiser.predict(x_t, t, condition)
    return _mse(pred, eps if target_kind == "eps" else x0)


def yoso_shrinkage_loss(
    yoso: Denoiser,
    x0,
    t_plus: int,
    condition: Optional[ConditionBundle],
    cfg: ShrinkageConfig,
    sched: NoiseSchedule,
    rng: np.random.Generator,
) -> LossSample:
    """One draw of the gated one-step objective.

    The target is ``x0`` noised to ``t_plus``; the input is a fresh Gaussian
    sample when the gate passes and the zero field otherwise.
    """
    if yoso.kind != "x_t_plus":
        raise ValueError(f"one-step loss needs an x_t_plus denoiser, got {yoso.kind}")
    t_plus = sched.check_t(t_plus)
    x0 = np.asarray(x0, dtype=np.float64)
    p = rng.uniform()
    x_inf = rng.standard_normal(x0.shape)
    eps_t = x_inf if cfg.shared_noise else rng.standard_normal(x0.shape)
    target = forward_diffuse(x0, t_plus, eps_t, sched)
    if p >= cfg.lam:
        return _mse(yoso.predict(x_inf, t_plus, condition), target, GENERATIVE)
    return _mse(yoso.predict(np.zeros_like(x0), t_plus, condition), target, SHRUNK)


def loss_gradient(net: TrainableDenoiser, rows: Rows):
    """Mean squared error over all elements of ``rows`` and its exact gradient.

    Returns ``(loss, grads)`` with ``grads`` ordered like ``net.params()``.
    """
    if rows.target is None or len(rows.x) == 0:
        raise ValueError("need a nonempty batch with targets")
    out, cache = net.forward_rows(rows, keep=True)
    r = out - rows.target
    loss = float(np.mean(r * r))
    grads = net.backward_rows(rows, cache, 2.0 * r / r.size)
    return loss, grads


# ---------------------------------------------------------------- batch builders


@dataclass(frozen=True)
class DenoisingSpec:
    """Random-timestep denoising objective for ``eps`` or ``x0`` networks."""

    target_kind: str
    sched: NoiseSchedule
    t_max: Optional[int] = None


@dataclass(frozen=True)
class YosoSpec:
    t_plus: int
    sched: NoiseSchedule
    shrinkage: ShrinkageConfig = ShrinkageConfig()


def _stack(examples):
    x0 = np.stack([np.asarray(e[0], dtype=np.float64) for e in examples])
    conds = [e[1] for e in examples]
    img = np.stack([c.image_features for c in conds])
    if all(c.semantic_features is not None for c in conds):
        sem = np.stack([c.injection_scale * c.semantic_features for c in conds])
    else:
        sem = None
    return x0, img, sem


def make_rows(net: TrainableDenoiser, spec, examples, rng: np.random.Generator) -> Rows:
    """Draw noise, timesteps and gates for a minibatch and flatten it to rows.

    ``examples`` is a sequence of ``(x0, ConditionBundle)`` pairs.
    """
    x0, img, sem = _stack(examples)
    b, h, w, c = x0.shape
    npix = h * w
    sched = spec.sched
    if isinstance(spec, DenoisingSpec):
        if net.kind != spec.target_kind:
            raise ValueError(f"{net.kind} network cannot be trained on a {spec.target_kind} target")
        t_hi = sched.T - 1 if spec.t_max is None else spec.t_max
        ts = rng.integers(0, t_hi + 1, size=b)
        eps = rng.standard_normal(x0.shape)
        ab = sched.alpha_bars[ts][:, None, None, None]
        x_in = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
        target = eps if spec.target_kind == "eps" else x0
    elif isinstance(spec, YosoSpec):
        if net.kind != "x_t_plus":
            raise ValueError("one-step objective needs an x_t_plus network")
        ts = np.full(b, spec.t_plus)
        p = rng.uniform(size=b)
        x_inf = rng.standard_normal(x0.shape)
        eps_t = x_inf if spec.shrinkage.shared_noise else rng.standard_normal(x0.shape)
        ab = sched.alpha_bar(spec.t_plus)
        target = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps_t
        gate = (p >= spec.shrinkage.lam)[:, None, None, None]
        x_in = np.where(gate, x_inf, 0.0)
    else:
        raise TypeError(f"unsupported loss spec {type(spec).__name__}")
    tfeat = np.repeat(ts / net.T, npix).astype(np.float64)
    return Rows(
        x_in.reshape(-1, c),
        tfeat,
        img.reshape(b * npix, -1),
        None if sem is None else sem.reshape(b * npix, -1),
        target.reshape(-1, c),
    )
