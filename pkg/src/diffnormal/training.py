"""Adam training loop for :class:`~diffnormal.denoisers.TrainableDenoiser`."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from diffnormal.denoisers import Rows, TrainableDenoiser
from diffnormal.losses import loss_gradient, make_rows

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainingReport:
    epoch_losses: list[float] = field(default_factory=list)
    steps: int = 0

    @property
    def initial_loss(self) -> float:
        return self.epoch_losses[0]

    @property
    def final_loss(self) -> float:
        return self.epoch_losses[-1]


def adam_update(net: TrainableDenoiser, grads, lr: float, beta1=0.9, beta2=0.999, eps=1e-8) -> None:
    params = net.params()
    if net.moments is None:
        net.moments = {"t": 0, "m": [np.zeros_like(p) for p in params], "v": [np.zeros_like(p) for p in params]}
    mom = net.moments
    mom["t"] += 1
    k = mom["t"]
    new = []
    for p, g, m, v in zip(params, grads, mom["m"], mom["v"]):
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        mhat = m / (1 - beta1**k)
        vhat = v / (1 - beta2**k)
        new.append(p - lr * mhat / (np.sqrt(vhat) + eps))
    net.set_params(new)


def train_denoiser(
    net: TrainableDenoiser,
    dataset,
    loss_spec,
    epochs: int,
    lr: float = 1e-3,
    seed: int = 0,
    batch_size: int = 32,
    max_steps: int | None = None,
) -> TrainingReport:
    """Train ``net`` in place with Adam; returns per-epoch mean losses.

    ``dataset`` is either a :class:`Rows` with targets (plain regression, full
    batch when ``batch_size`` exceeds its length) or a sequence of
    ``(x0, ConditionBundle)`` examples paired with a denoising or one-step
    ``loss_spec``.
    """
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    report = TrainingReport()
    if epochs <= 0:
        return report
    rng = np.random.default_rng(seed)
    n = len(dataset.x) if isinstance(dataset, Rows) else len(dataset)
    if n == 0:
        raise ValueError("empty dataset")
    for epoch in range(epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            if isinstance(dataset, Rows):
                rows = Rows(
                    dataset.x[idx], dataset.tfeat[idx], dataset.cond[idx],
                    None if dataset.sem is None else dataset.sem[idx], dataset.target[idx],
                )
            else:
                rows = make_rows(net, loss_spec, [dataset[i] for i in idx], rng)
            loss, grads = loss_gradient(net, rows)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"loss became {loss} at epoch {epoch}, step {report.steps}")
            adam_update(net, grads, lr)
            losses.append(loss)
            report.steps += 1
            if max_steps is not None and report.steps >= max_steps:
                break
        report.epoch_losses.append(float(np.mean(losses)))
        log.debug("epoch %d loss %.6g", epoch, report.epoch_losses[-1])
        if max_steps is not None and report.steps >= max_steps:
            break
    return report
