"""Denoiser abstraction, the Gaussian-mixture posterior oracle and a small MLP.

A denoiser maps ``(x, t, condition)`` to a raster of the same shape. Its
``kind`` records what the raster means:

``eps``       the noise that produced ``x`` at step ``t``
``x0``        the clean latent
``x_t_plus``  the noisy latent at a fixed step ``t_plus`` (one-step estimator)

The MLP acts per pixel. Image features and time enter as extra input
channels; semantic features go through a zero-initialized linear projection
and are added to the latent before the network body.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy.special import logsumexp

from diffnormal.schedule import NoiseSchedule, eps_to_x0, x0_to_eps

KINDS = ("eps", "x0", "x_t_plus")
ACTIVATIONS = ("tanh", "relu", "identity")


@dataclass
class ConditionBundle:
    """Per-pixel conditioning rasters.

    ``image_features`` has shape ``(H, W, F)`` and stands in for the encoded
    input image; ``semantic_features`` (``(H, W, S)`` or ``None``) stands in
    for the processed semantic descriptors.
    """

    image_features: np.ndarray
    semantic_features: Optional[np.ndarray] = None
    injection_scale: float = 1.0

    def __post_init__(self):
        self.image_features = np.asarray(self.image_features, dtype=np.float64)
        if self.image_features.ndim == 2:
            self.image_features = self.image_features[..., None]
        if self.semantic_features is not None:
            sem = np.asarray(self.semantic_features, dtype=np.float64)
            if sem.ndim == 2:
                sem = sem[..., None]
            if sem.shape[:2] != self.image_features.shape[:2]:
                raise ValueError(
                    f"semantic features {sem.shape[:2]} not aligned with "
                    f"image features {self.image_features.shape[:2]}"
                )
            self.semantic_features = sem

    def without_semantics(self) -> "ConditionBundle":
        return ConditionBundle(self.image_features, None, self.injection_scale)

    @classmethod
    def empty(cls, height: int, width: int) -> "ConditionBundle":
        return cls(np.zeros((height, width, 0)))


@dataclass
class Denoiser:
    kind: str
    fn: Callable[[np.ndarray, int, Optional[ConditionBundle]], np.ndarray]
    t_plus: Optional[int] = None
    name: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown denoiser kind {self.kind!r}")
        if self.kind == "x_t_plus" and self.t_plus is None:
            raise ValueError("x_t_plus denoisers need their t_plus index")

    def predict(self, x, t: int, cond: Optional[ConditionBundle] = None) -> np.ndarray:
        out = np.asarray(self.fn(x, t, cond))
        if out.shape != np.shape(x):
            raise ValueError(f"{self.name or self.kind} returned {out.shape}, expected {np.shape(x)}")
        return out


def predict_eps_and_x0(den: Denoiser, x_t, t: int, cond, sched: NoiseSchedule):
    """Return ``(eps_hat, x0_hat)`` for an ``eps`` or ``x0`` denoiser."""
    if den.kind == "eps":
        eps_hat = den.predict(x_t, t, cond)
        return eps_hat, eps_to_x0(x_t, eps_hat, t, sched)
    if den.kind == "x0":
        x0_hat = den.predict(x_t, t, cond)
        return x0_to_eps(x_t, x0_hat, t, sched), x0_hat
    raise ValueError(f"{den.kind} denoiser cannot be used as a per-step denoiser")


# ---------------------------------------------------------------- mixture oracle


@dataclass(frozen=True)
class GaussianMixture:
    weights: np.ndarray
    means: np.ndarray
    stds: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        m = np.asarray(self.means, dtype=np.float64)
        s = np.asarray(self.stds, dtype=np.float64)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "stds", s)
        if not (w.ndim == m.ndim == s.ndim == 1 and len(w) == len(m) == len(s) > 0):
            raise ValueError("weights, means and stds must be equal-length 1-D arrays")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be positive and sum to 1")
        if np.any(s <= 0):
            raise ValueError("stds must be positive")


def gm_oracle_predict(gm: GaussianMixture, x_t, t: int, sched: NoiseSchedule) -> np.ndarray:
    """Exact posterior mean ``E[x0 | x_t]`` for mixture data under forward noising."""
    ab = sched.alpha_bar(sched.check_t(t))
    x = np.asarray(x_t, dtype=np.float64)[..., None]
    sa = np.sqrt(ab)
    var_k = ab * gm.stds**2 + (1.0 - ab)
    log_ev = np.log(gm.weights) - 0.5 * np.log(2 * np.pi * var_k) - 0.5 * (x - sa * gm.means) ** 2 / var_k
    log_norm = logsumexp(log_ev, axis=-1, keepdims=True)
    assert np.all(np.isfinite(log_norm)), "mixture evidence vanished"
    resp = np.exp(log_ev - log_norm)
    post_mean = gm.means + sa * gm.stds**2 / var_k * (x - sa * gm.means)
    return np.sum(resp * post_mean, axis=-1)


def gm_oracle_denoiser(gm: GaussianMixture, sched: NoiseSchedule) -> Denoiser:
    return Denoiser("x0", lambda x, t, cond: gm_oracle_predict(gm, x, t, sched), name="gm-oracle")


# ---------------------------------------------------------------- trainable MLP


def _act(name, z):
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    return z


def _act_grad(name, z, a):
    if name == "tanh":
        return 1.0 - a * a
    if name == "relu":
        return (z > 0).astype(z.dtype)
    return np.ones_like(z)


@dataclass
class Rows:
    """A flattened minibatch: one row per pixel."""

    x: np.ndarray  # (N, C) latent input
    tfeat: np.ndarray  # (N,) normalized time t / T
    cond: np.ndarray  # (N, F)
    sem: Optional[np.ndarray] = None  # (N, S), already scaled
    target: Optional[np.ndarray] = None  # (N, C)


@dataclass
class TrainableDenoiser:
    """Per-pixel MLP with a zero-initialized semantic injection projection.

    ``weights[i]`` has shape ``(fan_in, fan_out)``; ``injection`` has shape
    ``(sem_channels, channels)``.
    """

    kind: str
    channels: int
    cond_channels: int
    sem_channels: int
    hidden: tuple[int, ...]
    activation: str
    T: int
    t_plus: Optional[int] = None
    weights: list[np.ndarray] = field(default_factory=list)
    biases: list[np.ndarray] = field(default_factory=list)
    injection: np.ndarray = None
    moments: Optional[dict] = None

    @classmethod
    def init(
        cls,
        kind: str,
        channels: int,
        cond_channels: int,
        sem_channels: int = 0,
        hidden=(64, 64),
        activation: str = "tanh",
        T: int = 1000,
        t_plus: Optional[int] = None,
        seed: int = 0,
    ) -> "TrainableDenoiser":
        if kind not in KINDS:
            raise ValueError(f"unknown kind {kind!r}")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        rng = np.random.default_rng(seed)
        sizes = [channels + 1 + cond_channels, *hidden, channels]
        weights = [rng.normal(0.0, 1.0 / np.sqrt(a), size=(a, b)) for a, b in zip(sizes[:-1], sizes[1:])]
        biases = [np.zeros(b) for b in sizes[1:]]
        return cls(
            kind, channels, cond_channels, sem_channels, tuple(hidden), activation, T, t_plus,
            weights, biases, np.zeros((sem_channels, channels)),
        )

    # parameters are listed in declaration order: W0, b0, W1, b1, ..., injection
    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        out.append(self.injection)
        return out

    def set_params(self, arrays) -> None:
        arrays = list(arrays)
        n = len(self.weights)
        if len(arrays) != 2 * n + 1:
            raise ValueError(f"expected {2 * n + 1} arrays, got {len(arrays)}")
        for i in range(n):
            if arrays[2 * i].shape != self.weights[i].shape or arrays[2 * i + 1].shape != self.biases[i].shape:
                raise ValueError(f"layer {i} shape mismatch")
        if arrays[-1].shape != self.injection.shape:
            raise ValueError("injection shape mismatch")
        self.weights = [np.array(a, dtype=np.float64) for a in arrays[0:2 * n:2]]
        self.biases = [np.array(a, dtype=np.float64) for a in arrays[1:2 * n:2]]
        self.injection = np.array(arrays[-1], dtype=np.float64)

    def copy(self) -> "TrainableDenoiser":
        return TrainableDenoiser(
            self.kind, self.channels, self.cond_channels, self.sem_channels, self.hidden,
            self.activation, self.T, self.t_plus,
            [w.copy() for w in self.weights], [b.copy() for b in self.biases], self.injection.copy(),
        )

    # -- rows API

    def forward_rows(self, rows: Rows, keep: bool = False):
        x = rows.x
        if rows.sem is not None and self.sem_channels:
            x = x + rows.sem @ self.injection
        h = np.concatenate([x, rows.tfeat[:, None], rows.cond], axis=1)
        cache = [(h, None)]
        n = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            h = z if i == n - 1 else _act(self.activation, z)
            cache.append((h, z))
        if not np.all(np.isfinite(h)):
            raise FloatingPointError("non-finite activations in forward pass")
        return (h, cache) if keep else h

    def backward_rows(self, rows: Rows, cache, dout: np.ndarray) -> list[np.ndarray]:
        """Gradients of ``sum(dout * output)`` w.r.t. :meth:`params`, same order."""
        n = len(self.weights)
        gw = [None] * n
        gb = [None] * n
        delta = dout
        for i in range(n - 1, -1, -1):
            h_in = cache[i][0]
            gw[i] = h_in.T @ delta
            gb[i] = delta.sum(axis=0)
            delta = delta @ self.weights[i].T
            if i > 0:
                h_prev, z_prev = cache[i]
                delta = delta * _act_grad(self.activation, z_prev, h_prev)
        dx = delta[:, : self.channels]
        if rows.sem is not None and self.sem_channels:
            ginj = rows.sem.T @ dx
        else:
            ginj = np.zeros_like(self.injection)
        out = []
        for w, b in zip(gw, gb):
            out += [w, b]
        out.append(ginj)
        return out

    # -- raster API

    def rows_for(self, x, t, cond: Optional[ConditionBundle]) -> Rows:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 3 or x.shape[2] != self.channels:
            raise ValueError(f"latent must be (H, W, {self.channels}), got {x.shape}")
        h, w, _ = x.shape
        if cond is None:
            cond = ConditionBundle.empty(h, w)
        if cond.image_features.shape != (h, w, self.cond_channels):
            raise ValueError(
                f"image features {cond.image_features.shape} do not match ({h}, {w}, {self.cond_channels})"
            )
        sem = None
        if cond.semantic_features is not None and self.sem_channels:
            if cond.semantic_features.shape != (h, w, self.sem_channels):
                raise ValueError("semantic feature shape mismatch")
            sem = cond.injection_scale * cond.semantic_features.reshape(-1, self.sem_channels)
        tfeat = np.full(h * w, float(t) / self.T)
        return Rows(x.reshape(-1, self.channels), tfeat, cond.image_features.reshape(h * w, -1), sem)

    def as_denoiser(self) -> Denoiser:
        return Denoiser(self.kind, lambda x, t, cond: mlp_predict(self, x, t, cond), t_plus=self.t_plus, name="mlp")


def mlp_predict(net: TrainableDenoiser, x, t: int, cond: Optional[ConditionBundle]) -> np.ndarray:
    for p in net.params():
        if not np.all(np.isfinite(p)):
            raise FloatingPointError("non-finite parameters")
    rows = net.rows_for(x, t, cond)
    return net.forward_rows(rows).reshape(np.shape(x))


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"DDNZ"
CKPT_VERSION = 1
_KIND_CODES = {k: i for i, k in enumerate(KINDS)}
_ACT_CODES = {a: i for i, a in enumerate(ACTIVATIONS)}


def save_checkpoint(net: TrainableDenoiser, path) -> None:
    """Write ``DDNZ`` | version | metadata | shape table | float32 LE params."""
    params = net.params()
    head = bytearray(CKPT_MAGIC)
    head += struct.pack(
        "<BBBIIIIi",
        CKPT_VERSION,
        _KIND_CODES[net.kind],
        _ACT_CODES[net.activation],
        net.channels,
        net.cond_channels,
        net.sem_channels,
        net.T,
        -1 if net.t_plus is None else net.t_plus,
    )
    head += struct.pack("<I", len(params))
    for p in params:
        head += struct.pack("<I", p.ndim)
        head += struct.pack(f"<{p.ndim}I", *p.shape)
    payload = b"".join(np.ascontiguousarray(p, dtype="<f4").tobytes() for p in params)
    Path(path).write_bytes(bytes(head) + payload)


def load_checkpoint(path) -> TrainableDenoiser:
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a DDNZ checkpoint")
    off = 4
    version, kcode, acode, c, f, s, T, tp = struct.unpack_from("<BBBIIIIi", data, off)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off += struct.calcsize("<BBBIIIIi")
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    shapes = []
    for _ in range(count):
        (ndim,) = struct.unpack_from("<I", data, off)
        off += 4
        shapes.append(struct.unpack_from(f"<{ndim}I", data, off))
        off += 4 * ndim
    arrays = []
    for shp in shapes:
        n = int(np.prod(shp))
        if off + 4 * n > len(data):
            raise ValueError(f"{path}: truncated checkpoint")
        arrays.append(np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(shp).astype(np.float64))
        off += 4 * n
    hidden = tuple(a.shape[1] for a in arrays[0:-3:2])
    net = TrainableDenoiser(
        KINDS[kcode], c, f, s, hidden, ACTIVATIONS[acode], T, None if tp < 0 else tp,
        [np.zeros(a.shape) for a in arrays[0:-1:2]],
        [np.zeros(a.shape) for a in arrays[1:-1:2]],
        np.zeros(arrays[-1].shape),
    )
    net.set_params(arrays)
    return net
