"""Analytic ground truth: Gaussian-mixture draws and bump heightfield scenes.

A heightfield lives on the unit square: column ``j`` sits at
``x = j / (W - 1)``, row ``i`` at ``y = i / (H - 1)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from diffnormal.denoisers import ConditionBundle, GaussianMixture
from diffnormal.metrics import NormalMap
from diffnormal.normal_io import read_float_raster, read_normal_map, write_float_raster, write_normal_map

DEFAULT_LIGHT = tuple(np.array([0.35, 0.25, 1.0]) / np.linalg.norm([0.35, 0.25, 1.0]))
DEFAULT_AMBIENT = 0.1


def sample_gaussian_mixture(gm: GaussianMixture, n: int, seed) -> np.ndarray:
    if n < 0:
        raise ValueError("n must be >= 0")
    rng = np.random.default_rng(seed)
    comp = rng.choice(len(gm.weights), size=n, p=gm.weights)
    return gm.means[comp] + gm.stds[comp] * rng.standard_normal(n)


@dataclass(frozen=True)
class Bump:
    cx: float
    cy: float
    amplitude: float
    width: float


@dataclass(frozen=True)
class HeightField:
    bumps: tuple[Bump, ...]
    plane: tuple[float, float, float]
    resolution: tuple[int, int]

    def __post_init__(self):
        h, w = self.resolution
        if h < 2 or w < 2:
            raise ValueError(f"resolution must be at least 2x2, got {self.resolution}")
        if any(b.width <= 0 for b in self.bumps):
            raise ValueError("bump widths must be positive")

    @property
    def spacing(self) -> tuple[float, float]:
        """Grid step ``(dx, dy)`` between neighbouring columns and rows."""
        h, w = self.resolution
        return 1.0 / (w - 1), 1.0 / (h - 1)

    def grid(self):
        h, w = self.resolution
        return np.meshgrid(np.linspace(0.0, 1.0, w), np.linspace(0.0, 1.0, h))

    def height_at(self, x, y) -> np.ndarray:
        a, b, c = self.plane
        z = a * np.asarray(x, dtype=np.float64) + b * np.asarray(y, dtype=np.float64) + c
        for bp in self.bumps:
            z = z + bp.amplitude * np.exp(-((x - bp.cx) ** 2 + (y - bp.cy) ** 2) / (2 * bp.width**2))
        return z

    def gradient_at(self, x, y):
        a, b, _ = self.plane
        zx = np.full(np.shape(x), a, dtype=np.float64)
        zy = np.full(np.shape(y), b, dtype=np.float64)
        for bp in self.bumps:
            k = bp.amplitude * np.exp(-((x - bp.cx) ** 2 + (y - bp.cy) ** 2) / (2 * bp.width**2))
            zx = zx - k * (x - bp.cx) / bp.width**2
            zy = zy - k * (y - bp.cy) / bp.width**2
        return zx, zy

    def heights(self) -> np.ndarray:
        return self.height_at(*self.grid())

    def semantic(self) -> np.ndarray:
        """Summed unsigned bump kernels, scaled into ``[0, 1]``."""
        x, y = self.grid()
        s = np.zeros_like(x)
        for bp in self.bumps:
            s += np.exp(-((x - bp.cx) ** 2 + (y - bp.cy) ** 2) / (2 * bp.width**2))
        top = s.max()
        return s / top if top > 0 else s


def make_heightfield(
    seed,
    n_bumps: int,
    resolution=(16, 16),
    amplitude=(0.04, 0.12),
    width=(0.08, 0.18),
    tilt: float = 0.2,
) -> HeightField:
    """Random bumps over a gently tilted plane; reproducible from ``seed``.

    Bump amplitudes have random sign with magnitude in ``amplitude``; widths
    are uniform in ``width``.
    """
    if n_bumps < 0:
        raise ValueError("n_bumps must be >= 0")
    if isinstance(resolution, int):
        resolution = (resolution, resolution)
    if min(resolution) <= 0:
        raise ValueError("zero resolution")
    rng = np.random.default_rng(seed)
    plane = (float(rng.uniform(-tilt, tilt)), float(rng.uniform(-tilt, tilt)), 0.0)
    bumps = []
    for _ in range(n_bumps):
        cx, cy = rng.uniform(0.0, 1.0, size=2)
        amp = rng.uniform(*amplitude) * rng.choice([-1.0, 1.0])
        bumps.append(Bump(float(cx), float(cy), float(amp), float(rng.uniform(*width))))
    return HeightField(tuple(bumps), plane, tuple(int(r) for r in resolution))


def heightfield_normal_map(hf: HeightField) -> NormalMap:
    zx, zy = hf.gradient_at(*hf.grid())
    raw = np.stack([-zx, -zy, np.ones_like(zx)], axis=-1)
    return NormalMap(raw / np.linalg.norm(raw, axis=-1, keepdims=True))


def render_shading(normals: NormalMap, light_dir=DEFAULT_LIGHT, ambient: float = DEFAULT_AMBIENT) -> np.ndarray:
    """Lambertian shading ``clip(ambient + (1 - ambient) * max(0, n.l), 0, 1)``."""
    light = np.asarray(light_dir, dtype=np.float64)
    if light.shape != (3,) or abs(np.linalg.norm(light) - 1.0) > 1e-9:
        raise ValueError("light direction must be a unit 3-vector")
    if not 0.0 <= ambient < 1.0:
        raise ValueError("ambient must lie in [0, 1)")
    lam = np.maximum(0.0, normals.vectors @ light)
    s = np.clip(ambient + (1.0 - ambient) * lam, 0.0, 1.0)
    s[~normals.mask] = 0.0
    return s


def patch_features(raster: np.ndarray, radius: int = 1) -> np.ndarray:
    """Stack the ``(2r+1)**2`` neighbours of every pixel (reflect padding) as channels."""
    raster = np.asarray(raster, dtype=np.float64)
    pad = np.pad(raster, radius, mode="reflect")
    h, w = raster.shape
    k = 2 * radius + 1
    return np.stack([pad[i : i + h, j : j + w] for i in range(k) for j in range(k)], axis=-1)


@dataclass
class SceneSample:
    shading: np.ndarray
    normals_gt: NormalMap
    semantic: np.ndarray
    height: np.ndarray = field(repr=False)

    def condition(self, with_semantics: bool = True, radius: int = 1) -> ConditionBundle:
        """Image features are shading patches; semantic features are descriptor patches."""
        sem = patch_features(self.semantic, radius) if with_semantics else None
        return ConditionBundle(patch_features(self.shading, radius), sem)

    @property
    def x0(self) -> np.ndarray:
        return self.normals_gt.vectors


def make_scene(
    seed,
    n_bumps: int = 3,
    resolution=(16, 16),
    width=(0.08, 0.18),
    amplitude=(0.04, 0.12),
    light_dir=DEFAULT_LIGHT,
    ambient: float = DEFAULT_AMBIENT,
) -> SceneSample:
    hf = make_heightfield(seed, n_bumps, resolution, amplitude=amplitude, width=width)
    normals = heightfield_normal_map(hf)
    return SceneSample(render_shading(normals, light_dir, ambient), normals, hf.semantic(), hf.heights())


def make_scenes(seed, count: int, **kw) -> list[SceneSample]:
    seeds = np.random.SeedSequence(seed).spawn(count)
    return [make_scene(s, **kw) for s in seeds]


# ---------------------------------------------------------------- dataset manifests

INDEX_NAME = "index.txt"


def write_split(directory, scenes) -> Path:
    """Write numbered rasters and a plain-text index (one scene id per line)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    ids = []
    for i, sc in enumerate(scenes):
        sid = f"{i:05d}"
        write_float_raster(d / f"{sid}_shading.dnfr", sc.shading)
        write_float_raster(d / f"{sid}_semantic.dnfr", sc.semantic)
        write_float_raster(d / f"{sid}_height.dnfr", sc.height)
        write_normal_map(d / f"{sid}_normals", sc.normals_gt)
        ids.append(sid)
    (d / INDEX_NAME).write_text("".join(f"{sid}\n" for sid in ids))
    return d


def read_split(directory) -> list[SceneSample]:
    d = Path(directory)
    index = d / INDEX_NAME
    if not index.exists():
        raise FileNotFoundError(f"{d}: missing {INDEX_NAME}")
    out = []
    for sid in index.read_text().split():
        out.append(
            SceneSample(
                read_float_raster(d / f"{sid}_shading.dnfr")[..., 0].astype(np.float64),
                read_normal_map(d / f"{sid}_normals.dnfr"),
                read_float_raster(d / f"{sid}_semantic.dnfr")[..., 0].astype(np.float64),
                read_float_raster(d / f"{sid}_height.dnfr")[..., 0].astype(np.float64),
            )
        )
    return out
