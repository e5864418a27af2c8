"""Angular-error metrics, pixelwise variance across repeats and vector ensembling."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from diffnormal.config import format_kv

THRESHOLDS_DEG = (11.25, 22.5, 30.0)
UNIT_TOL = 1e-4


@dataclass
class NormalMap:
    """``(H, W, 3)`` unit vectors plus a boolean validity mask."""

    vectors: np.ndarray
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim != 3 or v.shape[2] != 3:
            raise ValueError(f"normal map must be (H, W, 3), got {v.shape}")
        self.vectors = v
        if self.mask is None:
            self.mask = np.ones(v.shape[:2], dtype=bool)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.shape != v.shape[:2]:
            raise ValueError("mask shape does not match the normal raster")

    @property
    def shape(self):
        return self.vectors.shape[:2]

    @classmethod
    def from_raw(cls, raw, mask=None) -> "NormalMap":
        """Normalize arbitrary 3-vectors; zero-length pixels become invalid."""
        raw = np.asarray(raw, dtype=np.float64)
        norm = np.linalg.norm(raw, axis=-1)
        ok = norm > 1e-12
        if mask is not None:
            ok &= np.asarray(mask, dtype=bool)
        out = np.zeros_like(raw)
        out[ok] = raw[ok] / norm[ok, None]
        return cls(out, ok)

    def check_unit(self, tol: float = UNIT_TOL) -> None:
        n = np.linalg.norm(self.vectors[self.mask], axis=-1)
        if n.size and np.max(np.abs(n - 1.0)) > tol:
            raise ValueError("valid pixels must hold unit vectors")


@dataclass(frozen=True)
class AngularErrorReport:
    mean_deg: float
    median_deg: float
    pct_11_25: float
    pct_22_5: float
    pct_30: float
    n_valid: int

    def to_text(self) -> str:
        return format_kv(
            {
                "mean_deg": self.mean_deg,
                "median_deg": self.median_deg,
                "pct_11_25": self.pct_11_25,
                "pct_22_5": self.pct_22_5,
                "pct_30": self.pct_30,
                "n_valid": self.n_valid,
            }
        )


def _renormalize(v: np.ndarray, mask: np.ndarray, what: str) -> np.ndarray:
    n = np.linalg.norm(v, axis=-1)
    if np.any(n[mask] <= 1e-12):
        raise ValueError(f"{what}: zero-length vector at a valid pixel")
    out = np.zeros_like(v)
    out[mask] = v[mask] / n[mask, None]
    return out


def angular_error_map(pred: NormalMap, gt: NormalMap) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel angle in degrees and the mask where both maps are valid.

    Invalid pixels carry NaN in the returned raster.
    """
    if pred.shape != gt.shape:
        raise ValueError(f"dimension mismatch {pred.shape} vs {gt.shape}")
    mask = pred.mask & gt.mask
    a = _renormalize(pred.vectors, mask, "prediction")
    b = _renormalize(gt.vectors, mask, "ground truth")
    # atan2 form of arccos(clamp(a.b)): same angle, well conditioned near 0 and 180 degrees
    dot = np.clip(np.sum(a * b, axis=-1), -1.0, 1.0)
    cross = np.linalg.norm(np.cross(a, b), axis=-1)
    err = np.degrees(np.arctan2(cross, dot))
    err[~mask] = np.nan
    return err, mask


def summarize_errors(error_map, mask) -> AngularErrorReport:
    """Mean, lower median and threshold percentages over the valid pixels."""
    vals = np.asarray(error_map, dtype=np.float64)[np.asarray(mask, dtype=bool)]
    if vals.size == 0:
        raise ValueError("no valid pixels to summarize")
    srt = np.sort(vals)
    median = srt[(srt.size - 1) // 2]
    pcts = [100.0 * np.count_nonzero(vals < th) / vals.size for th in THRESHOLDS_DEG]
    return AngularErrorReport(float(np.mean(vals)), float(median), *map(float, pcts), int(vals.size))


def evaluate(pred: NormalMap, gt: NormalMap) -> AngularErrorReport:
    # gt-invalid pixels are dropped from prediction statistics entirely
    err, mask = angular_error_map(pred, gt)
    return summarize_errors(err, mask)


@dataclass
class VarianceReport:
    """Per-pixel unbiased variance, averaged over the 3 components."""

    per_pixel: np.ndarray
    mean_variance: float
    repeats: int

    def to_text(self) -> str:
        return format_kv({"mean_variance": self.mean_variance, "repeats": self.repeats})


def _check_runs(runs: Sequence[NormalMap]):
    if not runs:
        raise ValueError("need at least one run")
    shape, mask = runs[0].shape, runs[0].mask
    for r in runs[1:]:
        if r.shape != shape:
            raise ValueError("runs differ in shape")
        if not np.array_equal(r.mask, mask):
            raise ValueError("runs differ in mask")
    return mask


def pixelwise_variance(runs: Sequence[NormalMap]) -> VarianceReport:
    mask = _check_runs(runs)
    if len(runs) < 2:
        raise ValueError("variance needs at least 2 runs")
    stack = np.stack([r.vectors for r in runs])
    # shift by the first run: same variance, exact zero for identical runs
    var = (stack - stack[0]).var(axis=0, ddof=1).mean(axis=-1)
    var[~mask] = 0.0
    mean = float(var[mask].mean()) if mask.any() else 0.0
    return VarianceReport(var, mean, len(runs))


def ensemble_mean(runs: Sequence[NormalMap]) -> NormalMap:
    """Per-pixel vector mean, renormalized; vanishing means become invalid."""
    mask = _check_runs(runs)
    for r in runs[1:]:
        mask = mask & r.mask
    mean = np.mean([r.vectors for r in runs], axis=0)
    return NormalMap.from_raw(mean, mask)
