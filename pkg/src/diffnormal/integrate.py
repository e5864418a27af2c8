"""Depth from normals by weighted least squares on forward differences.

The energy is ``sum w * [(dz/dx - p)^2 + (dz/dy - q)^2]`` over neighbouring
valid pixel pairs; pairs that leave the mask contribute nothing (reflective
boundary). Each 4-connected mask component is solved by conjugate gradient
on its normal equations with its first pixel (scan order) pinned to zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy import ndimage

from diffnormal.metrics import NormalMap


@dataclass
class DepthField:
    depth: np.ndarray
    mask: np.ndarray
    converged: bool = True
    iterations: list[int] = field(default_factory=list)
    n_components: int = 1


class NotConverged(RuntimeError):
    pass


def normals_to_gradients(n: NormalMap, z_floor: float = 0.05):
    """Orthographic slopes ``p = -nx/nz``, ``q = -ny/nz`` with ``nz`` clamped at ``z_floor``.

    The weight raster is the clamped ``nz``, which down-weights grazing normals.
    """
    if z_floor <= 0:
        raise ValueError("z_floor must be positive")
    v = n.vectors
    nz = np.maximum(v[..., 2], z_floor)
    p = -v[..., 0] / nz
    q = -v[..., 1] / nz
    w = nz.copy()
    p[~n.mask] = 0.0
    q[~n.mask] = 0.0
    w[~n.mask] = 0.0
    return p, q, w


def conjugate_gradient(A, b, tol: float, max_iter: int, x0=None):
    """Plain CG for SPD ``A``. Returns ``(x, residual_norms, converged)``.

    ``residual_norms[k]`` is ``||b - A x_k||`` after ``k`` iterations.
    """
    x = np.zeros_like(b) if x0 is None else x0.copy()
    r = b - A @ x
    d = r.copy()
    rs = float(r @ r)
    target = tol * np.sqrt(rs)
    history = [np.sqrt(rs)]
    if history[0] <= target or history[0] == 0.0:
        return x, history, True
    for _ in range(max_iter):
        Ad = A @ d
        alpha = rs / float(d @ Ad)
        x += alpha * d
        r -= alpha * Ad
        rs_new = float(r @ r)
        history.append(np.sqrt(rs_new))
        if history[-1] <= target:
            return x, history, True
        d = r + (rs_new / rs) * d
        rs = rs_new
    return x, history, False


def difference_system(p, q, weights, mask, spacing=(1.0, 1.0)):
    """Sparse difference operator ``D``, edge weights and right-hand side for the valid pixels.

    Returns ``(D, w, g, index)`` where ``index`` maps pixels to unknown numbers
    (``-1`` outside the mask).
    """
    mask = np.asarray(mask, dtype=bool)
    h, w_ = mask.shape
    index = -np.ones(mask.shape, dtype=np.int64)
    index[mask] = np.arange(np.count_nonzero(mask))
    dx, dy = spacing
    rows, cols, vals, wts, rhs = [], [], [], [], []
    e = 0
    # horizontal pairs (i, j) -> (i, j+1), then vertical (i, j) -> (i+1, j)
    for a_sl, b_sl, grad, step in (
        ((slice(None), slice(0, w_ - 1)), (slice(None), slice(1, w_)), p, dx),
        ((slice(0, h - 1), slice(None)), (slice(1, h), slice(None)), q, dy),
    ):
        both = mask[a_sl] & mask[b_sl]
        ia = index[a_sl][both]
        ib = index[b_sl][both]
        m = ia.size
        ids = np.arange(e, e + m)
        rows += [ids, ids]
        cols += [ib, ia]
        vals += [np.ones(m), -np.ones(m)]
        wts.append(0.5 * (weights[a_sl][both] + weights[b_sl][both]))
        rhs.append(0.5 * step * (grad[a_sl][both] + grad[b_sl][both]))
        e += m
    n = int(mask.sum())
    D = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(e, n))
    return D, np.concatenate(wts), np.concatenate(rhs), index


def integrate_depth(
    p, q, weights, mask, tol: float = 1e-10, max_iter: int | None = None, spacing=(1.0, 1.0),
    raise_on_failure: bool = False,
) -> DepthField:
    """Weighted least-squares depth, one pinned pixel per connected mask component."""
    mask = np.asarray(mask, dtype=bool)
    p, q, weights = (np.asarray(a, dtype=np.float64) for a in (p, q, weights))
    if not (p.shape == q.shape == weights.shape == mask.shape):
        raise ValueError("p, q, weights and mask must share one shape")
    if not mask.any():
        raise ValueError("mask has no valid pixel")
    if tol <= 0:
        raise ValueError("tol must be positive")
    h, w = mask.shape
    max_iter = 10 * h * w if max_iter is None else max_iter
    D, wt, g, index = difference_system(p, q, weights, mask, spacing)
    labels, ncomp = ndimage.label(mask)
    z = np.zeros(int(mask.sum()))
    converged = True
    iters = []
    lab_flat = labels[mask]
    for c in range(1, ncomp + 1):
        members = np.flatnonzero(lab_flat == c)
        free = members[1:]  # members[0] is the first pixel of the component in scan order
        if free.size == 0:
            iters.append(0)
            continue
        Dc = D[:, free]
        edges = np.flatnonzero(np.asarray(abs(D[:, members]).sum(axis=1)).ravel())
        Dc = Dc[edges]
        Wc = sp.diags(wt[edges])
        A = (Dc.T @ Wc @ Dc).tocsr()
        b = Dc.T @ (wt[edges] * g[edges])
        zc, hist, ok = conjugate_gradient(A, b, tol, max_iter)
        z[free] = zc
        iters.append(len(hist) - 1)
        converged &= ok
    depth = np.zeros(mask.shape)
    depth[mask] = z
    if raise_on_failure and not converged:
        raise NotConverged(f"CG did not reach tol={tol} within {max_iter} iterations")
    return DepthField(depth, mask, converged, iters, ncomp)


def integrate_normals(n: NormalMap, z_floor: float = 0.05, spacing=(1.0, 1.0), **kw) -> DepthField:
    p, q, w = normals_to_gradients(n, z_floor)
    return integrate_depth(p, q, w, n.mask, spacing=spacing, **kw)


def depth_rmse(pred: DepthField, gt: DepthField) -> float:
    """RMSE after removing each field's mean over the shared mask."""
    mask = pred.mask & gt.mask
    if not mask.any():
        raise ValueError("no shared valid pixels")
    a = pred.depth[mask] - pred.depth[mask].mean()
    b = gt.depth[mask] - gt.depth[mask].mean()
    return float(np.sqrt(np.mean((a - b) ** 2)))


def write_ascii_mesh(path, depth: DepthField, spacing=(1.0, 1.0)) -> None:
    """``v x y z`` lines for valid pixels, ``f a b c`` (1-based) for grid triangles."""
    mask = depth.mask
    h, w = mask.shape
    index = -np.ones(mask.shape, dtype=np.int64)
    index[mask] = np.arange(1, mask.sum() + 1)
    lines = []
    for i, j in zip(*np.nonzero(mask)):
        lines.append(f"v {j * spacing[0]:.9g} {i * spacing[1]:.9g} {depth.depth[i, j]:.9g}")
    for i in range(h - 1):
        for j in range(w - 1):
            a, b, c, d = index[i, j], index[i, j + 1], index[i + 1, j], index[i + 1, j + 1]
            if a > 0 and b > 0 and c > 0:
                lines.append(f"f {a} {b} {c}")
            if b > 0 and d > 0 and c > 0:
                lines.append(f"f {b} {d} {c}")
    Path(path).write_text("\n".join(lines) + "\n")
