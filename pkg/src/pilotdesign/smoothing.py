"""Kernel smoothers for data observed on a fixed grid.

Observations that share a location are aggregated into (count, sum, sum of
squares) before smoothing.  A local linear fit on the aggregated cells is
identical to the fit on the raw observations, and the GCV score only needs
the hat-matrix diagonal at occupied cells, so everything stays O(cells^2).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def gaussian(u):
    return np.exp(-0.5 * u * u)


def epanechnikov(u):
    return np.where(np.abs(u) < 1.0, 0.75 * (1.0 - u * u), 0.0)


KERNELS = {"gaussian": gaussian, "epanechnikov": epanechnikov}


@dataclass
class Cells:
    """Aggregated observations: locations, counts, sums and sums of squares."""

    points: np.ndarray  # (C, d)
    counts: np.ndarray  # (C,)
    sums: np.ndarray
    sumsq: np.ndarray

    @property
    def n_obs(self) -> float:
        return float(self.counts.sum())

    @classmethod
    def from_accumulators(cls, points, counts, sums, sumsq):
        keep = counts > 0
        pts = np.asarray(points, float)
        if pts.ndim == 1:
            pts = pts[:, None]
        return cls(pts[keep], counts[keep].astype(float), sums[keep], sumsq[keep])


def _kernel_weights(points, evals, h, kernel):
    diff = (points[None, :, :] - evals[:, None, :]) / h
    return np.prod(kernel(diff), axis=2), points[None, :, :] - evals[:, None, :]


def _solve_batched(S, b):
    """Solve S x = b for each eval point.

    Ill-conditioned systems get a small ridge; exactly singular ones (no
    data, or no spread in some direction) give NaN.
    """
    d = S.shape[-1]
    scale = np.trace(S, axis1=1, axis2=2)
    cond = np.linalg.cond(S)
    undefined = ~np.isfinite(cond) | (scale <= 1e-300)
    shaky = ~undefined & (cond > 1e12)
    S = S.copy()
    S[undefined] = np.eye(d)
    S[shaky] += 1e-10 * scale[shaky, None, None] * np.eye(d)
    out = np.linalg.solve(S, b[..., None])[..., 0]
    Sinv = np.linalg.inv(S)
    out[undefined] = np.nan
    Sinv[undefined] = np.nan
    return out, Sinv


def local_linear(cells: Cells, evals, h, kernel="gaussian", return_hat0=False):
    """Local linear estimate at ``evals`` (E, d).

    With ``return_hat0`` also returns ``k(0) * [S^-1]_00``, the hat-matrix
    diagonal when the evaluation points coincide with the cells.
    """
    kern = KERNELS[kernel]
    evals = np.asarray(evals, float)
    if evals.ndim == 1:
        evals = evals[:, None]
    Kw, D = _kernel_weights(cells.points, evals, h, kern)
    Z = np.concatenate([np.ones(D.shape[:2] + (1,)), D], axis=2)
    W = Kw * cells.counts[None, :]
    S = np.einsum("ec,eci,ecj->eij", W, Z, Z)
    b = np.einsum("ec,eci,c->ei", Kw, Z, cells.sums)
    beta, Sinv = _solve_batched(S, b)
    fit = beta[:, 0]
    if return_hat0:
        k0 = float(np.prod(kern(np.zeros(evals.shape[1]))))
        return fit, k0 * Sinv[:, 0, 0]
    return fit


def gcv_score(cells: Cells, h, kernel="gaussian") -> float:
    fit, hat = local_linear(cells, cells.points, h, kernel, return_hat0=True)
    if not np.all(np.isfinite(fit)):
        return np.inf
    N = cells.n_obs
    rss = float(np.sum(cells.sumsq - 2.0 * fit * cells.sums + cells.counts * fit * fit))
    trace = float(np.sum(cells.counts * hat))
    if trace >= N:
        return np.inf
    return (rss / N) / (1.0 - trace / N) ** 2


def select_bandwidth(cells: Cells, candidates, kernel="gaussian", fallback=None) -> float:
    """GCV choice over ``candidates``; ``fallback`` when every score is degenerate."""
    scores = np.array([gcv_score(cells, h, kernel) for h in candidates])
    if not np.isfinite(scores).any():
        if fallback is None:
            raise ValueError("GCV degenerate for every candidate bandwidth")
        return float(fallback)
    return float(candidates[int(np.nanargmin(np.where(np.isfinite(scores), scores, np.nan)))])


def bandwidth_candidates(grid, count=12) -> np.ndarray:
    grid = np.asarray(grid, float)
    span = grid[-1] - grid[0]
    step = np.min(np.diff(grid)) if len(grid) > 1 else span
    lo = 0.5 * step
    hi = max(span / 2.0, lo * 1.01)
    return np.geomspace(lo, hi, count)


def rotated_diagonal(cells: Cells, diag_points, h, kernel="gaussian") -> np.ndarray:
    """Covariance-surface diagonal from off-diagonal cells.

    At each diagonal point ``t0`` fits ``b0 + b1 (u - t0) + b2 d^2`` with
    ``u = (s + t)/2`` along and ``d = s - t`` across the diagonal, so the
    curvature across the ridge does not bias ``b0``.
    """
    kern = KERNELS[kernel]
    s, t = cells.points[:, 0], cells.points[:, 1]
    u, d = 0.5 * (s + t), s - t
    t0 = np.asarray(diag_points, float)
    du = u[None, :] - t0[:, None]
    Kw = kern(du / h) * kern(d / h)[None, :]
    Z = np.stack([np.ones_like(du), du, np.broadcast_to(d * d, du.shape)], axis=2)
    W = Kw * cells.counts[None, :]
    S = np.einsum("ec,eci,ecj->eij", W, Z, Z)
    b = np.einsum("ec,eci,c->ei", Kw, Z, cells.sums)
    beta, _ = _solve_batched(S, b)
    return beta[:, 0]
