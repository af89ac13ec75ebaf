"""Sparse functional PCA through conditional expectation (PACE).

Mean and covariance are estimated from the data pooled over subjects with
local linear smoothers, the eigenproblem is discretised on the grid with
trapezoid weights, and each subject's scores are best linear predictions
given that subject's few noisy observations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import smoothing
from .errors import (
    DegenerateCovariance,
    InsufficientData,
    ShapeMismatch,
    SingularConditioning,
    ValidationError,
)

COND_LIMIT = 1e12
RIDGE_FACTOR = 1e-8


def trapezoid_weights(grid) -> np.ndarray:
    grid = np.asarray(grid, float)
    if len(grid) == 1:
        return np.ones(1)
    h = np.diff(grid)
    w = np.zeros_like(grid)
    w[:-1] += h / 2
    w[1:] += h / 2
    return w


@dataclass(frozen=True, eq=False)
class SparseDataset:
    """Per-subject observations on a common grid.

    ``subjects[i]`` is ``(indices, values)`` with strictly increasing grid
    indices in ``[0, v)``.
    """

    grid: np.ndarray
    subjects: tuple

    def __post_init__(self):
        grid = np.asarray(self.grid, float)
        if grid.ndim != 1 or len(grid) < 1:
            raise ValidationError("grid must be a non-empty vector")
        if np.any(np.diff(grid) <= 0):
            raise ValidationError("grid must be strictly increasing")
        subjects = []
        for i, (idx, val) in enumerate(self.subjects):
            idx = np.asarray(idx, dtype=np.int64)
            val = np.asarray(val, dtype=float)
            if idx.shape != val.shape or idx.ndim != 1:
                raise ShapeMismatch(f"subject {i}: indices and values differ in shape")
            if idx.size and (idx.min() < 0 or idx.max() >= len(grid)):
                raise ValidationError(f"subject {i}: grid index out of range")
            if np.any(np.diff(idx) <= 0):
                raise ValidationError(f"subject {i}: indices must be strictly increasing")
            if not np.all(np.isfinite(val)):
                raise ValidationError(f"subject {i}: non-finite observation")
            subjects.append((idx, val))
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "subjects", tuple(subjects))

    @property
    def n(self) -> int:
        return len(self.subjects)

    @property
    def v(self) -> int:
        return len(self.grid)

    @property
    def counts(self) -> np.ndarray:
        return np.array([len(idx) for idx, _ in self.subjects])

    def pooled(self):
        idx = np.concatenate([s[0] for s in self.subjects]) if self.subjects else np.array([], int)
        val = np.concatenate([s[1] for s in self.subjects]) if self.subjects else np.array([])
        return idx, val


@dataclass(frozen=True)
class PaceOptions:
    """Smoothing and component-selection settings.

    ``bandwidth_mean``/``bandwidth_cov`` of None select by GCV over a fixed
    candidate grid.  ``n_components`` fixes M; otherwise the smallest M with
    FVE >= ``fve_threshold`` is used, capped by ``max_components``.

    ``estimate_method="auto"`` uses plain sample moments when every subject is
    observed on the whole grid and the data are declared noiseless, and
    kernel smoothing otherwise.
    """

    bandwidth_mean: float | None = None
    bandwidth_cov: float | None = None
    kernel: str = "gaussian"
    n_bandwidths: int = 12
    fve_threshold: float = 0.95
    n_components: int | None = None
    max_components: int | None = None
    assume_noisy: bool = True
    estimate_method: str = "auto"
    sigma2_interval: tuple = (0.25, 0.75)

    def __post_init__(self):
        if self.kernel not in smoothing.KERNELS:
            raise ValidationError(f"unknown kernel {self.kernel!r}")
        if self.estimate_method not in ("auto", "smooth", "cross-sectional"):
            raise ValidationError(
                "estimate_method must be 'auto', 'smooth' or 'cross-sectional'")
        if self.estimate_method == "cross-sectional" and self.assume_noisy:
            raise ValidationError("cross-sectional estimates need assume_noisy=False")
        if not 0 < self.fve_threshold <= 1:
            raise ValidationError("fve_threshold must lie in (0, 1]")
        for name in ("bandwidth_mean", "bandwidth_cov"):
            h = getattr(self, name)
            if h is not None and not h > 0:
                raise ValidationError(f"{name} must be positive")
        if self.n_components is not None and self.n_components < 0:
            raise ValidationError("n_components must be non-negative")


@dataclass(frozen=True, eq=False)
class FpcaModel:
    """Fitted (or true) functional PCA model on a grid.

    ``eigenfunctions`` has shape ``(v, M)``; column ``m`` is psi_m on the grid,
    orthonormal under trapezoid quadrature.
    """

    grid: np.ndarray
    mu: np.ndarray
    cov: np.ndarray
    eigenvalues: np.ndarray
    eigenfunctions: np.ndarray
    sigma2: float
    fve: float = 1.0
    settings: dict = field(default_factory=dict)

    def __post_init__(self):
        grid = np.asarray(self.grid, float)
        v = len(grid)
        mu = np.asarray(self.mu, float)
        cov = np.asarray(self.cov, float)
        lam = np.asarray(self.eigenvalues, float).reshape(-1)
        psi = np.asarray(self.eigenfunctions, float).reshape(v, -1) if v else np.zeros((0, 0))
        if mu.shape != (v,) or cov.shape != (v, v) or psi.shape != (v, len(lam)):
            raise ShapeMismatch("model arrays disagree with the grid size")
        if not self.sigma2 >= 0:
            raise ValidationError("sigma2 must be non-negative")
        for name, arr in (("grid", grid), ("mu", mu), ("cov", cov), ("eigenvalues", lam),
                          ("eigenfunctions", psi)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "sigma2", float(self.sigma2))

    @property
    def M(self) -> int:
        return len(self.eigenvalues)

    @property
    def v(self) -> int:
        return len(self.grid)

    @classmethod
    def from_components(cls, grid, mu, eigenvalues, eigenfunctions, sigma2, **kw):
        """Model whose covariance is exactly ``Psi diag(lambda) Psi'``."""
        psi = np.asarray(eigenfunctions, float)
        lam = np.asarray(eigenvalues, float)
        cov = (psi * lam) @ psi.T
        return cls(grid, mu, cov, lam, psi, sigma2, **kw)

    def truncate(self, M: int) -> "FpcaModel":
        total = float(self.eigenvalues.sum()) / self.fve if self.fve > 0 else 0.0
        fve = float(self.eigenvalues[:M].sum() / total) if total > 0 else 0.0
        return FpcaModel(self.grid, self.mu, self.cov, self.eigenvalues[:M],
                         self.eigenfunctions[:, :M], self.sigma2, fve, dict(self.settings))

    def to_dict(self) -> dict:
        return {
            "grid": self.grid.tolist(),
            "mu": self.mu.tolist(),
            "cov": self.cov.tolist(),
            "eigenvalues": self.eigenvalues.tolist(),
            "eigenfunctions": self.eigenfunctions.tolist(),
            "sigma2": self.sigma2,
            "M": self.M,
            "fve": self.fve,
            "settings": self.settings,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FpcaModel":
        v = len(d["grid"])
        M = int(d["M"])
        psi = np.array(d["eigenfunctions"], float).reshape(v, M)
        return cls(d["grid"], d["mu"], d["cov"], d["eigenvalues"], psi, d["sigma2"],
                   d.get("fve", 1.0), dict(d.get("settings", {})))


def _sign_fix(psi: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Orient each eigenvector against the first grid point.

    Components (near-)orthogonal to it get their largest-magnitude
    coordinate positive instead.
    """
    psi = psi.copy()
    for m in range(psi.shape[1]):
        col = psi[:, m]
        ref = weights[0] * col[0]
        if abs(ref) > 1e-10 * np.max(np.abs(col)) * weights[0]:
            sign = np.sign(ref)
        else:
            sign = np.sign(col[np.argmax(np.abs(col))])
        psi[:, m] = col * (sign if sign != 0 else 1.0)
    return psi


def _mean_cells(data: SparseDataset) -> smoothing.Cells:
    idx, val = data.pooled()
    v = data.v
    counts = np.bincount(idx, minlength=v).astype(float)
    sums = np.bincount(idx, weights=val, minlength=v)
    sumsq = np.bincount(idx, weights=val * val, minlength=v)
    return smoothing.Cells.from_accumulators(data.grid, counts, sums, sumsq)


def raw_covariance_accumulators(data: SparseDataset, mu: np.ndarray):
    """Cell counts/sums/sums of squares of ``(U_ij - mu_ij)(U_ik - mu_ik)``.

    Returns ``(counts, sums, sumsq)``, each ``v x v``; ordered pairs, so the
    off-diagonal part is symmetric.
    """
    v = data.v
    counts = np.zeros((v, v))
    sums = np.zeros((v, v))
    sumsq = np.zeros((v, v))
    for idx, val in data.subjects:
        r = val - mu[idx]
        g = np.outer(r, r)
        ix = np.ix_(idx, idx)
        counts[ix] += 1.0
        sums[ix] += g
        sumsq[ix] += g * g
    return counts, sums, sumsq


def _eigen(cov, weights, opts: PaceOptions, floor=0.0):
    """Weighted eigenpairs; eigenvalues at or below ``floor`` count as rounding noise."""
    sw = np.sqrt(weights)
    A = sw[:, None] * cov * sw[None, :]
    A = 0.5 * (A + A.T)
    lam, vec = np.linalg.eigh(A)
    order = np.argsort(lam)[::-1]
    lam, vec = lam[order], vec[:, order]
    scale = max(float(np.max(np.abs(lam))), 1e-300)
    positive = lam > max(1e-12 * scale, floor)
    lam, vec = lam[positive], vec[:, positive]
    psi = vec / sw[:, None]
    return lam, _sign_fix(psi, weights)


def _choose_M(lam, opts: PaceOptions) -> int:
    if lam.size == 0:
        return 0
    if opts.n_components is not None:
        M = min(opts.n_components, lam.size)
    else:
        fve = np.cumsum(lam) / lam.sum()
        M = int(np.searchsorted(fve, opts.fve_threshold - 1e-12) + 1)
        M = min(M, lam.size)
    if opts.max_components is not None:
        M = min(M, opts.max_components)
    return M


def fit_pace(data: SparseDataset, options: PaceOptions | None = None) -> FpcaModel:
    """Fit mean, covariance, eigenpairs and error variance from sparse data.

    Raises
    ------
    InsufficientData
        Fewer than two subjects, fewer than two observed grid points, or no
        within-subject pairs to estimate the covariance from.
    DegenerateCovariance
        The data vary but the smoothed covariance has no positive eigenvalue.
    """
    opts = options or PaceOptions()
    if data.n < 2:
        raise InsufficientData("at least two subjects are required")
    grid = data.grid
    v = data.v
    cells = _mean_cells(data)
    if len(cells.counts) < 2:
        raise InsufficientData("pooled observations cover fewer than two grid points")
    span = grid[-1] - grid[0]
    candidates = smoothing.bandwidth_candidates(grid, opts.n_bandwidths)
    method = opts.estimate_method
    if method == "auto":
        complete = bool(np.all(data.counts == v))
        method = "cross-sectional" if complete and not opts.assume_noisy else "smooth"
    settings = {"kernel": opts.kernel, "estimate_method": method,
                "assume_noisy": opts.assume_noisy}

    if method == "cross-sectional":
        if len(cells.counts) < v:
            raise InsufficientData("cross-sectional estimates need every grid point observed")
        mu = np.bincount(data.pooled()[0], weights=data.pooled()[1], minlength=v) / np.bincount(
            data.pooled()[0], minlength=v)
        h_mu = h_cov = None
    else:
        h_mu = opts.bandwidth_mean or smoothing.select_bandwidth(
            cells, candidates, opts.kernel, fallback=span / 4)
        mu = smoothing.local_linear(cells, grid, h_mu, opts.kernel)
        if not np.all(np.isfinite(mu)):
            raise InsufficientData("mean smoother undefined on part of the grid")

    counts, sums, sumsq = raw_covariance_accumulators(data, mu)
    off = ~np.eye(v, dtype=bool)
    if counts[off].sum() == 0:
        raise InsufficientData("no subject has two observations; covariance not estimable")
    include = np.ones((v, v), bool) if not opts.assume_noisy else off
    cov_counts = np.where(include, counts, 0.0)

    if method == "cross-sectional":
        if (cov_counts == 0).any():
            raise InsufficientData("cross-sectional covariance needs every grid pair observed")
        cov = sums / counts
        sigma2 = 0.0
    else:
        T, S = np.meshgrid(grid, grid, indexing="xy")
        pts = np.column_stack([S.ravel(), T.ravel()])
        cov_cells = smoothing.Cells.from_accumulators(
            pts, cov_counts.ravel(), sums.ravel(), sumsq.ravel())
        if len(cov_cells.counts) < 3:
            raise InsufficientData("too few distinct grid pairs to smooth the covariance")
        h_cov = opts.bandwidth_cov or smoothing.select_bandwidth(
            cov_cells, candidates, opts.kernel, fallback=span / 4)
        cov = smoothing.local_linear(cov_cells, pts, h_cov, opts.kernel).reshape(v, v)
        if not np.all(np.isfinite(cov)):
            raise InsufficientData("covariance smoother undefined on part of the grid")
        cov = 0.5 * (cov + cov.T)
        sigma2 = 0.0
        if opts.assume_noisy:
            sigma2 = _error_variance(grid, counts, sums, sumsq, cov_cells, h_cov, opts)

    settings.update({"bandwidth_mean": h_mu, "bandwidth_cov": h_cov,
                     "fve_threshold": opts.fve_threshold, "n_components": opts.n_components})
    weights = trapezoid_weights(grid)
    magnitude = 1.0 + float(np.max(mu * mu))
    lam, psi = _eigen(cov, weights, opts, floor=1e-12 * magnitude * float(weights.sum()))
    if lam.size == 0:
        dev = np.abs(sums[counts > 0] / counts[counts > 0])
        if dev.size and dev.max() > 1e-12 * magnitude:
            raise DegenerateCovariance("smoothed covariance has no positive eigenvalue")
        return FpcaModel(grid, mu, cov, np.zeros(0), np.zeros((v, 0)), sigma2, 0.0, settings)
    M = _choose_M(lam, opts)
    fve = float(lam[:M].sum() / lam.sum())
    if opts.assume_noisy:
        settings["score_variance"] = _score_variance(data, mu, lam[:M], psi[:, :M], sigma2)
    return FpcaModel(grid, mu, cov, lam[:M], psi[:, :M], sigma2, fve, settings)


def _score_variance(data, mu, lam, psi, sigma2, n_candidates=13) -> float:
    """Noise level used when predicting scores: ``max(sigma2, rho)``.

    ``rho`` minimises the leave-one-observation-out prediction error over a
    geometric grid scaled by the mean fitted variance.  A near-zero error
    variance estimate would otherwise turn score prediction into
    interpolation of noisy values through an ill-conditioned matrix.
    """
    scale = float(np.sum(psi * psi * lam) / len(psi))
    candidates = scale * np.logspace(-4, 0, n_candidates)
    by_size = {}
    for idx, val in data.subjects:
        if len(idx) >= 2:
            by_size.setdefault(len(idx), []).append((idx, val - mu[idx]))
    if not by_size:
        return sigma2
    errors = np.zeros(n_candidates)
    for K, group in by_size.items():
        idx = np.array([g[0] for g in group])
        resid = np.array([g[1] for g in group])
        p = psi[idx]
        signal = np.einsum("nkm,m,nlm->nkl", p, lam, p)
        for c, rho in enumerate(candidates):
            inv = np.linalg.inv(signal + rho * np.eye(K))
            loo = np.einsum("nkl,nl->nk", inv, resid) / np.diagonal(inv, axis1=1, axis2=2)
            errors[c] += float(np.sum(loo * loo))
    return max(sigma2, float(candidates[int(np.argmin(errors))]))


def _error_variance(grid, counts, sums, sumsq, cov_cells, h, opts) -> float:
    """Mean gap between the smoothed raw variance and the covariance diagonal.

    Averaged over the central part of the domain, clamped at zero.
    """
    diag = np.diag(counts) > 0
    if diag.sum() < 2:
        return 0.0
    var_cells = smoothing.Cells.from_accumulators(
        grid, np.diag(counts), np.diag(sums), np.diag(sumsq))
    var_hat = smoothing.local_linear(var_cells, grid, h, opts.kernel)
    cov_diag = smoothing.rotated_diagonal(cov_cells, grid, h, opts.kernel)
    lo, hi = opts.sigma2_interval
    span = grid[-1] - grid[0]
    central = (grid >= grid[0] + lo * span) & (grid <= grid[0] + hi * span)
    gap = (var_hat - cov_diag)[central]
    gap = gap[np.isfinite(gap)]
    if gap.size == 0:
        return 0.0
    return max(0.0, float(gap.mean()))


def conditional_covariance(model: FpcaModel, indices, noise=None) -> np.ndarray:
    """``Psi_i Lambda Psi_i' + noise I`` at the given grid indices.

    ``noise`` defaults to the model's error variance.
    """
    psi = model.eigenfunctions[np.asarray(indices)]
    noise = model.sigma2 if noise is None else noise
    return (psi * model.eigenvalues) @ psi.T + noise * np.eye(len(psi))


def score_variance(model: FpcaModel) -> float:
    """Noise level used for score prediction (never below ``sigma2``)."""
    return max(model.sigma2, float(model.settings.get("score_variance") or 0.0))


def stabilised_solve(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Solve ``A X = B`` for SPD ``A``, ridging the diagonal when ill-conditioned."""
    K = A.shape[0]
    if K == 0:
        return np.zeros_like(B)
    cond = np.linalg.cond(A)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        eps = RIDGE_FACTOR * np.trace(A) / K
        if not eps > 0:
            raise SingularConditioning("cannot regularise a zero conditioning matrix")
        A = A + eps * np.eye(K)
        if not np.isfinite(np.linalg.cond(A)):
            raise SingularConditioning("ridge failed to stabilise the conditioning matrix")
    return np.linalg.solve(A, B)


def predict_scores(model: FpcaModel, indices, values) -> np.ndarray:
    """Conditional-expectation FPC scores for one subject."""
    indices = np.asarray(indices, dtype=np.int64)
    values = np.asarray(values, dtype=float)
    if indices.shape != values.shape:
        raise ShapeMismatch("indices and values differ in shape")
    if model.M == 0 or indices.size == 0:
        return np.zeros(model.M)
    if indices.min() < 0 or indices.max() >= model.v:
        raise ValidationError("grid index out of range")
    psi = model.eigenfunctions[indices]
    resid = values - model.mu[indices]
    alpha = stabilised_solve(
        conditional_covariance(model, indices, score_variance(model)), resid)
    return model.eigenvalues * (psi.T @ alpha)


def recover_trajectory(model: FpcaModel, scores) -> np.ndarray:
    scores = np.asarray(scores, float)
    if scores.shape != (model.M,):
        raise ShapeMismatch(f"expected {model.M} scores, got shape {scores.shape}")
    return model.mu + model.eigenfunctions @ scores


def recover_all(model: FpcaModel, data: SparseDataset) -> np.ndarray:
    """Recovered curves (n x v) for every subject of ``data``."""
    out = np.empty((data.n, model.v))
    for i, (idx, val) in enumerate(data.subjects):
        out[i] = recover_trajectory(model, predict_scores(model, idx, val))
    return out
