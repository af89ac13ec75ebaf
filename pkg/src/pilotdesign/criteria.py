"""Design criteria: recovered variance F, MISE, ARE, RRMSE and the composite."""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatch, ValidationError, ZeroNormSubject, ZeroTrueOptimum
from .fpca_pace import COND_LIMIT, RIDGE_FACTOR, FpcaModel, stabilised_solve


def _check_design(model: FpcaModel, t) -> np.ndarray:
    t = np.asarray(t, dtype=np.int64).reshape(-1)
    if t.size and (t.min() < 0 or t.max() >= model.v):
        raise ValidationError("design index out of range")
    if np.any(np.diff(t) <= 0):
        raise ValidationError("design indices must be strictly increasing")
    return t


def f_value(model: FpcaModel, t) -> float:
    """``tr{L Psi(t)' [Psi(t) L Psi(t)' + s2 I]^-1 Psi(t) L}`` for one design.

    An empty design recovers nothing and scores 0.
    """
    t = _check_design(model, t)
    if t.size == 0 or model.M == 0:
        return 0.0
    psi = model.eigenfunctions[t]
    PL = psi * model.eigenvalues
    A = PL @ psi.T + model.sigma2 * np.eye(t.size)
    return float(np.sum(PL * stabilised_solve(A, PL)))


def f_values(model: FpcaModel, designs) -> np.ndarray:
    """Vectorised :func:`f_value` over the rows of an ``(N, K)`` index array."""
    designs = np.asarray(designs, dtype=np.intp)
    N, K = designs.shape
    if K == 0 or model.M == 0 or N == 0:
        return np.zeros(N)
    psi = model.eigenfunctions[designs]
    PL = psi * model.eigenvalues
    A = PL @ np.swapaxes(psi, 1, 2) + model.sigma2 * np.eye(K)
    cond = np.linalg.cond(A)
    bad = ~np.isfinite(cond) | (cond > COND_LIMIT)
    if bad.any():
        eps = RIDGE_FACTOR * np.trace(A[bad], axis1=1, axis2=2) / K
        A[bad] += eps[:, None, None] * np.eye(K)
    X = np.linalg.solve(A, PL)
    return np.sum(PL * X, axis=(1, 2))


def mise(model: FpcaModel, t) -> float:
    """Integrated prediction error of the best predictor given observations at ``t``.

    For positive error variance this is the trace of the posterior score
    covariance ``(L^-1 + Psi' Psi / s2)^-1``; otherwise ``tr L - F(t)``.
    """
    t = _check_design(model, t)
    lam = model.eigenvalues
    if t.size == 0 or model.M == 0:
        return float(lam.sum())
    if model.sigma2 > 0:
        psi = model.eigenfunctions[t]
        precision = np.diag(1.0 / lam) + psi.T @ psi / model.sigma2
        return float(np.trace(np.linalg.inv(precision)))
    return float(lam.sum()) - f_value(model, t)


def absolute_relative_error(f_at_opt: float, f_at_star: float) -> float:
    if not f_at_star > 0:
        raise ZeroTrueOptimum("true criterion is zero at its optimum")
    return abs(f_at_opt - f_at_star) / f_at_star


@dataclass(frozen=True)
class AreResult:
    are: float
    t_opt: tuple
    t_star: tuple
    f_at_opt: float
    f_at_star: float


def are(model_est: FpcaModel, model_true: FpcaModel, K: int, search=None) -> AreResult:
    """ARE of the surrogate-optimal design, with F always taken from ``model_true``."""
    from .design_search import search_optimal

    if model_est.v != model_true.v or not np.allclose(model_est.grid, model_true.grid):
        raise ShapeMismatch("models must share a grid")
    t_opt, _ = search_optimal(model_est, K, search)
    t_star, _ = search_optimal(model_true, K, search)
    f_opt = f_value(model_true, t_opt)
    f_star = f_value(model_true, t_star)
    return AreResult(absolute_relative_error(f_opt, f_star), tuple(t_opt), tuple(t_star),
                     f_opt, f_star)


def rrmse_details(truth, fitted, tol: float = 1e-12) -> tuple[float, int]:
    """RRMSE and the number of subjects excluded for a near-zero denominator.

    ``truth`` and ``fitted`` are sequences of per-subject arrays evaluated at
    the subject's observed points.
    """
    if len(truth) != len(fitted):
        raise ShapeMismatch("truth and fitted hold different numbers of subjects")
    ratios = []
    excluded = 0
    for x, xh in zip(truth, fitted):
        x = np.asarray(x, float)
        xh = np.asarray(xh, float)
        if x.shape != xh.shape:
            raise ShapeMismatch("truth and fitted disagree for a subject")
        denom = float(np.sum(x * x))
        if denom < tol:
            excluded += 1
            continue
        ratios.append(float(np.sum((x - xh) ** 2)) / denom)
    if not ratios:
        raise ZeroNormSubject("every subject has a zero-norm true trajectory")
    return math.sqrt(sum(ratios) / len(ratios)), excluded


def rrmse(truth, fitted) -> float:
    value, excluded = rrmse_details(truth, fitted)
    if excluded:
        warnings.warn(f"{excluded} subject(s) excluded from RRMSE (zero-norm truth)",
                      stacklevel=2)
    return value


def composite(are_value: float, rrmse_value: float, weight: float = 0.5) -> float:
    if not 0.0 <= weight <= 1.0:
        raise ValidationError("weight must lie in [0, 1]")
    return weight * are_value + (1.0 - weight) * rrmse_value


def format_design(t) -> str:
    """1-based, hyphen-joined grid labels."""
    return "-".join(str(int(j) + 1) for j in t)


def parse_design(text: str) -> tuple:
    return tuple(int(j) - 1 for j in text.split("-")) if text else ()


@dataclass(frozen=True)
class CriterionReport:
    structure: str
    n: int
    seed: int
    are: float
    rrmse: float
    composite: float
    t_opt: tuple
    t_star: tuple
    f_at_opt: float = math.nan
    f_at_star: float = math.nan

    COLUMNS = ("structure", "n", "seed", "are", "rrmse", "composite", "t_opt", "t_star")

    def row(self) -> dict:
        return {
            "structure": self.structure,
            "n": str(self.n),
            "seed": str(self.seed),
            "are": f"{self.are:.12g}",
            "rrmse": f"{self.rrmse:.12g}",
            "composite": f"{self.composite:.12g}",
            "t_opt": format_design(self.t_opt),
            "t_star": format_design(self.t_star),
        }

    def csv_line(self) -> str:
        buf = io.StringIO()
        csv.DictWriter(buf, fieldnames=self.COLUMNS, lineterminator="\n").writerow(self.row())
        return buf.getvalue()

    @classmethod
    def from_row(cls, row: dict) -> "CriterionReport":
        return cls(row["structure"], int(row["n"]), int(row["seed"]), float(row["are"]),
                   float(row["rrmse"]), float(row["composite"]), parse_design(row["t_opt"]),
                   parse_design(row["t_star"]))
