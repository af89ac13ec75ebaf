"""Next-study design search and efficiency-threshold analysis."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .criteria import f_values
from .design_gen import _all_subsets
from .errors import ValidationError
from .fpca_pace import FpcaModel

DEFAULT_THRESHOLDS = (0.99, 0.97, 0.95)
_CHUNK = 100_000


SEARCH_KINDS = ("exhaustive", "weighted_heuristic", "heuristic")


@dataclass(frozen=True)
class SearchMethod:
    """``kind`` is ``exhaustive`` or ``weighted_heuristic`` (alias ``heuristic``)."""

    kind: str = "exhaustive"
    samples: int = 2000
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SEARCH_KINDS:
            raise ValidationError(f"unknown search kind {self.kind!r}")
        if self.samples < 1:
            raise ValidationError("samples must be positive")


def candidate_designs(v: int, K: int) -> np.ndarray:
    """All K-subsets of ``range(v)`` in lexicographic order."""
    if not 0 <= K <= v:
        raise ValidationError("need 0 <= K <= v")
    if K == 0:
        return np.zeros((1, 0), dtype=np.intp)
    return _all_subsets(v, K)[0].astype(np.intp)


def candidate_values(model: FpcaModel, cands) -> np.ndarray:
    """Criterion values of the rows of ``cands``, evaluated in chunks."""
    cands = np.asarray(cands, dtype=np.intp)
    if len(cands) == 0:
        return np.zeros(0)
    return np.concatenate(
        [f_values(model, cands[i : i + _CHUNK]) for i in range(0, len(cands), _CHUNK)])


def evaluate_candidates(model: FpcaModel, K: int) -> tuple[np.ndarray, np.ndarray]:
    """Every candidate design and its criterion value under ``model``."""
    cands = candidate_designs(model.v, K)
    return cands, candidate_values(model, cands)


def _argmax_first(values: np.ndarray) -> int:
    # first maximum == lexicographically smallest design among ties
    return int(np.argmax(values))


def exhaustive_search(model: FpcaModel, K: int):
    cands, values = evaluate_candidates(model, K)
    best = _argmax_first(values)
    return tuple(int(j) for j in cands[best]), float(values[best])


def heuristic_search(model: FpcaModel, K: int, samples: int = 2000, seed: int = 0):
    """Best of ``samples`` random designs drawn with probability favouring
    grid points of high estimated variance.

    Each draw picks K distinct points sequentially with probabilities
    proportional to the pointwise variance (Gumbel top-k).
    """
    v = model.v
    if not 1 <= K <= v:
        raise ValidationError("need 1 <= K <= v")
    var = np.clip(np.diag(model.cov), 0.0, None)
    p = var / var.sum() if var.sum() > 0 else np.full(v, 1.0 / v)
    logp = np.log(np.where(p > 0, p, 1e-300))
    rng = np.random.default_rng(seed)
    keys = logp[None, :] + rng.gumbel(size=(samples, v))
    draws = np.sort(np.argsort(-keys, axis=1, kind="stable")[:, :K], axis=1)
    draws = np.unique(draws, axis=0)
    values = f_values(model, draws)
    best = _argmax_first(values)
    return tuple(int(j) for j in draws[best]), float(values[best])


def search_optimal(model: FpcaModel, K: int, method: SearchMethod | None = None):
    """Return ``(design, F(design))`` for the best design found by ``method``."""
    method = method or SearchMethod()
    if not 0 <= K <= model.v:
        raise ValidationError("need K <= v")
    if method.kind == "exhaustive":
        return exhaustive_search(model, K)
    return heuristic_search(model, K, method.samples, method.seed)


@dataclass(frozen=True)
class ThresholdReport:
    theta: float
    t_opt: tuple
    t_worst: tuple
    t_median: tuple
    set_size: int
    eff_hat_worst: float
    eff_hat_median: float
    eff_true_worst: float
    eff_true_median: float


def threshold_reports(cands, est_values, true_values, thetas) -> list[ThresholdReport]:
    """Worst- and median-case designs among those clearing each surrogate threshold.

    ``est_values`` and ``true_values`` are criterion values of ``cands`` under
    the estimated and true models.
    """
    best = _argmax_first(est_values)
    f_hat_opt = est_values[best]
    star = _argmax_first(true_values)
    f_star = true_values[star]
    if not f_hat_opt > 0 or not f_star > 0:
        raise ValidationError("criterion optimum must be positive")
    eff_hat = est_values / f_hat_opt
    order_index = np.arange(len(cands))
    out = []
    for theta in thetas:
        if not 0 < theta <= 1:
            raise ValidationError("theta must lie in (0, 1]")
        members = np.flatnonzero(eff_hat >= theta)
        ranked = members[np.lexsort((order_index[members], est_values[members]))]
        worst = ranked[0]
        median = ranked[(len(ranked) - 1) // 2]
        out.append(ThresholdReport(
            theta=float(theta),
            t_opt=tuple(int(j) for j in cands[best]),
            t_worst=tuple(int(j) for j in cands[worst]),
            t_median=tuple(int(j) for j in cands[median]),
            set_size=int(len(members)),
            eff_hat_worst=float(eff_hat[worst]),
            eff_hat_median=float(eff_hat[median]),
            eff_true_worst=float(true_values[worst] / f_star),
            eff_true_median=float(true_values[median] / f_star),
        ))
    return out


def threshold_analysis(model_est: FpcaModel, model_true: FpcaModel, K: int,
                       theta=DEFAULT_THRESHOLDS):
    """Threshold report(s) for one theta or a sequence of thetas."""
    if model_est.v != model_true.v:
        raise ValidationError("models must share a grid")
    cands, est = evaluate_candidates(model_est, K)
    _, true = evaluate_candidates(model_true, K)
    single = np.isscalar(theta)
    reports = threshold_reports(cands, est, true, [theta] if single else theta)
    return reports[0] if single else reports


def candidate_count(v: int, K: int) -> int:
    return math.comb(v, K)
