"""Synthetic functional data, sparsification and the design-comparison protocol."""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import criteria, design_gen, design_search, fpca_pace
from .design_gen import DesignSpec, IncidenceMatrix
from .errors import InsufficientSubjects, PilotDesignError, ShapeMismatch, ValidationError
from .fpca_pace import FpcaModel, PaceOptions, SparseDataset
from .rng import derive_seed, stream

log = logging.getLogger(__name__)

STRUCTURE_IDS = {name: i for i, name in enumerate(design_gen.STRUCTURES)}


def fourier_basis(grid) -> np.ndarray:
    """The five simulation eigenfunctions as columns, shape ``(v, 5)``."""
    t = np.asarray(grid, float)
    r2 = math.sqrt(2.0)
    return np.column_stack([
        r2 * np.sin(2 * np.pi * t),
        r2 * np.cos(2 * np.pi * t),
        r2 * np.sin(4 * np.pi * t),
        r2 * np.cos(4 * np.pi * t),
        r2 * np.sin(6 * np.pi * t),
    ])


@dataclass
class SimConfig:
    """Simulation and protocol settings.

    The generating model has mean ``t + sin t``, Fourier eigenfunctions and
    eigenvalues ``10 / 2^m``; ``sigma2`` makes the signal-to-noise ratio 10.
    """

    v: int = 25
    n_components: int = 5
    sigma2: float = 0.96875
    n_datasets: int = 10
    n_designs: int = 20
    subject_counts: tuple = tuple(range(50, 241, 10))
    K: int = 5
    master_seed: int = 20240617
    structures: tuple = ("bibd", "random", "hybrid")
    w: float = 0.2
    delta: float = 1.0
    delta_step: float = 0.5
    gap: int = 2
    thresholds: tuple = (0.99, 0.97, 0.95)
    composite_weight: float = 0.5
    search: str = "exhaustive"
    heuristic_samples: int = 2000
    fve_threshold: float = 0.95
    n_components_fit: int | None = None
    failure_tolerance: float = 0.1

    def __post_init__(self):
        self.subject_counts = tuple(int(n) for n in self.subject_counts)
        self.structures = tuple(self.structures)
        self.thresholds = tuple(float(t) for t in self.thresholds)
        if not 1 <= self.n_components <= 5:
            raise ValidationError("the Fourier model has at most 5 components")
        if self.v < 2 or not 1 <= self.K <= self.v:
            raise ValidationError("need v >= 2 and 1 <= K <= v")
        if self.sigma2 < 0:
            raise ValidationError("sigma2 must be non-negative")
        for s in self.structures:
            if s not in design_gen.STRUCTURES:
                raise ValidationError(f"unknown structure {s!r}")
        if any(not 0 < t <= 1 for t in self.thresholds):
            raise ValidationError("thresholds must lie in (0, 1]")
        if self.search not in design_search.SEARCH_KINDS:
            raise ValidationError(f"search must be one of {design_search.SEARCH_KINDS}")
        if not self.subject_counts or min(self.subject_counts) < 2:
            raise ValidationError("subject counts must be at least 2")

    @property
    def grid(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.v)

    @property
    def eigenvalues(self) -> np.ndarray:
        return 10.0 / 2.0 ** np.arange(1, self.n_components + 1)

    def mean_function(self) -> np.ndarray:
        t = self.grid
        return t + np.sin(t)

    def true_model(self) -> FpcaModel:
        psi = fourier_basis(self.grid)[:, : self.n_components]
        return FpcaModel.from_components(self.grid, self.mean_function(), self.eigenvalues,
                                         psi, self.sigma2, settings={"source": "truth"})

    def pace_options(self) -> PaceOptions:
        return PaceOptions(fve_threshold=self.fve_threshold, n_components=self.n_components_fit)

    def search_method(self) -> design_search.SearchMethod:
        return design_search.SearchMethod(self.search, self.heuristic_samples,
                                          derive_seed(self.master_seed, "search"))

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, val in d.items():
            if isinstance(val, tuple):
                d[k] = list(val)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def simulate_dataset(config: SimConfig, dataset_id: int, n: int):
    """Dense true curves ``X`` and noisy observations ``U``, both ``n x v``."""
    rng = stream(config.master_seed, "dataset", dataset_id, n)
    lam = config.eigenvalues
    xi = rng.standard_normal((n, len(lam))) * np.sqrt(lam)
    psi = fourier_basis(config.grid)[:, : config.n_components]
    X = config.mean_function()[None, :] + xi @ psi.T
    noise = rng.standard_normal(X.shape) * math.sqrt(config.sigma2)
    return X, X + noise


def sparsify(dense_values, design: IncidenceMatrix, grid=None) -> SparseDataset:
    """Keep subject ``i``'s values at the columns row ``i`` of ``design`` marks."""
    U = np.asarray(dense_values, float)
    if U.ndim != 2 or U.shape[1] != design.v:
        raise ShapeMismatch("dense data and design disagree on the grid size")
    if design.n > U.shape[0]:
        raise ShapeMismatch("design has more subjects than the dense data")
    grid = np.linspace(0.0, 1.0, design.v) if grid is None else grid
    subjects = []
    for i in range(design.n):
        idx = design.row_indices(i)
        subjects.append((idx, U[i, idx]))
    return SparseDataset(grid, tuple(subjects))


def make_design(config: SimConfig, structure: str, n: int, design_id: int):
    """Design ``design_id`` of ``structure`` for ``n`` subjects.

    Returns ``(design, delta_used)``; delta is None for non-hybrid designs.
    """
    seed = derive_seed(config.master_seed, "design", STRUCTURE_IDS[structure], n, design_id)
    spec = DesignSpec(n, config.v, config.K, config.w, config.delta, config.gap, seed)
    if structure == "hybrid":
        return design_gen.generate_hybrid_design_adaptive(spec, config.delta_step)
    return design_gen.generate_design(structure, spec), None


# ---------------------------------------------------------------------------
# Experiment protocol

@dataclass(frozen=True)
class Record:
    """One long-format result row.

    ``dataset`` is the dataset index as text, or ``"mean"`` for the average
    over datasets of one (structure, n, design) cell.  ``n_used`` counts the
    datasets behind a mean; ``flag`` names the error of a failed cell.
    """

    structure: str
    n: int
    design: int
    dataset: str
    metric: str
    value: float
    n_used: int = 1
    flag: str = ""

    @property
    def sort_key(self):
        ds = (1, 0) if self.dataset == "mean" else (0, int(self.dataset))
        return (STRUCTURE_IDS.get(self.structure, 99), self.structure, self.n, self.design,
                ds, self.metric)


@dataclass(frozen=True)
class DesignInfo:
    structure: str
    n: int
    design: int
    seed: int
    delta: float | None
    flag: str = ""


@dataclass
class ExperimentResult:
    config: SimConfig
    records: list
    designs: list = field(default_factory=list)

    def means(self, metric: str | None = None) -> list:
        return [r for r in self.records if r.dataset == "mean"
                and (metric is None or r.metric == metric)]

    def failed_cells(self) -> list:
        return [r for r in self.records if r.dataset != "mean" and r.flag]

    def failure_fraction(self) -> float:
        cells = {(r.structure, r.n, r.design, r.dataset) for r in self.records
                 if r.dataset != "mean"}
        failed = {(r.structure, r.n, r.design, r.dataset) for r in self.failed_cells()}
        return len(failed) / len(cells) if cells else 0.0

    def box_values(self, metric: str, structure: str, n: int) -> np.ndarray:
        return np.array([r.value for r in self.means(metric)
                         if r.structure == structure and r.n == n and not r.flag])

    def median_table(self, metric: str = "composite") -> dict:
        """``{(structure, n): median of the per-design means}``."""
        out = {}
        for s in self.config.structures:
            for n in self.config.subject_counts:
                vals = self.box_values(metric, s, n)
                out[(s, n)] = float(np.median(vals)) if vals.size else math.nan
        return out

    def summary(self) -> list:
        return summarise(self.records, self.config)


def metric_names(thresholds) -> list:
    names = ["are", "rrmse", "composite", "rrmse_grid"]
    for theta in thresholds:
        names += [f"eff_worst_{theta:g}", f"eff_median_{theta:g}"]
    return names


def summarise(records, config: SimConfig) -> list:
    """Box-plot statistics of the per-design means for each structure, n and metric."""
    groups: dict = {}
    excluded: dict = {}
    for r in records:
        if r.dataset != "mean":
            continue
        key = (r.structure, r.n, r.metric)
        if r.flag:
            excluded[key] = excluded.get(key, 0) + 1
        else:
            groups.setdefault(key, []).append(r.value)
    rows = []
    keys = sorted(set(groups) | set(excluded),
                  key=lambda k: (STRUCTURE_IDS.get(k[0], 99), k[0], k[1], k[2]))
    for key in keys:
        vals = np.array(groups.get(key, []))
        if vals.size:
            q = np.percentile(vals, [0, 25, 50, 75, 100])
        else:
            q = [math.nan] * 5
        rows.append({"structure": key[0], "n": key[1], "metric": key[2],
                     "min": float(q[0]), "q1": float(q[1]), "median": float(q[2]),
                     "q3": float(q[3]), "max": float(q[4]), "count": int(vals.size),
                     "excluded": excluded.get(key, 0)})
    return rows


class SyntheticSource:
    """Datasets drawn from the generating model of a :class:`SimConfig`."""

    def __init__(self, config: SimConfig):
        self.config = config
        self.grid = config.grid

    def truth(self) -> FpcaModel:
        return self.config.true_model()

    def dataset(self, dataset_id: int, n: int, design: IncidenceMatrix):
        """``(true curves, observed values)``, each ``n x v``."""
        return simulate_dataset(self.config, dataset_id, n)


class DenseSource:
    """Subsamples of a dense real dataset; the full-data fit plays the truth."""

    def __init__(self, values, grid, config: SimConfig, options: PaceOptions | None = None):
        self.values = np.asarray(values, float)
        self.grid = np.asarray(grid, float)
        self.config = config
        if self.values.shape[1] != len(self.grid):
            raise ShapeMismatch("dense values and grid disagree")
        if self.values.shape[0] < max(config.subject_counts):
            raise InsufficientSubjects(
                f"need at least {max(config.subject_counts)} subjects, "
                f"have {self.values.shape[0]}")
        subjects = []
        for row in self.values:
            idx = np.flatnonzero(np.isfinite(row))
            subjects.append((idx, row[idx]))
        full = SparseDataset(self.grid, tuple(subjects))
        self._truth = fpca_pace.fit_pace(full, options or config.pace_options())
        self.curves = fpca_pace.recover_all(self._truth, full)

    def truth(self) -> FpcaModel:
        return self._truth

    def subsample(self, dataset_id: int, n: int, design: IncidenceMatrix | None = None):
        """Subject indices for one subsampled dataset.

        Subjects are drawn without replacement; with a design, a subject
        missing a value at any point of its assigned row is skipped for the
        next draw.
        """
        rng = stream(self.config.master_seed, "subsample", dataset_id, n)
        order = rng.permutation(self.values.shape[0])
        if design is None:
            return order[:n]
        chosen = []
        pos = 0
        for i in range(n):
            idx = design.row_indices(i)
            while pos < len(order) and not np.all(np.isfinite(self.values[order[pos], idx])):
                pos += 1
            if pos == len(order):
                raise InsufficientSubjects("too many subjects with missing values")
            chosen.append(order[pos])
            pos += 1
        return np.array(chosen)

    def dataset(self, dataset_id: int, n: int, design: IncidenceMatrix):
        rows = self.subsample(dataset_id, n, design)
        return self.curves[rows], self.values[rows]


def _true_values(source, K):
    # computed once per source (and per worker process)
    cache = source.__dict__.setdefault("_true_values", {})
    if K not in cache:
        cache[K] = design_search.evaluate_candidates(source.truth(), K)
    return cache[K]


def evaluate_cell(model: FpcaModel, data: SparseDataset, true_curves, truth: FpcaModel,
                  cands, true_values, thresholds, weight: float,
                  search: design_search.SearchMethod | None = None) -> dict:
    """All metrics of one fitted cell, keyed by metric name.

    ``true_values`` holds the reference criterion of every row of ``cands``.
    The threshold analysis always ranks the full candidate set; ``search``
    only changes how the surrogate-optimal design for ARE is found.
    """
    est_values = design_search.candidate_values(model, cands)
    f_star = float(np.max(true_values))
    if search is None or search.kind == "exhaustive":
        f_opt = float(true_values[int(np.argmax(est_values))])
    else:
        t_opt, _ = design_search.search_optimal(model, cands.shape[1], search)
        f_opt = criteria.f_value(truth, t_opt)
    are_value = criteria.absolute_relative_error(f_opt, f_star)
    fitted = fpca_pace.recover_all(model, data)
    truth_obs = [true_curves[i, idx] for i, (idx, _) in enumerate(data.subjects)]
    fit_obs = [fitted[i, idx] for i, (idx, _) in enumerate(data.subjects)]
    rrmse_value, _ = criteria.rrmse_details(truth_obs, fit_obs)
    # secondary diagnostic: the same ratio over the whole grid
    rrmse_grid, _ = criteria.rrmse_details(list(true_curves[: data.n]), list(fitted))
    out = {"are": are_value, "rrmse": rrmse_value, "rrmse_grid": rrmse_grid,
           "composite": criteria.composite(are_value, rrmse_value, weight)}
    for rep in design_search.threshold_reports(cands, est_values, true_values, thresholds):
        out[f"eff_worst_{rep.theta:g}"] = rep.eff_true_worst
        out[f"eff_median_{rep.theta:g}"] = rep.eff_true_median
    return out


def _run_design(source, structure: str, n: int, design_id: int):
    """Every dataset of one (structure, n, design) cell plus its mean records."""
    config = source.config
    names = metric_names(config.thresholds)
    seed = derive_seed(config.master_seed, "design", STRUCTURE_IDS[structure], n, design_id)
    records = []
    try:
        design, delta = make_design(config, structure, n, design_id)
    except PilotDesignError as exc:
        flag = type(exc).__name__
        info = DesignInfo(structure, n, design_id, seed, None, flag)
        for d in range(config.n_datasets):
            records += [Record(structure, n, design_id, str(d), m, math.nan, 0, flag)
                        for m in names]
        records += [Record(structure, n, design_id, "mean", m, math.nan, 0, flag) for m in names]
        return records, info
    info = DesignInfo(structure, n, design_id, seed, delta)
    cands, true_values = _true_values(source, config.K)
    per_metric: dict = {m: [] for m in names}
    for d in range(config.n_datasets):
        try:
            curves, observed = source.dataset(d, n, design)
            data = sparsify(observed, design, source.grid)
            model = fpca_pace.fit_pace(data, config.pace_options())
            values = evaluate_cell(model, data, curves, source.truth(), cands, true_values,
                                   config.thresholds, config.composite_weight,
                                   config.search_method())
        except (PilotDesignError, np.linalg.LinAlgError) as exc:
            flag = type(exc).__name__
            log.warning("cell %s n=%d design=%d dataset=%d failed: %s",
                        structure, n, design_id, d, exc)
            records += [Record(structure, n, design_id, str(d), m, math.nan, 1, flag)
                        for m in names]
            continue
        for m in names:
            records.append(Record(structure, n, design_id, str(d), m, float(values[m])))
            per_metric[m].append(float(values[m]))
    for m in names:
        vals = per_metric[m]
        if vals:
            records.append(Record(structure, n, design_id, "mean", m, float(np.mean(vals)),
                                  len(vals)))
        else:
            records.append(Record(structure, n, design_id, "mean", m, math.nan, 0,
                                  "AllDatasetsFailed"))
    return records, info


_WORKER_SOURCE = None


def _init_worker(source):
    global _WORKER_SOURCE
    _WORKER_SOURCE = source


def _worker(task):
    return _run_design(_WORKER_SOURCE, *task)


def default_threads() -> int:
    env = os.environ.get("PILOTDESIGN_THREADS")
    if env:
        try:
            value = int(env)
        except ValueError:
            raise ValidationError("PILOTDESIGN_THREADS must be an integer") from None
        if value < 1:
            raise ValidationError("PILOTDESIGN_THREADS must be positive")
        return value
    return os.cpu_count() or 1


def run_protocol(source, threads: int = 1) -> ExperimentResult:
    """Run every (structure, n, design) cell of ``source.config``.

    Cells are independent; with ``threads > 1`` they run in worker processes.
    Records are sorted afterwards so the result does not depend on the
    worker count.
    """
    config = source.config
    tasks = [(s, n, g) for s in config.structures for n in config.subject_counts
             for g in range(config.n_designs)]
    if threads <= 1 or len(tasks) <= 1:
        outputs = [_run_design(source, *t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=threads, initializer=_init_worker,
                                 initargs=(source,)) as pool:
            outputs = list(pool.map(_worker, tasks))
    records = sorted((r for recs, _ in outputs for r in recs), key=lambda r: r.sort_key)
    designs = [info for _, info in outputs]
    return ExperimentResult(config, records, designs)


def check_generating_model(config: SimConfig) -> None:
    """Check the generating eigenfunctions are orthonormal on the grid."""
    psi = fourier_basis(config.grid)[:, : config.n_components]
    w = fpca_pace.trapezoid_weights(config.grid)
    gram = psi.T @ (w[:, None] * psi)
    if not np.allclose(gram, np.eye(len(gram)), atol=1e-8):
        raise ValidationError("generating eigenfunctions are not orthonormal on this grid; "
                              "use a finer grid or fewer components")


def run_experiment(config: SimConfig, structures=None, search=None,
                   threads: int = 1) -> ExperimentResult:
    """The synthetic design-comparison protocol.

    ``structures`` and ``search`` override the corresponding config fields.
    """
    if structures is not None:
        config = SimConfig.from_dict({**config.to_dict(), "structures": list(structures)})
    if search is not None:
        if isinstance(search, design_search.SearchMethod):
            changes = {"search": search.kind, "heuristic_samples": search.samples}
        else:
            changes = {"search": search}
        config = SimConfig.from_dict({**config.to_dict(), **changes})
    check_generating_model(config)
    return run_protocol(SyntheticSource(config), threads)


def real_data_experiment(values, grid, config: SimConfig, threads: int = 1,
                         options: PaceOptions | None = None) -> ExperimentResult:
    """The same protocol on subsamples of a dense dataset.

    The PACE fit to the full data is the reference model; its recovered
    curves are the reference trajectories for RRMSE.
    """
    if len(grid) != config.v:
        raise ShapeMismatch("config grid size differs from the data")
    return run_protocol(DenseSource(values, grid, config, options), threads)
