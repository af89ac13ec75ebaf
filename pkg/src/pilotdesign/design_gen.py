"""Pilot-study design structures: random, snippet, BIBD and hybrid.

A design is an ``n x v`` binary incidence matrix: row ``i`` marks the grid
points at which subject ``i`` is measured.  Indices are 0-based throughout the
Python API; file formats and printed output use 1-based grid labels.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import ConstructionFailed, InfeasibleSpec, ValidationError

STRUCTURES = ("random", "snippet", "bibd", "hybrid")

# slack for comparing integer counts with real-valued limits c + delta
_EPS = 1e-9
_MAX_CANDIDATES = 2_000_000


@dataclass(frozen=True)
class DesignSpec:
    """Design parameters.

    Parameters
    ----------
    n : int
        Number of subjects (rows).
    v : int
        Grid size (columns).
    K : int
        Observations per subject.
    w : float
        Fraction of subjects in the snippet portion of a hybrid design.
    delta : float
        Tolerance on the target concurrence values.
    gap : int
        Exclusion radius around a snippet cluster.
    seed : int
        Seed for every random choice made while building the design.
    """

    n: int
    v: int
    K: int
    w: float = 0.0
    delta: float = 1.0
    gap: int = 2
    seed: int = 0

    def __post_init__(self):
        for name in ("n", "v", "K", "gap", "seed"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
                raise ValidationError(f"{name} must be an integer, got {value!r}")
        if self.n < 1:
            raise ValidationError("n must be positive")
        if self.v < 1:
            raise ValidationError("v must be positive")
        if not 1 <= self.K <= self.v:
            raise ValidationError(f"K must satisfy 1 <= K <= v (K={self.K}, v={self.v})")
        if not (0.0 <= self.w <= 1.0) or not math.isfinite(self.w):
            raise ValidationError("w must lie in [0, 1]")
        if not (self.delta >= 0.0) or not math.isfinite(self.delta):
            raise ValidationError("delta must be a non-negative real")
        if self.gap < 0:
            raise ValidationError("gap must be non-negative")
        if self.seed < 0:
            raise ValidationError("seed must be non-negative")

    @property
    def n_snippet(self) -> int:
        # nearest integer, halves rounded up
        return int(math.floor(self.n * self.w + 0.5))

    def replace(self, **changes) -> "DesignSpec":
        params = {f: getattr(self, f) for f in self.__dataclass_fields__}
        params.update(changes)
        return DesignSpec(**params)


@dataclass(frozen=True)
class TargetConcurrence:
    c1: float
    c2: float
    c3: float
    # c3 with the literal binomial(n-1, 2) denominator; None when n < 3
    c3_literal: float | None = None

    def as_tuple(self):
        return (self.c1, self.c2, self.c3)


@dataclass(frozen=True, eq=False)
class IncidenceMatrix:
    """Binary ``n x v`` incidence matrix with constant row sums."""

    entries: np.ndarray
    structure_tag: str
    snippet_rows: int = 0

    def __post_init__(self):
        arr = np.array(self.entries, dtype=np.int64, copy=True)
        if arr.ndim != 2:
            raise ValidationError("incidence matrix must be two-dimensional")
        if arr.size and not np.isin(arr, (0, 1)).all():
            raise ValidationError("incidence entries must be 0 or 1")
        arr = arr.astype(np.uint8)
        sums = arr.sum(axis=1)
        if sums.size and (sums != sums[0]).any():
            raise ValidationError("every row of an incidence matrix must have the same sum")
        if self.structure_tag not in STRUCTURES:
            raise ValidationError(f"unknown structure {self.structure_tag!r}")
        if not 0 <= self.snippet_rows <= arr.shape[0]:
            raise ValidationError("snippet_rows out of range")
        arr.setflags(write=False)
        object.__setattr__(self, "entries", arr)

    @property
    def n(self) -> int:
        return self.entries.shape[0]

    @property
    def v(self) -> int:
        return self.entries.shape[1]

    @property
    def K(self) -> int:
        return int(self.entries[0].sum()) if self.n else 0

    def row_indices(self, i: int) -> np.ndarray:
        return np.flatnonzero(self.entries[i])

    def __eq__(self, other):
        if not isinstance(other, IncidenceMatrix):
            return NotImplemented
        return (
            self.structure_tag == other.structure_tag
            and self.snippet_rows == other.snippet_rows
            and self.entries.shape == other.entries.shape
            and bool(np.array_equal(self.entries, other.entries))
        )

    __hash__ = None


def _from_subsets(subsets, v, tag, snippet_rows=0) -> IncidenceMatrix:
    entries = np.zeros((len(subsets), v), dtype=np.uint8)
    for i, s in enumerate(subsets):
        entries[i, list(s)] = 1
    return IncidenceMatrix(entries, tag, snippet_rows)


def compute_target_concurrence(spec: DesignSpec) -> TargetConcurrence:
    """Target diagonal, adjacent-pair and distant-pair concurrence values.

    The distant-pair value spreads the pair slots left over after the
    adjacent band over the ``binomial(v-1, 2)`` non-adjacent grid pairs, so
    ``c2 (v-1) + c3 binomial(v-1, 2) = n binomial(K, 2)`` holds exactly.
    """
    n, v, K, w = spec.n, spec.v, spec.K, spec.w
    if v < 2 or K < 2:
        raise ValidationError("target concurrence needs v >= 2 and K >= 2")
    c1 = n * K / v
    c2 = w * n * (K - 1) / (v - 1) + (1 - w) * n * K * (K - 1) / (v * (v - 1))
    pair_slots = n * math.comb(K, 2)
    leftover = pair_slots - c2 * (v - 1)
    if v > 2:
        c3 = leftover / math.comb(v - 1, 2)
    else:
        c3 = 0.0
    c3 = max(c3, 0.0) if abs(c3) < 1e-12 else c3
    c3_literal = leftover / math.comb(n - 1, 2) if n >= 3 else None
    return TargetConcurrence(c1, c2, c3, c3_literal)


def concurrence(design: IncidenceMatrix) -> np.ndarray:
    """The ``v x v`` concurrence matrix ``N'N``."""
    N = design.entries.astype(np.int64)
    return N.T @ N


def design_plot_data(design: IncidenceMatrix) -> list[tuple[int, int, int]]:
    """Nonzero upper-triangle (diagonal included) cells of ``N'N``."""
    C = concurrence(design)
    j, k = np.triu_indices(design.v)
    keep = C[j, k] > 0
    return [(int(a), int(b), int(c)) for a, b, c in zip(j[keep], k[keep], C[j, k][keep])]


def generate_random_design(spec: DesignSpec) -> IncidenceMatrix:
    """Rows are independent uniform K-subsets of the grid."""
    rng = np.random.default_rng(spec.seed)
    keys = rng.random((spec.n, spec.v))
    chosen = np.argsort(keys, axis=1, kind="stable")[:, : spec.K]
    entries = np.zeros((spec.n, spec.v), dtype=np.uint8)
    np.put_along_axis(entries, chosen, 1, axis=1)
    return IncidenceMatrix(entries, "random")


def generate_snippet_design(spec: DesignSpec) -> IncidenceMatrix:
    """Rows are runs of K consecutive grid points.

    Start positions walk through ``0..v-K`` in order on the first pass and
    through fresh random permutations of that range afterwards.
    """
    rng = np.random.default_rng(spec.seed)
    n_starts = spec.v - spec.K + 1
    starts = list(range(min(n_starts, spec.n)))
    while len(starts) < spec.n:
        starts.extend(rng.permutation(n_starts).tolist())
    starts = starts[: spec.n]
    entries = np.zeros((spec.n, spec.v), dtype=np.uint8)
    for i, s in enumerate(starts):
        entries[i, s : s + spec.K] = 1
    return IncidenceMatrix(entries, "snippet")


def _is_prime(q: int) -> bool:
    return q >= 2 and all(q % d for d in range(2, int(q**0.5) + 1))


def affine_plane_lines(q: int = 5) -> list[list[int]]:
    """Lines of the affine plane AG(2, q) over Z_q, q prime.

    Point ``(x, y)`` has label ``q*x + y``.  The ``q^2 + q`` lines form a
    resolvable 2-(q^2, q, 1) design.
    """
    if not _is_prime(q):
        raise ValidationError("affine plane construction needs a prime order")
    lines = []
    for m in range(q):
        for b in range(q):
            lines.append(sorted(q * x + (m * x + b) % q for x in range(q)))
    for c in range(q):
        lines.append([q * c + y for y in range(q)])
    return lines


def generate_bibd(seed: int | None = None, q: int = 5) -> IncidenceMatrix:
    """The (30, 25, 5, 6, 1) BIBD (for q=5) with randomly relabelled points.

    ``seed=None`` keeps the canonical labelling.
    """
    lines = affine_plane_lines(q)
    base = _from_subsets(lines, q * q, "bibd")
    if seed is None:
        return base
    perm = np.random.default_rng(seed).permutation(q * q)
    entries = np.zeros_like(base.entries)
    entries[:, perm] = base.entries
    return IncidenceMatrix(entries, "bibd")


def extend_design(base: IncidenceMatrix, n_target: int, seed: int = 0) -> IncidenceMatrix:
    """Replicate ``base`` and top up with rows sampled without replacement."""
    if n_target < 1:
        raise ValidationError("n_target must be at least 1")
    if base.n == 0:
        raise ValidationError("cannot extend an empty design")
    copies, rem = divmod(n_target, base.n)
    rng = np.random.default_rng(seed)
    extra = np.sort(rng.choice(base.n, size=rem, replace=False)) if rem else np.array([], int)
    blocks = [base.entries] * copies + [base.entries[extra]]
    entries = np.vstack(blocks)
    return IncidenceMatrix(entries, base.structure_tag, base.snippet_rows if copies else 0)


# ---------------------------------------------------------------------------
# hybrid construction


@lru_cache(maxsize=8)
def _all_subsets(v: int, K: int) -> tuple[np.ndarray, np.ndarray]:
    count = math.comb(v, K)
    if count > _MAX_CANDIDATES:
        raise ValidationError(
            f"binomial({v}, {K}) = {count} candidate rows exceeds the enumeration limit"
        )
    if v > 63:
        raise ValidationError("hybrid construction supports grids of at most 63 points")
    combos = np.fromiter(
        itertools.chain.from_iterable(itertools.combinations(range(v), K)),
        dtype=np.int16,
        count=count * K,
    ).reshape(count, K)
    masks = (np.left_shift(np.uint64(1), combos.astype(np.uint64))).sum(axis=1, dtype=np.uint64)
    combos.setflags(write=False)
    masks.setflags(write=False)
    return combos, masks


def _bitmask(indices) -> int:
    return sum(1 << int(j) for j in indices)


class _Pool:
    """Candidate rows for one subject type, with gather indices for checks."""

    def __init__(self, combos: np.ndarray, masks: np.ndarray, v: int):
        self.combos = combos.astype(np.intp)
        self.masks = masks
        self._order = np.argsort(masks, kind="stable")
        self._sorted = masks[self._order]
        a, b = np.triu_indices(combos.shape[1], k=1)
        lo, hi = self.combos[:, a], self.combos[:, b]
        self.pair_idx = lo * v + hi
        self.adjacent = (hi - lo) == 1

    def __len__(self):
        return len(self.combos)

    def positions(self, masks: np.ndarray) -> np.ndarray:
        """Pool positions of the given row masks (absent masks are dropped)."""
        if not len(self) or not len(masks):
            return np.array([], dtype=np.intp)
        at = np.searchsorted(self._sorted, masks)
        at = np.minimum(at, len(self) - 1)
        hit = self._sorted[at] == masks
        return self._order[at[hit]]


class StoreMatrix:
    """Rows already handed out and withdrawn during make-up.

    New solutions may not coincide with a stored row.  The store is emptied
    once it would grow past ``limit`` rows.
    """

    def __init__(self, v: int, limit: int):
        self.v = v
        self.limit = limit
        self.rows: list[np.ndarray] = []
        self._masks: list[int] = []

    @property
    def p(self) -> int:
        return len(self.rows)

    def add(self, row_indices) -> None:
        if self.p + 1 > self.limit:
            self.clear()
        row = np.zeros(self.v, dtype=np.uint8)
        row[np.asarray(row_indices)] = 1
        self.rows.append(row)
        self._masks.append(_bitmask(row_indices))

    def clear(self) -> None:
        self.rows.clear()
        self._masks.clear()

    def mask_array(self) -> np.ndarray:
        return np.array(self._masks, dtype=np.uint64)

    def __contains__(self, row_indices) -> bool:
        return _bitmask(row_indices) in self._masks


def snippet_position(i: int, v: int) -> int:
    """Column of the first point of subject ``i``'s consecutive pair."""
    return i % (v - 1)


@dataclass
class _HybridState:
    v: int
    col: np.ndarray
    pair: np.ndarray
    rows: list = field(default_factory=list)

    def add(self, combo):
        self.col[combo] += 1
        a, b = np.triu_indices(len(combo), k=1)
        self.pair[combo[a].astype(np.int64) * self.v + combo[b]] += 1

    def remove(self, combo):
        self.col[combo] -= 1
        a, b = np.triu_indices(len(combo), k=1)
        self.pair[combo[a].astype(np.int64) * self.v + combo[b]] -= 1


class HybridBuilder:
    """Sequential row-by-row construction of a hybrid design.

    Each subject's row maximises ``sum_j min(1/r_j, 1)`` over its feasible
    K-subsets, where ``r_j`` counts earlier selections of column ``j``.  The
    feasible set is enumerated exactly.
    """

    def __init__(self, spec: DesignSpec, max_makeup: int | None = None, store_factor: int = 2):
        self.spec = spec
        self.targets = compute_target_concurrence(spec)
        self.max_makeup = 50 * spec.n if max_makeup is None else int(max_makeup)
        self.store_limit = store_factor * spec.n
        t = self.targets
        self.lim_col = math.floor(t.c1 + spec.delta + _EPS)
        self.lim_adj = math.floor(t.c2 + spec.delta + _EPS)
        self.lim_far = math.floor(t.c3 + spec.delta + _EPS)
        self._combos, self._masks = _all_subsets(spec.v, spec.K)
        v = spec.v
        gap = np.abs(np.arange(v)[:, None] - np.arange(v)[None, :])
        self.pair_limit = np.where(gap == 1, self.lim_adj, self.lim_far).ravel()
        self._pools: dict = {}
        self.makeup_iterations = 0

    # -- candidate pools -------------------------------------------------
    def _pool(self, i: int) -> _Pool:
        spec = self.spec
        if i >= spec.n_snippet:
            key = "bibd"
            if key not in self._pools:
                keep = np.all(np.diff(self._combos, axis=1) > 1, axis=1)
                self._pools[key] = _Pool(self._combos[keep], self._masks[keep], spec.v)
            return self._pools[key]
        p = snippet_position(i, spec.v)
        key = ("snippet", p)
        if key not in self._pools:
            need = np.uint64((1 << p) | (1 << (p + 1)))
            banned = [j for j in range(p - spec.gap, p) if j >= 0]
            banned += [j for j in range(p + 2, p + 2 + spec.gap) if j < spec.v]
            ban = np.uint64(_bitmask(banned))
            keep = ((self._masks & need) == need) & ((self._masks & ban) == 0)
            self._pools[key] = _Pool(self._combos[keep], self._masks[keep], spec.v)
        return self._pools[key]

    # -- feasibility -----------------------------------------------------
    def precheck(self) -> None:
        """Reject parameter sets for which no design can satisfy the limits."""
        spec, v, K = self.spec, self.spec.v, self.spec.K
        if K < 2 or v < 3:
            raise InfeasibleSpec("hybrid designs need K >= 2 and v >= 3", "spec")
        n_s = spec.n_snippet
        if n_s < spec.n and len(self._pool(spec.n)) == 0:
            raise InfeasibleSpec(
                f"no {K}-subset of {v} points avoids adjacent pairs", "no-consecutive"
            )
        for i in range(min(n_s, v - 1)):
            if len(self._pool(i)) == 0:
                raise InfeasibleSpec(
                    f"gap={spec.gap} leaves no room for {K - 2} extra points beside the "
                    f"cluster at column {snippet_position(i, v) + 1}",
                    "snippet-gap",
                )
        if self.lim_col < 1 or spec.n * K > self.lim_col * v:
            raise InfeasibleSpec("column limit c1 + delta too small", "column (c1)")
        if n_s and self.lim_adj < math.ceil(n_s / (v - 1)):
            raise InfeasibleSpec(
                "adjacent-pair limit c2 + delta cannot hold the snippet clusters",
                "adjacent-pair (c2)",
            )
        pairs_per_row = math.comb(K, 2)
        # a snippet row holds at most its cluster pair plus K-3 adjacent extras
        adj_per_snippet = 1 + max(K - 3, 0)
        adj_usable = min(self.lim_adj * (v - 1), n_s * adj_per_snippet)
        distant_needed = spec.n * pairs_per_row - adj_usable
        distant_room = self.lim_far * math.comb(v - 1, 2)
        if distant_needed > distant_room:
            raise InfeasibleSpec(
                f"at least {distant_needed} non-adjacent pair slots are needed but "
                f"c3 + delta = {self.targets.c3 + spec.delta:.4f} allows only "
                f"{self.lim_far} per pair ({distant_room} in total)",
                "distant-pair (c3)",
            )

    def _feasible(self, pool: _Pool, state: _HybridState, store: StoreMatrix):
        col_full = state.col >= self.lim_col
        pair_full = state.pair >= self.pair_limit
        ok = ~(col_full[pool.combos].any(axis=1) | pair_full[pool.pair_idx].any(axis=1))
        if store.p:
            ok[pool.positions(store.mask_array())] = False
        return ok

    def _solve(self, i, state, store, rng):
        pool = self._pool(i)
        ok = self._feasible(pool, state, store)
        if not ok.any():
            return None
        r = state.col.astype(float)
        weight = np.ones_like(r)
        np.divide(1.0, r, out=weight, where=r > 1)
        score = weight[pool.combos].sum(axis=1)
        score[~ok] = -np.inf
        tied = np.flatnonzero(score >= score.max() - _EPS)
        return pool.combos[tied[rng.integers(len(tied))]].astype(np.int64)

    def _blocking_constraint(self, i, state, store) -> str:
        pool = self._pool(i)
        ok = np.all(state.col[pool.combos] + 1 <= self.lim_col, axis=1)
        if not ok.any():
            return "column (c1)"
        counts = state.pair[pool.pair_idx] + 1
        ok &= np.all(~pool.adjacent | (counts <= self.lim_adj), axis=1)
        if not ok.any():
            return "adjacent-pair (c2)"
        ok &= np.all(pool.adjacent | (counts <= self.lim_far), axis=1)
        if not ok.any():
            return "distant-pair (c3)"
        return "store (S)"

    # -- main loop -------------------------------------------------------
    def build(self) -> IncidenceMatrix:
        spec = self.spec
        self.precheck()
        rng = np.random.default_rng(spec.seed)
        state = _HybridState(spec.v, np.zeros(spec.v, np.int64), np.zeros(spec.v**2, np.int64))
        store = StoreMatrix(spec.v, self.store_limit)
        assigned: list[np.ndarray] = []
        self.makeup_iterations = 0
        for i in range(spec.n):
            untried: list[int] = []
            while True:
                row = self._solve(i, state, store, rng)
                if row is not None:
                    state.add(row)
                    assigned.append(row)
                    break
                if i == 0:
                    raise InfeasibleSpec("first subject has no feasible row", "spec")
                if self.makeup_iterations >= self.max_makeup:
                    blocker = self._blocking_constraint(i, state, store)
                    raise ConstructionFailed(
                        f"subject {i + 1} of {spec.n} still infeasible after "
                        f"{self.makeup_iterations} make-up iterations (blocked by {blocker}); "
                        "consider a larger delta",
                        blocker,
                    )
                if not untried:
                    untried = rng.permutation(i).tolist()
                ell = untried.pop()
                self.makeup_iterations += 1
                old = assigned[ell]
                state.remove(old)
                store.add(old)
                new = self._solve(ell, state, store, rng)
                if new is None:
                    state.add(old)
                else:
                    state.add(new)
                    assigned[ell] = new
                    untried = []
        return _from_subsets(assigned, spec.v, "hybrid", spec.n_snippet)


def generate_hybrid_design(
    spec: DesignSpec, max_makeup: int | None = None, store_factor: int = 2
) -> IncidenceMatrix:
    """Build a hybrid snippet/near-BIBD design.

    Raises
    ------
    InfeasibleSpec
        When no incidence matrix can meet the constraints for this spec.
    ConstructionFailed
        When the make-up budget (default ``50 n``) runs out.
    """
    return HybridBuilder(spec, max_makeup, store_factor).build()


def generate_hybrid_design_adaptive(
    spec: DesignSpec, step: float = 0.5, max_delta: float | None = None, max_makeup=None
) -> tuple[IncidenceMatrix, float]:
    """Retry the hybrid construction with a growing delta until it succeeds.

    Returns the design and the delta that produced it.
    """
    if step <= 0:
        raise ValidationError("step must be positive")
    limit = max_delta if max_delta is not None else spec.delta + 20 * step
    delta = spec.delta
    while True:
        try:
            return generate_hybrid_design(spec.replace(delta=delta), max_makeup), delta
        except ConstructionFailed:
            if delta + step > limit + _EPS:
                raise
            delta = round(delta + step, 10)


def check_hybrid_constraints(design: IncidenceMatrix, spec: DesignSpec) -> dict[str, bool]:
    """Evaluate the row-sum, concurrence and structural constraints on ``design``."""
    N = design.entries.astype(np.int64)
    C = N.T @ N
    t = compute_target_concurrence(spec)
    v, n_s = design.v, design.snippet_rows
    j = np.arange(v - 1)
    far = np.triu(np.ones((v, v), bool), k=2)
    out = {
        "row_sum": bool((N.sum(axis=1) == spec.K).all()),
        "column (c1)": bool((np.diag(C) <= t.c1 + spec.delta + _EPS).all()),
        "adjacent-pair (c2)": bool((C[j, j + 1] <= t.c2 + spec.delta + _EPS).all()),
        "distant-pair (c3)": bool((C[far] <= t.c3 + spec.delta + _EPS).all()),
    }
    cluster_ok = gap_ok = True
    for i in range(n_s):
        p = snippet_position(i, v)
        cluster_ok &= bool(N[i, p] == 1 and N[i, p + 1] == 1)
        lo, hi = max(p - spec.gap, 0), min(p + 2 + spec.gap, v)
        gap_ok &= bool(N[i, lo:p].sum() == 0 and N[i, p + 2 : hi].sum() == 0)
    out["snippet-cluster"] = cluster_ok
    out["snippet-gap"] = gap_ok
    rest = N[n_s:]
    out["no-consecutive"] = bool(not (rest[:, :-1] & rest[:, 1:]).any())
    return out


def concurrence_deviations(design: IncidenceMatrix, spec: DesignSpec) -> dict[str, float]:
    """Largest absolute departure of ``N'N`` from ``c1``, ``c2`` and ``c3``."""
    C = concurrence(design).astype(float)
    t = compute_target_concurrence(spec)
    v = design.v
    j = np.arange(v - 1)
    far = np.triu(np.ones((v, v), bool), k=2)
    return {
        "c1": float(np.abs(np.diag(C) - t.c1).max()),
        "c2": float(np.abs(C[j, j + 1] - t.c2).max()) if v > 1 else 0.0,
        "c3": float(np.abs(C[far] - t.c3).max()) if v > 2 else 0.0,
    }


def generate_design(structure: str, spec: DesignSpec) -> IncidenceMatrix:
    """Dispatch on structure name.  BIBDs need ``(v, K) = (q^2, q)``."""
    if structure == "random":
        return generate_random_design(spec)
    if structure == "snippet":
        return generate_snippet_design(spec)
    if structure == "hybrid":
        return generate_hybrid_design(spec)
    if structure == "bibd":
        q = spec.K
        if spec.v != q * q or not _is_prime(q):
            raise ValidationError("bibd structure requires v = K^2 with K prime (e.g. 25, 5)")
        base = generate_bibd(spec.seed, q)
        return extend_design(base, spec.n, spec.seed)
    raise ValidationError(f"unknown structure {structure!r}")
