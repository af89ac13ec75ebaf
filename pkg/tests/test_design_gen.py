import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pilotdesign import design_gen as dg
from pilotdesign.errors import ConstructionFailed, InfeasibleSpec, ValidationError


# -- DesignSpec ---------------------------------------------------------------

@pytest.mark.parametrize("kwargs", [
    dict(n=0, v=25, K=5), dict(n=10, v=25, K=0), dict(n=10, v=25, K=26),
    dict(n=10, v=25, K=5, w=1.5), dict(n=10, v=25, K=5, w=-0.1),
    dict(n=10, v=25, K=5, delta=-1.0), dict(n=10, v=25, K=5, gap=-1),
    dict(n=10, v=25, K=5, seed=-3), dict(n=10.5, v=25, K=5), dict(n=True, v=25, K=5),
])
def test_spec_rejects_invalid(kwargs):
    with pytest.raises(ValidationError):
        dg.DesignSpec(**kwargs)


def test_snippet_count_rounds_half_up():
    assert dg.DesignSpec(30, 25, 5, w=0.2).n_snippet == 6
    assert dg.DesignSpec(25, 25, 5, w=0.1).n_snippet == 3  # 2.5 -> 3
    assert dg.DesignSpec(30, 25, 5, w=0.0).n_snippet == 0


# -- target concurrence -------------------------------------------------------

def test_target_concurrence_documented_example():
    t = dg.compute_target_concurrence(dg.DesignSpec(30, 25, 5, w=0.2))
    assert t.c1 == pytest.approx(6.0, abs=1e-12)
    assert t.c2 == pytest.approx(1.8, abs=1e-12)
    assert t.c3 == pytest.approx(256.8 / 276, abs=1e-12)


def test_target_concurrence_pure_bibd_case_is_uniform():
    t = dg.compute_target_concurrence(dg.DesignSpec(30, 25, 5, w=0.0))
    assert t.as_tuple() == pytest.approx((6.0, 1.0, 1.0), abs=1e-12)


def test_target_concurrence_pure_snippet_case():
    t = dg.compute_target_concurrence(dg.DesignSpec(30, 25, 5, w=1.0))
    assert t.c2 == pytest.approx(5.0, abs=1e-12)
    assert t.c3 == pytest.approx((300 - 120) / 276, abs=1e-12)


def test_target_concurrence_keeps_literal_denominator():
    t = dg.compute_target_concurrence(dg.DesignSpec(30, 25, 5, w=0.2))
    assert t.c3_literal == pytest.approx(256.8 / math.comb(29, 2), abs=1e-12)


@given(n=st.integers(3, 500), v=st.integers(3, 40), K=st.integers(2, 40),
       w=st.floats(0, 1))
def test_pair_conservation(n, v, K, w):
    K = min(K, v)
    t = dg.compute_target_concurrence(dg.DesignSpec(n, v, K, w=w))
    total = t.c2 * (v - 1) + t.c3 * math.comb(v - 1, 2)
    assert total == pytest.approx(n * math.comb(K, 2), rel=1e-12, abs=1e-9)


def test_target_concurrence_needs_two_points():
    with pytest.raises(ValidationError):
        dg.compute_target_concurrence(dg.DesignSpec(10, 25, 1))


# -- random and snippet -------------------------------------------------------

def test_random_full_row():
    d = dg.generate_random_design(dg.DesignSpec(1, 5, 5, seed=9))
    assert d.entries.tolist() == [[1, 1, 1, 1, 1]]


@given(n=st.integers(1, 80), K=st.integers(1, 25), seed=st.integers(0, 2**32 - 1))
def test_random_rows_sum_to_K_and_repeat(n, K, seed):
    spec = dg.DesignSpec(n, 25, K, seed=seed)
    d = dg.generate_random_design(spec)
    assert (d.entries.sum(axis=1) == K).all()
    assert d == dg.generate_random_design(spec)


def test_random_trace_is_nK():
    d = dg.generate_random_design(dg.DesignSpec(50, 25, 5, seed=1))
    assert np.trace(dg.concurrence(d)) == 250


def test_snippet_first_row_is_leading_run():
    d = dg.generate_snippet_design(dg.DesignSpec(1, 25, 5))
    assert d.row_indices(0).tolist() == [0, 1, 2, 3, 4]


@given(n=st.integers(1, 100), K=st.integers(1, 25), seed=st.integers(0, 1000))
def test_snippet_rows_are_runs_and_band_limited(n, K, seed):
    d = dg.generate_snippet_design(dg.DesignSpec(n, 25, K, seed=seed))
    for i in range(d.n):
        idx = d.row_indices(i)
        assert len(idx) == K and (np.diff(idx) == 1).all()
    assert all(k - j < K for j, k, _ in dg.design_plot_data(d))
    C = dg.concurrence(d)
    j, k = np.nonzero(C)
    assert (np.abs(j - k) <= K - 1).all()


# -- BIBD ---------------------------------------------------------------------

def _is_2_design(d, lam=1):
    C = dg.concurrence(d)
    off = C[~np.eye(d.v, dtype=bool)]
    return (off == lam).all()


@pytest.mark.parametrize("seed", [None, 0, 1, 77, 2**31])
def test_bibd_parameters(seed):
    d = dg.generate_bibd(seed)
    assert d.entries.shape == (30, 25)
    assert (d.entries.sum(axis=1) == 5).all()
    assert (d.entries.sum(axis=0) == 6).all()
    assert _is_2_design(d)
    for a, b in itertools.combinations(range(25), 2):
        assert int((d.entries[:, a] & d.entries[:, b]).sum()) == 1


def _row_sets(entries):
    return sorted(tuple(np.flatnonzero(r)) for r in entries)


def test_bibd_seeds_give_isomorphic_designs():
    a, b = dg.generate_bibd(3), dg.generate_bibd(4)
    assert a != b
    canonical = dg.generate_bibd(None)
    # each seeded design is the canonical one with its points relabelled
    perm_a = np.random.default_rng(3).permutation(25)
    perm_b = np.random.default_rng(4).permutation(25)
    assert np.array_equal(a.entries[:, perm_a], canonical.entries)
    assert np.array_equal(b.entries[:, perm_b], canonical.entries)
    # so a column permutation carries b's line set onto a's
    relabel = np.empty(25, int)
    relabel[perm_b] = perm_a
    mapped = [tuple(sorted(relabel[list(r)])) for r in _row_sets(b.entries)]
    assert sorted(mapped) == _row_sets(a.entries)


def test_bibd_plot_data():
    triples = dg.design_plot_data(dg.generate_bibd(5))
    assert len(triples) == math.comb(25, 2) + 25
    assert {c for _, _, c in triples} == {1, 6}


def test_bibd_needs_prime_order():
    with pytest.raises(ValidationError):
        dg.affine_plane_lines(4)


def test_extend_design():
    base = dg.generate_bibd(2)
    assert dg.extend_design(base, 30) == base
    d60 = dg.extend_design(base, 60)
    assert (d60.entries.sum(axis=0) == 12).all()
    d50 = dg.extend_design(base, 50, seed=1)
    assert d50.n == 50 and (d50.entries.sum(axis=1) == 5).all()
    assert np.array_equal(d50.entries[:30], base.entries)
    # top-up rows are distinct rows of the base
    extra = {tuple(r) for r in d50.entries[30:]}
    assert len(extra) == 20


def test_generate_design_bibd_dispatch():
    d = dg.generate_design("bibd", dg.DesignSpec(45, 25, 5, seed=3))
    assert d.n == 45 and d.structure_tag == "bibd"
    with pytest.raises(ValidationError):
        dg.generate_design("bibd", dg.DesignSpec(45, 24, 5))
    with pytest.raises(ValidationError):
        dg.generate_design("lattice", dg.DesignSpec(45, 25, 5))


# -- concurrence helpers ------------------------------------------------------

def test_concurrence_of_full_single_row():
    d = dg.IncidenceMatrix(np.ones((1, 6), int), "random")
    assert (dg.concurrence(d) == 1).all()


def test_plot_data_empty_design():
    d = dg.IncidenceMatrix(np.zeros((0, 5), int), "random")
    assert dg.design_plot_data(d) == []


def test_incidence_validation():
    with pytest.raises(ValidationError):
        dg.IncidenceMatrix(np.array([[1, 2, 0]]), "random")
    with pytest.raises(ValidationError):
        dg.IncidenceMatrix(np.array([[1, 1, 0], [1, 0, 0]]), "random")
    with pytest.raises(ValidationError):
        dg.IncidenceMatrix(np.array([[1, 1, 0]]), "unknown")
    d = dg.IncidenceMatrix(np.array([[1, 1, 0]]), "random")
    with pytest.raises(ValueError):
        d.entries[0, 0] = 0


# -- hybrid -------------------------------------------------------------------

def test_hybrid_first_row_has_cluster_and_exclusion():
    spec = dg.DesignSpec(30, 25, 5, w=0.2, delta=2.0, gap=2, seed=4)
    d = dg.generate_hybrid_design(spec)
    row = d.row_indices(0).tolist()
    assert row[:2] == [0, 1]
    assert all(j >= 4 for j in row[2:])


@pytest.mark.parametrize("n,w", [(30, 0.2), (60, 0.1), (60, 0.3), (120, 0.2)])
def test_hybrid_constraints_hold_at_working_delta(n, w):
    spec = dg.DesignSpec(n, 25, 5, w=w, delta=1.0, gap=2, seed=11)
    d, delta = dg.generate_hybrid_design_adaptive(spec)
    checks = dg.check_hybrid_constraints(d, spec.replace(delta=delta))
    assert all(checks.values()), checks
    assert d.snippet_rows == spec.n_snippet
    N = d.entries[d.snippet_rows:]
    assert not (N[:, :-1] & N[:, 1:]).any()


@pytest.mark.parametrize("n,w", [(30, 0.2), (60, 0.2), (60, 0.3), (120, 0.3)])
def test_hybrid_adjacent_band_is_bounded_by_snippet_rows(n, w):
    # only snippet rows may hold adjacent pairs: the cluster plus at most K-3 among the extras
    spec = dg.DesignSpec(n, 25, 5, w=w, seed=5)
    hybrid, _ = dg.generate_hybrid_design_adaptive(spec)
    j = np.arange(24)
    adjacent_total = dg.concurrence(hybrid)[j, j + 1].sum()
    assert spec.n_snippet <= adjacent_total <= spec.n_snippet * (spec.K - 2)


def test_hybrid_is_deterministic():
    spec = dg.DesignSpec(60, 25, 5, w=0.2, delta=1.5, seed=7)
    assert dg.generate_hybrid_design(spec) == dg.generate_hybrid_design(spec)


def test_hybrid_infeasible_at_unit_delta_names_distant_pair_limit():
    spec = dg.DesignSpec(30, 25, 5, w=0.2, delta=1.0, gap=2)
    with pytest.raises(InfeasibleSpec) as info:
        dg.generate_hybrid_design(spec)
    assert info.value.constraint == "distant-pair (c3)"


def test_hybrid_gap_too_wide_is_infeasible():
    spec = dg.DesignSpec(10, 8, 5, w=1.0, delta=5.0, gap=3)
    with pytest.raises(InfeasibleSpec) as info:
        dg.generate_hybrid_design(spec)
    assert info.value.constraint == "snippet-gap"


def test_hybrid_makeup_budget_exhaustion_reports_blocker():
    spec = dg.DesignSpec(60, 25, 5, w=0.3, delta=1.0, seed=0)
    with pytest.raises(ConstructionFailed) as info:
        dg.generate_hybrid_design(spec, max_makeup=20)
    assert info.value.constraint in {"column (c1)", "adjacent-pair (c2)",
                                     "distant-pair (c3)", "store (S)"}


def test_hybrid_rows_avoid_store():
    store = dg.StoreMatrix(25, limit=3)
    for r in ([0, 1, 5, 9, 12], [2, 3, 7, 11, 20], [4, 6, 8, 10, 14]):
        store.add(r)
    assert [0, 1, 5, 9, 12] in store and store.p == 3
    store.add([1, 2, 3, 4, 5])  # would exceed the limit, so the store restarts
    assert store.p == 1 and [0, 1, 5, 9, 12] not in store


def test_snippet_position_wraps():
    assert [dg.snippet_position(i, 25) for i in (0, 1, 23, 24, 25)] == [0, 1, 23, 0, 1]


def test_adaptive_reports_the_delta_used():
    spec = dg.DesignSpec(30, 25, 5, w=0.2, delta=1.0, seed=2)
    d, delta = dg.generate_hybrid_design_adaptive(spec)
    assert delta > 1.0
    assert all(dg.check_hybrid_constraints(d, spec.replace(delta=delta)).values())
