import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pilotdesign import smoothing


def _cells_1d(t, y):
    """Aggregate raw 1-D observations into cells."""
    pts, inv = np.unique(t, return_inverse=True)
    counts = np.bincount(inv).astype(float)
    sums = np.bincount(inv, weights=y)
    sumsq = np.bincount(inv, weights=y * y)
    return smoothing.Cells.from_accumulators(pts, counts, sums, sumsq)


def _naive_local_linear(t, y, t0, h):
    w = np.exp(-0.5 * ((t - t0) / h) ** 2)
    X = np.column_stack([np.ones_like(t), t - t0])
    beta = np.linalg.solve(X.T @ (w[:, None] * X), X.T @ (w * y))
    return beta[0]


@given(a=st.floats(-5, 5), b=st.floats(-5, 5), h=st.floats(0.05, 2.0))
def test_local_linear_reproduces_lines(a, b, h):
    t = np.repeat(np.linspace(0, 1, 9), 3)
    cells = _cells_1d(t, a + b * t)
    grid = np.linspace(0, 1, 9)
    np.testing.assert_allclose(smoothing.local_linear(cells, grid, h), a + b * grid,
                               atol=1e-7 * (1 + abs(a) + abs(b)))


def test_aggregated_fit_matches_raw_fit():
    rng = np.random.default_rng(0)
    t = rng.choice(np.linspace(0, 1, 11), size=200)
    y = np.sin(3 * t) + rng.normal(0, 0.3, t.size)
    cells = _cells_1d(t, y)
    for t0 in (0.0, 0.37, 1.0):
        got = smoothing.local_linear(cells, [t0], 0.15)[0]
        assert got == pytest.approx(_naive_local_linear(t, y, t0, 0.15), abs=1e-9)


def test_gcv_matches_direct_formula():
    rng = np.random.default_rng(1)
    t = rng.choice(np.linspace(0, 1, 7), size=60)
    y = t**2 + rng.normal(0, 0.1, t.size)
    cells = _cells_1d(t, y)
    h = 0.2
    # direct: hat matrix on the raw observations
    H = np.zeros((t.size, t.size))
    for i, t0 in enumerate(t):
        w = np.exp(-0.5 * ((t - t0) / h) ** 2)
        X = np.column_stack([np.ones_like(t), t - t0])
        H[i] = np.linalg.solve(X.T @ (w[:, None] * X), (X * w[:, None]).T)[0]
    resid = y - H @ y
    expected = (resid @ resid / t.size) / (1 - np.trace(H) / t.size) ** 2
    assert smoothing.gcv_score(cells, h) == pytest.approx(expected, rel=1e-6)


def test_select_bandwidth_returns_a_candidate_and_falls_back():
    rng = np.random.default_rng(2)
    t = rng.choice(np.linspace(0, 1, 11), size=300)
    cells = _cells_1d(t, np.cos(4 * t) + rng.normal(0, 0.2, t.size))
    cands = smoothing.bandwidth_candidates(np.linspace(0, 1, 11))
    assert smoothing.select_bandwidth(cells, cands) in cands
    # one occupied cell: every fit interpolates, GCV is degenerate
    lone = _cells_1d(np.zeros(4), np.arange(4.0))
    assert smoothing.select_bandwidth(lone, cands, fallback=0.25) == 0.25
    with pytest.raises(ValueError):
        smoothing.select_bandwidth(lone, cands)


def test_bandwidth_candidates_span():
    grid = np.linspace(0, 1, 25)
    c = smoothing.bandwidth_candidates(grid, 12)
    assert len(c) == 12 and c[0] == pytest.approx(0.5 / 24) and c[-1] == pytest.approx(0.5)
    assert np.all(np.diff(c) > 0)


def test_rotated_diagonal_is_exact_for_ridge_surfaces():
    # G(s, t) = 1 + 2u + 3u^2... with u=(s+t)/2 (linear part only) and -4 d^2 across
    grid = np.linspace(0, 1, 15)
    S, T = np.meshgrid(grid, grid, indexing="ij")
    U, D = 0.5 * (S + T), S - T
    G = 1.0 + 2.0 * U - 4.0 * D**2
    off = ~np.eye(15, dtype=bool)
    pts = np.column_stack([S.ravel(), T.ravel()])
    counts = off.astype(float).ravel()
    cells = smoothing.Cells.from_accumulators(pts, counts, (G * off).ravel(),
                                              (G**2 * off).ravel())
    np.testing.assert_allclose(smoothing.rotated_diagonal(cells, grid, 0.2), 1 + 2 * grid,
                               atol=1e-8)


def test_epanechnikov_support():
    assert smoothing.epanechnikov(np.array([0.0, 0.5, 1.0, 2.0])).tolist() == \
        [0.75, 0.75 * 0.75, 0.0, 0.0]
