"""Acceptance gate.

Each test runs one acceptance criterion at its stated tolerance and prints a
single PASS/FAIL line with the measured numbers, whatever the outcome.
"""

import itertools
import json
import math
import time

import numpy as np
import pytest
from conftest import random_model

from pilotdesign import cli, criteria, design_gen, design_search, fpca_pace
from pilotdesign import sim_harness as sh
from pilotdesign.design_gen import DesignSpec
from pilotdesign.errors import ConstructionFailed
from pilotdesign.fpca_pace import PaceOptions


@pytest.fixture
def verdict(capsys):
    def report(number, ok, detail):
        with capsys.disabled():
            print(f"\n[acceptance {number:>2}] {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail
    return report


def test_criterion_01_bibd_exactness(verdict):
    start = time.perf_counter()
    design = design_gen.generate_bibd(seed=2024)
    C = design_gen.concurrence(design)
    elapsed = time.perf_counter() - start
    pairs = C[np.triu_indices(25, 1)]
    ok = (design.n == 30 and design.K == 5 and pairs.size == 300 and np.all(pairs == 1)
          and np.all(np.diag(C) == 6) and int(np.trace(C)) == 150 and elapsed < 1.0)
    verdict(1, ok, f"300 pairs covered once={bool(np.all(pairs == 1))}, "
                   f"r={set(np.diag(C).tolist())}, trace={int(np.trace(C))}, {elapsed:.3f}s")


def test_criterion_02_target_concurrence(verdict):
    got = design_gen.compute_target_concurrence(DesignSpec(30, 25, 5, 0.2)).as_tuple()
    plain = design_gen.compute_target_concurrence(DesignSpec(30, 25, 5, 0.0)).as_tuple()
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(200):
        v = int(rng.integers(3, 40))
        K = int(rng.integers(2, v + 1))
        spec = DesignSpec(int(rng.integers(1, 500)), v, K, float(rng.uniform(0, 1)))
        t = design_gen.compute_target_concurrence(spec)
        lhs = (v - 1) * t.c2 + math.comb(v - 1, 2) * t.c3
        worst = max(worst, abs(lhs - spec.n * math.comb(K, 2)) / max(1.0, abs(lhs)))
    ok = (np.allclose(got, (6, 1.8, 0.930434782608), rtol=0, atol=1e-9)
          and np.allclose(plain, (6, 1, 1), atol=1e-12) and worst <= 1e-9)
    verdict(2, ok, f"(30,25,5,0.2) -> {tuple(round(x, 6) for x in got)}, w=0 -> {plain}, "
                   f"worst pair-conservation error {worst:.2e}")


@pytest.mark.slow
def test_criterion_03_hybrid_feasibility(verdict):
    cells = []
    for n in (30, 60, 120, 240):
        for w in (0.1, 0.2, 0.3):
            spec = DesignSpec(n, 25, 5, w, delta=1.0, gap=2, seed=n * 10 + int(w * 10))
            start = time.perf_counter()
            try:
                design = design_gen.generate_hybrid_design(spec, max_makeup=50 * n)
                checks = design_gen.check_hybrid_constraints(design, spec)
                status = "ok" if all(checks.values()) else \
                    "violates " + ",".join(k for k, good in checks.items() if not good)
            except ConstructionFailed as exc:
                status = f"failed ({exc.constraint})"
            cells.append((n, w, status, time.perf_counter() - start))
    bad = [c for c in cells if c[2] != "ok"]
    slow = max(c[3] for c in cells if c[0] == 240)
    ok = not bad and slow < 60
    detail = f"{len(cells) - len(bad)}/12 cells ok, slowest n=240 cell {slow:.1f}s"
    if bad:
        detail += "; " + "; ".join(f"n={n},w={w}: {s}" for n, w, s, _ in bad)
    verdict(3, ok, detail)


def test_criterion_04_conservation(verdict):
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(1000):
        v = int(rng.integers(3, 26))
        model = random_model(rng, v=v, M=int(rng.integers(1, min(v, 6) + 1)),
                             sigma2=float(rng.uniform(0.01, 3.0)))
        t = np.sort(rng.choice(v, int(rng.integers(1, v + 1)), replace=False))
        gap = criteria.f_value(model, t) + criteria.mise(model, t) - model.eigenvalues.sum()
        worst = max(worst, abs(gap))
    verdict(4, worst <= 1e-10, f"max |F + MISE - tr L| over 1000 fixtures = {worst:.2e}")


def test_criterion_05_are_oracle(verdict):
    rng = np.random.default_rng(5)
    same = random_model(rng, v=10, M=3)
    are_same = criteria.are(same, same, 3).are
    subsets = list(itertools.combinations(range(10), 3))
    mismatches = 0
    trials = 20
    for _ in range(trials):
        est = random_model(rng, v=10, M=int(rng.integers(1, 4)))
        true = random_model(rng, v=10, M=int(rng.integers(1, 4)))
        f_est = np.array([criteria.f_value(est, t) for t in subsets])
        t_opt = subsets[int(np.argmax(f_est))]
        if criteria.are(est, true, 3).t_opt != t_opt:
            mismatches += 1
        for rep in design_search.threshold_analysis(est, true, 3, (0.99, 0.97, 0.95)):
            members = sorted((i for i in range(120) if f_est[i] / f_est.max() >= rep.theta),
                             key=lambda i: (f_est[i], i))
            expected = (t_opt, subsets[members[0]], subsets[members[(len(members) - 1) // 2]])
            if (rep.t_opt, rep.t_worst, rep.t_median) != expected:
                mismatches += 1
    ok = are_same == 0.0 and mismatches == 0
    verdict(5, ok, f"ARE(model, model)={are_same}, brute-force mismatches "
                   f"{mismatches} over {trials} model pairs x 3 thresholds")


def test_criterion_06_exhaustive_scale(verdict):
    model = sh.SimConfig().true_model()
    start = time.perf_counter()
    cands, values = design_search.evaluate_candidates(model, 5)
    best = design_search.search_optimal(model, 5)
    elapsed = time.perf_counter() - start
    ok = len(cands) == len(values) == 53_130 and elapsed < 10
    verdict(6, ok, f"{len(cands)} candidates, optimum {criteria.format_design(best[0])}, "
                   f"{elapsed:.2f}s")


def _alignment(model, truth):
    w = fpca_pace.trapezoid_weights(truth.grid)
    return [abs(float(np.sum(w * model.eigenfunctions[:, m] * truth.eigenfunctions[:, m])))
            for m in range(min(3, model.M))]


def test_criterion_07_pace_recovery(verdict):
    noiseless = sh.SimConfig(sigma2=0.0)
    truth = noiseless.true_model()
    _, U = sh.simulate_dataset(noiseless, 0, 200)
    dense = sh.sparsify(U, design_gen.IncidenceMatrix(np.ones((200, 25), np.uint8), "random"))
    model = fpca_pace.fit_pace(dense, PaceOptions(assume_noisy=False))
    align = _alignment(model, truth)
    ratios = [float(model.eigenvalues[m] / truth.eigenvalues[m]) for m in range(2)]
    dense_ok = len(align) == 3 and min(align) >= 0.95 and all(abs(r - 1) <= 0.10 for r in ratios)

    cfg = sh.SimConfig()
    sigmas = []
    for run in range(10):
        _, U = sh.simulate_dataset(cfg, run, 240)
        design = design_gen.generate_random_design(DesignSpec(240, 25, 5, seed=run))
        sigmas.append(float(fpca_pace.fit_pace(sh.sparsify(U, design)).sigma2))
    within = sum(abs(s / cfg.sigma2 - 1) <= 0.30 for s in sigmas)
    ok = dense_ok and within >= 8
    verdict(7, ok, f"dense: alignment {[round(a, 4) for a in align]}, "
                   f"lambda ratios {[round(r, 4) for r in ratios]}; sparse: sigma2 within 30% "
                   f"in {within}/10 runs {[round(s, 2) for s in sigmas]}")


def test_criterion_08_monotonicity(verdict):
    rng = np.random.default_rng(8)
    violations = 0
    for _ in range(500):
        v = int(rng.integers(3, 26))
        model = random_model(rng, v=v, M=int(rng.integers(1, min(v, 6) + 1)),
                             sigma2=float(rng.uniform(0.0, 3.0)))
        big = np.sort(rng.choice(v, int(rng.integers(2, v + 1)), replace=False))
        small = np.sort(rng.choice(big, int(rng.integers(1, len(big))), replace=False))
        if criteria.f_value(model, small) > criteria.f_value(model, big) + 1e-10:
            violations += 1
    verdict(8, violations == 0, f"{violations} violations over 500 nested pairs")


@pytest.fixture(scope="module")
def reduced_protocol():
    config = sh.SimConfig(n_datasets=3, n_designs=5, subject_counts=(60, 120, 240))
    start = time.perf_counter()
    result = sh.run_experiment(config, threads=sh.default_threads())
    return result, time.perf_counter() - start


def _table(result, metric):
    return {key: round(value, 4) for key, value in result.median_table(metric).items()}


@pytest.mark.slow
def test_criterion_09_composite_trend(verdict, reduced_protocol):
    result, elapsed = reduced_protocol
    table = result.median_table("composite")
    counts = (60, 120, 240)
    wins = sum(table[("hybrid", n)] <= min(table[("bibd", n)], table[("random", n)])
               for n in counts)
    monotone = {s: all(table[(s, a)] >= table[(s, b)] for a, b in zip(counts, counts[1:]))
                for s in ("bibd", "random", "hybrid")}
    ok = wins >= 2 and all(monotone.values()) and elapsed < 1800
    verdict(9, ok, f"hybrid lowest at {wins}/3 subject counts; decreasing in n {monotone}; "
                   f"medians {_table(result, 'composite')}; {elapsed:.0f}s")


@pytest.mark.slow
def test_criterion_10_worst_case_efficiency(verdict, reduced_protocol):
    result, _ = reduced_protocol
    table = result.median_table("eff_worst_0.99")
    wins = sum(table[("hybrid", n)] >= max(table[("bibd", n)], table[("random", n)])
               for n in (60, 120, 240))
    verdict(10, wins >= 2, f"hybrid highest at {wins}/3 subject counts; "
                           f"medians {_table(result, 'eff_worst_0.99')}")


def test_criterion_11_determinism(verdict, tmp_path):
    def session(tag, threads):
        root = tmp_path / tag
        root.mkdir()
        (root / "cfg.json").write_text(json.dumps(
            {"n_datasets": 2, "n_designs": 2, "subject_counts": [60],
             "structures": ["random", "hybrid"]}))
        codes = [
            cli.main(["design", "generate", "--structure", "hybrid", "--subjects", "60",
                      "--delta", "auto", "--seed", "7", "--out", str(root / "design.csv")]),
            cli.main(["simulate", "--subjects", "60", "--design", str(root / "design.csv"),
                      "--out", str(root / "data.csv")]),
            cli.main(["experiment", "--config", str(root / "cfg.json"), "--out",
                      str(root / "exp"), "--threads", str(threads)]),
        ]
        return codes, {p.relative_to(root): p.read_bytes()
                       for p in sorted(root.rglob("*")) if p.suffix == ".csv"}

    codes_a, files_a = session("one", 1)
    codes_b, files_b = session("two", 2)
    same = files_a.keys() == files_b.keys() and all(files_a[k] == files_b[k] for k in files_a)
    ok = codes_a == codes_b == [0, 0, 0] and same and len(files_a) >= 5
    verdict(11, ok, f"{len(files_a)} CSV outputs compared across reruns with 1 and 2 workers; "
                    f"identical={same}")
