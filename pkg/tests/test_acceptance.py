"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -s`` to see the summary lines
(they are printed with capture disabled, so plain ``pytest`` shows them too).
"""
import contextlib
import math
import time
from fractions import Fraction

import numpy as np
import pytest

from mpqalloc import aggregation, allocator, pipeline, reports
from mpqalloc.aggregation import aggregate, rho_from_gamma
from mpqalloc.allocator import AllocationProblem, objective, solve_brute_force, solve_dp, solve_greedy
from mpqalloc.cli import main
from mpqalloc.orm import OrmMatrix, OrmStack, orm_pair
from mpqalloc.quantizer import (
    ASYMMETRIC,
    SYMMETRIC,
    apply_allocation,
    calibrate,
    calibrate_asymmetric,
    calibrate_symmetric,
    quantize,
    quantize_asymmetric,
    quantize_symmetric,
)
from mpqalloc.toy_diffusion import sample_timesteps

from test_cli import GOLDEN, GOLDEN_FILES, run_pipeline
from test_orm import exact_orm


@pytest.fixture
def criterion(capsys):
    @contextlib.contextmanager
    def run(number, title):
        start = time.perf_counter()
        status = "FAIL"
        try:
            yield
            status = "PASS"
        finally:
            elapsed = time.perf_counter() - start
            with capsys.disabled():
                print(f"\n[{status}] criterion {number}: {title} ({elapsed:.2f} s)")

    return run


def rel(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-300)


def random_orthogonal(rng, d):
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


def test_criterion_1_orm_properties(criterion):
    rng = np.random.default_rng(2024)
    with criterion(1, "ORM symmetry, range, self, scale, rotation, path agreement on 1000 pairs"):
        start = time.perf_counter()
        for _ in range(1000):
            n = int(rng.integers(2, 65))
            di, dj = int(rng.integers(1, 129)), int(rng.integers(1, 129))
            a, b = rng.standard_normal((n, di)), rng.standard_normal((n, dj))
            k = orm_pair(a, b)
            assert abs(k - orm_pair(b, a)) <= 1e-12
            assert 0.0 <= k <= 1.0 + 1e-9
            assert orm_pair(a, a) == 1.0 or abs(orm_pair(a, a) - 1.0) <= 1e-12
            c1, c2 = 10.0 ** rng.uniform(-3, 3), 10.0 ** rng.uniform(-3, 3)
            assert rel(orm_pair(c1 * a, c2 * b), k) <= 1e-10
            qa, qb = random_orthogonal(rng, di), random_orthogonal(rng, dj)
            assert rel(orm_pair(a @ qa, b @ qb), k) <= 1e-9
            assert rel(orm_pair(a, b, path="feature"), orm_pair(a, b, path="sample")) <= 1e-8
        assert time.perf_counter() - start < 10.0


def test_criterion_2_exact_oracle(criterion):
    rng = np.random.default_rng(99)
    with criterion(2, "ORM against exact rational evaluation"):
        a, b = np.eye(2), np.ones((2, 2))
        assert abs(orm_pair(a, b) - 1 / math.sqrt(2)) <= 1e-12
        assert abs(exact_orm(a, b) - 1 / math.sqrt(2)) <= 1e-12
        for _ in range(20):
            n, di, dj = (int(v) for v in rng.integers(1, 5, 3))
            a = rng.integers(-4, 5, (n, di)) / rng.integers(1, 5, (n, di))
            b = rng.integers(-4, 5, (n, dj)) / rng.integers(1, 5, (n, dj))
            a[0, 0] = b[0, 0] = 1.0  # keep both Grams nonzero
            want = exact_orm(a, b)
            for path in ("feature", "sample"):
                assert abs(orm_pair(a, b, path=path) - want) <= 1e-12


def test_criterion_3_aggregation_closed_forms(criterion):
    rng = np.random.default_rng(7)
    with criterion(3, "aggregation closed forms, single timestep, permutation invariance"):
        for T in (1, 2, 3, 10, 50, 200):
            gbar = rng.uniform(0, 5, 6)
            g = np.repeat(gbar[:, None], T, axis=1)
            np.testing.assert_allclose(rho_from_gamma(g, "paper")[2], math.sqrt(T) * gbar, rtol=1e-10, atol=0)
            np.testing.assert_allclose(rho_from_gamma(g, "mean")[2], gbar, rtol=1e-10, atol=0)
        g = rng.uniform(0, 5, (6, 1))
        for mode in ("paper", "mean"):
            assert np.array_equal(rho_from_gamma(g, mode)[2], g[:, 0])
        L, T = 6, 30
        mats = []
        for _ in range(T):
            K = np.triu(rng.uniform(0, 1, (L, L)), 1)
            K = K + K.T
            np.fill_diagonal(K, 1.0)
            mats.append(K)
        stack = OrmStack([OrmMatrix(t, m) for t, m in enumerate(mats)], list(range(T)))
        perm = rng.permutation(T)
        shuffled = OrmStack([OrmMatrix(t, mats[k]) for t, k in enumerate(perm)], list(range(T)))
        for mode in ("paper", "mean"):
            a, b = aggregate(stack, mode), aggregate(shuffled, mode)
            np.testing.assert_allclose(a.rho, b.rho, rtol=0, atol=1e-12)
            np.testing.assert_allclose(a.theta, b.theta, rtol=0, atol=1e-12)


def small_problem(rng, uniform_even=False):
    L, nb = int(rng.integers(1, 7)), int(rng.integers(1, 5))
    if uniform_even:
        start, step = int(rng.integers(1, 5)), int(rng.integers(1, 3))
        B = [start + step * k for k in range(nb)]
        p = [int(rng.integers(1, 100))] * L
    else:
        B = sorted(rng.choice(np.arange(1, 17), size=nb, replace=False).tolist())
        p = rng.integers(0, 100, L).tolist()
    theta = rng.uniform(0.01, 1.0, L)
    lo, hi = sum(x * B[0] for x in p), sum(x * B[-1] for x in p)
    return AllocationProblem(theta, p, int(rng.integers(lo, hi + 2)), B)


def test_criterion_4_allocator_oracles(criterion):
    rng = np.random.default_rng(4)
    with criterion(4, "dp == brute force (500), greedy == brute force (200), greedy within 2% at L=50 (100)"):
        start = time.perf_counter()
        for _ in range(500):
            prob = small_problem(rng)
            assert solve_dp(prob).objective_value == solve_brute_force(prob).objective_value
        for _ in range(200):
            prob = small_problem(rng, uniform_even=True)
            assert solve_greedy(prob).objective_value == solve_brute_force(prob).objective_value
        worst = 0.0
        for _ in range(100):
            p = rng.integers(50, 500, 50).tolist()
            B = allocator.DEFAULT_BITS
            lo, hi = sum(x * B[0] for x in p), sum(x * B[-1] for x in p)
            prob = AllocationProblem(rng.uniform(0.01, 1.0, 50), p, int(rng.integers(lo, hi)), B)
            exact, approx = solve_dp(prob).objective_value, solve_greedy(prob).objective_value
            worst = max(worst, (exact - approx) / exact)
        assert worst <= 0.02
        assert time.perf_counter() - start < 60.0


def test_criterion_5_allocator_invariants(criterion):
    rng = np.random.default_rng(5)
    with criterion(5, "feasibility, budget monotonicity, theta-scaling invariance"):
        for _ in range(20):
            L = int(rng.integers(2, 9))
            p = rng.integers(1, 80, L).tolist()
            theta = rng.uniform(0.05, 1.0, L)
            B = [3, 4, 5, 6, 8]
            lo, hi = sum(x * B[0] for x in p), sum(x * B[-1] for x in p)
            prev = -np.inf
            for budget in np.linspace(lo, hi, 50).astype(int):
                prob = AllocationProblem(theta, p, int(budget), B)
                for solver in (solve_dp, solve_greedy):
                    a = solver(prob)
                    assert a.used_bits <= prob.budget_bits
                val = solve_dp(prob).objective_value
                assert val >= prev
                prev = val
            budget = int(rng.integers(lo, hi + 1))
            ref = {s.__name__: s(AllocationProblem(theta, p, budget, B)).bits for s in (solve_dp, solve_brute_force)}
            for c in (1e-6, 1.0, 1e6):
                for solver in (solve_dp, solve_brute_force):
                    assert solver(AllocationProblem(c * theta, p, budget, B)).bits == ref[solver.__name__]


def test_criterion_6_quantizer(criterion):
    rng = np.random.default_rng(6)
    with criterion(6, "quantizer idempotence, levels, error bound, exact grid, MSE monotone in b"):
        for scheme in (SYMMETRIC, ASYMMETRIC):
            for b in range(1, 9):
                x = rng.standard_normal(2000) * rng.uniform(0.1, 5)
                cfg = calibrate(x, b, scheme)
                once = quantize(x, cfg)
                np.testing.assert_array_equal(quantize(once, cfg), once)
                assert len(np.unique(once)) <= 2**b
        for b in range(1, 9):
            x = rng.uniform(-3, 3, 2000)
            cfg = calibrate_symmetric(x, b)
            err = np.abs(quantize_symmetric(x, cfg) - x)
            in_range = np.abs(x / cfg.step) <= cfg.clip_hi
            assert np.all(err[in_range] <= cfg.step / 2 + 1e-12)
        grid = np.array([0.0, 1.0, 2.0, 3.0])
        cfg = calibrate_asymmetric(grid, 2)
        assert cfg.step == 1.0 and cfg.zero_point == 0
        np.testing.assert_array_equal(quantize_asymmetric(grid, cfg), grid)
        for _ in range(100):
            w = rng.standard_normal((int(rng.integers(4, 40)), int(rng.integers(4, 40)))) * rng.uniform(0.01, 10)
            for scheme in (SYMMETRIC, ASYMMETRIC):
                mses = [apply_allocation([w], [b], scheme)[1][0].mse for b in range(1, 9)]
                assert all(nxt <= cur for cur, nxt in zip(mses, mses[1:]))


def test_criterion_7_sampling_study(criterion, capsys):
    with criterion(7, "sampling study: fraction 1 exact, T=200 counts, biggest >= MAPC"):
        assert [len(sample_timesteps(200, f)) for f in pipeline.STUDY_FRACTIONS] == [100, 50, 25, 10]
        traces = [pipeline.gen_traces(pipeline.ToyConfig(timesteps=200, samples=16, seed=7 + k)) for k in range(5)]
        rep = pipeline.sampling_study(traces, fractions=(Fraction(1),) + pipeline.STUDY_FRACTIONS)
        first = rep["rows"][0]
        assert first["timesteps"] == 200
        assert first["mapc"] == 0.0 and first["biggest_change_percent"] == 0.0
        assert [r["timesteps"] for r in rep["rows"][1:]] == [100, 50, 25, 10]
        for r in rep["rows"]:
            assert r["biggest_change_percent"] >= r["mapc"]
        with capsys.disabled():
            print("\n" + pipeline.format_study_table(rep))


def test_criterion_8_end_to_end_golden(criterion, tmp_path):
    with criterion(8, "end-to-end determinism and golden reports"):
        start = time.perf_counter()
        run_pipeline(tmp_path / "a")
        run_pipeline(tmp_path / "b")
        for name in GOLDEN_FILES:
            produced = (tmp_path / "a" / name).read_bytes()
            assert produced == (tmp_path / "b" / name).read_bytes(), name
            assert produced == (GOLDEN / name).read_bytes(), name
        assert time.perf_counter() - start < 120.0


def test_criterion_9_mixed_vs_uniform(criterion, tmp_path, capsys):
    with criterion(9, "uniform-4-bit budget report, non-uniform allocation under theta spread"):
        out = tmp_path / "run"
        for cmd in (["gen-traces"], ["allocate", "--budget", "uniform:4"], ["quantize-eval"]):
            assert main(["--out-dir", str(out), *cmd]) == 0
        alloc = reports.load_report(out / "allocation.json")
        rep = reports.load_report(out / "quantize_eval.json")
        runs = {r["config"]: r for r in rep["runs"]}
        assert set(runs) == {"full_precision", "uniform", "mixed"}
        assert rep["uniform_bits"] == 4
        assert runs["mixed"]["size_bits"] <= rep["budget_bits"] == runs["uniform"]["size_bits"]
        free = [x for x in alloc["layers"] if not x["pinned"]]
        theta = np.array([x["theta"] for x in free])
        if (theta.max() - theta.min()) / theta.max() > 0.10:
            assert len({x["bits"] for x in free}) > 1
        with capsys.disabled():
            print(
                f"\n  output MSE vs full precision: mixed {runs['mixed']['output_mse']:.6g} "
                f"(bits {runs['mixed']['bits']}), uniform 4-bit {runs['uniform']['output_mse']:.6g}; "
                f"mixed is {rep['mixed_vs_uniform']}"
            )
