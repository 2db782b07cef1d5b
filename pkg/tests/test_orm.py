import math
from fractions import Fraction

import numpy as np
import pytest

from mpqalloc.errors import ZeroActivation
from mpqalloc.orm import orm_matrix, orm_pair, orm_stack

from conftest import make_trace


def exact_orm(a, b):
    """ORM from exact rational arithmetic; only the final sqrt is rounded.

    ORM^2 = ||b^T a||^4 / (||a^T a||^2 ||b^T b||^2), every factor a rational
    sum of products of the (exactly converted) float entries.
    """
    A = [[Fraction(float(v)) for v in row] for row in np.asarray(a)]
    Bm = [[Fraction(float(v)) for v in row] for row in np.asarray(b)]
    n, di, dj = len(A), len(A[0]), len(Bm[0])

    def cross(X, Y, dx, dy):
        return [[sum(X[r][p] * Y[r][q] for r in range(n)) for q in range(dy)] for p in range(dx)]

    def frob_sq(M):
        return sum(v * v for row in M for v in row)

    num = frob_sq(cross(Bm, A, dj, di))
    den_sq = frob_sq(cross(A, A, di, di)) * frob_sq(cross(Bm, Bm, dj, dj))
    return math.sqrt(num * num / den_sq)


def test_self_similarity(rng):
    a = rng.standard_normal((7, 4))
    assert orm_pair(a, a) == pytest.approx(1.0, abs=1e-14)


def test_orthogonal_columns():
    assert orm_pair([[1.0], [0.0]], [[0.0], [1.0]]) == 0.0


def test_identity_vs_ones():
    a = np.eye(2)
    b = np.ones((2, 1))
    want = exact_orm(a, b)
    assert want == pytest.approx(1 / math.sqrt(2), abs=1e-15)
    for path in ("feature", "sample", "auto"):
        assert abs(orm_pair(a, b, path=path) - want) <= 1e-12


def test_rational_cases_match_exact_oracle(rng):
    for _ in range(20):
        n = int(rng.integers(1, 5))
        a = rng.integers(-4, 5, size=(n, int(rng.integers(1, 4)))) / rng.integers(1, 5)
        b = rng.integers(-4, 5, size=(n, int(rng.integers(1, 4)))) / rng.integers(1, 5)
        if not a.any() or not b.any():
            continue
        want = exact_orm(a, b)
        assert abs(orm_pair(a, b, path="feature") - want) <= 1e-12
        assert abs(orm_pair(a, b, path="sample") - want) <= 1e-12


def test_scale_and_symmetry(rng):
    a = rng.standard_normal((6, 3))
    b = rng.standard_normal((6, 5))
    base = orm_pair(a, b)
    assert orm_pair(-3.5 * a, b) == pytest.approx(base, rel=1e-12)
    assert orm_pair(b, a) == pytest.approx(base, abs=1e-12)


def test_zero_activation_and_mismatch(rng):
    with pytest.raises(ZeroActivation):
        orm_pair(np.zeros((3, 2)), rng.standard_normal((3, 2)))
    with pytest.raises(ValueError):
        orm_pair(rng.standard_normal((3, 2)), rng.standard_normal((4, 2)))


def test_centering_flag(rng):
    a = rng.standard_normal((20, 3)) + 5.0
    b = rng.standard_normal((20, 3)) + 5.0
    # shared offset makes the uncentered metric large, centering removes it
    assert orm_pair(a, b) > 0.8
    assert orm_pair(a, b, centered=True) < 0.5


def test_matrix_single_layer():
    trace = make_trace([3], T=1, n=4)
    assert orm_matrix(trace, 0).values.tolist() == [[1.0]]


def test_matrix_identical_layers():
    trace = make_trace([2, 4, 4], T=1, n=6)
    trace.tensors[(0, 2)] = trace.tensors[(0, 1)].copy()
    K = orm_matrix(trace, 0).values
    assert K[1, 2] == pytest.approx(1.0, abs=1e-14)


def test_matrix_matches_exact_oracle():
    trace = make_trace([2, 3, 5, 7], T=1, n=8, seed=3)
    K = orm_matrix(trace, 0).values
    assert np.array_equal(K, K.T)
    assert np.all(np.diag(K) == 1.0)
    for i in range(4):
        for j in range(i + 1, 4):
            want = exact_orm(trace.layer(0, i), trace.layer(0, j))
            assert abs(K[i, j] - want) <= 1e-10


def test_matrix_zero_layer_named():
    trace = make_trace([2, 3], T=2, n=4)
    trace.tensors[(1, 1)][:] = 0.0
    with pytest.raises(ZeroActivation) as info:
        orm_stack(trace)
    assert info.value.layer_id == 1
    assert info.value.timestep == 1


def test_stack_constant_over_time():
    trace = make_trace([2, 3, 4], T=4, n=5)
    for t in range(1, 4):
        for i in range(3):
            trace.tensors[(t, i)] = trace.tensors[(0, i)]
    stack = orm_stack(trace)
    for m in stack.matrices[1:]:
        assert np.array_equal(m.values, stack.matrices[0].values)


def test_stack_subset_labels_and_independence():
    full = make_trace([2, 3, 4], T=12, n=5)
    sub = full.restrict([0, 5, 10])
    s_sub = orm_stack(sub)
    assert s_sub.timestep_indices == [0, 5, 10]
    s_full = orm_stack(full).subset([0, 5, 10])
    for x, y in zip(s_sub.matrices, s_full.matrices):
        assert x.timestep == y.timestep
        assert np.array_equal(x.values, y.values)


def test_stack_deterministic():
    trace = make_trace([3, 9, 16], T=3, n=6)
    a = orm_stack(trace).array()
    b = orm_stack(trace).array()
    assert a.tobytes() == b.tobytes()
