import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from boostresnet.numkit import (NumericalError, Rng, axpy, dot, finite_diff_grad, l1_norm,
                                linf_norm, logsumexp, matmul, matvec, max_relative_error, relu,
                                relu_grad, softmax, transpose)

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def naive_matvec(m, v):
    out = []
    for i in range(len(m)):
        acc = 0.0
        for j in range(len(v)):
            acc += m[i][j] * v[j]
        out.append(acc)
    return out


def test_matvec_examples():
    assert matvec(np.eye(2), [3, -1]).tolist() == [3, -1]
    assert matvec(np.zeros((3, 2)), [5, 7]).tolist() == [0, 0, 0]
    assert matvec([[1, 2], [3, 4]], [1, 1]).tolist() == [3, 7]


def test_matvec_dimension_mismatch():
    with pytest.raises(ValueError):
        matvec(np.eye(2), [1, 2, 3])
    with pytest.raises(ValueError):
        matmul(np.eye(2), np.ones((3, 1)))


@given(st.integers(1, 6), st.integers(1, 6), st.data())
def test_matvec_matches_naive_loop(r, c, data):
    m = data.draw(arrays(np.float64, (r, c), elements=finite))
    v = data.draw(arrays(np.float64, (c,), elements=finite))
    ref = np.array(naive_matvec(m.tolist(), v.tolist()))
    scale = np.abs(m) @ np.abs(v) + 1e-300
    assert np.all(np.abs(matvec(m, v) - ref) <= 1e-12 * scale)


def test_plumbing_ops():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert transpose(a).tolist() == [[1, 3], [2, 4]]
    assert axpy(2.0, [1, 2], [1, 1]).tolist() == [3, 5]
    assert dot([1, 2], [3, 4]) == 11.0
    assert l1_norm([-1, 2, -3]) == 6.0
    assert linf_norm([-1, 2, -3]) == 3.0
    assert matmul(a, np.eye(2)).tolist() == a.tolist()
    with pytest.raises(ValueError):
        axpy(1.0, [1, 2], [1])
    with pytest.raises(NumericalError):
        matmul([[1e308]], [[10.0]])


def test_relu_examples():
    assert relu([-1, 0, 2]).tolist() == [0, 0, 2]
    assert relu_grad([-1, 0, 2]).tolist() == [0, 0, 1]
    v = np.array([0.5, 3.0, 1e-9])
    assert np.array_equal(relu(v), v)


@given(arrays(np.float64, st.integers(1, 8), elements=finite), finite)
def test_softmax_normalized_and_shift_invariant(v, c):
    p = softmax(v)
    assert abs(p.sum() - 1.0) <= 1e-12
    assert np.all(np.abs(softmax(v + c) - p) <= 1e-10)


def test_logsumexp_is_stable():
    assert logsumexp([1000.0, 1000.0]) == pytest.approx(1000.0 + math.log(2.0), abs=1e-12)
    assert np.allclose(logsumexp(np.array([[0.0, 0.0], [1.0, -np.inf]]), axis=1), [math.log(2), 1.0])


def test_finite_diff_examples():
    g = finite_diff_grad(lambda x: float(x @ x), np.array([1.0, 2.0]), 1e-5)
    assert np.all(np.abs(g - [2.0, 4.0]) <= 1e-6)
    assert np.array_equal(finite_diff_grad(lambda x: 3.0, np.array([1.0, -2.0, 5.0])), np.zeros(3))
    g = finite_diff_grad(lambda x: math.exp(x[0]), np.array([0.0]), 1e-5)
    assert abs(g[0] - 1.0) <= 1e-8


def test_finite_diff_errors():
    with pytest.raises(ValueError):
        finite_diff_grad(lambda x: 0.0, np.zeros(2), h=0.0)
    with pytest.raises(NumericalError):
        finite_diff_grad(lambda x: float("nan"), np.zeros(2))


@given(arrays(np.float64, st.integers(1, 6), elements=st.floats(-10, 10)),
       arrays(np.float64, 6, elements=st.floats(-10, 10)))
def test_finite_diff_of_linear_is_weights(w, x):
    x = x[: w.size]
    g = finite_diff_grad(lambda z: dot(w, z), x)
    assert np.all(np.abs(g - w) <= 1e-6)


def test_max_relative_error():
    assert max_relative_error([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert max_relative_error([1.0], [1.1]) == pytest.approx(0.1 / 1.1)


def test_rng_matches_reference_splitmix64():
    # reference stream computed with plain Python integers
    mask = (1 << 64) - 1
    state = 0
    expected = []
    for _ in range(4):
        state = (state + 0x9E3779B97F4A7C15) & mask
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & mask
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & mask
        expected.append(z ^ (z >> 31))
    got = Rng(0).next_u64(4)
    assert [int(v) for v in got] == expected
    assert expected[0] == 0xE220A8397B1DCDAF


def test_rng_determinism_and_streams():
    a, b = Rng(42), Rng(42)
    assert np.array_equal(a.normal(100), b.normal(100))
    assert np.array_equal(a.uniform(10), b.uniform(10))
    # chunked draws equal one long draw
    c, d = Rng(7), Rng(7)
    assert np.array_equal(np.concatenate([c.next_u64(3), c.next_u64(5)]), d.next_u64(8))
    s1, s2 = Rng(1).spawn("init"), Rng(1).spawn("shuffle")
    assert not np.array_equal(s1.next_u64(4), s2.next_u64(4))
    assert np.array_equal(Rng(1).spawn("init").next_u64(4), Rng(1).spawn("init").next_u64(4))


def test_rng_distributions():
    r = Rng(3)
    u = r.uniform(50000)
    assert u.min() >= 0.0 and u.max() < 1.0
    assert abs(u.mean() - 0.5) < 0.01
    z = r.normal(50000)
    assert abs(z.mean()) < 0.02 and abs(z.std() - 1.0) < 0.02
    p = r.permutation(20)
    assert sorted(p.tolist()) == list(range(20))
    k = r.integers(2, 5, 1000)
    assert set(k.tolist()) == {2, 3, 4}
    assert r.normal((3, 4)).shape == (3, 4)
