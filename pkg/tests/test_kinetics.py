import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from coaghom.kinetics import (
    KineticParams,
    KineticsError,
    coagulation,
    eval_L,
    eval_N,
    kernel_matrix,
    loss_rate,
    ode_oracle,
    truncate,
)

# u_1(1) for M=2, a = 1, u0 = (1, 0); frozen after step halving agreed to 1e-13
GOLDEN_U1 = 0.442926044416463
GOLDEN_U2 = 0.234353687801244


def params(M, **kw):
    return KineticParams.build(M, **kw)


def test_truncation_branches():
    assert truncate(-1.0, 5) == 0.0
    assert truncate(3.0, 5) == 3.0
    assert truncate(7.0, 5) == 5.0


def test_reference_values():
    p2, p3 = params(2), params(3)
    np.testing.assert_allclose(eval_L(np.array([1.0, 1.0]), p2), [-2.0, 0.5], atol=1e-15)
    L3 = eval_L(np.ones(3), p3)
    np.testing.assert_allclose(L3, [-3.0, -2.5, 1.5], atol=1e-15)
    assert L3.sum() == pytest.approx(-4.0)
    np.testing.assert_allclose(eval_N(np.ones(3), p3), [-3.0, -2.5, 1.5], atol=1e-15)
    assert np.all(eval_L(np.zeros(4), params(4)) == 0)
    assert np.all(eval_N(np.zeros(4), params(4)) == 0)


def dense_coagulation(u, k):
    """Loop transcription of the capped coagulation law, for cross-checking."""
    M = len(u)
    out = np.zeros(M)
    for m in range(1, M + 1):
        if m < M:
            gain = sum(0.5 * k[j - 1, m - j - 1] * u[j - 1] * u[m - j - 1] for j in range(1, m))
            out[m - 1] = gain - u[m - 1] * sum(k[m - 1, j] * u[j] for j in range(M))
        else:
            out[M - 1] = sum(
                0.5 * k[j - 1, l - 1] * u[j - 1] * u[l - 1]
                for j in range(1, M)
                for l in range(1, M)
                if j + l >= M
            )
    return out


nonneg_vectors = st.integers(min_value=2, max_value=8).flatmap(
    lambda M: arrays(np.float64, M, elements=st.floats(min_value=0.0, max_value=10.0))
)


@settings(max_examples=200, deadline=None)
@given(nonneg_vectors, st.sampled_from(["constant", "sum", "product"]))
def test_vectorized_matches_loop(u, kind):
    k = kernel_matrix(kind, len(u))
    np.testing.assert_allclose(coagulation(u, k), dense_coagulation(u, k), rtol=1e-12, atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(nonneg_vectors)
def test_count_never_increases_and_quasi_positive(u):
    p = params(len(u), a="sum")
    L = eval_L(u, p)
    scale = max(1.0, float(np.sum(np.abs(L))))
    assert L.sum() <= 1e-12 * scale
    for m in range(len(u)):
        v = u.copy()
        v[m] = 0.0
        assert eval_L(v, p)[m] >= 0.0


@settings(max_examples=100, deadline=None)
@given(nonneg_vectors)
def test_truncation_inactive_below_threshold(u):
    p = params(len(u), truncation=float(u.max()) + 1.0)
    assert np.array_equal(eval_L(u, p, truncated=True), eval_L(u, p))


def test_vectorized_over_nodes(rng):
    p = params(3, a="product")
    u = rng.random((3, 4, 5))
    out = eval_L(u, p)
    for i in range(4):
        for j in range(5):
            np.testing.assert_allclose(out[:, i, j], eval_L(u[:, i, j], p), rtol=1e-14)


def test_loss_rate_zero_for_top_class(rng):
    u = rng.random((4, 7))
    r = loss_rate(u, kernel_matrix("sum", 4))
    assert np.all(r[-1] == 0)
    np.testing.assert_allclose(r[0], (kernel_matrix("sum", 4)[0] @ u))


def test_kernel_validation():
    bad = np.ones((2, 2))
    bad[0, 1] = bad[1, 0] = -1
    with pytest.raises(KineticsError, match=r"a\[1,2\]"):
        KineticParams.build(2, a=bad)
    with pytest.raises(KineticsError, match="symmetric"):
        KineticParams.build(2, a=[[1, 2], [3, 1]])
    z = np.ones((2, 2))
    z[1, 1] = 0.0
    with pytest.raises(KineticsError):
        KineticParams.build(2, a=z)
    p = KineticParams.build(2, a=z, allow_nonpaper=True)
    assert "zero coagulation kernel entries" in p.nonpaper_flags
    with pytest.raises(KineticsError):
        KineticParams.build(1)


def test_ode_oracle_zero_and_monotone():
    p = params(2)
    _, traj = ode_oracle([0.0, 0.0], p, 1.0, 0.01)
    assert np.all(traj == 0)
    _, traj = ode_oracle([1.0, 0.0], p, 1.0, 0.01)
    assert np.all(np.diff(traj[:, 0]) < 0)
    assert np.all(np.diff(traj[:, 1]) > 0)
    assert np.all(np.diff(traj.sum(axis=1)) < 0)


def test_ode_oracle_golden_value():
    _, a = ode_oracle([1.0, 0.0], params(2), 1.0, 1e-3)
    _, b = ode_oracle([1.0, 0.0], params(2), 1.0, 5e-4)
    assert abs(a[-1, 0] - b[-1, 0]) < 1e-8
    assert b[-1, 0] == pytest.approx(GOLDEN_U1, abs=1e-12)
    assert b[-1, 1] == pytest.approx(GOLDEN_U2, abs=1e-12)


def test_ode_oracle_closed_form():
    # with a_12 negligible, u_1' = -u_1^2 so u_1(t) = 1 / (1 + t)
    p = params(2, a=[[1.0, 1e-30], [1e-30, 1.0]], allow_nonpaper=True)
    _, traj = ode_oracle([1.0, 0.0], p, 1.0, 1e-3)
    assert traj[-1, 0] == pytest.approx(0.5, abs=1e-10)


def test_ode_oracle_rejects_huge_step():
    with pytest.raises(KineticsError, match="dt too large"):
        ode_oracle([50.0, 0.0], params(2), 1.0, 1.0)
