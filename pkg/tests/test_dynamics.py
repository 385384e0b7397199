import mpmath
import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from latent_soc.dynamics import (
    EigenSchedule,
    GaussianState,
    TimeGrid,
    decay_kernels,
    from_eigen,
    moments_sequential,
    propagate_step,
    sample_state,
    sequential_moments,
    to_eigen,
)
from latent_soc.grad_core import ContractViolation


def _ortho(d, rng):
    Q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    return Q


def test_kernels_zero_rate_limit():
    E, p1, p2 = decay_kernels(0.0, 1.0)
    assert (E, p1, p2) == (1.0, 1.0, 1.0)


def test_kernels_zero_interval():
    E, p1, p2 = decay_kernels(2.0, 0.0)
    assert (E, p1, p2) == (1.0, 0.0, 0.0)


def test_kernels_unit_values_against_high_precision():
    mpmath.mp.dps = 40
    e = mpmath.exp(-1)
    expected = (float(e), float(1 - e), float((1 - mpmath.exp(-2)) / 2))
    got = decay_kernels(1.0, 1.0)
    assert np.allclose(got, expected, rtol=0, atol=1e-15)
    assert np.allclose(got, (0.3678794, 0.6321206, 0.4323324), atol=5e-8)


def test_kernels_reject_negative_interval():
    with pytest.raises(ContractViolation, match="negative interval"):
        decay_kernels(1.0, -0.1)


def test_kernels_finite_for_large_exponents():
    lam = np.array([1e-4, 1.0, 50.0, 700.0, 1e6])
    for out in decay_kernels(lam, 1.0):
        assert np.all(np.isfinite(out))
    E, p1, p2 = decay_kernels(torch.tensor(lam), torch.tensor(1.0))
    assert torch.isfinite(p2).all()


def test_kernels_tiny_rate_matches_limit():
    _, p1, p2 = decay_kernels(1e-12, 2.0)
    assert p1 == pytest.approx(2.0, rel=1e-10)
    assert p2 == pytest.approx(2.0, rel=1e-10)


def test_propagate_fixed_point_mean():
    s = GaussianState(np.array([2.0]), np.array([0.0]))
    for delta in (0.1, 1.0, 7.0):
        out = propagate_step(s, np.array([2.0]), np.array([4.0]), delta)
        assert out.mean[0] == pytest.approx(2.0, abs=1e-14)


def test_propagate_stationary_variance():
    s = GaussianState(np.array([0.0]), np.array([0.5]))
    for delta in (0.1, 1.0, 7.0):
        assert propagate_step(s, np.array([1.0]), np.array([0.0]), delta).cov[0] == pytest.approx(0.5, abs=1e-15)


def test_propagate_unit_example():
    out = propagate_step(GaussianState(np.array([1.0]), np.array([0.0])), np.array([1.0]), np.array([0.0]), 1.0)
    assert out.mean[0] == pytest.approx(0.36788, abs=1e-5)
    assert out.cov[0] == pytest.approx(0.43233, abs=1e-5)


def test_propagate_rejects_canonical():
    with pytest.raises(ContractViolation):
        propagate_step(GaussianState(np.zeros(2), np.eye(2), "canonical"), 1.0, 0.0, 1.0)


def test_single_interval_sequence_equals_step(rng):
    d = 3
    V = _ortho(d, rng)
    lam, alpha = rng.uniform(0.1, 2, (1, d)), rng.standard_normal((1, d))
    init = GaussianState(rng.standard_normal(d), rng.uniform(0, 1, d))
    out = moments_sequential(init, EigenSchedule(V, lam, alpha), TimeGrid([0.7]))
    step = propagate_step(init, lam[0], alpha[0] @ V, 0.7)
    assert np.array_equal(out.mean[0], step.mean)
    assert np.array_equal(out.cov[0], step.cov)


def test_semigroup_collapse(rng):
    times = np.cumsum(rng.uniform(0.1, 0.5, 10))
    lam = np.full((10, 2), 0.8)
    init = GaussianState(np.array([1.0, -2.0]), np.zeros(2))
    out = moments_sequential(init, EigenSchedule(np.eye(2), lam, np.zeros((10, 2))), TimeGrid(times))
    expected = np.exp(-0.8 * times)[:, None] * init.mean
    assert np.allclose(out.mean, expected, rtol=1e-13, atol=0)


def _explicit_sums(mu0, var0, lam, a_hat, deltas):
    """Closed-form sums: products of decays times per-interval forcing."""
    k = lam.shape[0]
    means, variances = [], []
    for i in range(k):
        decay = lambda lo: np.exp(-np.sum(lam[lo:i + 1] * deltas[lo:i + 1, None], 0))
        m = decay(0) * mu0
        v = decay(0) ** 2 * var0
        for j in range(i + 1):
            after = decay(j + 1) if j < i else np.ones_like(mu0)
            m = m + after * a_hat[j] * (1 - np.exp(-lam[j] * deltas[j])) / lam[j]
            v = v + after ** 2 * (1 - np.exp(-2 * lam[j] * deltas[j])) / (2 * lam[j])
        means.append(m)
        variances.append(v)
    return np.array(means), np.array(variances)


def test_sixteen_steps_match_explicit_sums(rng):
    d, k = 3, 16
    lam = rng.uniform(0.1, 3, (k, d))
    a_hat = rng.standard_normal((k, d))
    deltas = rng.uniform(0.05, 0.8, k)
    mu0, var0 = rng.standard_normal(d), rng.uniform(0, 1, d)
    m, v = sequential_moments(mu0, var0, lam, a_hat, deltas)
    em, ev = _explicit_sums(mu0, var0, lam, a_hat, deltas)
    assert np.max(np.abs(m - em)) < 1e-12
    assert np.max(np.abs(v - ev)) < 1e-12


def test_schedule_grid_length_mismatch():
    sched = EigenSchedule(np.eye(1), np.ones((3, 1)), np.zeros((3, 1)))
    with pytest.raises(ContractViolation, match="3 intervals.*2"):
        moments_sequential(GaussianState(np.zeros(1), np.zeros(1)), sched, TimeGrid([1.0, 2.0]))


def test_timegrid_validation():
    with pytest.raises(ContractViolation):
        TimeGrid([1.0, 1.0])
    with pytest.raises(ContractViolation):
        TimeGrid([])
    with pytest.raises(ContractViolation):
        TimeGrid([0.5], origin=1.0)
    with pytest.raises(ContractViolation):
        TimeGrid([1.0, 2.0], is_target=[True])
    g = TimeGrid.from_indices([3, 5, 9], is_target=[False, True, False])
    assert np.allclose(g.times, [0.3, 0.5, 0.9])
    assert np.allclose(g.deltas, [0.3, 0.2, 0.4])
    assert g.context.tolist() == [0, 2] and g.target.tolist() == [1]


def test_schedule_invariants(rng):
    with pytest.raises(ContractViolation, match="orthonormal"):
        EigenSchedule(np.array([[1.0, 0.1], [0.0, 1.0]]), np.ones((1, 2)), np.zeros((1, 2)))
    with pytest.raises(ContractViolation, match="floor"):
        EigenSchedule(np.eye(2), np.full((1, 2), 1e-6), np.zeros((1, 2)))
    with pytest.raises(ContractViolation, match="differ"):
        EigenSchedule(np.eye(2), np.ones((2, 2)), np.zeros((1, 2)))
    V = _ortho(3, rng)
    alpha = rng.standard_normal((4, 3))
    assert np.allclose(EigenSchedule(V, np.ones((4, 3)), alpha).hat_controls, alpha @ V)


def test_basis_round_trip(rng):
    V = _ortho(5, rng)
    x = rng.standard_normal(5)
    assert np.array_equal(to_eigen(x, np.eye(5)), x)
    assert np.linalg.norm(from_eigen(to_eigen(x, V), V) - x) < 1e-12
    s = GaussianState(rng.standard_normal(5), rng.uniform(0, 2, 5))
    canon = from_eigen(s, V)
    assert np.allclose(canon.cov, canon.cov.T, atol=1e-14)
    assert np.linalg.eigvalsh(canon.cov).min() > -1e-12
    back = to_eigen(canon, V)
    assert np.max(np.abs(back.mean - s.mean)) < 1e-12
    assert np.max(np.abs(back.cov - s.cov)) < 1e-12


def test_sample_state_degenerate_cases(rng):
    s = GaussianState(np.array([1.0, 2.0]), np.array([0.3, 0.4]))
    assert np.array_equal(sample_state(s, np.zeros(2)), s.mean)
    assert np.array_equal(sample_state(GaussianState(s.mean, np.zeros(2)), rng.standard_normal(2)), s.mean)
    with pytest.raises(ContractViolation, match="negative variance"):
        sample_state(GaussianState(s.mean, np.array([0.1, -0.1])), np.zeros(2))


def test_sample_state_monte_carlo(rng):
    V = _ortho(3, rng)
    canon = from_eigen(GaussianState(np.array([1.0, -1.0, 0.5]), np.array([0.2, 1.0, 2.0])), V)
    n = 100_000
    draws = sample_state(canon, rng.standard_normal((n, 3)))
    se = np.sqrt(np.diag(canon.cov) / n)
    assert np.all(np.abs(draws.mean(0) - canon.mean) < 3 * se)
    var_se = np.diag(canon.cov) * np.sqrt(2 / (n - 1))
    assert np.all(np.abs(draws.var(0, ddof=1) - np.diag(canon.cov)) < 3 * var_se)


def test_sample_state_is_differentiable():
    mean = torch.tensor([0.0, 1.0], requires_grad=True)
    var = torch.tensor([0.25, 4.0], requires_grad=True)
    out = sample_state(GaussianState(mean, var), torch.tensor([1.0, 1.0])).sum()
    gm, gv = torch.autograd.grad(out, [mean, var])
    assert torch.allclose(gm, torch.ones(2))
    assert torch.allclose(gv, 0.5 / torch.sqrt(var.detach()))


@settings(max_examples=50, deadline=None)
@given(lam=st.floats(0.01, 5), alpha=st.floats(-3, 3), mu0=st.floats(-3, 3), var0=st.floats(0, 2),
       T=st.floats(0.1, 5), cuts=st.lists(st.floats(0.01, 0.99), min_size=0, max_size=8))
def test_partition_invariance(lam, alpha, mu0, var0, T, cuts):
    times = np.unique(np.concatenate([np.array(cuts) * T, [T]]))
    k = times.size
    m, v = sequential_moments(np.array([mu0]), np.array([var0]), np.full((k, 1), lam), np.full((k, 1), alpha),
                              np.diff(times, prepend=0.0))
    exact_m = np.exp(-lam * T) * mu0 + alpha * -np.expm1(-lam * T) / lam
    exact_v = np.exp(-2 * lam * T) * var0 + -np.expm1(-2 * lam * T) / (2 * lam)
    assert abs(m[-1, 0] - exact_m) < 1e-10
    assert abs(v[-1, 0] - exact_v) < 1e-10


@settings(max_examples=50, deadline=None)
@given(lam=st.floats(1e-4, 50), deltas=st.lists(st.floats(0, 10), min_size=2, max_size=10))
def test_variance_monotone_and_bounded(lam, deltas):
    deltas = np.sort(np.array(deltas))
    _, _, phi2 = decay_kernels(lam, deltas)
    assert np.all(np.diff(phi2) >= -1e-15)
    assert np.all(phi2 <= 1 / (2 * lam) * (1 + 1e-12))
