from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import group_mse, simulate_psi_risk
from pcshrink import GroupSummary, InputError, oracle_weights
from pcshrink.montecarlo import DesignSpec, generate_sample
from pcshrink.risk import (RiskInputs, asymptotic_risk_pcs, dominance_matrix_check,
                           limit_weights, local_t_statistic, pcs_group_mse,
                           pcs_group_mse_quadratic, weighted_loss, weighted_mse)
from pcshrink.groups import summarize

GAMMA4 = np.array([0.25, 0.25, 0.25, 0.25])


@st.composite
def designs(draw, max_j=6):
    J = draw(st.integers(2, max_j))
    seed = draw(st.integers(0, 2 ** 31))
    rng = np.random.default_rng(seed)
    return RiskInputs(rng.normal(size=J), rng.uniform(0.3, 3.0, J), rng.dirichlet(np.ones(J) * 2) * 0.98 + 0.02 / J,
                      n=float(rng.integers(5, 5000)))


@given(designs(), st.integers(0, 2 ** 31))
@settings(max_examples=60, deadline=None)
def test_group_mse_forms_agree(inputs, seed):
    rng = np.random.default_rng(seed)
    J = inputs.mu.size
    w = rng.normal(size=J)
    w /= w.sum() if abs(w.sum()) > 0.1 else 1.0
    w[-1] = 1.0 - w[:-1].sum()
    for k in range(J):
        ref = group_mse(w, inputs.mu, inputs.sigma2, inputs.p, inputs.n, k)
        assert pcs_group_mse(w, inputs, k) == pytest.approx(ref, rel=1e-12, abs=1e-14)
        assert pcs_group_mse_quadratic(w, inputs, k) == pytest.approx(ref, rel=1e-12, abs=1e-14)


def test_weighted_mse_is_sum_of_group_mses():
    inputs = RiskInputs([0.0, 0.3, 1.0], [1.0, 2.0, 0.5], [0.2, 0.3, 0.5], n=80)
    w = oracle_weights(inputs.mu, inputs.gamma, inputs.n).values
    total = sum(inputs.gamma[k] * group_mse(w[k], inputs.mu, inputs.sigma2, inputs.p, inputs.n, k)
                for k in range(3))
    assert float(weighted_mse(w, inputs.mu, inputs.gamma, inputs.n)) == pytest.approx(total, rel=1e-12)


def test_ols_risk_equals_j():
    inputs = RiskInputs(np.zeros(5), np.arange(1.0, 6.0), np.full(5, 0.2))
    assert inputs.ols_risk == pytest.approx(5.0)


def test_weighted_loss_trivial_cases():
    assert weighted_loss([1.0, 2.0], [1.0, 2.0], [3.0, 4.0]) == 0.0
    assert weighted_loss([1.0, 0.0], [0.0, 0.0], [3.0, 4.0]) == 3.0
    assert weighted_loss([1.0, 1.0], [0.0, 0.0], np.array([[1.0, 0.5], [0.5, 1.0]])) == 3.0
    with pytest.raises(InputError):
        weighted_loss([1.0, 1.0], [0.0, 0.0], np.eye(3))
    with pytest.raises(InputError):
        weighted_loss([1.0, 1.0, 1.0], [0.0, 0.0], [1.0, 1.0])


# asymptotic risk -------------------------------------------------------------

@pytest.mark.parametrize("gamma,delta", [
    (GAMMA4, np.zeros(4)),
    (GAMMA4, np.array([0.0, 0.0, 0.0, 3.0])),
    (np.array([0.4, 0.1, 0.3, 0.2]) / np.array([1.0, 2.0, 0.5, 1.5]), np.array([0.0, 2.0, -3.0, 1.0])),
    (np.array([0.2, 0.5, 0.3]), np.array([1.0, -1.0, 0.5])),
])
def test_asymptotic_risk_matches_direct_simulation(gamma, delta):
    est = asymptotic_risk_pcs(gamma, delta, draws=200_000, seed=1)
    ref, ref_se = simulate_psi_risk(gamma, delta, 400_000, seed=2)
    assert abs(est.value - ref) < 4 * np.hypot(est.std_error, ref_se)


def test_risk_at_origin_below_j():
    est = asymptotic_risk_pcs(GAMMA4, np.zeros(4), draws=100_000)
    assert est.value + 4 * est.std_error < 4.0


def test_risk_below_j_on_grid():
    for direction in ([0, 0, 0, 1], [0, 0, -3, 1], [0, 2, -3, 1]):
        d = np.asarray(direction, float)
        d /= np.abs(d).max()
        for t in np.linspace(0, 10, 11):
            est = asymptotic_risk_pcs(GAMMA4, t * d, draws=20_000, seed=3)
            assert est.value < 4.0


def test_risk_approaches_j_far_away():
    vals = [asymptotic_risk_pcs(GAMMA4, t * np.array([0, 0, 0, 1.0]), draws=20_000).value
            for t in (5.0, 20.0, 100.0, 1000.0)]
    assert all(a < b + 1e-6 for a, b in zip(vals, vals[1:]))
    assert vals[-1] == pytest.approx(4.0, abs=1e-3)


def test_risk_permutation_invariant():
    gamma = np.array([0.1, 0.3, 0.2, 0.4])
    delta = np.array([0.5, -1.0, 2.0, 0.0])
    perm = [2, 0, 3, 1]
    a = asymptotic_risk_pcs(gamma, delta, draws=100_000, seed=4)
    b = asymptotic_risk_pcs(gamma[perm], delta[perm], draws=100_000, seed=5)
    assert abs(a.value - b.value) < 4 * np.hypot(a.std_error, b.std_error)


def test_risk_deterministic_across_threads():
    a = asymptotic_risk_pcs(GAMMA4, np.ones(4), draws=50_000, seed=7, threads=1)
    b = asymptotic_risk_pcs(GAMMA4, np.ones(4), draws=50_000, seed=7, threads=3)
    assert a.value == b.value and a.std_error == b.std_error


def test_risk_input_limits():
    with pytest.raises(InputError):
        asymptotic_risk_pcs(np.full(17, 1 / 17), np.zeros(17))
    with pytest.raises(InputError):
        asymptotic_risk_pcs(GAMMA4, np.zeros(4), draws=10)
    with pytest.raises(InputError):
        asymptotic_risk_pcs(GAMMA4, np.zeros(3))


@pytest.mark.parametrize("J", [4, 5, 7])
def test_dominance_matrix_psd(J):
    rng = np.random.default_rng(J)
    for _ in range(5):
        gamma = rng.dirichlet(np.ones(J)) / rng.uniform(0.5, 2, J)
        rep = dominance_matrix_check(gamma)
        assert rep.is_psd and rep.diagonally_dominant
        assert rep.max_abs_diff < 1e-10


def test_dominance_fails_for_three_groups():
    rep = dominance_matrix_check(np.array([0.2, 0.5, 0.3]))
    assert not rep.is_psd
    assert np.all(np.diag(rep.neg_c) < 0)


def test_dominance_equal_precisions():
    rep = dominance_matrix_check(np.ones(4))
    assert rep.min_eigenvalue >= -1e-10


# limits of the weights -----------------------------------------------------

def test_close_limit_matches_local_oracle():
    gamma = np.array([0.1, 0.3, 0.2, 0.4])
    delta = np.array([0.0, 2.0, -3.0, 1.0])
    n = 400.0
    exact = oracle_weights(delta / np.sqrt(n), gamma, n).values
    np.testing.assert_allclose(limit_weights(gamma, delta=delta).values, exact, atol=1e-12)


def test_distant_limit_matches_large_n_oracle():
    gamma = np.array([0.1, 0.3, 0.2, 0.4])
    mu = np.array([0.0, 1.0, 2.0, 3.0])
    big = oracle_weights(mu, gamma, 1e8).values
    np.testing.assert_allclose(limit_weights(gamma, mu=mu).values, big, atol=1e-6)


def test_distant_limit_requires_spread():
    with pytest.raises(InputError):
        limit_weights(GAMMA4, mu=np.ones(4))
    with pytest.raises(InputError):
        limit_weights(GAMMA4)


# local t statistic -----------------------------------------------------------

def test_t_statistic_basic():
    s = GroupSummary.from_moments([1.0, 1.0, 2.0], [1.0, 2.0, 1.0], [10, 10, 20])
    assert local_t_statistic(s, 0, 1) == 0.0
    assert local_t_statistic(s, 0, 2) == -local_t_statistic(s, 2, 0)
    # sqrt(40) * (-1) / sqrt(1 / 0.25 + 1 / 0.5)
    assert local_t_statistic(s, 0, 2) == pytest.approx(-np.sqrt(40 / 6))


def test_t_statistic_null_rejection_rate():
    spec = DesignSpec(design="A", sigma2=(1, 1, 1, 1), error_family="gaussian", n=400,
                      replications=1, seed=21, deltas=(0.0,))
    t = np.array([local_t_statistic(summarize(generate_sample(spec, 0.0, r)), 0, 3)
                  for r in range(2000)])
    rate = np.mean(np.abs(t) > 1.959964)
    assert 0.035 < rate < 0.065
