import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from poisson_control import oracle
from poisson_control import qbd_finite as qf
from poisson_control.core import UnstableFinite


def stable_params(lam_frac, mu, nu, smax):
    return qf.params(lam_frac * smax * mu, mu, nu, smax)


stable = st.builds(stable_params, st.floats(0.05, 0.95), st.floats(0.2, 5.0),
                   st.floats(0.05, 20.0), st.integers(1, 8))


def test_block_row_sums():
    p = qf.params(1.0, 1.0, 0.7, 3)
    b = qf.build_blocks(p)
    assert np.abs((b.A0 + b.a1(0)).sum(axis=1)).max() < 1e-14
    for level in range(1, 6):
        assert np.abs((b.A0 + b.a1(level) + b.A2).sum(axis=1)).max() < 1e-14


def test_profile_must_increase():
    p = qf.params(1.0, 1.0, 1.0, 2)
    with pytest.raises(qf.NonIncreasingProfile):
        qf.build_blocks(p, profile=[0.0, 2.0, 1.5])
    with pytest.raises(ValueError):
        qf.build_blocks(p, profile=[0.0, 1.0])


@given(stable)
def test_r_solves_the_quadratic(p):
    assert qf.r_residual(p) < 1e-10


@given(stable)
def test_r_is_the_minimal_solution(p):
    R = qf.r_matrix(p)
    assert R.spectral_radius < 1.0
    np.testing.assert_allclose(R.to_array(), oracles.r_fixed_point(p), atol=1e-9)


@given(stable, st.integers(0, 50))
def test_r_power_closed_form(p, n):
    R = qf.r_matrix(p)
    np.testing.assert_allclose(qf.r_power(R, n), np.linalg.matrix_power(R.to_array(), n),
                               atol=1e-12)


@given(stable, st.floats(0.0, 1.0))
def test_resolvent_closed_form(p, x):
    R = qf.r_matrix(p)
    expect = np.linalg.inv(np.eye(R.smax + 1) - x * R.to_array())
    np.testing.assert_allclose(qf.inv_i_minus_rx(R, x), expect, rtol=1e-10, atol=1e-12)


@pytest.mark.parametrize("lam,mu,nu,smax", [
    (1.0, 1.0, 1.0, 2), (0.5, 1.0, 0.3, 1), (2.5, 1.0, 2.0, 3), (1.0, 2.0, 0.2, 4), (3.0, 1.0, 5.0, 5)])
def test_boundary_solution_matches_oracle(lam, mu, nu, smax):
    p = qf.params(lam, mu, nu, smax)
    sol = qf.solve(p)
    d = sol.to_joint()
    o = oracle.solve(p, d.qmax + 40)
    assert d.max_abs_diff(o) < 1e-10
    assert qf.global_balance_residual(sol) < 1e-12
    assert sol.mean_q() == pytest.approx(o.mean_q(), rel=1e-9)
    assert sol.mean_s() == pytest.approx(o.mean_s(), rel=1e-9)
    assert sol.p_empty() == pytest.approx(o.p_empty(), rel=1e-9)
    for x, y in [(0.3, 0.7), (0.9, 0.1), (1.0, 1.0)]:
        assert qf.qbd_to_pgf(sol, x, y) == pytest.approx(o.pgf(x, y), abs=1e-10)


def test_unstable_rejected():
    with pytest.raises(UnstableFinite):
        qf.solve(qf.params(2.0, 1.0, 1.0, 2))


@pytest.mark.parametrize("lam,mu,nu", [(1, 2, 1), (0.5, 1, 0.3), (1, 1.5, 5)])
def test_single_speed_closed_forms(lam, mu, nu):
    p = qf.params(lam, mu, nu, 1)
    cf = qf.closed_form_s1(p)
    sol = qf.solve(p)
    pi00 = nu * (mu - lam) / (mu * (2 * lam + nu))
    assert cf.pi00 == pytest.approx(pi00, rel=1e-13)
    assert sol.level(0)[0] == pytest.approx(pi00, abs=1e-12)
    assert sol.level(0)[1] == pytest.approx(lam / nu * pi00, abs=1e-12)
    assert sol.speed_marginal()[1] - sol.level(0)[1] == pytest.approx(lam / mu, abs=1e-12)
    for n in range(30):
        np.testing.assert_allclose(cf.pi(n), sol.level(n), rtol=1e-10, atol=1e-15)
    if abs(lam + nu - mu) > 1e-9:
        for x, y in oracles.interior_grid():
            assert cf.pgf(x, y) == pytest.approx(oracles.s1_pgf_partial_fractions(p, x, y), rel=1e-12)


def test_single_speed_when_lam_plus_nu_equals_mu():
    # the partial-fraction form divides by zero here; the product form does not
    p = qf.params(0.5, 1.0, 0.5, 1)
    cf = qf.closed_form_s1(p)
    o = oracle.solve(p, 120)
    assert cf.to_joint().max_abs_diff(o) < 1e-12


def test_tail_truncation_choice():
    sol = qf.solve(qf.params(1.8, 1.0, 0.5, 2))
    K = sol.qmax_for(1e-12)
    assert sol.tail_mass_above(K).sum() < 1e-12
    assert sol.to_joint(tail_tol=1e-12).mass_deficit < 1e-12


def test_speed_profile_oracle_path():
    p = qf.params(1.0, 1.0, 0.8, 2)
    plain = oracle.solve(p, 80)
    same = oracle.solve(p, 80, profile=[0.0, 1.0, 2.0])
    assert plain.max_abs_diff(same) == 0.0
    rates = np.array([0.2, 0.9, 3.0])
    d = oracle.solve(p, 80, profile=rates)
    gamma = d.marginal_q()
    # level crossing: arrivals out of level i balance services into it
    assert np.abs(p.lam * gamma[:-1] - d.probs[1:] @ rates).max() < 1e-12
    with pytest.raises(Exception):
        qf.solve_boundary(p, profile=rates)


@pytest.mark.parametrize("smax", [1, 2, 4])
def test_fast_control_limit(smax):
    lam = 0.7 * smax
    lim = qf.limit_nu_inf_finite(qf.params(lam, 1.0, 1.0, smax))
    np.testing.assert_allclose(lim.marginal_q(), oracles.mmc_queue_law(lam, 1.0, smax, lim.qmax),
                               atol=1e-14)
    tvs = [qf.solve(qf.params(lam, 1.0, nu, smax)).to_joint().tv_distance(lim)
           for nu in (10.0, 100.0, 1000.0)]
    assert tvs[0] > tvs[1] > tvs[2]


@pytest.mark.parametrize("rho", [0.2, 0.5, 0.9])
def test_fluid_cycle_single_speed(rho):
    fc = qf.fluid_cycle(qf.params(rho, 1.0, 1.0, 1))
    np.testing.assert_allclose(fc.psi, np.array([1 - rho, 1, 1 - rho]) / (1 + 2 * (1 - rho)), atol=1e-14)
    assert fc.tau[-1] == pytest.approx(rho / (1 - rho), rel=1e-13)
    np.testing.assert_allclose(fc.sigma, [(1 - rho) / 2, 0.5, rho / 2], atol=1e-13)
    p = qf.params(rho, 1.0, 1.0, 1)
    for x, y in oracles.interior_grid(3):
        hat, _ = qf.fluid_pgfs(fc, p, x, y)
        lx = math.log(x)
        expect = (1 - rho) / 2 / (1 - rho * lx) + rho / 2 * y / (1 - rho * lx) + y / 2
        assert hat == pytest.approx(expect, rel=1e-13)


@given(st.integers(1, 7), st.floats(0.05, 0.95), st.floats(0.3, 3.0))
def test_fluid_picture_conserves_work(smax, frac, mu):
    lam = frac * smax * mu
    if abs(lam / mu - round(lam / mu)) < 1e-6:
        return
    p = qf.params(lam, mu, 1.0, smax)
    fc = qf.fluid_cycle(p)
    assert abs(fc.sigma.sum() - 1) < 1e-12
    assert np.abs(fc.psi @ fc.M - fc.psi).max() < 1e-12
    assert qf.fluid_throughput(fc, p) == pytest.approx(lam, rel=1e-10)


def test_boundary_speed_excluded():
    with pytest.raises(qf.BoundarySpeed):
        qf.fluid_cycle(qf.params(1.0, 1.0, 1.0, 2))


@pytest.mark.parametrize("lam,smax", [(0.5, 1), (1.5, 3)])
def test_slow_control_speed_split_near_fluid_prediction(lam, smax):
    p = qf.params(lam, 1.0, 1e-3, smax)
    split = qf.split_speed_marginal(qf.solve(p))
    fc = qf.fluid_cycle(p)
    assert np.abs(split - fc.sigma).max() < 0.05
    assert qf.fluid_threshold(1e-3) == 32


@pytest.mark.parametrize("lam,nu,smax", [(1.0, 1.0, 2), (2.2, 0.3, 4)])
def test_speed_marginal_is_capped_queue_marginal(lam, nu, smax):
    p = qf.params(lam, 1.0, nu, smax)
    sol = qf.solve(p)
    gamma = sol.to_joint(tail_tol=1e-15).marginal_q()
    capped = np.append(gamma[:smax], gamma[smax:].sum())
    np.testing.assert_allclose(sol.speed_marginal(), capped, atol=1e-12)
    o = oracle.solve(p, 300)
    np.testing.assert_allclose(o.marginal_s(), capped, atol=1e-10)


@pytest.mark.parametrize("lam,smax", [(0.5, 1), (1.5, 3)])
def test_speed_split_converges_to_fluid_prediction(lam, smax):
    errs = []
    for nu in (1e-2, 1e-3, 1e-4):
        p = qf.params(lam, 1.0, nu, smax)
        errs.append(np.abs(qf.split_speed_marginal(qf.solve(p)) - qf.fluid_cycle(p).sigma).max())
    assert errs[0] > errs[1] > errs[2]


def test_fluid_pgf_is_slow_limit_of_single_speed_pgf():
    p = qf.params(0.5, 1.0, 1e-7, 1)
    cf = qf.closed_form_s1(p)
    fc = qf.fluid_cycle(p)
    for x, y in oracles.interior_grid(4):
        hat, _ = qf.fluid_pgfs(fc, p, x, y)
        assert cf.pgf(x ** p.nu, y) == pytest.approx(hat, abs=1e-5)
