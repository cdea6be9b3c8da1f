import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from poisson_control import core
from poisson_control.core import (
    DomainError,
    JointDist,
    ModelParams,
    NonPositiveRate,
    UnstableFinite,
    UnstableFiniteWarning,
    UnstableObserver,
    Variant,
    divided_power_difference,
    pgf_eval,
    validate_params,
)


@pytest.mark.parametrize("field", ["lam", "mu", "nu"])
@pytest.mark.parametrize("bad", [0.0, -1.0, math.nan, math.inf])
def test_rates_must_be_positive(field, bad):
    kw = dict(lam=1.0, mu=1.0, nu=1.0)
    kw[field] = bad
    with pytest.raises(NonPositiveRate):
        validate_params(ModelParams(**kw))


def test_mm1_observer_needs_lam_below_mu():
    with pytest.raises(UnstableObserver):
        validate_params(ModelParams(1.0, 1.0, 1.0, variant="observer-mm1"))


def test_unstable_finite_rejected_unless_allowed():
    p = ModelParams(2.0, 1.0, 1.0, smax=2, variant="finite")
    with pytest.raises(UnstableFinite):
        validate_params(p)
    with pytest.warns(UnstableFiniteWarning):
        validate_params(p, allow_unstable=True)
    assert not p.is_ergodic()


def test_variant_parse_and_smax_rules():
    assert Variant.parse(" Observer-MMInf ") is Variant.OBSERVER_MMINF
    with pytest.raises(ValueError):
        Variant.parse("tandem")
    with pytest.raises(core.ModelError):
        ModelParams(1, 1, 1, smax=1.5)
    with pytest.raises(core.ModelError):
        validate_params(ModelParams(1, 1, 1, smax=3, variant="infinite"))
    with pytest.raises(core.ModelError):
        validate_params(ModelParams(1, 1, 1, variant="finite"))


def test_infinite_variants_are_always_ergodic():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        for v in ("infinite", "observer-mminf"):
            assert validate_params(ModelParams(50.0, 1.0, 0.01, variant=v)).is_ergodic()


def test_params_dict_and_replace():
    p = ModelParams(1.0, 2.0, 3.0, smax=4, variant="finite")
    assert p.to_dict() == {"lambda": 1.0, "mu": 2.0, "nu": 3.0, "smax": 4, "variant": "finite"}
    assert p.replace(nu=5.0).nu == 5.0
    assert p.rho == 0.5 and p.finite


def test_joint_dist_invariants():
    with pytest.raises(ValueError):
        JointDist(np.array([[0.5, -0.1], [0.3, 0.3]]))
    with pytest.raises(ValueError):
        JointDist(np.array([[0.7, 0.7]]))
    d = JointDist(np.array([[0.25, 0.25], [0.25, 0.2]]))
    assert d.mass_deficit == pytest.approx(0.05)
    assert not d.probs.flags.writeable
    assert d.mean_q() == pytest.approx(0.45)
    assert d.p_empty() == pytest.approx(0.5)


def test_tv_counts_missing_tail():
    a = JointDist(np.array([[1.0]]))
    b = JointDist(np.array([[0.9]]))
    assert a.tv_distance(b) == pytest.approx(0.1)
    assert a.tv_distance(a) == 0.0


def test_pgf_domain():
    d = JointDist(np.array([[0.5, 0.0], [0.0, 0.5]]))
    assert pgf_eval(d, 1.0, 1.0).value == pytest.approx(1.0)
    assert pgf_eval(d, 0.5, 0.5).value == pytest.approx(0.625)
    with pytest.raises(DomainError):
        pgf_eval(d, 1.1, 0.5)
    with pytest.raises(DomainError):
        pgf_eval(d, 0.5, -0.1)


@given(st.floats(0.01, 0.999), st.floats(0.01, 0.999), st.integers(0, 60))
def test_divided_difference_matches_exact_sum(a, b, n):
    # (a^n - b^n)/(a - b) = sum_{k<n} a^k b^(n-1-k), a sum of positive terms
    exact = math.fsum(a ** k * b ** (n - 1 - k) for k in range(n))
    assert divided_power_difference(a, b, n) == pytest.approx(exact, rel=1e-9, abs=1e-300)


def test_divided_difference_degenerate_limit():
    assert divided_power_difference(0.5, 0.5, 4) == pytest.approx(4 * 0.5 ** 3)


def _solver_outputs():
    from poisson_control import analytic_infinite as ai
    from poisson_control import observers as ob
    from poisson_control import qbd_finite as qf
    yield ai.solve(ai.params(1.2, 1.0, 0.8))
    yield qf.solve(qf.params(1.2, 1.0, 0.8, 3)).to_joint()
    yield qf.closed_form_s1(qf.params(0.4, 1.0, 0.8, 1)).to_joint()
    yield ob.mm1_obs_joint(ModelParams(0.6, 1.0, 0.8, variant="observer-mm1"))
    yield ob.mminf_obs_joint(ModelParams(1.2, 1.0, 0.8, variant="observer-mminf"))


def test_solver_tables_account_for_all_mass():
    for d in _solver_outputs():
        assert d.mass_deficit < 1e-8
        assert abs(pgf_eval(d, 1.0, 1.0).value + d.mass_deficit - 1.0) < 1e-14
