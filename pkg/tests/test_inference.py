import math

import numpy as np
import pytest

from conftest import random_sample
from match_adaptive.core import MatchedDesign, Sample, Unit, ValidationError
from match_adaptive.inference import (
    TestSpec,
    confidence_interval,
    diff_in_means,
    null_distribution,
    pair_values,
    randomization_test,
    regression_adjusted_stat,
)
from match_adaptive.matcher import optimal_pair_match
from oracle_values import FROZEN


def flipped_all(design):
    return MatchedDesign(tuple((c, t) for t, c in design.pairs), design.unmatched, design.objective)


def test_diff_in_means_golden(fig1, fig1_design):
    # the printed table says 0.70; the printed outcomes give 0.75
    assert diff_in_means(fig1_design, fig1) == pytest.approx(0.75)


def test_diff_in_means_antisymmetric(fig1, fig1_design):
    flipped = fig1.with_treatments([1 - z for z in fig1.z])
    assert diff_in_means(flipped_all(fig1_design), flipped) == pytest.approx(-0.75)


def test_diff_in_means_constant_outcomes(fig1, fig1_design):
    assert diff_in_means(fig1_design, fig1.with_outcomes([1.0] * 10)) == 0.0


def test_missing_outcome(fig1, fig1_design):
    ys = list(fig1.y)
    ys[1] = None
    with pytest.raises(ValidationError, match="outcome"):
        diff_in_means(fig1_design, fig1.with_outcomes(ys))


def _covariate_sample(seed, exact_linear=False):
    rng = np.random.default_rng(seed)
    smp = random_sample(rng, 15, 25, covariates=2)
    X = smp.X
    y = 1.0 + X @ np.array([2.0, -1.0])
    if not exact_linear:
        y = y + rng.normal(size=len(y))
    return smp.with_outcomes(y)


def test_regression_exactly_linear_gives_zero():
    smp = _covariate_sample(0, exact_linear=True)
    d = optimal_pair_match(smp)
    assert abs(regression_adjusted_stat(d, smp)) < 1e-10


def test_regression_equals_two_step():
    smp = _covariate_sample(1)
    d = optimal_pair_match(smp)
    idx = smp.index()
    units = [u for p in d.pairs for u in p]
    A = np.column_stack([np.ones(len(units)), smp.X[[idx[u] for u in units]]])
    y = smp.y[[idx[u] for u in units]]
    beta = np.linalg.solve(A.T @ A, A.T @ y)
    r = dict(zip(units, y - A @ beta))
    expect = np.mean([r[t] - r[c] for t, c in d.pairs])
    assert regression_adjusted_stat(d, smp) == pytest.approx(expect, abs=1e-12)


def test_regression_with_zero_covariates_is_centered_diff():
    rng = np.random.default_rng(2)
    base = random_sample(rng, 6, 9)
    smp = Sample(tuple(Unit(u.id, u.treatment, u.outcome, (0.0,), u.score) for u in base.units))
    d = optimal_pair_match(smp)
    from match_adaptive.propensity import SingularDesignError

    # an all-zero column is collinear with nothing but itself; drop it to intercept-only
    with pytest.raises(SingularDesignError):
        regression_adjusted_stat(d, smp)
    plain = Sample(tuple(Unit(u.id, u.treatment, u.outcome, (), u.score) for u in base.units))
    assert regression_adjusted_stat(d, plain) == pytest.approx(diff_in_means(d, plain))


def test_golden_p_values(fig1, fig1_design):
    uni = randomization_test(TestSpec(method="uniform"), fig1_design, fig1)
    cov = randomization_test(TestSpec(method="covariate-adaptive"), fig1_design, fig1)
    ma = randomization_test(TestSpec(method="match-adaptive"), fig1_design, fig1)
    assert uni.exact and uni.p_value == 0.0625
    assert cov.p_value == pytest.approx(FROZEN["p_cov_adaptive"], abs=1e-5)
    assert ma.p_value == pytest.approx(FROZEN["p_match_adaptive"], abs=1e-5)
    assert ma.support_size == 3
    assert ma.null_mean == pytest.approx(FROZEN["null_mean_match_adaptive"], abs=1e-5)


def test_uniform_probabilities_are_2_to_minus_K(fig1, fig1_design):
    _, p = null_distribution("uniform", fig1_design, fig1).enumerate()
    np.testing.assert_allclose(p, 1 / 16)


def test_covariate_adaptive_column(fig1, fig1_design):
    f, p = null_distribution("covariate-adaptive", fig1_design, fig1).enumerate()
    rows = f.astype(int) @ (1 << np.arange(4))
    got = dict(zip(rows, p))
    for r in range(16):
        assert got[r] == pytest.approx(FROZEN["cov_adaptive"][r], abs=1e-5)


@pytest.mark.parametrize("method", ["uniform", "covariate-adaptive", "match-adaptive"])
def test_monte_carlo_converges_to_exact(fig1, fig1_design, method):
    exact = randomization_test(TestSpec(method=method), fig1_design, fig1).p_value
    mc = randomization_test(TestSpec(method=method, exact="never", n_draws=50_000), fig1_design, fig1, seed=7)
    assert not mc.exact
    assert abs(mc.p_value - exact) < 4 * math.sqrt(exact * (1 - exact) / 50_000) + 1e-4


def test_single_draw_p_value(fig1, fig1_design):
    res = randomization_test(TestSpec(exact="never", n_draws=1), fig1_design, fig1, seed=0)
    assert res.p_value in (0.5, 1.0)


def test_less_sided(fig1, fig1_design):
    res = randomization_test(TestSpec(method="uniform", sidedness="less"), fig1_design, fig1)
    assert res.p_value == 1.0


def test_missing_scores_for_adaptive(fig1, fig1_design):
    bare = Sample(tuple(Unit(u.id, u.treatment, u.outcome) for u in fig1.units))
    with pytest.raises(ValidationError, match="propensity"):
        randomization_test(TestSpec(method="covariate-adaptive"), fig1_design, bare)
    assert randomization_test(TestSpec(method="uniform"), fig1_design, bare).p_value == 0.0625


def test_bad_spec():
    with pytest.raises(ValidationError):
        TestSpec(method="nope")
    with pytest.raises(ValidationError):
        TestSpec(n_draws=0)


def test_ci_contains_estimate_and_shift(fig1, fig1_design):
    spec = TestSpec(method="uniform", alpha=0.2)
    ci = confidence_interval(spec, fig1_design, fig1)
    assert ci.contains(0.75) and ci.contiguous
    shifted = fig1.with_outcomes([y + 2.0 * z for y, z in zip(fig1.y, fig1.z)])
    ci2 = confidence_interval(spec, fig1_design, shifted)
    assert ci2.lower == pytest.approx(ci.lower + 2.0, abs=0.05)


def test_ci_grid_excluding_everything(fig1, fig1_design):
    ci = confidence_interval(TestSpec(method="uniform", alpha=0.2), fig1_design, fig1, np.linspace(50, 60, 11))
    assert ci.empty


def test_ci_tiny_alpha_keeps_whole_grid(fig1, fig1_design):
    grid = np.linspace(-1, 2, 31)
    ci = confidence_interval(TestSpec(method="match-adaptive", alpha=1e-6), fig1_design, fig1, grid)
    assert ci.accepted.all()


def test_ci_rejects_bad_grid(fig1, fig1_design):
    with pytest.raises(ValidationError):
        confidence_interval(TestSpec(), fig1_design, fig1, np.array([]))
    with pytest.raises(ValidationError):
        confidence_interval(TestSpec(), fig1_design, fig1, np.array([1.0, 0.0]))


def test_tau_shift_matches_direct_test(fig1, fig1_design):
    spec = TestSpec(method="covariate-adaptive", tau=0.3)
    a = randomization_test(spec, fig1_design, fig1)
    shifted = fig1.with_outcomes([y - 0.3 * z for y, z in zip(fig1.y, fig1.z)])
    b = randomization_test(TestSpec(method="covariate-adaptive"), fig1_design, shifted)
    assert a.p_value == pytest.approx(b.p_value)
    assert a.observed == pytest.approx(b.observed)


def test_pair_values_shapes(fig1, fig1_design):
    v, u = pair_values(fig1_design, fig1)
    np.testing.assert_allclose(v, [1.5, 0.5, 0.5, 0.5])
    np.testing.assert_allclose(u, 1.0)
