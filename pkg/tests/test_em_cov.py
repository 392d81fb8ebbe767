import math

import numpy as np
import pytest
from scipy.optimize import minimize

from silentab.core import DataError, Dataset
from silentab.em import ClassWeights, EmInit, e_step, fit_em
from silentab.em_cov import (beta_equations, bootstrap_ci, bucket_labels, fit_em_cov,
                             group_patience, solve_beta)
from silentab.simulate import (BINARY_EFFECT, BINARY_INTERCEPT, WORD_EFFECTS, WORD_INTERCEPT,
                               gen_covariate_dataset, gen_words_dataset)

from conftest import make_dataset, random_dataset


def exp_regression_mle(x, u, m):
    """Censored exponential regression on the rows with M != 0 (scipy)."""
    keep = m != 0
    design = np.column_stack([np.ones(keep.sum()), x[keep]])
    uu, dd = u[keep], (m[keep] == 2).astype(float)

    def nll(b):
        eta = design @ b
        return float(np.sum(np.exp(-eta) * uu + dd * eta))

    def grad(b):
        eta = design @ b
        return design.T @ (dd - np.exp(-eta) * uu)

    start = np.zeros(design.shape[1])
    start[0] = math.log(uu.sum() / dd.sum())
    res = minimize(nll, start, jac=grad, method="BFGS", options={"gtol": 1e-12, "maxiter": 1000})
    return res.x


def binary_sample(n, seed):
    rng = np.random.default_rng(seed)
    x = (rng.random(n) < 0.4).astype(float).reshape(-1, 1)
    return gen_covariate_dataset(x, ["long"], BINARY_INTERCEPT, [BINARY_EFFECT], 0.1, 0.5,
                                 rng).dataset


def test_no_covariates_nests_scalar(rng):
    ds = random_dataset(rng, 300)
    cov, base = fit_em_cov(ds, epsilon=1e-10), fit_em(ds, epsilon=1e-10)
    assert math.exp(-cov.beta0) == pytest.approx(base.theta, rel=1e-6)
    assert cov.q == pytest.approx(base.q, rel=1e-6)
    assert cov.gamma == pytest.approx(base.gamma, rel=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_fixed_point_is_exponential_regression(seed):
    ds = binary_sample(3000, seed)
    fit = fit_em_cov(ds, epsilon=1e-10)
    ref = exp_regression_mle(ds.covariates, ds.u, ds.m)
    np.testing.assert_allclose(fit.coefficients, ref, atol=1e-5)


def test_recovers_truth_on_large_sample():
    ds = binary_sample(40000, 11)
    fit = fit_em_cov(ds, epsilon=1e-8)
    assert fit.beta0 == pytest.approx(BINARY_INTERCEPT, abs=0.1)
    assert fit.beta[0] == pytest.approx(BINARY_EFFECT, abs=0.15)
    assert fit.q == pytest.approx(0.5, abs=0.05)


def test_beta_solution_satisfies_equations(rng):
    x = rng.normal(size=(30, 1))
    ds = gen_covariate_dataset(x, ["z"], 2.0, [0.5], 0.2, 0.5, rng).dataset
    w = e_step(ds, 0.1)
    sol = solve_beta(ds, w, [2.0, 0.0])
    assert sol.converged
    assert np.max(np.abs(beta_equations(ds, w, sol.coefficients))) < 1e-8


def test_equations_are_gradient_of_surrogate(rng):
    ds = binary_sample(200, 3)
    w = e_step(ds, 0.05)

    def surrogate(coef):
        eta = coef[0] + ds.covariates[:, 0] * coef[1]
        th = np.exp(-eta)
        with np.errstate(divide="ignore"):
            log_cdf = np.where(w.c3 > 0, np.log(-np.expm1(-th * ds.u)), 0.0)
        return float(np.sum((w.c1 + w.c2) * (-th * ds.u) + w.c2 * np.log(th) + w.c3 * log_cdf))

    coef = np.array([3.0, 0.7])
    h = 1e-6
    fd = np.array([(surrogate(coef + h * e) - surrogate(coef - h * e)) / (2 * h)
                   for e in np.eye(2)])
    np.testing.assert_allclose(beta_equations(ds, w, coef), fd, rtol=1e-6)


def test_single_kab_intercept_zero():
    ds = make_dataset([1.0], [2])
    w = ClassWeights.from_c3(ds, np.zeros(1))
    assert solve_beta(ds, w, [0.3]).coefficients[0] == pytest.approx(0.0, abs=1e-9)


def test_only_served_is_degenerate():
    ds = make_dataset([1.0, 2.0], [1, 1], [[0.0], [1.0]], ["x"])
    w = ClassWeights.from_c3(ds, np.zeros(2))
    assert solve_beta(ds, w).degenerate
    fit = fit_em_cov(ds)
    assert "no_known_abandonment" in fit.flags


def test_rank_deficiency_names_column(rng):
    x = rng.normal(size=(50, 1))
    ds = random_dataset(rng, 50)
    bad = Dataset(ds.u, ds.y, ds.delta, np.column_stack([x, 2 * x]), ["a", "b"])
    with pytest.raises(DataError, match="'b'"):
        fit_em_cov(bad)


def test_multiplier_is_exp():
    ds = binary_sample(2000, 1)
    fit = fit_em_cov(ds)
    assert fit.multipliers[0] == math.exp(fit.beta[0])
    assert math.exp(1.052) == pytest.approx(2.863, abs=5e-4)
    assert fit.mean_patience_at([1.0])[0] / fit.mean_patience_at([0.0])[0] == pytest.approx(
        fit.multipliers[0])


def test_location_shift_moves_intercept_only():
    ds = binary_sample(2000, 2)
    shifted = Dataset(ds.u, ds.y, ds.delta, ds.covariates + 5.0, ds.covariate_names)
    a, b = fit_em_cov(ds, epsilon=1e-10), fit_em_cov(shifted, epsilon=1e-10)
    assert b.beta[0] == pytest.approx(a.beta[0], abs=1e-6)
    assert b.beta0 == pytest.approx(a.beta0 - 5.0 * a.beta[0], abs=1e-5)


def test_init_insensitive():
    ds = binary_sample(3000, 4)
    fits = [fit_em_cov(ds, EmInit(k), seed=1, epsilon=1e-9) for k in ("all-sab", "all-sr", "half")]
    for f in fits[1:]:
        np.testing.assert_allclose(f.coefficients, fits[0].coefficients, atol=1e-4)


class TestBootstrap:
    def test_identical_rows_give_zero_width(self):
        ds = make_dataset([2.0] * 6 + [1.0] * 4, [2] * 6 + [1] * 4)
        ci = bootstrap_ci(make_dataset([2.0] * 10, [2] * 10), "m1", B=20)
        assert ci.lower["theta"] == ci.upper["theta"] == pytest.approx(0.5)
        # Mixed rows: a real interval that contains the point estimate.
        ci = bootstrap_ci(ds, "em", B=50, seed=1)
        assert ci.lower["theta"] <= ci.point["theta"] <= ci.upper["theta"]

    def test_deterministic_and_job_independent(self, rng):
        ds = random_dataset(rng, 120)
        a = bootstrap_ci(ds, "em", B=40, seed=7)
        b = bootstrap_ci(ds, "em", B=40, seed=7)
        c = bootstrap_ci(ds, "em", B=40, seed=7, jobs=2)
        for k in a.point:
            np.testing.assert_array_equal(a.samples[k], b.samples[k])
            np.testing.assert_array_equal(a.samples[k], c.samples[k])
        d = bootstrap_ci(ds, "em", B=40, seed=8)
        assert not np.array_equal(a.samples["theta"], d.samples["theta"])

    def test_warm_start_matches_cold_refit(self, rng):
        ds = random_dataset(rng, 150)
        ci = bootstrap_ci(ds, "em", B=5, seed=3, epsilon=1e-10)
        base = np.random.SeedSequence(3, spawn_key=(0,))
        idx = np.random.default_rng(base).integers(0, ds.n, ds.n)
        cold = fit_em(ds.take(idx), epsilon=1e-10)
        assert ci.samples["theta"][0] == pytest.approx(cold.theta, rel=1e-6)

    def test_covariate_bootstrap(self):
        ds = binary_sample(800, 5)
        ci = bootstrap_ci(ds, "em-cov", B=20, seed=1)
        assert ci.n_failed == 0
        assert set(ci.point) == {"beta0", "beta_long", "gamma", "q"}
        assert ci.lower["beta_long"] < ci.point["beta_long"] < ci.upper["beta_long"]

    def test_arguments(self, rng):
        ds = random_dataset(rng, 30)
        with pytest.raises(ValueError):
            bootstrap_ci(ds, "em", B=1)
        with pytest.raises(ValueError):
            bootstrap_ci(ds, "nope", B=5)
        with pytest.raises(ValueError):
            bootstrap_ci(ds, "em", B=5, level=1.0)


class TestGroupPatience:
    def test_single_bucket_equals_full_fit(self, rng):
        base = random_dataset(rng, 200)
        ds = Dataset(base.u, base.y, base.delta, np.ones((base.n, 1)), ["w"])
        (only,) = group_patience(ds, "w", [], B=0)
        assert only.n == ds.n
        assert only.fit.theta == fit_em(base, seed=0).theta

    def test_patience_rises_with_words(self):
        ds = gen_words_dataset(200_000, rng=5).dataset
        res = group_patience(ds, "queue_words", [1, 10, 20, 30, 40, 50], B=0)
        thetas = [b.fit.theta for b in res]
        assert len(res) == 7
        assert all(a >= b for a, b in zip(thetas, thetas[1:]))
        truth = [WORD_INTERCEPT] + [WORD_INTERCEPT + e for e in WORD_EFFECTS]
        np.testing.assert_allclose(np.log([b.mean_patience for b in res]), truth, atol=0.15)

    def test_empty_bucket_warns(self, rng):
        base = random_dataset(rng, 50)
        ds = Dataset(base.u, base.y, base.delta, np.zeros((base.n, 1)), ["w"])
        with pytest.warns(UserWarning, match="empty"):
            res = group_patience(ds, "w", [0, 5], B=0)
        assert [b.label for b in res] == ["<=0"]

    def test_unknown_column(self, rng):
        with pytest.raises(DataError):
            group_patience(random_dataset(rng, 20), "w", [1])

    def test_labels(self):
        assert [lab for lab, _, _ in bucket_labels([1, 10])] == ["<=1", "(1,10]", ">10"]
        with pytest.raises(ValueError):
            bucket_labels([3, 2])
