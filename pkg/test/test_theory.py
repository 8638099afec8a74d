import math

import numpy as np
import pytest

from sgl.errors import DomainError
from sgl.objectives import quadratic_coeffs
from sgl.score_net import init_random_feature, rkhs_norm
from sgl.sde import likelihood_weight
from sgl.theory import (
    BOUND_COLUMNS,
    BoundConstants,
    bound_table,
    coverage_constant,
    gd_gap_certificate,
    lemma1_coverage,
    loglog_slope,
    loss_decomposition,
    mc_gap_estimate,
    optimal_tau,
    rkhs_growth_certificate,
    tau_es,
    thm1_bound,
    thm2_bound,
)
from sgl.training import population_flow


@pytest.fixture
def form(bimodal, sde, rng):
    return quadratic_coeffs(init_random_feature(1, 4, seed=20), sde, bimodal, 20000, rng, likelihood_weight, keep_draws=False)


class TestBounds:
    def test_terms(self):
        report = thm1_bound(10.0, 100, 100)

        assert report.stat == pytest.approx(1.0)
        assert report.disc == pytest.approx(0.1)
        assert report.opt == pytest.approx(0.1)
        assert report.approx == pytest.approx(0.01)
        assert report.total == pytest.approx(2.21)

    def test_prior_gap_is_added(self):
        assert thm1_bound(2.0, 10, 10, prior_gap=0.5).total == pytest.approx(thm1_bound(2.0, 10, 10).total + 0.5)

    def test_tau_below_one(self):
        with pytest.raises(DomainError):
            thm1_bound(0.5, 100, 100)

    def test_infinite_width(self):
        report = thm1_bound(4.0, math.inf, math.inf)

        assert report.stat == 0 and report.disc == 0 and report.approx == 0
        assert report.total == pytest.approx(0.25 + 1.0)

    def test_negative_constants(self):
        with pytest.raises(DomainError):
            BoundConstants(c1=-1.0)

    def test_mode_distance(self):
        near, far = thm2_bound(5.0, 100, 100, 1.0), thm2_bound(5.0, 100, 100, 2.0)

        assert far.stat == pytest.approx(64.0 * near.stat)
        assert far.approx == pytest.approx(4.0 * near.approx)
        assert far.opt == near.opt

    def test_reducible_scaling(self):
        scaled = [thm1_bound(n**0.4, n, n).reducible * n**0.4 for n in (1e2, 1e3, 1e4, 1e5)]

        assert max(scaled) / min(scaled) < 2.0

    def test_convex_in_tau(self):
        totals = np.array([thm1_bound(tau, 1000, 1000).total for tau in np.linspace(1.0, 100.0, 500)])

        assert np.min(np.diff(totals, 2)) >= -1e-12

    def test_table(self):
        table = bound_table(np.geomspace(1.0, 100.0, 10), 1000, 1000, (3.0, 15.0))

        assert tuple(table.columns) == BOUND_COLUMNS
        assert len(table) == 30
        assert list(table["mu"].iloc[10:20]) == [3.0] * 10


class TestOptimalTau:
    def test_interior(self):
        tau, at_boundary = optimal_tau(1000, 1000)

        assert not at_boundary
        assert 1.0 < tau < 100.0

        nearby = [thm1_bound(tau * factor, 1000, 1000).total for factor in (0.99, 1.01)]

        assert thm1_bound(tau, 1000, 1000).total <= min(nearby)

    def test_scaling(self):
        taus = {n: optimal_tau(n, n)[0] for n in (1e2, 1e3, 1e4, 1e5)}

        for n, tau in taus.items():
            assert tau / (taus[1e2] * (n / 1e2) ** 0.4) == pytest.approx(1.0, abs=0.1)

    def test_without_optimization_term(self):
        tau, at_boundary = optimal_tau(1000, 1000, BoundConstants(c3=0.0))

        assert tau == 1.0
        assert at_boundary

    def test_early_stopping_time(self):
        assert tau_es(1e5) == pytest.approx(100.0)

        with pytest.raises(DomainError):
            tau_es(0.5)


class TestMonteCarloGap:
    def test_slope(self, bimodal, sde, rng):
        gaps = mc_gap_estimate(0, sde, bimodal, [2**k for k in range(4, 11)], 2**14, 2048, rng)
        slope = loglog_slope([gap.m for gap in gaps], [gap.gap for gap in gaps])

        assert -1.3 <= slope <= -0.7
        assert all(gap.stderr > 0 for gap in gaps)

    def test_reference_width_has_no_gap(self, bimodal, sde, rng):
        gaps = mc_gap_estimate(0, sde, bimodal, [64, 1024], 1024, 256, rng)

        assert gaps[1].gap == pytest.approx(0.0, abs=1e-20)
        assert gaps[0].gap > 0.0

    def test_reference_must_be_wide(self, bimodal, sde, rng):
        with pytest.raises(DomainError):
            mc_gap_estimate(0, sde, bimodal, [128], 1024, 256, rng)


class TestCoverage:
    def test_ou_constant(self, sde):
        assert coverage_constant(sde) == pytest.approx(1.0)

    def test_forward_paths_stay_in_range(self, sde, rng):
        coverage = lemma1_coverage(sde, lambda n, gen: np.zeros((n, 1)), 1.0, 0.05, 100000, rng)

        assert coverage >= 0.95

    def test_delta_range(self, sde, rng):
        with pytest.raises(DomainError):
            lemma1_coverage(sde, lambda n, gen: np.zeros((n, 1)), 1.0, 1.5, 10, rng)


class TestTraining:
    def test_certificates_along_gradient_descent(self, form):
        model = init_random_feature(1, 4, seed=20)
        step = 1.0 / form.lipschitz()
        A_star = form.minimizer()

        A = model.A.copy()
        rkhs0, loss0 = rkhs_norm(model), form.loss(A)

        for k in range(1, 501):
            A = A - step * form.gradient(A)
            tau = k * step

            assert form.gap(A, A_star) <= gd_gap_certificate(model.A, A_star, tau) + 1e-12
            assert math.sqrt(np.sum(A**2) / 4) <= rkhs_growth_certificate(rkhs0, loss0, tau, 4) + 1e-12

    def test_decomposition_adds_up(self, form, rng):
        A_empirical, A_population = rng.normal(size=(1, 4)), rng.normal(size=(1, 4))
        parts = loss_decomposition(form, A_empirical, A_population)

        assert parts.total == pytest.approx(form.loss(A_empirical))
        assert parts.population_term >= -1e-12

    @pytest.mark.slow
    def test_rkhs_growth_exponent(self, form):
        taus = np.geomspace(10.0, 1e5, 40)
        norms = [math.sqrt(np.sum(A**2) / 4) for A in population_flow(form, taus, np.zeros((1, 4)))]

        assert loglog_slope(taus, norms) <= 0.6

    @pytest.mark.slow
    def test_optimality_gap_exponent(self, form):
        taus = np.geomspace(10.0, 1e3, 30)
        A_star = form.minimizer()
        gaps = [form.gap(A, A_star) for A in population_flow(form, taus, np.zeros((1, 4)))]

        assert loglog_slope(taus, gaps) <= -0.9
