import math
import os

import numpy as np
import pytest

from scipy import integrate
from scipy.stats import norm

from sgl.errors import DomainError
from sgl.targets import (
    Dataset,
    GaussianMixture,
    MixtureScore,
    fit_mixture,
    mixture_density,
    mixture_log_density,
    mixture_score,
    mixture_score_dx,
    perturbed_mixture,
    sample_mixture,
    standard_grid,
    symmetric_mixture,
)


@pytest.fixture
def lopsided():
    return GaussianMixture(weights=(0.2, 0.8), means=(-1.0, 4.0), variances=(0.5, 2.0))


class TestGaussianMixture:
    def test_weights_sum_to_one(self):
        with pytest.raises(DomainError):
            GaussianMixture(weights=(0.5, 0.4), means=(0.0, 1.0), variances=(1.0, 1.0))

    def test_positive_variances(self):
        with pytest.raises(DomainError):
            GaussianMixture(weights=(1.0,), means=(0.0,), variances=(0.0,))

    def test_matching_lengths(self):
        with pytest.raises(DomainError):
            GaussianMixture(weights=(1.0,), means=(0.0, 1.0), variances=(1.0,))

    def test_symmetric(self):
        gm = symmetric_mixture(3.0)

        assert gm.means == (-3.0, 3.0)
        assert gm.weights == (0.5, 0.5)
        assert symmetric_mixture(0.0).n_modes == 1

    def test_dict_form(self, lopsided):
        data = lopsided.to_dict()

        assert data["modes"][1] == {"q": 0.8, "mu": 4.0, "var": 2.0}
        assert GaussianMixture.from_dict(data) == lopsided


class TestDensity:
    def test_integrates_to_one(self, lopsided):
        grid = standard_grid(lopsided)

        assert integrate.trapezoid(mixture_density(lopsided, grid), grid) == pytest.approx(1.0, abs=1e-9)

    def test_single_mode_is_normal(self):
        x = np.linspace(-3.0, 3.0, 7)

        assert np.allclose(mixture_density(symmetric_mixture(0.0), x), norm.pdf(x))

    def test_log_density_far_in_tail(self, bimodal):
        assert np.isfinite(mixture_log_density(bimodal, 60.0))
        assert mixture_log_density(bimodal, 60.0) == pytest.approx(norm.logpdf(57.0) + math.log(0.5), rel=1e-9)

    def test_score_matches_log_density(self, lopsided):
        x = np.linspace(-5.0, 8.0, 50)
        eps = 1e-6
        numeric = (mixture_log_density(lopsided, x + eps) - mixture_log_density(lopsided, x - eps)) / (2.0 * eps)

        assert np.allclose(mixture_score(lopsided, x), numeric, atol=1e-6)

    def test_score_derivative(self, lopsided):
        x = np.linspace(-5.0, 8.0, 50)
        eps = 1e-6
        numeric = (mixture_score(lopsided, x + eps) - mixture_score(lopsided, x - eps)) / (2.0 * eps)

        assert np.allclose(mixture_score_dx(lopsided, x), numeric, atol=1e-5)

    def test_score_is_odd_for_symmetric_targets(self, bimodal):
        x = np.linspace(0.1, 6.0, 20)

        assert np.allclose(mixture_score(bimodal, -x), -mixture_score(bimodal, x))


class TestPerturbation:
    def test_ou_marginal(self, bimodal, sde):
        marginal = perturbed_mixture(bimodal, sde, 1.0)

        assert marginal.means[1] == pytest.approx(3.0 * math.exp(-1.0))
        assert marginal.variances[0] == pytest.approx(1.0)
        assert marginal.weights == bimodal.weights

    def test_time_zero_is_identity(self, lopsided, sde):
        assert perturbed_mixture(lopsided, sde, 0.0) == lopsided

    def test_mixture_score_model(self, bimodal, sde):
        x = np.linspace(-4.0, 4.0, 9)[:, None]
        model = MixtureScore(bimodal, sde)

        expected = mixture_score(perturbed_mixture(bimodal, sde, 0.7), x[:, 0])

        assert model.forward(x, 0.7).shape == (9, 1)
        assert np.allclose(model.forward(x, 0.7)[:, 0], expected)
        assert np.allclose(model.forward_dx(x, 0.7)[:, 0, 0], mixture_score_dx(perturbed_mixture(bimodal, sde, 0.7), x[:, 0]))

    def test_static_score_ignores_time(self, bimodal):
        x = np.array([[0.5], [2.0]])
        model = MixtureScore(bimodal)

        assert np.allclose(model.forward(x, 0.1), model.forward(x, 2.9))

    def test_per_row_times(self, bimodal, sde):
        x = np.array([[1.0], [1.0]])
        t = np.array([0.5, 2.0])
        scores = MixtureScore(bimodal, sde).forward(x, t)

        assert scores[0, 0] == pytest.approx(MixtureScore(bimodal, sde).forward(x[:1], 0.5)[0, 0])
        assert scores[1, 0] == pytest.approx(MixtureScore(bimodal, sde).forward(x[:1], 2.0)[0, 0])


class TestDataset:
    def test_seeded(self, bimodal):
        first = sample_mixture(bimodal, 500, 7)
        second = sample_mixture(bimodal, 500, 7)

        assert np.array_equal(first.samples, second.samples)
        assert np.array_equal(first.regenerate().samples, first.samples)
        assert not np.array_equal(sample_mixture(bimodal, 500, 8).samples, first.samples)

    def test_shape(self, bimodal):
        dataset = sample_mixture(bimodal, 10, 0)

        assert dataset.samples.shape == (10, 1)
        assert dataset.n == 10

    def test_size(self, bimodal):
        with pytest.raises(DomainError):
            sample_mixture(bimodal, 0, 0)

    def test_mode_weights(self):
        gm = symmetric_mixture(5.0, q=0.3)
        samples = sample_mixture(gm, 50000, 1).samples[:, 0]

        assert np.mean(samples < 0) == pytest.approx(0.3, abs=0.01)

    def test_save_and_load(self, bimodal, tmp_path):
        dataset = sample_mixture(bimodal, 50, 3)
        filepath = os.path.join(tmp_path, "dataset.csv")
        dataset.save(filepath)

        loaded = Dataset.load(filepath)

        assert os.path.isfile(f"{filepath}.json")
        assert loaded.seed == 3
        assert loaded.source == bimodal
        assert np.allclose(loaded.samples, dataset.samples, rtol=1e-9)


class TestFit:
    def test_recovers_modes(self):
        gm = symmetric_mixture(4.0, q=0.3)
        fit = fit_mixture(sample_mixture(gm, 20000, 2).samples, 2, seed=0)

        assert fit.means[0] == pytest.approx(-4.0, abs=0.1)
        assert fit.means[1] == pytest.approx(4.0, abs=0.1)
        assert fit.weights[0] == pytest.approx(0.3, abs=0.02)
