import os

import numpy as np
import pytest

from sgl.errors import DomainError, NumericalBlowupError, UnsupportedModelError
from sgl.score_net import (
    TimeEmbedding,
    dsm_batch,
    grad_dsm,
    grad_on_batch,
    init_random_feature,
    init_swish,
    load_checkpoint,
    rkhs_norm,
    save_checkpoint,
    swish,
    swish_prime,
)
from sgl.sde import lambda_weight, perturbation_score
from sgl.targets import MixtureScore, draw_mixture
from sgl.verify import central_difference, relative_error


@pytest.fixture
def random_feature(rng):
    model = init_random_feature(1, 32, seed=4)
    model.A[...] = rng.normal(size=(1, 32))

    return model


@pytest.fixture
def swish_net():
    return init_swish(1, 16, seed=5)


@pytest.fixture
def points(rng):
    return rng.normal(scale=3.0, size=(40, 1)), rng.uniform(0.01, 3.0, 40)


@pytest.fixture
def batch(bimodal, sde, rng):
    x0 = draw_mixture(bimodal, 64, rng)[:, None]
    t = rng.uniform(sde.t_min, sde.horizon_T, 64)

    return dsm_batch(sde, x0, t, 99)


class TestTimeEmbedding:
    def test_shape_and_bound(self):
        embedding = TimeEmbedding(5, 3.0)
        values = embedding(np.linspace(0.0, 3.0, 1001))

        assert values.shape == (1001, 5)
        assert np.max(np.abs(values)) <= 1.0

    def test_repeats_one_time(self):
        values = TimeEmbedding(4, 3.0)(1.5, n=3)

        assert values.shape == (3, 4)
        assert np.allclose(values[0], [0.5, 0.0, -1.0, 0.0], atol=1e-12)

    def test_dimension(self):
        with pytest.raises(DomainError):
            TimeEmbedding(0)


class TestRandomFeature:
    def test_starts_at_zero(self, points):
        model = init_random_feature(1, 16, seed=1)

        assert np.all(model.A == 0)
        assert np.all(model.forward(*points) == 0)

    def test_rows_have_unit_l1_norm(self):
        model = init_random_feature(1, 64, d_e=4, seed=2)
        rows = np.hstack([model.W, model.U])

        assert np.allclose(np.abs(rows).sum(axis=1), 1.0)

    def test_seeded_features(self):
        first, second = init_random_feature(1, 8, seed=3), init_random_feature(1, 8, seed=3)

        assert np.array_equal(first.W, second.W)
        assert np.array_equal(first.U, second.U)

    def test_linear_in_output_weights(self, random_feature, points, rng):
        A1, A2 = random_feature.A.copy(), rng.normal(size=(1, 32))
        first = random_feature.forward(*points)

        random_feature.A[...] = A2
        second = random_feature.forward(*points)

        random_feature.A[...] = A1 + A2

        assert np.max(np.abs(random_feature.forward(*points) - first - second)) < 1e-12

    def test_positive_homogeneity(self, random_feature, points):
        before = random_feature.forward(*points)

        random_feature.W[3] *= 4.0
        random_feature.U[3] *= 4.0
        random_feature.A[:, 3] /= 4.0

        assert np.max(np.abs(random_feature.forward(*points) - before)) < 1e-12

    def test_jacobian(self, random_feature, rng):
        # away from the ReLU kinks
        x, t = rng.normal(size=(20, 1)), rng.uniform(0.1, 2.9, 20)
        eps = 1e-7
        numeric = (random_feature.forward(x + eps, t) - random_feature.forward(x - eps, t)) / (2.0 * eps)

        assert np.allclose(random_feature.forward_dx(x, t)[:, :, 0], numeric, atol=1e-6)

    def test_gradient(self, random_feature, sde, batch):
        grad, _ = grad_on_batch(random_feature, sde, batch, lambda_weight)
        numeric = central_difference(
            lambda: grad_on_batch(random_feature, sde, batch, lambda_weight)[1], random_feature.A, 1e-4
        )

        assert relative_error(grad["A"], numeric) < 1e-5

    def test_gradient_from_seed(self, random_feature, sde, batch):
        grad, value = grad_dsm(random_feature, sde, batch.x0, batch.t, lambda_weight, 99)
        same, same_value = grad_on_batch(random_feature, sde, batch, lambda_weight)

        assert np.array_equal(grad["A"], same["A"])
        assert value == same_value

    def test_rkhs_norm(self, random_feature):
        assert rkhs_norm(random_feature) == pytest.approx(np.sqrt(np.sum(random_feature.A**2) / 32))

    def test_rkhs_norm_needs_random_features(self, swish_net):
        with pytest.raises(UnsupportedModelError):
            rkhs_norm(swish_net)

    def test_rejects_non_finite_weights(self, random_feature, points):
        random_feature.A[0, 0] = np.inf

        with pytest.raises(NumericalBlowupError):
            random_feature.forward(*points)

    def test_rejects_wrong_dimension(self, random_feature):
        with pytest.raises(DomainError):
            random_feature.forward(np.zeros((3, 2)), 1.0)


class TestSwish:
    def test_activation_derivative(self):
        z = np.linspace(-6.0, 6.0, 25)
        eps = 1e-6

        assert np.allclose(swish_prime(z), (swish(z + eps) - swish(z - eps)) / (2.0 * eps), atol=1e-8)

    def test_gradient(self, swish_net, sde, batch):
        grad, _ = grad_on_batch(swish_net, sde, batch, lambda_weight)
        grad.check_shapes(swish_net)

        for name, array in swish_net.trainable().items():
            numeric = central_difference(lambda: grad_on_batch(swish_net, sde, batch, lambda_weight)[1], array, 1e-5)

            assert relative_error(grad[name], numeric) < 1e-4

    def test_jacobian(self, swish_net, points):
        x, t = points
        eps = 1e-5
        numeric = (swish_net.forward(x + eps, t) - swish_net.forward(x - eps, t)) / (2.0 * eps)

        assert relative_error(swish_net.forward_dx(x, t)[:, :, 0], numeric) < 1e-5

    def test_x_scale_divides_input(self, points):
        x, t = points
        wide = init_swish(1, 16, seed=5, x_scale=2.0)
        narrow = init_swish(1, 16, seed=5)

        assert np.allclose(wide.forward(x, t), narrow.forward(x / 2.0, t))

    def test_init_ranges(self, swish_net):
        assert np.all(np.abs(swish_net.W1) <= 1.0)
        assert np.all(swish_net.b2 == 0)
        assert swish_net.n_params() == 16 * 5 + 16 + 16 + 1


class TestDenoisingBatch:
    def test_seeded(self, sde):
        x0, t = np.zeros((5, 1)), np.full(5, 1.0)

        assert np.array_equal(dsm_batch(sde, x0, t, 3).xt, dsm_batch(sde, x0, t, 3).xt)
        assert not np.array_equal(dsm_batch(sde, x0, t, 3).xt, dsm_batch(sde, x0, t, 4).xt)

    def test_targets_are_kernel_scores(self, sde, batch):
        expected = perturbation_score(sde, batch.x0, batch.xt, batch.t)

        assert np.array_equal(batch.target, expected)


class TestCheckpoint:
    def test_random_feature(self, random_feature, points, tmp_path):
        filepath = os.path.join(tmp_path, "model.npz")
        save_checkpoint(random_feature, filepath)
        loaded = load_checkpoint(filepath)

        assert loaded.model_kind == "random_feature"
        assert np.array_equal(loaded.forward(*points), random_feature.forward(*points))

    def test_swish(self, points, tmp_path):
        model = init_swish(1, 8, seed=1, x_scale=3.0)
        filepath = os.path.join(tmp_path, "model.npz")
        save_checkpoint(model, filepath)
        loaded = load_checkpoint(filepath)

        assert loaded.x_scale == 3.0
        assert np.array_equal(loaded.forward(*points), model.forward(*points))

    def test_analytic_scores_are_not_checkpointed(self, bimodal, tmp_path):
        with pytest.raises(UnsupportedModelError):
            save_checkpoint(MixtureScore(bimodal), os.path.join(tmp_path, "model.npz"))
