import pickle

import numpy as np
import pytest

from sgl.errors import ConfigError, DivergenceError, DomainError
from sgl.objectives import quadratic_coeffs
from sgl.score_net import dsm_batch, init_random_feature, init_swish
from sgl.sde import lambda_weight, likelihood_weight
from sgl.targets import sample_mixture
from sgl.training import TRAJECTORY_COLUMNS, TrainConfig, early_stop_detect, population_flow, smooth, train


@pytest.fixture
def dataset(bimodal):
    return sample_mixture(bimodal, 200, 31)


@pytest.fixture
def quick():
    return TrainConfig(epochs=20, n=200, eval_every=5, learning_rate=0.5, kl_eval=False, sm_eval=False)


@pytest.fixture
def form(bimodal, sde, rng):
    return quadratic_coeffs(init_random_feature(1, 8, seed=3), sde, bimodal, 20000, rng, likelihood_weight)


@pytest.fixture
def u_curve():
    epochs = np.arange(201)

    return epochs, (epochs - 50.0) ** 2 / 100.0 + 0.1


class TestTrainConfig:
    def test_unknown_optimizer(self):
        with pytest.raises(ConfigError):
            TrainConfig(optimizer="lbfgs")

    def test_positive_learning_rate(self):
        with pytest.raises(ConfigError):
            TrainConfig(learning_rate=0.0)

    def test_epochs(self):
        with pytest.raises(ConfigError):
            TrainConfig(epochs=0)

    def test_betas_from_lists(self):
        assert TrainConfig(betas=[0.8, 0.99]).betas == (0.8, 0.99)
        assert TrainConfig().to_dict()["betas"] == [0.9, 0.999]


class TestTrain:
    def test_record_epochs(self, sde, dataset, quick):
        trajectory = train(init_random_feature(1, 8, seed=0), sde, dataset, TrainConfig(**{**quick.to_dict(), "epochs": 22}))

        assert list(trajectory.epochs) == [0, 5, 10, 15, 20, 22]
        assert np.allclose(trajectory.column("tau"), trajectory.epochs * 0.5)
        assert tuple(trajectory.to_frame().columns) == TRAJECTORY_COLUMNS

    def test_reproducible(self, bimodal, sde):
        config = TrainConfig(optimizer="adam", learning_rate=1e-3, epochs=10, n=100, batch_size=32, eval_every=5, kl_eval=False, sm_eval=False)
        frames = [
            train(init_swish(1, 8, seed=42), sde, sample_mixture(bimodal, 100, 41), config).to_frame()
            for _ in range(2)
        ]

        assert frames[0].equals(frames[1])

    def test_dataset_size(self, sde, dataset):
        with pytest.raises(DomainError):
            train(init_random_feature(1, 8), sde, dataset, TrainConfig(n=100))

    def test_descent_with_small_steps(self, sde, dataset):
        """Full-batch steps of at most ``1/L`` never raise the frozen
        objective."""
        model = init_random_feature(1, 16, seed=32)

        frozen_rng = np.random.default_rng(np.random.SeedSequence(33).spawn(2)[0])
        t = frozen_rng.uniform(sde.t_min, sde.horizon_T, dataset.n)
        batch = dsm_batch(sde, dataset.samples, t, int(frozen_rng.integers(2**63)))

        lam = lambda_weight(sde, batch.t, 1)
        phi = model.features(batch.xt, batch.t)
        hessian = 2.0 * (phi * lam[:, None]).T @ phi / (dataset.n * model.m**2)
        step = 1.0 / float(np.linalg.eigvalsh(hessian)[-1])

        config = TrainConfig(learning_rate=step, epochs=50, n=200, eval_every=1, noise_seed=33, kl_eval=False, sm_eval=False)
        losses = train(model, sde, dataset, config).column("dsm_loss")

        assert np.all(np.diff(losses) <= 1e-12 * np.abs(losses[:-1]))
        assert losses[-1] < losses[0]

    def test_euler_steps_are_first_order(self, sde, dataset):
        """Halving the step at a fixed ``tau`` halves the gap to the gradient
        flow on the frozen objective."""
        frozen_rng = np.random.default_rng(np.random.SeedSequence(33).spawn(2)[0])
        t = frozen_rng.uniform(sde.t_min, sde.horizon_T, dataset.n)
        batch = dsm_batch(sde, dataset.samples, t, int(frozen_rng.integers(2**63)))

        model = init_random_feature(1, 16, seed=32)
        phi = model.features(batch.xt, batch.t)
        lam = lambda_weight(sde, batch.t, 1)
        step = 0.05 / float(np.linalg.eigvalsh(2.0 * (phi * lam[:, None]).T @ phi / (dataset.n * model.m**2))[-1])

        finals = list()

        for halvings in range(3):
            epochs = 20 * 2**halvings
            config = TrainConfig(learning_rate=step / 2**halvings, epochs=epochs, n=200, eval_every=epochs, noise_seed=33, kl_eval=False, sm_eval=False)
            trajectory = train(init_random_feature(1, 16, seed=32), sde, dataset, config)

            assert trajectory.column("tau")[-1] == pytest.approx(20 * step)
            finals.append(trajectory.model.A.copy())

        order = np.log2(np.linalg.norm(finals[0] - finals[1]) / np.linalg.norm(finals[1] - finals[2]))

        assert order == pytest.approx(1.0, abs=0.2)

    def test_adam_lowers_the_loss(self, sde, dataset):
        config = TrainConfig(optimizer="adam", learning_rate=0.05, epochs=100, n=200, batch_size=50, eval_every=50, kl_eval=False, sm_eval=False)
        losses = train(init_random_feature(1, 16, seed=1), sde, dataset, config).column("dsm_loss")

        assert losses[-1] < losses[0]

    def test_divergence_keeps_the_partial_trajectory(self, sde, dataset):
        config = TrainConfig(learning_rate=1e8, epochs=500, n=200, eval_every=1, kl_eval=False, sm_eval=False)

        with pytest.raises(DivergenceError) as error:
            train(init_random_feature(1, 8, seed=0), sde, dataset, config)

        assert error.value.trajectory is not None
        assert len(error.value.trajectory.records) >= 1

    def test_divergence_crosses_processes(self, sde, dataset):
        config = TrainConfig(learning_rate=1e8, epochs=500, n=200, eval_every=1, kl_eval=False, sm_eval=False)

        with pytest.raises(DivergenceError) as error:
            train(init_random_feature(1, 8, seed=0), sde, dataset, config)

        copy = pickle.loads(pickle.dumps(error.value))

        assert str(copy) == str(error.value)
        assert copy.trajectory.to_frame().equals(error.value.trajectory.to_frame())

    def test_snapshots_and_best_model(self, bimodal, sde, dataset):
        config = TrainConfig(learning_rate=0.5, epochs=20, n=200, eval_every=5, sm_eval=False, weighting="likelihood")
        trajectory = train(init_random_feature(1, 8, seed=0), sde, dataset, config, bimodal, snapshot_epochs=(10,))

        assert set(trajectory.snapshots) == {10}
        assert trajectory.best_model is not None
        assert trajectory.best().kl == np.nanmin(trajectory.column("kl"))
        assert np.isfinite(trajectory.column("rkhs_norm")).all()


class TestPopulationFlow:
    def test_starts_at_initial_weights(self, form):
        A0 = np.ones((1, 8))

        assert np.allclose(population_flow(form, [0.0], A0)[0], A0)

    def test_converges_to_minimizer(self, form):
        A = population_flow(form, [1e9], np.zeros((1, 8)))[0]

        assert form.gap(A) < 1e-8 * form.const

    def test_matches_small_gradient_steps(self, form):
        A = np.zeros((1, 8))
        step = 0.01 / form.lipschitz()

        for _ in range(1000):
            A = A - step * form.gradient(A)

        exact = population_flow(form, [1000 * step], np.zeros((1, 8)))[0]

        assert np.linalg.norm(A - exact) <= 0.02 * np.linalg.norm(exact)

    def test_loss_decreases(self, form):
        losses = [form.loss(A) for A in population_flow(form, np.geomspace(1.0, 1e4, 20), np.zeros((1, 8)))]

        assert np.all(np.diff(losses) <= 1e-12)


class TestEarlyStop:
    def test_smooth_keeps_length(self):
        assert len(smooth(np.arange(10.0), 3)) == 10
        assert smooth(np.arange(10.0), 3)[5] == pytest.approx(5.0)

    def test_u_curve(self, u_curve):
        epochs, kl = u_curve
        stop = early_stop_detect(kl, 5, 10, epochs * 10)

        assert stop.turning
        assert stop.index == 50
        assert stop.epoch == 500
        assert stop.rise_index > 50

    def test_monotone_curve(self):
        kl = np.linspace(1.0, 0.1, 100)
        stop = early_stop_detect(kl, 5, 10)

        assert not stop.turning
        assert stop.index >= 95

    def test_too_short(self):
        with pytest.raises(DomainError):
            early_stop_detect(np.ones(20), 15, 10)

    def test_constant_curve(self):
        stop = early_stop_detect(np.ones(100), 5, 10)

        assert stop.index == 0
        assert not stop.turning

    def test_v_curve(self):
        stop = early_stop_detect(np.abs(np.arange(20) - 7.0), 3, 3)

        assert stop.index == 7
        assert stop.turning
        assert stop.rise_index == 8
