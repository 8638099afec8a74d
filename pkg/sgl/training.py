"""training.py

Training loops for score models and their instrumentation.

- ``gradient-flow-euler`` takes full-batch steps on one frozen draw of times
  and noise, the Euler discretization of the gradient flow
- ``sgd`` and ``adam`` take mini-batch steps with fresh times and noise
- every ``eval_every`` epochs the empirical loss, the population loss, the KL
  to the target and the RKHS norm are recorded against ``tau = epoch * lr``
- ``population_flow`` solves the gradient flow on the population loss of a
  random-feature net exactly
- ``early_stop_detect`` locates the minimum of a smoothed KL curve

"""


import logging
import math

from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd

from tqdm import tqdm

from sgl.density_metrics import model_kl
from sgl.errors import ConfigError, DivergenceError, DomainError, NumericalBlowupError
from sgl.objectives import N_TIME_QUADRATURE, QuadraticForm, sample_times, sm_population
from sgl.score_net import RandomFeatureNet, dsm_batch, grad_on_batch, rkhs_norm
from sgl.sde import LinearSde, get_weighting
from sgl.targets import Dataset, GaussianMixture, standard_grid


logger = logging.getLogger(__name__)

OPTIMIZERS = ("gradient-flow-euler", "sgd", "adam")

TRAJECTORY_COLUMNS = ("epoch", "tau", "dsm_loss", "sm_loss", "kl", "rkhs_norm")


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer settings and seeds of one training run.

    Parameters
    ------------
    optimizer: str
        one of ``gradient-flow-euler``, ``sgd`` or ``adam``.
    learning_rate: float
        the step size, strictly positive.
    epochs: int
        the number of epochs, at least 1.
    batch_size: int
        mini-batch size of ``sgd`` and ``adam``; ``None`` means full batch.
    n: int
        the dataset size.
    eval_every: int
        the evaluation cadence in epochs.
    data_seed: int
        the seed of the dataset.
    noise_seed: int
        the seed of times and perturbations.
    init_seed: int
        the seed of the model initialization.
    kl_eval: bool
        evaluates the KL to the target at every record.
    sm_eval: bool
        evaluates the population loss at every record.
    weighting: str
        ``score-norm`` or ``likelihood``.
    betas: tuple(float)
        the Adam moment decays.
    eps: float
        the Adam denominator offset.
    """

    optimizer: str = "gradient-flow-euler"
    learning_rate: float = 0.5
    epochs: int = 2000
    batch_size: int = 128
    n: int = 1000
    eval_every: int = 10
    data_seed: int = 0
    noise_seed: int = 1
    init_seed: int = 2
    kl_eval: bool = True
    sm_eval: bool = True
    weighting: str = "score-norm"
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"Unknown optimizer '{self.optimizer}', expected one of {OPTIMIZERS}")

        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")

        if self.epochs < 1 or self.eval_every < 1 or self.n < 1:
            raise ConfigError("epochs, eval_every and n must all be at least 1")

        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError(f"batch_size must be at least 1, got {self.batch_size}")

        # YAML hands lists back
        object.__setattr__(self, "betas", tuple(self.betas))

    def to_dict(self):
        data = asdict(self)
        data["betas"] = list(self.betas)

        return data


@dataclass(frozen=True)
class TrainRecord:
    epoch: int
    tau: float
    dsm_loss: float
    sm_loss: float
    kl: float
    rkhs_norm: float


@dataclass
class TrainTrajectory:
    """The records of one run, the final model and the config it ran with.

    ``snapshots`` holds model copies at requested epochs and ``best_model`` the
    copy with the smallest recorded KL.
    """

    config: TrainConfig
    records: list = field(default_factory=list)
    model: object = None
    snapshots: dict = field(default_factory=dict)
    best_model: object = None

    def to_frame(self):
        return pd.DataFrame([asdict(record) for record in self.records], columns=TRAJECTORY_COLUMNS)

    def save(self, filepath: str):
        self.to_frame().to_csv(filepath, index=False, float_format="%.10g")

        logger.info("Successfully wrote trajectory output: %s", filepath)

    def column(self, name: str):
        return np.array([getattr(record, name) for record in self.records], dtype=float)

    @property
    def epochs(self):
        return np.array([record.epoch for record in self.records], dtype=int)

    def best(self):
        """The record with the smallest KL, earliest on ties."""
        kl = self.column("kl")

        return self.records[int(np.nanargmin(kl))]


class Adam:
    """Adam over a dict of parameter arrays, updated in place."""

    def __init__(self, params: dict, learning_rate: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.learning_rate = learning_rate
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0

        self.first = {name: np.zeros_like(param) for name, param in params.items()}
        self.second = {name: np.zeros_like(param) for name, param in params.items()}

    def step(self, grad):
        self.step_count += 1

        for name, param in self.params.items():
            self.first[name] = self.beta1 * self.first[name] + (1.0 - self.beta1) * grad[name]
            self.second[name] = self.beta2 * self.second[name] + (1.0 - self.beta2) * grad[name] ** 2

            first_hat = self.first[name] / (1.0 - self.beta1**self.step_count)
            second_hat = self.second[name] / (1.0 - self.beta2**self.step_count)

            param -= self.learning_rate * first_hat / (np.sqrt(second_hat) + self.eps)


class Sgd:
    """Plain gradient steps over a dict of parameter arrays."""

    def __init__(self, params: dict, learning_rate: float):
        self.params = params
        self.learning_rate = learning_rate

    def step(self, grad):
        for name, param in self.params.items():
            param -= self.learning_rate * grad[name]


def _evaluate(model, sde, frozen, weight, config, gm, grid, epoch):
    """One trajectory record."""
    _, dsm_loss = grad_on_batch(model, sde, frozen, weight)

    sm_loss = kl = float("nan")

    if gm is not None and config.sm_eval:
        sm_loss = sm_population(model, sde, gm, N_TIME_QUADRATURE, grid, weight).value

    if gm is not None and config.kl_eval:
        kl = model_kl(model, sde, gm, grid)

    norm = rkhs_norm(model) if isinstance(model, RandomFeatureNet) else float("nan")

    return TrainRecord(
        epoch=epoch,
        tau=epoch * config.learning_rate,
        dsm_loss=dsm_loss,
        sm_loss=sm_loss,
        kl=kl,
        rkhs_norm=norm,
    )


def train(
    model,
    sde: LinearSde,
    dataset: Dataset,
    config: TrainConfig,
    gm_for_eval: GaussianMixture = None,
    grid=None,
    snapshot_epochs=(),
):
    """Trains ``model`` in place and records its trajectory.

    Parameters
    ------------
    model: ScoreModel
        the model; its trainable arrays are updated in place.
    sde: LinearSde
        the forward SDE.
    dataset: Dataset
        the training samples, ``config.n`` of them.
    config: TrainConfig
        the optimizer settings and seeds.
    gm_for_eval: GaussianMixture
        the target used for the population loss and the KL; ``None`` skips
        both.
    grid: numpy.ndarray
        the evaluation grid, ``standard_grid(gm_for_eval)`` by default.
    snapshot_epochs: tuple(int)
        epochs at which a copy of the model is kept.

    Returns
    ---------
    TrainTrajectory
        the records, sorted by epoch.
    """
    if dataset.n != config.n:
        raise DomainError(f"Dataset holds {dataset.n} samples but the config expects {config.n}")

    if grid is None and gm_for_eval is not None:
        grid = standard_grid(gm_for_eval)

    weight = get_weighting(config.weighting)
    streams = np.random.SeedSequence(config.noise_seed).spawn(2)
    frozen_rng = np.random.default_rng(streams[0])
    step_rng = np.random.default_rng(streams[1])

    # one draw of times and noise shared by the full-batch objective and the
    # recorded empirical loss
    frozen = dsm_batch(
        sde,
        dataset.samples,
        sample_times(sde, dataset.n, frozen_rng),
        int(frozen_rng.integers(2**63)),
    )

    params = model.trainable()

    if config.optimizer == "adam":
        optimizer = Adam(params, config.learning_rate, config.betas, config.eps)

    else:
        optimizer = Sgd(params, config.learning_rate)

    trajectory = TrainTrajectory(config=config, model=model)
    best_kl = math.inf

    def record(epoch):
        nonlocal best_kl

        try:
            entry = _evaluate(model, sde, frozen, weight, config, gm_for_eval, grid, epoch)

        except NumericalBlowupError as error:
            raise DivergenceError(f"Evaluation failed at epoch {epoch}: {error}", trajectory) from error

        if not math.isfinite(entry.dsm_loss):
            raise DivergenceError(f"Training loss is not finite at epoch {epoch}", trajectory)

        trajectory.records.append(entry)

        if math.isfinite(entry.kl) and entry.kl < best_kl:
            best_kl = entry.kl
            trajectory.best_model = model.copy()

        if epoch in snapshot_epochs:
            trajectory.snapshots[epoch] = model.copy()

    record(0)

    batch_size = dataset.n if config.optimizer == "gradient-flow-euler" or config.batch_size is None else config.batch_size
    show = logger.isEnabledFor(logging.DEBUG)

    for epoch in tqdm(range(1, config.epochs + 1), disable=not show, desc=config.optimizer):
        if config.optimizer == "gradient-flow-euler":
            batches = [frozen]

        else:
            order = step_rng.permutation(dataset.n)
            batches = list()

            for start in range(0, dataset.n, batch_size):
                chosen = order[start : start + batch_size]
                batches.append(
                    dsm_batch(
                        sde,
                        dataset.samples[chosen],
                        sample_times(sde, len(chosen), step_rng),
                        int(step_rng.integers(2**63)),
                    )
                )

        for batch in batches:
            try:
                grad, value = grad_on_batch(model, sde, batch, weight)

            except NumericalBlowupError as error:
                raise DivergenceError(f"Training diverged at epoch {epoch}: {error}", trajectory) from error

            if not math.isfinite(value) or not math.isfinite(grad.norm()):
                raise DivergenceError(f"Training loss is not finite at epoch {epoch}", trajectory)

            optimizer.step(grad)

        if epoch % config.eval_every == 0 or epoch == config.epochs:
            record(epoch)

    logger.debug("Finished %d epochs of %s", config.epochs, config.optimizer)

    return trajectory


def population_flow(form: QuadraticForm, taus, A0):
    """Exact gradient flow ``dA/dtau = -grad L(A)`` on a quadratic loss.

    In the eigenbasis ``B1 = V diag(Lambda) V^T`` the offset from the minimizer
    decays as ``exp(-2 Lambda tau / m)``.

    Parameters
    ------------
    form: QuadraticForm
        the population loss.
    taus: numpy.ndarray
        the training times.
    A0: numpy.ndarray
        the starting weights, shape (d, m).

    Returns
    ---------
    list(numpy.ndarray)
        ``A(tau)`` for every requested ``tau``.
    """
    eigenvalues, vectors = form.eigen()
    eigenvalues = np.maximum(eigenvalues, 0.0)
    start = np.asarray(A0, dtype=float) @ vectors
    pull = math.sqrt(form.m) * (vectors.T @ form.B2).T
    positive = eigenvalues > 0
    flows = list()

    for tau in np.atleast_1d(taus):
        rate = 2.0 * eigenvalues * tau / form.m
        # (1 - exp(-rate)) / Lambda, which tends to 2 tau / m on the null space
        gain = np.where(positive, -np.expm1(-rate) / np.where(positive, eigenvalues, 1.0), 2.0 * tau / form.m)
        flows.append((start * np.exp(-rate) + pull * gain) @ vectors.T)

    return flows


@dataclass(frozen=True)
class EarlyStop:
    """Where a smoothed KL curve bottoms out.

    ``turning`` is ``False`` when the curve never rises above its minimum by
    10% for ``patience`` consecutive records.
    """

    index: int
    epoch: int
    turning: bool
    rise_index: int = None
    rise_epoch: int = None
    smoothed_min: float = float("nan")


def smooth(series, window: int):
    """Centered moving average that keeps the series length."""
    return pd.Series(np.asarray(series, dtype=float)).rolling(window, center=True, min_periods=1).mean().to_numpy()


def early_stop_detect(kl_series, smoothing_window: int, patience: int, epochs=None):
    """Finds the early-stopping epoch of a KL curve.

    Parameters
    ------------
    kl_series: numpy.ndarray
        KL values in record order.
    smoothing_window: int
        width of the centered moving average.
    patience: int
        consecutive records above the minimum plus 10% that count as a rise.
    epochs: numpy.ndarray
        the epoch of each record; record indices by default.

    Returns
    ---------
    EarlyStop
        the minimizing index and epoch, earliest on ties.
    """
    kl_series = np.asarray(kl_series, dtype=float)

    if len(kl_series) <= smoothing_window + patience:
        raise DomainError(
            f"Need more than {smoothing_window + patience} records, got {len(kl_series)}"
        )

    epochs = np.arange(len(kl_series)) if epochs is None else np.asarray(epochs)
    smoothed = smooth(kl_series, smoothing_window)

    index = int(np.argmin(smoothed))
    floor = smoothed[index] + 0.1 * abs(smoothed[index])

    run = 0

    for later in range(index + 1, len(smoothed)):
        run = run + 1 if smoothed[later] > floor else 0

        if run == patience:
            rise = later - patience + 1

            return EarlyStop(index, int(epochs[index]), True, rise, int(epochs[rise]), float(smoothed[index]))

    return EarlyStop(index, int(epochs[index]), False, smoothed_min=float(smoothed[index]))
