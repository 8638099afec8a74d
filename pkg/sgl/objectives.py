"""objectives.py

Score-matching objectives.

- ``dsm_empirical`` is the denoising loss over a dataset with one perturbation
  draw per ``(x0, t)`` pair
- ``sm_population`` is the weighted distance to the analytic score of ``p_t``,
  integrated on a grid in ``x`` and uniformly in ``t``; the additive constant is
  kept, so values are absolute
- ``QuadraticForm`` is the random-feature loss written as a quadratic in the
  output weights ``A``, with its minimizer and smoothness constant

"""


import logging
import math

from dataclasses import dataclass, field

import numpy as np

from scipy import integrate, linalg

from sgl.errors import DomainError, GridCoverageError, UnsupportedModelError
from sgl.score_net import RandomFeatureNet, dsm_batch, dsm_residual
from sgl.sde import LinearSde, lambda_weight, sample_transition
from sgl.targets import (
    Dataset,
    GaussianMixture,
    MixtureScore,
    draw_mixture,
    mixture_density,
    mixture_score,
    perturbed_mixture,
    standard_grid,
)


logger = logging.getLogger(__name__)

N_TIME_QUADRATURE = 64

# Tolerated probability mass outside the evaluation grid
MASS_DEFICIT = 1e-6

RIDGE = 1e-10


@dataclass(frozen=True)
class LossReport:
    """A loss value with its Monte-Carlo standard error.

    Parameters
    ------------
    value: float
        the estimate.
    stderr: float
        the standard error, 0 for deterministic quadrature.
    n_time_samples: int
        the number of time points used.
    n_space_samples: int
        the number of spatial points used.
    seed: int
        the noise seed, if any.
    """

    value: float
    stderr: float = 0.0
    n_time_samples: int = 0
    n_space_samples: int = 0
    seed: int = None

    def to_row(self):
        return {
            "value": self.value,
            "stderr": self.stderr,
            "n_time_samples": self.n_time_samples,
            "n_space_samples": self.n_space_samples,
            "seed": self.seed,
        }


def sample_times(sde: LinearSde, n: int, rng: np.random.Generator):
    """``n`` times uniform on ``[t_min, T]``."""
    return rng.uniform(sde.t_min, sde.horizon_T, n)


def _pairs(x0: np.ndarray, time_set):
    """Pairs points with times: one time per point, or every combination."""
    time_set = np.atleast_1d(np.asarray(time_set, dtype=float))

    if len(x0) == 0 or len(time_set) == 0:
        raise DomainError("Denoising loss needs a nonempty dataset and time set")

    if len(time_set) == len(x0):
        return x0, time_set

    return np.repeat(x0, len(time_set), axis=0), np.tile(time_set, len(x0))


def dsm_terms(model, sde: LinearSde, x0: np.ndarray, time_set, weight=lambda_weight, noise_seed: int = 0):
    """Per-pair denoising terms ``lambda(t_i) ||s(x_i(t_i), t_i) - target_i||^2``."""
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    x0, t = _pairs(x0, time_set)

    batch = dsm_batch(sde, x0, t, noise_seed)
    lam, residual = dsm_residual(model, sde, batch, weight)

    return lam * np.sum(residual**2, axis=1)


def dsm_empirical(model, sde: LinearSde, dataset, time_set, weight=lambda_weight, noise_seed: int = 0):
    """The empirical denoising score-matching loss.

    Parameters
    ------------
    model: ScoreModel
        the score model.
    sde: LinearSde
        the forward SDE.
    dataset: Dataset or numpy.ndarray
        the clean samples.
    time_set: numpy.ndarray
        one time per sample, or a set of times crossed with every sample.
    weight: callable
        ``(sde, t, d) -> lambda(t)``.
    noise_seed: int
        the seed of the perturbation draws; equal seeds give equal values.

    Returns
    ---------
    LossReport
        the mean over pairs and its standard error.
    """
    samples = dataset.samples if isinstance(dataset, Dataset) else dataset
    terms = dsm_terms(model, sde, samples, time_set, weight, noise_seed)

    stderr = float(np.std(terms, ddof=1) / math.sqrt(len(terms))) if len(terms) > 1 else 0.0

    return LossReport(
        value=float(np.mean(terms)),
        stderr=stderr,
        n_time_samples=len(np.atleast_1d(time_set)),
        n_space_samples=len(samples),
        seed=noise_seed,
    )


def sm_population(
    model,
    sde: LinearSde,
    gm: GaussianMixture,
    n_time: int = N_TIME_QUADRATURE,
    grid: np.ndarray = None,
    weight=lambda_weight,
    times=None,
):
    """The population score-matching loss against the analytic score of
    ``p_t``.

    The inner integral is the trapezoid rule on ``grid``; the outer one is the
    trapezoid rule on ``n_time`` uniform times in ``[t_min, T]``, divided by the
    interval length.

    Parameters
    ------------
    model: ScoreModel
        a one-dimensional score model.
    sde: LinearSde
        the forward SDE.
    gm: GaussianMixture
        the target ``p_0``.
    n_time: int
        the number of quadrature times.
    grid: numpy.ndarray
        the spatial grid, ``standard_grid(gm)`` by default.
    weight: callable
        ``(sde, t, d) -> lambda(t)``.
    times: numpy.ndarray
        explicit quadrature times; a single time skips the time average.

    Returns
    ---------
    LossReport
        the loss with zero standard error.
    """
    grid = standard_grid(gm) if grid is None else np.asarray(grid, dtype=float)
    times = np.linspace(sde.t_min, sde.horizon_T, n_time) if times is None else np.atleast_1d(times)

    values = list()

    for t in times:
        marginal = perturbed_mixture(gm, sde, t)
        density = mixture_density(marginal, grid)
        mass = integrate.trapezoid(density, grid)

        if 1.0 - mass > MASS_DEFICIT:
            raise GridCoverageError(
                f"Grid [{grid[0]:.4g}, {grid[-1]:.4g}] misses mass {1.0 - mass:.3g} of p_t at t = {t:.4g}"
            )

        residual = model.forward(grid[:, None], t)[:, 0] - mixture_score(marginal, grid)
        lam = float(np.asarray(weight(sde, t, 1)))

        values.append(lam * integrate.trapezoid(density * residual**2, grid))

    if len(times) == 1:
        value = values[0]

    else:
        value = integrate.trapezoid(values, times) / (times[-1] - times[0])

    return LossReport(value=float(value), n_time_samples=len(times), n_space_samples=len(grid))


def sample_space_time(sde: LinearSde, gm: GaussianMixture, n: int, rng: np.random.Generator):
    """Draws ``t ~ U[t_min, T]`` and ``x ~ p_t``, returning ``(x (n, 1), t (n,))``."""
    t = sample_times(sde, n, rng)
    x0 = draw_mixture(gm, n, rng)[:, None]

    return sample_transition(sde, x0, t, rng), t


@dataclass(eq=False)
class QuadraticForm:
    """The loss of a random-feature net as a quadratic in ``A``:
    ``(1/m) tr(A B1 A^T) - (2/sqrt(m)) tr(A B2) + const``.

    Parameters
    ------------
    B1: numpy.ndarray
        the feature Gram matrix ``E[h1 h1^T]``, shape (m, m).
    B2: numpy.ndarray
        the feature-target coupling ``E[h1 h2^T]``, shape (m, d).
    const: float
        ``E[lambda ||s*||^2]``.
    m: int
        the width.
    h1: numpy.ndarray
        the Monte-Carlo draws of ``sqrt(lambda) phi / sqrt(m)``, if kept.
    h2: numpy.ndarray
        the Monte-Carlo draws of ``sqrt(lambda) s*``, if kept.
    """

    B1: np.ndarray
    B2: np.ndarray
    const: float
    m: int
    h1: np.ndarray = field(default=None, repr=False)
    h2: np.ndarray = field(default=None, repr=False)

    def loss(self, A):
        A = np.asarray(A, dtype=float)

        return float(
            np.trace(A @ self.B1 @ A.T) / self.m
            - 2.0 * np.trace(A @ self.B2) / math.sqrt(self.m)
            + self.const
        )

    def gradient(self, A):
        A = np.asarray(A, dtype=float)

        return 2.0 * A @ self.B1 / self.m - 2.0 * self.B2.T / math.sqrt(self.m)

    def eigen(self):
        """Eigenvalues and eigenvectors of the symmetrized ``B1``."""
        return linalg.eigh(0.5 * (self.B1 + self.B1.T))

    @property
    def min_eigenvalue(self):
        return float(linalg.eigvalsh(0.5 * (self.B1 + self.B1.T))[0])

    def lipschitz(self):
        """The smoothness constant ``L = 2 lambda_max(B1) / m`` of the loss."""
        return 2.0 * float(linalg.eigvalsh(0.5 * (self.B1 + self.B1.T))[-1]) / self.m

    def minimizer(self, ridge: float = RIDGE):
        """Solves the normal equations ``A B1 = sqrt(m) B2^T`` with a small
        ridge."""
        system = self.B1 + ridge * np.eye(self.m)
        solution = linalg.solve(system, self.B2, assume_a="sym")

        return math.sqrt(self.m) * solution.T

    def gap(self, A, A_star=None):
        """``loss(A) - loss(A*)`` as ``(1/m) tr(D B1 D^T)`` with ``D = A - A*``."""
        A_star = self.minimizer() if A_star is None else A_star
        delta = np.asarray(A, dtype=float) - A_star

        return float(np.trace(delta @ self.B1 @ delta.T) / self.m)

    def loss_report(self, A):
        """The loss of ``A`` from the kept draws, with a standard error."""
        if self.h1 is None:
            raise DomainError("This quadratic form kept no Monte-Carlo draws")

        residual = self.h1 @ np.asarray(A, dtype=float).T / math.sqrt(self.m) - self.h2
        terms = np.sum(residual**2, axis=1)

        return LossReport(
            value=float(np.mean(terms)),
            stderr=float(np.std(terms, ddof=1) / math.sqrt(len(terms))),
            n_time_samples=len(terms),
            n_space_samples=len(terms),
        )


def quadratic_coeffs(
    model: RandomFeatureNet,
    sde: LinearSde,
    gm: GaussianMixture,
    n_mc: int,
    rng: np.random.Generator,
    weight=lambda_weight,
    keep_draws: bool = True,
):
    """Monte-Carlo estimates of ``B1``, ``B2`` and the constant over
    ``t ~ U[t_min, T]``, ``x ~ p_t``.

    Parameters
    ------------
    model: RandomFeatureNet
        supplies the frozen features; ``A`` is ignored.
    sde: LinearSde
        the forward SDE.
    gm: GaussianMixture
        the target ``p_0``.
    n_mc: int
        the number of draws.
    rng: numpy.random.Generator
        the generator owning the draws.
    weight: callable
        ``(sde, t, d) -> lambda(t)``.
    keep_draws: bool
        keeps ``h1, h2`` for ``loss_report``.

    Returns
    ---------
    QuadraticForm
        the quadratic loss of ``A``.
    """
    if not isinstance(model, RandomFeatureNet):
        raise UnsupportedModelError("The quadratic loss structure needs a random-feature net")

    x, t = sample_space_time(sde, gm, n_mc, rng)
    root_lam = np.sqrt(np.asarray(weight(sde, t, model.d), dtype=float))[:, None]

    h1 = root_lam * model.features(x, t) / math.sqrt(model.m)
    h2 = root_lam * MixtureScore(gm, sde).forward(x, t)

    return QuadraticForm(
        B1=h1.T @ h1 / n_mc,
        B2=h1.T @ h2 / n_mc,
        const=float(np.mean(np.sum(h2**2, axis=1))),
        m=model.m,
        h1=h1 if keep_draws else None,
        h2=h2 if keep_draws else None,
    )


def least_squares_fit(model: RandomFeatureNet, form: QuadraticForm):
    """Sets ``A`` to the minimizer of ``form`` and returns the model."""
    model.A[...] = form.minimizer()

    return model
