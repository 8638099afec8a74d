"""targets.py

One-dimensional Gaussian mixture targets. The family is closed under the linear
forward SDE, so every marginal ``p_t`` and its score are available in closed
form.

- ``GaussianMixture`` stores weights, means and variances of ``K`` modes
- ``mixture_density`` and ``mixture_score`` evaluate ``p`` and ``d/dx log p``
- ``perturbed_mixture`` convolves the mixture with the transition kernel
- ``MixtureScore`` exposes the analytic score of ``p_t`` through the score
  model protocol, so oracles run through the same code as trained networks
- ``Dataset`` holds seeded samples and persists them as CSV with a JSON sidecar

"""


import json
import logging
import math

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from scipy.special import logsumexp, softmax
from sklearn.mixture import GaussianMixture as SkGaussianMixture

from sgl.errors import DomainError
from sgl.sde import LinearSde, kernel_std, r_of_t


logger = logging.getLogger(__name__)

GRID_POINTS = 4096

# Half-width of the standard grid in units of the widest mode
GRID_SIGMAS = 10.0


@dataclass(frozen=True)
class GaussianMixture:
    """A mixture ``sum_k q_k N(mu_k, sigma_k^2)`` on the real line.

    Parameters
    ------------
    weights: tuple(float)
        the mode probabilities, positive and summing to 1.
    means: tuple(float)
        the mode locations.
    variances: tuple(float)
        the mode variances, strictly positive.
    """

    weights: tuple = (1.0,)
    means: tuple = (0.0,)
    variances: tuple = (1.0,)

    def __post_init__(self):
        sizes = {len(self.weights), len(self.means), len(self.variances)}

        if len(sizes) != 1 or len(self.weights) == 0:
            raise DomainError("Mixture weights, means and variances must share one nonzero length")

        if any(q <= 0 for q in self.weights):
            raise DomainError(f"Mixture weights must be positive, got {self.weights}")

        if abs(math.fsum(self.weights) - 1.0) > 1e-12:
            raise DomainError(f"Mixture weights must sum to 1, got {math.fsum(self.weights)}")

        if any(var <= 0 for var in self.variances):
            raise DomainError(f"Mixture variances must be positive, got {self.variances}")

    @property
    def n_modes(self):
        return len(self.weights)

    def to_dict(self):
        """The ``modes = [{q, mu, var}, ...]`` description used in configs."""
        return {
            "modes": [
                {"q": float(q), "mu": float(mu), "var": float(var)}
                for q, mu, var in zip(self.weights, self.means, self.variances)
            ]
        }

    @classmethod
    def from_dict(cls, data: dict):
        modes = data["modes"]

        return cls(
            weights=tuple(float(mode["q"]) for mode in modes),
            means=tuple(float(mode["mu"]) for mode in modes),
            variances=tuple(float(mode.get("var", 1.0)) for mode in modes),
        )


def symmetric_mixture(mu: float, variance: float = 1.0, q: float = 0.5):
    """The two-mode mixture ``q N(-mu, var) + (1 - q) N(mu, var)``.

    ``mu = 0`` collapses to a single mode.
    """
    if mu == 0:
        return GaussianMixture(weights=(1.0,), means=(0.0,), variances=(variance,))

    return GaussianMixture(weights=(q, 1.0 - q), means=(-mu, mu), variances=(variance, variance))


def _log_components(gm: GaussianMixture, x: np.ndarray):
    """Per-mode log terms ``log q_k + log N(x; mu_k, var_k)``, shape (..., K)."""
    x = np.asarray(x, dtype=float)[..., None]
    means = np.asarray(gm.means)
    variances = np.asarray(gm.variances)

    return (
        np.log(gm.weights)
        - 0.5 * np.log(2.0 * np.pi * variances)
        - 0.5 * (x - means) ** 2 / variances
    )


def mixture_log_density(gm: GaussianMixture, x):
    """``log p(x)`` evaluated elementwise with a stable log-sum-exp."""
    return logsumexp(_log_components(gm, x), axis=-1)


def mixture_density(gm: GaussianMixture, x):
    """``p(x) = sum_k q_k N(x; mu_k, var_k)``, elementwise.

    Parameters
    ------------
    gm: GaussianMixture
        the mixture.
    x: float or numpy.ndarray
        evaluation points.

    Returns
    ---------
    float or numpy.ndarray
        the density, same shape as ``x``.
    """
    return np.exp(mixture_log_density(gm, x))


def mixture_score(gm: GaussianMixture, x):
    """``d/dx log p(x) = sum_k w_k(x) (mu_k - x) / var_k`` with posterior
    weights ``w_k``.

    Parameters
    ------------
    gm: GaussianMixture
        the mixture.
    x: float or numpy.ndarray
        evaluation points.

    Returns
    ---------
    float or numpy.ndarray
        the score, same shape as ``x``.
    """
    posterior = softmax(_log_components(gm, x), axis=-1)
    pull = (np.asarray(gm.means) - np.asarray(x, dtype=float)[..., None]) / np.asarray(gm.variances)

    return (posterior * pull).sum(axis=-1)


def mixture_score_dx(gm: GaussianMixture, x):
    """Derivative of ``mixture_score`` in ``x``.

    ``-sum_k w_k / var_k`` plus the posterior variance of the per-mode pulls.
    """
    posterior = softmax(_log_components(gm, x), axis=-1)
    variances = np.asarray(gm.variances)
    pull = (np.asarray(gm.means) - np.asarray(x, dtype=float)[..., None]) / variances

    mean_pull = (posterior * pull).sum(axis=-1)
    spread = (posterior * pull**2).sum(axis=-1) - mean_pull**2

    return -(posterior / variances).sum(axis=-1) + spread


def perturbed_mixture(gm: GaussianMixture, sde: LinearSde, t: float):
    """The marginal ``p_t`` of the forward SDE started from ``gm``.

    Means become ``r mu_k`` and variances ``r^2 var_k + r^2 v^2``; weights are
    unchanged.
    """
    r = float(r_of_t(sde, t))
    noise = float(kernel_std(sde, t)) ** 2

    return GaussianMixture(
        weights=gm.weights,
        means=tuple(r * mu for mu in gm.means),
        variances=tuple(r**2 * var + noise for var in gm.variances),
    )


def standard_grid(gm: GaussianMixture, n_points: int = GRID_POINTS):
    """Uniform grid spanning ten of the widest standard deviations beyond the
    outermost modes."""
    spread = GRID_SIGMAS * math.sqrt(max(gm.variances))

    return np.linspace(min(gm.means) - spread, max(gm.means) + spread, n_points)


class MixtureScore:
    """The analytic score of a mixture target, as a score model.

    With an SDE the score at time ``t`` is the score of ``p_t``; without one
    it is the score of ``p_0`` at every ``t``.

    Parameters
    ------------
    gm: GaussianMixture
        the target.
    sde: LinearSde
        the forward SDE, or ``None`` for a time-independent score.
    """

    model_kind = "analytic_mixture"

    def __init__(self, gm: GaussianMixture, sde: LinearSde = None):
        self.gm = gm
        self.sde = sde
        self.d = 1

    def _moments(self, x: np.ndarray, t):
        """Per-row, per-mode means and variances of ``p_t``."""
        means = np.broadcast_to(np.asarray(self.gm.means), (len(x), self.gm.n_modes))
        variances = np.broadcast_to(np.asarray(self.gm.variances), (len(x), self.gm.n_modes))

        if self.sde is None:
            return means, variances

        r = np.reshape(r_of_t(self.sde, t), (-1, 1))
        noise = np.reshape(kernel_std(self.sde, t), (-1, 1)) ** 2

        return r * means, r**2 * variances + noise

    def _posterior(self, x: np.ndarray, t):
        means, variances = self._moments(x, t)
        log_terms = (
            np.log(self.gm.weights)
            - 0.5 * np.log(2.0 * np.pi * variances)
            - 0.5 * (x - means) ** 2 / variances
        )

        return softmax(log_terms, axis=-1), (means - x) / variances, variances

    def forward(self, x: np.ndarray, t):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        posterior, pull, _ = self._posterior(x, t)

        return (posterior * pull).sum(axis=-1, keepdims=True)

    def forward_dx(self, x: np.ndarray, t):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        posterior, pull, variances = self._posterior(x, t)

        mean_pull = (posterior * pull).sum(axis=-1)
        spread = (posterior * pull**2).sum(axis=-1) - mean_pull**2
        slope = -(posterior / variances).sum(axis=-1) + spread

        return slope[:, None, None]

    def __call__(self, x, t):
        return self.forward(x, t)


class GaussianScore:
    """The score ``-(x - mean) / variance`` of a fixed Gaussian, as a score
    model."""

    model_kind = "analytic_gaussian"

    def __init__(self, mean: float = 0.0, variance: float = 1.0, d: int = 1):
        self.mean = mean
        self.variance = variance
        self.d = d

    def forward(self, x: np.ndarray, t):
        x = np.atleast_2d(np.asarray(x, dtype=float))

        return -(x - self.mean) / self.variance

    def forward_dx(self, x: np.ndarray, t):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        eye = -np.eye(self.d) / self.variance

        return np.broadcast_to(eye, (len(x), self.d, self.d)).copy()

    def __call__(self, x, t):
        return self.forward(x, t)


@dataclass
class Dataset:
    """Samples drawn from a mixture with a recorded seed.

    Parameters
    ------------
    samples: numpy.ndarray
        the points, shape (n, 1).
    seed: int
        the seed that regenerates ``samples`` bit for bit.
    source: GaussianMixture
        the mixture the samples were drawn from.
    """

    samples: np.ndarray
    seed: int
    source: GaussianMixture = field(default_factory=GaussianMixture)

    def __post_init__(self):
        self.samples = np.atleast_2d(np.asarray(self.samples, dtype=float))

        if self.samples.shape[0] == 1 and self.samples.shape[1] > 1:
            self.samples = self.samples.T

        if len(self.samples) == 0:
            raise DomainError("A dataset needs at least one sample")

    @property
    def n(self):
        return len(self.samples)

    def regenerate(self):
        """Draws the dataset again from its seed and source."""
        return sample_mixture(self.source, self.n, self.seed)

    def save(self, filepath: str):
        """Writes ``x`` as a one-column CSV and the seed to ``<filepath>.json``."""
        frame = pd.DataFrame({"x": self.samples[:, 0]})
        frame.to_csv(filepath, index=False, float_format="%.10g")

        with open(f"{filepath}.json", "w", encoding="utf-8") as file:
            json.dump({"seed": self.seed, "n": self.n, "source": self.source.to_dict()}, file, indent=2)

        logger.info("Successfully wrote dataset output: %s", filepath)

    @classmethod
    def load(cls, filepath: str):
        frame = pd.read_csv(filepath)

        with open(f"{filepath}.json", "r", encoding="utf-8") as file:
            meta = json.load(file)

        return cls(
            samples=frame["x"].to_numpy()[:, None],
            seed=int(meta["seed"]),
            source=GaussianMixture.from_dict(meta["source"]),
        )


def sample_mixture(gm: GaussianMixture, n: int, seed: int):
    """Draws ``n`` i.i.d. points: a mode by its weight, then a Gaussian draw.

    Parameters
    ------------
    gm: GaussianMixture
        the mixture.
    n: int
        the number of samples, at least 1.
    seed: int
        the seed; equal seeds give bit-identical datasets.

    Returns
    ---------
    Dataset
        the samples with their seed and source.
    """
    if n < 1:
        raise DomainError(f"Dataset size must be at least 1, got {n}")

    samples = draw_mixture(gm, n, np.random.default_rng(seed))

    return Dataset(samples=samples[:, None], seed=seed, source=gm)


def draw_mixture(gm: GaussianMixture, n: int, rng: np.random.Generator):
    """Draws ``n`` points from a shared generator, shape (n,)."""
    modes = rng.choice(gm.n_modes, size=n, p=np.asarray(gm.weights))
    noise = rng.standard_normal(n)

    return np.asarray(gm.means)[modes] + np.sqrt(np.asarray(gm.variances))[modes] * noise


def fit_mixture(samples: np.ndarray, n_components: int = 2, seed: int = 0):
    """Fits a ``K``-mode mixture to samples by expectation-maximization.

    Modes are returned sorted by mean.
    """
    samples = np.reshape(np.asarray(samples, dtype=float), (-1, 1))
    model = SkGaussianMixture(n_components=n_components, random_state=seed, n_init=3)
    model.fit(samples)

    order = np.argsort(model.means_[:, 0])
    weights = model.weights_[order]

    return GaussianMixture(
        weights=tuple(weights / weights.sum()),
        means=tuple(model.means_[order, 0]),
        variances=tuple(model.covariances_[order].reshape(-1)),
    )
