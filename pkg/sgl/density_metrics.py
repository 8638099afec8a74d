"""density_metrics.py

Densities and divergences of learned one-dimensional scores.

- ``density_from_score`` integrates a score on a grid and normalizes it
- ``kl_quadrature`` and ``model_kl`` measure ``KL(p0 || p_model)`` with the
  trapezoid rule
- ``ode_loglik`` and ``ode_sample`` integrate the probability-flow ODE with
  fixed-step RK4, the former co-integrating the divergence
- ``kl_prior_gap`` measures how far ``p_T`` is from the prior

"""


import logging
import math

from dataclasses import dataclass

import numpy as np
import pandas as pd

from scipy import integrate

from sgl.errors import DegenerateDensityError, DomainError, NumericalBlowupError, SupportError
from sgl.sde import LinearSde
from sgl.targets import GaussianMixture, fit_mixture, mixture_density, perturbed_mixture, standard_grid


logger = logging.getLogger(__name__)

# q is clipped to this before the logarithm
Q_FLOOR = 1e-300

# grid points where p falls below this are left out of the KL
P_FLOOR = 1e-15

# allowed distance of a grid's trapezoid mass from 1
MASS_TOLERANCE = 1e-6

ODE_STEPS = 500
MIN_ODE_STEPS = 100


@dataclass(eq=False)
class DensityGrid:
    """A normalized density sampled on a uniform 1D grid.

    Parameters
    ------------
    x: numpy.ndarray
        the grid points, increasing.
    p: numpy.ndarray
        the density values, non-negative and finite.
    """

    x: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.p = np.asarray(self.p, dtype=float)

        if self.x.shape != self.p.shape or self.x.ndim != 1:
            raise DomainError(f"Density grid shapes differ: {self.x.shape} vs {self.p.shape}")

        if not np.all(np.isfinite(self.p)) or np.any(self.p < 0):
            raise DegenerateDensityError("Density values must be finite and non-negative")

        if abs(self.mass - 1.0) > MASS_TOLERANCE:
            raise DegenerateDensityError(f"Density grid carries mass {self.mass:.10g}, expected 1")

    @property
    def h(self):
        return float(self.x[1] - self.x[0])

    @property
    def mass(self):
        return float(integrate.trapezoid(self.p, self.x))

    @classmethod
    def normalized(cls, x, values):
        """Divides ``values`` by their trapezoid integral."""
        x = np.asarray(x, dtype=float)
        values = np.asarray(values, dtype=float)
        total = integrate.trapezoid(values, x)

        if not np.isfinite(total) or total <= 0:
            raise DegenerateDensityError(f"Cannot normalize a density of total mass {total}")

        return cls(x=x, p=values / total)

    def save(self, filepath: str):
        pd.DataFrame({"x": self.x, "p": self.p}).to_csv(filepath, index=False, float_format="%.10g")

        logger.info("Successfully wrote density output: %s", filepath)

    @classmethod
    def load(cls, filepath: str):
        frame = pd.read_csv(filepath)

        return cls(x=frame["x"].to_numpy(), p=frame["p"].to_numpy())


def density_from_score(score_fn, grid):
    """Recovers a density from its score.

    The log-density is the cumulative trapezoid integral of the score from
    the left grid edge, shifted by its maximum before exponentiating.

    Parameters
    ------------
    score_fn: callable
        ``x -> score`` on a 1D array of points.
    grid: numpy.ndarray
        the uniform grid.

    Returns
    ---------
    DensityGrid
        the normalized density.
    """
    grid = np.asarray(grid, dtype=float)
    score = np.asarray(score_fn(grid), dtype=float).reshape(-1)

    if not np.all(np.isfinite(score)):
        raise NumericalBlowupError("Score is not finite on the grid")

    log_p = integrate.cumulative_trapezoid(score, grid, initial=0.0)

    return DensityGrid.normalized(grid, np.exp(log_p - log_p.max()))


def model_density(model, sde: LinearSde, grid):
    """The density of a 1D score model evaluated at ``t_min``."""
    return density_from_score(lambda x: model.forward(x[:, None], sde.t_min)[:, 0], grid)


def kl_quadrature(p: DensityGrid, q: DensityGrid):
    """``KL(p || q) = int p log(p / q)`` by the trapezoid rule.

    ``q`` is clipped to ``1e-300`` and points where ``p < 1e-15`` are dropped.

    Parameters
    ------------
    p: DensityGrid
        the reference density.
    q: DensityGrid
        the approximating density, on the same grid.

    Returns
    ---------
    float
        the divergence.
    """
    if p.x.shape != q.x.shape or np.max(np.abs(p.x - q.x)) > 1e-10 * max(1.0, np.max(np.abs(p.x))):
        raise SupportError("KL divergence needs both densities on one grid")

    keep = p.p >= P_FLOOR
    integrand = np.zeros_like(p.p)
    integrand[keep] = p.p[keep] * (np.log(p.p[keep]) - np.log(np.maximum(q.p[keep], Q_FLOOR)))

    return float(integrate.trapezoid(integrand, p.x))


def target_density(gm: GaussianMixture, grid):
    return DensityGrid.normalized(grid, mixture_density(gm, np.asarray(grid, dtype=float)))


def model_kl(model, sde: LinearSde, gm: GaussianMixture, grid=None):
    """``KL(p0 || p_model)`` with the model density read off at ``t_min``.

    Parameters
    ------------
    model: ScoreModel
        a one-dimensional score model.
    sde: LinearSde
        the forward SDE.
    gm: GaussianMixture
        the target ``p0``.
    grid: numpy.ndarray
        the grid, ``standard_grid(gm)`` by default.

    Returns
    ---------
    float
        the divergence.
    """
    grid = standard_grid(gm) if grid is None else grid

    return kl_quadrature(target_density(gm, grid), model_density(model, sde, grid))


def _flow(model, sde: LinearSde, x, t):
    """Velocity ``f x - g^2 s / 2`` and its divergence."""
    f = float(sde.drift(t))
    g2 = float(sde.diffusion(t)) ** 2

    velocity = f * x - 0.5 * g2 * model.forward(x, t)
    trace = np.trace(model.forward_dx(x, t), axis1=1, axis2=2)

    return velocity, f * x.shape[1] - 0.5 * g2 * trace


def _check_state(x, t):
    if not np.all(np.isfinite(x)):
        bad = np.argwhere(~np.isfinite(x))[0][0]

        raise NumericalBlowupError(f"Probability flow left the finite range at t = {t:.6g}", x=x[bad], t=float(t))


def _check_steps(n_steps: int):
    if n_steps < MIN_ODE_STEPS:
        raise DomainError(f"Probability-flow integration needs at least {MIN_ODE_STEPS} steps, got {n_steps}")


def ode_loglik(model, sde: LinearSde, x, n_steps: int = ODE_STEPS):
    """Log-likelihood of points under the probability-flow ODE of ``model``.

    Integrates ``dx/dt = f x - g^2 s / 2`` from ``t_min`` to ``T`` with RK4,
    together with the divergence of the velocity, and returns
    ``log pi(x(T)) + int div``.

    Parameters
    ------------
    model: ScoreModel
        the score model.
    sde: LinearSde
        the forward SDE.
    x: numpy.ndarray
        points with shape (n, d), or a scalar.
    n_steps: int
        the number of RK4 steps, at least 100.

    Returns
    ---------
    numpy.ndarray
        one log-likelihood per point.
    """
    _check_steps(n_steps)

    x = np.atleast_2d(np.asarray(x, dtype=float))
    times = np.linspace(sde.t_min, sde.horizon_T, n_steps + 1)
    log_det = np.zeros(len(x))

    for t, t_next in zip(times[:-1], times[1:]):
        dt = t_next - t
        half = t + 0.5 * dt

        k1, l1 = _flow(model, sde, x, t)
        k2, l2 = _flow(model, sde, x + 0.5 * dt * k1, half)
        k3, l3 = _flow(model, sde, x + 0.5 * dt * k2, half)
        k4, l4 = _flow(model, sde, x + dt * k3, t_next)

        x = x + dt * (k1 + 2.0 * k2 + 2.0 * k3 + k4) / 6.0
        log_det = log_det + dt * (l1 + 2.0 * l2 + 2.0 * l3 + l4) / 6.0

        _check_state(x, t_next)

    return sde.prior.logpdf(x) + log_det


def ode_sample(model, sde: LinearSde, n_samples: int, n_steps: int, rng: np.random.Generator, d: int = 1):
    """Draws ``x(T)`` from the prior and integrates the probability-flow ODE
    back to ``t_min`` with RK4."""
    _check_steps(n_steps)

    x = sde.prior.sample(n_samples, d, rng)
    times = np.linspace(sde.t_min, sde.horizon_T, n_steps + 1)[::-1]

    for t, t_next in zip(times[:-1], times[1:]):
        dt = t_next - t
        half = t + 0.5 * dt

        k1, _ = _flow(model, sde, x, t)
        k2, _ = _flow(model, sde, x + 0.5 * dt * k1, half)
        k3, _ = _flow(model, sde, x + 0.5 * dt * k2, half)
        k4, _ = _flow(model, sde, x + dt * k3, t_next)

        x = x + dt * (k1 + 2.0 * k2 + 2.0 * k3 + k4) / 6.0

        _check_state(x, t_next)

    return x


def test_nll(model, sde: LinearSde, samples, n_steps: int = ODE_STEPS):
    """Mean negative log-likelihood of held-out samples."""
    return float(-np.mean(ode_loglik(model, sde, samples, n_steps)))


# not a pytest test
test_nll.__test__ = False


def prior_grid(gm: GaussianMixture, sde: LinearSde, n_points: int = 4096):
    """A grid covering both the target and the prior."""
    base = standard_grid(gm, n_points)
    spread = 10.0 * math.sqrt(sde.prior.variance)

    return np.linspace(min(base[0], -spread), max(base[-1], spread), n_points)


def kl_prior_gap(gm: GaussianMixture, sde: LinearSde, grid=None):
    """``KL(p_T || pi)`` by quadrature."""
    grid = prior_grid(gm, sde) if grid is None else np.asarray(grid, dtype=float)
    marginal = perturbed_mixture(gm, sde, sde.horizon_T)

    return kl_quadrature(target_density(marginal, grid), DensityGrid.normalized(grid, sde.prior.pdf(grid)))


def sample_density(density: DensityGrid, n: int, rng: np.random.Generator):
    """Inverse-CDF draws from a grid density."""
    cdf = integrate.cumulative_trapezoid(density.p, density.x, initial=0.0)
    cdf = cdf / cdf[-1]

    # flat stretches of the CDF would make the inverse ambiguous
    keep = np.concatenate([[True], np.diff(cdf) > 0])

    return np.interp(rng.uniform(0.0, 1.0, n), cdf[keep], density.x[keep])


def fit_density_modes(density: DensityGrid, n_components: int = 2, n_samples: int = 20000, seed: int = 0):
    """Fits a ``K``-mode Gaussian mixture to a grid density, sorted by mean."""
    samples = sample_density(density, n_samples, np.random.default_rng(seed))

    return fit_mixture(samples, n_components, seed)
