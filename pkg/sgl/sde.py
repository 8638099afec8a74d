"""sde.py

Linear forward SDEs ``dx = f(t) x dt + g(t) dW`` and everything that follows from
their Gaussian transition kernel ``N(r(t) x0, r(t)^2 v(t)^2 I)``.

- ``LinearSde`` holds the schedule; presets are the Ornstein-Uhlenbeck process
  (``ou``), the constant variance-exploding process (``ve``) and a piecewise
  linear ``custom`` table
- ``r_of_t`` and ``v_of_t`` evaluate the kernel coefficients in closed form for
  presets and by adaptive quadrature otherwise
- ``perturbation_score`` and ``lambda_weight`` give the denoising target and
  its weighting
- ``reverse_sde_sample`` integrates the reverse-time SDE with Euler-Maruyama

"""


import functools
import logging
import math

from dataclasses import dataclass

import numpy as np

from scipy import integrate
from scipy.stats import norm

from sgl.errors import DomainError, NumericalBlowupError, SingularityError


logger = logging.getLogger(__name__)

PRESETS = ("ou", "ve", "custom")

# All time sampling and integration stops at this fraction of the horizon
T_MIN_FRACTION = 1e-3

QUAD_RTOL = 1e-10


@dataclass(frozen=True)
class Prior:
    """The Gaussian prior ``pi`` the reverse dynamics start from.

    Parameters
    ------------
    mean: float
        the mean of every coordinate.
    variance: float
        the variance of every coordinate, strictly positive.
    """

    mean: float = 0.0
    variance: float = 1.0

    def __post_init__(self):
        if not self.variance > 0:
            raise DomainError(f"Prior variance must be positive, got {self.variance}")

    def logpdf(self, x: np.ndarray):
        """Log-density of ``x`` with shape (n, d), summed over coordinates."""
        x = np.atleast_2d(x)

        return norm.logpdf(x, loc=self.mean, scale=math.sqrt(self.variance)).sum(axis=1)

    def pdf(self, x: np.ndarray):
        """Density of scalar points on a 1D grid."""
        return norm.pdf(x, loc=self.mean, scale=math.sqrt(self.variance))

    def sample(self, n: int, d: int, rng: np.random.Generator):
        """Draws ``n`` points in ``R^d``."""
        return self.mean + math.sqrt(self.variance) * rng.standard_normal((n, d))


@dataclass(frozen=True)
class LinearSde:
    """A linear forward SDE on ``[0, horizon_T]``.

    Parameters
    ------------
    preset: str
        one of ``ou`` (f = -1, g = sqrt(2)), ``ve`` (f = 0, g = sigma) or
        ``custom``.
    horizon_T: float
        the time horizon, strictly positive.
    sigma: float
        the constant diffusion of the ``ve`` preset.
    table_t: tuple(float)
        knots of the ``custom`` schedule, increasing from 0 to ``horizon_T``.
    table_f: tuple(float)
        drift values at the knots, interpolated linearly.
    table_g: tuple(float)
        diffusion values at the knots, interpolated linearly.
    """

    preset: str = "ou"
    horizon_T: float = 3.0
    sigma: float = 1.0
    table_t: tuple = ()
    table_f: tuple = ()
    table_g: tuple = ()

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise DomainError(f"Unknown SDE preset '{self.preset}', expected one of {PRESETS}")

        if not self.horizon_T > 0:
            raise DomainError(f"SDE horizon must be positive, got {self.horizon_T}")

        if self.preset == "custom":
            sizes = {len(self.table_t), len(self.table_f), len(self.table_g)}

            if len(sizes) != 1 or len(self.table_t) < 2:
                raise DomainError("Custom SDE tables must share one length of at least 2")

            if self.table_t[0] > 0 or self.table_t[-1] < self.horizon_T:
                raise DomainError("Custom SDE tables must cover [0, horizon_T]")

            if np.any(np.diff(self.table_t) <= 0):
                raise DomainError("Custom SDE knots must be strictly increasing")

    @property
    def t_min(self):
        """The smallest time at which scores and weights are evaluated."""
        return T_MIN_FRACTION * self.horizon_T

    @property
    def prior(self):
        """The prior ``pi``: standard normal for ``ou``, ``N(0, r^2 v^2)`` at
        the horizon otherwise."""
        if self.preset == "ou":
            return Prior(mean=0.0, variance=1.0)

        rv = r_of_t(self, self.horizon_T) * v_of_t(self, self.horizon_T)

        return Prior(mean=0.0, variance=float(rv**2))

    def drift(self, t):
        """The drift coefficient ``f(t)``."""
        if self.preset == "ou":
            return np.full_like(np.asarray(t, dtype=float), -1.0)

        if self.preset == "ve":
            return np.zeros_like(np.asarray(t, dtype=float))

        return np.interp(t, self.table_t, self.table_f)

    def diffusion(self, t):
        """The diffusion coefficient ``g(t)``."""
        if self.preset == "ou":
            return np.full_like(np.asarray(t, dtype=float), math.sqrt(2.0))

        if self.preset == "ve":
            return np.full_like(np.asarray(t, dtype=float), self.sigma)

        return np.interp(t, self.table_t, self.table_g)


def ou(horizon_T: float = 3.0):
    """The Ornstein-Uhlenbeck preset, the default of every experiment."""
    return LinearSde(preset="ou", horizon_T=horizon_T)


def ve(horizon_T: float = 3.0, sigma: float = 1.0):
    """The constant variance-exploding preset."""
    return LinearSde(preset="ve", horizon_T=horizon_T, sigma=sigma)


def check_time(sde: LinearSde, t, lower: float = 0.0):
    """Raises a ``DomainError`` if any ``t`` is outside ``[lower, T]``.

    Parameters
    ------------
    sde: LinearSde
        the SDE supplying the horizon.
    t: float or numpy.ndarray
        the times to check.
    lower: float
        the smallest admissible time.

    Returns
    ---------
    numpy.ndarray
        ``t`` as a float array.
    """
    t = np.asarray(t, dtype=float)
    slack = 1e-12 * sde.horizon_T

    if np.any(~np.isfinite(t)) or np.any(t < lower - slack) or np.any(t > sde.horizon_T + slack):
        raise DomainError(f"Time outside [{lower}, {sde.horizon_T}]: {t}")

    return np.clip(t, 0.0, sde.horizon_T)


@functools.lru_cache(maxsize=65536)
def _custom_log_r(sde: LinearSde, t: float):
    value, _ = integrate.quad(sde.drift, 0.0, t, epsrel=QUAD_RTOL, limit=200)

    return value


@functools.lru_cache(maxsize=65536)
def _custom_v2(sde: LinearSde, t: float):
    def integrand(zeta):
        return sde.diffusion(zeta) ** 2 * math.exp(-2.0 * _custom_log_r(sde, float(zeta)))

    value, _ = integrate.quad(integrand, 0.0, t, epsrel=QUAD_RTOL, limit=200)

    return value


def r_of_t(sde: LinearSde, t):
    """The kernel mean factor ``r(t) = exp(int_0^t f)``.

    Parameters
    ------------
    sde: LinearSde
        the forward SDE.
    t: float or numpy.ndarray
        times in ``[0, T]``.

    Returns
    ---------
    float or numpy.ndarray
        ``r(t)``, same shape as ``t``.
    """
    t = check_time(sde, t)

    if sde.preset == "ou":
        return np.exp(-t)

    if sde.preset == "ve":
        return np.ones_like(t)

    log_r = np.vectorize(lambda s: _custom_log_r(sde, float(s)))(t)

    return np.exp(log_r)


def v_of_t(sde: LinearSde, t):
    """The kernel scale ``v(t) = sqrt(int_0^t g^2 / r^2)``.

    Parameters
    ------------
    sde: LinearSde
        the forward SDE.
    t: float or numpy.ndarray
        times in ``[0, T]``.

    Returns
    ---------
    float or numpy.ndarray
        ``v(t) >= 0``, non-decreasing in ``t``.
    """
    t = check_time(sde, t)

    if sde.preset == "ou":
        return np.sqrt(np.expm1(2.0 * t))

    if sde.preset == "ve":
        return sde.sigma * np.sqrt(t)

    v2 = np.vectorize(lambda s: _custom_v2(sde, float(s)))(t)

    return np.sqrt(np.maximum(v2, 0.0))


def kernel_std(sde: LinearSde, t):
    """The transition standard deviation ``r(t) v(t)``."""
    if sde.preset == "ou":
        t = check_time(sde, t)

        return np.sqrt(-np.expm1(-2.0 * t))

    return r_of_t(sde, t) * v_of_t(sde, t)


def sample_transition(sde: LinearSde, x0: np.ndarray, t, rng: np.random.Generator):
    """Draws ``x(t) = r x0 + r v z`` from the transition kernel.

    Parameters
    ------------
    sde: LinearSde
        the forward SDE.
    x0: numpy.ndarray
        starting points with shape (n, d).
    t: float or numpy.ndarray
        one time, or one time per row of ``x0``.
    rng: numpy.random.Generator
        the seeded generator owning the draws.

    Returns
    ---------
    numpy.ndarray
        the perturbed points, shape (n, d).
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    t = check_time(sde, t)

    r = np.reshape(r_of_t(sde, t), (-1, 1))
    std = np.reshape(kernel_std(sde, t), (-1, 1))

    return r * x0 + std * rng.standard_normal(x0.shape)


def perturbation_score(sde: LinearSde, x0: np.ndarray, xt: np.ndarray, t):
    """The denoising target ``-(xt - r x0) / (r^2 v^2)``.

    Parameters
    ------------
    sde: LinearSde
        the forward SDE.
    x0: numpy.ndarray
        clean points, shape (n, d).
    xt: numpy.ndarray
        perturbed points, shape (n, d).
    t: float or numpy.ndarray
        times, each at least ``t_min``.

    Returns
    ---------
    numpy.ndarray
        the gradient of ``log p_{t|0}(xt | x0)``, shape (n, d).
    """
    t = np.asarray(t, dtype=float)

    if np.any(t < sde.t_min * (1.0 - 1e-12)):
        raise SingularityError(
            f"Denoising target requested below t_min = {sde.t_min}: min t = {t.min()}"
        )

    t = check_time(sde, t)
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    xt = np.atleast_2d(np.asarray(xt, dtype=float))

    r = np.reshape(r_of_t(sde, t), (-1, 1))
    var = np.reshape(kernel_std(sde, t), (-1, 1)) ** 2

    return -(xt - r * x0) / var


def lambda_weight(sde: LinearSde, t, d: int = 1):
    """The score-norm weighting ``lambda(t) = r(t) v(t) / sqrt(d)``.

    This is ``1 / sqrt(E ||grad log p_{t|0}||^2)`` with unit proportionality
    constant.
    """
    return kernel_std(sde, t) / math.sqrt(d)


def likelihood_weight(sde: LinearSde, t, d: int = 1):
    """The likelihood weighting ``g(t)^2`` that turns the score-matching loss
    into a KL upper bound. ``d`` is accepted for signature parity."""
    t = check_time(sde, t)

    return sde.diffusion(t) ** 2


WEIGHTINGS = {
    "score-norm": lambda_weight,
    "likelihood": likelihood_weight,
}


def get_weighting(name: str):
    """Looks up a weighting function ``(sde, t, d) -> lambda`` by name."""
    try:
        return WEIGHTINGS[name]

    except KeyError as error:
        raise DomainError(
            f"Unknown weighting '{name}', expected one of {sorted(WEIGHTINGS)}"
        ) from error


def time_grid(sde: LinearSde, n_steps: int):
    """Uniform grid of ``n_steps + 1`` times from ``t_min`` to ``T``."""
    return np.linspace(sde.t_min, sde.horizon_T, n_steps + 1)


def reverse_sde_sample(
    sde: LinearSde,
    score_fn,
    n_steps: int,
    n_samples: int,
    rng: np.random.Generator,
    d: int = 1,
):
    """Integrates the reverse-time SDE from ``T`` down to ``t_min``.

    Euler-Maruyama steps of
    ``dx = [f(t) x - g(t)^2 s(x, t)] dt + g(t) dW`` with negative ``dt``,
    started from the prior.

    Parameters
    ------------
    sde: LinearSde
        the forward SDE.
    score_fn: callable
        ``(x, t) -> score`` with ``x`` of shape (n, d); score models are
        callable.
    n_steps: int
        number of Euler-Maruyama steps, at least 1.
    n_samples: int
        number of samples.
    rng: numpy.random.Generator
        the seeded generator owning the prior and Brownian draws.
    d: int
        the dimension.

    Returns
    ---------
    numpy.ndarray
        samples at ``t_min``, shape (n_samples, d).
    """
    if n_steps < 1:
        raise DomainError(f"n_steps must be at least 1, got {n_steps}")

    times = time_grid(sde, n_steps)[::-1]
    x = sde.prior.sample(n_samples, d, rng)

    for t, t_next in zip(times[:-1], times[1:]):
        dt = t - t_next
        score = np.asarray(score_fn(x, t))

        if not np.all(np.isfinite(score)):
            bad = np.argwhere(~np.isfinite(score))[0][0]

            raise NumericalBlowupError(
                f"Non-finite score at x = {x[bad]}, t = {t:.6g}", x=x[bad], t=float(t)
            )

        drift = sde.drift(t) * x - sde.diffusion(t) ** 2 * score
        x = x - drift * dt + sde.diffusion(t) * math.sqrt(dt) * rng.standard_normal(x.shape)

    logger.debug("Reverse SDE sampled %d points with %d steps", n_samples, n_steps)

    return x
