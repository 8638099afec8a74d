"""theory.py

Generalization bounds as scaling laws and the numerical checks behind them.

- ``thm1_bound`` itemizes the KL bound of a random-feature score model trained
  for time ``tau`` with width ``m`` on ``n`` samples; ``thm2_bound`` adds the
  polynomial dependence on the mode distance of a two-mode mixture
- ``optimal_tau`` minimizes the bound in ``tau`` and ``tau_es`` is the
  ``n^(2/5)`` early-stopping time
- ``mc_gap_estimate`` measures the distance between finite-width nets and a
  wide reference net
- ``lemma1_coverage`` checks the high-probability range of forward paths
- ``loss_decomposition`` splits a trained loss into its empirical and
  population parts

Constants are unknown in general; every constant defaults to 1 and results
are meant as shapes, not certificates.

"""


import logging
import math

from dataclasses import asdict, dataclass

import numpy as np
import pandas as pd

from scipy.optimize import minimize_scalar

from sgl.errors import DomainError
from sgl.objectives import QuadraticForm, sample_space_time
from sgl.score_net import DEFAULT_EMBED_DIM, init_random_feature
from sgl.sde import LinearSde, kernel_std, lambda_weight, r_of_t, sample_transition
from sgl.targets import GaussianMixture


logger = logging.getLogger(__name__)

TAU_UPPER = 1e6
TAU_TOL = 1e-6

MC_REFERENCE_WIDTH = 2**14
MC_MAX_BLOCKS = 8
MC_CHUNK = 256

BOUND_COLUMNS = ("tau", "m", "n", "mu", "stat", "disc", "opt", "approx", "irreducible", "prior_gap", "total")


@dataclass(frozen=True)
class BoundConstants:
    """Multipliers of the bound terms.

    Parameters
    ------------
    c1: float
        multiplier of ``tau^4 / (m n)``.
    c2: float
        multiplier of ``tau^3 / m^2``.
    c3: float
        multiplier of ``1 / tau``.
    c4: float
        multiplier of ``1 / m``.
    c5: float
        the irreducible loss.
    poly_mu_degree: int
        degree of the mode-distance polynomial.
    """

    c1: float = 1.0
    c2: float = 1.0
    c3: float = 1.0
    c4: float = 1.0
    c5: float = 1.0
    poly_mu_degree: int = 6

    def __post_init__(self):
        if min(self.c1, self.c2, self.c3, self.c4, self.c5) < 0:
            raise DomainError(f"Bound constants must be non-negative: {self}")

        if self.poly_mu_degree < 0:
            raise DomainError(f"poly_mu_degree must be non-negative, got {self.poly_mu_degree}")


@dataclass(frozen=True)
class BoundReport:
    """The itemized bound at one ``(tau, m, n, mu)``."""

    tau: float
    m: float
    n: float
    mu: float
    stat: float
    disc: float
    opt: float
    approx: float
    irreducible: float
    prior_gap: float

    @property
    def reducible(self):
        """The terms that vanish as ``m, n, tau`` grow suitably."""
        return self.stat + self.disc + self.opt + self.approx

    @property
    def total(self):
        return self.reducible + self.irreducible + self.prior_gap

    def to_row(self):
        row = asdict(self)
        row["total"] = self.total

        return row


def _check_sizes(tau, m, n):
    if not tau >= 1:
        raise DomainError(f"The bound holds for tau >= 1, got {tau}")

    if not (m >= 1 and n >= 1):
        raise DomainError(f"m and n must be at least 1, got m={m}, n={n}")


def thm1_bound(tau: float, m: float, n: float, consts: BoundConstants = BoundConstants(), prior_gap: float = 0.0):
    """``c1 tau^4/(mn) + c2 tau^3/m^2 + c3/tau + c4/m + c5 + prior_gap``.

    Parameters
    ------------
    tau: float
        the training time, at least 1.
    m: float
        the width; ``math.inf`` drops the finite-width terms.
    n: float
        the sample count; ``math.inf`` drops the sample term.
    consts: BoundConstants
        the multipliers.
    prior_gap: float
        ``KL(p_T || pi)``.

    Returns
    ---------
    BoundReport
        the itemized bound.
    """
    _check_sizes(tau, m, n)

    return BoundReport(
        tau=tau,
        m=m,
        n=n,
        mu=1.0,
        stat=consts.c1 * tau**4 / (m * n),
        disc=consts.c2 * tau**3 / m**2,
        opt=consts.c3 / tau,
        approx=consts.c4 / m,
        irreducible=consts.c5,
        prior_gap=prior_gap,
    )


def thm2_bound(
    tau: float,
    m: float,
    n: float,
    mu: float,
    consts: BoundConstants = BoundConstants(),
    prior_gap: float = 0.0,
):
    """The two-mode bound: the statistical and discretization terms grow by
    ``mu^degree`` and the approximation term by ``mu^2``."""
    _check_sizes(tau, m, n)

    if not mu > 0:
        raise DomainError(f"Mode distance must be positive, got {mu}")

    poly = mu**consts.poly_mu_degree

    return BoundReport(
        tau=tau,
        m=m,
        n=n,
        mu=mu,
        stat=poly * consts.c1 * tau**4 / (m * n),
        disc=poly * consts.c2 * tau**3 / m**2,
        opt=consts.c3 / tau,
        approx=consts.c4 * mu**2 / m,
        irreducible=consts.c5,
        prior_gap=prior_gap,
    )


def optimal_tau(m: float, n: float, consts: BoundConstants = BoundConstants(), upper: float = TAU_UPPER):
    """Minimizes ``thm1_bound`` over ``tau`` in ``[1, upper]``.

    Bounded Brent search on ``log tau``.

    Returns
    ---------
    tuple(float, bool)
        the minimizer and whether it sits on a search boundary.
    """
    def objective(log_tau):
        return thm1_bound(math.exp(log_tau), m, n, consts).total

    result = minimize_scalar(
        objective,
        bounds=(0.0, math.log(upper)),
        method="bounded",
        options={"xatol": TAU_TOL, "maxiter": 1000},
    )

    tau = math.exp(result.x)

    # the bounded search never lands exactly on the ends
    if objective(0.0) <= result.fun:
        tau = 1.0

    elif objective(math.log(upper)) <= result.fun:
        tau = upper

    at_boundary = tau <= 1.0 + TAU_TOL or tau >= upper * (1.0 - TAU_TOL)

    return tau, at_boundary


def tau_es(n: float):
    """The early-stopping time ``n^(2/5)``."""
    if not n >= 1:
        raise DomainError(f"n must be at least 1, got {n}")

    return n**0.4


def bound_table(taus, m: float, n: float, mu_list=(), consts: BoundConstants = BoundConstants(), prior_gap: float = 0.0):
    """Bound reports over a ``tau`` grid as a frame with ``BOUND_COLUMNS``.

    Rows with ``mu`` come from ``thm2_bound``; the first block is
    ``thm1_bound``.
    """
    rows = [thm1_bound(tau, m, n, consts, prior_gap).to_row() for tau in taus]

    for mu in mu_list:
        rows.extend(thm2_bound(tau, m, n, mu, consts, prior_gap).to_row() for tau in taus)

    return pd.DataFrame(rows, columns=BOUND_COLUMNS)


def coefficient_rule(W: np.ndarray, U: np.ndarray):
    """Bounded output weights ``a(w, u) = clamp(w_1, -1, 1)``, shape (1, m)."""
    return np.clip(W[:, :1], -1.0, 1.0).T


@dataclass(frozen=True)
class McGap:
    m: int
    gap: float
    stderr: float


def mc_gap_estimate(
    feature_seed: int,
    sde: LinearSde,
    gm: GaussianMixture,
    m_list,
    m_ref: int = MC_REFERENCE_WIDTH,
    n_mc: int = 4096,
    rng: np.random.Generator = None,
    rule=coefficient_rule,
    weight=lambda_weight,
    d_e: int = DEFAULT_EMBED_DIM,
):
    """Weighted squared distance between width-``m`` nets and a width-``m_ref``
    reference net with the same coefficient rule.

    A width-``m`` net uses a block of ``m`` consecutive reference features;
    up to eight disjoint blocks are averaged. All widths share one set of
    ``(t, x)`` draws.

    Parameters
    ------------
    feature_seed: int
        the seed of the reference features.
    sde: LinearSde
        the forward SDE.
    gm: GaussianMixture
        the target supplying ``x ~ p_t``.
    m_list: list(int)
        the widths, each at most ``m_ref / 16`` or equal to ``m_ref``.
    m_ref: int
        the reference width.
    n_mc: int
        the number of ``(t, x)`` draws.
    rng: numpy.random.Generator
        the generator of the draws.
    rule: callable
        ``(W, U) -> A`` with entries in ``[-1, 1]``.
    weight: callable
        ``(sde, t, d) -> lambda(t)``.
    d_e: int
        the time-embedding dimension.

    Returns
    ---------
    list(McGap)
        one estimate per width, in the order of ``m_list``.
    """
    for m in m_list:
        if m != m_ref and 16 * m > m_ref:
            raise DomainError(f"Reference width {m_ref} must be at least 16 times the width {m}")

    rng = np.random.default_rng(0) if rng is None else rng
    reference = init_random_feature(1, m_ref, d_e, feature_seed, sde.horizon_T)
    reference.A[...] = rule(reference.W, reference.U)

    x, t = sample_space_time(sde, gm, n_mc, rng)
    lam = np.asarray(weight(sde, t, 1), dtype=float)
    terms = {m: np.zeros(n_mc) for m in m_list}

    for start in range(0, n_mc, MC_CHUNK):
        rows = slice(start, start + MC_CHUNK)
        weighted = reference.features(x[rows], t[rows]) * reference.A[0]
        s_ref = weighted.sum(axis=1) / m_ref

        for m in m_list:
            blocks = min(MC_MAX_BLOCKS, m_ref // m)
            s_m = weighted[:, : blocks * m].reshape(len(s_ref), blocks, m).sum(axis=2) / m
            terms[m][rows] = lam[rows] * np.mean((s_m - s_ref[:, None]) ** 2, axis=1)

    return [
        McGap(m=m, gap=float(np.mean(terms[m])), stderr=float(np.std(terms[m], ddof=1) / math.sqrt(n_mc)))
        for m in m_list
    ]


def loglog_slope(x, y):
    """Least-squares slope of ``log y`` against ``log x``."""
    slope, _ = np.polyfit(np.log(np.asarray(x, dtype=float)), np.log(np.asarray(y, dtype=float)), 1)

    return float(slope)


def coverage_constant(sde: LinearSde, n_points: int = 1001):
    """``C_T = max over [0, T]`` of ``r(t)`` and ``r(t) v(t)``."""
    times = np.linspace(0.0, sde.horizon_T, n_points)

    return float(max(np.max(r_of_t(sde, times)), np.max(kernel_std(sde, times))))


def lemma1_coverage(sde: LinearSde, x0_sampler, t: float, delta: float, n_trials: int, rng: np.random.Generator):
    """Fraction of forward draws with
    ``||x(t)||_inf <= C_T (||x0||_inf + sqrt(log(1 / delta^2)))``.

    Parameters
    ------------
    sde: LinearSde
        the forward SDE.
    x0_sampler: callable
        ``(n, rng) -> x0`` with shape (n, d).
    t: float
        the time of the check.
    delta: float
        the failure probability, in ``(0, 1)``.
    n_trials: int
        the number of draws.
    rng: numpy.random.Generator
        the generator owning all draws.

    Returns
    ---------
    float
        the empirical coverage.
    """
    if not 0 < delta < 1:
        raise DomainError(f"delta must lie in (0, 1), got {delta}")

    x0 = np.atleast_2d(np.asarray(x0_sampler(n_trials, rng), dtype=float))
    xt = sample_transition(sde, x0, t, rng)

    bound = coverage_constant(sde) * (np.max(np.abs(x0), axis=1) + math.sqrt(math.log(1.0 / delta**2)))

    return float(np.mean(np.max(np.abs(xt), axis=1) <= bound))


@dataclass(frozen=True)
class LossDecomposition:
    """``loss(A_empirical) = empirical_term + population_term + optimum``.

    ``empirical_term`` is the excess of the data-trained weights over the
    population-trained ones at the same time, ``population_term`` the
    optimization gap of the latter.
    """

    empirical_term: float
    population_term: float
    optimum: float

    @property
    def total(self):
        return self.empirical_term + self.population_term + self.optimum


def loss_decomposition(form: QuadraticForm, A_empirical, A_population):
    optimum = form.loss(form.minimizer())
    population = form.loss(A_population)

    return LossDecomposition(
        empirical_term=form.loss(A_empirical) - population,
        population_term=population - optimum,
        optimum=optimum,
    )


def gd_gap_certificate(A0, A_star, tau: float):
    """``||A0 - A*||_F^2 / (2 tau)``, which bounds the optimality gap of
    gradient descent with steps at most ``1/L`` after time ``tau``."""
    return float(np.sum((np.asarray(A0) - np.asarray(A_star)) ** 2) / (2.0 * tau))


def rkhs_growth_certificate(rkhs0: float, loss0: float, tau: float, m: int):
    """``rkhs(0) + sqrt(2 tau loss(0) / m)`` for a non-negative loss and steps
    at most ``1/L``."""
    return rkhs0 + math.sqrt(2.0 * tau * loss0 / m)
