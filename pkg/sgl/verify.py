"""verify.py

Numerical checks of the library's invariants, run as the ``verify``
experiment.

Every property returns a ``Measurement``: the measured value, the bound it is
held to and whether it passed. The report prints one line per property and
is written to ``verify_report.csv``. A property that raises counts as failed.

- analytic identities of the forward SDE and the weights
- exact gradients of both score networks against central differences
- density recovery and likelihoods against the analytic mixture
- the score-matching inequalities and the bound shapes
- reproducibility of configuration files and training runs

"""


import logging
import math
import os

from dataclasses import dataclass

import numpy as np
import pandas as pd

from sgl.config import ExperimentConfig, parse_config, run_seed, serialize_config
from sgl.density_metrics import (
    density_from_score,
    kl_prior_gap,
    kl_quadrature,
    model_kl,
    ode_loglik,
    target_density,
)
from sgl.errors import SglError
from sgl.manifest import MANIFEST_NAME, RunManifest
from sgl.objectives import dsm_terms, quadratic_coeffs, sm_population
from sgl.score_net import dsm_batch, grad_dsm, grad_on_batch, init_random_feature, init_swish, rkhs_norm
from sgl.sde import lambda_weight, likelihood_weight, ou, r_of_t, v_of_t
from sgl.targets import GaussianMixture, MixtureScore, draw_mixture, mixture_density, perturbed_mixture, sample_mixture, symmetric_mixture
from sgl.theory import (
    BoundConstants,
    gd_gap_certificate,
    lemma1_coverage,
    loglog_slope,
    mc_gap_estimate,
    optimal_tau,
    rkhs_growth_certificate,
    thm1_bound,
)
from sgl.training import TrainConfig, early_stop_detect, population_flow, train


logger = logging.getLogger(__name__)

REPORT_NAME = "verify_report.csv"

REPORT_COLUMNS = ("name", "measured", "bound", "passed")


@dataclass(frozen=True)
class Measurement:
    measured: float
    bound: float
    passed: bool


def at_most(measured: float, bound: float):
    return Measurement(float(measured), float(bound), bool(measured <= bound))


def at_least(measured: float, bound: float):
    return Measurement(float(measured), float(bound), bool(measured >= bound))


@dataclass(frozen=True)
class VerifyContext:
    """Shared settings of one verification run.

    ``score_sign`` multiplies the outputs of the models checked by the
    score-matching inequality; ``-1`` plants a sign error the check must
    catch.
    """

    config: ExperimentConfig
    score_sign: float = 1.0

    def rng(self, index: int):
        return np.random.default_rng(run_seed(self.config.experiment.seed, index))


@dataclass(frozen=True)
class Property:
    name: str
    check: object
    slow: bool = False


PROPERTIES = list()


def register(name: str, slow: bool = False):
    def decorator(check):
        PROPERTIES.append(Property(name, check, slow))

        return check

    return decorator


class SignedScore:
    """A score model with its output multiplied by ``sign``."""

    def __init__(self, model, sign: float):
        self.model = model
        self.sign = sign

    def forward(self, x, t):
        return self.sign * self.model.forward(x, t)

    def forward_dx(self, x, t):
        return self.sign * self.model.forward_dx(x, t)

    def __call__(self, x, t):
        return self.forward(x, t)


def central_difference(objective, array: np.ndarray, eps: float = 1e-6):
    """Central-difference gradient of ``objective()`` with respect to the
    entries of ``array``, which is perturbed in place and restored."""
    grad = np.zeros_like(array)

    for index in np.ndindex(array.shape):
        original = array[index]

        array[index] = original + eps
        plus = objective()

        array[index] = original - eps
        minus = objective()

        array[index] = original
        grad[index] = (plus - minus) / (2.0 * eps)

    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray):
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-30)

    return float(np.linalg.norm(analytic - numeric) / scale)


def _bimodal():
    return symmetric_mixture(3.0), ou(3.0)


@register("ou_kernel_closed_form")
def check_ou_kernel(ctx: VerifyContext):
    sde = ou(3.0)
    t = np.linspace(0.0, 3.0, 1001)
    error = np.max(np.abs(r_of_t(sde, t) * v_of_t(sde, t) - np.sqrt(1.0 - np.exp(-2.0 * t))))

    return at_most(error, 1e-12)


@register("lambda_normalization")
def check_lambda_normalization(ctx: VerifyContext):
    """``lambda^2 E||target||^2 = 1`` for the score-norm weights."""
    gm, sde = _bimodal()
    rng = ctx.rng(1)
    n = 100000

    x0 = draw_mixture(gm, n, rng)[:, None]
    t = rng.uniform(sde.t_min, sde.horizon_T, n)
    batch = dsm_batch(sde, x0, t, int(rng.integers(2**63)))
    values = lambda_weight(sde, t, 1) ** 2 * batch.target[:, 0] ** 2

    stderr = np.std(values, ddof=1) / math.sqrt(n)

    return at_most(abs(np.mean(values) - 1.0), 4.0 * stderr)


@register("random_feature_linearity")
def check_linearity(ctx: VerifyContext):
    rng = ctx.rng(2)
    model = init_random_feature(1, 16, seed=3)
    x, t = rng.normal(size=(50, 1)), rng.uniform(0.01, 3.0, 50)

    A1, A2 = rng.normal(size=(1, 16)), rng.normal(size=(1, 16))
    values = list()

    for A in (A1, A2, A1 + A2):
        model.A[...] = A
        values.append(model.forward(x, t))

    return at_most(np.max(np.abs(values[2] - values[0] - values[1])), 1e-12)


@register("relu_homogeneity")
def check_homogeneity(ctx: VerifyContext):
    """Scaling one feature's inner weights by ``c > 0`` and its outer weight by
    ``1/c`` leaves the output unchanged."""
    rng = ctx.rng(3)
    model = init_random_feature(1, 16, seed=4)
    model.A[...] = rng.normal(size=(1, 16))
    x, t = rng.normal(size=(50, 1)), rng.uniform(0.01, 3.0, 50)

    before = model.forward(x, t)
    model.W[5] *= 2.5
    model.U[5] *= 2.5
    model.A[:, 5] /= 2.5

    return at_most(np.max(np.abs(model.forward(x, t) - before)), 1e-12)


@register("embedding_bounded")
def check_embedding(ctx: VerifyContext):
    model = init_random_feature(1, 4, seed=0, horizon_T=3.0)
    values = model.embedding(np.linspace(0.0, 3.0, 10001))

    return at_most(np.max(np.abs(values)), 1.0)


@register("random_feature_gradient")
def check_random_feature_gradient(ctx: VerifyContext):
    gm, sde = _bimodal()
    rng = ctx.rng(4)
    model = init_random_feature(1, 16, seed=5)
    model.A[...] = rng.normal(size=(1, 16))

    x0 = draw_mixture(gm, 64, rng)[:, None]
    t = rng.uniform(sde.t_min, sde.horizon_T, 64)
    batch = dsm_batch(sde, x0, t, 7)

    grad, _ = grad_dsm(model, sde, x0, t, lambda_weight, 7)
    numeric = central_difference(lambda: grad_on_batch(model, sde, batch, lambda_weight)[1], model.A, 1e-4)

    return at_most(relative_error(grad["A"], numeric), 1e-5)


@register("swish_gradient")
def check_swish_gradient(ctx: VerifyContext):
    gm, sde = _bimodal()
    rng = ctx.rng(5)
    model = init_swish(1, 16, seed=6)

    x0 = draw_mixture(gm, 32, rng)[:, None]
    t = rng.uniform(sde.t_min, sde.horizon_T, 32)
    batch = dsm_batch(sde, x0, t, 8)
    grad, _ = grad_on_batch(model, sde, batch, lambda_weight)

    errors = [
        relative_error(grad[name], central_difference(lambda: grad_on_batch(model, sde, batch, lambda_weight)[1], array, 1e-5))
        for name, array in model.trainable().items()
    ]

    return at_most(max(errors), 1e-4)


@register("swish_jacobian")
def check_swish_jacobian(ctx: VerifyContext):
    rng = ctx.rng(6)
    model = init_swish(1, 16, seed=7)
    x, t = rng.normal(size=(100, 1)), rng.uniform(0.01, 3.0, 100)

    eps = 1e-5
    numeric = (model.forward(x + eps, t) - model.forward(x - eps, t)) / (2.0 * eps)

    return at_most(relative_error(model.forward_dx(x, t)[:, :, 0], numeric), 1e-5)


@register("density_from_mixture_score")
def check_density_recovery(ctx: VerifyContext):
    gm = symmetric_mixture(3.0)
    grid = np.linspace(-13.0, 13.0, 32768)

    recovered = density_from_score(lambda x: MixtureScore(gm).forward(x[:, None], 0.0)[:, 0], grid)
    exact = mixture_density(gm, grid)

    return at_most(np.sum(np.abs(recovered.p - exact)) * recovered.h, 1e-6)


@register("gaussian_kl_closed_form")
def check_gaussian_kl(ctx: VerifyContext):
    grid = np.linspace(-20.0, 20.0, 8192)
    standard = target_density(symmetric_mixture(0.0), grid)

    shifted = target_density(GaussianMixture((1.0,), (1.0,), (1.0,)), grid)
    wide = target_density(GaussianMixture((1.0,), (0.0,), (4.0,)), grid)

    errors = (
        abs(kl_quadrature(standard, shifted) - 0.5),
        abs(kl_quadrature(standard, wide) - (0.5 * math.log(4.0) + 0.125 - 0.5)),
    )

    return at_most(max(errors), 1e-6)


@register("ode_loglik_exact_score")
def check_ode_loglik(ctx: VerifyContext):
    gm, sde = symmetric_mixture(3.0), ou(8.0)
    x = np.linspace(-4.0, 4.0, 10)[:, None]

    loglik = ode_loglik(MixtureScore(gm, sde), sde, x)
    exact = np.log(mixture_density(perturbed_mixture(gm, sde, sde.t_min), x[:, 0]))

    return at_most(np.max(np.abs(loglik - exact)), 1e-3)


def _random_pair(rng, m: int = 16):
    models = list()

    for _ in range(2):
        model = init_random_feature(1, m, seed=11)
        model.A[...] = rng.normal(scale=5.0, size=(1, m))
        models.append(model)

    return models


@register("dsm_sm_offset")
def check_dsm_sm_offset(ctx: VerifyContext):
    """Denoising and population losses differ by a constant in the model."""
    gm, sde = _bimodal()
    rng = ctx.rng(8)
    first, second = _random_pair(rng)

    n = 100000
    x0 = draw_mixture(gm, n, rng)[:, None]
    t = rng.uniform(sde.t_min, sde.horizon_T, n)
    difference = dsm_terms(first, sde, x0, t, noise_seed=9) - dsm_terms(second, sde, x0, t, noise_seed=9)

    population = sm_population(first, sde, gm, 256).value - sm_population(second, sde, gm, 256).value
    stderr = np.std(difference, ddof=1) / math.sqrt(n)

    return at_most(abs(np.mean(difference) - population), 4.0 * stderr)


@register("sm_convexity")
def check_convexity(ctx: VerifyContext):
    gm, sde = _bimodal()
    first, second = _random_pair(ctx.rng(9))

    midpoint = first.copy()
    midpoint.A[...] = 0.5 * (first.A + second.A)

    values = [sm_population(model, sde, gm).value for model in (first, second, midpoint)]

    return at_most(values[2] - 0.5 * (values[0] + values[1]), 1e-9)


@register("score_matching_bounds_kl")
def check_kl_below_score_matching(ctx: VerifyContext):
    """``KL(p0 || p_model) <= SM_{g^2} + KL(p_T || pi)`` on random-feature nets
    trained for random times on the population loss."""
    gm, sde = _bimodal()
    rng = ctx.rng(10)
    prior_gap = kl_prior_gap(gm, sde)
    excess = list()

    for index in range(20):
        m = (8, 16, 32, 64)[index % 4]
        model = init_random_feature(1, m, seed=100 + index)
        form = quadratic_coeffs(model, sde, gm, 20000, rng, likelihood_weight, keep_draws=False)

        tau = 0.0 if index == 0 else float(rng.uniform(0.0, 200.0))
        model.A[...] = population_flow(form, [tau], model.A)[0]
        scored = SignedScore(model, ctx.score_sign)

        kl = model_kl(scored, sde, gm)
        rhs = sm_population(scored, sde, gm, weight=likelihood_weight).value + prior_gap
        excess.append(kl - rhs)

    return at_most(max(excess), 1e-3)


@register("lemma1_coverage")
def check_forward_coverage(ctx: VerifyContext):
    coverage = lemma1_coverage(ou(3.0), lambda n, rng: np.zeros((n, 1)), 1.0, 0.05, 100000, ctx.rng(11))

    return at_least(coverage, 0.95)


@register("prior_gap_decreasing")
def check_prior_gap(ctx: VerifyContext):
    gm = GaussianMixture((1.0,), (3.0,), (1.0,))
    gaps = [kl_prior_gap(gm, ou(horizon_T)) for horizon_T in (1.0, 2.0, 4.0, 8.0)]

    return at_most(max(np.diff(gaps)), 0.0)


@register("prior_gap_closed_form")
def check_prior_gap_closed_form(ctx: VerifyContext):
    """A unit Gaussian at 3 drifts to mean ``3 e^-T`` with unit variance."""
    gm = GaussianMixture((1.0,), (3.0,), (1.0,))
    closed_form = (3.0 * math.exp(-3.0)) ** 2 / 2.0

    return at_most(abs(kl_prior_gap(gm, ou(3.0)) - closed_form), 1e-6)


@register("thm1_scaling")
def check_thm1_scaling(ctx: VerifyContext):
    """The reducible bound at ``tau ~ n^(2/5)`` falls like ``n^(-2/5)``."""
    consts = BoundConstants()
    scaled = [thm1_bound(n**0.4, n, n, consts).reducible * n**0.4 for n in (1e2, 1e3, 1e4, 1e5)]

    return at_most(max(scaled) / min(scaled), 2.0)


@register("optimal_tau_scaling")
def check_optimal_tau(ctx: VerifyContext):
    taus = {n: optimal_tau(n, n)[0] for n in (1e2, 1e3, 1e4, 1e5)}
    deviations = [abs(taus[n] / (taus[1e2] * (n / 1e2) ** 0.4) - 1.0) for n in taus]

    return at_most(max(deviations), 0.10)


@register("thm1_convexity")
def check_thm1_convexity(ctx: VerifyContext):
    taus = np.linspace(1.0, 100.0, 1000)
    totals = np.array([thm1_bound(tau, 1000, 1000).total for tau in taus])
    curvature = np.diff(totals, 2)

    return at_least(np.min(curvature), -1e-9 * np.max(np.abs(totals)))


@register("mc_gap_slope")
def check_mc_gap(ctx: VerifyContext):
    gm, sde = _bimodal()
    widths = [2**k for k in range(4, 11)]
    gaps = mc_gap_estimate(0, sde, gm, widths, 2**14, 2048, ctx.rng(12))

    slope = loglog_slope([gap.m for gap in gaps], [gap.gap for gap in gaps])

    return Measurement(slope, -1.0, bool(-1.3 <= slope <= -0.7))


def _small_form(ctx: VerifyContext, index: int):
    gm, sde = _bimodal()
    model = init_random_feature(1, 4, seed=20)
    form = quadratic_coeffs(model, sde, gm, 20000, ctx.rng(index), likelihood_weight, keep_draws=False)

    return model, form


@register("rkhs_growth_exponent")
def check_rkhs_exponent(ctx: VerifyContext):
    model, form = _small_form(ctx, 13)
    taus = np.geomspace(10.0, 1e5, 40)
    norms = [math.sqrt(np.sum(A**2) / form.m) for A in population_flow(form, taus, model.A)]

    return at_most(loglog_slope(taus, norms), 0.6)


@register("optimality_gap_exponent")
def check_gap_exponent(ctx: VerifyContext):
    model, form = _small_form(ctx, 14)
    taus = np.geomspace(10.0, 1e3, 30)
    A_star = form.minimizer()
    gaps = [form.gap(A, A_star) for A in population_flow(form, taus, model.A)]

    return at_most(loglog_slope(taus, gaps), -0.9)


@register("gradient_descent_certificates")
def check_certificates(ctx: VerifyContext):
    """Gradient descent with step ``1/L`` stays under both the optimality-gap
    and the norm-growth certificates, and never raises the loss."""
    model, form = _small_form(ctx, 15)
    step = 1.0 / form.lipschitz()
    A_star = form.minimizer()

    A = model.A.copy()
    A0, rkhs0, loss0 = A.copy(), rkhs_norm(model), form.loss(A)
    previous = loss0
    worst = -math.inf

    for k in range(1, 2001):
        A = A - step * form.gradient(A)
        loss = form.loss(A)
        tau = k * step
        norm = math.sqrt(np.sum(A**2) / form.m)

        worst = max(
            worst,
            form.gap(A, A_star) - gd_gap_certificate(A0, A_star, tau),
            norm - rkhs_growth_certificate(rkhs0, loss0, tau, form.m),
            loss - previous - 1e-12 * abs(previous),
        )
        previous = loss

    return at_most(worst, 1e-10)


@register("frozen_objective_descent")
def check_descent(ctx: VerifyContext):
    """Full-batch steps of ``1/L`` on the frozen denoising objective never
    raise it."""
    gm, sde = _bimodal()
    dataset = sample_mixture(gm, 200, 31)
    model = init_random_feature(1, 16, seed=32)

    streams = np.random.SeedSequence(33).spawn(2)
    frozen_rng = np.random.default_rng(streams[0])
    t = frozen_rng.uniform(sde.t_min, sde.horizon_T, dataset.n)
    batch = dsm_batch(sde, dataset.samples, t, int(frozen_rng.integers(2**63)))

    lam = lambda_weight(sde, batch.t, 1)
    phi = model.features(batch.xt, batch.t)
    hessian = 2.0 * (phi * lam[:, None]).T @ phi / (dataset.n * model.m**2)
    step = 1.0 / float(np.linalg.eigvalsh(hessian)[-1])

    config = TrainConfig(learning_rate=step, epochs=50, n=200, eval_every=1, noise_seed=33, kl_eval=False, sm_eval=False)
    trajectory = train(model, sde, dataset, config)
    losses = trajectory.column("dsm_loss")

    return at_most(np.max(np.diff(losses) - 1e-12 * np.abs(losses[:-1])), 0.0)


@register("config_round_trip")
def check_config(ctx: VerifyContext):
    text = serialize_config(ctx.config)

    return Measurement(0.0, 0.0, parse_config(text) == ctx.config and serialize_config(parse_config(text)) == text)


@register("training_reproducible")
def check_reproducible(ctx: VerifyContext):
    gm, sde = _bimodal()
    frames = list()

    for _ in range(2):
        dataset = sample_mixture(gm, 100, 41)
        model = init_swish(1, 8, seed=42)
        config = TrainConfig(optimizer="adam", learning_rate=1e-3, epochs=20, n=100, batch_size=32, eval_every=5, kl_eval=False, sm_eval=False)
        frames.append(train(model, sde, dataset, config).to_frame())

    same = frames[0].equals(frames[1])

    return Measurement(0.0 if same else 1.0, 0.0, same)


U_SHAPE_SEEDS = 3
U_SHAPE_BAND = (200, 3000)
U_SHAPE_EPOCHS = 4000


def u_shape_config(master: int, index: int):
    """SGD settings of the bimodal U-shape run ``index``."""
    return TrainConfig(
        optimizer="sgd",
        learning_rate=0.5,
        epochs=U_SHAPE_EPOCHS,
        batch_size=128,
        n=1000,
        eval_every=10,
        data_seed=run_seed(master, index, 0),
        noise_seed=run_seed(master, index, 1),
        init_seed=run_seed(master, index, 2),
        sm_eval=False,
    )


def u_shape_passes(kl, epochs, smoothing_window: int, patience: int):
    """Whether a KL curve bottoms out inside ``U_SHAPE_BAND`` and sits at
    least 10% above its smoothed minimum at four times that epoch."""
    epochs = np.asarray(epochs)
    stop = early_stop_detect(kl, smoothing_window, patience, epochs)
    later = np.flatnonzero(epochs >= 4 * stop.epoch)

    if not stop.turning or not len(later):
        return False

    if not U_SHAPE_BAND[0] <= stop.epoch <= U_SHAPE_BAND[1]:
        return False

    return bool(np.asarray(kl)[later[0]] >= 1.1 * stop.smoothed_min)


@register("kl_turns_before_rising", slow=True)
def check_u_shape(ctx: VerifyContext):
    """Swish nets trained by SGD on the bimodal target turn and rise again
    in at least two of three seeds."""
    gm, sde = _bimodal()
    experiment = ctx.config.experiment
    passes = 0

    for index in range(U_SHAPE_SEEDS):
        config = u_shape_config(experiment.seed, index)
        dataset = sample_mixture(gm, config.n, config.data_seed)
        model = init_swish(1, 128, 4, config.init_seed, sde.horizon_T, max(1.0, float(np.std(dataset.samples))))
        trajectory = train(model, sde, dataset, config, gm)

        passed = u_shape_passes(trajectory.column("kl"), trajectory.epochs, experiment.smoothing_window, experiment.patience)
        logger.debug("U-shape seed %d %s", index, "rises" if passed else "does not rise")
        passes += passed

    return at_least(passes, 2)


def run_properties(config: ExperimentConfig, names=None, score_sign: float = 1.0):
    """Runs the registered properties, all of them or those in ``names``.

    Parameters
    ------------
    config: ExperimentConfig
        supplies the master seed and the slow-property switch.
    names: list(str)
        the properties to run; ``None`` runs every fast property, and the slow
        ones too when ``experiment.include_slow`` is set.
    score_sign: float
        passed to the score-matching inequality check.

    Returns
    ---------
    pandas.DataFrame
        one row per property with the columns ``name, measured, bound, passed``.
    """
    ctx = VerifyContext(config, score_sign)
    known = {prop.name for prop in PROPERTIES}

    if names is not None:
        unknown = sorted(set(names) - known)

        if unknown:
            raise SglError(f"Unknown properties: {unknown}")

    rows = list()

    for prop in PROPERTIES:
        if names is not None and prop.name not in names:
            continue

        if names is None and prop.slow and not config.experiment.include_slow:
            continue

        try:
            result = prop.check(ctx)

        except Exception as error:  # pylint: disable=broad-except
            logger.error("%s raised %s: %s", prop.name, type(error).__name__, error)
            result = Measurement(math.nan, math.nan, False)

        logger.info(
            "%s %s measured=%.6g bound=%.6g",
            "PASS" if result.passed else "FAIL",
            prop.name,
            result.measured,
            result.bound,
        )
        rows.append({"name": prop.name, "measured": result.measured, "bound": result.bound, "passed": result.passed})

    return pd.DataFrame(rows, columns=list(REPORT_COLUMNS))


def run_verify(config: ExperimentConfig):
    """Runs every property and writes ``verify_report.csv`` and a manifest."""
    from sgl.experiments import ExperimentResult, write_csv

    os.makedirs(config.out_dir, exist_ok=True)
    manifest = RunManifest(config=config.to_dict())

    report = run_properties(config)
    manifest.add(config.out_dir, write_csv(report, os.path.join(config.out_dir, REPORT_NAME)))
    manifest.write(config.out_dir)

    passed = bool(report["passed"].all())
    logger.info("%d of %d properties passed", int(report["passed"].sum()), len(report))

    return ExperimentResult(config.out_dir, manifest, {"report": report}, passed)


def compare_runs(dir_a: str, dir_b: str):
    """Lists the artifacts whose bytes differ between two run directories.

    Both directories need a manifest; artifacts listed by only one of them
    count as different. The manifests themselves are not compared, since
    they hold wall-clock times.
    """
    manifests = RunManifest.load(dir_a), RunManifest.load(dir_b)
    names = sorted(set(manifests[0].artifacts) | set(manifests[1].artifacts))
    different = list()

    for name in names:
        if name == MANIFEST_NAME:
            continue

        paths = [os.path.join(directory, name) for directory in (dir_a, dir_b)]

        if not all(os.path.isfile(path) for path in paths):
            different.append(name)
            continue

        with open(paths[0], "rb") as first, open(paths[1], "rb") as second:
            if first.read() != second.read():
                different.append(name)

    return different
