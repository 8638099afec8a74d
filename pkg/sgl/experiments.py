"""experiments.py

The experiments behind the command line. Each one reads an
``ExperimentConfig``, writes CSV tables, SVG charts and checkpoints into its
output directory and finishes with a ``manifest.json``.

- ``kl-dynamics`` trains one model per run and tracks the KL to the target
- ``modes-shift`` repeats the training for several mode distances
- ``capacity-sweep`` repeats it for several widths
- ``bounds`` tabulates the bound shapes over training time
- ``mc-gap`` measures the finite-width gap against a wide reference net

Sweeps run their trainings in a process pool; every run writes into its own
subdirectory and draws from its own seed streams.

"""


import dataclasses
import logging
import math
import os

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from sgl.config import ExperimentConfig, run_seed
from sgl.density_metrics import (
    fit_density_modes,
    kl_prior_gap,
    model_density,
    ode_sample,
    target_density,
)
from sgl.errors import DivergenceError
from sgl.manifest import RunManifest
from sgl.objectives import least_squares_fit, quadratic_coeffs
from sgl.plotting import emit_density_plot, emit_plot
from sgl.score_net import init_random_feature, init_swish, save_checkpoint
from sgl.sde import get_weighting, reverse_sde_sample
from sgl.targets import sample_mixture, standard_grid
from sgl.theory import bound_table, loglog_slope, mc_gap_estimate, optimal_tau, tau_es
from sgl.training import early_stop_detect, train


logger = logging.getLogger(__name__)

DATA_STREAM, NOISE_STREAM, INIT_STREAM, SAMPLE_STREAM = range(4)

SAMPLER_STEPS = 500


@dataclass
class ExperimentResult:
    """What an experiment wrote and its summary tables by name."""

    out_dir: str
    manifest: RunManifest
    tables: dict = field(default_factory=dict)
    passed: bool = True


@dataclass(frozen=True)
class TrainJob:
    """One training run of a sweep.

    ``mu`` replaces the target's mode distance and ``width`` the model width
    when given.
    """

    config: ExperimentConfig
    label: str
    index: int
    mu: float = None
    width: int = None
    save_samples: bool = False


def write_csv(frame: pd.DataFrame, filepath: str):
    frame.to_csv(filepath, index=False, float_format="%.10g")

    logger.info("Successfully wrote table output: %s", filepath)

    return filepath


def build_model(config: ExperimentConfig, sde, gm, dataset, seed: int, width: int = None):
    """Initializes the configured score model for one run."""
    width = config.model.width if width is None else width

    if config.model.kind == "random_feature":
        model = init_random_feature(1, width, config.model.d_e, seed, sde.horizon_T)

        if config.model.init == "least-squares":
            form = quadratic_coeffs(
                model,
                sde,
                gm,
                config.model.n_mc,
                np.random.default_rng(seed),
                get_weighting(config.train.weighting),
                keep_draws=False,
            )
            least_squares_fit(model, form)

        return model

    x_scale = config.model.x_scale

    if x_scale is None:
        x_scale = max(1.0, float(np.std(dataset.samples)))

    return init_swish(1, width, config.model.d_e, seed, sde.horizon_T, x_scale)


def run_train_job(job: TrainJob):
    """Trains one model and writes its outputs under ``out_dir/label``.

    Returns
    ---------
    dict
        the run summary, with the written files under ``files``.
    """
    config = job.config
    master = config.experiment.seed
    run_dir = os.path.join(config.out_dir, job.label)
    os.makedirs(run_dir, exist_ok=True)

    files = list()
    sde = config.sde.build()
    gm = config.target.mixture(job.mu)
    grid = standard_grid(gm)

    seeds = {
        "data_seed": run_seed(master, job.index, DATA_STREAM),
        "noise_seed": run_seed(master, job.index, NOISE_STREAM),
        "init_seed": run_seed(master, job.index, INIT_STREAM),
    }
    train_config = dataclasses.replace(config.train, **seeds)

    dataset = sample_mixture(gm, train_config.n, seeds["data_seed"])
    dataset.save(os.path.join(run_dir, "dataset.csv"))
    files.extend([os.path.join(run_dir, "dataset.csv"), os.path.join(run_dir, "dataset.csv.json")])

    model = build_model(config, sde, gm, dataset, seeds["init_seed"], job.width)
    snapshot_epochs = tuple(epoch for epoch in config.experiment.snapshot_epochs if epoch <= train_config.epochs)

    trajectory_path = os.path.join(run_dir, "trajectory.csv")

    try:
        trajectory = train(model, sde, dataset, train_config, gm, grid, snapshot_epochs)

    except DivergenceError as error:
        if error.trajectory is not None:
            error.trajectory.save(trajectory_path)

        raise

    trajectory.save(trajectory_path)
    files.append(trajectory_path)
    files.append(emit_plot(trajectory_path, "epoch", ["kl"], os.path.join(run_dir, "kl.svg"), logy=True, title=job.label))

    checkpoint_path = os.path.join(run_dir, "model.npz")
    save_checkpoint(trajectory.model, checkpoint_path)
    files.extend([checkpoint_path, f"{checkpoint_path}.json"])

    summary = {"label": job.label, "mu": job.mu, "width": model.width, **seeds}
    kl = trajectory.column("kl")

    if np.all(np.isnan(kl)):
        return {**summary, "files": files}

    best = trajectory.best()
    summary.update(best_epoch=best.epoch, best_kl=best.kl, final_kl=float(kl[-1]))

    window, patience = config.experiment.smoothing_window, config.experiment.patience

    if len(kl) > window + patience:
        stop = early_stop_detect(kl, window, patience, trajectory.epochs)
        later = np.flatnonzero(trajectory.epochs >= 4 * stop.epoch)

        summary.update(
            stop_epoch=stop.epoch,
            turning=stop.turning,
            rise_epoch=stop.rise_epoch,
            smoothed_min_kl=stop.smoothed_min,
            kl_at_4x=float(kl[later[0]]) if len(later) else float("nan"),
        )

    at_epoch = np.flatnonzero(trajectory.epochs >= config.experiment.kl_at_epoch)
    reached = np.flatnonzero(kl <= config.experiment.kl_criterion)

    summary.update(
        kl_at_epoch=float(kl[at_epoch[0]]) if len(at_epoch) else float("nan"),
        criterion_epoch=int(trajectory.epochs[reached[0]]) if len(reached) else None,
        generalizes=bool(len(reached)),
    )

    densities = dict()

    for epoch, snapshot in sorted(trajectory.snapshots.items()):
        density = model_density(snapshot, sde, grid)
        density_path = os.path.join(run_dir, f"density_epoch{epoch}.csv")
        density.save(density_path)
        files.append(density_path)
        densities[f"epoch {epoch}"] = density

    best_density = model_density(trajectory.best_model, sde, grid)
    best_path = os.path.join(run_dir, "density_best.csv")
    best_density.save(best_path)
    files.append(best_path)
    densities[f"best (epoch {best.epoch})"] = best_density

    files.append(emit_density_plot(densities, target_density(gm, grid), os.path.join(run_dir, "densities.svg"), job.label))

    if gm.n_modes == 2:
        fit = fit_density_modes(best_density, 2, seed=seeds["init_seed"] % 2**32)
        summary.update(
            dominant_weight=max(fit.weights),
            fit_mean_left=fit.means[0],
            fit_mean_right=fit.means[1],
        )

    if job.save_samples:
        rng = np.random.default_rng(run_seed(master, job.index, SAMPLE_STREAM))
        n_samples = config.experiment.n_samples

        samplers = {
            "samples_reverse.csv": reverse_sde_sample(sde, trajectory.model, SAMPLER_STEPS, n_samples, rng),
            "samples_ode.csv": ode_sample(trajectory.model, sde, n_samples, SAMPLER_STEPS, rng),
        }

        for name, samples in samplers.items():
            files.append(write_csv(pd.DataFrame({"x": samples[:, 0]}), os.path.join(run_dir, name)))

    return {**summary, "files": files}


def run_jobs(config: ExperimentConfig, jobs):
    """Runs training jobs, in parallel when ``workers > 1``, keeping job
    order."""
    if config.experiment.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=config.experiment.workers) as executor:
            return list(executor.map(run_train_job, jobs))

    return [run_train_job(job) for job in jobs]


def _finish(config: ExperimentConfig, manifest: RunManifest, results, summary_name: str):
    seeds = dict()

    for result in results:
        for filepath in result.pop("files"):
            manifest.add(config.out_dir, filepath)

        seeds[result["label"]] = {key: result[key] for key in ("data_seed", "noise_seed", "init_seed")}

    manifest.seeds.update(seeds)
    summary = pd.DataFrame(results)
    manifest.add(config.out_dir, write_csv(summary, os.path.join(config.out_dir, summary_name)))

    return summary


def _start(config: ExperimentConfig):
    os.makedirs(config.out_dir, exist_ok=True)

    return RunManifest(config=config.to_dict())


def run_kl_dynamics(config: ExperimentConfig):
    """Trains ``runs`` models on one target and reports their early-stopping
    epochs."""
    manifest = _start(config)
    jobs = [TrainJob(config, f"run{index}", index, save_samples=True) for index in range(config.experiment.runs)]

    summary = _finish(config, manifest, run_jobs(config, jobs), "kl_dynamics_summary.csv")
    manifest.write(config.out_dir)

    for row in summary.to_dict("records"):
        if "stop_epoch" in row:
            logger.info("%s: early-stopping epoch %s, KL %.4g", row["label"], row["stop_epoch"], row["smoothed_min_kl"])

    return ExperimentResult(config.out_dir, manifest, {"summary": summary})


def run_modes_shift(config: ExperimentConfig):
    """Trains identically budgeted models for every mode distance."""
    manifest = _start(config)
    jobs = [
        TrainJob(config, f"mu_{mu:g}", index, mu=mu)
        for index, mu in enumerate(config.experiment.mu_list)
    ]

    summary = _finish(config, manifest, run_jobs(config, jobs), "modes_shift_summary.csv")
    manifest.write(config.out_dir)

    return ExperimentResult(config.out_dir, manifest, {"summary": summary})


def run_capacity_sweep(config: ExperimentConfig):
    """Trains one model per width and records when each meets the KL
    criterion."""
    manifest = _start(config)
    jobs = [
        TrainJob(config, f"width_{width}", index, width=width)
        for index, width in enumerate(config.experiment.m_list)
    ]

    summary = _finish(config, manifest, run_jobs(config, jobs), "capacity_summary.csv")
    summary_path = os.path.join(config.out_dir, "capacity_summary.csv")

    if "kl_at_epoch" in summary.columns:
        chart = os.path.join(config.out_dir, "capacity.svg")
        manifest.add(config.out_dir, emit_plot(summary_path, "width", ["kl_at_epoch"], chart, logx=True, logy=True))

    manifest.write(config.out_dir)

    return ExperimentResult(config.out_dir, manifest, {"summary": summary})


def run_bounds(config: ExperimentConfig):
    """Tabulates the bound over a ``tau`` grid and locates its minimum."""
    manifest = _start(config)
    theory = config.theory
    sde = config.sde.build()
    gm = config.target.mixture()

    prior_gap = kl_prior_gap(gm, sde)
    table = bound_table(theory.tau_grid(), theory.m, theory.n, config.experiment.mu_list, theory.constants(), prior_gap)

    bounds_path = os.path.join(config.out_dir, "bounds.csv")
    manifest.add(config.out_dir, write_csv(table, bounds_path))

    thm1 = os.path.join(config.out_dir, "thm1.csv")
    manifest.add(config.out_dir, write_csv(table.iloc[: theory.tau_points], thm1))
    manifest.add(
        config.out_dir,
        emit_plot(thm1, "tau", ["stat", "disc", "opt", "approx", "total"], os.path.join(config.out_dir, "bounds.svg"), logx=True, logy=True),
    )

    tau_star, at_boundary = optimal_tau(theory.m, theory.n, theory.constants())

    # the random-feature optimum estimates the irreducible loss
    model = init_random_feature(1, min(theory.m, 1024), config.model.d_e, theory.feature_seed, sde.horizon_T)
    rng = np.random.default_rng(run_seed(config.experiment.seed, 0, SAMPLE_STREAM))
    form = quadratic_coeffs(model, sde, gm, config.model.n_mc, rng, get_weighting(config.train.weighting), keep_draws=False)

    summary = pd.DataFrame(
        [
            {
                "m": theory.m,
                "n": theory.n,
                "tau_es": tau_es(theory.n),
                "optimal_tau": tau_star,
                "at_boundary": at_boundary,
                "prior_gap": prior_gap,
                "sm_at_optimum": form.loss(form.minimizer()),
            }
        ]
    )
    manifest.add(config.out_dir, write_csv(summary, os.path.join(config.out_dir, "bounds_summary.csv")))
    manifest.write(config.out_dir)

    return ExperimentResult(config.out_dir, manifest, {"bounds": table, "summary": summary})


def run_mc_gap(config: ExperimentConfig):
    """Measures the finite-width gap and its log-log slope."""
    manifest = _start(config)
    theory = config.theory
    sde = config.sde.build()
    gm = config.target.mixture()
    rng = np.random.default_rng(run_seed(config.experiment.seed, 0, SAMPLE_STREAM))

    gaps = mc_gap_estimate(
        theory.feature_seed,
        sde,
        gm,
        config.experiment.m_list,
        theory.m_ref,
        theory.n_mc,
        rng,
        weight=get_weighting(config.train.weighting),
        d_e=config.model.d_e,
    )
    table = pd.DataFrame([dataclasses.asdict(gap) for gap in gaps])

    gap_path = os.path.join(config.out_dir, "mc_gap.csv")
    manifest.add(config.out_dir, write_csv(table, gap_path))
    manifest.add(config.out_dir, emit_plot(gap_path, "m", ["gap"], os.path.join(config.out_dir, "mc_gap.svg"), logx=True, logy=True))

    positive = table[(table["gap"] > 0) & (table["m"] < theory.m_ref)]
    slope = loglog_slope(positive["m"], positive["gap"]) if len(positive) > 1 else math.nan
    summary = pd.DataFrame([{"slope": slope, "m_ref": theory.m_ref, "n_mc": theory.n_mc}])

    manifest.add(config.out_dir, write_csv(summary, os.path.join(config.out_dir, "mc_gap_summary.csv")))
    manifest.write(config.out_dir)

    logger.info("Monte-Carlo gap slope: %.4f", slope)

    return ExperimentResult(config.out_dir, manifest, {"mc_gap": table, "summary": summary})


RUNNERS = {
    "kl-dynamics": run_kl_dynamics,
    "modes-shift": run_modes_shift,
    "capacity-sweep": run_capacity_sweep,
    "bounds": run_bounds,
    "mc-gap": run_mc_gap,
}


def run_experiment(config: ExperimentConfig):
    """Dispatches to the runner of ``experiment.kind``."""
    if config.experiment.kind == "verify":
        from sgl.verify import run_verify

        return run_verify(config)

    return RUNNERS[config.experiment.kind](config)
