"""Trial coordinator: datasets, the train / freeze / evaluate protocol and metrics.

Trial lifecycle:
1. Load the trial's dataset, or simulate and save it when missing
2. Build the filter and the transition model it runs with
3. Filter the first t_train observations, learning the dynamics if configured
4. Freeze the dynamics and checkpoint them
5. Filter the remaining t_eval observations and score that segment
"""

from __future__ import annotations

import asyncio
import functools
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import TYPE_CHECKING, Any

import numpy as np

from . import expfam
from .baselines import (
    Ensemble,
    ParticleCloud,
    bpf_step,
    enkf_step,
    kalman_step,
)
from .config import DynamicsChoice, FilterChoice, RunConfig
from .diagnostics import (
    BOUNDS_FILE,
    BOUNDS_SUMMARY_FILE,
    CHECKPOINT_FILE,
    DIAGNOSTICS_FILE,
    LEDGER_FILE,
    METRICS_FILE,
    Ledger,
    TrialEntry,
    bounds_summary,
    diagnostics_rows,
    summarize_run,
    write_checkpoint,
    write_json,
    write_metrics,
    write_rows_csv,
)
from .dynamics import LinearGaussian, make_learner_dynamics
from .exceptions import ConfigError
from .expfam import FamilyTag, NaturalParams
from .filtering import EvkfFilter, FilterRun, FilterState, StepDiagnostics
from .metrics import (
    MetricsRecord,
    attractor_samples,
    chamfer_protocol,
    dynamics_kl,
    filtering_log_density,
    rmse,
)
from .observations import LinearGaussianObs
from .simulate import (
    Experiment,
    load_trajectory,
    make_experiment,
    meta_path,
    models_from_meta,
    save_trajectory,
)
from .util import StepTimer, spawn_rngs, trial_seed

if TYPE_CHECKING:
    from collections.abc import Callable

    from numpy.typing import NDArray

    from .dynamics import DynamicsModel
    from .observations import ObservationModel
    from .simulate import Trajectory

    FloatArray = NDArray[np.float64]

_LOGGER = logging.getLogger(__name__)

# Child streams of a trial seed; the first two belong to make_experiment.
RNG_FILTER = 2
RNG_INIT = 3
RNG_METRICS = 4
RNG_METRICS_INIT = 5
N_STREAMS = 6


def dataset_path(cfg: RunConfig, trial: int) -> Path:
    """CSV location of a trial's dataset."""
    return cfg.out_path / "data" / f"trial_{trial:03d}.csv"


def trial_dir(cfg: RunConfig, trial: int) -> Path:
    return cfg.out_path / cfg.run_label / f"trial_{trial:03d}"


def simulate_trial(cfg: RunConfig, trial: int) -> Path:
    """Generate and save one trial's dataset."""
    seed = trial_seed(cfg.seed, trial)
    exp = make_experiment(
        cfg.experiment, cfg.latent_dim, cfg.obs_dim, seed, T=cfg.t_train + cfg.t_eval
    )
    return save_trajectory(
        exp.trajectory,
        dataset_path(cfg, trial),
        extra_meta={"trial": trial, "protocol_hash": cfg.protocol_hash},
    )


def load_or_simulate(cfg: RunConfig, trial: int) -> Experiment:
    """The trial's dataset from disk, simulating it first when absent."""
    path = dataset_path(cfg, trial)
    if not (path.exists() and meta_path(path).exists()):
        _LOGGER.info("No dataset at %s; simulating it", path)
        simulate_trial(cfg, trial)
    traj = load_trajectory(path)
    expected = {
        "system": cfg.experiment,
        "latent_dim": cfg.latent_dim,
        "obs_dim": cfg.obs_dim,
        "seed": trial_seed(cfg.seed, trial),
    }
    stale = {k: traj.meta.get(k) for k, v in expected.items() if traj.meta.get(k) != v}
    if stale:
        raise ConfigError(f"Dataset {path} was generated with different settings: {stale}")
    if traj.length < cfg.t_train + cfg.t_eval:
        raise ConfigError(
            f"Dataset {path} has {traj.length} steps, the protocol needs "
            f"{cfg.t_train + cfg.t_eval}",
            path="t_eval",
        )
    dyn, obs = models_from_meta(traj.meta)
    return Experiment(dyn, obs, traj)


def filter_dynamics(
    cfg: RunConfig, dyn_true: DynamicsModel, rng: np.random.Generator
) -> DynamicsModel:
    """Transition model the filter starts with."""
    tag = FamilyTag(cfg.filter_family, dyn_true.dim)
    if cfg.dynamics is DynamicsChoice.TRUE:
        if tag != dyn_true.family:
            raise ConfigError(
                f"True dynamics are {dyn_true.family.kind}, filter family is {tag.kind}",
                path="family",
            )
        return dyn_true
    noise_cov = getattr(dyn_true, "noise_cov", None) if tag.is_gaussian else None
    return make_learner_dynamics(
        tag,
        rng,
        noise_cov=noise_cov,
        learn_noise=cfg.learn_noise,
        b0=cfg.gamma_b0,
        hidden=cfg.hidden,
    )


@dataclass
class TrialOutcome:
    """Everything a trial produced, before it is written to disk."""

    trial: int
    seed: int
    metrics: MetricsRecord
    means: FloatArray
    posteriors: list[NaturalParams | FilterState]
    diagnostics: list[dict[str, Any]]
    step_diagnostics: list[StepDiagnostics]
    dynamics: DynamicsModel
    frozen_dynamics: DynamicsModel
    summary: dict[str, Any]


def _run_evkf(
    cfg: RunConfig,
    dyn: DynamicsModel,
    obs: ObservationModel,
    traj: Trajectory,
    rng: np.random.Generator,
    timer: StepTimer,
) -> tuple[FilterRun, FilterRun, EvkfFilter, DynamicsModel]:
    evkf_cfg = cfg.resolved_evkf()
    evkf = EvkfFilter(dyn, obs, evkf_cfg, rng, learn=cfg.learning)
    train = evkf.run(traj.observations[: cfg.t_train], timer, keep_states=True)
    evkf.freeze()
    frozen = evkf.dynamics
    evaluation = evkf.run(traj.observations[cfg.t_train :], timer, keep_states=True)
    return train, evaluation, evkf, frozen


def _run_kalman(
    dyn: LinearGaussian,
    obs: LinearGaussianObs,
    ys: FloatArray,
    timer: StepTimer,
) -> tuple[FloatArray, list[NaturalParams]]:
    m, P = expfam.moments(expfam.initial_params(dyn.family))
    means, posteriors = [], []
    for y in ys:
        with timer:
            m, P = kalman_step(m, P, dyn.A, dyn.noise_cov, obs.C, obs.b, obs.variances, y)
        means.append(m)
        posteriors.append(expfam.gaussian(m, P))
    return np.array(means).reshape(-1, dyn.dim), posteriors


def _run_sampler(
    cfg: RunConfig,
    dyn: DynamicsModel,
    obs: ObservationModel,
    ys: FloatArray,
    rng: np.random.Generator,
    timer: StepTimer,
) -> FloatArray:
    prior = expfam.initial_params(dyn.family)
    means = []
    if cfg.filter is FilterChoice.BPF:
        cloud = ParticleCloud.from_prior(prior, cfg.particles, rng)
        for y in ys:
            with timer:
                cloud = bpf_step(cloud, dyn, obs, y, rng)
            means.append(cloud.mean())
    else:
        ens = Ensemble.from_prior(prior, cfg.ensemble_members, rng)
        for y in ys:
            with timer:
                ens = enkf_step(ens, dyn, obs, y, rng)
            means.append(ens.mean())
    return np.array(means).reshape(-1, dyn.dim)


def score(
    cfg: RunConfig,
    dyn_true: DynamicsModel,
    dyn_filter: DynamicsModel,
    truth: FloatArray,
    means: FloatArray,
    posteriors: list[NaturalParams | FilterState] | None,
    rng: np.random.Generator,
    timer: StepTimer,
) -> MetricsRecord:
    """Metrics of an evaluation segment."""
    protocol = cfg.metrics
    record = MetricsRecord(wall_ms_per_step=timer.mean_ms if timer.count else None)
    if truth.shape[0]:
        record.rmse = rmse(means, truth)
        if posteriors is not None:
            record.log_q = filtering_log_density(posteriors, truth)
    if protocol.dynamics_kl and dyn_true.family == dyn_filter.family:
        samples = attractor_samples(
            dyn_true,
            rng,
            n_points=protocol.attractor_points,
            n_steps=protocol.attractor_steps,
            keep_fraction=protocol.attractor_keep,
        )
        record.dynamics_kl = dynamics_kl(
            dyn_true, dyn_filter, samples, rng, scale=protocol.perturbation_scale
        )
    if protocol.chamfer:
        record.log_chamfer_mean, record.log_chamfer_std = chamfer_protocol(
            dyn_true,
            dyn_filter,
            rng,
            rollouts=protocol.chamfer_rollouts,
            steps=protocol.chamfer_steps,
            repeats=protocol.chamfer_repeats,
        )
    return record


def run_trial(cfg: RunConfig, trial: int) -> TrialOutcome:
    """Run the full protocol for one trial without touching the disk beyond the dataset."""
    seed = trial_seed(cfg.seed, trial)
    rngs = spawn_rngs(seed, N_STREAMS)
    dyn_true, obs, traj = load_or_simulate(cfg, trial)
    truth = traj.latents[cfg.t_train : cfg.t_train + cfg.t_eval]
    ys = traj.observations[: cfg.t_train + cfg.t_eval]
    timer = StepTimer(_LOGGER)
    _LOGGER.info("Trial %d: %s on %s (seed %d)", trial, cfg.run_label, cfg.experiment, seed)

    if cfg.filter is FilterChoice.EVKF:
        dyn0 = filter_dynamics(cfg, dyn_true, rngs[RNG_INIT])
        train, evaluation, evkf, frozen = _run_evkf(
            cfg, dyn0, obs, traj.slice(0, len(ys)), rngs[RNG_FILTER], timer
        )
        rows = diagnostics_rows(train.diagnostics, "train")
        rows += diagnostics_rows(evaluation.diagnostics, "eval")
        step_diags = [*train.diagnostics, *evaluation.diagnostics]
        summary = summarize_run(step_diags, evkf.dynamics, evkf.learner.updates)
        if cfg.learning and cfg.metrics.dynamics_kl and dyn_true.family == dyn0.family:
            summary["dynamics_kl_init"] = score(
                replace(cfg, metrics=replace(cfg.metrics, chamfer=False)),
                dyn_true,
                dyn0,
                truth[:0],
                truth[:0],
                None,
                rngs[RNG_METRICS_INIT],
                StepTimer(),
            ).dynamics_kl
        means: FloatArray = evaluation.means
        posteriors: list[NaturalParams | FilterState] = list(evaluation.states)
        dyn_final = evkf.dynamics
    else:
        if cfg.filter is FilterChoice.KALMAN:
            if not (isinstance(dyn_true, LinearGaussian) and isinstance(obs, LinearGaussianObs)):
                raise ConfigError("The kalman filter needs linear-Gaussian models", path="filter")
            all_means, all_post = _run_kalman(dyn_true, obs, ys, timer)
            posteriors = list(all_post[cfg.t_train :])
        else:
            all_means = _run_sampler(cfg, dyn_true, obs, ys, rngs[RNG_FILTER], timer)
            posteriors = []
        means = all_means[cfg.t_train :]
        rows = [
            {"phase": "train" if t < cfg.t_train else "eval", "t": t + 1}
            for t in range(len(ys))
        ]
        step_diags = []
        frozen = dyn_final = dyn_true
        summary = summarize_run([], None, 0)
        summary["steps"] = len(ys)

    metrics = score(
        cfg,
        dyn_true,
        dyn_final,
        truth,
        means,
        posteriors or None,
        rngs[RNG_METRICS],
        timer,
    )
    _LOGGER.info("Trial %d finished: %s", trial, metrics.to_dict())
    return TrialOutcome(
        trial=trial,
        seed=seed,
        metrics=metrics,
        means=means,
        posteriors=posteriors,
        diagnostics=rows,
        step_diagnostics=step_diags,
        dynamics=dyn_final,
        frozen_dynamics=frozen,
        summary=summary,
    )


def write_trial(cfg: RunConfig, outcome: TrialOutcome) -> TrialEntry:
    """Persist a trial's diagnostics, metrics and checkpoint."""
    directory = trial_dir(cfg, outcome.trial)
    config_hash = cfg.config_hash
    write_rows_csv(directory / DIAGNOSTICS_FILE, outcome.diagnostics, config_hash)
    write_metrics(
        directory / METRICS_FILE, outcome.metrics, config_hash, outcome.trial, outcome.seed
    )
    write_checkpoint(directory / CHECKPOINT_FILE, outcome.frozen_dynamics, config_hash)
    if cfg.evkf.compute_bounds and outcome.step_diagnostics:
        bound_rows = [
            {"t": d.t, "elbo_L": d.elbo_L, "elbo_M": d.elbo_M, "gap": d.gap}
            for d in outcome.step_diagnostics
        ]
        write_rows_csv(directory / BOUNDS_FILE, bound_rows, config_hash)
        summary = bounds_summary(bound_rows)
        write_json(directory / BOUNDS_SUMMARY_FILE, {"config_hash": config_hash, **summary})
        outcome.summary["bounds"] = summary
    return TrialEntry(
        trial=outcome.trial,
        seed=outcome.seed,
        directory=str(directory),
        metrics=outcome.metrics,
        diagnostics=outcome.summary,
    )


def filter_trial(cfg: RunConfig, trial: int) -> TrialEntry:
    """``run_trial`` followed by ``write_trial``; the unit of work of a worker."""
    return write_trial(cfg, run_trial(cfg, trial))


class TrialCoordinator:
    """Fans trials out to a process pool and collects their results.

    Every trial derives its own RNG streams from (seed, trial), so results do
    not depend on the number of workers or on completion order.
    """

    def __init__(self, cfg: RunConfig) -> None:
        """Initialize the coordinator for one run configuration."""
        self.cfg = cfg
        self.workers = cfg.workers or os.cpu_count() or 1

    async def _async_map(self, fn: Callable[[RunConfig, int], Any]) -> list[Any]:
        trials = range(self.cfg.trials)
        workers = min(self.workers, self.cfg.trials)
        if workers <= 1:
            return [fn(self.cfg, k) for k in trials]
        loop = asyncio.get_running_loop()
        _LOGGER.debug("Running %d trials on %d workers", self.cfg.trials, workers)
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [
                loop.run_in_executor(pool, functools.partial(fn, self.cfg, k)) for k in trials
            ]
            return list(await asyncio.gather(*futures))

    async def async_simulate(self) -> list[Path]:
        """Write every trial's dataset."""
        paths: list[Path] = await self._async_map(simulate_trial)
        _LOGGER.info("Simulated %d datasets under %s", len(paths), self.cfg.out_path / "data")
        return paths

    async def async_filter(self) -> Ledger:
        """Run every trial and write the run ledger."""
        entries: list[TrialEntry] = await self._async_map(filter_trial)
        ledger = Ledger(
            label=self.cfg.run_label,
            config_hash=self.cfg.config_hash,
            protocol_hash=self.cfg.protocol_hash,
            config=self.cfg.to_dict(),
            trials=sorted(entries, key=lambda e: e.trial),
        )
        ledger.save(self.cfg.out_path / self.cfg.run_label / LEDGER_FILE)
        return ledger

    async def async_bounds(self) -> Ledger:
        """``async_filter`` with the per-step bounds switched on."""
        if self.cfg.filter is not FilterChoice.EVKF:
            raise ConfigError("Bounds are defined for the evkf filter only", path="filter")
        if not self.cfg.evkf.compute_bounds:
            self.cfg = replace(self.cfg, evkf=replace(self.cfg.evkf, compute_bounds=True))
        return await self.async_filter()
