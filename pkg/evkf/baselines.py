"""Reference filters: exact Kalman, stochastic ensemble Kalman and bootstrap particle."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np
from scipy import linalg, special

from . import expfam
from .const import (
    DEFAULT_ENSEMBLE_MEMBERS,
    DEFAULT_PARTICLES,
    POISSON_VARIANCE_FLOOR,
    RESAMPLE_THRESHOLD,
)
from .exceptions import DomainError, NumericError, ShapeError

if TYPE_CHECKING:
    from collections.abc import Iterable

    from numpy.typing import ArrayLike, NDArray

    from .dynamics import DynamicsModel, LinearGaussian
    from .expfam import NaturalParams
    from .observations import LinearGaussianObs, ObservationModel

    FloatArray = NDArray[np.float64]

_LOGGER = logging.getLogger(__name__)

ENKF_JITTER = 1e-6


def _as_cov(R: ArrayLike, n: int) -> FloatArray:
    arr = np.asarray(R, dtype=np.float64)
    if arr.ndim < 2:
        arr = np.diag(np.broadcast_to(arr, (n,)))
    return arr


def kalman_step(
    m: ArrayLike,
    P: ArrayLike,
    A: ArrayLike,
    Q: ArrayLike,
    C: ArrayLike,
    b: ArrayLike,
    R: ArrayLike,
    y: ArrayLike,
) -> tuple[FloatArray, FloatArray]:
    """Kalman predict + update; the covariance update uses the Joseph form.

    R may be a covariance matrix or a vector of variances.
    """
    m = np.asarray(m, dtype=np.float64)
    P = np.atleast_2d(np.asarray(P, dtype=np.float64))
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    C = np.atleast_2d(np.asarray(C, dtype=np.float64))
    Q = _as_cov(Q, A.shape[0])
    R = _as_cov(R, C.shape[0])
    for name, mat in (("Q", Q), ("R", R)):
        try:
            np.linalg.cholesky(mat)
        except np.linalg.LinAlgError:
            raise DomainError(f"{name} must be symmetric positive definite") from None

    m_pred = A @ m
    P_pred = A @ P @ A.T + Q
    S = C @ P_pred @ C.T + R
    try:
        factor = linalg.cho_factor(S)
    except linalg.LinAlgError:
        raise NumericError("Innovation covariance is singular") from None
    K = linalg.cho_solve(factor, C @ P_pred).T
    resid = np.asarray(y, dtype=np.float64) - (C @ m_pred + np.asarray(b, dtype=np.float64))
    m_new = m_pred + K @ resid
    I_KC = np.eye(m.shape[0]) - K @ C
    P_new = I_KC @ P_pred @ I_KC.T + K @ R @ K.T
    return m_new, 0.5 * (P_new + P_new.T)


def kalman_filter(
    observations: Iterable[ArrayLike],
    m0: ArrayLike,
    P0: ArrayLike,
    A: ArrayLike,
    Q: ArrayLike,
    C: ArrayLike,
    b: ArrayLike,
    R: ArrayLike,
) -> tuple[FloatArray, FloatArray]:
    """Filtered means (T, L) and covariances (T, L, L) over a sequence."""
    m = np.asarray(m0, dtype=np.float64)
    P = np.atleast_2d(np.asarray(P0, dtype=np.float64))
    means, covs = [], []
    for y in observations:
        m, P = kalman_step(m, P, A, Q, C, b, R, y)
        means.append(m)
        covs.append(P)
    L = m.shape[0]
    return np.array(means).reshape(-1, L), np.array(covs).reshape(-1, L, L)


def kalman_filter_models(
    dyn: LinearGaussian,
    obs: LinearGaussianObs,
    observations: Iterable[ArrayLike],
    q0: NaturalParams | None = None,
) -> tuple[FloatArray, FloatArray]:
    """``kalman_filter`` driven by model objects, starting from q(z_0)."""
    q = expfam.initial_params(dyn.family) if q0 is None else q0
    m0, P0 = expfam.moments(q)
    return kalman_filter(observations, m0, P0, dyn.A, dyn.noise_cov, obs.C, obs.b, obs.variances)


def riccati_covariance(A: ArrayLike, Q: ArrayLike, C: ArrayLike, R: ArrayLike) -> FloatArray:
    """Stationary filtered covariance of a time-invariant linear-Gaussian model."""
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    C = np.atleast_2d(np.asarray(C, dtype=np.float64))
    Q = _as_cov(Q, A.shape[0])
    R = _as_cov(R, C.shape[0])
    P_pred = linalg.solve_discrete_are(A.T, C.T, Q, R)
    S = C @ P_pred @ C.T + R
    P = P_pred - P_pred @ C.T @ np.linalg.solve(S, C @ P_pred)
    return np.asarray(0.5 * (P + P.T))


@dataclass(frozen=True)
class ParticleCloud:
    """Weighted particles; log-weights are normalized to logsumexp = 0."""

    particles: FloatArray = field(repr=False)
    log_weights: FloatArray = field(repr=False)

    def __post_init__(self) -> None:
        """Normalize the log-weights."""
        particles = np.atleast_2d(np.asarray(self.particles, dtype=np.float64))
        log_w = np.asarray(self.log_weights, dtype=np.float64).reshape(-1)
        if log_w.shape[0] != particles.shape[0]:
            raise ShapeError("One log-weight per particle is required")
        total = special.logsumexp(log_w)
        if not np.isfinite(total):
            raise NumericError("All particle weights are zero")
        object.__setattr__(self, "particles", particles)
        object.__setattr__(self, "log_weights", log_w - total)

    @classmethod
    def from_prior(cls, q0: NaturalParams, n: int, rng: np.random.Generator) -> ParticleCloud:
        """Equally weighted draws from q(z_0)."""
        return cls(expfam.sample(q0, n, rng), np.zeros(n))

    @property
    def size(self) -> int:
        """Number of particles."""
        return int(self.particles.shape[0])

    @property
    def weights(self) -> FloatArray:
        """Normalized weights."""
        return np.exp(self.log_weights)

    @property
    def ess(self) -> float:
        """Effective sample size 1 / sum w^2."""
        return float(1.0 / np.sum(self.weights**2))

    def mean(self) -> FloatArray:
        """Weighted mean."""
        return np.asarray(self.weights @ self.particles)

    def covariance(self) -> FloatArray:
        """Weighted covariance."""
        centred = self.particles - self.mean()
        return np.asarray((centred * self.weights[:, None]).T @ centred)


def systematic_resample(weights: ArrayLike, rng: np.random.Generator) -> NDArray[np.intp]:
    """Indices drawn by systematic resampling with one uniform offset."""
    w = np.asarray(weights, dtype=np.float64)
    n = w.shape[0]
    positions = (rng.random() + np.arange(n)) / n
    cumulative = np.cumsum(w)
    cumulative[-1] = 1.0
    return np.searchsorted(cumulative, positions)


def bpf_step(
    cloud: ParticleCloud,
    dyn: DynamicsModel,
    obs: ObservationModel,
    y: ArrayLike,
    rng: np.random.Generator,
    resample_threshold: float = RESAMPLE_THRESHOLD,
) -> ParticleCloud:
    """Propagate through the dynamics, reweight by the likelihood, maybe resample."""
    particles = dyn.conditional_sample_batch(cloud.particles, rng)
    log_w = cloud.log_weights + obs.log_likelihood(particles, y)
    log_w = np.where(np.isnan(log_w), -np.inf, log_w)
    if not np.any(np.isfinite(log_w)):
        raise NumericError("Every particle has zero likelihood")
    new = ParticleCloud(particles, log_w)
    if new.ess < resample_threshold * new.size:
        _LOGGER.debug("Resampling: ESS %.1f of %d", new.ess, new.size)
        idx = systematic_resample(new.weights, rng)
        new = ParticleCloud(particles[idx], np.zeros(new.size))
    return new


@dataclass(frozen=True)
class Ensemble:
    """Equally weighted ensemble members (n >= 2)."""

    members: FloatArray = field(repr=False)

    def __post_init__(self) -> None:
        """Check the member count."""
        members = np.atleast_2d(np.asarray(self.members, dtype=np.float64))
        if members.shape[0] < 2:
            raise ShapeError("An ensemble needs at least two members")
        object.__setattr__(self, "members", members)

    @classmethod
    def from_prior(cls, q0: NaturalParams, n: int, rng: np.random.Generator) -> Ensemble:
        """Members drawn from q(z_0)."""
        return cls(expfam.sample(q0, n, rng))

    def mean(self) -> FloatArray:
        """Ensemble mean."""
        return np.asarray(self.members.mean(axis=0))

    def covariance(self) -> FloatArray:
        """Unbiased ensemble covariance."""
        return np.atleast_2d(np.cov(self.members, rowvar=False))


def enkf_step(
    ens: Ensemble,
    dyn: DynamicsModel,
    obs: ObservationModel,
    y: ArrayLike,
    rng: np.random.Generator,
) -> Ensemble:
    """Stochastic EnKF analysis with perturbed observations.

    The observation operator is E[y | z]; its noise covariance is the ensemble
    average of Var[y | z], which for Poisson readouts is the rate.
    """
    forecast = dyn.conditional_sample_batch(ens.members, rng)
    n = forecast.shape[0]
    if np.max(np.ptp(forecast, axis=0)) == 0.0:
        _LOGGER.warning("Collapsed ensemble; adding jitter %.1e", ENKF_JITTER)
        forecast = forecast + np.sqrt(ENKF_JITTER) * rng.standard_normal(forecast.shape)
    predicted = obs.mean_response(forecast)
    r2 = np.maximum(obs.response_variance(forecast).mean(axis=0), POISSON_VARIANCE_FLOOR)
    x_dev = forecast - forecast.mean(axis=0)
    y_dev = predicted - predicted.mean(axis=0)
    P_xy = x_dev.T @ y_dev / (n - 1)
    P_yy = y_dev.T @ y_dev / (n - 1) + np.diag(r2)
    try:
        factor = linalg.cho_factor(P_yy)
    except linalg.LinAlgError:
        try:
            factor = linalg.cho_factor(P_yy + ENKF_JITTER * np.eye(P_yy.shape[0]))
        except linalg.LinAlgError:
            raise NumericError("Innovation covariance of the ensemble is degenerate") from None
        _LOGGER.warning("Ensemble innovation covariance needed jitter %.1e", ENKF_JITTER)
    noise = rng.standard_normal(predicted.shape) * np.sqrt(r2)
    perturbed = np.asarray(y, dtype=np.float64) + noise
    innovations = perturbed - predicted
    analysis = forecast + linalg.cho_solve(factor, innovations.T).T @ P_xy.T
    return Ensemble(analysis)


def run_bpf(
    dyn: DynamicsModel,
    obs: ObservationModel,
    observations: Iterable[ArrayLike],
    rng: np.random.Generator,
    n_particles: int = DEFAULT_PARTICLES,
    q0: NaturalParams | None = None,
) -> FloatArray:
    """Filtered means of a bootstrap particle filter over a sequence."""
    prior = expfam.initial_params(dyn.family) if q0 is None else q0
    cloud = ParticleCloud.from_prior(prior, n_particles, rng)
    means = []
    for y in observations:
        cloud = bpf_step(cloud, dyn, obs, y, rng)
        means.append(cloud.mean())
    return np.array(means).reshape(-1, dyn.dim)


def run_enkf(
    dyn: DynamicsModel,
    obs: ObservationModel,
    observations: Iterable[ArrayLike],
    rng: np.random.Generator,
    n_members: int = DEFAULT_ENSEMBLE_MEMBERS,
    q0: NaturalParams | None = None,
) -> FloatArray:
    """Filtered means of the stochastic EnKF over a sequence."""
    prior = expfam.initial_params(dyn.family) if q0 is None else q0
    ens = Ensemble.from_prior(prior, n_members, rng)
    means = []
    for y in observations:
        ens = enkf_step(ens, dyn, obs, y, rng)
        means.append(ens.mean())
    return np.array(means).reshape(-1, dyn.dim)
