"""Exponential family variational Kalman filter.

One filter step is

1. predict: lambda_bar = E_{q(z_{t-1})}[lambda(z_{t-1})], optionally with the
   variance of the prediction inflated by the propagated filter covariance;
2. update: conjugate-computation VI against the observation model;
3. learn: buffer (lambda_t, q_{t-1}) and move the dynamics parameters towards
   predictions that reproduce the filtered natural parameters.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields, replace
from typing import TYPE_CHECKING, Any

import numpy as np
from scipy import optimize

from . import expfam
from .approximators import AdamState, adam_step, sgd_step
from .const import (
    CVI_MAX_HALVINGS,
    DEFAULT_BETA1,
    DEFAULT_BETA2,
    DEFAULT_BOUNDS_MC_SAMPLES,
    DEFAULT_CVI_MAX_ITERS,
    DEFAULT_CVI_STEP_SIZE,
    DEFAULT_CVI_TOL,
    DEFAULT_EPS,
    DEFAULT_LEARN_MC_SAMPLES,
    DEFAULT_MC_SAMPLES_PREDICT,
    DEFAULT_STEP_SIZE,
    SUPPORT_RESAMPLE_CAP,
    FamilyKind,
    LearningObjective,
    OptimizerKind,
    VarianceCorrection,
)
from .dynamics import DynamicsModel, MlpGamma
from .exceptions import (
    ConfigError,
    DomainError,
    FamilyMismatchError,
    InvalidParameterError,
    NumericError,
)
from .expfam import FamilyTag, MeanParams, NaturalParams

if TYPE_CHECKING:
    from collections.abc import Iterable, Sequence

    from numpy.typing import ArrayLike, NDArray

    from .observations import ObservationModel
    from .util import StepTimer

    FloatArray = NDArray[np.float64]

_LOGGER = logging.getLogger(__name__)

_ELBO_SLACK = 1e-12


@dataclass(frozen=True)
class EvkfConfig:
    """Filter and learning settings."""

    mc_samples_predict: int = DEFAULT_MC_SAMPLES_PREDICT
    cvi_step_size: float = DEFAULT_CVI_STEP_SIZE
    cvi_max_iters: int = DEFAULT_CVI_MAX_ITERS
    cvi_tol: float = DEFAULT_CVI_TOL
    variance_correction: VarianceCorrection = VarianceCorrection.EKF_LIKE
    learn_every: int | None = None  # None disables learning
    learn_mc_samples: int = DEFAULT_LEARN_MC_SAMPLES
    learn_epochs: int = 1
    learning_objective: LearningObjective = LearningObjective.NATURAL
    optimizer: OptimizerKind = OptimizerKind.ADAM
    step_size: float = DEFAULT_STEP_SIZE
    beta1: float = DEFAULT_BETA1
    beta2: float = DEFAULT_BETA2
    eps: float = DEFAULT_EPS
    compute_bounds: bool = False
    bounds_mc_samples: int = DEFAULT_BOUNDS_MC_SAMPLES

    def __post_init__(self) -> None:
        """Check counts and tolerances, coercing enum fields."""
        object.__setattr__(
            self, "variance_correction", VarianceCorrection(self.variance_correction)
        )
        object.__setattr__(
            self, "learning_objective", LearningObjective(self.learning_objective)
        )
        object.__setattr__(self, "optimizer", OptimizerKind(self.optimizer))
        for name in (
            "mc_samples_predict",
            "cvi_max_iters",
            "learn_mc_samples",
            "learn_epochs",
            "bounds_mc_samples",
        ):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1", path=name)
        if self.learn_every is not None and self.learn_every < 1:
            raise ConfigError("learn_every must be >= 1 or null", path="learn_every")
        if not 0.0 < self.cvi_step_size <= 1.0:
            raise ConfigError("cvi_step_size must lie in (0, 1]", path="cvi_step_size")
        for name in ("cvi_tol", "step_size", "eps"):
            if getattr(self, name) <= 0.0:
                raise ConfigError(f"{name} must be positive", path=name)

    def to_dict(self) -> dict[str, Any]:
        """Plain-JSON view."""
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True)
class UpdateInfo:
    """Outcome of a CVI update."""

    elbo: float
    iterations: int
    halvings: int


@dataclass(frozen=True)
class Bounds:
    """Per-step lower bounds and the gap between them (L >= M)."""

    elbo_L: float
    elbo_M: float
    gap: float


@dataclass(frozen=True)
class StepDiagnostics:
    """Diagnostics recorded for one filter step."""

    t: int
    elbo: float  # CVI objective against the (corrected) prediction
    cvi_iters: int
    cvi_halvings: int
    dyn_loss: float
    elbo_L: float = float("nan")
    elbo_M: float = float("nan")
    gap: float = float("nan")
    learn_loss: float = float("nan")
    wall_us: float = float("nan")

    def as_row(self) -> dict[str, float]:
        """Flat mapping for the diagnostics CSV."""
        return {f.name: float(getattr(self, f.name)) for f in fields(self)}


@dataclass(frozen=True)
class FilterState:
    """Filtered and predicted posteriors after step ``t``."""

    t: int
    q_filter: NaturalParams
    q_pred: NaturalParams
    mu_filter: MeanParams
    diagnostics: StepDiagnostics | None = None

    def __post_init__(self) -> None:
        """The filtered and predicted posteriors share one family."""
        if self.q_filter.tag != self.q_pred.tag:
            raise FamilyMismatchError(f"{self.q_filter.tag} vs {self.q_pred.tag}")

    @property
    def mean(self) -> FloatArray:
        """Filtered mean of z_t."""
        return expfam.moments(self.q_filter)[0]


def initial_state(tag: FamilyTag, q0: NaturalParams | None = None) -> FilterState:
    """State at t = 0 holding the prior q(z_0)."""
    q = expfam.initial_params(tag) if q0 is None else q0
    return FilterState(0, q, q, expfam.mean_from_natural(q))


def _require_family(q: NaturalParams, dyn: DynamicsModel) -> None:
    if q.tag != dyn.family:
        raise FamilyMismatchError(f"Posterior family {q.tag} does not match dynamics {dyn.family}")


def _draw_in_support(
    q: NaturalParams, n: int, dyn: DynamicsModel, rng: np.random.Generator
) -> FloatArray:
    """n draws from q that the dynamics accepts, redrawing rejected rows."""
    fam = expfam.family_of(dyn.family)
    z = expfam.sample(q, n, rng)
    for attempt in range(SUPPORT_RESAMPLE_CAP):
        bad = ~fam.in_support(z)
        if not np.any(bad):
            return z
        _LOGGER.debug("Redrawing %d out-of-support samples (attempt %d)", bad.sum(), attempt + 1)
        z[bad] = expfam.sample(q, int(bad.sum()), rng)
    if np.any(~fam.in_support(z)):
        raise DomainError(f"Samples left the {dyn.family.kind} support after redrawing")
    return z


def _inputs_for_expectation(
    q: NaturalParams, dyn: DynamicsModel, n: int, rng: np.random.Generator
) -> FloatArray:
    """States whose average under lambda(.) estimates E_q[lambda(z)]."""
    if dyn.affine:
        return expfam.moments(q)[0][None, :]
    return _draw_in_support(q, n, dyn, rng)


def predict_raw(
    q_prev: NaturalParams, dyn: DynamicsModel, cfg: EvkfConfig, rng: np.random.Generator
) -> NaturalParams:
    """lambda_bar = E_{q_prev}[lambda(z)] without variance correction."""
    _require_family(q_prev, dyn)
    z = _inputs_for_expectation(q_prev, dyn, cfg.mc_samples_predict, rng)
    lam = dyn.natural_map_batch(z).mean(axis=0)
    if not np.all(np.isfinite(lam)):
        raise NumericError("Predicted natural parameters are not finite")
    return NaturalParams(dyn.family, lam)


def correct_variance(
    q_raw: NaturalParams, q_prev: NaturalParams, dyn: DynamicsModel, cfg: EvkfConfig
) -> NaturalParams:
    """Inflate the predictive variance by the propagated filter uncertainty."""
    if cfg.variance_correction is VarianceCorrection.NONE:
        return q_raw
    tag = q_raw.tag
    if tag.kind is FamilyKind.CONTINUOUS_BERNOULLI:
        return q_raw
    m_prev, P_prev = expfam.moments(q_prev)
    M = dyn.mean_jacobian(m_prev)
    m_bar, P_bar = expfam.moments(q_raw)
    if tag.is_gaussian:
        P = P_bar + M @ P_prev @ M.T
        if tag.kind is FamilyKind.GAUSSIAN_DIAG:
            P = np.diag(np.diag(P))
        return expfam.from_moments(tag, m_bar, P)
    base = np.full(tag.dim, 1.0 / dyn.b0) if isinstance(dyn, MlpGamma) else np.diag(P_bar)
    var = base + (M**2) @ np.diag(P_prev)
    return expfam.from_moments(tag, m_bar, var)


def predict(
    q_prev: NaturalParams, dyn: DynamicsModel, cfg: EvkfConfig, rng: np.random.Generator
) -> NaturalParams:
    """Variational prediction q_bar(z_t), variance-corrected per ``cfg``."""
    return correct_variance(predict_raw(q_prev, dyn, cfg, rng), q_prev, dyn, cfg)


def _prediction_objective(tag: FamilyTag) -> tuple[FloatArray, Any]:
    """Unconstrained coordinates for the oracle and the map back to lambda."""
    L = tag.dim
    if tag.kind is FamilyKind.GAUSSIAN_DENSE:
        tril = np.tril_indices(L)

        def to_lam(x: FloatArray) -> FloatArray:
            chol = np.zeros((L, L))
            chol[tril] = x[L:]
            chol[np.diag_indices(L)] = np.exp(np.diag(chol))
            return expfam.family_of(tag).from_moments(x[:L], chol @ chol.T)

        return np.zeros(L + len(tril[0])), to_lam
    if tag.kind is FamilyKind.GAUSSIAN_DIAG:

        def to_lam(x: FloatArray) -> FloatArray:
            return expfam.family_of(tag).from_moments(x[:L], np.exp(x[L:]))

        return np.zeros(2 * L), to_lam
    if tag.kind is FamilyKind.CONTINUOUS_BERNOULLI:
        return np.zeros(L), lambda x: np.asarray(x, dtype=np.float64)

    def to_lam(x: FloatArray) -> FloatArray:
        return np.concatenate([np.exp(x[:L]) - 1.0, -np.exp(x[L:])])

    return np.zeros(2 * L), to_lam


def predict_oracle(
    q_prev: NaturalParams,
    dyn: DynamicsModel,
    rng: np.random.Generator,
    n_samples: int = 4000,
    x0: ArrayLike | None = None,
) -> NaturalParams:
    """Minimize the prediction free energy numerically over lambda_bar.

    F(lambda_bar) = -H(q_bar) - E_{q_bar} E_{q_prev}[log p(z_t | z_{t-1})], with the
    inner expectation estimated from fresh draws of q_prev and the outer one taken
    in closed form through mu_bar. Nothing is shared with ``predict``, so the two
    only agree when the closed form is right. Only meant for low dimension.
    """
    _require_family(q_prev, dyn)
    tag = dyn.family
    fam = expfam.family_of(tag)
    lams = dyn.natural_map_batch(_draw_in_support(q_prev, n_samples, dyn, rng))
    log_parts = fam.log_partition_batch(lams)
    start, to_lam = _prediction_objective(tag)
    if x0 is not None:
        start = np.asarray(x0, dtype=np.float64)

    def free_energy(x: FloatArray) -> float:
        try:
            lam = to_lam(x)
            mu = fam.mean(lam)
            cross = float(np.mean(lams @ mu - log_parts))
            value = float(lam @ mu - fam.log_partition(lam)) - cross
        except (InvalidParameterError, np.linalg.LinAlgError):
            return np.inf
        return value if np.isfinite(value) else np.inf

    result = optimize.minimize(free_energy, start, method="BFGS", options={"gtol": 1e-9})
    if not np.all(np.isfinite(result.x)):
        raise NumericError("Prediction oracle diverged", last_valid=result.x)
    if not result.success:
        _LOGGER.warning("Prediction oracle stopped early: %s", result.message)
    return NaturalParams(tag, to_lam(result.x))


def _cvi_objective(
    obs: ObservationModel,
    tag: FamilyTag,
    lam: FloatArray,
    lam_bar: FloatArray,
    log_partition_bar: float,
    y: FloatArray,
) -> float:
    """E_q[log p(y | z)] - KL(q || q_bar)."""
    fam = expfam.family_of(tag)
    fam.validate(lam)
    mu = fam.mean(lam)
    kl = (lam - lam_bar) @ mu - fam.log_partition(lam) + log_partition_bar
    return float(obs.expected_loglik(NaturalParams(tag, lam), y) - max(kl, 0.0))


def update(
    q_pred: NaturalParams, obs: ObservationModel, y: ArrayLike, cfg: EvkfConfig
) -> tuple[NaturalParams, UpdateInfo]:
    """CVI: lambda <- (1 - beta) lambda + beta (lambda_bar + grad_mu E_q[log p(y | z)]).

    The step size is halved whenever a step leaves the natural domain or lowers
    the objective. Conjugate pairs use a unit step, which lands on the exact
    posterior at once.
    """
    tag = q_pred.tag
    fam = q_pred.family
    obs_vec = np.asarray(y, dtype=np.float64).reshape(-1)
    lam_bar = np.array(q_pred.lam)
    log_partition_bar = fam.log_partition(lam_bar)
    beta = 1.0 if obs.is_conjugate_to(tag) else cfg.cvi_step_size
    lam = lam_bar
    elbo = _cvi_objective(obs, tag, lam, lam_bar, log_partition_bar, obs_vec)
    halvings = 0
    iterations = 0
    for iterations in range(1, cfg.cvi_max_iters + 1):
        grad = obs.grad_mean_params(NaturalParams(tag, lam), obs_vec)
        target = lam_bar + grad
        for _ in range(CVI_MAX_HALVINGS + 1):
            candidate = (1.0 - beta) * lam + beta * target
            try:
                new_elbo = _cvi_objective(obs, tag, candidate, lam_bar, log_partition_bar, obs_vec)
            except (InvalidParameterError, DomainError, NumericError):
                new_elbo = -np.inf
            if np.isfinite(new_elbo) and new_elbo >= elbo - _ELBO_SLACK * (1.0 + abs(elbo)):
                break
            beta *= 0.5
            halvings += 1
            _LOGGER.debug("CVI step rejected, step size halved to %.3g", beta)
        else:
            raise NumericError(
                f"CVI could not make progress after {CVI_MAX_HALVINGS} step halvings",
                last_valid=NaturalParams(tag, lam),
            )
        change = float(np.max(np.abs(candidate - lam)))
        lam, elbo = candidate, new_elbo
        if change < cfg.cvi_tol:
            break
    _LOGGER.debug("CVI finished after %d iterations (elbo %.6g)", iterations, elbo)
    return NaturalParams(tag, lam), UpdateInfo(elbo, iterations, halvings)


def compute_bounds(
    q_prev: NaturalParams,
    q_post: NaturalParams,
    q_pred: NaturalParams,
    dyn: DynamicsModel,
    obs: ObservationModel,
    y: ArrayLike,
    rng: np.random.Generator,
    n_samples: int = DEFAULT_BOUNDS_MC_SAMPLES,
) -> Bounds:
    """Both per-step bounds and their gap.

    L = E_q[log p(y | z)] - KL(q || q_bar) uses the uncorrected prediction and
    M = L - Delta, where Delta = E[A(lambda(z))] - A(E[lambda(z)]) >= 0 is
    estimated from one set of draws from q_prev.
    """
    _require_family(q_prev, dyn)
    fam = q_post.family
    lam_bar = np.asarray(q_pred.lam)
    obs_vec = np.asarray(y, dtype=np.float64).reshape(-1)
    elbo_L = _cvi_objective(
        obs, q_post.tag, np.asarray(q_post.lam), lam_bar, fam.log_partition(lam_bar), obs_vec
    )
    z = _draw_in_support(q_prev, n_samples, dyn, rng)
    lams = dyn.natural_map_batch(z)
    gap = float(np.mean(fam.log_partition_batch(lams)) - fam.log_partition(lams.mean(axis=0)))
    return Bounds(elbo_L, elbo_L - gap, gap)


def _window_expectations(
    pairs: Sequence[tuple[NaturalParams, NaturalParams]],
    dyn: DynamicsModel,
    n: int,
    rng: np.random.Generator,
) -> tuple[FloatArray, FloatArray, int]:
    """Stacked inputs and per-pair averages of lambda(z) over draws from q_{t-1}."""
    inputs = [_inputs_for_expectation(q_prev, dyn, n, rng) for _, q_prev in pairs]
    per_pair = inputs[0].shape[0]
    z = np.concatenate(inputs, axis=0)
    lam_bar = dyn.natural_map_batch(z).reshape(len(pairs), per_pair, -1).mean(axis=1)
    return z, lam_bar, per_pair


def window_loss_and_grad(
    pairs: Sequence[tuple[NaturalParams, NaturalParams]],
    dyn: DynamicsModel,
    cfg: EvkfConfig,
    rng: np.random.Generator,
) -> tuple[float, FloatArray]:
    """Average learning loss and parameter gradient over (lambda*, q_prev) pairs."""
    for lam_star, q_prev in pairs:
        _require_family(q_prev, dyn)
        if lam_star.tag != dyn.family:
            raise FamilyMismatchError(f"Target {lam_star.tag} vs dynamics {dyn.family}")
    fam = expfam.family_of(dyn.family)
    z, lam_bar, per_pair = _window_expectations(pairs, dyn, cfg.learn_mc_samples, rng)
    lam_star = np.stack([np.asarray(p.lam) for p, _ in pairs])
    if cfg.learning_objective is LearningObjective.KL:
        mu_star = np.stack([fam.mean(row) for row in lam_star])
        mu_bar = np.stack([fam.mean(row) for row in lam_bar])
        kl = (
            np.sum((lam_star - lam_bar) * mu_star, axis=1)
            - fam.log_partition_batch(lam_star)
            + fam.log_partition_batch(lam_bar)
        )
        loss = float(np.mean(np.maximum(kl, 0.0)))
        residual = mu_bar - mu_star
    else:
        residual = lam_bar - lam_star
        loss = float(np.mean(0.5 * np.sum(residual**2, axis=1)))
    upstream = np.repeat(residual / (per_pair * len(pairs)), per_pair, axis=0)
    return loss, dyn.natural_map_vjp(z, upstream)


def dynamics_loss_and_grad(
    lambda_star: NaturalParams,
    q_prev: NaturalParams,
    dyn: DynamicsModel,
    cfg: EvkfConfig,
    rng: np.random.Generator,
) -> tuple[float, FloatArray]:
    """Learning loss for one step and its gradient w.r.t. the dynamics parameters."""
    return window_loss_and_grad([(lambda_star, q_prev)], dyn, cfg, rng)


class DynamicsLearner:
    """Owns the dynamics being learned and its optimizer state."""

    def __init__(self, dynamics: DynamicsModel, cfg: EvkfConfig, frozen: bool = False) -> None:
        """Start learning unless frozen, disabled in ``cfg`` or nothing is trainable."""
        self.dynamics = dynamics
        self.cfg = cfg
        self.opt_state = AdamState.zeros(
            dynamics.n_params,
            step_size=cfg.step_size,
            beta1=cfg.beta1,
            beta2=cfg.beta2,
            eps=cfg.eps,
        )
        self.frozen = frozen or cfg.learn_every is None or not dynamics.trainable
        self.updates = 0
        self._window: list[tuple[NaturalParams, NaturalParams]] = []

    def freeze(self) -> None:
        """Stop learning and drop any partial window."""
        if not self.frozen:
            _LOGGER.info("Freezing dynamics after %d updates", self.updates)
        self.frozen = True
        self._window.clear()

    def observe(
        self, lambda_star: NaturalParams, q_prev: NaturalParams, rng: np.random.Generator
    ) -> float | None:
        """Buffer one step; returns the window loss when an update was applied."""
        if self.frozen:
            return None
        self._window.append((lambda_star, q_prev))
        assert self.cfg.learn_every is not None
        if len(self._window) < self.cfg.learn_every:
            return None
        step_fn = sgd_step if self.cfg.optimizer is OptimizerKind.SGD else adam_step
        first_loss = float("nan")
        for epoch in range(self.cfg.learn_epochs):
            loss, grad = window_loss_and_grad(self._window, self.dynamics, self.cfg, rng)
            if epoch == 0:
                first_loss = loss
            params, self.opt_state = step_fn(self.dynamics.parameters(), grad, self.opt_state)
            self.dynamics = self.dynamics.with_parameters(params)
        self._window.clear()
        self.updates += 1
        _LOGGER.info("Dynamics update %d (window loss %.6g)", self.updates, first_loss)
        return first_loss


def step(
    state: FilterState,
    y: ArrayLike,
    dyn: DynamicsModel | DynamicsLearner,
    obs: ObservationModel,
    cfg: EvkfConfig,
    rng: np.random.Generator,
) -> FilterState:
    """Predict, update and (through a learner) learn for one observation."""
    learner = dyn if isinstance(dyn, DynamicsLearner) else None
    model = learner.dynamics if learner is not None else dyn
    assert isinstance(model, DynamicsModel)
    q_prev = state.q_filter
    q_raw = predict_raw(q_prev, model, cfg, rng)
    q_pred = correct_variance(q_raw, q_prev, model, cfg)
    q_post, info = update(q_pred, obs, y, cfg)
    dyn_loss = 0.5 * float(np.sum((np.asarray(q_post.lam) - np.asarray(q_raw.lam)) ** 2))
    bounds = None
    if cfg.compute_bounds:
        bounds = compute_bounds(
            q_prev, q_post, q_raw, model, obs, y, rng, n_samples=cfg.bounds_mc_samples
        )
    learn_loss = learner.observe(q_post, q_prev, rng) if learner is not None else None
    diagnostics = StepDiagnostics(
        t=state.t + 1,
        elbo=info.elbo,
        cvi_iters=info.iterations,
        cvi_halvings=info.halvings,
        dyn_loss=dyn_loss,
        elbo_L=bounds.elbo_L if bounds else float("nan"),
        elbo_M=bounds.elbo_M if bounds else float("nan"),
        gap=bounds.gap if bounds else float("nan"),
        learn_loss=float("nan") if learn_loss is None else learn_loss,
    )
    return FilterState(
        t=state.t + 1,
        q_filter=q_post,
        q_pred=q_pred,
        mu_filter=expfam.mean_from_natural(q_post),
        diagnostics=diagnostics,
    )


@dataclass
class FilterRun:
    """Filtered means, covariances and diagnostics of a pass over a sequence."""

    means: FloatArray
    covariances: FloatArray
    diagnostics: list[StepDiagnostics] = field(default_factory=list)
    states: list[FilterState] = field(default_factory=list)


class EvkfFilter:
    """Stateful driver around ``step`` holding the learner and the RNG."""

    def __init__(
        self,
        dynamics: DynamicsModel,
        obs: ObservationModel,
        cfg: EvkfConfig,
        rng: np.random.Generator,
        q0: NaturalParams | None = None,
        learn: bool = True,
    ) -> None:
        """Set up the filter at t = 0."""
        if obs.latent_dim != dynamics.dim:
            raise FamilyMismatchError(
                f"Observation model expects L={obs.latent_dim}, dynamics has L={dynamics.dim}"
            )
        self.obs = obs
        self.cfg = cfg
        self.rng = rng
        self.learner = DynamicsLearner(dynamics, cfg, frozen=not learn)
        self.state = initial_state(dynamics.family, q0)

    @property
    def dynamics(self) -> DynamicsModel:
        """Current dynamics model."""
        return self.learner.dynamics

    def freeze(self) -> None:
        """Stop learning the dynamics."""
        self.learner.freeze()

    def step(self, y: ArrayLike, timer: StepTimer | None = None) -> FilterState:
        """Advance by one observation."""
        if timer is None:
            self.state = step(self.state, y, self.learner, self.obs, self.cfg, self.rng)
            return self.state
        with timer:
            new_state = step(self.state, y, self.learner, self.obs, self.cfg, self.rng)
        assert new_state.diagnostics is not None
        diagnostics = replace(new_state.diagnostics, wall_us=timer.last_us)
        self.state = replace(new_state, diagnostics=diagnostics)
        return self.state

    def run(
        self,
        observations: Iterable[ArrayLike],
        timer: StepTimer | None = None,
        keep_states: bool = False,
    ) -> FilterRun:
        """Filter a whole sequence."""
        means, covs, diags, states = [], [], [], []
        for y in observations:
            state = self.step(y, timer)
            m, P = expfam.moments(state.q_filter)
            means.append(m)
            covs.append(P)
            assert state.diagnostics is not None
            diags.append(state.diagnostics)
            if keep_states:
                states.append(state)
        L = self.dynamics.dim
        return FilterRun(
            means=np.array(means).reshape(-1, L),
            covariances=np.array(covs).reshape(-1, L, L),
            diagnostics=diags,
            states=states,
        )

