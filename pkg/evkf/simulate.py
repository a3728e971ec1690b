"""Synthetic systems: ancestral sampling, rollouts and dataset files."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Any, NamedTuple

import numpy as np

from . import expfam
from .approximators import Activation, Mlp
from .const import (
    CB_GAIN,
    CB_OBS_VARIANCE,
    CB_ROTATION,
    CRNN_DT,
    CRNN_GAMMA,
    CRNN_OBS_VARIANCE,
    CRNN_Q,
    CRNN_TAU,
    DEFAULT_GAMMA_B0,
    GAMMA_BASE_RATE,
    GAMMA_GAIN,
    GAMMA_ROTATION,
    LGSSM_OBS_VARIANCE,
    LGSSM_Q,
    LGSSM_SPECTRAL_RADIUS,
    READOUT_ROW_NORM,
    VDP_BASE_RATE,
    VDP_OBS_VARIANCE,
    ObservationKind,
    get_experiment,
)
from .dynamics import (
    DynamicsModel,
    LinearGaussian,
    MlpCB,
    MlpGamma,
    builtin_crnn,
    builtin_vdp,
    dynamics_from_dict,
    random_crnn_weights,
)
from .exceptions import DomainError, ShapeError, SimulationError
from .observations import (
    LinearGaussianObs,
    ObservationModel,
    PoissonExp,
    observation_from_dict,
)

if TYPE_CHECKING:
    from numpy.typing import ArrayLike, NDArray

    FloatArray = NDArray[np.float64]

_LOGGER = logging.getLogger(__name__)

CSV_FORMAT = "%.17g"


@dataclass(frozen=True)
class Trajectory:
    """Ground-truth latents (T, L) and observations (T, N) with a meta record."""

    latents: FloatArray = field(repr=False)
    observations: FloatArray = field(repr=False)
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        """Check that the two series line up."""
        latents = np.atleast_2d(np.asarray(self.latents, dtype=np.float64))
        observations = np.atleast_2d(np.asarray(self.observations, dtype=np.float64))
        if latents.shape[0] != observations.shape[0]:
            raise ShapeError(
                f"{latents.shape[0]} latent rows but {observations.shape[0]} observation rows"
            )
        object.__setattr__(self, "latents", latents)
        object.__setattr__(self, "observations", observations)

    @property
    def length(self) -> int:
        """Number of time steps T."""
        return int(self.latents.shape[0])

    @property
    def latent_dim(self) -> int:
        return int(self.latents.shape[1])

    @property
    def obs_dim(self) -> int:
        return int(self.observations.shape[1])

    def slice(self, start: int, stop: int | None = None) -> Trajectory:
        """Sub-trajectory over [start, stop)."""
        meta = {**self.meta, "offset": self.meta.get("offset", 0) + start}
        return Trajectory(self.latents[start:stop], self.observations[start:stop], meta)


class Experiment(NamedTuple):
    """A generated dataset together with the models that produced it."""

    dynamics: DynamicsModel
    observations: ObservationModel
    trajectory: Trajectory


def _partial(latents: list[FloatArray], ys: list[FloatArray], L: int, N: int) -> Trajectory:
    return Trajectory(
        np.array(latents).reshape(-1, L), np.array(ys).reshape(-1, N), {"truncated": True}
    )


def simulate(
    dyn: DynamicsModel,
    obs: ObservationModel,
    z0: ArrayLike,
    T: int,
    rng: np.random.Generator,
) -> Trajectory:
    """Ancestral sampling of z_1..z_T from z0 and y_t given z_t.

    Raises:
        DomainError: If z0 is outside the support of the dynamics.
        SimulationError: If a state leaves the support or an observation is
            non-finite; the error carries the rollout up to that step.
    """
    if T < 1:
        raise ValueError(f"T must be at least 1, got {T}")
    if obs.latent_dim != dyn.dim:
        raise ShapeError(f"Observation model expects L={obs.latent_dim}, dynamics has {dyn.dim}")
    fam = expfam.family_of(dyn.family)
    z = np.asarray(z0, dtype=np.float64).reshape(1, dyn.dim)
    if not fam.in_support(z)[0]:
        raise DomainError(f"Initial state {z[0]} is outside the {dyn.family.kind} support")

    latents: list[FloatArray] = []
    ys: list[FloatArray] = []
    for t in range(T):
        z = dyn.conditional_sample_batch(z, rng)
        if not (np.all(np.isfinite(z)) and fam.in_support(z)[0]):
            raise SimulationError(
                f"State left the support at t={t + 1}",
                _partial(latents, ys, dyn.dim, obs.obs_dim),
            )
        y = obs.sample_batch(z, rng)[0]
        if not np.all(np.isfinite(y)):
            raise SimulationError(
                f"Non-finite observation at t={t + 1}",
                _partial(latents, ys, dyn.dim, obs.obs_dim),
            )
        latents.append(z[0])
        ys.append(y)
    return Trajectory(np.array(latents), np.array(ys))


def rollout(
    dyn: DynamicsModel, z0s: ArrayLike, T: int, rng: np.random.Generator
) -> FloatArray:
    """Run a batch of chains in parallel; returns shape (T, n, L)."""
    z = np.atleast_2d(np.asarray(z0s, dtype=np.float64))
    if z.shape[1] != dyn.dim:
        raise ShapeError(f"Initial states need {dyn.dim} columns, got {z.shape[1]}")
    out = np.empty((T, z.shape[0], dyn.dim))
    for t in range(T):
        z = dyn.conditional_sample_batch(z, rng)
        out[t] = z
    if not np.all(np.isfinite(out)):
        raise SimulationError("Rollout produced non-finite states")
    return out


def planar_rotation(L: int, angle: float) -> FloatArray:
    """Block-diagonal rotation by ``angle`` in consecutive coordinate pairs."""
    R = np.eye(L)
    c, s = math.cos(angle), math.sin(angle)
    for i in range(0, L - 1, 2):
        R[i : i + 2, i : i + 2] = [[c, -s], [s, c]]
    return R


def _shifted_linear_net(
    L: int,
    center: float,
    gain_matrix: FloatArray,
    out_bias: float,
    output_activation: Activation,
) -> Mlp:
    """One SiLU layer computing act(out_bias + G (z - center)) exactly.

    Uses silu(a) - silu(-a) = a on the hidden pair [z - c, c - z].
    """
    eye = np.eye(L)
    weights = (np.vstack([eye, -eye]), gain_matrix @ np.hstack([eye, -eye]))
    biases = (
        np.concatenate([np.full(L, -center), np.full(L, center)]),
        np.full(L, out_bias),
    )
    return Mlp(weights, biases, output_activation)


def cb_system(L: int, gain: float = CB_GAIN, angle: float = CB_ROTATION) -> MlpCB:
    """CB dynamics whose natural parameter rotates around the centre of the cube."""
    return MlpCB(
        _shifted_linear_net(L, 0.5, gain * planar_rotation(L, angle), 0.0, Activation.IDENTITY)
    )


def gamma_system(
    L: int, gain: float = GAMMA_GAIN, angle: float = GAMMA_ROTATION, b0: float = DEFAULT_GAMMA_B0
) -> MlpGamma:
    """Gamma dynamics spiralling around the fixed point z = 1."""
    out_bias = math.log(math.e - 1.0)
    net = _shifted_linear_net(
        L, 1.0, gain * planar_rotation(L, angle), out_bias, Activation.SOFTPLUS
    )
    return MlpGamma(net, b0)


def stable_linear_dynamics(
    L: int, rng: np.random.Generator, radius: float = LGSSM_SPECTRAL_RADIUS
) -> LinearGaussian:
    """A = radius * random orthogonal matrix, Q = LGSSM_Q * I."""
    Qmat, Rmat = np.linalg.qr(rng.standard_normal((L, L)))
    orth = Qmat * np.sign(np.diag(Rmat))
    return LinearGaussian(radius * orth, LGSSM_Q * np.eye(L))


def poisson_readout(
    L: int, N: int, dt: float, base_rate: float, rng: np.random.Generator
) -> PoissonExp:
    """Random loadings with rows of norm READOUT_ROW_NORM and log-rate offsets near base_rate."""
    C = rng.standard_normal((N, L))
    C *= READOUT_ROW_NORM / np.linalg.norm(C, axis=1, keepdims=True)
    b = math.log(base_rate) + 0.1 * rng.standard_normal(N)
    return PoissonExp(C, b, dt)


def gaussian_readout(
    L: int, N: int, variance: float, rng: np.random.Generator
) -> LinearGaussianObs:
    """Loadings N(0, 1/L), no offset."""
    return LinearGaussianObs(rng.standard_normal((N, L)) / math.sqrt(L), np.zeros(N), variance)


def _build_models(
    name: str, L: int, N: int, rng: np.random.Generator
) -> tuple[DynamicsModel, ObservationModel]:
    exp = get_experiment(name)
    if name in ("vdp_poisson", "vdp_gaussian") and L != 2:
        raise ShapeError(f"Van der Pol is two-dimensional, got L={L}")
    dyn: DynamicsModel
    if name == "lgssm":
        dyn = stable_linear_dynamics(L, rng)
        return dyn, gaussian_readout(L, N, LGSSM_OBS_VARIANCE, rng)
    if name == "crnn":
        W = random_crnn_weights(L, rng)
        dyn = builtin_crnn(L, CRNN_GAMMA, W, CRNN_DT, CRNN_TAU, CRNN_Q * np.eye(L))
        return dyn, gaussian_readout(L, N, CRNN_OBS_VARIANCE, rng)
    if name == "cb":
        return cb_system(L), gaussian_readout(L, N, CB_OBS_VARIANCE, rng)
    if name == "gamma":
        return gamma_system(L), poisson_readout(L, N, exp.dt, GAMMA_BASE_RATE, rng)
    dyn = builtin_vdp()
    if exp.observation is ObservationKind.POISSON:
        return dyn, poisson_readout(L, N, exp.dt, VDP_BASE_RATE, rng)
    return dyn, gaussian_readout(L, N, VDP_OBS_VARIANCE, rng)


def make_experiment(
    name: str,
    L: int | None = None,
    N: int | None = None,
    seed: int = 0,
    T: int | None = None,
) -> Experiment:
    """Build a named synthetic system and sample one trajectory from it.

    The model and the data draw from separate child streams of ``seed``, so the
    same (name, L, N, seed) always gives the same system whatever T is.

    Raises:
        KeyError: If ``name`` is not a known experiment.
    """
    exp = get_experiment(name)
    L = exp.latent_dim if L is None else L
    N = exp.obs_dim if N is None else N
    T = exp.t_train + exp.t_eval if T is None else T
    model_rng, data_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    dyn, obs = _build_models(name, L, N, model_rng)
    z0 = expfam.sample(expfam.initial_params(dyn.family), 1, data_rng)[0]
    _LOGGER.info("Simulating %s: L=%d N=%d T=%d seed=%d", name, L, N, T, seed)
    traj = simulate(dyn, obs, z0, T, data_rng)
    meta = {
        "system": name,
        "seed": seed,
        "dt": exp.dt,
        "latent_dim": L,
        "obs_dim": N,
        "z0": z0.tolist(),
        "dynamics": dyn.to_dict(),
        "observation": obs.to_dict(),
    }
    return Experiment(dyn, obs, Trajectory(traj.latents, traj.observations, meta))


def meta_path(csv_path: Path) -> Path:
    """Location of the JSON sidecar of a trajectory CSV."""
    return csv_path.with_suffix(".json")


def save_trajectory(traj: Trajectory, path: Path, extra_meta: dict[str, Any] | None = None) -> Path:
    """Write ``path`` (CSV: t, z_1..z_L, y_1..y_N) and its JSON sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    L, N = traj.latent_dim, traj.obs_dim
    header = ",".join(["t", *(f"z{i + 1}" for i in range(L)), *(f"y{i + 1}" for i in range(N))])
    t = np.arange(1, traj.length + 1, dtype=np.float64)[:, None]
    table = np.hstack([t, traj.latents, traj.observations])
    np.savetxt(path, table, fmt=CSV_FORMAT, delimiter=",", header=header, comments="")
    meta = {**traj.meta, **(extra_meta or {}), "latent_dim": L, "obs_dim": N}
    meta_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    _LOGGER.info("Wrote trajectory %s (T=%d)", path, traj.length)
    return path


def load_trajectory(path: Path) -> Trajectory:
    """Read a trajectory written by ``save_trajectory``."""
    path = Path(path)
    meta = json.loads(meta_path(path).read_text())
    table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    L = int(meta["latent_dim"])
    return Trajectory(table[:, 1 : 1 + L], table[:, 1 + L :], meta)


def models_from_meta(meta: dict[str, Any]) -> tuple[DynamicsModel, ObservationModel]:
    """Generator models embedded in a trajectory's meta record."""
    return dynamics_from_dict(meta["dynamics"]), observation_from_dict(meta["observation"])
