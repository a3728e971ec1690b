"""Evaluation metrics: state RMSE, filtering log-density, dynamics KL and Chamfer."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import TYPE_CHECKING, Any

import numpy as np
from scipy.spatial import distance_matrix

from . import expfam
from .const import (
    ATTRACTOR_KEEP_FRACTION,
    ATTRACTOR_POINTS,
    ATTRACTOR_ROLLOUT_STEPS,
    CHAMFER_CHUNK_ROWS,
    CHAMFER_REPEATS,
    CHAMFER_ROLLOUTS,
    CHAMFER_STEPS,
    PERTURBATION_SCALE,
)
from .dynamics import conditional_kl_batch
from .exceptions import DomainError, FamilyMismatchError, ShapeError
from .expfam import NaturalParams
from .simulate import rollout

if TYPE_CHECKING:
    from collections.abc import Sequence

    from numpy.typing import ArrayLike, NDArray

    from .dynamics import DynamicsModel
    from .filtering import FilterState

    FloatArray = NDArray[np.float64]

_LOGGER = logging.getLogger(__name__)


def rmse(estimates: ArrayLike, truth: ArrayLike) -> float:
    """Root mean squared error over all time steps and coordinates."""
    est = np.asarray(estimates, dtype=np.float64)
    ref = np.asarray(truth, dtype=np.float64)
    if est.shape != ref.shape:
        raise ShapeError(f"Estimates {est.shape} and truth {ref.shape} differ in shape")
    return float(np.sqrt(np.mean((est - ref) ** 2)))


def filtering_log_density(
    states: Sequence[FilterState | NaturalParams], truth: ArrayLike
) -> float:
    """Time-averaged log q(z_t) of the filtering posteriors at the true states.

    A true state outside the support contributes -inf.
    """
    ref = np.atleast_2d(np.asarray(truth, dtype=np.float64))
    if len(states) != ref.shape[0]:
        raise ShapeError(f"{len(states)} filter states for {ref.shape[0]} true states")
    total = 0.0
    for state, z in zip(states, ref, strict=True):
        q = state if isinstance(state, NaturalParams) else state.q_filter
        total += float(expfam.log_density(q, z))
    return total / len(states)


def attractor_samples(
    dyn: DynamicsModel,
    rng: np.random.Generator,
    n_points: int = ATTRACTOR_POINTS,
    n_steps: int = ATTRACTOR_ROLLOUT_STEPS,
    keep_fraction: float = ATTRACTOR_KEEP_FRACTION,
) -> FloatArray:
    """Thinned tail of one long rollout of ``dyn``."""
    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError(f"keep_fraction must be in (0, 1], got {keep_fraction}")
    z0 = expfam.sample(expfam.initial_params(dyn.family), 1, rng)
    path = rollout(dyn, z0, n_steps, rng)[:, 0, :]
    tail = path[n_steps - int(round(keep_fraction * n_steps)) :]
    if tail.shape[0] < n_points:
        raise ValueError(f"Rollout tail has {tail.shape[0]} states, need {n_points}")
    idx = np.linspace(0, tail.shape[0] - 1, n_points).round().astype(int)
    return np.asarray(tail[idx])


def dynamics_kl(
    dyn_true: DynamicsModel,
    dyn_learned: DynamicsModel,
    samples: ArrayLike,
    rng: np.random.Generator,
    scale: float = PERTURBATION_SCALE,
) -> float:
    """Mean KL(p_true(. | z) || p_learned(. | z)) over perturbed attractor points."""
    if dyn_true.family != dyn_learned.family:
        raise FamilyMismatchError(
            f"Cannot compare {dyn_true.family.kind} dynamics with {dyn_learned.family.kind}"
        )
    pts = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    perturbed = dyn_true.clamp_support(pts + scale * rng.standard_normal(pts.shape))
    return float(np.mean(conditional_kl_batch(dyn_true, dyn_learned, perturbed)))


@dataclass(frozen=True)
class PointSet:
    """A non-empty cloud of finite points in R^L."""

    points: FloatArray = field(repr=False)

    def __post_init__(self) -> None:
        """Validate the cloud."""
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] == 0:
            raise ShapeError("A point set needs at least one point")
        if not np.all(np.isfinite(pts)):
            raise DomainError("Point sets must be finite")
        object.__setattr__(self, "points", pts)

    @property
    def dim(self) -> int:
        return int(self.points.shape[1])


@dataclass(frozen=True)
class ChamferResult:
    """Symmetrized Chamfer distance and its two directed halves."""

    value: float
    forward: float
    backward: float

    @property
    def log(self) -> float:
        """Natural log of ``value``."""
        if self.value <= 0.0:
            raise DomainError("Log of a zero Chamfer distance")
        return math.log(self.value)


def _directed(a: FloatArray, b: FloatArray) -> float:
    """Mean over a of the distance to the nearest point of b."""
    nearest = np.concatenate(
        [
            distance_matrix(a[i : i + CHAMFER_CHUNK_ROWS], b).min(axis=1)
            for i in range(0, a.shape[0], CHAMFER_CHUNK_ROWS)
        ]
    )
    return float(nearest.mean())


def chamfer(s1: PointSet | ArrayLike, s2: PointSet | ArrayLike) -> ChamferResult:
    """1/2 (D(S1 || S2) + D(S2 || S1)) with Euclidean nearest neighbours."""
    a = s1 if isinstance(s1, PointSet) else PointSet(np.asarray(s1))
    b = s2 if isinstance(s2, PointSet) else PointSet(np.asarray(s2))
    if a.dim != b.dim:
        raise ShapeError(f"Point sets live in R^{a.dim} and R^{b.dim}")
    forward = _directed(a.points, b.points)
    backward = _directed(b.points, a.points)
    return ChamferResult(0.5 * (forward + backward), forward, backward)


def chamfer_protocol(
    dyn_true: DynamicsModel,
    dyn_learned: DynamicsModel,
    rng: np.random.Generator,
    rollouts: int = CHAMFER_ROLLOUTS,
    steps: int = CHAMFER_STEPS,
    repeats: int = CHAMFER_REPEATS,
) -> tuple[float, float]:
    """Mean and standard deviation of log-Chamfer between pooled rollouts.

    Each repeat starts both models from the same draws of the true model's
    initial distribution.
    """
    prior = expfam.initial_params(dyn_true.family)
    logs = []
    for _ in range(repeats):
        z0s = expfam.sample(prior, rollouts, rng)
        true_cloud = rollout(dyn_true, z0s, steps, rng).reshape(-1, dyn_true.dim)
        learned_cloud = rollout(dyn_learned, z0s, steps, rng).reshape(-1, dyn_learned.dim)
        logs.append(chamfer(true_cloud, learned_cloud).log)
    values = np.asarray(logs)
    _LOGGER.debug("log-Chamfer over %d repeats: %s", repeats, values)
    return float(values.mean()), float(values.std())


@dataclass
class MetricsRecord:
    """One run's metric summary; absent metrics are None."""

    rmse: float | None = None
    log_q: float | None = None
    dynamics_kl: float | None = None
    log_chamfer_mean: float | None = None
    log_chamfer_std: float | None = None
    wall_ms_per_step: float | None = None

    def to_dict(self) -> dict[str, Any]:
        """JSON-ready mapping; non-finite values become None."""
        out: dict[str, Any] = {}
        for key, value in asdict(self).items():
            out[key] = value if value is None or math.isfinite(value) else None
        return out

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> MetricsRecord:
        return cls(**{k: data.get(k) for k in cls.__dataclass_fields__})
