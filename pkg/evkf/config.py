"""Run configuration: one JSON document validated by a voluptuous schema."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, fields
from enum import StrEnum
from pathlib import Path
from typing import Any

import voluptuous as vol

from .const import (
    ATTRACTOR_KEEP_FRACTION,
    ATTRACTOR_POINTS,
    ATTRACTOR_ROLLOUT_STEPS,
    CHAMFER_REPEATS,
    CHAMFER_ROLLOUTS,
    CHAMFER_STEPS,
    DEFAULT_ENSEMBLE_MEMBERS,
    DEFAULT_GAMMA_B0,
    DEFAULT_PARTICLES,
    EXPERIMENT_BY_KEY,
    PERTURBATION_SCALE,
    FamilyKind,
    LearningObjective,
    OptimizerKind,
    VarianceCorrection,
    get_experiment,
)
from .exceptions import ConfigError
from .filtering import EvkfConfig
from .util import sha256_hex

_LOGGER = logging.getLogger(__name__)


class FilterChoice(StrEnum):
    """Filters a run can use."""

    EVKF = "evkf"
    KALMAN = "kalman"
    BPF = "bpf"
    ENKF = "enkf"


class DynamicsChoice(StrEnum):
    """Which transition model the filter runs with."""

    TRUE = "true"  # the generating model, fixed
    LEARNED = "learned"  # random initialisation, learned online
    RANDOM = "random"  # random initialisation, never updated


_POSITIVE_INT = vol.All(int, vol.Range(min=1))
_NON_NEGATIVE_INT = vol.All(int, vol.Range(min=0))
_POSITIVE_FLOAT = vol.All(vol.Coerce(float), vol.Range(min=0.0, min_included=False))

EVKF_SCHEMA = vol.Schema(
    {
        vol.Optional("mc_samples_predict"): _POSITIVE_INT,
        vol.Optional("cvi_step_size"): vol.All(
            vol.Coerce(float), vol.Range(min=0.0, max=1.0, min_included=False)
        ),
        vol.Optional("cvi_max_iters"): _POSITIVE_INT,
        vol.Optional("cvi_tol"): _POSITIVE_FLOAT,
        vol.Optional("variance_correction"): vol.In([v.value for v in VarianceCorrection]),
        vol.Optional("learn_every"): vol.Any(None, _POSITIVE_INT),
        vol.Optional("learn_mc_samples"): _POSITIVE_INT,
        vol.Optional("learn_epochs"): _POSITIVE_INT,
        vol.Optional("learning_objective"): vol.In([v.value for v in LearningObjective]),
        vol.Optional("optimizer"): vol.In([v.value for v in OptimizerKind]),
        vol.Optional("step_size"): _POSITIVE_FLOAT,
        vol.Optional("beta1"): vol.All(vol.Coerce(float), vol.Range(min=0.0, max=1.0)),
        vol.Optional("beta2"): vol.All(vol.Coerce(float), vol.Range(min=0.0, max=1.0)),
        vol.Optional("eps"): _POSITIVE_FLOAT,
        vol.Optional("compute_bounds"): bool,
        vol.Optional("bounds_mc_samples"): _POSITIVE_INT,
    }
)

METRICS_SCHEMA = vol.Schema(
    {
        vol.Optional("dynamics_kl", default=True): bool,
        vol.Optional("chamfer", default=False): bool,
        vol.Optional("attractor_points", default=ATTRACTOR_POINTS): _POSITIVE_INT,
        vol.Optional("attractor_steps", default=ATTRACTOR_ROLLOUT_STEPS): _POSITIVE_INT,
        vol.Optional("attractor_keep", default=ATTRACTOR_KEEP_FRACTION): vol.All(
            vol.Coerce(float), vol.Range(min=0.0, max=1.0, min_included=False)
        ),
        vol.Optional("perturbation_scale", default=PERTURBATION_SCALE): vol.All(
            vol.Coerce(float), vol.Range(min=0.0)
        ),
        vol.Optional("chamfer_rollouts", default=CHAMFER_ROLLOUTS): _POSITIVE_INT,
        vol.Optional("chamfer_steps", default=CHAMFER_STEPS): _POSITIVE_INT,
        vol.Optional("chamfer_repeats", default=CHAMFER_REPEATS): _POSITIVE_INT,
    }
)

RUN_SCHEMA = vol.Schema(
    {
        vol.Required("experiment"): vol.In(sorted(EXPERIMENT_BY_KEY)),
        vol.Optional("label", default=None): vol.Any(None, str),
        vol.Optional("latent_dim", default=None): vol.Any(None, _POSITIVE_INT),
        vol.Optional("obs_dim", default=None): vol.Any(None, _POSITIVE_INT),
        vol.Optional("t_train", default=None): vol.Any(None, _NON_NEGATIVE_INT),
        vol.Optional("t_eval", default=None): vol.Any(None, _NON_NEGATIVE_INT),
        vol.Optional("trials", default=1): _POSITIVE_INT,
        vol.Optional("seed", default=0): _NON_NEGATIVE_INT,
        vol.Optional("out_dir", default="runs"): str,
        vol.Optional("workers", default=None): vol.Any(None, _POSITIVE_INT),
        vol.Optional("filter", default=FilterChoice.EVKF.value): vol.In(
            [v.value for v in FilterChoice]
        ),
        vol.Optional("dynamics", default=DynamicsChoice.LEARNED.value): vol.In(
            [v.value for v in DynamicsChoice]
        ),
        vol.Optional("family", default=None): vol.Any(None, vol.In([v.value for v in FamilyKind])),
        vol.Optional("hidden", default=None): vol.Any(None, _POSITIVE_INT),
        vol.Optional("learn_noise", default=False): bool,
        vol.Optional("gamma_b0", default=DEFAULT_GAMMA_B0): _POSITIVE_FLOAT,
        vol.Optional("evkf", default=dict): EVKF_SCHEMA,
        vol.Optional("particles", default=DEFAULT_PARTICLES): _POSITIVE_INT,
        vol.Optional("ensemble_members", default=DEFAULT_ENSEMBLE_MEMBERS): vol.All(
            int, vol.Range(min=2)
        ),
        vol.Optional("metrics", default=dict): METRICS_SCHEMA,
    }
)

# Keys that define what is measured; runs with equal protocol hashes are comparable.
PROTOCOL_KEYS = ("experiment", "latent_dim", "obs_dim", "t_train", "t_eval", "seed", "trials")
# Keys that never change results.
UNHASHED_KEYS = ("out_dir", "workers", "label")


@dataclass(frozen=True)
class MetricsProtocol:
    """Sizes of the dynamics-KL and Chamfer evaluation protocols."""

    dynamics_kl: bool = True
    chamfer: bool = False
    attractor_points: int = ATTRACTOR_POINTS
    attractor_steps: int = ATTRACTOR_ROLLOUT_STEPS
    attractor_keep: float = ATTRACTOR_KEEP_FRACTION
    perturbation_scale: float = PERTURBATION_SCALE
    chamfer_rollouts: int = CHAMFER_ROLLOUTS
    chamfer_steps: int = CHAMFER_STEPS
    chamfer_repeats: int = CHAMFER_REPEATS


@dataclass(frozen=True)
class RunConfig:
    """A fully resolved run description."""

    experiment: str
    latent_dim: int
    obs_dim: int
    t_train: int
    t_eval: int
    label: str | None = None
    trials: int = 1
    seed: int = 0
    out_dir: str = "runs"
    workers: int | None = None
    filter: FilterChoice = FilterChoice.EVKF
    dynamics: DynamicsChoice = DynamicsChoice.LEARNED
    family: FamilyKind | None = None
    hidden: int | None = None
    learn_noise: bool = False
    gamma_b0: float = DEFAULT_GAMMA_B0
    evkf: EvkfConfig = field(default_factory=EvkfConfig)
    particles: int = DEFAULT_PARTICLES
    ensemble_members: int = DEFAULT_ENSEMBLE_MEMBERS
    metrics: MetricsProtocol = field(default_factory=MetricsProtocol)

    def __post_init__(self) -> None:
        """Cross-field checks the schema cannot express."""
        object.__setattr__(self, "filter", FilterChoice(self.filter))
        object.__setattr__(self, "dynamics", DynamicsChoice(self.dynamics))
        if self.family is not None:
            object.__setattr__(self, "family", FamilyKind(self.family))
        if self.t_train + self.t_eval < 1:
            raise ConfigError("t_train + t_eval must be at least 1", path="t_eval")
        if self.filter is not FilterChoice.EVKF and self.dynamics is not DynamicsChoice.TRUE:
            raise ConfigError(
                f"The {self.filter} filter runs with the true dynamics only", path="dynamics"
            )
        exp = get_experiment(self.experiment)
        if self.filter is FilterChoice.KALMAN and self.experiment != "lgssm":
            raise ConfigError("The kalman filter needs the linear-Gaussian experiment", "filter")
        if self.experiment.startswith("vdp") and self.latent_dim != exp.latent_dim:
            raise ConfigError("Van der Pol is two-dimensional", path="latent_dim")

    @property
    def filter_family(self) -> FamilyKind:
        """Approximating family, defaulting to the data-generating one."""
        return get_experiment(self.experiment).family if self.family is None else self.family

    @property
    def run_label(self) -> str:
        """Directory name for this run's artifacts."""
        if self.label:
            return self.label
        if self.filter is FilterChoice.EVKF:
            return f"evkf-{self.filter_family}-{self.dynamics}"
        return str(self.filter)

    @property
    def out_path(self) -> Path:
        return Path(self.out_dir)

    @property
    def learning(self) -> bool:
        return self.filter is FilterChoice.EVKF and self.dynamics is DynamicsChoice.LEARNED

    def resolved_evkf(self) -> EvkfConfig:
        """EvkfConfig with the experiment's learning cadence filled in when learning."""
        cfg = self.evkf
        if self.learning and cfg.learn_every is None:
            data = cfg.to_dict()
            data["learn_every"] = get_experiment(self.experiment).learn_every
            return EvkfConfig(**data)
        return cfg

    def to_dict(self) -> dict[str, Any]:
        """Plain-JSON view that ``from_dict`` turns back into an equal config."""
        out: dict[str, Any] = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "evkf":
                value = {
                    k: str(v) if isinstance(v, StrEnum) else v for k, v in value.to_dict().items()
                }
            elif f.name == "metrics":
                value = {g.name: getattr(value, g.name) for g in fields(value)}
            elif isinstance(value, StrEnum):
                value = str(value)
            out[f.name] = value
        return out

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> RunConfig:
        """Validate ``data`` and resolve experiment defaults.

        Raises:
            ConfigError: On unknown keys, missing keys or invalid values.
        """
        try:
            clean = RUN_SCHEMA(data)
        except vol.MultipleInvalid as err:
            first = err.errors[0]
            path = ".".join(str(p) for p in first.path)
            raise ConfigError(first.msg, path=path or None) from err
        exp = get_experiment(clean["experiment"])
        for key, default in (
            ("latent_dim", exp.latent_dim),
            ("obs_dim", exp.obs_dim),
            ("t_train", exp.t_train),
            ("t_eval", exp.t_eval),
        ):
            if clean[key] is None:
                clean[key] = default
        clean["evkf"] = EvkfConfig(**clean["evkf"])
        clean["metrics"] = MetricsProtocol(**clean["metrics"])
        return cls(**clean)

    def with_overrides(
        self, out_dir: str | None = None, seed: int | None = None, trials: int | None = None
    ) -> RunConfig:
        """Copy with command-line overrides applied."""
        data = self.to_dict()
        if out_dir is not None:
            data["out_dir"] = out_dir
        if seed is not None:
            data["seed"] = seed
        if trials is not None:
            data["trials"] = trials
        return RunConfig.from_dict(data)

    @property
    def config_hash(self) -> str:
        """Hash of every field that can change results."""
        data = self.to_dict()
        for key in UNHASHED_KEYS:
            data.pop(key)
        return sha256_hex(data)

    @property
    def protocol_hash(self) -> str:
        """Hash of the experiment and evaluation protocol only."""
        data = self.to_dict()
        protocol = {key: data[key] for key in PROTOCOL_KEYS}
        protocol["metrics"] = data["metrics"]
        return sha256_hex(protocol)


def load_config(path: Path) -> RunConfig:
    """Read and validate a JSON run configuration.

    Raises:
        ConfigError: With the line number for JSON syntax errors, or the key
            path for schema violations.
        FileNotFoundError: If ``path`` does not exist.
    """
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigError(f"Invalid JSON in {path}: {err.msg}", line=err.lineno) from err
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must contain a JSON object")
    cfg = RunConfig.from_dict(data)
    _LOGGER.debug("Loaded config %s (hash %s)", path, cfg.config_hash[:12])
    return cfg
