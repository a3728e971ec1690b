"""Run artifacts: per-step diagnostics, metrics, checkpoints and ledgers."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Any

import numpy as np

from .dynamics import DynamicsModel, dynamics_from_dict
from .exceptions import ConfigError
from .metrics import MetricsRecord

if TYPE_CHECKING:
    from collections.abc import Iterable, Sequence

    from .filtering import StepDiagnostics

_LOGGER = logging.getLogger(__name__)

HASH_PREFIX = "# config_hash="
DIAGNOSTICS_FILE = "diagnostics.csv"
METRICS_FILE = "metrics.json"
CHECKPOINT_FILE = "checkpoint.json"
BOUNDS_FILE = "bounds.csv"
BOUNDS_SUMMARY_FILE = "bounds_summary.json"
LEDGER_FILE = "ledger.json"

METRIC_KEYS = (
    "rmse",
    "log_q",
    "dynamics_kl",
    "log_chamfer_mean",
    "log_chamfer_std",
    "wall_ms_per_step",
)


def write_json(path: Path, data: dict[str, Any]) -> Path:
    """Deterministic JSON (sorted keys, trailing newline)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    return path


def read_json(path: Path) -> dict[str, Any]:
    data: dict[str, Any] = json.loads(Path(path).read_text())
    return data


def _csv_value(value: Any) -> Any:
    if isinstance(value, float) and not math.isfinite(value):
        return "nan" if math.isnan(value) else repr(value)
    if isinstance(value, float):
        return repr(value)
    return value


def write_rows_csv(path: Path, rows: Sequence[dict[str, Any]], config_hash: str) -> Path:
    """CSV with a leading ``# config_hash=`` line; floats written with repr precision."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        fh.write(f"{HASH_PREFIX}{config_hash}\n")
        if not rows:
            return path
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _csv_value(v) for k, v in row.items()})
    return path


def read_rows_csv(path: Path) -> tuple[str, list[dict[str, str]]]:
    """Config hash and raw string rows of a file written by ``write_rows_csv``."""
    with Path(path).open(newline="") as fh:
        first = fh.readline().rstrip("\n")
        if not first.startswith(HASH_PREFIX):
            raise ValueError(f"{path} does not start with a config hash line")
        return first[len(HASH_PREFIX) :], list(csv.DictReader(fh))


def diagnostics_rows(
    diagnostics: Iterable[StepDiagnostics], phase: str
) -> list[dict[str, Any]]:
    """Rows for the per-step diagnostics CSV, tagged with the protocol phase."""
    return [{"phase": phase, **d.as_row()} for d in diagnostics]


def write_metrics(
    path: Path, record: MetricsRecord, config_hash: str, trial: int, seed: int
) -> Path:
    return write_json(
        path,
        {"config_hash": config_hash, "trial": trial, "seed": seed, "metrics": record.to_dict()},
    )


def write_checkpoint(path: Path, dynamics: DynamicsModel, config_hash: str) -> Path:
    """Frozen dynamics parameters."""
    return write_json(path, {"config_hash": config_hash, "dynamics": dynamics.to_dict()})


def read_checkpoint(path: Path) -> DynamicsModel:
    return dynamics_from_dict(read_json(path)["dynamics"])


def bounds_summary(rows: Sequence[dict[str, Any]]) -> dict[str, Any]:
    """Row count and min / mean of the per-step bound gap."""
    gaps = np.array([row["gap"] for row in rows], dtype=np.float64)
    finite = gaps[np.isfinite(gaps)]
    return {
        "rows": len(rows),
        "min_gap": float(finite.min()) if finite.size else None,
        "mean_gap": float(finite.mean()) if finite.size else None,
        "violations": int(np.sum(finite < -1e-6)),
    }


@dataclass
class TrialEntry:
    """One trial's artifacts as listed in a ledger."""

    trial: int
    seed: int
    directory: str
    metrics: MetricsRecord
    diagnostics: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "trial": self.trial,
            "seed": self.seed,
            "directory": self.directory,
            "metrics": self.metrics.to_dict(),
            "diagnostics": self.diagnostics,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> TrialEntry:
        return cls(
            trial=data["trial"],
            seed=data["seed"],
            directory=data["directory"],
            metrics=MetricsRecord.from_dict(data["metrics"]),
            diagnostics=data.get("diagnostics", {}),
        )


@dataclass
class Ledger:
    """Index of a run: its config, hashes and per-trial metrics."""

    label: str
    config_hash: str
    protocol_hash: str
    config: dict[str, Any]
    trials: list[TrialEntry] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "label": self.label,
            "config_hash": self.config_hash,
            "protocol_hash": self.protocol_hash,
            "config": self.config,
            "trials": [t.to_dict() for t in sorted(self.trials, key=lambda t: t.trial)],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> Ledger:
        return cls(
            label=data["label"],
            config_hash=data["config_hash"],
            protocol_hash=data["protocol_hash"],
            config=data["config"],
            trials=[TrialEntry.from_dict(t) for t in data["trials"]],
        )

    def save(self, path: Path) -> Path:
        write_json(path, self.to_dict())
        _LOGGER.info("Wrote ledger %s (%d trials)", path, len(self.trials))
        return path

    @classmethod
    def load(cls, path: Path) -> Ledger:
        """Read a ledger file, or ``ledger.json`` inside a run directory."""
        path = Path(path)
        if path.is_dir():
            path = path / LEDGER_FILE
        return cls.from_dict(read_json(path))


def aggregate(ledgers: Sequence[Ledger], force: bool = False) -> list[dict[str, Any]]:
    """Mean and population std of every metric, one row per ledger.

    Raises:
        ConfigError: If the ledgers were produced under different protocols
            and ``force`` is not set.
    """
    if not ledgers:
        raise ConfigError("Nothing to compare")
    protocols = {ledger.protocol_hash for ledger in ledgers}
    if len(protocols) > 1:
        if not force:
            raise ConfigError(
                f"Ledgers use {len(protocols)} different protocols; pass --force to compare"
            )
        _LOGGER.warning("Comparing ledgers from %d different protocols", len(protocols))
    rows = []
    for ledger in ledgers:
        row: dict[str, Any] = {"label": ledger.label, "trials": len(ledger.trials)}
        for key in METRIC_KEYS:
            values = [getattr(t.metrics, key) for t in ledger.trials]
            present = np.array([v for v in values if v is not None], dtype=np.float64)
            if present.size:
                row[f"{key}_mean"] = float(present.mean())
                row[f"{key}_std"] = float(present.std())
            else:
                row[f"{key}_mean"] = row[f"{key}_std"] = None
        rows.append(row)
    return rows


def comparison_markdown(rows: Sequence[dict[str, Any]]) -> str:
    """Table of ``mean ± std`` cells."""
    header = ["label", "trials", *METRIC_KEYS]
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    for row in rows:
        cells = [str(row["label"]), str(row["trials"])]
        for key in METRIC_KEYS:
            mean, std = row[f"{key}_mean"], row[f"{key}_std"]
            cells.append("n/a" if mean is None else f"{mean:.4g} ± {std:.2g}")
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def write_comparison(out_dir: Path, rows: Sequence[dict[str, Any]]) -> tuple[Path, Path]:
    """``comparison.csv`` and ``comparison.md`` under ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "comparison.csv"
    with csv_path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows([{k: _csv_value(v) for k, v in row.items()} for row in rows])
    md_path = out_dir / "comparison.md"
    md_path.write_text(comparison_markdown(rows))
    _LOGGER.info("Wrote comparison of %d runs to %s", len(rows), out_dir)
    return csv_path, md_path


def summarize_run(
    diagnostics: Sequence[StepDiagnostics], dynamics: DynamicsModel | None, updates: int
) -> dict[str, Any]:
    """Compact diagnostic summary of one filter pass for the ledger."""
    iters = np.array([d.cvi_iters for d in diagnostics], dtype=np.float64)
    return {
        "steps": len(diagnostics),
        "mean_cvi_iters": float(iters.mean()) if iters.size else None,
        "cvi_halvings": int(sum(d.cvi_halvings for d in diagnostics)),
        "dynamics_updates": updates,
        "dynamics_kind": dynamics.kind if dynamics is not None else None,
        "dynamics_params": dynamics.n_params if dynamics is not None else 0,
    }
