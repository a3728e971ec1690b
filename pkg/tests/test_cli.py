"""Tests for the command-line entry point."""

from __future__ import annotations

import json
from typing import TYPE_CHECKING, Any
from unittest.mock import AsyncMock, patch

import pytest

from evkf.cli import main
from evkf.const import EXIT_CONFIG_ERROR, EXIT_FAILURE, EXIT_NUMERIC_ERROR, EXIT_OK
from evkf.exceptions import NumericError, SimulationError

if TYPE_CHECKING:
    from collections.abc import Callable
    from pathlib import Path

SMALL_RUN: dict[str, Any] = {
    "experiment": "lgssm",
    "t_train": 0,
    "t_eval": 8,
    "trials": 2,
    "workers": 1,
    "dynamics": "true",
    "metrics": {"attractor_points": 10, "attractor_steps": 100},
}


class TestSimulate:
    """Test ``evkf simulate``."""

    def test_two_files_per_trial(self, write_config: Callable[..., Path], tmp_path: Path) -> None:
        """Test each trial writes its CSV and its sidecar."""
        path = write_config(**SMALL_RUN)
        assert main(["simulate", "--config", str(path), "--trials", "3"]) == EXIT_OK
        files = sorted(p.name for p in (tmp_path / "out" / "data").iterdir())
        assert len(files) == 6
        assert files[:2] == ["trial_000.csv", "trial_000.json"]

    def test_out_override(self, write_config: Callable[..., Path], tmp_path: Path) -> None:
        """Test --out redirects the datasets."""
        path = write_config(**SMALL_RUN)
        assert main(["simulate", "--config", str(path), "--out", str(tmp_path / "alt")]) == 0
        assert (tmp_path / "alt" / "data" / "trial_001.csv").exists()


class TestExitCodes:
    """Test failures map to exit codes."""

    def test_missing_config(self, tmp_path: Path) -> None:
        """Test a missing file is a configuration error."""
        assert main(["filter", "--config", str(tmp_path / "nope.json")]) == EXIT_CONFIG_ERROR

    def test_invalid_config(self, write_config: Callable[..., Path]) -> None:
        """Test a schema violation is a configuration error."""
        path = write_config(experiment="lgssm", trials=0)
        assert main(["filter", "--config", str(path)]) == EXIT_CONFIG_ERROR

    def test_bad_override(self, write_config: Callable[..., Path]) -> None:
        """Test a negative --seed is refused."""
        path = write_config(**SMALL_RUN)
        assert main(["simulate", "--config", str(path), "--seed", "-1"]) == EXIT_CONFIG_ERROR

    def test_numeric_failure(self, write_config: Callable[..., Path]) -> None:
        """Test numerical failures exit with their own code."""
        path = write_config(**SMALL_RUN)
        with patch(
            "evkf.cli.TrialCoordinator.async_filter",
            new=AsyncMock(side_effect=NumericError("diverged")),
        ):
            assert main(["filter", "--config", str(path)]) == EXIT_NUMERIC_ERROR

    def test_other_failure(self, write_config: Callable[..., Path]) -> None:
        """Test remaining package errors exit with the generic code."""
        path = write_config(**SMALL_RUN)
        with patch(
            "evkf.cli.TrialCoordinator.async_simulate",
            new=AsyncMock(side_effect=SimulationError("left the support")),
        ):
            assert main(["simulate", "--config", str(path)]) == EXIT_FAILURE

    def test_unknown_command(self) -> None:
        """Test argparse rejects unknown sub-commands."""
        with pytest.raises(SystemExit):
            main(["train"])


class TestFilterAndCompare:
    """Test running filters and comparing their ledgers."""

    def test_filter_then_compare(
        self,
        write_config: Callable[..., Path],
        tmp_path: Path,
        capsys: pytest.CaptureFixture[str],
    ) -> None:
        """Test two filters on the same protocol compare into a table."""
        evkf = write_config("evkf.json", **SMALL_RUN)
        kalman = write_config("kalman.json", **SMALL_RUN, filter="kalman")
        assert main(["filter", "--config", str(evkf)]) == EXIT_OK
        assert main(["filter", "--config", str(kalman)]) == EXIT_OK
        capsys.readouterr()

        out = tmp_path / "out"
        code = main(
            [
                "compare",
                str(out / "evkf-gaussian_dense-true"),
                str(out / "kalman"),
                "--out",
                str(tmp_path / "cmp"),
            ]
        )
        assert code == EXIT_OK
        table = capsys.readouterr().out
        assert "| evkf-gaussian_dense-true | 2 |" in table
        assert "| kalman | 2 |" in table
        assert (tmp_path / "cmp" / "comparison.csv").exists()
        assert (tmp_path / "cmp" / "comparison.md").read_text() == table

    def test_compare_mixed_protocols(
        self, write_config: Callable[..., Path], tmp_path: Path
    ) -> None:
        """Test ledgers of different seeds need --force."""
        path = write_config(**SMALL_RUN)
        assert main(["filter", "--config", str(path), "--out", str(tmp_path / "a")]) == 0
        args = ["filter", "--config", str(path), "--out", str(tmp_path / "b"), "--seed", "3"]
        assert main(args) == 0
        ledgers = [str(tmp_path / d / "evkf-gaussian_dense-true") for d in ("a", "b")]
        assert main(["compare", *ledgers]) == EXIT_CONFIG_ERROR
        assert main(["compare", *ledgers, "--force"]) == EXIT_OK

    def test_bounds(
        self,
        write_config: Callable[..., Path],
        capsys: pytest.CaptureFixture[str],
    ) -> None:
        """Test the bounds command reports each trial's gap summary."""
        path = write_config(**{**SMALL_RUN, "evkf": {"bounds_mc_samples": 16}})
        assert main(["bounds", "--config", str(path), "--trials", "1"]) == EXIT_OK
        assert "trial 0: rows=8" in capsys.readouterr().out

    def test_ledger_contents(self, write_config: Callable[..., Path], tmp_path: Path) -> None:
        """Test the ledger records the config and both trials."""
        path = write_config(**SMALL_RUN)
        assert main(["filter", "--config", str(path)]) == EXIT_OK
        ledger = json.loads(
            (tmp_path / "out" / "evkf-gaussian_dense-true" / "ledger.json").read_text()
        )
        assert ledger["config"]["experiment"] == "lgssm"
        assert [t["trial"] for t in ledger["trials"]] == [0, 1]
