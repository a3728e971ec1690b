"""Tests for run artifacts and ledgers."""

from __future__ import annotations

from typing import TYPE_CHECKING

import pytest

from evkf.diagnostics import (
    HASH_PREFIX,
    Ledger,
    TrialEntry,
    aggregate,
    bounds_summary,
    comparison_markdown,
    read_rows_csv,
    write_comparison,
    write_rows_csv,
)
from evkf.exceptions import ConfigError
from evkf.metrics import MetricsRecord

if TYPE_CHECKING:
    from pathlib import Path


def _ledger(label: str, protocol: str, rmses: list[float | None]) -> Ledger:
    trials = [
        TrialEntry(k, k, f"{label}/trial_{k:03d}", MetricsRecord(rmse=r))
        for k, r in enumerate(rmses)
    ]
    return Ledger(label, f"cfg-{label}", protocol, {"experiment": "lgssm"}, trials)


class TestRowsCsv:
    """Test the hashed CSV format."""

    def test_hash_line_and_values(self, tmp_path: Path) -> None:
        """Test the first line carries the hash and floats keep full precision."""
        path = write_rows_csv(
            tmp_path / "rows.csv",
            [{"t": 1, "x": 0.1, "gap": float("nan")}, {"t": 2, "x": 1 / 3, "gap": float("inf")}],
            "abc123",
        )
        assert path.read_text().startswith(f"{HASH_PREFIX}abc123\n")
        config_hash, rows = read_rows_csv(path)
        assert config_hash == "abc123"
        assert float(rows[1]["x"]) == 1 / 3
        assert rows[0]["gap"] == "nan"
        assert rows[1]["gap"] == "inf"

    def test_empty_rows(self, tmp_path: Path) -> None:
        """Test an empty table still records the hash."""
        config_hash, rows = read_rows_csv(write_rows_csv(tmp_path / "empty.csv", [], "h"))
        assert config_hash == "h"
        assert rows == []

    def test_missing_hash(self, tmp_path: Path) -> None:
        """Test files without a hash line are refused."""
        path = tmp_path / "plain.csv"
        path.write_text("t,x\n1,2\n")
        with pytest.raises(ValueError, match="config hash"):
            read_rows_csv(path)


class TestLedger:
    """Test ledgers and their aggregation."""

    def test_save_and_load(self, tmp_path: Path) -> None:
        """Test a ledger reloads from its run directory."""
        ledger = _ledger("run", "p", [0.5, 0.25])
        ledger.save(tmp_path / "run" / "ledger.json")
        back = Ledger.load(tmp_path / "run")
        assert back.protocol_hash == "p"
        assert [t.metrics.rmse for t in back.trials] == [0.5, 0.25]

    def test_aggregate(self) -> None:
        """Test mean and population std, skipping missing values."""
        rows = aggregate([_ledger("a", "p", [1.0, 3.0, None])])
        assert rows[0]["trials"] == 3
        assert rows[0]["rmse_mean"] == pytest.approx(2.0)
        assert rows[0]["rmse_std"] == pytest.approx(1.0)
        assert rows[0]["log_q_mean"] is None

    def test_mixed_protocols(self) -> None:
        """Test ledgers from different protocols need force."""
        ledgers = [_ledger("a", "p1", [1.0]), _ledger("b", "p2", [2.0])]
        with pytest.raises(ConfigError, match="force"):
            aggregate(ledgers)
        assert len(aggregate(ledgers, force=True)) == 2

    def test_nothing_to_compare(self) -> None:
        """Test an empty comparison is refused."""
        with pytest.raises(ConfigError):
            aggregate([])

    def test_markdown_and_files(self, tmp_path: Path) -> None:
        """Test the table marks missing metrics and both files are written."""
        rows = aggregate([_ledger("a", "p", [1.0]), _ledger("b", "p", [2.0])])
        table = comparison_markdown(rows)
        assert table.splitlines()[0].startswith("| label | trials | rmse")
        assert "n/a" in table
        csv_path, md_path = write_comparison(tmp_path / "cmp", rows)
        assert csv_path.read_text().splitlines()[0].startswith("label,trials,rmse_mean")
        assert md_path.read_text() == table


class TestBoundsSummary:
    """Test the bound-gap summary."""

    def test_counts_violations(self) -> None:
        """Test negative gaps beyond tolerance are counted and NaNs ignored."""
        rows = [{"gap": 0.2}, {"gap": -1e-3}, {"gap": float("nan")}, {"gap": -1e-9}]
        summary = bounds_summary(rows)
        assert summary["rows"] == 4
        assert summary["violations"] == 1
        assert summary["min_gap"] == pytest.approx(-1e-3)

    def test_all_nan(self) -> None:
        """Test a table without finite gaps has no statistics."""
        summary = bounds_summary([{"gap": float("nan")}])
        assert summary["min_gap"] is None
        assert summary["violations"] == 0
