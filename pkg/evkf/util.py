"""Utility functions and classes for evkf runs."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from typing import TYPE_CHECKING, Any

import numpy as np

if TYPE_CHECKING:
    from types import TracebackType

_LOGGER = logging.getLogger(__name__)


class StepTimer:
    """Accumulates wall-clock time of the code run inside ``with timer:``.

    Uses the monotonic nanosecond clock so timings are immune to clock changes.
    The timer only measures the enclosed block, which the filter keeps to one
    ``step`` call.
    """

    def __init__(self, logger: logging.Logger | None = None) -> None:
        """Initialize an empty timer.

        Args:
            logger: Optional logger for debug output.
        """
        self._logger = logger or _LOGGER
        self._start: int | None = None
        self.last_ns = 0
        self.total_ns = 0
        self.count = 0

    def __enter__(self) -> StepTimer:
        """Start timing."""
        self._start = time.monotonic_ns()
        return self

    def __exit__(
        self,
        exc_type: type[BaseException] | None,
        exc: BaseException | None,
        tb: TracebackType | None,
    ) -> None:
        """Stop timing and record the interval, also when the block raised."""
        if self._start is None:
            return
        self.last_ns = time.monotonic_ns() - self._start
        self._start = None
        self.total_ns += self.last_ns
        self.count += 1

    @property
    def last_us(self) -> float:
        """Duration of the most recent interval in microseconds."""
        return self.last_ns / 1e3

    @property
    def mean_us(self) -> float:
        """Mean interval in microseconds; NaN before the first one."""
        if self.count == 0:
            return float("nan")
        return self.total_ns / self.count / 1e3

    @property
    def mean_ms(self) -> float:
        return self.mean_us / 1e3

    def reset(self) -> None:
        """Forget all recorded intervals."""
        self._logger.debug("Timer reset after %d intervals", self.count)
        self.last_ns = self.total_ns = self.count = 0


def canonical_json(data: Any) -> str:
    """Sorted, whitespace-free JSON used for hashing."""
    return json.dumps(data, sort_keys=True, separators=(",", ":"))


def sha256_hex(data: Any) -> str:
    """SHA-256 of the canonical JSON form of ``data``."""
    return hashlib.sha256(canonical_json(data).encode()).hexdigest()


def spawn_rngs(seed: int, n: int) -> list[np.random.Generator]:
    """``n`` independent generators derived from one seed."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def trial_seed(seed: int, trial: int) -> int:
    """Seed of trial ``trial`` in a run seeded with ``seed``."""
    state = np.random.SeedSequence(seed).spawn(trial + 1)[trial].generate_state(2, np.uint32)
    return int(state[0]) << 32 | int(state[1])
