"""Change-point detection over logprob time series.

Each candidate point ``t`` splits the series into the adjacent windows
``[t - w, t)`` and ``[t, t + w)``; the LT statistic between them is compared
with the running mean and standard deviation of earlier statistics. A point
triggers when it clears both ``mean + k_sigma * std`` and an absolute floor.

Window means are accumulated row by row in a fixed order and all sums over
tokens or statistics use :func:`math.fsum`, so the offline scan and the
incremental :class:`OnlineDetector` produce bit-identical statistics.
"""

from __future__ import annotations

import json
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import IO, Iterable, Sequence

import httpx
import numpy as np

from .errors import InvalidInputError
from .stats import impute_min
from .tokens import SeriesPoint, TokenKey

log = logging.getLogger(__name__)

DEFAULT_WINDOW = 24
DEFAULT_HISTORY = 100
DEFAULT_K_SIGMA = 12.0
DEFAULT_FLOOR = 1.0

_UTC = timezone.utc


@dataclass(frozen=True)
class ChangeEvent:
    """A flagged change; the trigger can be re-checked from the stored fields."""

    timestamp: datetime
    statistic: float
    running_mean: float
    running_std: float
    window: int
    endpoint_id: str = ""
    prompt: str = ""
    index: int = -1
    k_sigma: float = DEFAULT_K_SIGMA
    abs_floor: float = DEFAULT_FLOOR

    def trigger_holds(self) -> bool:
        return _fires(self.statistic, self.running_mean, self.running_std, self.k_sigma, self.abs_floor)

    def to_dict(self) -> dict:
        return {
            "timestamp": format_timestamp(self.timestamp),
            "endpoint_id": self.endpoint_id,
            "prompt": self.prompt,
            "index": self.index,
            "statistic": self.statistic,
            "running_mean": self.running_mean,
            "running_std": self.running_std,
            "window": self.window,
            "k_sigma": self.k_sigma,
            "abs_floor": self.abs_floor,
        }


def format_timestamp(ts: datetime) -> str:
    """RFC 3339 UTC with a ``Z`` suffix and microsecond precision."""
    return ts.astimezone(_UTC).strftime("%Y-%m-%dT%H:%M:%S.%fZ")


def _fires(statistic: float, mean: float, std: float, k_sigma: float, floor: float) -> bool:
    # with std == 0 this is statistic > mean; the floor still guards
    return statistic > mean + k_sigma * std and statistic > floor


# -- dense series -------------------------------------------------------------------


@dataclass(frozen=True)
class DenseSeries:
    """Series laid out on the union vocabulary: imputed values and an observed mask."""

    tokens: tuple[TokenKey, ...]
    filled: np.ndarray
    observed: np.ndarray
    timestamps: tuple[datetime, ...] = ()
    endpoint_id: str = ""
    prompt: str = ""

    @classmethod
    def from_points(cls, points: Sequence[SeriesPoint]) -> DenseSeries:
        tokens = tuple(sorted({t for p in points for t in p.vector.tokens}))
        values, observed = _layout([p.vector.entries for p in points], tokens)
        first = points[0] if points else None
        return cls(
            tokens,
            impute_min(values, observed),
            observed,
            tuple(p.timestamp for p in points),
            first.endpoint_id if first else "",
            first.prompt if first else "",
        )

    def __len__(self) -> int:
        return self.filled.shape[0]


def _layout(rows: Sequence[Sequence[tuple[TokenKey, float]]], tokens: Sequence[TokenKey]):
    column = {t: j for j, t in enumerate(tokens)}
    values = np.zeros((len(rows), len(tokens)))
    observed = np.zeros(values.shape, dtype=bool)
    for i, entries in enumerate(rows):
        for token, logprob in entries:
            j = column[token]
            values[i, j] = logprob
            observed[i, j] = True
    return values, observed


def as_dense(series: Sequence[SeriesPoint] | DenseSeries) -> DenseSeries:
    return series if isinstance(series, DenseSeries) else DenseSeries.from_points(series)


def _window_sums(filled: np.ndarray, w: int) -> np.ndarray:
    """Row sums of every length-``w`` window, added in row order."""
    count = filled.shape[0] - w + 1
    acc = filled[:count].copy()
    for j in range(1, w):
        acc += filled[j : j + count]
    return acc


def _gap_statistic(mean_a: np.ndarray, mean_b: np.ndarray, union: np.ndarray) -> float:
    return math.fsum(np.abs(mean_a - mean_b)[union]) / int(union.sum())


def window_statistics(series: Sequence[SeriesPoint] | DenseSeries, w: int = DEFAULT_WINDOW) -> np.ndarray:
    """Adjacent-window statistic for every valid boundary ``t = w, ..., n - w``."""
    if w < 1:
        raise InvalidInputError(f"window w must be positive, got {w}")
    dense = as_dense(series)
    n = len(dense)
    if n < 2 * w:
        return np.empty(0)
    means = _window_sums(dense.filled, w) / w
    counts = _window_sums(dense.observed.astype(np.int64), w)
    present = counts > 0
    out = np.empty(n - 2 * w + 1)
    for i in range(out.size):
        # boundary t = w + i: window A starts at i, window B at t
        out[i] = _gap_statistic(means[i], means[i + w], present[i] | present[i + w])
    return out


def adjacent_window_statistic(
    series: Sequence[SeriesPoint] | DenseSeries, t: int, w: int = DEFAULT_WINDOW
) -> float | None:
    """LT statistic between points ``[t - w, t)`` and ``[t, t + w)``; None when out of range."""
    if w < 1:
        raise InvalidInputError(f"window w must be positive, got {w}")
    dense = as_dense(series)
    if t < w or t + w > len(dense):
        return None
    block = dense.filled[t - w : t + w]
    seen = dense.observed[t - w : t + w]
    return _block_statistic(block, seen, w)


def _block_statistic(block: np.ndarray, seen: np.ndarray, w: int) -> float:
    mean_a = _window_sums(block[:w], w)[0] / w
    mean_b = _window_sums(block[w:], w)[0] / w
    return _gap_statistic(mean_a, mean_b, seen.any(axis=0))


# -- running statistics -----------------------------------------------------------------


def _mean_std(values: Sequence[float]) -> tuple[float, float]:
    mean = math.fsum(values) / len(values)
    var = math.fsum((v - mean) ** 2 for v in values) / (len(values) - 1)
    return mean, math.sqrt(var)


def running_stats(
    stats: Sequence[float], window: int = DEFAULT_HISTORY, lag: int = 0
) -> list[tuple[float, float] | None]:
    """Trailing mean and sample std for each index.

    Index ``i`` summarises ``stats[i - lag - window : i - lag]``; indices
    without ``window`` such values get None. ``lag`` excludes the most recent
    values from the history.
    """
    if window < 2:
        raise InvalidInputError(f"running window must be >= 2, got {window}")
    if lag < 0:
        raise InvalidInputError(f"lag must be nonnegative, got {lag}")
    values = [float(s) for s in stats]
    out: list[tuple[float, float] | None] = []
    for i in range(len(values)):
        end = i - lag
        out.append(_mean_std(values[end - window : end]) if end >= window else None)
    return out


# -- trigger state machine ----------------------------------------------------------------


@dataclass
class _Trigger:
    """Groups consecutive triggered boundaries and emits the strongest one."""

    k_sigma: float
    floor: float
    cooldown: int
    run: tuple[int, float, float, float] | None = None
    quiet_until: int = -1

    def step(self, t: int, statistic: float, history: tuple[float, float] | None):
        fires = (
            history is not None
            and t > self.quiet_until
            and _fires(statistic, history[0], history[1], self.k_sigma, self.floor)
        )
        if fires:
            if self.run is None or statistic > self.run[1]:
                self.run = (t, statistic, *history)
            return None
        return self.close()

    def close(self):
        run, self.run = self.run, None
        if run is not None:
            self.quiet_until = run[0] + self.cooldown
        return run


@dataclass(frozen=True)
class DetectorConfig:
    w: int = DEFAULT_WINDOW
    window: int = DEFAULT_HISTORY
    k_sigma: float = DEFAULT_K_SIGMA
    abs_floor: float = DEFAULT_FLOOR
    cooldown: int | None = None

    def __post_init__(self) -> None:
        if self.w < 1:
            raise InvalidInputError(f"w must be positive, got {self.w}")
        if self.window < 2:
            raise InvalidInputError(f"window must be >= 2, got {self.window}")
        if self.k_sigma < 0:
            raise InvalidInputError(f"k_sigma must be nonnegative, got {self.k_sigma}")
        if self.cooldown is not None and self.cooldown < 0:
            raise InvalidInputError(f"cooldown must be nonnegative, got {self.cooldown}")

    @property
    def effective_cooldown(self) -> int:
        return 2 * self.w if self.cooldown is None else self.cooldown

    @property
    def lag(self) -> int:
        # statistics at boundaries s > t - w share points with the window after t,
        # so a change at t already lifts them; keep them out of t's history
        return self.w - 1

    def trigger(self) -> _Trigger:
        return _Trigger(self.k_sigma, self.abs_floor, self.effective_cooldown)


def _event(run, cfg: DetectorConfig, timestamps, endpoint_id: str, prompt: str) -> ChangeEvent:
    t, statistic, mean, std = run
    ts = timestamps[t]
    return ChangeEvent(ts, statistic, mean, std, cfg.w, endpoint_id, prompt, t, cfg.k_sigma, cfg.abs_floor)


def detect_changes(
    series: Sequence[SeriesPoint] | DenseSeries,
    w: int = DEFAULT_WINDOW,
    window: int = DEFAULT_HISTORY,
    k_sigma: float = DEFAULT_K_SIGMA,
    abs_floor: float = DEFAULT_FLOOR,
    cooldown: int | None = None,
) -> list[ChangeEvent]:
    """Offline scan; one event per run of consecutive triggered boundaries.

    The event sits at the boundary with the largest statistic in the run.
    After an event, boundaries within ``cooldown`` points (default ``2 * w``)
    are ignored.
    """
    cfg = DetectorConfig(w, window, k_sigma, abs_floor, cooldown)
    dense = as_dense(series)
    stats = window_statistics(dense, w)
    history = running_stats(stats, window, cfg.lag)
    trigger = cfg.trigger()
    runs = []
    for i, s in enumerate(stats):
        run = trigger.step(w + i, float(s), history[i])
        if run is not None:
            runs.append(run)
    run = trigger.close()
    if run is not None:
        runs.append(run)
    return [_event(r, cfg, dense.timestamps, dense.endpoint_id, dense.prompt) for r in runs]


@dataclass
class OnlineDetector:
    """Incremental detector for one series; feed points in timestamp order.

    Events come out once the triggered run around them has ended, which is
    at least ``w`` points after the change itself.
    """

    config: DetectorConfig = field(default_factory=DetectorConfig)
    endpoint_id: str = ""
    prompt: str = ""

    def __post_init__(self) -> None:
        cfg = self.config
        self._points: deque[SeriesPoint] = deque(maxlen=2 * cfg.w)
        self._timestamps: deque[datetime] = deque(maxlen=2 * cfg.w)
        self._stats: deque[float] = deque(maxlen=cfg.window + cfg.lag)
        self._trigger = cfg.trigger()
        self._count = 0

    def feed(self, point: SeriesPoint) -> list[ChangeEvent]:
        if self._timestamps and point.timestamp <= self._timestamps[-1]:
            raise InvalidInputError("points must arrive in strictly increasing timestamp order")
        cfg = self.config
        self._points.append(point)
        self._timestamps.append(point.timestamp)
        self._count += 1
        if len(self._points) < 2 * cfg.w:
            return []
        t = self._count - cfg.w
        statistic = self._statistic()
        history = None
        if len(self._stats) == cfg.window + cfg.lag:
            history = _mean_std(list(self._stats)[: cfg.window])
        self._stats.append(statistic)
        run = self._trigger.step(t, statistic, history)
        return [] if run is None else [self._to_event(run)]

    def _statistic(self) -> float:
        tokens = tuple(sorted({tok for p in self._points for tok in p.vector.tokens}))
        values, observed = _layout([p.vector.entries for p in self._points], tokens)
        return _block_statistic(impute_min(values, observed), observed, self.config.w)

    def _to_event(self, run) -> ChangeEvent:
        t = run[0]
        # the event boundary is still in the buffer: runs close within w points of it
        offset = t - (self._count - len(self._timestamps))
        if not 0 <= offset < len(self._timestamps):
            raise RuntimeError("event boundary fell out of the point buffer")
        lookup = {t: self._timestamps[offset]}
        return _event(run, self.config, lookup, self.endpoint_id, self.prompt)

    def feed_many(self, points: Iterable[SeriesPoint]) -> list[ChangeEvent]:
        events = []
        for p in points:
            events.extend(self.feed(p))
        return events


# -- sinks ----------------------------------------------------------------------------


def write_events(events: Iterable[ChangeEvent], out: IO[str] | str | Path) -> int:
    """Write events as JSON lines; returns the number written."""
    if isinstance(out, (str, Path)):
        with open(out, "a", encoding="utf-8") as fh:
            return write_events(events, fh)
    n = 0
    for event in events:
        out.write(json.dumps(event.to_dict(), sort_keys=True) + "\n")
        n += 1
    out.flush()
    return n


def post_event(url: str, event: ChangeEvent, timeout: float = 10.0, client: httpx.Client | None = None) -> bool:
    """POST one event record to a webhook; failures are logged, not raised."""
    try:
        if client is None:
            response = httpx.post(url, json=event.to_dict(), timeout=timeout)
        else:
            response = client.post(url, json=event.to_dict(), timeout=timeout)
        response.raise_for_status()
    except httpx.HTTPError as exc:
        log.warning("webhook %s failed: %s", url, exc)
        return False
    return True
