"""Flow-sequence datasets: ingestion, lag fragmentation, and synthesis.

File format (one file per dataset):

    #pasta-flow v1 n=<N> m=<M> interval_minutes=<I> start=<ISO8601>
    v,v,...,v        one line per frame, N*M comma-separated values,
    ...              row-major (row i outer, column j inner), chronological

Holiday calendars are plain text, one ISO date per line; blank lines and
``#`` comments are ignored.

Model inputs are built by stacking lagged frames as channels in a fixed,
public order: recent frames stepping back one hour at a time, then frames
one day apart, then frames one week apart. Attention dumps label channels
by that order, so it never changes.
"""

from __future__ import annotations

import math
import os
import re
import tempfile
from dataclasses import dataclass
from datetime import date, datetime, timedelta
from pathlib import Path

import numpy as np

from .errors import (
    DataError,
    HeaderError,
    HistoryError,
    NegativeValueError,
    NonMonotonicError,
    RaggedRowError,
    ScalerError,
)

_HEADER_RE = re.compile(
    r"^#pasta-flow v1 n=(\d+) m=(\d+) interval_minutes=(-?\d+) start=(\S+)$"
)

MINUTES_PER_HOUR = 60
MINUTES_PER_DAY = 1440
MINUTES_PER_WEEK = 10080


@dataclass
class FlowSequence:
    """A chronological stack of non-negative n-by-m grid snapshots."""

    n: int
    m: int
    interval_minutes: int
    start: datetime
    frames: list[np.ndarray]

    def __len__(self) -> int:
        return len(self.frames)

    def timestamp(self, index: int) -> datetime:
        return self.start + timedelta(minutes=index * self.interval_minutes)

    def frames_per_day(self) -> int:
        if MINUTES_PER_DAY % self.interval_minutes != 0:
            raise DataError(
                f"interval of {self.interval_minutes} minutes does not divide a day"
            )
        return MINUTES_PER_DAY // self.interval_minutes


def write_text_atomic(path, text: str) -> None:
    """Write via a temp file in the same directory, then rename."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_flow_sequence(seq: FlowSequence, path) -> None:
    lines = [
        f"#pasta-flow v1 n={seq.n} m={seq.m} "
        f"interval_minutes={seq.interval_minutes} start={seq.start.isoformat()}"
    ]
    for frame in seq.frames:
        lines.append(",".join(repr(float(v)) for v in frame.ravel()))
    write_text_atomic(path, "\n".join(lines) + "\n")


def load_flow_sequence(path) -> FlowSequence:
    """Parse and validate a flow-sequence file."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    lines = text.splitlines()
    if not lines:
        raise HeaderError(f"{path}: empty file")
    match = _HEADER_RE.match(lines[0])
    if match is None:
        raise HeaderError(f"{path}: malformed header {lines[0]!r}")
    n, m, interval = int(match.group(1)), int(match.group(2)), int(match.group(3))
    if n < 1 or m < 1:
        raise HeaderError(f"{path}: grid extents must be positive, got {n}x{m}")
    if interval < 1:
        raise NonMonotonicError(
            f"{path}: interval_minutes={interval} implies non-increasing timestamps"
        )
    try:
        start = datetime.fromisoformat(match.group(4))
    except ValueError as exc:
        raise HeaderError(f"{path}: bad start timestamp {match.group(4)!r}") from exc

    frames: list[np.ndarray] = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        tokens = line.split(",")
        if len(tokens) != n * m:
            raise RaggedRowError(
                f"{path}:{lineno}: expected {n * m} values, got {len(tokens)}"
            )
        try:
            values = np.array([float(tok) for tok in tokens])
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: unparseable value ({exc})") from exc
        if not np.all(np.isfinite(values)):
            raise DataError(f"{path}:{lineno}: non-finite value")
        if np.any(values < 0):
            raise NegativeValueError(f"{path}:{lineno}: negative flow value")
        frames.append(values.reshape(n, m))
    if not frames:
        raise DataError(f"{path}: no frames")
    return FlowSequence(n, m, interval, start, frames)


@dataclass(frozen=True)
class Scaler:
    """Min-max map onto [-1, 1], fit on training frames only."""

    data_min: float
    data_max: float

    @classmethod
    def fit(cls, frames) -> "Scaler":
        lo = min(float(np.min(f)) for f in frames)
        hi = max(float(np.max(f)) for f in frames)
        if hi <= lo:
            raise ScalerError(f"degenerate value range [{lo}, {hi}]")
        return cls(lo, hi)

    def apply(self, x):
        return 2.0 * (np.asarray(x, dtype=np.float64) - self.data_min) / (
            self.data_max - self.data_min
        ) - 1.0

    def invert(self, y):
        return (np.asarray(y, dtype=np.float64) + 1.0) * (
            self.data_max - self.data_min
        ) / 2.0 + self.data_min


def _step_frames(minutes: int, interval_minutes: int, what: str) -> int:
    if minutes % interval_minutes != 0:
        raise DataError(
            f"{what} step of {minutes} minutes is not a whole number of "
            f"{interval_minutes}-minute frames"
        )
    return minutes // interval_minutes


@dataclass(frozen=True)
class FragmentSpec:
    """Lag layout of the input channels.

    Counts say how many frames each fragment contributes; steps are lags in
    whole frames (an hour, a day, and a week by default, converted through
    the dataset interval).
    """

    t_closeness: int = 5
    t_periodic: int = 6
    t_trend: int = 4
    closeness_step: int = 1
    periodic_step: int = 24
    trend_step: int = 168

    def __post_init__(self):
        if min(self.t_closeness, self.t_periodic, self.t_trend) < 0:
            raise DataError("fragment counts must be non-negative")
        if self.total < 1:
            raise DataError("at least one input channel is required")
        if min(self.closeness_step, self.periodic_step, self.trend_step) < 1:
            raise DataError("fragment steps must be at least one frame")

    @classmethod
    def for_interval(
        cls,
        interval_minutes: int,
        t_closeness: int = 5,
        t_periodic: int = 6,
        t_trend: int = 4,
    ) -> "FragmentSpec":
        return cls(
            t_closeness,
            t_periodic,
            t_trend,
            _step_frames(MINUTES_PER_HOUR, interval_minutes, "closeness"),
            _step_frames(MINUTES_PER_DAY, interval_minutes, "periodic"),
            _step_frames(MINUTES_PER_WEEK, interval_minutes, "trend"),
        )

    @property
    def total(self) -> int:
        return self.t_closeness + self.t_periodic + self.t_trend

    def min_history(self) -> int:
        """Smallest last-observed index t with every source frame in range."""
        need = 0
        if self.t_closeness:
            need = max(need, (self.t_closeness - 1) * self.closeness_step)
        if self.t_periodic:
            need = max(need, self.t_periodic * self.periodic_step)
        if self.t_trend:
            need = max(need, self.t_trend * self.trend_step)
        return need

    def source_indices(self, t: int) -> list[int]:
        """Channel source frames for last-observed index t (target is t+1).

        Closeness starts at t itself and steps back an hour at a time;
        periodic and trend start one day / one week behind t.
        """
        idx = [t - k * self.closeness_step for k in range(self.t_closeness)]
        idx += [t - k * self.periodic_step for k in range(1, self.t_periodic + 1)]
        idx += [t - k * self.trend_step for k in range(1, self.t_trend + 1)]
        return idx

    def channel_labels(self, interval_minutes: int) -> list[str]:
        """Stable channel names like closeness-1h, periodic-2d, trend-4w."""

        def fmt(minutes: int) -> str:
            for unit, suffix in ((MINUTES_PER_WEEK, "w"), (MINUTES_PER_DAY, "d"), (MINUTES_PER_HOUR, "h")):
                if minutes % unit == 0:
                    return f"{minutes // unit}{suffix}"
            return f"{minutes}m"

        labels = [
            f"closeness-{fmt(k * self.closeness_step * interval_minutes)}"
            for k in range(1, self.t_closeness + 1)
        ]
        labels += [
            f"periodic-{fmt(k * self.periodic_step * interval_minutes)}"
            for k in range(1, self.t_periodic + 1)
        ]
        labels += [
            f"trend-{fmt(k * self.trend_step * interval_minutes)}"
            for k in range(1, self.t_trend + 1)
        ]
        return labels


@dataclass
class Sample:
    """One supervised example: lagged channels, externals, next frame."""

    input: np.ndarray  # (n, m, t) scaler-normalized
    external: np.ndarray  # (dext,)
    target: np.ndarray  # (n, m) scaler-normalized
    target_raw: np.ndarray  # (n, m) raw scale, kept for raw-scale metrics
    target_index: int
    timestamp: datetime


def load_holidays(path) -> frozenset[date]:
    days = set()
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        try:
            days.add(date.fromisoformat(stripped))
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: bad holiday date {stripped!r}") from exc
    return frozenset(days)


def external_features(
    timestamp: datetime, interval_minutes: int, holidays: frozenset[date] = frozenset()
) -> np.ndarray:
    """Time-of-day one-hot (24 or 48), day-of-week one-hot (7), holiday flag."""
    if interval_minutes == 60:
        slots = 24
        slot = timestamp.hour
    elif interval_minutes == 30:
        slots = 48
        slot = timestamp.hour * 2 + (1 if timestamp.minute >= 30 else 0)
    else:
        raise DataError(
            f"external features support 60 or 30 minute intervals, got {interval_minutes}"
        )
    vec = np.zeros(slots + 7 + 1)
    vec[slot] = 1.0
    vec[slots + timestamp.weekday()] = 1.0
    if timestamp.date() in holidays:
        vec[-1] = 1.0
    return vec


def external_dimension(interval_minutes: int) -> int:
    return len(external_features(datetime(2021, 4, 5), interval_minutes))


def build_input(
    seq: FlowSequence,
    spec: FragmentSpec,
    scaler: Scaler,
    target_index: int,
    holidays: frozenset[date] = frozenset(),
) -> tuple[np.ndarray, np.ndarray]:
    """Assemble the (n, m, t) input stack and external vector for one target.

    target_index may be len(seq) to build inputs for the first unseen frame.
    """
    t = target_index - 1
    if target_index < 1 or target_index > len(seq):
        raise HistoryError(f"target index {target_index} outside 1..{len(seq)}")
    if t < spec.min_history():
        raise HistoryError(
            f"target index {target_index} lacks history (needs last-observed "
            f"index >= {spec.min_history()})"
        )
    stack = np.stack([seq.frames[i] for i in spec.source_indices(t)], axis=-1)
    ext = external_features(seq.timestamp(target_index), seq.interval_minutes, holidays)
    return scaler.apply(stack), ext


def build_samples(
    seq: FlowSequence,
    spec: FragmentSpec,
    scaler: Scaler,
    holidays: frozenset[date] = frozenset(),
    first_target: int = 1,
    last_target: int | None = None,
) -> list[Sample]:
    """Samples for every target index in range with full lag history.

    Targets without history are skipped, never padded. Raises when the range
    yields nothing.
    """
    last = len(seq) - 1 if last_target is None else min(last_target, len(seq) - 1)
    earliest = max(first_target, spec.min_history() + 1)
    samples = []
    for target in range(earliest, last + 1):
        inp, ext = build_input(seq, spec, scaler, target, holidays)
        raw = seq.frames[target]
        samples.append(
            Sample(
                input=inp,
                external=ext,
                target=scaler.apply(raw),
                target_raw=np.array(raw),
                target_index=target,
                timestamp=seq.timestamp(target),
            )
        )
    if not samples:
        raise HistoryError(
            f"no target index in [{first_target}, {last}] has full lag history"
        )
    return samples


# Synthetic data: a smooth spatial bump modulated by a daily curve and a
# weekend dip, plus hotspot cells that spike at peak hours so the map gets
# genuine high-low cells.
PEAK_HOURS = (8, 9, 18, 19)
SPIKE_FACTOR = 4.0


def generate_synthetic(
    n: int,
    m: int,
    days: int = 35,
    interval_minutes: int = 60,
    hotspots: tuple[tuple[int, int], ...] = (),
    noise: float = 0.05,
    seed: int = 0,
    start: datetime = datetime(2021, 4, 5),  # a Monday
) -> FlowSequence:
    """Deterministic synthetic crowd-flow sequence for a given seed."""
    if n < 1 or m < 1 or days < 1:
        raise DataError(f"bad synthetic extents n={n} m={m} days={days}")
    if MINUTES_PER_DAY % interval_minutes != 0:
        raise DataError(f"interval of {interval_minutes} minutes does not divide a day")
    for i, j in hotspots:
        if not (0 <= i < n and 0 <= j < m):
            raise DataError(f"hotspot ({i}, {j}) outside {n}x{m} grid")

    per_day = MINUTES_PER_DAY // interval_minutes
    count = days * per_day
    ii = (np.arange(n) + 0.5)[:, None] / n
    jj = (np.arange(m) + 0.5)[None, :] / m
    base = 40.0 + 25.0 * np.sin(math.pi * ii) * np.sin(math.pi * jj)

    minutes = np.arange(count) * interval_minutes
    start_minute = start.hour * 60 + start.minute
    hour_frac = ((start_minute + minutes) % MINUTES_PER_DAY) / 60.0
    dow = (start.weekday() + (start_minute + minutes) // MINUTES_PER_DAY) % 7
    daily = 1.0 + 0.6 * np.sin(2.0 * math.pi * (hour_frac - 6.0) / 24.0)
    weekly = np.where(dow >= 5, 0.75, 1.0)

    values = base[None, :, :] * (daily * weekly)[:, None, None]
    peak = np.isin(hour_frac.astype(int), PEAK_HOURS)
    for i, j in hotspots:
        values[peak, i, j] *= SPIKE_FACTOR

    rng = np.random.default_rng(seed)
    values += rng.normal(0.0, 1.0, values.shape) * (noise * base[None, :, :])
    values = np.maximum(values, 0.0)
    return FlowSequence(n, m, interval_minutes, start, list(values))
