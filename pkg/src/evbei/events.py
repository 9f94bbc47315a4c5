"""Event stream primitives: events, ordered streams, and timestamp surfaces.

An event is a 4-tuple (x, y, t, p): a brightness change of polarity p at
pixel (x, y) and time t (seconds). Streams are time-sorted. The SAE keeps,
per polarity, the most recent event timestamp at every pixel; local plane
fits on it recover normal flow.

On-disk format is the common event-camera text convention: one event per
line, ``t x y p`` with p in {0, 1} (0 mapped to polarity -1, 1 to +1).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "Event",
    "EventStream",
    "EventError",
    "SAE",
    "parse_event_line",
    "load_event_stream",
    "save_event_stream",
    "pol_index",
]


class EventError(ValueError):
    """Malformed event data: bad line, bad ordering, or out-of-bounds pixel."""


@dataclass(frozen=True)
class Event:
    """One asynchronous brightness-change sample."""

    x: int
    y: int
    t: float
    p: int  # -1 or +1

    def __post_init__(self):
        if self.p not in (-1, 1):
            raise EventError(f"polarity must be -1 or +1, got {self.p}")
        if self.x < 0 or self.y < 0:
            raise EventError(f"negative pixel coordinate ({self.x}, {self.y})")
        if self.t < 0:
            raise EventError(f"negative timestamp {self.t}")


def pol_index(p: int) -> int:
    """Map polarity {-1, +1} to plane index {0, 1}."""
    return (p + 1) // 2


def parse_event_line(line: str, lineno: int | None = None) -> Event:
    """Parse one ``t x y p`` line (p in {0, 1}) into an Event.

    Raises EventError naming the offending line on malformed input.
    """
    where = f"line {lineno}" if lineno is not None else f"line {line!r}"
    fields = line.split()
    if len(fields) != 4:
        raise EventError(f"{where}: expected 4 fields 't x y p', got {len(fields)}")
    try:
        t = float(fields[0])
        x = int(fields[1])
        y = int(fields[2])
        p_raw = int(fields[3])
    except ValueError as exc:
        raise EventError(f"{where}: non-numeric token ({exc})") from None
    if p_raw not in (0, 1):
        raise EventError(f"{where}: polarity must be 0 or 1, got {p_raw}")
    if x < 0 or y < 0:
        raise EventError(f"{where}: negative coordinate ({x}, {y})")
    if not math.isfinite(t) or t < 0:
        raise EventError(f"{where}: bad timestamp {fields[0]}")
    return Event(x=x, y=y, t=t, p=-1 if p_raw == 0 else 1)


class EventStream:
    """Time-sorted sequence of events over a fixed sensor, array-backed.

    Timestamps are non-decreasing. Iterating yields Event objects; the
    underlying ``xs/ys/ts/ps`` arrays are the fast path for bulk work.
    """

    def __init__(self, xs, ys, ts, ps, sensor_width: int, sensor_height: int):
        self.xs = np.asarray(xs, dtype=np.int64)
        self.ys = np.asarray(ys, dtype=np.int64)
        self.ts = np.asarray(ts, dtype=np.float64)
        self.ps = np.asarray(ps, dtype=np.int64)
        self.sensor_width = int(sensor_width)
        self.sensor_height = int(sensor_height)
        n = len(self.ts)
        if not (len(self.xs) == len(self.ys) == len(self.ps) == n):
            raise EventError("field arrays have mismatched lengths")

    @classmethod
    def from_events(cls, events, sensor_width: int, sensor_height: int) -> "EventStream":
        events = list(events)
        return cls(
            xs=[e.x for e in events],
            ys=[e.y for e in events],
            ts=[e.t for e in events],
            ps=[e.p for e in events],
            sensor_width=sensor_width,
            sensor_height=sensor_height,
        )

    def __len__(self) -> int:
        return len(self.ts)

    def __getitem__(self, i: int) -> Event:
        return Event(x=int(self.xs[i]), y=int(self.ys[i]), t=float(self.ts[i]), p=int(self.ps[i]))

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def validate(self, tolerance: float = 0.0) -> None:
        """Check bounds, polarity, and ordering; raise EventError on violation."""
        if len(self) == 0:
            return
        bad = np.flatnonzero(
            (self.xs < 0)
            | (self.xs >= self.sensor_width)
            | (self.ys < 0)
            | (self.ys >= self.sensor_height)
        )
        if bad.size:
            i = int(bad[0])
            raise EventError(
                f"event {i}: pixel ({self.xs[i]}, {self.ys[i]}) outside "
                f"{self.sensor_width}x{self.sensor_height} sensor"
            )
        if not np.all(np.isin(self.ps, (-1, 1))):
            i = int(np.flatnonzero(~np.isin(self.ps, (-1, 1)))[0])
            raise EventError(f"event {i}: polarity {self.ps[i]} not in {{-1, +1}}")
        regress = np.flatnonzero(np.diff(self.ts) < -tolerance)
        if regress.size:
            i = int(regress[0]) + 1
            raise EventError(
                f"event {i}: timestamp {self.ts[i]!r} regresses from {self.ts[i - 1]!r}"
            )


def load_event_stream(
    path,
    sensor_dims: tuple[int, int],
    tolerance: float = 0.0,
    limit: int | None = None,
) -> EventStream:
    """Load a ``t x y p`` text file as a validated EventStream.

    sensor_dims is (width, height). Ordering regressions beyond `tolerance`
    (default 0: strictly non-decreasing required) are rejected with the
    offending line number. An empty file yields an empty, valid stream.
    """
    path = Path(path)
    width, height = sensor_dims
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")  # loadtxt warns on empty input
            raw = np.loadtxt(path, dtype=np.float64, ndmin=2)
    except OSError as exc:
        raise EventError(f"cannot read {path}: {exc}") from None
    except ValueError:
        # Bad token or ragged rows; rescan for a precise line number.
        _slow_parse(path.read_text())
        raise EventError(f"{path}: malformed event file") from None
    if raw.size == 0:
        return EventStream([], [], [], [], width, height)
    if raw.shape[1] != 4:
        raise EventError(f"{path}, line 1: expected 4 fields 't x y p', got {raw.shape[1]}")
    if limit is not None:
        raw = raw[:limit]
    ts = raw[:, 0]
    xs = raw[:, 1]
    ys = raw[:, 2]
    ps_raw = raw[:, 3]

    def fail(mask: np.ndarray, what: str):
        i = int(np.flatnonzero(mask)[0])
        raise EventError(f"{path}, line {i + 1}: {what}")

    if np.any(xs != np.floor(xs)) or np.any(ys != np.floor(ys)):
        fail((xs != np.floor(xs)) | (ys != np.floor(ys)), "non-integer coordinate")
    if np.any(ps_raw != np.floor(ps_raw)) or np.any((ps_raw != 0) & (ps_raw != 1)):
        fail((ps_raw != 0) & (ps_raw != 1), "polarity must be 0 or 1")
    if np.any((xs < 0) | (xs >= width) | (ys < 0) | (ys >= height)):
        fail((xs < 0) | (xs >= width) | (ys < 0) | (ys >= height), "coordinate out of sensor bounds")
    if np.any(~np.isfinite(ts)) or np.any(ts < 0):
        fail(~np.isfinite(ts) | (ts < 0), "bad timestamp")
    regress = np.diff(ts) < -tolerance
    if np.any(regress):
        i = int(np.flatnonzero(regress)[0]) + 1
        raise EventError(
            f"{path}, line {i + 1}: timestamp {ts[i]!r} regresses from {ts[i - 1]!r}"
        )
    ps = np.where(ps_raw == 0, -1, 1).astype(np.int64)
    return EventStream(xs.astype(np.int64), ys.astype(np.int64), ts, ps, width, height)


def _slow_parse(text: str):
    """Line-by-line rescan, only to produce a precise error location."""
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parse_event_line(line, lineno=lineno)


def save_event_stream(stream: EventStream, path) -> None:
    """Write ``t x y p`` lines (p back-mapped to {0, 1}).

    Timestamps use shortest round-trip decimal formatting so that
    load(save(stream)) reproduces the stream exactly.
    """
    path = Path(path)
    with path.open("w") as fh:
        for i in range(len(stream)):
            p01 = 0 if stream.ps[i] == -1 else 1
            fh.write(f"{float(stream.ts[i])!r} {stream.xs[i]} {stream.ys[i]} {p01}\n")


class SAE:
    """Surface of Active Events: per-polarity most-recent timestamp per pixel.

    Unoccupied cells hold the sentinel -1.0 internally and are reported as
    unoccupied by lookup/window; timestamps themselves are non-negative.
    """

    UNSET = -1.0

    def __init__(self, width: int, height: int):
        self.width = int(width)
        self.height = int(height)
        self.t = np.full((2, self.height, self.width), self.UNSET, dtype=np.float64)

    def update(self, e: Event) -> None:
        if not (0 <= e.x < self.width and 0 <= e.y < self.height):
            raise EventError(f"event at ({e.x}, {e.y}) outside {self.width}x{self.height} SAE")
        self.t[pol_index(e.p), e.y, e.x] = e.t

    def lookup(self, p: int, x: int, y: int) -> float | None:
        v = self.t[pol_index(p), y, x]
        return None if v == self.UNSET else float(v)

    def occupied(self, p: int, x: int, y: int) -> bool:
        return self.t[pol_index(p), y, x] != self.UNSET

    def window(self, center: tuple[int, int], radius: int, p: int):
        """Occupied same-polarity cells in the (2R+1)^2 window, center excluded.

        Returns a list of ((x, y), t), clipped at the sensor border, in ring
        order (increasing Chebyshev radius, row-major within each ring).
        """
        if radius < 1:
            raise ValueError(f"radius must be >= 1, got {radius}")
        cx, cy = center
        plane = self.t[pol_index(p)]
        out = []
        for dy, dx in ring_offsets(radius):
            x, y = cx + dx, cy + dy
            if 0 <= x < self.width and 0 <= y < self.height:
                v = plane[y, x]
                if v != self.UNSET:
                    out.append(((x, y), float(v)))
        return out

    def snapshot(self) -> "SAE":
        s = SAE(self.width, self.height)
        s.t = self.t.copy()
        return s


_RING_CACHE: dict[int, tuple] = {}


def ring_offsets(radius: int) -> tuple:
    """(dy, dx) window offsets ordered by Chebyshev ring, row-major in ring.

    The ring-first order matters to the greedy support selection: residual
    ties resolve to the nearest candidates, which cannot all be collinear.
    """
    cached = _RING_CACHE.get(radius)
    if cached is not None:
        return cached
    offs = []
    for r in range(1, radius + 1):
        for dy in range(-r, r + 1):
            for dx in range(-r, r + 1):
                if max(abs(dy), abs(dx)) == r:
                    offs.append((dy, dx))
    result = tuple(offs)
    _RING_CACHE[radius] = result
    return result
