"""Per-event processing pipeline and the scene-adaptive render driver.

Each event updates the SAE, gets a greedy constrained plane fit, passes the
adaptive noise filter, and lands in the lifetime store. The driver renders
BEIs at scheduler-chosen times; renders happen exactly at slice boundaries
so a render at time T sees all events with t <= T and nothing newer
(later record replacements would otherwise erase past activity).

Two interchangeable slice processors exist: a pure-Python one built from
the public flow/lifetime operations, and a compiled kernel (numba, optional)
that mirrors it arithmetic-for-arithmetic. Both mutate the same state and
produce bit-identical outputs; tests assert that equivalence.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass

import numpy as np

from evbei.bei import BEI, RenderScheduler, estimate_scene_complexity, impulse_filter, render_bei
from evbei.events import SAE, Event, EventStream, ring_offsets
from evbei.flow import (
    DegenerateGeometryError,
    FlowParams,
    InsufficientSupportError,
    QuantileReservoir,
    fit_plane_constrained,
    flow_from_plane,
    noise_accept,
    select_support,
)
from evbei.lifetime import LifetimeRecord, LifetimeStore, insert_and_reset

__all__ = [
    "PipelineParams",
    "FlowRecords",
    "RenderOutput",
    "FlowPipeline",
    "STATUS_OK",
    "STATUS_INSUFFICIENT",
    "STATUS_DEGENERATE",
    "STATUS_INF_SPEED",
    "STATUS_REJECTED",
]

STATUS_OK = 0
STATUS_INSUFFICIENT = 1
STATUS_DEGENERATE = 2
STATUS_INF_SPEED = 3
STATUS_REJECTED = 4

# Events processed per driver step while waiting for noise-filter warm-up.
# Fixed so the first render time does not depend on the slice processor;
# small so the first render lands close to actual warm-up completion.
RENDER_CHUNK = 256


@dataclass(frozen=True)
class PipelineParams:
    """Every stage knob in one place; defaults are the working set.

    max_age == 0 selects the adaptive staleness bound (max_age_scale times
    the running median per-pixel inter-event interval, unbounded until
    interval_warmup samples exist). fixed_interval > 0 switches the driver
    to debug renders at exact multiples of that period.
    """

    radius: int = 2
    support_size: int = 5
    max_age: float = 0.0
    max_age_scale: float = 5.0
    interval_warmup: int = 100
    q_lo: float = 0.01
    q_hi: float = 0.99
    warmup: int = 500
    reservoir_capacity: int = 4096
    kappa_bei: float = 3.0
    kappa_c: float = 3.0
    reset: bool = True
    reset_mode: str = "truncate"
    s_bar: float = 1.0
    rate_window: float = 0.010
    dt_min: float = 1e-3
    dt_max: float = 0.5
    apply_impulse_filter: bool = True
    fixed_interval: float = 0.0
    seed: int = 0
    use_kernel: bool | None = None

    def __post_init__(self):
        if self.radius < 1:
            raise ValueError("radius must be >= 1")
        if self.support_size < 3:
            raise ValueError("support_size must be >= 3")
        if not (0.0 <= self.q_lo <= self.q_hi <= 1.0):
            raise ValueError("need 0 <= q_lo <= q_hi <= 1")
        if self.kappa_bei < 1.0 or self.kappa_c < 1.0:
            raise ValueError("lifetime extension factors must be >= 1")
        if self.reset_mode not in ("truncate", "zero"):
            raise ValueError(f"unknown reset_mode {self.reset_mode!r}")
        if self.s_bar <= 0 or self.rate_window <= 0:
            raise ValueError("s_bar and rate_window must be > 0")
        if not (0 < self.dt_min <= self.dt_max):
            raise ValueError("need 0 < dt_min <= dt_max")


@dataclass
class FlowRecords:
    """Per-event flow outcomes, aligned with the processed stream slice."""

    status: np.ndarray
    gx: np.ndarray
    gy: np.ndarray
    speed: np.ndarray
    orientation: np.ndarray

    @property
    def accepted(self) -> np.ndarray:
        return self.status == STATUS_OK

    @classmethod
    def empty(cls, n: int) -> "FlowRecords":
        return cls(
            status=np.zeros(n, dtype=np.int8),
            gx=np.full(n, np.nan),
            gy=np.full(n, np.nan),
            speed=np.full(n, np.nan),
            orientation=np.full(n, np.nan),
        )

    @classmethod
    def concatenate(cls, parts: list["FlowRecords"]) -> "FlowRecords":
        if not parts:
            return cls.empty(0)
        return cls(
            status=np.concatenate([p.status for p in parts]),
            gx=np.concatenate([p.gx for p in parts]),
            gy=np.concatenate([p.gy for p in parts]),
            speed=np.concatenate([p.speed for p in parts]),
            orientation=np.concatenate([p.orientation for p in parts]),
        )


@dataclass
class RenderOutput:
    """One scheduled render plus the estimates that produced its interval."""

    index: int
    t: float
    interval: float
    f_hat: float
    c_tilde: int
    bei: BEI


class FlowPipeline:
    """Stateful event-to-BEI pipeline over one sensor.

    Strictly sequential per event. process()/process_slice() advance the
    state; schedule_renders() drives a whole stream and yields BEIs at
    scene-adaptive times.
    """

    def __init__(self, width: int, height: int, params: PipelineParams | None = None):
        self.params = params or PipelineParams()
        p = self.params
        self.sae = SAE(width, height)
        self.store = LifetimeStore(width, height)
        self.speed_stats = QuantileReservoir(
            capacity=p.reservoir_capacity,
            q_lo=p.q_lo,
            q_hi=p.q_hi,
            warmup=p.warmup,
            seed=p.seed,
        )
        self.interval_stats = QuantileReservoir(
            capacity=p.reservoir_capacity,
            q_lo=0.5,
            q_hi=0.5,
            warmup=p.interval_warmup,
            seed=p.seed + 1,
        )
        self.accepted_times: list[float] = []
        self.events_processed = 0
        self._kernel = None
        if p.use_kernel is not False:
            from evbei import _kernel

            if _kernel.HAVE_NUMBA:
                self._kernel = _kernel
            elif p.use_kernel is True:
                raise RuntimeError("use_kernel=True but numba is not installed")

    # -- per-event reference path ------------------------------------------

    def current_max_age(self) -> float:
        p = self.params
        if p.max_age > 0:
            return p.max_age
        if self.interval_stats.count >= p.interval_warmup:
            return p.max_age_scale * self.interval_stats.quantile(0.5)
        return math.inf

    def process(self, e: Event):
        """Process one event; returns (status, gx, gy, speed, orientation)."""
        p = self.params
        prev = self.sae.lookup(e.p, e.x, e.y)
        if prev is not None and e.t > prev:
            self.interval_stats.add(e.t - prev)
        max_age = self.current_max_age()
        self.sae.update(e)
        self.events_processed += 1
        try:
            support = select_support(
                self.sae, e, FlowParams(radius=p.radius, support_size=p.support_size, max_age=max_age)
            )
        except InsufficientSupportError:
            return (STATUS_INSUFFICIENT, math.nan, math.nan, math.nan, math.nan)
        try:
            plane = fit_plane_constrained(e, support)
        except DegenerateGeometryError:
            return (STATUS_DEGENERATE, math.nan, math.nan, math.nan, math.nan)
        flow = flow_from_plane(plane)
        gx, gy = flow.grad
        if not math.isfinite(flow.speed):
            return (STATUS_INF_SPEED, gx, gy, math.inf, math.nan)
        if not noise_accept(flow.speed, self.speed_stats):
            return (STATUS_REJECTED, gx, gy, flow.speed, flow.orientation)
        rec = LifetimeRecord.from_flow(e, flow, p.kappa_bei, p.kappa_c)
        insert_and_reset(self.store, e, rec, reset=p.reset, reset_mode=p.reset_mode)
        self.accepted_times.append(e.t)
        return (STATUS_OK, gx, gy, flow.speed, flow.orientation)

    def _process_slice_py(self, xs, ys, ts, ps) -> FlowRecords:
        n = len(ts)
        rec = FlowRecords.empty(n)
        for i in range(n):
            e = Event(int(xs[i]), int(ys[i]), float(ts[i]), int(ps[i]))
            status, gx, gy, speed, orientation = self.process(e)
            rec.status[i] = status
            rec.gx[i] = gx
            rec.gy[i] = gy
            rec.speed[i] = speed
            rec.orientation[i] = orientation
        return rec

    # -- bulk path -----------------------------------------------------------

    def process_slice(self, xs, ys, ts, ps) -> FlowRecords:
        """Process a contiguous stream slice via the fastest available path."""
        if self._kernel is None:
            return self._process_slice_py(xs, ys, ts, ps)
        p = self.params
        n = len(ts)
        rec = FlowRecords.empty(n)
        dys, dxs = _offset_arrays(p.radius)
        self._kernel.process_events(
            np.ascontiguousarray(xs, dtype=np.int64),
            np.ascontiguousarray(ys, dtype=np.int64),
            np.ascontiguousarray(ts, dtype=np.float64),
            np.ascontiguousarray(ps, dtype=np.int64),
            self.sae.t,
            self.store.birth,
            self.store.tau_eff_bei,
            self.store.tau_eff_c,
            self.store.orientation,
            self.speed_stats.slots,
            self.speed_stats.sorted_vals,
            self.speed_stats.meta,
            self.interval_stats.slots,
            self.interval_stats.sorted_vals,
            self.interval_stats.meta,
            dys,
            dxs,
            p.support_size,
            p.max_age,
            p.max_age_scale,
            p.interval_warmup,
            p.q_lo,
            p.q_hi,
            p.warmup,
            p.kappa_bei,
            p.kappa_c,
            p.reset,
            p.reset_mode == "zero",
            rec.status,
            rec.gx,
            rec.gy,
            rec.speed,
            rec.orientation,
        )
        self.events_processed += n
        accepted = rec.status == STATUS_OK
        self.accepted_times.extend(np.asarray(ts, dtype=np.float64)[accepted].tolist())
        return rec

    def run(self, stream: EventStream, limit: int | None = None) -> FlowRecords:
        """Flow-process a whole stream (no rendering)."""
        n = len(stream) if limit is None else min(limit, len(stream))
        return self.process_slice(stream.xs[:n], stream.ys[:n], stream.ts[:n], stream.ps[:n])

    # -- render scheduling ----------------------------------------------------

    def event_rate(self, t_now: float) -> float:
        """Accepted-event rate over (t_now - rate_window, t_now]."""
        w = self.params.rate_window
        lo = bisect.bisect_right(self.accepted_times, t_now - w)
        hi = bisect.bisect_right(self.accepted_times, t_now)
        return (hi - lo) / w

    def _render_at(self, t: float, index: int) -> RenderOutput:
        p = self.params
        f_hat = self.event_rate(t)
        c_tilde = estimate_scene_complexity(self.store, t)
        sched = RenderScheduler(
            s_bar=p.s_bar,
            rate_window=p.rate_window,
            dt_min=p.dt_min,
            dt_max=p.dt_max,
            f_hat=f_hat,
            c_tilde=c_tilde,
        )
        interval = p.fixed_interval if p.fixed_interval > 0 else sched.interval()
        bei = render_bei(self.store, t)
        if p.apply_impulse_filter:
            bei = impulse_filter(bei)
        return RenderOutput(index=index, t=t, interval=interval, f_hat=f_hat, c_tilde=c_tilde, bei=bei)

    def schedule_renders(self, stream: EventStream, limit: int | None = None, collect_records: list | None = None):
        """Drive a stream; yield RenderOutput at scene-adaptive times.

        The first render lands at the end of the fixed-size processing chunk
        in which the noise filter finished warming up; each following render
        is one scheduler interval after the previous, evaluated with the
        estimates current at the previous render. With fixed_interval set,
        renders land on exact multiples of that period instead.
        """
        p = self.params
        n = len(stream) if limit is None else min(limit, len(stream))
        if n == 0:
            return
        ts = stream.ts
        last_t = float(ts[n - 1])
        i = 0
        t_next: float | None = None
        fixed_k = 0
        index = 0
        while True:
            if t_next is None:
                if i >= n:
                    return
                j = min(n, i + RENDER_CHUNK)
                rec = self.process_slice(stream.xs[i:j], stream.ys[i:j], ts[i:j], stream.ps[i:j])
                if collect_records is not None:
                    collect_records.append(rec)
                i = j
                if self.speed_stats.count >= p.warmup:
                    t_done = float(ts[i - 1])
                    if p.fixed_interval > 0:
                        fixed_k = max(1, math.ceil(t_done / p.fixed_interval))
                        t_next = fixed_k * p.fixed_interval
                    else:
                        t_next = t_done
                continue
            if t_next > last_t:
                if i < n:
                    rec = self.process_slice(stream.xs[i:n], stream.ys[i:n], ts[i:n], stream.ps[i:n])
                    if collect_records is not None:
                        collect_records.append(rec)
                    i = n
                return
            j = i + int(np.searchsorted(ts[i:n], t_next, side="right"))
            if j > i:
                rec = self.process_slice(stream.xs[i:j], stream.ys[i:j], ts[i:j], stream.ps[i:j])
                if collect_records is not None:
                    collect_records.append(rec)
                i = j
            out = self._render_at(t_next, index)
            index += 1
            yield out
            if p.fixed_interval > 0:
                fixed_k += 1
                t_next = fixed_k * p.fixed_interval
            else:
                t_next = t_next + out.interval


def _offset_arrays(radius: int):
    offs = ring_offsets(radius)
    dys = np.array([dy for dy, dx in offs], dtype=np.int64)
    dxs = np.array([dx for dy, dx in offs], dtype=np.int64)
    return dys, dxs
