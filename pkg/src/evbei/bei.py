"""Binary event images: rendering, impulse filtering, and render scheduling.

A BEI at query time t activates every pixel holding a record whose
effective lifetime covers t. Rendering is a pure function of a store
snapshot and t. The scheduler picks the next render interval so that the
expected per-feature apparent displacement between renders is normalized
to a target s_bar, using the estimated per-feature event rate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from evbei.lifetime import LifetimeStore

__all__ = [
    "BEI",
    "RenderScheduler",
    "NORM_CONST",
    "ALPHA_MIN",
    "ALPHA_MAX",
    "render_bei",
    "impulse_filter",
    "estimate_scene_complexity",
    "estimate_event_rate",
    "rendering_interval",
]

# Displacement-per-event conversion alpha(theta) is bounded by the cardinal
# and ordinal grid spacings; only the bounds enter the scheduler.
ALPHA_MIN = 1.0
ALPHA_MAX = math.sqrt(2.0)
NORM_CONST = 2.0 / (1.0 + math.sqrt(2.0))


@dataclass(frozen=True)
class BEI:
    """Binary activity over the pixel grid at one query time.

    orientation holds the flow direction of the governing record for active
    pixels and NaN elsewhere.
    """

    active: np.ndarray  # bool (H, W)
    t: float
    orientation: np.ndarray | None = None  # float64 (H, W), NaN where inactive

    @property
    def width(self) -> int:
        return self.active.shape[1]

    @property
    def height(self) -> int:
        return self.active.shape[0]


def render_bei(store: LifetimeStore, t: float, which: str = "bei", with_orientation: bool = True) -> BEI:
    """Render the BEI at time t from effective lifetimes.

    which selects the lifetime channel: "bei" for the rendering lifetimes,
    "c" for the scene-complexity ones. with_orientation=False skips the
    orientation plane (cheaper; used for complexity estimates).
    """
    if t < 0:
        raise ValueError(f"query time must be >= 0, got {t}")
    eff = store.tau_eff_bei if which == "bei" else store.tau_eff_c
    birth = store.birth
    alive = (birth >= 0.0) & (birth <= t) & (t < birth + eff)
    active = alive[0] | alive[1]
    if not with_orientation:
        return BEI(active=active, t=float(t), orientation=None)
    # Where both polarities are alive the newer record's orientation wins.
    birth_masked = np.where(alive, birth, -np.inf)
    newer = np.argmax(birth_masked, axis=0)
    orientation = np.take_along_axis(store.orientation, newer[None], axis=0)[0].copy()
    orientation[~active] = np.nan
    return BEI(active=active, t=float(t), orientation=orientation)


def impulse_filter(b: BEI) -> BEI:
    """Clear active pixels with no active 8-neighbor; keep everything else.

    Isolated activations are impulse noise in an edge-like image. The filter
    is idempotent: isolated pixels contribute to nobody's neighbor count.
    """
    a = b.active
    padded = np.pad(a, 1).astype(np.uint8)
    count = np.zeros(a.shape, dtype=np.uint8)
    h, w = a.shape
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy == 0 and dx == 0:
                continue
            count += padded[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]
    kept = a & (count > 0)
    orientation = None
    if b.orientation is not None:
        orientation = b.orientation.copy()
        orientation[~kept] = np.nan
    return BEI(active=kept, t=b.t, orientation=orientation)


def estimate_scene_complexity(store: LifetimeStore, t: float) -> int:
    """Active-pixel count of the impulse-filtered complexity BEI, floored at 1.

    The floor keeps the per-feature rate estimate finite on empty scenes.
    """
    b = impulse_filter(render_bei(store, t, which="c", with_orientation=False))
    return max(1, int(np.count_nonzero(b.active)))


def estimate_event_rate(accepted_times: np.ndarray, t_now: float, window: float) -> float:
    """Accepted-event rate over the half-open window (t_now - window, t_now]."""
    if window <= 0:
        raise ValueError(f"rate window must be > 0, got {window}")
    ts = np.asarray(accepted_times, dtype=np.float64)
    lo = np.searchsorted(ts, t_now - window, side="right")
    hi = np.searchsorted(ts, t_now, side="right")
    return float(hi - lo) / window


@dataclass
class RenderScheduler:
    """Scene-adaptive render interval state.

    s_bar is the desired expected per-feature displacement (px) between
    renders. f_hat and c_tilde are the current stream-rate and complexity
    estimates; their quotient estimates the per-feature event rate.
    Intervals are clamped to [dt_min, dt_max].
    """

    s_bar: float = 1.0
    rate_window: float = 0.010
    dt_min: float = 1e-3
    dt_max: float = 0.5
    f_hat: float = 0.0
    c_tilde: int = 1

    @property
    def per_feature_rate(self) -> float:
        return self.f_hat / max(1, self.c_tilde)

    def interval(self) -> float:
        return rendering_interval(self)


def rendering_interval(sched: RenderScheduler) -> float:
    """Interval normalizing expected per-feature displacement to ~s_bar.

    Delta T = (2 / (1 + sqrt 2)) * s_bar * c_tilde / f_hat, which centers the
    expected displacement (bounded between 1x and sqrt(2)x the per-feature
    event count) on s_bar. Zero rate falls back to dt_max.
    """
    if sched.s_bar <= 0:
        raise ValueError(f"s_bar must be > 0, got {sched.s_bar}")
    if sched.f_hat <= 0.0:
        return sched.dt_max
    dt = NORM_CONST * sched.s_bar * max(1, sched.c_tilde) / sched.f_hat
    return min(sched.dt_max, max(sched.dt_min, dt))
