"""Per-event normal-flow estimation on the SAE.

A local plane constrained to pass through the incoming event is fitted to
greedily selected same-polarity neighbors; its spatial gradient gives the
normal flow. A streaming quantile reservoir over accepted speeds rejects
estimates in the distribution tails, which adapts the noise filter to the
scene dynamics instead of using a fixed goodness-of-fit threshold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from evbei.events import SAE, Event

__all__ = [
    "FlowParams",
    "PlaneParams",
    "NormalFlow",
    "QuantileReservoir",
    "SplitMix64",
    "InsufficientSupportError",
    "DegenerateGeometryError",
    "select_support",
    "fit_plane_constrained",
    "flow_from_plane",
    "noise_accept",
]


class InsufficientSupportError(Exception):
    """Fewer than 3 usable neighbors: the event carries no flow estimate."""


class DegenerateGeometryError(Exception):
    """Support pixels are collinear; the plane gradient is not identifiable."""


@dataclass(frozen=True)
class FlowParams:
    """Support selection parameters.

    max_age is the staleness bound: window entries older than t_e - max_age
    are excluded. The pipeline normally derives it per event (5x the running
    median per-pixel inter-event interval); math.inf disables the bound.
    """

    radius: int = 2
    support_size: int = 5
    max_age: float = math.inf


@dataclass(frozen=True)
class PlaneParams:
    """Local SAE plane a*x + b*y + c*t + d = 0 anchored on an event.

    The anchor event lies on the plane exactly; c is never 0 (the plane is
    a graph over the pixel plane). The SAE gradient is (-a/c, -b/c).
    """

    a: float
    b: float
    c: float
    d: float
    anchor: Event

    def gradient(self) -> tuple[float, float]:
        return (-self.a / self.c, -self.b / self.c)


@dataclass(frozen=True)
class NormalFlow:
    """Normal flow derived from an SAE plane gradient.

    grad is in s/px; v_perp = grad / |grad|^2 in px/s, so speed * |grad| = 1.
    A zero gradient yields speed == inf with NaN direction fields; the noise
    filter rejects those.
    """

    grad: tuple[float, float]
    v_perp: tuple[float, float]
    speed: float
    orientation: float


def select_support(sae: SAE, e: Event, params: FlowParams):
    """Greedily pick support pixels for the constrained plane fit.

    Candidates are the occupied same-polarity window cells (age-filtered).
    The most recent one seeds the set; each step adds the candidate whose
    constrained refit over the enlarged set has the smallest residual sum.
    Ties go to the first candidate in ring order. Returns a list of
    (x, y, t) with up to params.support_size entries.
    """
    entries = [
        (x, y, t)
        for (x, y), t in sae.window((e.x, e.y), params.radius, e.p)
        if t >= e.t - params.max_age
    ]
    if len(entries) < 3:
        raise InsufficientSupportError(
            f"{len(entries)} usable neighbors at ({e.x}, {e.y}), need >= 3"
        )
    # Deltas relative to the anchor; pixel deltas are exact small integers.
    dxs = [float(x - e.x) for x, y, t in entries]
    dys = [float(y - e.y) for x, y, t in entries]
    dts = [t - e.t for x, y, t in entries]

    seed = 0
    for i in range(1, len(entries)):
        if entries[i][2] > entries[seed][2]:
            seed = i
    chosen = [seed]
    sxx = dxs[seed] * dxs[seed]
    sxy = dxs[seed] * dys[seed]
    syy = dys[seed] * dys[seed]
    sxt = dxs[seed] * dts[seed]
    syt = dys[seed] * dts[seed]
    stt = dts[seed] * dts[seed]

    n_target = min(params.support_size, len(entries))
    in_set = [False] * len(entries)
    in_set[seed] = True
    while len(chosen) < n_target:
        best = -1
        best_rss = math.inf
        for i in range(len(entries)):
            if in_set[i]:
                continue
            rss = _fit_rss(
                sxx + dxs[i] * dxs[i],
                sxy + dxs[i] * dys[i],
                syy + dys[i] * dys[i],
                sxt + dxs[i] * dts[i],
                syt + dys[i] * dts[i],
                stt + dts[i] * dts[i],
            )
            if rss < best_rss:
                best_rss = rss
                best = i
        in_set[best] = True
        chosen.append(best)
        sxx += dxs[best] * dxs[best]
        sxy += dxs[best] * dys[best]
        syy += dys[best] * dys[best]
        sxt += dxs[best] * dts[best]
        syt += dys[best] * dts[best]
        stt += dts[best] * dts[best]
    return [entries[i] for i in chosen]


def _fit_rss(sxx, sxy, syy, sxt, syt, stt) -> float:
    """Residual sum of the constrained least-squares fit, given delta sums.

    Collinear supports make the 2x2 normal matrix singular (exactly, since
    pixel deltas are integers); the residual then comes from the rank-1
    fit along the common pixel direction.
    """
    det = sxx * syy - sxy * sxy
    if det != 0.0:
        gx = (sxt * syy - syt * sxy) / det
        gy = (syt * sxx - sxt * sxy) / det
        rss = stt - gx * sxt - gy * syt
    else:
        # All pixel deltas parallel to u; u'Mu = sxx+..., project the fit.
        if sxx >= syy:
            ux, uy = sxx, sxy
        else:
            ux, uy = sxy, syy
        qq = ux * (ux * sxx + uy * sxy) + uy * (ux * sxy + uy * syy)
        if qq > 0.0:
            s = (ux * sxt + uy * syt) / qq
            rss = stt - s * (ux * sxt + uy * syt)
        else:
            rss = stt
    return rss if rss > 0.0 else 0.0


def fit_plane_constrained(e: Event, support) -> PlaneParams:
    """Least-squares plane through the anchor event over support pixels.

    Solves (t_i - t_e) = g . (p_i - p_e) by the 2x2 normal equations; the
    anchor residual is exactly zero by construction.
    """
    if len(support) < 3:
        raise InsufficientSupportError(f"support of {len(support)} entries, need >= 3")
    sxx = sxy = syy = sxt = syt = 0.0
    for x, y, t in support:
        dx = float(x - e.x)
        dy = float(y - e.y)
        dt = t - e.t
        sxx += dx * dx
        sxy += dx * dy
        syy += dy * dy
        sxt += dx * dt
        syt += dy * dt
    det = sxx * syy - sxy * sxy
    if det == 0.0:
        raise DegenerateGeometryError("collinear support pixels")
    gx = (sxt * syy - syt * sxy) / det
    gy = (syt * sxx - sxt * sxy) / det
    return PlaneParams(
        a=gx,
        b=gy,
        c=-1.0,
        d=e.t - gx * e.x - gy * e.y,
        anchor=e,
    )


def flow_from_plane(pl: PlaneParams) -> NormalFlow:
    """Normal flow from plane parameters: v_perp = grad / |grad|^2."""
    if pl.c == 0.0:
        raise ValueError("plane parallel to the t-axis (c == 0)")
    gx, gy = pl.gradient()
    g2 = gx * gx + gy * gy
    if g2 == 0.0:
        return NormalFlow(
            grad=(gx, gy),
            v_perp=(math.nan, math.nan),
            speed=math.inf,
            orientation=math.nan,
        )
    vx = gx / g2
    vy = gy / g2
    return NormalFlow(
        grad=(gx, gy),
        v_perp=(vx, vy),
        speed=1.0 / math.sqrt(g2),
        orientation=math.atan2(vy, vx),
    )


_SM64_MASK = (1 << 64) - 1


class SplitMix64:
    """Tiny deterministic RNG shared between the Python and compiled paths.

    Library RNG streams differ between runtimes; this one is trivially
    reproduced in both, which keeps reservoir sampling bit-identical.
    The modulo bias in randbelow is negligible at these ranges.
    """

    def __init__(self, seed: int):
        self.state = seed & _SM64_MASK

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & _SM64_MASK
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _SM64_MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _SM64_MASK
        return (z ^ (z >> 31)) & _SM64_MASK

    def randbelow(self, n: int) -> int:
        return self.next_u64() % n


class QuantileReservoir:
    """Bounded uniform reservoir with sorted-order-statistic quantiles.

    Used for the accepted-speed noise filter and for the running per-pixel
    inter-event interval median. State lives in plain numpy arrays so the
    compiled pipeline kernel can mutate it in place.
    """

    def __init__(
        self,
        capacity: int = 4096,
        q_lo: float = 0.01,
        q_hi: float = 0.99,
        warmup: int = 500,
        seed: int = 0,
    ):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        if not (0.0 <= q_lo <= q_hi <= 1.0):
            raise ValueError(f"need 0 <= q_lo <= q_hi <= 1, got ({q_lo}, {q_hi})")
        self.capacity = int(capacity)
        self.q_lo = float(q_lo)
        self.q_hi = float(q_hi)
        self.warmup = int(warmup)
        self.slots = np.zeros(self.capacity, dtype=np.float64)
        self.sorted_vals = np.zeros(self.capacity, dtype=np.float64)
        # meta: [0] filled count, [1] total fed, [2] splitmix64 state
        self.meta = np.zeros(3, dtype=np.uint64)
        self.meta[2] = np.uint64(seed & _SM64_MASK)

    @property
    def count(self) -> int:
        """Total values fed so far (not the reservoir fill level)."""
        return int(self.meta[1])

    @property
    def size(self) -> int:
        return int(self.meta[0])

    def add(self, value: float) -> None:
        filled = int(self.meta[0])
        fed = int(self.meta[1])
        self.meta[1] = np.uint64(fed + 1)
        if filled < self.capacity:
            self.slots[filled] = value
            i = int(np.searchsorted(self.sorted_vals[:filled], value, side="right"))
            self.sorted_vals[i + 1 : filled + 1] = self.sorted_vals[i:filled]
            self.sorted_vals[i] = value
            self.meta[0] = np.uint64(filled + 1)
            return
        rng = SplitMix64(0)
        rng.state = int(self.meta[2])
        j = rng.randbelow(fed + 1)
        self.meta[2] = np.uint64(rng.state)
        if j < self.capacity:
            old = self.slots[j]
            self.slots[j] = value
            k = int(np.searchsorted(self.sorted_vals[:filled], old, side="left"))
            self.sorted_vals[k:filled - 1] = self.sorted_vals[k + 1 : filled]
            i = int(np.searchsorted(self.sorted_vals[: filled - 1], value, side="right"))
            self.sorted_vals[i + 1 : filled] = self.sorted_vals[i : filled - 1]
            self.sorted_vals[i] = value

    def quantile(self, q: float) -> float:
        """Linear-interpolated order statistic over the reservoir contents."""
        n = int(self.meta[0])
        if n == 0:
            return math.nan
        pos = q * (n - 1)
        lo = int(pos)
        if lo >= n - 1:
            return float(self.sorted_vals[n - 1])
        frac = pos - lo
        a = float(self.sorted_vals[lo])
        b = float(self.sorted_vals[lo + 1])
        return a + frac * (b - a)


# Relative slack on the quantile band so bit-level noise on an exactly
# constant speed distribution (zero-width band) cannot reject valid events.
QUANTILE_GUARD = 1e-9


def noise_accept(speed: float, stats: QuantileReservoir) -> bool:
    """Scene-adaptive accept/reject for a flow speed estimate.

    Non-finite speeds are always rejected. During warm-up every finite speed
    is accepted; afterwards a speed passes iff it lies between the reservoir's
    configured low and high quantiles (compared with an ulp-scale relative
    guard). Accepted speeds feed the reservoir, rejected ones do not.
    """
    if not math.isfinite(speed):
        return False
    if stats.count >= stats.warmup:
        lo = stats.quantile(stats.q_lo)
        hi = stats.quantile(stats.q_hi)
        if not (lo - QUANTILE_GUARD * abs(lo) <= speed <= hi + QUANTILE_GUARD * abs(hi)):
            return False
    stats.add(speed)
    return True
