"""Plane fitting, support selection, and the adaptive noise filter."""

import itertools
import math

import numpy as np
import pytest

from evbei.events import SAE, Event
from evbei.flow import (
    DegenerateGeometryError,
    FlowParams,
    InsufficientSupportError,
    PlaneParams,
    QuantileReservoir,
    SplitMix64,
    fit_plane_constrained,
    flow_from_plane,
    noise_accept,
    select_support,
)


def planar_sae(width, height, t0, gx, gy, p=1, origin=(0, 0)):
    """SAE whose polarity-p surface is exactly t0 + gx(x-ox) + gy(y-oy)."""
    sae = SAE(width, height)
    ox, oy = origin
    for y in range(height):
        for x in range(width):
            sae.update(Event(x, y, t0 + gx * (x - ox) + gy * (y - oy), p))
    return sae


def support_rss(e, support):
    """Independent least-squares residual for the anchored model."""
    a = np.array([[x - e.x, y - e.y] for x, y, _ in support], dtype=float)
    b = np.array([t - e.t for _, _, t in support])
    g, res, rank, _ = np.linalg.lstsq(a, b, rcond=None)
    pred = a @ g
    return float(np.sum((b - pred) ** 2))


class TestSelectSupport:
    def test_planar_full_window_returns_n_zero_residual(self):
        sae = planar_sae(7, 7, 10.0, 0.01, -0.004)
        e = Event(3, 3, sae.lookup(1, 3, 3), 1)
        support = select_support(sae, e, FlowParams())
        assert len(support) == 5
        assert support_rss(e, support) < 1e-20

    def test_two_neighbors_insufficient(self):
        sae = SAE(7, 7)
        sae.update(Event(2, 3, 0.9, 1))
        sae.update(Event(4, 3, 0.95, 1))
        e = Event(3, 3, 1.0, 1)
        sae.update(e)
        with pytest.raises(InsufficientSupportError):
            select_support(sae, e, FlowParams())

    def test_stale_outlier_excluded_and_greedy_minimal(self):
        # Planar patch plus one very old cell: the age bound excludes it and
        # brute force over all 5-subsets of usable entries confirms the
        # greedy selection attains the minimum residual on this instance.
        sae = planar_sae(7, 7, 10.0, 0.008, 0.002)
        sae.update(Event(2, 2, 0.5, 1))  # stale outlier
        e = Event(3, 3, sae.lookup(1, 3, 3), 1)
        params = FlowParams(max_age=1.0)
        support = select_support(sae, e, params)
        assert (2, 2) not in {(x, y) for x, y, _ in support}
        usable = [
            (x, y, t)
            for (x, y), t in sae.window((e.x, e.y), params.radius, e.p)
            if t >= e.t - params.max_age
        ]
        best = min(
            support_rss(e, list(sub)) for sub in itertools.combinations(usable, 5)
        )
        assert support_rss(e, support) <= best + 1e-18

    def test_max_age_infinite_keeps_old(self):
        sae = planar_sae(7, 7, 10.0, 0.008, 0.002)
        sae.update(Event(2, 2, 0.5, 1))
        e = Event(3, 3, sae.lookup(1, 3, 3), 1)
        support = select_support(sae, e, FlowParams())  # max_age = inf
        assert len(support) == 5  # outlier eligible, greedy just avoids it

    def test_sparse_window_returns_fewer(self):
        sae = SAE(9, 9)
        for x, y, t in [(3, 4, 0.6), (5, 4, 0.7), (4, 3, 0.8), (4, 5, 0.9)]:
            sae.update(Event(x, y, t, 1))
        e = Event(4, 4, 1.0, 1)
        sae.update(e)
        support = select_support(sae, e, FlowParams(support_size=8))
        assert len(support) == 4


class TestFitPlane:
    def test_exact_recovery_simple(self):
        sae = planar_sae(7, 7, 5.0, 0.01, 0.0)
        e = Event(3, 3, sae.lookup(1, 3, 3), 1)
        support = select_support(sae, e, FlowParams())
        pl = fit_plane_constrained(e, support)
        gx, gy = pl.gradient()
        assert gx == pytest.approx(0.01, rel=1e-12)
        assert gy == pytest.approx(0.0, abs=1e-12)

    def test_anchor_on_plane_exactly(self):
        sae = planar_sae(7, 7, 5.0, 0.003, -0.002)
        e = Event(2, 4, sae.lookup(1, 2, 4), 1)
        support = select_support(sae, e, FlowParams())
        pl = fit_plane_constrained(e, support)
        residual = pl.a * e.x + pl.b * e.y + pl.c * e.t + pl.d
        assert residual == 0.0

    def test_collinear_support_degenerate(self):
        e = Event(3, 3, 1.0, 1)
        support = [(3, 1, 0.8), (3, 2, 0.9), (3, 5, 0.7)]  # all x == x_e
        with pytest.raises(DegenerateGeometryError):
            fit_plane_constrained(e, support)

    def test_too_small_support(self):
        e = Event(3, 3, 1.0, 1)
        with pytest.raises(InsufficientSupportError):
            fit_plane_constrained(e, [(2, 2, 0.9), (4, 4, 0.8)])

    def test_noisy_support_matches_lstsq_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            e = Event(5, 5, 2.0, 1)
            pts = rng.choice(24, size=6, replace=False)
            offs = [(dy, dx) for dy in range(-2, 3) for dx in range(-2, 3) if (dy, dx) != (0, 0)]
            support = []
            gx_true, gy_true = rng.normal(size=2) * 0.01
            for k in pts:
                dy, dx = offs[k]
                t = e.t + gx_true * dx + gy_true * dy + rng.normal() * 1e-4
                support.append((e.x + dx, e.y + dy, t))
            pl = fit_plane_constrained(e, support)
            a = np.array([[x - e.x, y - e.y] for x, y, _ in support], dtype=float)
            b = np.array([t - e.t for _, _, t in support])
            g_oracle = np.linalg.lstsq(a, b, rcond=None)[0]
            gx, gy = pl.gradient()
            assert gx == pytest.approx(g_oracle[0], rel=1e-9, abs=1e-15)
            assert gy == pytest.approx(g_oracle[1], rel=1e-9, abs=1e-15)


class TestFlowFromPlane:
    def test_speed_from_gradient(self):
        pl = PlaneParams(a=0.003, b=0.004, c=-1.0, d=0.0, anchor=Event(0, 0, 0.0, 1))
        flow = flow_from_plane(pl)
        assert flow.speed == pytest.approx(200.0, rel=1e-12)

    def test_axis_aligned(self):
        pl = PlaneParams(a=0.01, b=0.0, c=-1.0, d=0.0, anchor=Event(0, 0, 0.0, 1))
        flow = flow_from_plane(pl)
        assert flow.v_perp[0] == pytest.approx(100.0, rel=1e-12)
        assert flow.v_perp[1] == 0.0
        assert flow.orientation == 0.0

    def test_zero_gradient_infinite_speed(self):
        pl = PlaneParams(a=0.0, b=0.0, c=-1.0, d=0.0, anchor=Event(0, 0, 0.0, 1))
        flow = flow_from_plane(pl)
        assert math.isinf(flow.speed)
        assert math.isnan(flow.orientation)

    def test_invariants_random(self):
        rng = np.random.default_rng(8)
        for _ in range(200):
            gx, gy = rng.normal(size=2) * 0.01
            if gx == 0 and gy == 0:
                continue
            pl = PlaneParams(a=gx, b=gy, c=-1.0, d=0.0, anchor=Event(0, 0, 0.0, 1))
            f = flow_from_plane(pl)
            g = math.hypot(gx, gy)
            assert f.speed * g == pytest.approx(1.0, rel=1e-9)
            assert f.v_perp[0] == pytest.approx(gx / g**2, rel=1e-9)
            assert f.v_perp[1] == pytest.approx(gy / g**2, rel=1e-9)


class TestNoiseFilter:
    def test_warmup_accepts_everything_finite(self):
        stats = QuantileReservoir(warmup=10)
        assert noise_accept(50.0, stats)
        assert noise_accept(1e9, stats)
        assert stats.count == 2

    def test_rejects_nonfinite_always(self):
        stats = QuantileReservoir(warmup=0)
        assert not noise_accept(float("nan"), stats)
        assert not noise_accept(float("inf"), stats)
        assert stats.count == 0

    def test_tail_rejection_with_quantile_oracle(self):
        rng = np.random.default_rng(2)
        stats = QuantileReservoir(capacity=4096, q_lo=0.01, q_hi=0.99, warmup=500, seed=0)
        for v in rng.uniform(90, 110, 1000):
            noise_accept(float(v), stats)
        # Oracle: numpy linear-interpolated quantile over the same reservoir.
        contents = np.sort(stats.slots[: stats.size])
        lo = float(np.quantile(contents, 0.01))
        hi = float(np.quantile(contents, 0.99))
        assert stats.quantile(0.01) == pytest.approx(lo, rel=1e-12)
        assert stats.quantile(0.99) == pytest.approx(hi, rel=1e-12)
        assert not noise_accept(5000.0, stats)
        assert noise_accept(100.0, stats)
        mid = 0.5 * (lo + hi)
        assert noise_accept(mid, stats)

    def test_rejected_values_not_fed(self):
        stats = QuantileReservoir(capacity=64, warmup=5, seed=1)
        for v in (100.0, 101.0, 99.0, 100.5, 100.2):
            noise_accept(v, stats)
        n = stats.count
        assert not noise_accept(1e6, stats)
        assert stats.count == n

    def test_quantile_monotone(self):
        stats = QuantileReservoir(capacity=128, seed=4)
        rng = np.random.default_rng(4)
        for v in rng.exponential(100.0, 300):
            stats.add(float(v))
        qs = [stats.quantile(q) for q in np.linspace(0, 1, 21)]
        assert all(a <= b + 1e-12 for a, b in zip(qs, qs[1:]))

    def test_reservoir_bounded_and_deterministic(self):
        a = QuantileReservoir(capacity=32, seed=7)
        b = QuantileReservoir(capacity=32, seed=7)
        rng = np.random.default_rng(7)
        for v in rng.random(500):
            a.add(float(v))
            b.add(float(v))
        assert a.size == 32
        assert np.array_equal(a.slots, b.slots)
        assert np.array_equal(a.sorted_vals, b.sorted_vals)
        assert np.array_equal(np.sort(a.slots), a.sorted_vals)

    def test_capacity_one_edge(self):
        r = QuantileReservoir(capacity=1, seed=0)
        r.add(5.0)
        r.add(7.0)
        assert r.size == 1
        assert r.quantile(0.5) in (5.0, 7.0)


class TestSplitMix64:
    def test_mask_and_range(self):
        rng = SplitMix64(0)
        vals = [rng.next_u64() for _ in range(100)]
        assert all(0 <= v < (1 << 64) for v in vals)
        assert len(set(vals)) == 100

    def test_seed_determinism(self):
        assert [SplitMix64(42).next_u64() for _ in range(3)] == [
            SplitMix64(42).next_u64() for _ in range(3)
        ]
