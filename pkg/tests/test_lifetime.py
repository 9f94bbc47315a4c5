"""Lifetime conversion, extension, storage, and the opposite-flow reset."""

import math

import numpy as np
import pytest

from evbei.events import Event
from evbei.flow import NormalFlow
from evbei.lifetime import (
    LifetimeRecord,
    LifetimeStore,
    augment,
    insert_and_reset,
    lifetime_from_flow,
    reset_offset,
)


def flow_for(gx, gy):
    g2 = gx * gx + gy * gy
    return NormalFlow(
        grad=(gx, gy),
        v_perp=(gx / g2, gy / g2),
        speed=1.0 / math.sqrt(g2),
        orientation=math.atan2(gy / g2, gx / g2),
    )


def record_at(t, tau_eff, orientation=0.0, p=1):
    return LifetimeRecord(
        birth=t, tau=tau_eff / 3.0, tau_ext_bei=tau_eff, tau_ext_c=tau_eff,
        tau_eff_bei=tau_eff, tau_eff_c=tau_eff, orientation=orientation, polarity=p,
    )


class TestLifetimeFromFlow:
    def test_gradient_magnitude(self):
        assert lifetime_from_flow(flow_for(0.003, 0.004)) == pytest.approx(0.005, rel=1e-12)

    def test_reciprocal_speed(self):
        f = flow_for(0.005, 0.0)  # speed 200
        assert f.speed == pytest.approx(200.0)
        assert lifetime_from_flow(f) == pytest.approx(0.005, rel=1e-12)

    def test_zero_speed_error(self):
        bad = NormalFlow(grad=(0.0, 0.0), v_perp=(0.0, 0.0), speed=0.0, orientation=0.0)
        with pytest.raises(ValueError):
            lifetime_from_flow(bad)

    def test_infinite_speed_error(self):
        bad = NormalFlow(grad=(0.0, 0.0), v_perp=(math.nan, math.nan), speed=math.inf, orientation=math.nan)
        with pytest.raises(ValueError):
            lifetime_from_flow(bad)


class TestAugment:
    def test_kappa_three(self):
        assert augment(0.005, 3.0) == pytest.approx(0.015, rel=1e-12)

    def test_kappa_one_identity(self):
        assert augment(0.005, 1.0) == 0.005

    def test_kappa_five(self):
        assert augment(0.005, 5.0) == pytest.approx(0.025, rel=1e-12)

    def test_kappa_below_one_rejected(self):
        with pytest.raises(ValueError):
            augment(0.005, 0.99)


class TestResetOffset:
    def test_cardinal_directions(self):
        assert reset_offset(0.0) == (-1, 0)
        assert reset_offset(math.pi / 2) == (0, -1)
        assert reset_offset(math.pi) == (1, 0)
        assert reset_offset(-math.pi / 2) == (0, 1)

    def test_diagonal(self):
        assert reset_offset(math.pi / 4) == (-1, -1)
        assert reset_offset(3 * math.pi / 4) == (1, -1)

    def test_never_zero(self):
        for ang in np.linspace(-math.pi, math.pi, 721):
            assert reset_offset(float(ang)) != (0, 0)


class TestInsertAndReset:
    def test_neighbor_truncated_to_event_time(self):
        # Edge moving +x: the event at (5, y) deactivates (4, y) at t_e.
        store = LifetimeStore(10, 4)
        e0 = Event(4, 2, 0.995, 1)
        insert_and_reset(store, e0, record_at(0.995, 0.015), reset=False)
        e1 = Event(5, 2, 1.000, 1)
        insert_and_reset(store, e1, record_at(1.000, 0.015, orientation=0.0))
        birth, eff_bei, eff_c, _ = store.get(1, 4, 2)
        assert eff_bei == pytest.approx(0.005, rel=1e-12)
        assert eff_c == pytest.approx(0.005, rel=1e-12)

    def test_missing_neighbor_noop(self):
        store = LifetimeStore(10, 4)
        insert_and_reset(store, Event(5, 2, 1.0, 1), record_at(1.0, 0.015))
        assert store.get(1, 5, 2) is not None
        assert store.get(1, 4, 2) is None

    def test_diagonal_orientation_targets_diagonal_neighbor(self):
        store = LifetimeStore(10, 10)
        insert_and_reset(store, Event(4, 4, 0.5, 1), record_at(0.5, 0.02), reset=False)
        insert_and_reset(store, Event(5, 5, 0.51, 1), record_at(0.51, 0.02, orientation=math.pi / 4))
        _, eff_bei, _, _ = store.get(1, 4, 4)
        assert eff_bei == pytest.approx(0.01, rel=1e-12)

    def test_opposite_polarity_untouched(self):
        store = LifetimeStore(10, 4)
        insert_and_reset(store, Event(4, 2, 0.995, -1), record_at(0.995, 0.015, p=-1), reset=False)
        insert_and_reset(store, Event(5, 2, 1.0, 1), record_at(1.0, 0.015))
        _, eff_bei, _, _ = store.get(-1, 4, 2)
        assert eff_bei == 0.015

    def test_zero_mode(self):
        store = LifetimeStore(10, 4)
        insert_and_reset(store, Event(4, 2, 0.995, 1), record_at(0.995, 0.015), reset=False)
        insert_and_reset(store, Event(5, 2, 1.0, 1), record_at(1.0, 0.015), reset_mode="zero")
        _, eff_bei, eff_c, _ = store.get(1, 4, 2)
        assert eff_bei == 0.0 and eff_c == 0.0

    def test_reset_never_extends(self):
        # Neighbor born long ago with a short lifetime keeps it.
        store = LifetimeStore(10, 4)
        insert_and_reset(store, Event(4, 2, 0.2, 1), record_at(0.2, 0.001), reset=False)
        insert_and_reset(store, Event(5, 2, 1.0, 1), record_at(1.0, 0.015))
        _, eff_bei, _, _ = store.get(1, 4, 2)
        assert eff_bei == 0.001

    def test_translating_edge_timeline_oracle(self):
        # 1-D edge at v px/s: every record ends up truncated to exactly the
        # inter-crossing interval except the newest one.
        v = 100.0
        kappa = 3.0
        store = LifetimeStore(32, 1)
        times = [x / v for x in range(20)]
        for x, t in enumerate(times):
            tau = 1.0 / v
            rec = LifetimeRecord(
                birth=t, tau=tau, tau_ext_bei=kappa * tau, tau_ext_c=kappa * tau,
                tau_eff_bei=kappa * tau, tau_eff_c=kappa * tau,
                orientation=0.0, polarity=1,
            )
            insert_and_reset(store, Event(x, 0, t, 1), rec)
        for x in range(19):  # all but the newest
            _, eff_bei, eff_c, _ = store.get(1, x, 0)
            assert eff_bei == pytest.approx(1.0 / v, rel=1e-9)
        _, eff_last, _, _ = store.get(1, 19, 0)
        assert eff_last == pytest.approx(kappa / v, rel=1e-12)

    def test_replacement_keeps_latest_birth(self):
        store = LifetimeStore(8, 8)
        insert_and_reset(store, Event(3, 3, 1.0, 1), record_at(1.0, 0.01), reset=False)
        insert_and_reset(store, Event(3, 3, 2.0, 1), record_at(2.0, 0.02), reset=False)
        birth, eff, _, _ = store.get(1, 3, 3)
        assert birth == 2.0 and eff == 0.02

    def test_monotone_eff_under_random_ops(self):
        rng = np.random.default_rng(6)
        store = LifetimeStore(12, 12)
        prev_bei = store.tau_eff_bei.copy()
        prev_birth = store.birth.copy()
        t = 0.0
        for _ in range(400):
            t += float(rng.random()) * 0.01
            x = int(rng.integers(0, 12))
            y = int(rng.integers(0, 12))
            ang = float(rng.uniform(-math.pi, math.pi))
            insert_and_reset(store, Event(x, y, t, 1), record_at(t, float(rng.random()) * 0.05, ang))
            # eff only decreases except where a record was replaced
            replaced = store.birth != prev_birth
            assert (store.tau_eff_bei[~replaced] <= prev_bei[~replaced] + 1e-15).all()
            prev_bei = store.tau_eff_bei.copy()
            prev_birth = store.birth.copy()

    def test_snapshot_isolated(self):
        store = LifetimeStore(8, 8)
        insert_and_reset(store, Event(3, 3, 1.0, 1), record_at(1.0, 0.01), reset=False)
        snap = store.snapshot()
        insert_and_reset(store, Event(3, 3, 2.0, 1), record_at(2.0, 0.02), reset=False)
        assert snap.get(1, 3, 3)[0] == 1.0


def test_record_from_flow():
    f = flow_for(0.003, 0.004)
    rec = LifetimeRecord.from_flow(Event(2, 3, 1.5, 1), f, kappa_bei=3.0, kappa_c=2.0)
    assert rec.birth == 1.5
    assert rec.tau == pytest.approx(0.005, rel=1e-12)
    assert rec.tau_ext_bei == pytest.approx(0.015, rel=1e-12)
    assert rec.tau_ext_c == pytest.approx(0.010, rel=1e-12)
    assert rec.tau_eff_bei == rec.tau_ext_bei
    assert rec.polarity == 1
