"""Event lifetimes: conversion from flow, extension, storage, and reset.

An event's lifetime is the maximum time its feature needs to travel one
pixel, i.e. the reciprocal of the normal-flow speed (equivalently the SAE
gradient magnitude). Extended lifetimes (kappa >= 1) tolerate flow error;
the opposite-flow neighbor reset thins the rendered edges back down.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from evbei.events import Event, pol_index
from evbei.flow import NormalFlow

__all__ = [
    "LifetimeRecord",
    "LifetimeStore",
    "lifetime_from_flow",
    "augment",
    "insert_and_reset",
    "reset_offset",
]


def lifetime_from_flow(flow: NormalFlow) -> float:
    """Base lifetime: the SAE gradient magnitude, = 1 / flow speed."""
    if not (math.isfinite(flow.speed) and flow.speed > 0.0):
        raise ValueError(f"lifetime undefined for speed {flow.speed}")
    gx, gy = flow.grad
    return math.sqrt(gx * gx + gy * gy)


def augment(tau: float, kappa: float) -> float:
    """Extended lifetime kappa * tau; kappa must be >= 1."""
    if kappa < 1.0:
        raise ValueError(f"extension factor must be >= 1, got {kappa}")
    return kappa * tau


@dataclass(frozen=True)
class LifetimeRecord:
    """Lifetimes attached to one event.

    tau_ext_bei drives BEI rendering, tau_ext_c drives the scene-complexity
    estimate; the eff_* values start equal to ext_* and only ever shrink
    under neighbor resets.
    """

    birth: float
    tau: float
    tau_ext_bei: float
    tau_ext_c: float
    tau_eff_bei: float
    tau_eff_c: float
    orientation: float
    polarity: int

    @classmethod
    def from_flow(cls, e: Event, flow: NormalFlow, kappa_bei: float, kappa_c: float):
        tau = lifetime_from_flow(flow)
        ext_bei = augment(tau, kappa_bei)
        ext_c = augment(tau, kappa_c)
        return cls(
            birth=e.t,
            tau=tau,
            tau_ext_bei=ext_bei,
            tau_ext_c=ext_c,
            tau_eff_bei=ext_bei,
            tau_eff_c=ext_c,
            orientation=flow.orientation,
            polarity=e.p,
        )


def reset_offset(orientation: float) -> tuple[int, int]:
    """8-neighbor offset toward the flow source: -round(unit(orientation)).

    Component-wise rounding with halves away from zero handled via
    floor(v + 0.5), so the rule is identical in the compiled kernel.
    """
    ox = int(math.floor(math.cos(orientation) + 0.5))
    oy = int(math.floor(math.sin(orientation) + 0.5))
    return (-ox, -oy)


class LifetimeStore:
    """Most recent lifetime record per (pixel, polarity), array-backed.

    Unoccupied cells hold birth == -1. Records are only replaced by newer
    (or equal) birth times, and effective lifetimes only ever decrease.
    """

    UNSET = -1.0

    def __init__(self, width: int, height: int):
        self.width = int(width)
        self.height = int(height)
        shape = (2, self.height, self.width)
        self.birth = np.full(shape, self.UNSET, dtype=np.float64)
        self.tau_eff_bei = np.zeros(shape, dtype=np.float64)
        self.tau_eff_c = np.zeros(shape, dtype=np.float64)
        self.orientation = np.zeros(shape, dtype=np.float64)

    def occupied(self, p: int, x: int, y: int) -> bool:
        return self.birth[pol_index(p), y, x] != self.UNSET

    def get(self, p: int, x: int, y: int):
        """(birth, tau_eff_bei, tau_eff_c, orientation) or None if empty."""
        q = pol_index(p)
        if self.birth[q, y, x] == self.UNSET:
            return None
        return (
            float(self.birth[q, y, x]),
            float(self.tau_eff_bei[q, y, x]),
            float(self.tau_eff_c[q, y, x]),
            float(self.orientation[q, y, x]),
        )

    def snapshot(self) -> "LifetimeStore":
        s = LifetimeStore.__new__(LifetimeStore)
        s.width = self.width
        s.height = self.height
        s.birth = self.birth.copy()
        s.tau_eff_bei = self.tau_eff_bei.copy()
        s.tau_eff_c = self.tau_eff_c.copy()
        s.orientation = self.orientation.copy()
        return s


def insert_and_reset(
    store: LifetimeStore,
    e: Event,
    rec: LifetimeRecord,
    reset: bool = True,
    reset_mode: str = "truncate",
) -> None:
    """Store the record at the event's pixel and reset its source neighbor.

    The same-polarity neighbor one step against the flow direction gets both
    effective lifetimes truncated so it deactivates at e.t (never extended,
    clamped at 0). reset_mode="zero" zeroes them outright instead, which
    also erases the neighbor's past activity. Missing neighbors are a no-op.
    """
    q = pol_index(e.p)
    if store.birth[q, e.y, e.x] <= rec.birth:
        store.birth[q, e.y, e.x] = rec.birth
        store.tau_eff_bei[q, e.y, e.x] = rec.tau_eff_bei
        store.tau_eff_c[q, e.y, e.x] = rec.tau_eff_c
        store.orientation[q, e.y, e.x] = rec.orientation
    if not reset:
        return
    ox, oy = reset_offset(rec.orientation)
    nx, ny = e.x + ox, e.y + oy
    if not (0 <= nx < store.width and 0 <= ny < store.height):
        return
    nb = store.birth[q, ny, nx]
    if nb == store.UNSET:
        return
    if reset_mode == "zero":
        store.tau_eff_bei[q, ny, nx] = 0.0
        store.tau_eff_c[q, ny, nx] = 0.0
        return
    cut = e.t - nb
    if cut < 0.0:
        cut = 0.0
    if cut < store.tau_eff_bei[q, ny, nx]:
        store.tau_eff_bei[q, ny, nx] = cut
    if cut < store.tau_eff_c[q, ny, nx]:
        store.tau_eff_c[q, ny, nx] = cut
