"""Compiled per-event pipeline kernel (optional, requires numba).

Mirrors the pure-Python path in pipeline.py operation-for-operation: same
expressions, same evaluation order, same tie-breaking, same reservoir RNG
(splitmix64). The two paths share one state (SAE, lifetime store, reservoir
arrays) and must stay bit-identical; tests compare them event by event.
Keep any change here in lockstep with flow.py / lifetime.py / pipeline.py.
"""

from __future__ import annotations

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        if args and callable(args[0]):
            return args[0]
        return wrap


_U30 = np.uint64(30)
_U27 = np.uint64(27)
_U31 = np.uint64(31)
_SM_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_SM_MUL1 = np.uint64(0xBF58476D1CE4E5B9)
_SM_MUL2 = np.uint64(0x94D049BB133111EB)


def warm() -> None:
    """Force compilation (or cache load) of the event kernel.

    Called before timed runs so first-call JIT cost never lands inside a
    measured window. No-op without numba.
    """
    if not HAVE_NUMBA:
        return
    n = 4
    process_events(
        np.array([1, 2, 1, 2], dtype=np.int64),
        np.array([1, 1, 2, 2], dtype=np.int64),
        np.array([0.0, 0.001, 0.002, 0.003]),
        np.array([1, 1, 1, 1], dtype=np.int64),
        np.full((2, 4, 4), -1.0),
        np.full((2, 4, 4), -1.0),
        np.zeros((2, 4, 4)),
        np.zeros((2, 4, 4)),
        np.zeros((2, 4, 4)),
        np.zeros(8),
        np.zeros(8),
        np.zeros(3, dtype=np.uint64),
        np.zeros(8),
        np.zeros(8),
        np.zeros(3, dtype=np.uint64),
        np.array([-1, -1, -1, 0, 0, 1, 1, 1], dtype=np.int64),
        np.array([-1, 0, 1, -1, 1, -1, 0, 1], dtype=np.int64),
        5,
        0.0,
        5.0,
        100,
        0.01,
        0.99,
        500,
        3.0,
        3.0,
        True,
        False,
        np.zeros(n, dtype=np.int8),
        np.zeros(n),
        np.zeros(n),
        np.zeros(n),
        np.zeros(n),
    )


@njit(cache=True, nogil=True)
def _sm64_next(meta):
    s = meta[2] + _SM_GAMMA
    meta[2] = s
    z = s
    z = (z ^ (z >> _U30)) * _SM_MUL1
    z = (z ^ (z >> _U27)) * _SM_MUL2
    return z ^ (z >> _U31)


@njit(cache=True, nogil=True)
def _res_add(slots, svals, meta, value):
    cap = slots.shape[0]
    filled = np.int64(meta[0])
    fed = np.int64(meta[1])
    meta[1] = np.uint64(fed + 1)
    if filled < cap:
        slots[filled] = value
        i = np.searchsorted(svals[:filled], value, side="right")
        for k in range(filled, i, -1):
            svals[k] = svals[k - 1]
        svals[i] = value
        meta[0] = np.uint64(filled + 1)
        return
    j = np.int64(_sm64_next(meta) % np.uint64(fed + 1))
    if j < cap:
        old = slots[j]
        slots[j] = value
        k = np.searchsorted(svals[:filled], old, side="left")
        for m in range(k, filled - 1):
            svals[m] = svals[m + 1]
        i = np.searchsorted(svals[: filled - 1], value, side="right")
        for m in range(filled - 1, i, -1):
            svals[m] = svals[m - 1]
        svals[i] = value


@njit(cache=True, nogil=True)
def _res_quantile(svals, meta, q):
    n = np.int64(meta[0])
    if n == 0:
        return np.nan
    pos = q * (n - 1)
    lo = np.int64(pos)
    if lo >= n - 1:
        return svals[n - 1]
    frac = pos - lo
    a = svals[lo]
    b = svals[lo + 1]
    return a + frac * (b - a)


@njit(cache=True, nogil=True)
def _fit_rss(sxx, sxy, syy, sxt, syt, stt):
    det = sxx * syy - sxy * sxy
    if det != 0.0:
        gx = (sxt * syy - syt * sxy) / det
        gy = (syt * sxx - sxt * sxy) / det
        rss = stt - gx * sxt - gy * syt
    else:
        if sxx >= syy:
            ux = sxx
            uy = sxy
        else:
            ux = sxy
            uy = syy
        qq = ux * (ux * sxx + uy * sxy) + uy * (ux * sxy + uy * syy)
        if qq > 0.0:
            s = (ux * sxt + uy * syt) / qq
            rss = stt - s * (ux * sxt + uy * syt)
        else:
            rss = stt
    if rss > 0.0:
        return rss
    return 0.0


@njit(cache=True, nogil=True)
def process_events(
    xs,
    ys,
    ts,
    ps,
    sae_t,
    birth,
    eff_bei,
    eff_c,
    orient,
    sp_slots,
    sp_sorted,
    sp_meta,
    iv_slots,
    iv_sorted,
    iv_meta,
    off_dy,
    off_dx,
    support_size,
    max_age_fixed,
    max_age_scale,
    interval_warmup,
    q_lo,
    q_hi,
    warmup,
    kappa_bei,
    kappa_c,
    do_reset,
    reset_zero,
    out_status,
    out_gx,
    out_gy,
    out_speed,
    out_orient,
):
    height = sae_t.shape[1]
    width = sae_t.shape[2]
    n_off = off_dy.shape[0]
    cand_dx = np.empty(n_off, dtype=np.float64)
    cand_dy = np.empty(n_off, dtype=np.float64)
    cand_dt = np.empty(n_off, dtype=np.float64)
    cand_tv = np.empty(n_off, dtype=np.float64)
    in_set = np.empty(n_off, dtype=np.bool_)

    for ei in range(ts.shape[0]):
        x = xs[ei]
        y = ys[ei]
        t = ts[ei]
        q = (ps[ei] + 1) // 2

        prev = sae_t[q, y, x]
        if prev >= 0.0 and t > prev:
            _res_add(iv_slots, iv_sorted, iv_meta, t - prev)
        if max_age_fixed > 0.0:
            max_age = max_age_fixed
        elif np.int64(iv_meta[1]) >= interval_warmup:
            max_age = max_age_scale * _res_quantile(iv_sorted, iv_meta, 0.5)
        else:
            max_age = np.inf
        sae_t[q, y, x] = t

        m = 0
        age_floor = t - max_age
        for k in range(n_off):
            yy = y + off_dy[k]
            xx = x + off_dx[k]
            if 0 <= xx < width and 0 <= yy < height:
                v = sae_t[q, yy, xx]
                if v >= 0.0 and v >= age_floor:
                    cand_dx[m] = np.float64(xx - x)
                    cand_dy[m] = np.float64(yy - y)
                    cand_dt[m] = v - t
                    cand_tv[m] = v
                    m += 1
        out_gx[ei] = np.nan
        out_gy[ei] = np.nan
        out_speed[ei] = np.nan
        out_orient[ei] = np.nan
        if m < 3:
            out_status[ei] = 1
            continue

        seed = 0
        for i in range(1, m):
            if cand_tv[i] > cand_tv[seed]:
                seed = i
        for i in range(m):
            in_set[i] = False
        in_set[seed] = True
        sxx = cand_dx[seed] * cand_dx[seed]
        sxy = cand_dx[seed] * cand_dy[seed]
        syy = cand_dy[seed] * cand_dy[seed]
        sxt = cand_dx[seed] * cand_dt[seed]
        syt = cand_dy[seed] * cand_dt[seed]
        stt = cand_dt[seed] * cand_dt[seed]

        n_target = min(support_size, m)
        chosen = 1
        while chosen < n_target:
            best = -1
            best_rss = np.inf
            for i in range(m):
                if in_set[i]:
                    continue
                rss = _fit_rss(
                    sxx + cand_dx[i] * cand_dx[i],
                    sxy + cand_dx[i] * cand_dy[i],
                    syy + cand_dy[i] * cand_dy[i],
                    sxt + cand_dx[i] * cand_dt[i],
                    syt + cand_dy[i] * cand_dt[i],
                    stt + cand_dt[i] * cand_dt[i],
                )
                if rss < best_rss:
                    best_rss = rss
                    best = i
            in_set[best] = True
            chosen += 1
            sxx += cand_dx[best] * cand_dx[best]
            sxy += cand_dx[best] * cand_dy[best]
            syy += cand_dy[best] * cand_dy[best]
            sxt += cand_dx[best] * cand_dt[best]
            syt += cand_dy[best] * cand_dt[best]
            stt += cand_dt[best] * cand_dt[best]

        det = sxx * syy - sxy * sxy
        if det == 0.0:
            out_status[ei] = 2
            continue
        gx = (sxt * syy - syt * sxy) / det
        gy = (syt * sxx - sxt * sxy) / det
        out_gx[ei] = gx
        out_gy[ei] = gy
        g2 = gx * gx + gy * gy
        if g2 == 0.0:
            out_speed[ei] = np.inf
            out_status[ei] = 3
            continue
        speed = 1.0 / np.sqrt(g2)
        if not np.isfinite(speed):
            out_speed[ei] = np.inf
            out_status[ei] = 3
            continue
        vx = gx / g2
        vy = gy / g2
        orientation = np.arctan2(vy, vx)
        out_speed[ei] = speed
        out_orient[ei] = orientation

        if np.int64(sp_meta[1]) >= warmup:
            lo_est = _res_quantile(sp_sorted, sp_meta, q_lo)
            hi_est = _res_quantile(sp_sorted, sp_meta, q_hi)
            if not (lo_est - 1e-9 * abs(lo_est) <= speed <= hi_est + 1e-9 * abs(hi_est)):
                out_status[ei] = 4
                continue
        _res_add(sp_slots, sp_sorted, sp_meta, speed)

        tau = np.sqrt(gx * gx + gy * gy)
        t_eff_bei = kappa_bei * tau
        t_eff_c = kappa_c * tau
        if birth[q, y, x] <= t:
            birth[q, y, x] = t
            eff_bei[q, y, x] = t_eff_bei
            eff_c[q, y, x] = t_eff_c
            orient[q, y, x] = orientation
        if do_reset:
            ox = np.int64(np.floor(np.cos(orientation) + 0.5))
            oy = np.int64(np.floor(np.sin(orientation) + 0.5))
            nx = x - ox
            ny = y - oy
            if 0 <= nx < width and 0 <= ny < height:
                nb = birth[q, ny, nx]
                if nb >= 0.0:
                    if reset_zero:
                        eff_bei[q, ny, nx] = 0.0
                        eff_c[q, ny, nx] = 0.0
                    else:
                        cut = t - nb
                        if cut < 0.0:
                            cut = 0.0
                        if cut < eff_bei[q, ny, nx]:
                            eff_bei[q, ny, nx] = cut
                        if cut < eff_c[q, ny, nx]:
                            eff_c[q, ny, nx] = cut
        out_status[ei] = 0
