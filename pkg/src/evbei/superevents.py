"""Superevent extraction from a BEI.

Grid-initialized iterative clustering where each pixel may only take one of
the nine labels whose home grid cell is within one cell (Chebyshev) of the
pixel's own cell. Appearance is the binary activity plus, optionally, the
flow-orientation unit vector. After the assignment rounds, regions are made
4-connected and labels whose active-to-total pixel ratio falls below a
threshold are merged into the neighbor sharing the longest boundary.

The assignment step has a compiled twin (numba, optional) mirroring the
numpy arithmetic expression-for-expression; both resolve cost ties to the
smallest label id and produce identical label maps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from evbei.bei import BEI

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    _HAVE_NUMBA = False

__all__ = [
    "ClusterConfig",
    "Centroids",
    "SupereventLabelMap",
    "init_grid",
    "assign_step",
    "update_centroids",
    "assignment_objective",
    "enforce_connectivity",
    "merge_sparse",
    "extract_boundaries",
    "label_stats",
    "segment_bei",
]

_FOUR_CONN = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


@dataclass(frozen=True)
class ClusterConfig:
    """Clustering knobs.

    compactness m weighs spatial distance as (m / cell_size)^2 * d^2 against
    the appearance terms; orientation_weight scales the flow-direction term
    for active pixels. merge_threshold is the minimum active ratio a
    superevent must keep to survive merging. seed is reserved; the
    clustering itself is deterministic.
    """

    cell_size: int = 16
    iterations: int = 10
    compactness: float = 1.0
    orientation_weight: float = 0.5
    merge_threshold: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.cell_size < 2:
            raise ValueError(f"cell_size must be >= 2, got {self.cell_size}")
        if not (0.0 <= self.merge_threshold <= 1.0):
            raise ValueError(f"merge_threshold must be in [0, 1], got {self.merge_threshold}")
        if self.compactness < 0 or self.orientation_weight < 0:
            raise ValueError("weights must be >= 0")


@dataclass
class Centroids:
    """Per-label state: mean position, mean activity, mean orientation vector.

    ux/uy stay at their last value (initially zero) for labels that currently
    have no active members, and everything persists across empty rounds.
    """

    x: np.ndarray
    y: np.ndarray
    activity: np.ndarray
    ux: np.ndarray
    uy: np.ndarray

    def copy(self) -> "Centroids":
        return Centroids(self.x.copy(), self.y.copy(), self.activity.copy(), self.ux.copy(), self.uy.copy())


@dataclass
class SupereventLabelMap:
    """Final per-pixel assignment plus per-superevent statistics."""

    labels: np.ndarray  # int32 (H, W)
    grid_shape: tuple[int, int]  # (rows, cols) of initial cells
    cell_size: int
    stats: np.ndarray  # structured: label, pixels, active, ratio, cx, cy

    @property
    def n_labels(self) -> int:
        return len(self.stats)


# Static per-geometry index grids, built once per (h, w, cell_size).
_GRID_CACHE: dict[tuple[int, int, int], dict] = {}


def _grid_arrays(h: int, w: int, cell_size: int) -> dict:
    key = (h, w, cell_size)
    cached = _GRID_CACHE.get(key)
    if cached is not None:
        return cached
    cols = (w + cell_size - 1) // cell_size
    rows = (h + cell_size - 1) // cell_size
    ys, xs = np.mgrid[0:h, 0:w]
    cell_r = ys // cell_size
    cell_c = xs // cell_size
    cands = []
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            rr = cell_r + dr
            cc = cell_c + dc
            valid = (rr >= 0) & (rr < rows) & (cc >= 0) & (cc < cols)
            cand = (rr * cols + cc).astype(np.int32)
            cand[~valid] = -1
            cands.append(cand)
    data = {
        "rows": rows,
        "cols": cols,
        "xs": xs.astype(np.float64),
        "ys": ys.astype(np.float64),
        "base": (cell_r * cols + cell_c).astype(np.int32),
        "cands": np.stack(cands),  # (9, H, W), -1 where out of grid
    }
    _GRID_CACHE[key] = data
    return data


def init_grid(width: int, height: int, cell_size: int):
    """Tile the image into cell_size squares (edge cells truncated).

    Returns (labels, centroids, grid_shape). Label ids are row-major over
    the grid; initial centroids sit at cell centers with zero activity.
    """
    if cell_size > min(width, height):
        raise ValueError(f"cell_size {cell_size} exceeds image side (min {min(width, height)})")
    g = _grid_arrays(height, width, cell_size)
    labels = g["base"].copy()
    k = g["rows"] * g["cols"]
    counts = np.bincount(labels.ravel(), minlength=k).astype(np.float64)
    cx = np.bincount(labels.ravel(), weights=g["xs"].ravel(), minlength=k) / counts
    cy = np.bincount(labels.ravel(), weights=g["ys"].ravel(), minlength=k) / counts
    cents = Centroids(x=cx, y=cy, activity=np.zeros(k), ux=np.zeros(k), uy=np.zeros(k))
    return labels, cents, (g["rows"], g["cols"])


def _pixel_features(bei: BEI, cfg: ClusterConfig):
    act = bei.active.astype(np.float64)
    ux = np.zeros_like(act)
    uy = np.zeros_like(act)
    if cfg.orientation_weight > 0 and bei.orientation is not None:
        m = bei.active & ~np.isnan(bei.orientation)
        ang = bei.orientation[m]
        ux[m] = np.cos(ang)
        uy[m] = np.sin(ang)
    return act, ux, uy


def _candidate_cost(feats, cents: Centroids, cand: np.ndarray, cfg: ClusterConfig, xs, ys):
    """D^2 of every pixel against one candidate label per pixel.

    Expression order is mirrored by the compiled twin; keep them in sync.
    """
    act, ux, uy = feats
    sw = (cfg.compactness / cfg.cell_size) ** 2
    d_act = act - cents.activity[cand]
    cost = d_act * d_act
    if cfg.orientation_weight > 0:
        du = ux - cents.ux[cand]
        dv = uy - cents.uy[cand]
        cost = cost + cfg.orientation_weight * (du * du + dv * dv) * act
    dx = xs - cents.x[cand]
    dy = ys - cents.y[cand]
    cost = cost + sw * (dx * dx + dy * dy)
    return cost


def assign_step(
    bei: BEI,
    labels: np.ndarray,
    cents: Centroids,
    cfg: ClusterConfig,
    grid_shape,
    use_kernel: bool | None = None,
    _feats=None,
) -> np.ndarray:
    """Reassign every pixel to the cheapest of its nine neighboring labels.

    Candidates are fixed by the pixel's own grid cell, never by its current
    label, so the one-cell constraint holds after any number of rounds.
    Ties break to the smallest label id.
    """
    h, w = labels.shape
    g = _grid_arrays(h, w, cfg.cell_size)
    feats = _pixel_features(bei, cfg) if _feats is None else _feats
    if use_kernel is None:
        use_kernel = _HAVE_NUMBA
    if use_kernel:
        if not _HAVE_NUMBA:
            raise RuntimeError("use_kernel=True but numba is not installed")
        out = np.empty((h, w), dtype=np.int32)
        _assign_kernel(
            feats[0],
            feats[1],
            feats[2],
            g["cands"],
            cents.activity,
            cents.ux,
            cents.uy,
            cents.x,
            cents.y,
            cfg.orientation_weight,
            (cfg.compactness / cfg.cell_size) ** 2,
            g["xs"],
            g["ys"],
            out,
        )
        return out
    best_cost = np.full((h, w), np.inf)
    best_label = labels.copy()
    for k in range(9):
        cand = g["cands"][k]
        valid = cand >= 0
        cost = _candidate_cost(feats, cents, np.where(valid, cand, 0), cfg, g["xs"], g["ys"])
        cost[~valid] = np.inf
        # Strict < plus candidates enumerated in increasing id order makes
        # ties resolve to the smallest label id.
        better = cost < best_cost
        best_cost[better] = cost[better]
        best_label[better] = cand[better]
    return best_label


if _HAVE_NUMBA:

    @njit(cache=True, nogil=True)
    def _assign_kernel(act, ux, uy, cands, c_act, c_ux, c_uy, c_x, c_y, w_theta, sw, xs, ys, out):
        h, w = act.shape
        for yi in range(h):
            for xi in range(w):
                best_cost = np.inf
                best = -1
                a = act[yi, xi]
                u = ux[yi, xi]
                v = uy[yi, xi]
                px = xs[yi, xi]
                py = ys[yi, xi]
                for k in range(9):
                    c = cands[k, yi, xi]
                    if c < 0:
                        continue
                    d_act = a - c_act[c]
                    cost = d_act * d_act
                    if w_theta > 0:
                        du = u - c_ux[c]
                        dv = v - c_uy[c]
                        cost = cost + w_theta * (du * du + dv * dv) * a
                    dx = px - c_x[c]
                    dy = py - c_y[c]
                    cost = cost + sw * (dx * dx + dy * dy)
                    if cost < best_cost:
                        best_cost = cost
                        best = c
                out[yi, xi] = best


def update_centroids(
    bei: BEI,
    labels: np.ndarray,
    cents: Centroids,
    cfg: ClusterConfig,
    use_kernel: bool | None = None,
    _feats=None,
) -> Centroids:
    """Mean position/appearance per label; empty labels keep previous values."""
    k = len(cents.x)
    act, ux, uy = _pixel_features(bei, cfg) if _feats is None else _feats
    h, w = labels.shape
    g = _grid_arrays(h, w, cfg.cell_size)
    if use_kernel is None:
        use_kernel = _HAVE_NUMBA
    if use_kernel:
        if not _HAVE_NUMBA:
            raise RuntimeError("use_kernel=True but numba is not installed")
        counts, sx, sy, sa, n_active, su, sv = _accumulate_kernel(
            labels, act, ux, uy, bei.active, g["xs"], g["ys"], k
        )
    else:
        flat = labels.ravel()
        counts = np.bincount(flat, minlength=k).astype(np.float64)
        sx = np.bincount(flat, weights=g["xs"].ravel(), minlength=k)
        sy = np.bincount(flat, weights=g["ys"].ravel(), minlength=k)
        sa = np.bincount(flat, weights=act.ravel(), minlength=k)
        n_active = np.bincount(flat, weights=bei.active.ravel().astype(np.float64), minlength=k)
        su = np.bincount(flat, weights=ux.ravel(), minlength=k)
        sv = np.bincount(flat, weights=uy.ravel(), minlength=k)
    nonempty = counts > 0
    out = cents.copy()
    out.x[nonempty] = sx[nonempty] / counts[nonempty]
    out.y[nonempty] = sy[nonempty] / counts[nonempty]
    out.activity[nonempty] = sa[nonempty] / counts[nonempty]
    has_active = n_active > 0
    out.ux[has_active] = su[has_active] / n_active[has_active]
    out.uy[has_active] = sv[has_active] / n_active[has_active]
    return out


if _HAVE_NUMBA:

    @njit(cache=True, nogil=True)
    def _accumulate_kernel(labels, act, ux, uy, active, xs, ys, k):
        counts = np.zeros(k, dtype=np.float64)
        sx = np.zeros(k, dtype=np.float64)
        sy = np.zeros(k, dtype=np.float64)
        sa = np.zeros(k, dtype=np.float64)
        n_active = np.zeros(k, dtype=np.float64)
        su = np.zeros(k, dtype=np.float64)
        sv = np.zeros(k, dtype=np.float64)
        h, w = labels.shape
        # Row-major accumulation matches np.bincount's summation order.
        for yi in range(h):
            for xi in range(w):
                lbl = labels[yi, xi]
                counts[lbl] += 1.0
                sx[lbl] += xs[yi, xi]
                sy[lbl] += ys[yi, xi]
                sa[lbl] += act[yi, xi]
                if active[yi, xi]:
                    n_active[lbl] += 1.0
                su[lbl] += ux[yi, xi]
                sv[lbl] += uy[yi, xi]
        return counts, sx, sy, sa, n_active, su, sv


def assignment_objective(bei: BEI, labels: np.ndarray, cents: Centroids, cfg: ClusterConfig) -> float:
    """Total D^2 of an assignment; non-increasing across assign/update rounds."""
    h, w = labels.shape
    g = _grid_arrays(h, w, cfg.cell_size)
    feats = _pixel_features(bei, cfg)
    cost = _candidate_cost(feats, cents, labels, cfg, g["xs"], g["ys"])
    return float(cost.sum())


def _connected_components(labels: np.ndarray) -> tuple[np.ndarray, int]:
    """4-connected components of equal-label regions, ids in scan order."""
    if _HAVE_NUMBA:
        comp = np.empty(labels.shape, dtype=np.int32)
        n = _ccl_kernel(np.ascontiguousarray(labels, dtype=np.int32), comp)
        return comp, int(n)
    # Per-label fallback: label each value inside its (padded) bbox.
    comp = np.full(labels.shape, -1, dtype=np.int32)
    next_comp = 0
    for lbl, sl in enumerate(ndimage.find_objects(labels + 1)):
        if sl is None:
            continue
        sub, n = ndimage.label(labels[sl] == lbl, structure=_FOUR_CONN)
        dst = comp[sl]
        m = sub > 0
        dst[m] = sub[m] + (next_comp - 1)
        next_comp += n
    # Renumber to scan order so both paths agree.
    first_seen = {}
    order = []
    for v in comp.ravel():
        if v not in first_seen:
            first_seen[v] = len(order)
            order.append(v)
    remap = np.empty(next_comp, dtype=np.int32)
    for v, i in first_seen.items():
        remap[v] = i
    return remap[comp], next_comp


if _HAVE_NUMBA:

    @njit(cache=True, nogil=True)
    def _ccl_kernel(labels, comp):
        h, w = labels.shape
        parent = np.empty(h * w, dtype=np.int32)
        n_prov = 0
        for y in range(h):
            for x in range(w):
                v = labels[y, x]
                left = x > 0 and labels[y, x - 1] == v
                up = y > 0 and labels[y - 1, x] == v
                if not left and not up:
                    parent[n_prov] = n_prov
                    comp[y, x] = n_prov
                    n_prov += 1
                elif left and not up:
                    comp[y, x] = comp[y, x - 1]
                elif up and not left:
                    comp[y, x] = comp[y - 1, x]
                else:
                    a = comp[y, x - 1]
                    b = comp[y - 1, x]
                    while parent[a] != a:
                        a = parent[a]
                    while parent[b] != b:
                        b = parent[b]
                    if a < b:
                        parent[b] = a
                        comp[y, x] = a
                    else:
                        parent[a] = b
                        comp[y, x] = b
        # Resolve to roots, then renumber roots in scan order.
        remap = np.full(n_prov, -1, dtype=np.int32)
        n = 0
        for y in range(h):
            for x in range(w):
                c = comp[y, x]
                while parent[c] != c:
                    c = parent[c]
                if remap[c] < 0:
                    remap[c] = n
                    n += 1
                comp[y, x] = remap[c]
        return n


def enforce_connectivity(labels: np.ndarray, cell_size: int) -> np.ndarray:
    """Make each label one 4-connected region.

    Per label, the largest fragment keeps the id; smaller fragments are
    absorbed by the 4-adjacent label currently holding the most pixels if
    they are under cell^2 / 4 pixels, else they get a fresh id. Labels are
    visited in increasing id order and their fragments in scan order, so
    the result is deterministic. Absorptions into a label whose own
    fragments are still pending can leave a residual split, so passes
    repeat until clean (rare; leftovers get fresh ids as a last resort).
    """
    out = labels
    for _ in range(8):
        out, clean = _connectivity_pass(out, cell_size, absorb=True)
        if clean:
            return out.copy() if out is labels else out
    out, _ = _connectivity_pass(out, cell_size, absorb=False)
    return out


def _connectivity_pass(labels: np.ndarray, cell_size: int, absorb: bool) -> tuple[np.ndarray, bool]:
    min_keep = (cell_size * cell_size) // 4
    comp, n_comp = _connected_components(labels)
    sizes = np.bincount(comp.ravel(), minlength=n_comp)
    # Component ids are scan-ordered, so first occurrences give their labels.
    uniq, first = np.unique(comp.ravel(), return_index=True)
    comp_label = np.empty(n_comp, dtype=np.int64)
    comp_label[uniq] = labels.ravel()[first]

    label_counts: dict[int, int] = {}
    comps_of: dict[int, list[int]] = {}
    for ci in range(n_comp):
        lbl = int(comp_label[ci])
        label_counts[lbl] = label_counts.get(lbl, 0) + int(sizes[ci])
        comps_of.setdefault(lbl, []).append(ci)
    split = [lbl for lbl, comps in comps_of.items() if len(comps) > 1]
    if not split:
        return labels, True

    # Component adjacency (4-connected), built once per pass.
    adj: list[set] = [set() for _ in range(n_comp)]

    def _pairs(a, b):
        diff = a != b
        for i, j in zip(a[diff].tolist(), b[diff].tolist()):
            adj[i].add(j)
            adj[j].add(i)

    _pairs(comp[:, :-1].ravel(), comp[:, 1:].ravel())
    _pairs(comp[:-1, :].ravel(), comp[1:, :].ravel())

    current = comp_label.copy()  # component -> current label id
    next_id = int(labels.max()) + 1
    for lbl in sorted(split):
        comps = comps_of[lbl]
        comp_sizes = [int(sizes[c]) for c in comps]
        keep = comps[int(np.argmax(comp_sizes))]
        for ci in comps:
            if ci == keep:
                continue
            size = int(sizes[ci])
            if size >= min_keep or not absorb:
                current[ci] = next_id
                label_counts[next_id] = size
                label_counts[lbl] -= size
                next_id += 1
                continue
            target = -1
            best = -1
            for nb in adj[ci]:
                nb_lbl = int(current[nb])
                if nb_lbl == lbl:
                    continue
                cnt = label_counts.get(nb_lbl, 0)
                if cnt > best or (cnt == best and nb_lbl < target):
                    best = cnt
                    target = nb_lbl
            if target < 0:
                continue
            current[ci] = target
            label_counts[target] += size
            label_counts[lbl] -= size
    return current[comp], False


def merge_sparse(labels: np.ndarray, bei: BEI, threshold: float) -> np.ndarray:
    """Merge labels whose active ratio is below threshold, cascading.

    The lowest sparse label id merges into the 4-adjacent label with the
    longest shared boundary (ties to the smallest id, winner keeps its id),
    until no label is below threshold or one label remains. Counts and
    boundary lengths are contracted incrementally; the result matches a
    full recount after every merge.
    """
    if not (0.0 <= threshold <= 1.0):
        raise ValueError(f"threshold must be in [0, 1], got {threshold}")
    flat = labels.ravel()
    n_ids = int(flat.max()) + 1
    pixels = np.bincount(flat, minlength=n_ids).astype(np.int64)
    active = np.bincount(flat, weights=bei.active.ravel().astype(np.float64), minlength=n_ids).astype(np.int64)

    # Pairwise 4-adjacency boundary lengths.
    lengths: dict[int, dict[int, int]] = {int(i): {} for i in np.flatnonzero(pixels > 0)}

    def _count_pairs(a: np.ndarray, b: np.ndarray):
        diff = a != b
        pa = a[diff].astype(np.int64)
        pb = b[diff].astype(np.int64)
        lo = np.minimum(pa, pb)
        hi = np.maximum(pa, pb)
        packed = lo * n_ids + hi
        vals, cnts = np.unique(packed, return_counts=True)
        for v, c in zip(vals.tolist(), cnts.tolist()):
            i, j = divmod(v, n_ids)
            lengths[i][j] = lengths[i].get(j, 0) + c
            lengths[j][i] = lengths[j].get(i, 0) + c

    _count_pairs(labels[:, :-1], labels[:, 1:])
    _count_pairs(labels[:-1, :], labels[1:, :])

    alive = set(lengths.keys())
    merged_into: dict[int, int] = {}
    while len(alive) > 1:
        victim = -1
        for lbl in sorted(alive):
            if active[lbl] < threshold * pixels[lbl]:
                victim = lbl
                break
        if victim < 0:
            break
        nbrs = lengths[victim]
        if not nbrs:
            break
        best_len = max(nbrs.values())
        target = min(l for l, ln in nbrs.items() if ln == best_len)
        pixels[target] += pixels[victim]
        active[target] += active[victim]
        for other, ln in nbrs.items():
            if other == target:
                continue
            lengths[other].pop(victim, None)
            lengths[other][target] = lengths[other].get(target, 0) + ln
            lengths[target][other] = lengths[target].get(other, 0) + ln
        lengths[target].pop(victim, None)
        del lengths[victim]
        alive.remove(victim)
        merged_into[victim] = target

    if not merged_into:
        return labels.copy()
    remap = np.arange(n_ids, dtype=labels.dtype)
    for victim in merged_into:
        root = victim
        while root in merged_into:
            root = merged_into[root]
        remap[victim] = root
    return remap[labels]


def extract_boundaries(labels: np.ndarray) -> np.ndarray:
    """Pixels whose right or bottom 4-neighbor carries a different label."""
    b = np.zeros(labels.shape, dtype=bool)
    b[:, :-1] |= labels[:, :-1] != labels[:, 1:]
    b[:-1, :] |= labels[:-1, :] != labels[1:, :]
    return b


def label_stats(labels: np.ndarray, bei: BEI, cell_size: int = 16) -> np.ndarray:
    """Per-label (label, pixels, active, ratio, cx, cy) structured array."""
    ids = np.unique(labels)
    flat = labels.ravel()
    pixels = np.bincount(flat)
    act = np.bincount(flat, weights=bei.active.ravel().astype(np.float64))
    h, w = labels.shape
    g = _grid_arrays(h, w, cell_size)
    sx = np.bincount(flat, weights=g["xs"].ravel())
    sy = np.bincount(flat, weights=g["ys"].ravel())
    out = np.zeros(
        len(ids),
        dtype=[
            ("label", np.int32),
            ("pixels", np.int64),
            ("active", np.int64),
            ("ratio", np.float64),
            ("cx", np.float64),
            ("cy", np.float64),
        ],
    )
    out["label"] = ids
    out["pixels"] = pixels[ids]
    out["active"] = act[ids].astype(np.int64)
    out["ratio"] = act[ids] / pixels[ids]
    out["cx"] = sx[ids] / pixels[ids]
    out["cy"] = sy[ids] / pixels[ids]
    return out


def warm_kernels() -> None:
    """Force compilation (or cache load) of the clustering kernels."""
    if not _HAVE_NUMBA:
        return
    active = np.zeros((8, 8), dtype=bool)
    active[2:4, 2:6] = True
    segment_bei(BEI(active=active, t=0.0), ClusterConfig(cell_size=4, iterations=1))


def segment_bei(bei: BEI, cfg: ClusterConfig | None = None, use_kernel: bool | None = None) -> SupereventLabelMap:
    """Full extraction: grid init, assignment rounds, connectivity, merging."""
    cfg = cfg or ClusterConfig()
    h, w = bei.active.shape
    labels, cents, grid_shape = init_grid(w, h, cfg.cell_size)
    feats = _pixel_features(bei, cfg)
    for _ in range(cfg.iterations):
        labels = assign_step(bei, labels, cents, cfg, grid_shape, use_kernel=use_kernel, _feats=feats)
        cents = update_centroids(bei, labels, cents, cfg, use_kernel=use_kernel, _feats=feats)
    labels = enforce_connectivity(labels, cfg.cell_size)
    labels = merge_sparse(labels, bei, cfg.merge_threshold)
    return SupereventLabelMap(
        labels=labels.astype(np.int32),
        grid_shape=grid_shape,
        cell_size=cfg.cell_size,
        stats=label_stats(labels, bei, cell_size=cfg.cell_size),
    )
