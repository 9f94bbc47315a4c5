"""Ground-truth edge maps and boundary-adherence metrics.

Canny edge maps of the APS intensity frames serve as ground truth; label
map boundaries are scored against them with boundary precision/recall under
a 3x3 tolerance window. Edge thickness of rendered BEIs quantifies the
lifetime extension/reset behavior.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

__all__ = [
    "PRResult",
    "canny",
    "boundary_pr",
    "edge_thickness",
    "align_frame",
]

_EIGHT_CONN = np.ones((3, 3), dtype=bool)


def canny(img: np.ndarray, low: float, high: float, sigma: float = 1.4) -> np.ndarray:
    """Edge map of a grayscale image in [0, 1].

    Gaussian smoothing, Sobel gradients, 4-direction non-maximum
    suppression, then double-threshold hysteresis. low/high are fractions
    of the maximum gradient magnitude; a pixel must exceed them strictly,
    so low == high == 1.0 yields an empty map.
    """
    if not (0.0 <= low <= high <= 1.0):
        raise ValueError(f"need 0 <= low <= high <= 1, got ({low}, {high})")
    img = np.asarray(img, dtype=np.float64)
    smoothed = ndimage.gaussian_filter(img, sigma)
    gx = ndimage.sobel(smoothed, axis=1)
    gy = ndimage.sobel(smoothed, axis=0)
    mag = np.hypot(gx, gy)
    if mag.max() == 0.0:
        return np.zeros(img.shape, dtype=bool)

    nms = _non_maximum_suppression(mag, gx, gy)
    low_t = low * mag.max()
    high_t = high * mag.max()
    strong = nms > high_t
    weak = nms > low_t
    # Weak pixels survive only when 8-connected to a strong one.
    comp, n = ndimage.label(weak, structure=_EIGHT_CONN)
    if n == 0:
        return np.zeros(img.shape, dtype=bool)
    keep = np.zeros(n + 1, dtype=bool)
    keep[np.unique(comp[strong])] = True
    keep[0] = False
    return keep[comp]


def _non_maximum_suppression(mag: np.ndarray, gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """Keep gradient-direction local maxima, one pixel per two-wide plateau.

    Each pixel compares against its two neighbors along the quantized
    gradient direction: >= toward the negative side but strictly > toward
    the positive side, so symmetric two-pixel ridges keep exactly one pixel.
    """
    h, w = mag.shape
    padded = np.pad(mag, 1)
    angle = np.mod(np.arctan2(gy, gx), np.pi)
    sector = np.floor((angle + np.pi / 8) / (np.pi / 4)).astype(np.int64) % 4
    # Neighbor offsets (dy, dx) along the positive gradient direction.
    pos_off = {0: (0, 1), 1: (1, 1), 2: (1, 0), 3: (1, -1)}
    out = np.zeros_like(mag)
    for s, (dy, dx) in pos_off.items():
        m = sector == s
        n_pos = padded[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]
        n_neg = padded[1 - dy : 1 - dy + h, 1 - dx : 1 - dx + w]
        keep = m & (mag >= n_neg) & (mag > n_pos)
        out[keep] = mag[keep]
    return out


@dataclass(frozen=True)
class PRResult:
    """Boundary precision/recall with match counts.

    tp_pred predicted-boundary pixels matched a ground-truth pixel within
    the tolerance window; tp_gt ground-truth pixels were recalled. Both
    scores are 1.0 by convention when the respective denominator is empty.
    """

    precision: float
    recall: float
    tp_pred: int
    fp: int
    tp_gt: int
    fn: int


def boundary_pr(pred: np.ndarray, gt: np.ndarray, tol: int = 1) -> PRResult:
    """Precision/recall of boundary maps under a (2*tol+1)^2 tolerance window."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    size = 2 * tol + 1
    gt_near = ndimage.maximum_filter(gt.astype(np.uint8), size=size) > 0
    pred_near = ndimage.maximum_filter(pred.astype(np.uint8), size=size) > 0
    tp_pred = int(np.count_nonzero(pred & gt_near))
    tp_gt = int(np.count_nonzero(gt & pred_near))
    n_pred = int(np.count_nonzero(pred))
    n_gt = int(np.count_nonzero(gt))
    precision = tp_pred / n_pred if n_pred else 1.0
    recall = tp_gt / n_gt if n_gt else 1.0
    return PRResult(
        precision=precision,
        recall=recall,
        tp_pred=tp_pred,
        fp=n_pred - tp_pred,
        tp_gt=tp_gt,
        fn=n_gt - tp_gt,
    )


def edge_thickness(active: np.ndarray, max_run: int | None = 15) -> float:
    """Mean length of active-pixel runs over all scan rows and columns.

    Runs longer than max_run (blobs, or the along-edge direction of a thin
    line) are excluded; pass None to keep everything. Returns 0.0 when no
    runs qualify.
    """
    active = np.asarray(active, dtype=bool)
    runs: list[int] = []
    for axis in (0, 1):
        a = active if axis == 1 else active.T
        for row in a:
            runs.extend(_run_lengths(row))
    if max_run is not None:
        runs = [r for r in runs if r <= max_run]
    if not runs:
        return 0.0
    return float(np.mean(runs))


def _run_lengths(row: np.ndarray) -> list[int]:
    padded = np.concatenate(([False], row, [False]))
    d = np.diff(padded.astype(np.int8))
    starts = np.flatnonzero(d == 1)
    ends = np.flatnonzero(d == -1)
    return (ends - starts).tolist()


def align_frame(frame_times, t_render: float) -> int:
    """Index of the frame nearest to t_render; ties go to the earlier frame."""
    ts = np.asarray(frame_times, dtype=np.float64)
    if ts.size == 0:
        raise ValueError("empty frame timestamp list")
    return int(np.argmin(np.abs(ts - t_render)))
