"""Conventional (non-learning) ULM: detect, localize, track, accumulate."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.optimize import linear_sum_assignment

from .sim import Track

logger = logging.getLogger(__name__)

__all__ = [
    "BaselineConfig",
    "Detection",
    "accumulate_angiogram",
    "detect_peaks",
    "gaussian_fit",
    "hungarian_assign",
    "localize_movie",
    "rasterize_segment",
    "track",
]


@dataclass(frozen=True)
class Detection:
    frame: int
    pixel: tuple
    position: np.ndarray
    magnitude: float
    degenerate: bool = False


@dataclass
class BaselineConfig:
    """Conventional ULM settings.

    ``n_det`` is the number of detections kept per frame; ``None`` means
    "use the true concentration" when the caller knows it.
    """

    n_det: int | None = None
    max_link: float = 2.0
    min_track_len: int = 4
    window: int = 2

    def __post_init__(self):
        if self.max_link <= 0:
            raise ValueError("max_link must be > 0")
        if self.min_track_len < 1 or self.window < 1:
            raise ValueError("min_track_len and window must be >= 1")
        if self.n_det is not None and self.n_det < 1:
            raise ValueError("n_det must be >= 1")


def detect_peaks(magnitude: np.ndarray, n_det: int, frame: int = 0) -> list[Detection]:
    """The ``n_det`` largest strict regional maxima of a frame.

    A pixel is a regional maximum when it is strictly larger than every
    neighbour in its full ``3**d - 1`` neighbourhood (8 in 2D, 26 in 3D).
    Ties in magnitude are broken by row-major coordinate order.
    """
    if n_det < 1:
        raise ValueError("n_det must be >= 1")
    mag = np.asarray(magnitude, dtype=np.float64)
    footprint = np.ones((3,) * mag.ndim, dtype=bool)
    footprint[(1,) * mag.ndim] = False
    neigh = ndimage.maximum_filter(mag, footprint=footprint, mode="constant", cval=-np.inf)
    flat = np.flatnonzero((mag > neigh).ravel())
    values = mag.ravel()[flat]
    order = np.lexsort((flat, -values))[:n_det]
    out = []
    for k in order:
        pix = np.unravel_index(flat[k], mag.shape)
        out.append(Detection(frame, tuple(int(v) for v in pix), np.asarray(pix, dtype=float) + 0.5, float(values[k])))
    return out


def gaussian_fit(frame: np.ndarray, peak, window: int = 2) -> tuple[np.ndarray, bool]:
    """Sub-pixel position around an integer peak.

    Along each axis a parabola is fitted to the log of the ``2 window + 1``
    samples through the peak, by least squares weighted with the squared
    sample values.  This is exact for a sampled Gaussian and noticeably less
    noise-sensitive than the bare three-point formula.  Falls back to the
    center of mass of the ``(2 window + 1)**d`` neighbourhood when a log is
    undefined, the profile is not concave, or the window leaves the frame.

    Returns ``(position, degenerate)``; ``degenerate`` is set when the window
    is flat and the pixel center is returned unchanged.
    """
    a = np.asarray(frame, dtype=np.float64)
    peak = tuple(int(v) for v in peak)
    center = np.asarray(peak, dtype=float) + 0.5
    offsets = np.zeros(a.ndim)
    xs = np.arange(-window, window + 1)
    need_com = any(p - window < 0 or p + window >= n for p, n in zip(peak, a.shape))
    for ax in range(a.ndim):
        if need_com:
            break
        idx = list(peak)
        idx[ax] = slice(peak[ax] - window, peak[ax] + window + 1)
        prof = a[tuple(idx)]
        if prof.min() <= 0:
            need_com = True
            break
        c2, c1, _ = np.polyfit(xs, np.log(prof), 2, w=prof)
        if c2 >= 0:
            # flat or convex along this axis
            need_com = True
            break
        offsets[ax] = -c1 / (2 * c2)
    if not need_com:
        return center + offsets, False

    sl = tuple(slice(max(p - window, 0), min(p + window + 1, n)) for p, n in zip(peak, a.shape))
    w = np.clip(a[sl], 0, None)
    total = w.sum()
    if total <= 0 or np.ptp(a[sl]) == 0:
        logger.debug("flat fit window at %s", peak)
        return center, True
    grids = np.indices(w.shape).reshape(a.ndim, -1)
    starts = np.array([s.start for s in sl])
    com = (grids * w.ravel()).sum(axis=1) / total + starts + 0.5
    return com, False


def hungarian_assign(cost: np.ndarray, max_cost: float | None = None):
    """Minimum-cost assignment on a (possibly rectangular) cost matrix.

    Pairs whose cost exceeds ``max_cost`` are cut after the optimal
    assignment is found.

    Returns:
        ``(pairs, unassigned_rows, unassigned_cols)`` where ``pairs`` is an
        ``(k, 2)`` int array sorted by row.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    if n == 0 or m == 0:
        return np.zeros((0, 2), dtype=int), np.arange(n), np.arange(m)
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix must be finite")
    rows, cols = linear_sum_assignment(cost)
    if max_cost is not None:
        keep = cost[rows, cols] <= max_cost
        rows, cols = rows[keep], cols[keep]
    pairs = np.column_stack([rows, cols]).astype(int)
    return pairs, np.setdiff1d(np.arange(n), rows), np.setdiff1d(np.arange(m), cols)


def track(detections: list[np.ndarray], cfg: BaselineConfig) -> list[Track]:
    """Frame-to-frame Hungarian linking on Euclidean distance.

    Args:
        detections: per-frame ``(n_t, d)`` arrays of positions, frame order.

    Links longer than ``cfg.max_link`` are cut; unlinked detections start new
    tracks and tracks shorter than ``cfg.min_track_len`` are discarded.
    """
    finished: list[tuple[int, list]] = []
    open_tracks: list[tuple[int, list]] = []  # (start frame, positions)
    for t, det in enumerate(detections):
        det = np.asarray(det, dtype=float).reshape(len(det), -1) if len(det) else np.zeros((0, 1))
        if open_tracks and len(det):
            last = np.array([p[-1] for _, p in open_tracks])
            cost = np.linalg.norm(last[:, None, :] - det[None, :, :], axis=-1)
            pairs, lost, fresh = hungarian_assign(cost, cfg.max_link)
        else:
            pairs = np.zeros((0, 2), dtype=int)
            lost, fresh = np.arange(len(open_tracks)), np.arange(len(det))
        next_open = []
        for i, j in pairs:
            start, pos = open_tracks[i]
            pos.append(det[j])
            next_open.append((start, pos))
        finished.extend(open_tracks[i] for i in lost)
        next_open.extend((t, [det[j]]) for j in fresh)
        open_tracks = next_open
    finished.extend(open_tracks)
    finished.sort(key=lambda sp: (sp[0], tuple(sp[1][0])))
    kept = [(s, p) for s, p in finished if len(p) >= cfg.min_track_len]
    return [Track(k, s, np.array(p)) for k, (s, p) in enumerate(kept)]


def localize_movie(frames: np.ndarray, n_det: int, window: int = 2) -> list[np.ndarray]:
    """Per-frame sub-pixel detections for a complex ``(*grid, T)`` movie."""
    mag = np.abs(frames)
    out = []
    for t in range(mag.shape[-1]):
        frame = mag[..., t]
        dets = detect_peaks(frame, n_det, t)
        pos = [gaussian_fit(frame, d.pixel, window)[0] for d in dets]
        out.append(np.array(pos).reshape(len(pos), frame.ndim))
    return out


def rasterize_segment(a, b) -> np.ndarray:
    """Integer cells on the line from cell ``a`` to cell ``b`` (N-d Bresenham)."""
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    delta = b - a
    n = int(np.abs(delta).max()) if len(delta) else 0
    if n == 0:
        return a[None]
    drive = int(np.argmax(np.abs(delta)))
    step = np.sign(delta)
    absd = np.abs(delta)
    err = 2 * absd - n
    p = a.copy()
    out = [p.copy()]
    for _ in range(n):
        for ax in range(len(a)):
            if ax == drive:
                continue
            if err[ax] >= 0:
                p[ax] += step[ax]
                err[ax] -= 2 * n
            err[ax] += 2 * absd[ax]
        p[drive] += step[drive]
        out.append(p.copy())
    return np.array(out)


def accumulate_angiogram(tracks, upscale: int, fine_shape) -> np.ndarray:
    """Logical OR of all tracks on the fine grid, consecutive samples joined."""
    out = np.zeros(tuple(fine_shape), dtype=bool)
    hi = np.asarray(fine_shape) - 1
    for tr in tracks:
        cells = np.clip(np.floor(np.asarray(tr.positions) * upscale).astype(np.int64), 0, hi)
        if len(cells) == 1:
            out[tuple(cells[0])] = True
            continue
        for c0, c1 in zip(cells[:-1], cells[1:]):
            seg = rasterize_segment(c0, c1)
            out[tuple(seg.T)] = True
    return out
