"""Overlap metrics, the closed-form memory model and a run-statistics harness."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

__all__ = [
    "MemoryModelParams",
    "RunStats",
    "c_dense",
    "c_sparse",
    "delta",
    "delta_bound",
    "dice",
    "gamma",
    "measure_run",
    "n_upper",
    "project_and_dice",
    "scaling_report",
    "site_bytes",
    "trajectory_dice",
]


def _pair(a, b):
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def dice(a, b) -> float:
    """Dice overlap ``2|a & b| / (|a| + |b|)`` of two binary grids (1.0 if both empty)."""
    a, b = _pair(a, b)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def trajectory_dice(pred_frames, gt_frames) -> float:
    """Mean per-frame Dice of two aligned frame stacks (frame axis first)."""
    pred_frames = list(pred_frames)
    gt_frames = list(gt_frames)
    if len(pred_frames) != len(gt_frames):
        raise ValueError("frame count mismatch")
    if not pred_frames:
        return 1.0
    return float(np.mean([dice(p, g) for p, g in zip(pred_frames, gt_frames)]))


def project_and_dice(vol_a, vol_b, axis: int = -1) -> float:
    """Dice after a maximum projection along ``axis``."""
    a, b = _pair(vol_a, vol_b)
    return dice(a.any(axis=axis), b.any(axis=axis))


# ---------------------------------------------------------------------------
# closed-form memory model


@dataclass(frozen=True)
class MemoryModelParams:
    """Symbols of the dense/sparse output-memory model.

    Args:
        r: upscale factor.
        d: spatial dimensionality (2 or 3).
        D: low-resolution pixels per axis.
        N: number of stored points (microbubbles or active sites).
        rho: pixel size in wavelengths.
        alpha: PSF size in wavelengths.
        eta: storage overhead constant of the sparse format.
    """

    r: float
    d: int
    D: float
    N: float | None = None
    rho: float = 0.5
    alpha: float = 3.0
    eta: float = 1.0

    def __post_init__(self):
        if self.d not in (2, 3):
            raise ValueError("d must be 2 or 3")
        for name in ("r", "D", "rho", "alpha", "eta"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.N is not None and self.N < 0:
            raise ValueError("N must be >= 0")

    def count(self) -> float:
        """``N``, or the upper bound when unset."""
        return n_upper(self) if self.N is None else self.N


def c_dense(p: MemoryModelParams) -> float:
    return (p.r * p.D) ** p.d


def n_upper(p: MemoryModelParams) -> float:
    """Largest number of separable bubbles: one per PSF-sized cell of the FOV."""
    return (p.rho * p.D / p.alpha) ** p.d


def c_sparse(p: MemoryModelParams) -> float:
    return p.eta * p.d * p.count()


def gamma(p: MemoryModelParams) -> float:
    return c_sparse(p) / c_dense(p)


def delta(p2d: MemoryModelParams, p3d: MemoryModelParams) -> float:
    """Ratio of the 3D to the 2D sparse/dense memory ratio."""
    if p2d.d != 2 or p3d.d != 3:
        raise ValueError("delta expects a 2D and a 3D parameter set")
    return gamma(p3d) / gamma(p2d)


def delta_bound(rho: float, alpha: float, r: float) -> float:
    """``delta`` with both counts at their upper bound and shared rho, alpha, r."""
    return 1.5 * rho / (alpha * r)


def site_bytes(n_sites: int, d: int, channels: int) -> int:
    """Concrete bytes of a COO tensor: int32 batch + coordinates, float32 features."""
    return int(n_sites) * ((d + 1) * 4 + channels * 4)


# ---------------------------------------------------------------------------
# empirical accounting


@dataclass
class RunStats:
    layer_names: list
    layer_sites: list
    time_ms: float
    time_ms_sd: float
    reps: int
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.layer_names) != len(self.layer_sites):
            raise ValueError("layer name/count length mismatch")

    @property
    def peak_sites(self) -> int:
        return int(max(self.layer_sites, default=0))

    def to_dict(self) -> dict:
        out = asdict(self)
        out["peak_sites"] = self.peak_sites
        return out


def measure_run(net, sample, reps: int = 5) -> RunStats:
    """Per-layer active-site counts and mean forward time.

    ``net`` must provide ``layer_sites(sample) -> list[(name, count)]`` that
    runs one full forward pass.  One warm-up pass precedes ``reps`` timed
    passes; the counts of the warm-up pass are reported (they are
    deterministic for a fixed input).
    """
    if reps < 1:
        raise ValueError("reps must be >= 1")
    trace = net.layer_sites(sample)
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        again = net.layer_sites(sample)
        times.append((time.perf_counter() - t0) * 1e3)
        if [c for _, c in again] != [c for _, c in trace]:
            raise RuntimeError("non-deterministic layer site counts")
    sd = float(np.std(times, ddof=1)) if reps > 1 else 0.0
    return RunStats([n for n, _ in trace], [int(c) for _, c in trace], float(np.mean(times)), sd, reps)


def scaling_report(
    p2d: MemoryModelParams, p3d: MemoryModelParams, emp2d: dict, emp3d: dict, factor: float = 2.0, reference: float | None = None
) -> dict:
    """Closed-form vs measured sparse/dense ratios.

    Args:
        p2d, p3d: model parameters of the two configurations.
        emp2d, emp3d: measured ``{"sparse_sites": int, "dense_sites": int,
            "layer_sites": [...]}`` dicts.
        factor: agreement tolerance on ``delta``.
        reference: closed-form ``delta`` to compare against, e.g.
            :func:`delta_bound` at shared typical values; defaults to
            ``delta(p2d, p3d)``.
    """
    closed = {
        "c_dense_2d": c_dense(p2d),
        "c_dense_3d": c_dense(p3d),
        "c_sparse_2d": c_sparse(p2d),
        "c_sparse_3d": c_sparse(p3d),
        "gamma_2d": gamma(p2d),
        "gamma_3d": gamma(p3d),
        "delta": delta(p2d, p3d),
    }
    g2 = emp2d["sparse_sites"] / emp2d["dense_sites"]
    g3 = emp3d["sparse_sites"] / emp3d["dense_sites"]
    delta_exp = g3 / g2 if g2 > 0 else math.inf
    target = closed["delta"] if reference is None else float(reference)
    closed["delta_reference"] = target
    ratio = delta_exp / target
    return {
        "inputs": {"2d": asdict(p2d), "3d": asdict(p3d)},
        "closed_form": closed,
        "empirical": {"2d": emp2d, "3d": emp3d, "gamma_2d": g2, "gamma_3d": g3, "delta_exp": delta_exp},
        "agreement": {"factor": factor, "ratio": ratio, "pass": bool(1 / factor <= ratio <= factor)},
    }
