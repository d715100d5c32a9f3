"""Active-site measurements behind the scaling and pruning reports."""

from __future__ import annotations

import dataclasses

import numpy as np

from .metrics import MemoryModelParams, n_upper, scaling_report
from .nn.network import SparseNet
from .nn.train import make_clips
from .sim import SimConfig, simulate

__all__ = [
    "config_params",
    "measure_sites",
    "measured_scaling",
    "pruning_comparison",
    "upper_bound_movie",
]


def config_params(cfg: SimConfig) -> MemoryModelParams:
    """Memory-model symbols of a simulation config, in pixel units.

    The pixel is the length unit (rho = 1) and the PSF size is its FWHM in
    pixels, so ``alpha / rho`` keeps its meaning of PSF cells per pixel.
    """
    return MemoryModelParams(r=cfg.upscale, d=cfg.dims, D=cfg.grid, rho=1.0, alpha=cfg.psf_width)


def upper_bound_movie(cfg: SimConfig, seed: int = 0, kind: str = "random") -> tuple:
    """A movie at the separability bound ``(rho D / alpha)^d`` bubbles per frame."""
    conc = float(round(n_upper(config_params(cfg))))
    return simulate(dataclasses.replace(cfg, concentration=conc, seed=seed), kind), conc


def measure_sites(net: SparseNet, movie, tau: float) -> dict:
    """Output and peak active sites of ``net`` over every clip of ``movie``.

    ``sparse_sites`` is the storage of the output in the memory model's
    units: ``d`` coordinates per active output site.  ``dense_sites`` is the
    full super-resolved output grid.
    """
    d = net.cfg.dims
    clips = make_clips(movie, net.cfg.frames, tau)
    outs, peaks, inputs = [], [], []
    layers = None
    for c in clips:
        tr = net.forward(c.x)
        outs.append(len(tr.output))
        peaks.append(tr.peak_sites)
        inputs.append(len(c.x))
        counts = np.array([n for _, n in tr.layer_sites], dtype=np.int64)
        layers = counts if layers is None else np.maximum(layers, counts)
    mean_out = float(np.mean(outs))
    return {
        "input_sites": float(np.mean(inputs)),
        "output_sites": mean_out,
        "peak_sites": int(max(peaks)),
        "layer_sites": [int(v) for v in layers],
        "sparse_sites": d * mean_out,
        "dense_sites": int(np.prod(movie.gt_raster.shape)),
    }


def measured_scaling(
    net2d: SparseNet,
    net3d: SparseNet,
    cfg2d: SimConfig,
    cfg3d: SimConfig,
    tau: float = 0.10,
    seed: int = 0,
    factor: float = 2.0,
    reference: float | None = None,
) -> dict:
    """Closed-form and measured 3D/2D memory ratios at the upper-bound concentration.

    ``reference`` is the closed-form ``delta`` the measurement is judged
    against (see :func:`~sparseulm.metrics.scaling_report`).
    """
    m2, c2 = upper_bound_movie(cfg2d, seed)
    m3, c3 = upper_bound_movie(cfg3d, seed)
    emp2 = measure_sites(net2d, m2, tau) | {"concentration": c2}
    emp3 = measure_sites(net3d, m3, tau) | {"concentration": c3}
    return scaling_report(config_params(cfg2d), config_params(cfg3d), emp2, emp3, factor, reference)


def pruning_comparison(net: SparseNet, movies, tau: float) -> dict:
    """Peak resident sites with and without pruning, same parameters."""
    on = net.copy()
    on.cfg.prune = True
    off = net.copy()
    off.cfg.prune = False
    peak_on = max(measure_sites(on, m, tau)["peak_sites"] for m in movies)
    peak_off = max(measure_sites(off, m, tau)["peak_sites"] for m in movies)
    return {
        "peak_sites_pruned": peak_on,
        "peak_sites_unpruned": peak_off,
        "reduction": peak_off / peak_on if peak_on else float("inf"),
    }
