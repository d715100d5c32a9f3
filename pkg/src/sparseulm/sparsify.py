"""Dense correlation movies to sparse tensors: threshold, top-k and learned mask."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np

from .nn.functional import (
    AdamState,
    ConvMode,
    adam_step,
    dice_loss,
    init_conv_params,
    relu,
    relu_backward,
    sigmoid,
    sparse_conv_backward,
    sparse_conv_forward,
)
from .tensor import SparseTensor

logger = logging.getLogger(__name__)

__all__ = [
    "CnnMask",
    "SparsityReport",
    "bubble_pixels",
    "cnn_mask_sparsify",
    "movie_to_sparse",
    "sparsity_report",
    "threshold_sparsify",
    "topk_sparsify",
    "write_report_csv",
]

REPORT_COLUMNS = ["strategy", "parameter", "mean_sites", "retention", "dice_after_training"]


def _frames_and_upscale(movie, upscale):
    frames = getattr(movie, "frames", movie)
    if upscale is None:
        upscale = getattr(movie, "upscale", 1)
    frames = np.asarray(frames)
    if not np.iscomplexobj(frames):
        raise ValueError("movie frames must be complex")
    return frames, int(upscale)


def movie_to_sparse(frames: np.ndarray, keep: np.ndarray, upscale: int = 1) -> SparseTensor:
    """Selected pixels of a complex ``(*grid, T)`` movie as a 2-channel tensor.

    Spatial coordinates are expressed on the ``upscale``-times finer output
    lattice (spatial stride ``upscale``, time stride 1), so the tensor can be
    fed straight into a super-resolving network.
    """
    keep = np.asarray(keep, dtype=bool)
    if keep.shape != frames.shape:
        raise ValueError(f"mask shape {keep.shape} does not match movie shape {frames.shape}")
    d = frames.ndim - 1
    idx = np.argwhere(keep)  # row-major, i.e. lexicographic
    coords = np.zeros((len(idx), d + 2), dtype=np.int32)
    coords[:, 1 : d + 1] = idx[:, :d] * upscale
    coords[:, d + 1] = idx[:, d]
    vals = frames[keep]
    feats = np.column_stack([vals.real, vals.imag]).astype(np.float32)
    shape = tuple(s * upscale for s in frames.shape[:d]) + (frames.shape[d],)
    stride = (upscale,) * d + (1,)
    return SparseTensor(coords, feats, shape, stride, batch_size=1, check=False)


def threshold_sparsify(movie, tau: float, upscale: int | None = None) -> SparseTensor:
    """Keep pixels whose complex magnitude is at least ``tau``."""
    if tau < 0:
        raise ValueError("tau must be >= 0")
    frames, upscale = _frames_and_upscale(movie, upscale)
    return movie_to_sparse(frames, np.abs(frames) >= tau, upscale)


def topk_sparsify(movie, k: int, per_frame: bool = False, upscale: int | None = None) -> SparseTensor:
    """Keep the ``k`` largest-magnitude pixels.

    The scope is the whole spatio-temporal movie, or each frame separately
    when ``per_frame`` is set.  Equal magnitudes are ordered by coordinate.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    frames, upscale = _frames_and_upscale(movie, upscale)
    mag = np.abs(frames)
    keep = np.zeros(mag.shape, dtype=bool)
    if per_frame:
        for t in range(mag.shape[-1]):
            flat = mag[..., t].ravel()
            order = np.lexsort((np.arange(flat.size), -flat))[:k]
            sub = keep[..., t].reshape(-1)
            sub[order] = True
            keep[..., t] = sub.reshape(mag.shape[:-1])
    else:
        flat = mag.ravel()
        order = np.lexsort((np.arange(flat.size), -flat))[:k]
        keep.reshape(-1)[order] = True
    return movie_to_sparse(frames, keep, upscale)


def bubble_pixels(movie) -> np.ndarray:
    """Low-resolution ``(pixel..., frame)`` cells occupied by a bubble, unique rows."""
    rows = []
    hi = np.asarray(movie.frames.shape[:-1]) - 1
    for tr in movie.tracks:
        px = np.clip(np.floor(tr.positions).astype(np.int64), 0, hi)
        rows.append(np.column_stack([px, tr.frames]))
    if not rows:
        return np.zeros((0, movie.frames.ndim), dtype=np.int64)
    return np.unique(np.concatenate(rows), axis=0)


def _retention(movie, s: SparseTensor) -> float:
    cells = bubble_pixels(movie)
    if not len(cells):
        return 1.0
    d = movie.frames.ndim - 1
    up = s.stride[0]
    query = np.zeros((len(cells), d + 2), dtype=np.int64)
    query[:, 1 : d + 1] = cells[:, :d] * up
    query[:, d + 1] = cells[:, d]
    return float((s.find(query) >= 0).mean())


# ---------------------------------------------------------------------------
# learned mask


def _dense_sites(frames: np.ndarray) -> SparseTensor:
    return movie_to_sparse(frames, np.ones(frames.shape, dtype=bool), 1)


@dataclass
class CnnMask:
    """Small dense (all-sites) CNN predicting bubble presence per low-res pixel.

    Layout: a 3x..x3 conv, a time-halving conv, then a pointwise-in-time
    conv to one logit channel.  The prediction lives on every other frame and
    is copied to both frames of each pair (nearest neighbour in time).
    """

    dims: int = 2
    width: int = 8
    decision_threshold: float = 0.5
    seed: int = 0
    params: dict | None = None

    def __post_init__(self):
        if self.params is None:
            rng = np.random.default_rng(self.seed)
            k = (3,) * self.dims
            self.params = {
                "c1": init_conv_params(rng, 2, self.width, k + (3,)),
                "c2": init_conv_params(rng, self.width, self.width, (1,) * self.dims + (2,), (1,) * self.dims + (2,), mode=ConvMode.DOWN),
                "c3": init_conv_params(rng, self.width, 1, k + (1,)),
            }

    def _forward(self, frames):
        x = _dense_sites(frames)
        h1, k1 = sparse_conv_forward(x, self.params["c1"])
        a1 = relu(h1)
        h2, k2 = sparse_conv_forward(a1, self.params["c2"])
        a2 = relu(h2)
        z, k3 = sparse_conv_forward(a2, self.params["c3"])
        return (x, h1, a1, k1, h2, a2, k2, k3), z

    def probabilities(self, frames) -> np.ndarray:
        """Per-pixel probability on the full-rate ``(*grid, T)`` grid."""
        frames = np.asarray(getattr(frames, "frames", frames))
        if frames.ndim != self.dims + 1:
            raise ValueError(f"mask model expects a {self.dims}D movie, got shape {frames.shape}")
        if frames.shape[-1] % 2:
            raise ValueError("mask model needs an even number of frames")
        _, z = self._forward(frames)
        probs = np.zeros(frames.shape[:-1] + (frames.shape[-1] // 2,))
        c = z.coords[:, 1:]
        probs[tuple(c[:, :-1].T) + (c[:, -1] // 2,)] = sigmoid(z.features[:, 0])
        return np.repeat(probs, 2, axis=-1)

    @staticmethod
    def ideal_mask(movie) -> np.ndarray:
        """Pixels within one pixel (L-inf) of a bubble cell, OR-ed over frame pairs."""
        mask = np.zeros(movie.frames.shape, dtype=bool)
        cells = bubble_pixels(movie)
        d = movie.frames.ndim - 1
        for off in np.ndindex(*(3,) * d):
            p = cells[:, :d] + np.asarray(off) - 1
            ok = ((p >= 0) & (p < np.asarray(mask.shape[:d]))).all(1)
            mask[tuple(p[ok].T) + (cells[ok, d],)] = True
        pair = mask.reshape(mask.shape[:-1] + (-1, 2)).any(-1)
        return np.repeat(pair, 2, axis=-1)

    def fit(self, movies, epochs: int = 30, lr: float = 1e-2):
        """Dice-loss training against :meth:`ideal_mask` at half time rate."""
        state = AdamState()
        for epoch in range(epochs):
            losses = []
            for movie in movies:
                target = self.ideal_mask(movie)[..., ::2]
                tape, z = self._forward(movie.frames)
                x, h1, a1, k1, h2, a2, k2, k3 = tape
                c = z.coords[:, 1:]
                t = target[tuple(c[:, :-1].T) + (c[:, -1] // 2,)]
                p = sigmoid(z.features[:, 0])
                loss, gp = dice_loss(p, t)
                gz = z.replace_features((gp * p * (1 - p))[:, None].astype(np.float32))
                g2, grad3 = sparse_conv_backward(a2, self.params["c3"], gz, k3)
                g2, grad2 = sparse_conv_backward(a1, self.params["c2"], relu_backward(h2, g2), k2)
                _, grad1 = sparse_conv_backward(x, self.params["c1"], relu_backward(h1, g2), k1)
                flat = self._flat()
                grads = {}
                for name, g in (("c1", grad1), ("c2", grad2), ("c3", grad3)):
                    grads[name + ".w"], grads[name + ".b"] = g.weights, g.bias
                adam_step(flat, grads, state, lr)
                self._unflat(flat)
                losses.append(loss)
            logger.debug("mask epoch %d loss %.4f", epoch, float(np.mean(losses)))
        return self

    def _flat(self):
        out = {}
        for name, p in self.params.items():
            out[name + ".w"], out[name + ".b"] = p.weights, p.bias
        return out

    def _unflat(self, flat):
        for name, p in self.params.items():
            p.weights, p.bias = flat[name + ".w"], flat[name + ".b"]


def cnn_mask_sparsify(movie, mask: CnnMask, upscale: int | None = None) -> SparseTensor:
    """Keep pixels whose mask probability reaches ``mask.decision_threshold``."""
    frames, upscale = _frames_and_upscale(movie, upscale)
    keep = mask.probabilities(frames) >= mask.decision_threshold
    return movie_to_sparse(frames, keep, upscale)


# ---------------------------------------------------------------------------
# accounting


@dataclass
class SparsityReport:
    strategy: str
    parameter: float
    mean_sites: float
    retention: float
    site_histogram: np.ndarray  # active sites per frame, summed over movies
    dice_after_training: float | None = None

    def row(self) -> dict:
        return {
            "strategy": self.strategy,
            "parameter": self.parameter,
            "mean_sites": self.mean_sites,
            "retention": self.retention,
            "dice_after_training": "" if self.dice_after_training is None else self.dice_after_training,
        }


def sparsity_report(movies, strategy: str, parameter, sparsify) -> SparsityReport:
    """Mean active sites and bubble-pixel retention of ``sparsify`` over movies.

    Args:
        movies: iterable of simulated movies (ground truth needed).
        strategy: label written to the report.
        parameter: the strategy's parameter, for the report.
        sparsify: callable ``movie -> SparseTensor``.
    """
    sites, kept, total = [], 0, 0
    hist = None
    for movie in movies:
        s = sparsify(movie)
        sites.append(len(s))
        n_cells = len(bubble_pixels(movie))
        kept += _retention(movie, s) * n_cells
        total += n_cells
        per_frame = np.bincount(s.coords[:, -1], minlength=movie.frames.shape[-1])
        hist = per_frame if hist is None else hist + per_frame
    retention = 1.0 if total == 0 else float(kept / total)
    return SparsityReport(strategy, parameter, float(np.mean(sites)) if sites else 0.0, retention, hist)


def write_report_csv(path, reports) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
        w.writeheader()
        for r in reports:
            w.writerow(r.row())
