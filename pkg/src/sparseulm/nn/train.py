"""Clip samples, per-level targets, the training loop and angiogram prediction."""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from ..sparsify import threshold_sparsify
from ..tensor import CoordinateIndex, SparseTensor, pack_coords
from .functional import AdamState, adam_step, dice_loss, sigmoid
from .network import SparseNet

logger = logging.getLogger(__name__)

__all__ = [
    "ClipSample",
    "TrainResult",
    "TrainSchedule",
    "TrainingDiverged",
    "make_clips",
    "predict_movie",
    "predict_rasters",
    "slice_frames",
    "train",
]


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class ClipSample:
    """One network input with its ground-truth bubble cells.

    ``points`` holds ``(fine cell..., frame in clip)`` rows for every bubble
    sample of the clip; targets at coarser strides are derived from it.
    """

    x: SparseTensor
    points: np.ndarray
    movie: int = 0
    clip: int = 0
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def lattice(self) -> tuple[int, ...]:
        return self.x.shape

    def target_index(self, stride, radius: int = 0):
        """Hash index of target cells pooled to ``stride``, and their count."""
        key = (tuple(stride), radius)
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        d = len(self.lattice) - 1
        pts = self.points.astype(np.int64)
        if radius and len(pts):
            offs = np.indices((2 * radius + 1,) * d).reshape(d, -1).T - radius
            rep = np.repeat(pts, len(offs), axis=0)
            rep[:, :d] += np.tile(offs, (len(pts), 1))
            hi = np.asarray(self.lattice[:d])
            ok = ((rep[:, :d] >= 0) & (rep[:, :d] < hi)).all(1)
            pts = rep[ok]
        pooled = (pts // np.asarray(stride)) * np.asarray(stride)
        full = np.column_stack([np.zeros(len(pooled), dtype=np.int64), pooled])
        keys = np.unique(pack_coords(full, (1,) + self.lattice))
        hit = (CoordinateIndex(keys), len(keys))
        self._cache[key] = hit
        return hit

    def membership(self, s: SparseTensor, radius: int = 0):
        index, count = self.target_index(s.stride, radius)
        if not len(s):
            return np.zeros(0, dtype=bool), count
        return index.lookup(pack_coords(s.coords, (1,) + self.lattice)) >= 0, count


def slice_frames(x: SparseTensor, t0: int, t1: int) -> SparseTensor:
    """Sites of a whole-movie tensor with ``t0 <= t < t1``, time rebased to 0."""
    sel = (x.coords[:, -1] >= t0) & (x.coords[:, -1] < t1)
    coords = x.coords[sel].copy()
    coords[:, -1] -= t0
    return SparseTensor(coords, x.features[sel], x.shape[:-1] + (t1 - t0,), x.stride, batch_size=1, check=False)


def make_clips(movie, frames: int, tau: float, movie_id: int = 0, sparsify=None, tensor=None) -> list[ClipSample]:
    """Cut a movie into ``frames``-long clips and sparsify each one.

    ``sparsify(clip_frames, upscale)`` overrides the default magnitude
    threshold ``tau``; ``tensor`` supplies an already sparsified movie.
    """
    total = movie.frames.shape[-1]
    if total % frames:
        raise ValueError(f"movie length {total} is not a multiple of the clip length {frames}")
    d = movie.frames.ndim - 1
    r = movie.upscale
    hi = np.asarray(movie.gt_raster.shape) - 1
    rows = []
    for tr in movie.tracks:
        cells = np.clip(np.floor(tr.positions * r).astype(np.int64), 0, hi)
        rows.append(np.column_stack([cells, tr.frames]))
    allpts = np.concatenate(rows) if rows else np.zeros((0, d + 1), dtype=np.int64)
    out = []
    for c in range(total // frames):
        sl = movie.frames[..., c * frames : (c + 1) * frames]
        if tensor is not None:
            x = slice_frames(tensor, c * frames, (c + 1) * frames)
        elif sparsify is None:
            x = threshold_sparsify(sl, tau, upscale=r)
        else:
            x = sparsify(sl, r)
        sel = (allpts[:, d] >= c * frames) & (allpts[:, d] < (c + 1) * frames)
        pts = allpts[sel].copy()
        pts[:, d] -= c * frames
        out.append(ClipSample(x, np.unique(pts, axis=0), movie_id, c))
    return out


@dataclass
class TrainSchedule:
    """Two-phase schedule.

    Phase 1 (epochs ``< phase1_epochs``) trains against targets dilated by
    ``dilation[0]``; phase 2 uses ``dilation[1]`` and, when ``phase2_lr`` is
    set, restarts from that learning rate.  The learning rate is multiplied
    by ``gamma`` at every epoch listed in ``milestones``.
    """

    epochs: int = 30
    lr: float = 1e-2
    milestones: tuple = ()
    gamma: float = 0.1
    phase1_epochs: int = 0
    phase2_lr: float | None = None
    dilation: tuple = (2, 0)
    batch_size: tuple = (8, 8)
    cascaded: bool = False
    level_weights: tuple | None = None
    seed: int = 0

    def __post_init__(self):
        self.milestones = tuple(int(m) for m in self.milestones)
        self.dilation = tuple(int(v) for v in self.dilation)
        self.batch_size = tuple(int(v) for v in self.batch_size)
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ValueError("milestones must be strictly increasing")
        if any(v < 0 for v in self.dilation):
            raise ValueError("dilation radius must be >= 0")
        if any(v < 1 for v in self.batch_size):
            raise ValueError("batch size must be >= 1")
        if self.epochs < 0 or self.lr <= 0:
            raise ValueError("epochs must be >= 0 and lr > 0")

    def phase(self, epoch: int) -> int:
        return 0 if epoch < self.phase1_epochs else 1

    def lr_at(self, epoch: int) -> float:
        if self.phase(epoch) == 1 and self.phase2_lr is not None:
            lr = self.phase2_lr
            passed = [m for m in self.milestones if self.phase1_epochs < m <= epoch]
        else:
            lr = self.lr
            passed = [m for m in self.milestones if m <= epoch]
        return lr * self.gamma ** len(passed)

    def active_levels(self, epoch: int, n_heads: int) -> list[bool]:
        """Which heads carry a loss; with cascading, head ``l`` starts at epoch ``l``."""
        weights = self.weights(n_heads)
        return [w > 0 and (not self.cascaded or epoch >= i) for i, w in enumerate(weights)]

    def weights(self, n_heads: int) -> list[float]:
        if self.level_weights is None:
            return [1.0] * n_heads
        if len(self.level_weights) != n_heads:
            raise ValueError(f"{len(self.level_weights)} level weights for {n_heads} heads")
        return [float(w) for w in self.level_weights]

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TrainSchedule":
        return cls(**json.loads(text))


@dataclass
class TrainResult:
    net: SparseNet
    history: list
    seconds: float


def sample_loss(net: SparseNet, sample: ClipSample, active, weights, radius: int, strides):
    """Forward one clip; return total loss, per-head losses and logit gradients."""
    trace = net.forward(sample.x, prune_active=active[:-1])
    total, per_head, grads = 0.0, [], []
    for i, z in enumerate(trace.logits):
        if not active[i]:
            per_head.append(None)
            grads.append(None)
            continue
        t, count = sample.membership(z, radius)
        p = sigmoid(z.features[:, 0])
        loss, gp = dice_loss(p, t, target_total=count)
        total += weights[i] * loss
        per_head.append(loss)
        grads.append(weights[i] * gp * p * (1 - p))
    return total, per_head, grads, trace


def train(net: SparseNet, samples: list[ClipSample], sched: TrainSchedule, callback=None) -> TrainResult:
    """Mini-batch Adam on the summed per-head Dice losses.

    Samples are visited in a seeded order, each batch's gradient is the mean
    of its per-sample gradients and every reduction runs in a fixed order, so
    a rerun with the same inputs yields bit-identical parameters.  A
    non-finite loss raises :class:`TrainingDiverged`.
    """
    rng = np.random.default_rng(sched.seed)
    state = AdamState()
    n_heads = net.cfg.n_heads
    weights = sched.weights(n_heads)
    strides = net.level_strides()
    history = []
    t0 = time.perf_counter()
    for epoch in range(sched.epochs):
        phase = sched.phase(epoch)
        radius = sched.dilation[phase]
        bs = sched.batch_size[min(phase, len(sched.batch_size) - 1)]
        lr = sched.lr_at(epoch)
        active = sched.active_levels(epoch, n_heads)
        order = rng.permutation(len(samples))
        losses, heads = [], []
        peak = 0
        for start in range(0, len(order), bs):
            batch = order[start : start + bs]
            acc = None
            for j in batch:
                loss, per_head, glog, trace = sample_loss(net, samples[j], active, weights, radius, strides)
                if not np.isfinite(loss):
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch}, sample {j}")
                g = net.backward(trace, glog)
                acc = g if acc is None else {k: acc[k] + g[k] for k in acc}
                losses.append(loss)
                heads.append(per_head)
                peak = max(peak, trace.peak_sites)
            grads = {k: v / len(batch) for k, v in acc.items()}
            try:
                adam_step(net.params, grads, state, lr)
            except FloatingPointError as exc:
                raise TrainingDiverged(f"epoch {epoch}: {exc}") from exc
            for k, v in net.params.items():
                net.params[k] = v.astype(np.float32)
        head_means = []
        for i in range(n_heads):
            vals = [h[i] for h in heads if h[i] is not None]
            head_means.append(float(np.mean(vals)) if vals else None)
        row = {
            "epoch": epoch,
            "lr": lr,
            "phase": phase + 1,
            "loss": float(np.mean(losses)) if losses else 0.0,
            "head_losses": head_means,
            "peak_sites": peak,
            "seconds": time.perf_counter() - t0,
        }
        history.append(row)
        logger.info("epoch %d lr %.2e loss %.4f", epoch, lr, row["loss"])
        if callback is not None:
            callback(row)
    return TrainResult(net, history, time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# inference


def predict_rasters(net: SparseNet, clips: list[ClipSample], threshold: float = 0.5) -> np.ndarray:
    """Fine-grid angiogram: output sites with probability >= ``threshold``, OR over time and clips."""
    if not clips:
        raise ValueError("no clips to predict")
    d = net.cfg.dims
    shape = clips[0].lattice[:d]
    out = np.zeros(shape, dtype=bool)
    for c in clips:
        z = net.forward(c.x).output
        if not len(z):
            continue
        keep = sigmoid(z.features[:, 0]) >= threshold
        cells = z.coords[keep, 1 : d + 1]
        out[tuple(cells.T)] = True
    return out


def predict_movie(net: SparseNet, movie, tau: float, threshold: float = 0.5) -> np.ndarray:
    return predict_rasters(net, make_clips(movie, net.cfg.frames, tau), threshold)
