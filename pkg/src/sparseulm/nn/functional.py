"""Stateless sparse layer operations with hand-written backward passes.

Every op takes and returns :class:`~sparseulm.tensor.SparseTensor` objects.
Backward functions receive the forward inputs plus whatever the forward
returned, and never recompute kernel maps.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from ..tensor import KernelMap, SparseTensor, _as_tuple, build_kernel_map, pack_coords

__all__ = [
    "ConvLayerParams",
    "ConvMode",
    "adam_step",
    "AdamState",
    "conv_output_coords",
    "dice_loss",
    "dilate_targets",
    "generative_upsample",
    "generative_upsample_backward",
    "init_conv_params",
    "pointwise_classifier",
    "pointwise_classifier_backward",
    "prune",
    "relu",
    "relu_backward",
    "sigmoid",
    "sparse_conv_backward",
    "sparse_conv_forward",
    "upsample_coords",
]


class ConvMode(str, enum.Enum):
    LATTICE = "lattice-preserving"
    DOWN = "downsampling"
    UP = "generative-upsampling"


@dataclass
class ConvLayerParams:
    """Weights ``(kernel_volume, C_in, C_out)`` plus bias ``(C_out,)``.

    For ``UP`` mode ``stride`` holds the per-axis upsampling factor and the
    kernel volume is the number of children per parent site.
    """

    weights: np.ndarray
    bias: np.ndarray
    kernel_size: tuple[int, ...]
    stride: tuple[int, ...]
    dilation: tuple[int, ...] = field(default=())
    mode: ConvMode = ConvMode.LATTICE

    def __post_init__(self):
        n = len(self.kernel_size)
        self.kernel_size = tuple(int(k) for k in self.kernel_size)
        self.stride = _as_tuple(self.stride, n, "stride")
        self.dilation = _as_tuple(self.dilation or 1, n, "dilation")
        self.mode = ConvMode(self.mode)
        if self.weights.shape[0] != int(np.prod(self.kernel_size)):
            raise ValueError("weights first axis must equal kernel volume")
        if self.mode is ConvMode.LATTICE and any(k % 2 == 0 for k in self.kernel_size):
            raise ValueError("lattice-preserving kernels must be odd-sized")
        if self.mode is ConvMode.UP and self.kernel_size != self.stride:
            raise ValueError("upsampling kernel must equal the upsampling factor")

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weights.shape[2]


def init_conv_params(rng, c_in, c_out, kernel_size, stride=1, dilation=1, mode=ConvMode.LATTICE, dtype=np.float32):
    """He-uniform initialisation scaled by fan-in (kernel volume x C_in)."""
    kernel_size = tuple(int(k) for k in kernel_size)
    volume = int(np.prod(kernel_size))
    fan_in = volume * c_in if ConvMode(mode) is not ConvMode.UP else c_in
    bound = np.sqrt(6.0 / fan_in)
    weights = rng.uniform(-bound, bound, size=(volume, c_in, c_out)).astype(dtype)
    return ConvLayerParams(weights, np.zeros(c_out, dtype=dtype), kernel_size, stride, dilation, mode)


# ---------------------------------------------------------------------------
# convolution


def conv_output_coords(x: SparseTensor, stride) -> np.ndarray:
    """Distinct stride-quantised images of the input coordinates, sorted."""
    stride = _as_tuple(stride, x.n_axes, "stride")
    if all(s == 1 for s in stride):
        return x.coords
    out_stride = np.asarray(x.stride) * np.asarray(stride)
    q = x.coords.astype(np.int64)
    q[:, 1:] = (q[:, 1:] // out_stride) * out_stride
    keys = pack_coords(q, x.bounds)
    _, first = np.unique(keys, return_index=True)
    return q[first].astype(np.int32)


def _check_channels(x: SparseTensor, p: ConvLayerParams):
    if x.channels != p.in_channels:
        raise ValueError(f"channel count mismatch: tensor has {x.channels}, layer expects {p.in_channels}")


def sparse_conv_forward(
    x: SparseTensor, p: ConvLayerParams, kmap: KernelMap | None = None, out_coords: np.ndarray | None = None
) -> tuple[SparseTensor, KernelMap]:
    """Gather-multiply-scatter convolution over active sites only.

    Returns the output tensor and the kernel map used, so callers can cache
    it and hand it to :func:`sparse_conv_backward`.
    """
    _check_channels(x, p)
    if p.mode is ConvMode.UP:
        raise ValueError("use generative_upsample for upsampling layers")
    out_stride = tuple(s * t for s, t in zip(x.stride, p.stride))
    if out_coords is None:
        out_coords = conv_output_coords(x, p.stride)
    if kmap is None:
        kmap = build_kernel_map(x, out_coords, p.kernel_size, p.stride, p.dilation)
    acc = np.zeros((len(out_coords), p.out_channels), dtype=np.float64)
    feats = x.features
    weights = p.weights.astype(feats.dtype, copy=False)
    for k, (ins, outs) in enumerate(zip(kmap.in_rows, kmap.out_rows)):
        if len(ins):
            # out rows are unique within a tap, so plain fancy-add is exact
            acc[outs] += feats[ins] @ weights[k]
    acc += p.bias
    if x.coords is out_coords:
        out = x.replace_features(acc.astype(feats.dtype))
    else:
        out = SparseTensor(out_coords, acc.astype(feats.dtype), x.shape, out_stride, x.batch_size, check=False)
    return out, kmap


def sparse_conv_backward(
    x: SparseTensor, p: ConvLayerParams, grad_out: SparseTensor, kmap: KernelMap, out: SparseTensor | None = None
) -> tuple[SparseTensor, ConvLayerParams]:
    """Gradients w.r.t. input features, weights and bias.

    ``out`` (the forward result) is optional; when given its coordinates
    must match ``grad_out`` exactly.
    """
    if out is not None and not (
        grad_out.coords is out.coords or np.array_equal(grad_out.coords, out.coords)
    ):
        raise ValueError("gradient/output coordinate mismatch")
    if len(grad_out) != kmap.n_out:
        raise ValueError("gradient/output coordinate mismatch")
    g = grad_out.features
    feats = x.features
    weights = p.weights.astype(np.float64)
    grad_x = np.zeros((len(x), p.in_channels), dtype=np.float64)
    grad_w = np.zeros(p.weights.shape, dtype=np.float64)
    for k, (ins, outs) in enumerate(zip(kmap.in_rows, kmap.out_rows)):
        if not len(ins):
            continue
        gk = g[outs].astype(np.float64, copy=False)
        grad_w[k] = feats[ins].T.astype(np.float64, copy=False) @ gk
        # input rows are unique within a tap (in = out + fixed displacement)
        grad_x[ins] += gk @ weights[k].T
    grad_b = g.sum(axis=0, dtype=np.float64)
    grads = replace(p, weights=grad_w.astype(p.weights.dtype), bias=grad_b.astype(p.bias.dtype))
    return x.replace_features(grad_x.astype(feats.dtype)), grads


# ---------------------------------------------------------------------------
# generative upsampling


def upsample_coords(x: SparseTensor, factor) -> tuple[np.ndarray, tuple[int, ...]]:
    """Children of every site at the finer stride, parent-major order."""
    factor = _as_tuple(factor, x.n_axes, "factor")
    if any(f < 1 or s % f for s, f in zip(x.stride, factor)):
        raise ValueError("invalid upsample factor")
    child_stride = tuple(s // f for s, f in zip(x.stride, factor))
    steps = np.indices(factor).reshape(len(factor), -1).T * np.asarray(child_stride)
    coords = np.repeat(x.coords.astype(np.int64), len(steps), axis=0)
    coords[:, 1:] += np.tile(steps, (len(x), 1))
    return coords.astype(np.int32), child_stride


def generative_upsample(x: SparseTensor, factor, p: ConvLayerParams) -> SparseTensor:
    """Transposed convolution emitting exactly the children of active sites.

    Every parent produces ``prod(factor)`` children with features
    ``x @ W[child] + b``; no site is created outside an active parent's cell.
    """
    _check_channels(x, p)
    factor = _as_tuple(factor, x.n_axes, "factor")
    if tuple(p.stride) != factor:
        raise ValueError("invalid upsample factor")
    coords, child_stride = upsample_coords(x, factor)
    n_children = len(p.weights)
    w = p.weights.astype(x.features.dtype, copy=False)
    # (N, C_in) x (C_in, K*C_out) -> (N*K, C_out)
    flat = x.features @ np.moveaxis(w, 0, 1).reshape(p.in_channels, -1)
    feats = flat.reshape(len(x) * n_children, p.out_channels) + p.bias
    return SparseTensor(coords, feats.astype(x.features.dtype), x.shape, child_stride, x.batch_size, check=False)


def generative_upsample_backward(x: SparseTensor, p: ConvLayerParams, grad_out: SparseTensor):
    n_children = len(p.weights)
    if len(grad_out) != len(x) * n_children:
        raise ValueError("gradient/output coordinate mismatch")
    g = grad_out.features.astype(np.float64).reshape(len(x), n_children, p.out_channels)
    feats = x.features.astype(np.float64)
    grad_w = np.einsum("nc,nkd->kcd", feats, g, optimize=True)
    grad_x = np.einsum("nkd,kcd->nc", g, p.weights.astype(np.float64), optimize=True)
    grad_b = g.sum(axis=(0, 1))
    grads = replace(p, weights=grad_w.astype(p.weights.dtype), bias=grad_b.astype(p.bias.dtype))
    return x.replace_features(grad_x.astype(x.features.dtype)), grads


# ---------------------------------------------------------------------------
# heads, pruning, activations


def pointwise_classifier(x: SparseTensor, weight: np.ndarray, bias) -> SparseTensor:
    """Per-site logit ``feature . weight + bias`` on the same coordinates."""
    weight = np.asarray(weight).reshape(-1)
    if len(weight) != x.channels:
        raise ValueError(f"channel count mismatch: tensor has {x.channels}, head expects {len(weight)}")
    logits = x.features.astype(np.float64) @ weight.astype(np.float64) + float(np.asarray(bias).reshape(-1)[0])
    return x.replace_features(logits.astype(x.features.dtype)[:, None])


def pointwise_classifier_backward(x: SparseTensor, weight: np.ndarray, grad_logits: SparseTensor):
    g = grad_logits.features.astype(np.float64)[:, 0]
    w = np.asarray(weight, dtype=np.float64).reshape(-1)
    grad_w = x.features.astype(np.float64).T @ g
    grad_b = np.array([g.sum()])
    grad_x = np.outer(g, w)
    return x.replace_features(grad_x.astype(x.features.dtype)), grad_w, grad_b


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def prune(x: SparseTensor, logits: SparseTensor, keep_threshold: float = 0.5) -> tuple[SparseTensor, np.ndarray]:
    """Drop sites whose classifier probability is below ``keep_threshold``.

    Returns the pruned tensor and the kept row indices (needed to route
    gradients back through the selection).
    """
    if len(logits) != len(x) or not (logits.coords is x.coords or np.array_equal(logits.coords, x.coords)):
        raise ValueError("logit/feature coordinate mismatch")
    keep = np.flatnonzero(sigmoid(logits.features[:, 0]) >= keep_threshold)
    return x.select(keep), keep


def relu(x: SparseTensor) -> SparseTensor:
    return x.replace_features(np.maximum(x.features, 0))


def relu_backward(x: SparseTensor, grad_out: SparseTensor) -> SparseTensor:
    return x.replace_features(np.where(x.features > 0, grad_out.features, 0).astype(grad_out.features.dtype))


# ---------------------------------------------------------------------------
# loss and targets


def dice_loss(pred, target, eps: float = 1.0, target_total: float | None = None):
    """Soft Dice loss ``1 - (2 sum(p t) + eps) / (sum(p) + sum(t) + eps)``.

    Args:
        pred: probabilities in ``[0, 1]`` (any array shape).
        target: binary values aligned with ``pred``.
        target_total: ``sum(t)`` over the whole target grid when ``pred``
            only covers part of it (sparse outputs); defaults to
            ``target.sum()``.

    Returns:
        ``(loss, grad)`` with ``grad`` shaped like ``pred``.
    """
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError("prediction and target shapes differ")
    st = t.sum() if target_total is None else float(target_total)
    inter = 2.0 * (p * t).sum() + eps
    denom = p.sum() + st + eps
    loss = 1.0 - inter / denom
    grad = -(2.0 * t * denom - inter) / denom**2
    return float(loss), grad


def dilate_targets(target: np.ndarray, radius: int) -> np.ndarray:
    """Binary dilation with an L-infinity ball (a ``2r+1`` hypercube)."""
    if radius < 0:
        raise ValueError("radius must be >= 0")
    target = np.asarray(target, dtype=bool)
    if radius == 0:
        return target.copy()
    structure = np.ones((2 * radius + 1,) * target.ndim, dtype=bool)
    return ndimage.binary_dilation(target, structure=structure)


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
    """In-place Adam update with bias correction; returns ``(params, state)``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in {name!r}")
    state.step += 1
    t = state.step
    for name, g in grads.items():
        g = np.asarray(g, dtype=np.float64)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        p = params[name]
        p -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype)
    return params, state
