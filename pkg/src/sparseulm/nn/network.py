"""Data-driven sparse super-resolution network with manual backprop."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from ..tensor import SparseTensor, build_kernel_map
from .functional import (
    ConvLayerParams,
    ConvMode,
    conv_output_coords,
    generative_upsample,
    generative_upsample_backward,
    init_conv_params,
    pointwise_classifier,
    pointwise_classifier_backward,
    prune,
    relu,
    relu_backward,
    sparse_conv_backward,
    sparse_conv_forward,
)

__all__ = ["NetworkConfig", "SparseNet", "Trace", "load_checkpoint", "save_checkpoint"]

_MAGIC = b"SNN1"


def _conv(out, kernel=3, tkernel=3, stride=1, tstride=1):
    return {"type": "conv", "out": out, "kernel": kernel, "tkernel": tkernel, "stride": stride, "tstride": tstride}


def _up(out, factor=2):
    return {"type": "up", "out": out, "factor": factor}


_HEAD = {"type": "head"}


@dataclass
class NetworkConfig:
    """Layer list and geometry of a :class:`SparseNet`.

    ``layers`` is a list of dicts: ``conv`` (``out``, spatial ``kernel`` and
    ``stride``, temporal ``tkernel`` and ``tstride``), ``up`` (``out``,
    spatial ``factor``) and ``head`` (intermediate classifier followed by
    pruning).  Every conv and up layer is followed by a ReLU; a final
    pointwise classifier is always appended.

    ``time_output`` says how the time axis disappears: ``"collapse"`` means
    the temporal strides multiply to ``frames`` so the output has a single
    time slice; ``"project"`` keeps per-frame outputs and the prediction is
    max-projected over time.
    """

    dims: int = 2
    upscale: int = 8
    frames: int = 32
    in_channels: int = 2
    layers: list = field(default_factory=list)
    prune: bool = True
    keep_threshold: float = 0.5
    time_output: str = "collapse"
    seed: int = 0

    def __post_init__(self):
        if self.dims not in (2, 3):
            raise ValueError("dims must be 2 or 3")
        if self.time_output not in ("collapse", "project"):
            raise ValueError("time_output must be 'collapse' or 'project'")
        if not 0.0 <= self.keep_threshold <= 1.0:
            raise ValueError("keep_threshold must be a probability")
        down_s, down_t, up = 1, 1, 1
        for spec in self.layers:
            kind = spec.get("type")
            if kind == "conv":
                k = spec.get("kernel", 3)
                if spec.get("stride", 1) == 1 and k % 2 == 0:
                    raise ValueError("lattice-preserving convs need odd spatial kernels")
                down_s *= spec.get("stride", 1)
                down_t *= spec.get("tstride", 1)
            elif kind == "up":
                up *= spec.get("factor", 2)
            elif kind != "head":
                raise ValueError(f"unknown layer type {kind!r}")
        if up != self.upscale * down_s:
            raise ValueError(f"spatial factors give upscale {up // down_s}, config says {self.upscale}")
        if self.time_output == "collapse" and down_t != self.frames:
            raise ValueError(f"temporal strides reduce {self.frames} frames by {down_t}, not to 1")
        if self.frames % down_t:
            raise ValueError("temporal strides must divide the clip length")

    @property
    def n_heads(self) -> int:
        return sum(1 for s in self.layers if s["type"] == "head") + 1

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "NetworkConfig":
        return cls(**json.loads(text))

    # -- shipped configurations ------------------------------------------------

    @classmethod
    def reference_2d(cls, **kw) -> "NetworkConfig":
        """Encoder collapsing 32 frames at the coarse level, three x2 decoder stages."""
        layers = [_conv(16), _conv(16)]
        layers += [_conv(32, 3, 2, 1, 2)] * 2 + [_conv(32, 1, 2, 1, 2)] * 3
        layers += [_conv(32, 3, 1), _HEAD]
        layers += [_up(32), _conv(32, 3, 1), _HEAD]
        layers += [_up(16), _conv(16, 3, 1), _HEAD]
        layers += [_up(16), _conv(16, 3, 1)]
        return cls(**{"dims": 2, "upscale": 8, "frames": 32, "layers": layers, **kw})

    @classmethod
    def framewise_2d(cls, **kw) -> "NetworkConfig":
        """Per-frame decoding; time is max-projected after the last classifier."""
        layers = [_conv(16), _conv(16), _HEAD]
        layers += [_up(16), _conv(16, 3, 1), _HEAD]
        layers += [_up(16), _conv(16, 3, 1), _HEAD]
        layers += [_up(16), _conv(16, 3, 1)]
        return cls(**{"dims": 2, "upscale": 8, "frames": 32, "layers": layers, "time_output": "project", **kw})

    @classmethod
    def reference_3d(cls, **kw) -> "NetworkConfig":
        """Lean 3D variant: r = 4, 32 frames collapsed, two x2 decoder stages."""
        layers = [_conv(8, 3, 3)]
        layers += [_conv(16, 1, 2, 1, 2)] * 5
        layers += [_conv(16, 3, 1), _HEAD]
        layers += [_up(16), _conv(16, 3, 1), _HEAD]
        layers += [_up(8), _conv(8, 3, 1)]
        return cls(**{"dims": 3, "upscale": 4, "frames": 32, "layers": layers, **kw})


@dataclass
class Trace:
    """Result of one forward pass."""

    logits: list  # SparseTensor per head, coarse to fine; last is the output
    layer_sites: list  # (name, active sites after the layer)
    tape: list

    @property
    def output(self) -> SparseTensor:
        return self.logits[-1]

    @property
    def peak_sites(self) -> int:
        return max(c for _, c in self.layer_sites)


def _digest(s: SparseTensor) -> bytes:
    h = hashlib.blake2b(digest_size=16)
    h.update(np.ascontiguousarray(s.coords).tobytes())
    h.update(repr((s.shape, s.stride)).encode())
    return h.digest()


class SparseNet:
    """Sequential sparse network built from a :class:`NetworkConfig`.

    Parameters are held in ``self.params`` as a flat ``name -> float32 array``
    dict in layer order, which is also the checkpoint order.
    """

    def __init__(self, cfg: NetworkConfig, params: dict | None = None, kmap_cache_size: int = 256):
        self.cfg = cfg
        self.specs = []
        rng = np.random.default_rng(cfg.seed)
        init = OrderedDict()
        c = cfg.in_channels
        d = cfg.dims
        head = 0
        for i, spec in enumerate(cfg.layers):
            kind = spec["type"]
            if kind == "conv":
                k = (spec.get("kernel", 3),) * d + (spec.get("tkernel", 3),)
                s = (spec.get("stride", 1),) * d + (spec.get("tstride", 1),)
                mode = ConvMode.LATTICE if all(v == 1 for v in s) else ConvMode.DOWN
                p = init_conv_params(rng, c, spec["out"], k, s, 1, mode)
                name = f"conv{i}"
                self.specs.append((kind, name, k, s, mode))
                c = spec["out"]
            elif kind == "up":
                f = (spec.get("factor", 2),) * d + (1,)
                p = init_conv_params(rng, c, spec["out"], f, f, 1, ConvMode.UP)
                name = f"up{i}"
                self.specs.append((kind, name, f, f, ConvMode.UP))
                c = spec["out"]
            else:
                name = f"head{head}"
                head += 1
                p = self._init_head(rng, c)
                self.specs.append((kind, name, None, None, None))
            if kind == "head":
                init[name + ".w"], init[name + ".b"] = p
            else:
                init[name + ".w"], init[name + ".b"] = p.weights, p.bias
        name = f"head{head}"
        init[name + ".w"], init[name + ".b"] = self._init_head(rng, c)
        self.specs.append(("output", name, None, None, None))
        if params is not None:
            missing = set(init) - set(params)
            if missing:
                raise ValueError(f"missing parameters: {sorted(missing)}")
            for k in init:
                if np.shape(params[k]) != init[k].shape:
                    raise ValueError(f"parameter {k!r} has shape {np.shape(params[k])}, expected {init[k].shape}")
            init = OrderedDict((k, np.asarray(params[k], dtype=np.float32)) for k in init)
        self.params = init
        self._kmaps: OrderedDict = OrderedDict()
        self._kmap_cache_size = kmap_cache_size

    @staticmethod
    def _init_head(rng, c):
        bound = np.sqrt(3.0 / c)
        return rng.uniform(-bound, bound, c).astype(np.float32), np.zeros(1, dtype=np.float32)

    def _layer(self, spec) -> ConvLayerParams:
        kind, name, k, s, mode = spec
        return ConvLayerParams(self.params[name + ".w"], self.params[name + ".b"], k, s, 1, mode)

    def _kernel_map(self, x: SparseTensor, out_coords, k, s):
        key = (_digest(x), k, s)
        km = self._kmaps.get(key)
        if km is None:
            km = build_kernel_map(x, out_coords, k, s)
            self._kmaps[key] = km
            if len(self._kmaps) > self._kmap_cache_size:
                self._kmaps.popitem(last=False)
        else:
            self._kmaps.move_to_end(key)
        return km

    def forward(self, x: SparseTensor, prune_active=None) -> Trace:
        """Run the network on a clip tensor.

        Args:
            x: input at spatial stride ``cfg.upscale`` and time stride 1.
            prune_active: per intermediate head, whether its pruning is
                applied (defaults to ``cfg.prune`` everywhere).
        """
        cfg = self.cfg
        if x.channels != cfg.in_channels:
            raise ValueError(f"channel count mismatch: input has {x.channels}, network expects {cfg.in_channels}")
        expect = (cfg.upscale,) * cfg.dims + (1,)
        if tuple(x.stride) != expect:
            raise ValueError(f"input stride {x.stride} does not match {expect}")
        n_heads = cfg.n_heads - 1
        if prune_active is None:
            prune_active = [cfg.prune] * n_heads
        tape, logits, sites = [], [], [("input", len(x))]
        head_i = 0
        for spec in self.specs:
            kind, name = spec[0], spec[1]
            if kind == "conv":
                p = self._layer(spec)
                out_coords = conv_output_coords(x, p.stride)
                km = self._kernel_map(x, out_coords, p.kernel_size, p.stride)
                pre, _ = sparse_conv_forward(x, p, km, out_coords)
                tape.append(("conv", spec, x, pre, km))
                x = relu(pre)
            elif kind == "up":
                p = self._layer(spec)
                pre = generative_upsample(x, p.stride, p)
                tape.append(("up", spec, x, pre, None))
                x = relu(pre)
            else:
                z = pointwise_classifier(x, self.params[name + ".w"], self.params[name + ".b"])
                logits.append(z)
                kept = None
                if kind == "head" and prune_active[head_i] and len(x):
                    pruned, kept = prune(x, z, cfg.keep_threshold)
                    tape.append(("head", spec, x, z, kept))
                    x = pruned
                else:
                    tape.append((kind, spec, x, z, None))
                head_i += 1
            sites.append((name, len(x)))
        return Trace(logits, sites, tape)

    def backward(self, trace: Trace, grad_logits: list) -> dict:
        """Parameter gradients given d(loss)/d(logits) for every head.

        ``grad_logits[i]`` is an ``(n_i,)`` array aligned with
        ``trace.logits[i]`` or ``None`` when that head has no loss.
        """
        grads = {k: np.zeros(v.shape, dtype=np.float64) for k, v in self.params.items()}
        g = None
        head_i = len(trace.logits)
        for kind, spec, x, out, extra in reversed(trace.tape):
            name = spec[1]
            if kind in ("head", "output"):
                head_i -= 1
                if g is None:
                    g = np.zeros((len(x), x.channels), dtype=np.float64)
                elif extra is not None:
                    full = np.zeros((len(x), x.channels), dtype=np.float64)
                    full[extra] = g
                    g = full
                gl = grad_logits[head_i]
                if gl is not None:
                    gz = out.replace_features(np.asarray(gl, dtype=np.float64).reshape(-1, 1))
                    gx, gw, gb = pointwise_classifier_backward(x, self.params[name + ".w"], gz)
                    g = g + gx.features
                    grads[name + ".w"] += gw
                    grads[name + ".b"] += gb
            elif kind == "conv":
                p = self._layer(spec)
                gpre = relu_backward(out, out.replace_features(g))
                gx, gp = sparse_conv_backward(x, p, gpre, extra)
                grads[name + ".w"] += gp.weights
                grads[name + ".b"] += gp.bias
                g = gx.features.astype(np.float64)
            else:
                p = self._layer(spec)
                gpre = relu_backward(out, out.replace_features(g))
                gx, gp = generative_upsample_backward(x, p, gpre)
                grads[name + ".w"] += gp.weights
                grads[name + ".b"] += gp.bias
                g = gx.features.astype(np.float64)
        return grads

    def layer_sites(self, x: SparseTensor):
        """Active sites after every layer of one forward pass."""
        return self.forward(x).layer_sites

    def level_strides(self) -> list[tuple[int, ...]]:
        """Lattice stride of each head's logits (spatial axes, then time)."""
        stride = np.array((self.cfg.upscale,) * self.cfg.dims + (1,))
        out = []
        for kind, name, k, s, mode in self.specs:
            if kind == "conv":
                stride = stride * np.asarray(s)
            elif kind == "up":
                stride = stride // np.asarray(s)
            else:
                out.append(tuple(int(v) for v in stride))
        return out

    def copy(self) -> "SparseNet":
        return SparseNet(copy.deepcopy(self.cfg), {k: v.copy() for k, v in self.params.items()})


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, net: SparseNet) -> None:
    """``SNN1`` + u32 config length + config JSON + f32 parameters in layer order."""
    blob = net.cfg.to_json().encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for v in net.params.values():
            fh.write(np.ascontiguousarray(v, dtype="<f4").tobytes())


def load_checkpoint(path) -> SparseNet:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != _MAGIC or len(data) < 8:
        raise ValueError(f"{path}: not a network checkpoint")
    (n,) = struct.unpack_from("<I", data, 4)
    cfg = NetworkConfig.from_json(data[8 : 8 + n].decode())
    net = SparseNet(cfg)
    pos = 8 + n
    params = {}
    for k, v in net.params.items():
        size = v.size * 4
        if pos + size > len(data):
            raise ValueError(f"{path}: truncated checkpoint")
        params[k] = np.frombuffer(data, dtype="<f4", count=v.size, offset=pos).reshape(v.shape).copy()
        pos += size
    if pos != len(data):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return SparseNet(cfg, params)

