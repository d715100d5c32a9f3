"""COO sparse tensors on an integer lattice.

Coordinates are stored as an ``(N, 1 + A)`` int32 array whose first column
is the batch index, followed by the ``A`` lattice axes in the order
``(x, y[, z], t)``.  Coordinates are expressed in unit cells of the finest
lattice; a tensor of stride ``s`` only populates multiples of ``s``.
"""

from __future__ import annotations

import io
import itertools
import struct
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "CoordinateIndex",
    "CorruptFileError",
    "KernelMap",
    "SparseTensor",
    "active_site_count",
    "build_kernel_map",
    "deserialize",
    "from_dense",
    "kernel_offsets",
    "load",
    "pack_coords",
    "save",
    "serialize",
    "to_dense",
]

_EMPTY = np.int64(-1)
_MAGIC = b"SPT1"


class CorruptFileError(ValueError):
    """Raised when a serialized sparse tensor cannot be decoded."""

    def __init__(self, detail: str = ""):
        msg = "corrupt sparse tensor file"
        super().__init__(f"{msg}: {detail}" if detail else msg)


def _as_tuple(value, n: int, name: str) -> tuple[int, ...]:
    if np.isscalar(value):
        return (int(value),) * n
    out = tuple(int(v) for v in value)
    if len(out) != n:
        raise ValueError(f"{name} needs {n} entries, got {len(out)}")
    return out


def _mix(keys: np.ndarray) -> np.ndarray:
    # splitmix64 finalizer; wraps modulo 2**64 by design
    z = keys.astype(np.uint64, copy=True)
    with np.errstate(over="ignore"):
        z ^= z >> np.uint64(30)
        z *= np.uint64(0xBF58476D1CE4E5B9)
        z ^= z >> np.uint64(27)
        z *= np.uint64(0x94D049BB133111EB)
        z ^= z >> np.uint64(31)
    return z


def pack_coords(coords: np.ndarray, bounds: Sequence[int]) -> np.ndarray:
    """Pack ``(N, K)`` coordinates into int64 keys using mixed-radix ``bounds``.

    Rows with any entry outside ``[0, bound)`` are packed to ``-1``.
    """
    coords = np.asarray(coords, dtype=np.int64)
    if coords.ndim != 2 or coords.shape[1] != len(bounds):
        raise ValueError("coordinate width does not match bounds")
    keys = np.zeros(len(coords), dtype=np.int64)
    valid = np.ones(len(coords), dtype=bool)
    for axis, bound in enumerate(bounds):
        col = coords[:, axis]
        valid &= (col >= 0) & (col < bound)
        keys = keys * np.int64(bound) + col
    keys[~valid] = _EMPTY
    return keys


class CoordinateIndex:
    """Open-addressing (linear probing) hash table from packed keys to rows.

    Insertion and lookup are vectorized: every probe round handles all
    pending keys at once, so the cost is O(n * mean probe length).
    """

    def __init__(self, keys: np.ndarray):
        keys = np.asarray(keys, dtype=np.int64)
        n = len(keys)
        capacity = 8
        while capacity < 2 * n:
            capacity *= 2
        self._mask = np.uint64(capacity - 1)
        self._keys = np.full(capacity, _EMPTY, dtype=np.int64)
        self._rows = np.full(capacity, -1, dtype=np.int64)
        self.size = n

        slot = (_mix(keys) & self._mask).astype(np.int64)
        pending = np.arange(n)
        claimed = np.zeros(n, dtype=bool)
        while pending.size:
            s = slot[pending]
            free = self._keys[s] == _EMPTY
            cand, cand_slots = pending[free], s[free]
            if cand.size:
                taken, first = np.unique(cand_slots, return_index=True)
                winners = cand[first]
                self._keys[taken] = keys[winners]
                self._rows[taken] = winners
                claimed[winners] = True
            pending = pending[~claimed[pending]]
            slot[pending] = (slot[pending] + 1) & int(self._mask)

    def lookup(self, queries: np.ndarray) -> np.ndarray:
        """Row index for every query key, ``-1`` where absent."""
        queries = np.asarray(queries, dtype=np.int64)
        result = np.full(len(queries), -1, dtype=np.int64)
        pending = np.flatnonzero(queries != _EMPTY)
        if not pending.size:
            return result
        slot = np.zeros(len(queries), dtype=np.int64)
        slot[pending] = (_mix(queries[pending]) & self._mask).astype(np.int64)
        mask = int(self._mask)
        while pending.size:
            s = slot[pending]
            stored = self._keys[s]
            hit = stored == queries[pending]
            result[pending[hit]] = self._rows[s[hit]]
            pending = pending[~hit & (stored != _EMPTY)]
            slot[pending] = (slot[pending] + 1) & mask
        return result


class SparseTensor:
    """Immutable COO sparse tensor.

    Args:
        coords: ``(N, 1 + A)`` integer array, batch index in column 0.
        features: ``(N, C)`` float array.
        shape: lattice bound of each of the ``A`` axes.
        stride: lattice spacing of each axis (defaults to all ones).
        batch_size: number of samples; inferred from ``coords`` if omitted.
        check: validate uniqueness, bounds and stride alignment.
    """

    def __init__(self, coords, features, shape, stride=None, batch_size=None, check=True):
        shape = tuple(int(s) for s in shape)
        n_axes = len(shape)
        coords = np.asarray(coords, dtype=np.int32).reshape(-1, n_axes + 1)
        features = np.asarray(features)
        if features.dtype.kind != "f":
            features = features.astype(np.float32)
        if features.ndim == 1:
            features = features.reshape(len(coords), -1) if len(coords) else features.reshape(0, 1)
        stride = _as_tuple(1 if stride is None else stride, n_axes, "stride")
        if batch_size is None:
            batch_size = int(coords[:, 0].max()) + 1 if len(coords) else 1
        self.coords = coords
        self.features = features
        self.shape = shape
        self.stride = stride
        self.batch_size = int(batch_size)
        if check:
            self._validate()
        coords.flags.writeable = False
        features.flags.writeable = False

    def _validate(self):
        if len(self.coords) != len(self.features):
            raise ValueError("coords and features differ in length")
        if any(s < 1 for s in self.stride):
            raise ValueError("stride entries must be >= 1")
        if not len(self.coords):
            return
        lattice = self.coords[:, 1:]
        if (lattice < 0).any() or (lattice >= np.asarray(self.shape)).any():
            raise ValueError("coordinate out of bounds")
        if ((lattice % np.asarray(self.stride)) != 0).any():
            raise ValueError("coordinate not aligned with tensor stride")
        if (self.coords[:, 0] < 0).any() or (self.coords[:, 0] >= self.batch_size).any():
            raise ValueError("batch index out of range")
        if len(np.unique(self.keys)) != len(self.keys):
            raise ValueError("duplicate coordinates")

    @property
    def n_axes(self) -> int:
        return len(self.shape)

    @property
    def channels(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return len(self.coords)

    def __repr__(self) -> str:
        return (
            f"SparseTensor(sites={len(self)}, channels={self.channels}, "
            f"shape={self.shape}, stride={self.stride}, batch_size={self.batch_size})"
        )

    @property
    def bounds(self) -> tuple[int, ...]:
        return (self.batch_size,) + self.shape

    @cached_property
    def keys(self) -> np.ndarray:
        return pack_coords(self.coords, self.bounds)

    @cached_property
    def index(self) -> CoordinateIndex:
        return CoordinateIndex(self.keys)

    def find(self, coords: np.ndarray) -> np.ndarray:
        """Row of each query coordinate, ``-1`` where not active."""
        return self.index.lookup(pack_coords(coords, self.bounds))

    def replace_features(self, features: np.ndarray) -> "SparseTensor":
        """Same coordinate set (and cached index) with new features."""
        features = np.asarray(features)
        if len(features) != len(self.coords):
            raise ValueError("feature rows must match site count")
        out = SparseTensor(self.coords, features, self.shape, self.stride, self.batch_size, check=False)
        # sharing the index is safe: coordinates are immutable
        for name in ("keys", "index"):
            if name in self.__dict__:
                out.__dict__[name] = self.__dict__[name]
        return out

    def select(self, rows: np.ndarray) -> "SparseTensor":
        """Sub-tensor restricted to ``rows`` (bool mask or index array)."""
        rows = np.asarray(rows)
        return SparseTensor(
            self.coords[rows], self.features[rows], self.shape, self.stride, self.batch_size, check=False
        )

    def astype(self, dtype) -> "SparseTensor":
        return self.replace_features(self.features.astype(dtype))

    def sorted(self) -> "SparseTensor":
        """Copy with rows in lexicographic coordinate order."""
        return self.select(np.argsort(self.keys, kind="stable"))

    def equals(self, other: "SparseTensor") -> bool:
        """Bit-exact equality as a set of (coordinate, feature) pairs."""
        if (self.shape, self.stride, self.channels) != (other.shape, other.stride, other.channels):
            return False
        if len(self) != len(other):
            return False
        a, b = self.sorted(), other.sorted()
        return bool(
            np.array_equal(a.coords, b.coords)
            and a.features.dtype == b.features.dtype
            and np.array_equal(a.features.view(np.uint8), b.features.view(np.uint8))
        )


def active_site_count(s: SparseTensor) -> int:
    return len(s.coords)


def from_dense(dense: np.ndarray, keep: Callable | None = None, batched: bool = False) -> SparseTensor:
    """Convert a channels-first dense array into a SparseTensor.

    Args:
        dense: ``(C, *shape)`` array, or ``(B, C, *shape)`` when ``batched``.
        keep: vectorized predicate ``keep(coords, features) -> bool mask``
            where ``coords`` is ``(M, 1 + A)`` and ``features`` is ``(M, C)``.
            Defaults to "any channel non-zero".
    """
    dense = np.asarray(dense)
    if not batched:
        dense = dense[None]
    if dense.dtype.kind != "f":
        dense = dense.astype(np.float32)
    batch, channels = dense.shape[:2]
    shape = dense.shape[2:]
    # (B, *shape, C) so that site order is row-major over (batch, lattice)
    flat = np.moveaxis(dense, 1, -1).reshape(-1, channels)
    grid = np.indices((batch,) + shape).reshape(1 + len(shape), -1).T.astype(np.int32)
    if keep is None:
        mask = (flat != 0).any(axis=1)
    else:
        mask = np.asarray(keep(grid, flat), dtype=bool)
    return SparseTensor(grid[mask], flat[mask], shape, batch_size=batch, check=False)


def to_dense(s: SparseTensor, shape: Sequence[int] | None = None) -> np.ndarray:
    """Scatter a sparse tensor into a zero ``(B, C, *shape)`` array."""
    shape = s.shape if shape is None else tuple(int(v) for v in shape)
    out = np.zeros((s.batch_size, s.channels) + shape, dtype=s.features.dtype)
    if not len(s):
        return out
    lattice = s.coords[:, 1:]
    if (lattice < 0).any() or (lattice >= np.asarray(shape)).any():
        raise ValueError("coordinate out of bounds")
    # advanced indices separated by a slice: indexed dims are (N, C)
    out[(s.coords[:, 0], slice(None)) + tuple(lattice.T)] = s.features
    return out


def kernel_offsets(kernel_size: Sequence[int]) -> np.ndarray:
    """All kernel taps relative to the kernel center, shape ``(K, A)``.

    Taps are enumerated in row-major order.  The center of an even-sized
    axis is tap 0, so a size-2 kernel covers offsets ``{0, 1}``.
    """
    ranges = [np.arange(k) - (k - 1) // 2 for k in kernel_size]
    return np.array(list(itertools.product(*ranges)), dtype=np.int64).reshape(-1, len(kernel_size))


@dataclass(frozen=True)
class KernelMap:
    """Per-offset (input row, output row) pairs.

    ``offsets[k]`` is the lattice displacement of tap ``k`` in unit cells.
    Within one tap the pairs are sorted by output row.
    """

    offsets: np.ndarray
    in_rows: tuple[np.ndarray, ...]
    out_rows: tuple[np.ndarray, ...]
    n_in: int
    n_out: int

    def __len__(self) -> int:
        return len(self.in_rows)

    @property
    def n_pairs(self) -> int:
        return int(sum(len(r) for r in self.in_rows))

    def pairs(self) -> set[tuple[int, int, int]]:
        """``{(tap, in_row, out_row)}``; intended for tests and debugging."""
        return {
            (k, int(i), int(j))
            for k, (ins, outs) in enumerate(zip(self.in_rows, self.out_rows))
            for i, j in zip(ins, outs)
        }


def build_kernel_map(
    inp: SparseTensor,
    out_coords: np.ndarray,
    kernel_size,
    stride=1,
    dilation=1,
) -> KernelMap:
    """Match every output site and kernel tap to an active input site.

    For tap ``o`` the input coordinate is ``out + (o - center) * dilation *
    inp.stride``; lookups go through the input's coordinate hash index so
    the cost is linear in ``len(out_coords) * kernel volume``.
    """
    n = inp.n_axes
    kernel_size = _as_tuple(kernel_size, n, "kernel_size")
    stride = _as_tuple(stride, n, "stride")
    dilation = _as_tuple(dilation, n, "dilation")
    out_coords = np.asarray(out_coords, dtype=np.int64).reshape(-1, n + 1)
    out_stride = np.asarray(inp.stride) * np.asarray(stride)
    if len(out_coords) and (out_coords[:, 1:] % out_stride).any():
        raise ValueError("output coordinates not aligned with output stride")

    taps = kernel_offsets(kernel_size) * np.asarray(dilation) * np.asarray(inp.stride)
    n_out, n_taps = len(out_coords), len(taps)
    queries = np.repeat(out_coords[None], n_taps, axis=0)
    queries[:, :, 1:] += taps[:, None, :]
    rows = inp.find(queries.reshape(-1, n + 1)).reshape(n_taps, n_out)

    in_rows, out_rows = [], []
    for k in range(n_taps):
        hit = np.flatnonzero(rows[k] >= 0)
        in_rows.append(rows[k, hit])
        out_rows.append(hit)
    return KernelMap(taps, tuple(in_rows), tuple(out_rows), len(inp), n_out)


# ---------------------------------------------------------------------------
# binary format


def serialize(s: SparseTensor) -> bytes:
    """Encode as little-endian ``SPT1``; axis 0 is the batch axis."""
    shape = (s.batch_size,) + s.shape
    stride = (1,) + s.stride
    n_axes = len(shape)
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<I", n_axes))
    buf.write(struct.pack(f"<{n_axes}I", *shape))
    buf.write(struct.pack(f"<{n_axes}I", *stride))
    buf.write(struct.pack("<IQ", s.channels, len(s)))
    buf.write(np.ascontiguousarray(s.coords, dtype="<i4").tobytes())
    buf.write(np.ascontiguousarray(s.features, dtype="<f4").tobytes())
    return buf.getvalue()


def deserialize(data: bytes) -> SparseTensor:
    view = memoryview(data)
    if len(view) < 8 or bytes(view[:4]) != _MAGIC:
        raise CorruptFileError("bad magic")
    (n_axes,) = struct.unpack_from("<I", view, 4)
    if n_axes < 1 or n_axes > 16:
        raise CorruptFileError(f"implausible axis count {n_axes}")
    pos = 8
    header_end = pos + 8 * n_axes + 12
    if len(view) < header_end:
        raise CorruptFileError("truncated header")
    shape = struct.unpack_from(f"<{n_axes}I", view, pos)
    stride = struct.unpack_from(f"<{n_axes}I", view, pos + 4 * n_axes)
    channels, n_sites = struct.unpack_from("<IQ", view, pos + 8 * n_axes)
    coord_bytes = 4 * n_sites * n_axes
    feat_bytes = 4 * n_sites * channels
    if len(view) != header_end + coord_bytes + feat_bytes:
        raise CorruptFileError("payload length mismatch")
    coords = np.frombuffer(view, dtype="<i4", count=n_sites * n_axes, offset=header_end)
    feats = np.frombuffer(view, dtype="<f4", count=n_sites * channels, offset=header_end + coord_bytes)
    try:
        return SparseTensor(
            coords.reshape(n_sites, n_axes).astype(np.int32),
            feats.reshape(n_sites, channels).astype(np.float32),
            shape[1:],
            stride[1:],
            batch_size=shape[0],
        )
    except ValueError as exc:
        raise CorruptFileError(str(exc)) from exc


def save(path, s: SparseTensor) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize(s))


def load(path) -> SparseTensor:
    with open(path, "rb") as fh:
        return deserialize(fh.read())
