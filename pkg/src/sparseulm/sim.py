"""Desk-scale synthetic ULM data.

Microbubbles move either along random smooth paths or through a procedural
branching vessel tree.  Each frame is the coherent sum of complex PSF
samples (Gaussian envelope, carrier phase, optional side-lobe ring) plus
i.i.d. Gaussian noise on the real and imaginary parts.  Positions are in
low-resolution pixel units: pixel ``i`` covers ``[i, i + 1)`` and its center
sits at ``i + 0.5``.
"""

from __future__ import annotations

import dataclasses
import io
import json
import logging
import os
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

_MAGIC = b"ULM1"
FWHM_TO_SIGMA = 1.0 / (2.0 * np.sqrt(2.0 * np.log(2.0)))

TEST_CONCENTRATIONS = {2: (1, 5, 10, 20), 3: (1, 10, 30)}


@dataclass
class SimConfig:
    """Simulation parameters.

    ``psf_width`` is the full width at half maximum of the PSF envelope in
    pixels.  ``speed_range`` is in pixels per frame.
    """

    dims: int = 2
    grid: int = 32
    frames: int = 64
    concentration: float = 5
    psf_width: float = 3.0
    side_lobe: float = 0.0
    noise_sigma: float = 0.02
    upscale: int = 8
    speed_range: tuple = (0.03, 0.12)
    heading_noise: float = 0.05
    seed: int = 0

    def __post_init__(self):
        self.speed_range = tuple(float(v) for v in self.speed_range)
        if self.dims not in (2, 3):
            raise ValueError("dims must be 2 or 3")
        if self.grid < 1 or self.frames < 1 or self.upscale < 1:
            raise ValueError("grid, frames and upscale must be >= 1")
        if self.noise_sigma < 0 or self.concentration < 0:
            raise ValueError("noise_sigma and concentration must be >= 0")

    @classmethod
    def desk_2d(cls, **overrides) -> "SimConfig":
        return cls(**overrides)

    @classmethod
    def desk_3d(cls, **overrides) -> "SimConfig":
        base = dict(dims=3, grid=16, frames=32, upscale=4, concentration=30, side_lobe=0.3)
        base.update(overrides)
        return cls(**base)

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.grid,) * self.dims

    @property
    def fine_shape(self) -> tuple[int, ...]:
        return (self.grid * self.upscale,) * self.dims

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["speed_range"] = list(self.speed_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown SimConfig field(s): {sorted(unknown)}")
        return cls(**d)


@dataclass
class Track:
    id: int
    start: int
    positions: np.ndarray  # (len, dims)

    @property
    def frames(self) -> np.ndarray:
        return self.start + np.arange(len(self.positions))

    @property
    def end(self) -> int:
        """Last frame in which the bubble is present."""
        return self.start + len(self.positions) - 1

    def __len__(self) -> int:
        return len(self.positions)


@dataclass
class Movie:
    frames: np.ndarray  # complex64, (*grid, T)
    tracks: list
    gt_raster: np.ndarray  # bool, fine grid
    upscale: int
    noise_sigma: float
    meta: dict = field(default_factory=dict)

    @property
    def dims(self) -> int:
        return self.frames.ndim - 1

    @property
    def n_frames(self) -> int:
        return self.frames.shape[-1]

    def frame_raster(self, t: int) -> np.ndarray:
        """Fine-grid raster of the bubbles present in frame ``t``."""
        out = np.zeros_like(self.gt_raster)
        for tr in self.tracks:
            if tr.start <= t <= tr.end:
                _mark(out, tr.positions[t - tr.start][None], self.upscale)
        return out


def _mark(raster: np.ndarray, positions: np.ndarray, upscale: int) -> None:
    idx = np.floor(np.asarray(positions) * upscale).astype(np.int64)
    idx = np.clip(idx, 0, np.asarray(raster.shape) - 1)
    raster[tuple(idx.T)] = True


def _rng(*key) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


def _random_unit(rng, dims):
    v = rng.standard_normal(dims)
    return v / np.linalg.norm(v)


# ---------------------------------------------------------------------------
# random trajectories


def generate_random_tracks(cfg: SimConfig) -> list[Track]:
    """Constant-concentration straight-ish trajectories.

    Every bubble has a constant speed and a slowly diffusing heading.  A bubble
    leaving the field of view ends its track and is replaced by a new one
    in the next frame, so every frame has exactly ``concentration`` bubbles.
    """
    rng = _rng(cfg.seed, 11)
    n = int(round(cfg.concentration))
    lo, hi = cfg.speed_range
    size = float(cfg.grid)
    tracks: list[Track] = []
    next_id = 0

    def spawn(t):
        nonlocal next_id
        b = {
            "id": next_id,
            "start": t,
            "pos": rng.uniform(0, size, cfg.dims),
            "speed": rng.uniform(lo, hi),
            "heading": _random_unit(rng, cfg.dims),
            "samples": [],
        }
        next_id += 1
        return b

    live = [spawn(0) for _ in range(n)]
    for t in range(cfg.frames):
        for k, b in enumerate(live):
            b["samples"].append(b["pos"].copy())
            heading = b["heading"] + cfg.heading_noise * rng.standard_normal(cfg.dims)
            b["heading"] = heading / np.linalg.norm(heading)
            b["pos"] = b["pos"] + b["speed"] * b["heading"]
            if t + 1 < cfg.frames and ((b["pos"] < 0) | (b["pos"] >= size)).any():
                tracks.append(Track(b["id"], b["start"], np.array(b["samples"])))
                live[k] = spawn(t + 1)
    tracks.extend(Track(b["id"], b["start"], np.array(b["samples"])) for b in live)
    tracks.sort(key=lambda tr: tr.id)
    return tracks


# ---------------------------------------------------------------------------
# vessel trees


@dataclass
class Segment:
    start: np.ndarray
    end: np.ndarray
    radius: float
    children: list = field(default_factory=list)

    @property
    def length(self) -> float:
        return float(np.linalg.norm(self.end - self.start))


@dataclass
class VesselTree:
    segments: list
    seed: int

    def paths(self) -> list[list[int]]:
        """All root-to-leaf segment index paths."""
        out = []

        def walk(i, acc):
            acc = acc + [i]
            if not self.segments[i].children:
                out.append(acc)
            for c in self.segments[i].children:
                walk(c, acc)

        walk(0, [])
        return out

    def segment_keys(self) -> set:
        return {(tuple(np.round(s.start, 9)), tuple(np.round(s.end, 9))) for s in self.segments}


def make_tree(cfg: SimConfig, tree_seed: int, depth: int = 4, root_radius: float = 0.3) -> VesselTree:
    """Procedural bifurcating tree filling the field of view.

    Radii follow Murray's law (``r_child = r_parent / 2**(1/3)``).  With
    ``depth=0`` the tree is a single straight vessel crossing the FOV.
    """
    rng = _rng(tree_seed, 23)
    size = float(cfg.grid)
    margin = 1.0
    lo, hi = margin, size - margin
    center = np.full(cfg.dims, size / 2)
    axis = rng.integers(cfg.dims)
    start = rng.uniform(lo, hi, cfg.dims)
    start[axis] = lo if rng.random() < 0.5 else hi
    direction = center - start + rng.normal(0, size / 8, cfg.dims)
    direction /= np.linalg.norm(direction)

    def clip_length(p, d, length):
        # largest t <= length keeping p + t d inside [lo, hi]
        t = length
        for k in range(cfg.dims):
            if d[k] > 1e-12:
                t = min(t, (hi - p[k]) / d[k])
            elif d[k] < -1e-12:
                t = min(t, (lo - p[k]) / d[k])
        return max(t, 0.0)

    segments: list[Segment] = []
    if depth == 0:
        length = clip_length(start, direction, 4 * size)
        segments.append(Segment(start, start + length * direction, root_radius))
        return VesselTree(segments, tree_seed)

    def grow(p, d, radius, length, level):
        seg_len = clip_length(p, d, length)
        if level and seg_len < 0.5:
            return None
        seg = Segment(p, p + seg_len * d, radius)
        idx = len(segments)
        segments.append(seg)
        if level >= depth or seg_len < 1.5:
            return idx
        for sign in (-1.0, 1.0):
            angle = sign * rng.uniform(np.radians(25), np.radians(50))
            nd = _rotate(d, angle, rng, cfg.dims)
            child = grow(seg.end, nd, radius * 2 ** (-1 / 3), length * rng.uniform(0.6, 0.85), level + 1)
            if child is not None:
                seg.children.append(child)
        return idx

    grow(start, direction, root_radius, size * 0.45, 0)
    return VesselTree(segments, tree_seed)


def _rotate(d, angle, rng, dims):
    if dims == 2:
        c, s = np.cos(angle), np.sin(angle)
        return np.array([c * d[0] - s * d[1], s * d[0] + c * d[1]])
    perp = _random_unit(rng, 3)
    perp -= perp.dot(d) * d
    perp /= np.linalg.norm(perp)
    out = np.cos(angle) * d + np.sin(angle) * perp
    return out / np.linalg.norm(out)


def _perpendicular_offset(rng, d, radius, dims):
    """Random point of the vessel cross-section (disc or segment)."""
    u = _random_unit(rng, dims)
    u -= u.dot(d) * d
    norm = np.linalg.norm(u)
    if norm < 1e-9:
        return np.zeros(dims), 0.0
    u /= norm
    frac = rng.uniform(-1, 1) if dims == 2 else np.sqrt(rng.uniform(0, 1))
    return u * frac * radius, abs(frac)


def generate_tree_tracks(cfg: SimConfig, tree_seed: int, tree: VesselTree | None = None, depth: int = 4) -> list[Track]:
    """Bubbles advected through a procedural vessel tree.

    At every bifurcation a bubble picks a child with probability proportional
    to the child's flow (``radius**3``).  Speed follows a Poiseuille profile:
    proportional to ``radius**2`` and reduced away from the vessel axis.
    Exiting bubbles (leaf end reached) are replaced at a random point of a
    random path, so concentration stays constant.
    """
    tree = tree or make_tree(cfg, tree_seed, depth=depth)
    rng = _rng(cfg.seed, tree_seed, 31)
    segs = tree.segments
    r_max = segs[0].radius
    lo, hi = cfg.speed_range
    size = float(cfg.grid)
    n = int(round(cfg.concentration))
    tracks: list[Track] = []
    next_id = 0

    def choose_path():
        path = [0]
        while segs[path[-1]].children:
            kids = segs[path[-1]].children
            w = np.array([segs[k].radius ** 3 for k in kids])
            path.append(kids[rng.choice(len(kids), p=w / w.sum())])
        return path

    def spawn(t):
        nonlocal next_id
        path = choose_path()
        seg_i = rng.integers(len(path))
        b = {
            "id": next_id,
            "start": t,
            "path": path,
            "seg": int(seg_i),
            "s": rng.uniform(0, segs[path[seg_i]].length),
            "offset_seed": int(rng.integers(2**31)),
            "samples": [],
        }
        next_id += 1
        return b

    def position(b):
        seg = segs[b["path"][b["seg"]]]
        d = (seg.end - seg.start) / max(seg.length, 1e-12)
        off_rng = _rng(b["offset_seed"], b["seg"])
        offset, frac = _perpendicular_offset(off_rng, d, seg.radius, cfg.dims)
        p = seg.start + b["s"] * d + offset
        speed = lo + (hi - lo) * (seg.radius / r_max) ** 2 * (1 - frac**2)
        return np.clip(p, 0, np.nextafter(size, 0)), speed

    live = [spawn(0) for _ in range(n)]
    for t in range(cfg.frames):
        for k, b in enumerate(live):
            p, speed = position(b)
            b["samples"].append(p)
            b["s"] += speed
            alive = True
            while b["s"] > segs[b["path"][b["seg"]]].length:
                b["s"] -= segs[b["path"][b["seg"]]].length
                b["seg"] += 1
                if b["seg"] >= len(b["path"]):
                    alive = False
                    break
            if not alive and t + 1 < cfg.frames:
                tracks.append(Track(b["id"], b["start"], np.array(b["samples"])))
                live[k] = spawn(t + 1)
            elif not alive:
                b["seg"] = len(b["path"]) - 1
                b["s"] = segs[b["path"][-1]].length
    tracks.extend(Track(b["id"], b["start"], np.array(b["samples"])) for b in live)
    tracks.sort(key=lambda tr: tr.id)
    return tracks


# ---------------------------------------------------------------------------
# rendering


def psf(delta: np.ndarray, cfg: SimConfig) -> np.ndarray:
    """Complex PSF sampled at displacements ``delta`` (``(..., dims)``)."""
    sigma = cfg.psf_width * FWHM_TO_SIGMA
    dist2 = (delta**2).sum(-1)
    env = np.exp(-dist2 / (2 * sigma**2))
    if cfg.side_lobe:
        ring_r, ring_w = 2.5 * sigma, 0.5 * sigma
        env = env + cfg.side_lobe * np.exp(-((np.sqrt(dist2) - ring_r) ** 2) / (2 * ring_w**2))
    # carrier: half a cycle per pixel along each axis
    phase = np.pi * delta.sum(-1)
    return env * np.exp(1j * phase)


def pixel_centers(shape) -> np.ndarray:
    return np.indices(shape).reshape(len(shape), -1).T + 0.5


def render_movie(tracks: list[Track], cfg: SimConfig, noise_seed: int | None = None) -> Movie:
    """Stamp every bubble's PSF into its frames and add complex noise."""
    centers = pixel_centers(cfg.shape)
    frames = np.zeros((len(centers), cfg.frames), dtype=np.complex128)
    gt = np.zeros(cfg.fine_shape, dtype=bool)
    by_frame: list[list[np.ndarray]] = [[] for _ in range(cfg.frames)]
    for tr in tracks:
        for t, p in zip(tr.frames, tr.positions):
            if 0 <= t < cfg.frames:
                by_frame[t].append(p)
        _mark(gt, tr.positions, cfg.upscale)
    for t, pos in enumerate(by_frame):
        if pos:
            delta = centers[None, :, :] - np.asarray(pos)[:, None, :]
            frames[:, t] = psf(delta, cfg).sum(axis=0)
    if cfg.noise_sigma > 0:
        rng = _rng(cfg.seed if noise_seed is None else noise_seed, 47)
        noise = rng.normal(0, cfg.noise_sigma, (2,) + frames.shape)
        frames = frames + noise[0] + 1j * noise[1]
    frames = frames.reshape(cfg.shape + (cfg.frames,)).astype(np.complex64)
    return Movie(frames, tracks, gt, cfg.upscale, float(cfg.noise_sigma))


def add_noise(movie: Movie, sigma: float, seed: int) -> Movie:
    """Copy of ``movie`` with extra complex Gaussian noise; tracks and GT untouched."""
    rng = _rng(seed, 53)
    noise = rng.normal(0, sigma, (2,) + movie.frames.shape)
    frames = (movie.frames + noise[0] + 1j * noise[1]).astype(np.complex64)
    return dataclasses.replace(movie, frames=frames, noise_sigma=float(np.hypot(movie.noise_sigma, sigma)))


def simulate(cfg: SimConfig, kind: str = "random", tree_seed: int | None = None, tree_depth: int = 4) -> Movie:
    if kind == "random":
        tracks = generate_random_tracks(cfg)
    elif kind == "tree":
        tracks = generate_tree_tracks(cfg, cfg.seed if tree_seed is None else tree_seed, depth=tree_depth)
    else:
        raise ValueError(f"unknown trajectory kind {kind!r}")
    movie = render_movie(tracks, cfg)
    movie.meta.update(kind=kind, tree_seed=tree_seed, concentration=cfg.concentration, seed=cfg.seed)
    return movie


# ---------------------------------------------------------------------------
# movie file format


def encode_movie(movie: Movie) -> bytes:
    """``ULM1`` little-endian encoding (frames, bit-packed GT, track table)."""
    d = movie.dims
    shape = movie.frames.shape[:-1]
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<B", d))
    buf.write(struct.pack(f"<{d}I", *shape))
    buf.write(struct.pack("<IIf", movie.n_frames, movie.upscale, movie.noise_sigma))
    inter = np.empty(movie.frames.shape + (2,), dtype="<f4")
    inter[..., 0] = movie.frames.real
    inter[..., 1] = movie.frames.imag
    buf.write(inter.tobytes())
    buf.write(np.packbits(movie.gt_raster.astype(bool).ravel()).tobytes())
    for tr in movie.tracks:
        buf.write(struct.pack("<III", tr.id, tr.start, len(tr)))
        buf.write(np.ascontiguousarray(tr.positions, dtype="<f4").tobytes())
    return buf.getvalue()


def decode_movie(data: bytes) -> Movie:
    view = memoryview(data)
    try:
        if bytes(view[:4]) != _MAGIC:
            raise ValueError("bad magic")
        (d,) = struct.unpack_from("<B", view, 4)
        shape = struct.unpack_from(f"<{d}I", view, 5)
        pos = 5 + 4 * d
        n_frames, upscale, sigma = struct.unpack_from("<IIf", view, pos)
        pos += 12
        count = int(np.prod(shape)) * n_frames * 2
        inter = np.frombuffer(view, dtype="<f4", count=count, offset=pos).reshape(tuple(shape) + (n_frames, 2))
        pos += 4 * count
        frames = (inter[..., 0] + 1j * inter[..., 1]).astype(np.complex64)
        fine = tuple(s * upscale for s in shape)
        n_bits = int(np.prod(fine))
        n_bytes = (n_bits + 7) // 8
        bits = np.frombuffer(view, dtype=np.uint8, count=n_bytes, offset=pos)
        gt = np.unpackbits(bits)[:n_bits].astype(bool).reshape(fine)
        pos += n_bytes
        tracks = []
        while pos < len(view):
            tid, start, length = struct.unpack_from("<III", view, pos)
            pos += 12
            p = np.frombuffer(view, dtype="<f4", count=length * d, offset=pos).reshape(length, d)
            pos += 4 * length * d
            tracks.append(Track(tid, start, p.astype(np.float64)))
    except (struct.error, ValueError) as exc:
        raise ValueError(f"corrupt movie file: {exc}") from exc
    return Movie(frames, tracks, gt, upscale, float(sigma))


def save_movie(path, movie: Movie) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_movie(movie))


def load_movie(path) -> Movie:
    with open(path, "rb") as fh:
        return decode_movie(fh.read())


# ---------------------------------------------------------------------------
# datasets

_SPLIT_IDS = {"train": 1, "val": 2, "test": 3}


def split_counts(n_movies: int, split=(0.8, 0.1, 0.1)) -> dict:
    n_val = int(np.floor(n_movies * split[1] + 1e-9))
    n_test = int(np.floor(n_movies * split[2] + 1e-9))
    return {"train": n_movies - n_val - n_test, "val": n_val, "test": n_test}


def tree_seeds_for(base_seed: int, split: str, n_trees: int) -> list[int]:
    """Disjoint per-split tree seeds (train, val and test never share a tree)."""
    return [base_seed * 100_000 + _SPLIT_IDS[split] * 1000 + k for k in range(n_trees)]


def _movie_seed(base_seed, split, concentration, index) -> int:
    ss = np.random.SeedSequence([int(base_seed), _SPLIT_IDS[split], int(round(concentration * 1000)), int(index)])
    return int(ss.generate_state(1)[0])


def _build_one(job):
    cfg_dict, kind, tree_seed, depth, path = job
    cfg = SimConfig.from_dict(cfg_dict)
    movie = simulate(cfg, kind, tree_seed, depth)
    try:
        save_movie(path, movie)
    except OSError as exc:
        raise OSError(f"cannot write movie {path}: {exc}") from exc
    return path


def dataset_build(
    cfg: SimConfig,
    out_dir,
    n_movies: int,
    split=(0.8, 0.1, 0.1),
    kind: str = "tree",
    test_concentrations=None,
    train_trees: int = 4,
    tree_depth: int = 4,
    workers: int = 1,
) -> dict:
    """Simulate a train/val/test dataset and write it with a JSON manifest.

    Train and validation movies use ``cfg.concentration``; the test split
    is generated once per entry of ``test_concentrations`` (defaults to the
    standard sweep for the dimensionality).  Returns the manifest.
    """
    out_dir = Path(out_dir)
    counts = split_counts(n_movies, split)
    if test_concentrations is None:
        test_concentrations = TEST_CONCENTRATIONS[cfg.dims]
    jobs, entries = [], []
    for name, n in counts.items():
        concs = test_concentrations if name == "test" else (cfg.concentration,)
        trees = tree_seeds_for(cfg.seed, name, train_trees if name == "train" else 1)
        for conc in concs:
            for i in range(n):
                seed = _movie_seed(cfg.seed, name, conc, i)
                tree_seed = trees[i % len(trees)] if kind == "tree" else None
                mcfg = dataclasses.replace(cfg, concentration=conc, seed=seed)
                rel = Path(name) / f"c{conc:g}_{i:05d}.ulm"
                jobs.append((mcfg.to_dict(), kind, tree_seed, tree_depth, str(out_dir / rel)))
                entries.append(
                    {"path": str(rel), "split": name, "concentration": conc, "seed": seed, "tree_seed": tree_seed}
                )
    for name in counts:
        try:
            (out_dir / name).mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise OSError(f"cannot create {out_dir / name}: {exc}") from exc
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(workers) as pool:
            list(pool.map(_build_one, jobs))
    else:
        for job in jobs:
            _build_one(job)
    manifest = {"config": cfg.to_dict(), "kind": kind, "tree_depth": tree_depth, "split": list(split), "movies": entries}
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    logger.info("wrote %d movies to %s", len(entries), out_dir)
    return manifest


def load_manifest(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    with open(path) as fh:
        manifest = json.load(fh)
    manifest["root"] = str(path.parent)
    return manifest


def iter_movies(manifest: dict, split: str | None = None, concentration=None):
    """Yield ``(entry, Movie)`` pairs from a loaded manifest."""
    root = Path(manifest.get("root", "."))
    for entry in manifest["movies"]:
        if split is not None and entry["split"] != split:
            continue
        if concentration is not None and entry["concentration"] != concentration:
            continue
        yield entry, load_movie(root / entry["path"])
