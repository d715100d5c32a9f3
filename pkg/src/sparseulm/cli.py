"""Command-line front end: ``sparseulm <command> --out DIR [options] [--section.key value ...]``.

Every command reads an optional JSON config (``--config``), applies dotted
overrides such as ``--sim.noise_sigma 0.1`` and writes its artifacts plus a
``run.json`` manifest under ``--out``.  Exit codes: 0 success, 2 bad
config/input, 3 numerical divergence.
"""

from __future__ import annotations

import argparse
import copy
import csv
import dataclasses
import datetime
import json
import logging
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .baseline import BaselineConfig, accumulate_angiogram, localize_movie, track
from .experiments import measured_scaling
from .metrics import delta_bound, dice, measure_run
from .nn.network import NetworkConfig, SparseNet, load_checkpoint, save_checkpoint
from .nn.train import TrainingDiverged, TrainSchedule, make_clips, predict_rasters, train
from .sim import Movie, SimConfig, dataset_build, load_manifest, load_movie, save_movie
from .sparsify import (
    CnnMask,
    cnn_mask_sparsify,
    sparsity_report,
    threshold_sparsify,
    topk_sparsify,
    write_report_csv,
)
from .tensor import load as load_tensor
from .tensor import save as save_tensor

logger = logging.getLogger("sparseulm")

METRICS_COLUMNS = ["movie_id", "concentration", "method", "dice", "traj_dice", "sites", "time_ms"]

DEFAULTS = {
    "sim": SimConfig.desk_2d().to_dict(),
    "dataset": {
        "n_movies": 20,
        "kind": "tree",
        "split": [0.8, 0.1, 0.1],
        "test_concentrations": None,
        "train_trees": 4,
        "tree_depth": 4,
    },
    "sparsify": {
        "strategy": "threshold",
        "parameter": 0.10,
        "sweep": [0.01, 0.05, 0.10, 0.25],
        "split": "test",
        "per_frame": False,
        "mask_width": 8,
        "mask_epochs": 30,
        "mask_lr": 0.01,
        "mask_seed": 0,
    },
    "net": {"preset": "reference_2d", "seed": 0},
    "train": {
        "tau": 0.10,
        "max_movies": None,
        "epochs": 40,
        "lr": 1e-3,
        "milestones": [],
        "gamma": 0.1,
        "phase1_epochs": 20,
        "phase2_lr": None,
        "dilation": [2, 0],
        "batch_size": [8, 8],
        "cascaded": True,
        "level_weights": None,
        "seed": 0,
    },
    "infer": {"tau": 0.10, "threshold": 0.5, "split": "test"},
    "baseline": {"n_det": None, "max_link": 2.0, "min_track_len": 4, "window": 2, "split": "test"},
    "eval": {"mode": "angiogram", "split": "test"},
    "scaling": {"alpha": 3.0, "rho": 0.5, "r": 8, "tau": 0.10, "seed": 0, "checkpoint_2d": None, "checkpoint_3d": None},
    "bench": {"reps": 5, "tau": 0.10, "split": "test"},
}

_PRESETS = {
    "reference_2d": NetworkConfig.reference_2d,
    "framewise_2d": NetworkConfig.framewise_2d,
    "reference_3d": NetworkConfig.reference_3d,
}


class ConfigError(ValueError):
    """Bad configuration or input; reported with exit code 2."""


# ---------------------------------------------------------------------------
# configuration


def load_config(path) -> dict:
    """Defaults updated with a JSON file; unknown sections or fields are rejected."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is None:
        return cfg
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    try:
        user = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    if not isinstance(user, dict):
        raise ConfigError(f"{path}: top level must be an object")
    for section, values in user.items():
        if section not in cfg:
            raise ConfigError(f"{path}: unknown section '{section}'")
        if not isinstance(values, dict):
            raise ConfigError(f"{path}: section '{section}' must be an object")
        for key, value in values.items():
            _set(cfg, f"{section}.{key}", value, where=str(path))
    return cfg


def _set(cfg: dict, dotted: str, value, where: str = "command line"):
    parts = dotted.split(".")
    if len(parts) != 2:
        raise ConfigError(f"{where}: field '{dotted}' must look like section.key")
    section, key = parts
    if section not in cfg:
        raise ConfigError(f"{where}: unknown section '{section}'")
    # the net section accepts any NetworkConfig field on top of the preset
    allowed = set(cfg[section]) | ({f.name for f in dataclasses.fields(NetworkConfig)} if section == "net" else set())
    if key not in allowed:
        raise ConfigError(f"{where}: unknown field '{dotted}'")
    cfg[section][key] = value


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: dict, extra: list[str]) -> dict:
    """Apply ``--section.key value`` pairs left over by argparse."""
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or "." not in tok:
            raise ConfigError(f"unrecognized argument '{tok}'")
        name = tok[2:]
        if "=" in name:
            name, raw = name.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise ConfigError(f"override '{tok}' needs a value")
            raw = extra[i + 1]
            i += 2
        _set(cfg, name, _parse_value(raw))
    return cfg


def sim_config(cfg: dict) -> SimConfig:
    try:
        return SimConfig.from_dict(cfg["sim"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"sim: {exc}") from exc


def network_config(cfg: dict) -> NetworkConfig:
    spec = dict(cfg["net"])
    preset = spec.pop("preset", None)
    try:
        if preset is not None:
            if preset not in _PRESETS:
                raise ConfigError(f"net.preset: unknown preset '{preset}' (choose from {sorted(_PRESETS)})")
            base = json.loads(_PRESETS[preset]().to_json())
            base.update(spec)
            spec = base
        return NetworkConfig.from_json(json.dumps(spec))
    except (TypeError, ValueError, KeyError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"net: {exc}") from exc


def train_schedule(cfg: dict) -> TrainSchedule:
    fields = {f.name for f in dataclasses.fields(TrainSchedule)}
    try:
        return TrainSchedule(**{k: v for k, v in cfg["train"].items() if k in fields})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"train: {exc}") from exc


def baseline_config(cfg: dict) -> BaselineConfig:
    b = cfg["baseline"]
    try:
        return BaselineConfig(b["n_det"], b["max_link"], b["min_track_len"], b["window"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"baseline: {exc}") from exc


# ---------------------------------------------------------------------------
# run manifest


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_jsonable)
        fh.write("\n")


class Run:
    """Collects artifacts and timing of one command, then writes ``run.json``."""

    def __init__(self, command: str, argv: list[str], cfg: dict, out: Path, seed):
        self.command = command
        self.argv = list(argv)
        self.cfg = cfg
        self.out = out
        self.seed = seed
        self.artifacts: list[str] = []
        self.timing: dict = {}
        self.started = datetime.datetime.now(datetime.timezone.utc)
        self._t0 = time.perf_counter()

    def add(self, path) -> Path:
        path = Path(path)
        rel = path.relative_to(self.out)
        self.artifacts.append(str(rel))
        return path

    def finish(self, status: str = "ok", error: str | None = None) -> dict:
        missing = [a for a in self.artifacts if not (self.out / a).exists()]
        if status == "ok" and missing:
            raise RuntimeError(f"artifacts missing after run: {missing}")
        manifest = {
            "command": self.command,
            "argv": self.argv,
            "config": self.cfg,
            "seeds": {"global": self.seed, "sim": self.cfg["sim"]["seed"], "net": self.cfg["net"].get("seed"), "train": self.cfg["train"]["seed"]},
            "artifacts": sorted(self.artifacts),
            "version": __version__,
            "status": status,
            "error": error,
            "wall_clock": {
                "started": self.started.isoformat(),
                "seconds": time.perf_counter() - self._t0,
                "timing_ms": self.timing,
            },
        }
        write_json(self.out / "run.json", manifest)
        return manifest


# ---------------------------------------------------------------------------
# helpers


def _existing(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{what} not found: {p}")
    return p


def _manifest(path):
    p = _existing(path, "dataset")
    try:
        return load_manifest(p)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: manifest line {exc.lineno}: {exc.msg}") from exc
    except FileNotFoundError as exc:
        raise ConfigError(f"no manifest.json in {p}") from exc


def _entries(manifest, split):
    out = [e for e in manifest["movies"] if split in (None, "all") or e["split"] == split]
    if not out:
        raise ConfigError(f"dataset has no movies in split '{split}'")
    return out


def _load(manifest, entry) -> Movie:
    m = load_movie(Path(manifest["root"]) / entry["path"])
    m.meta.update(concentration=entry["concentration"], seed=entry["seed"], tree_seed=entry.get("tree_seed"))
    return m


def _movie_id(entry) -> str:
    return str(Path(entry["path"]).with_suffix(""))


def _single_movie_manifest(path) -> dict:
    p = _existing(path, "movie")
    return {"root": str(p.parent), "movies": [{"path": p.name, "split": "all", "concentration": None, "seed": None}]}


def _inputs(args, split):
    if getattr(args, "movie", None):
        manifest = _single_movie_manifest(args.movie)
        return manifest, manifest["movies"]
    if not getattr(args, "dataset", None):
        raise ConfigError("need --dataset or --movie")
    manifest = _manifest(args.dataset)
    return manifest, _entries(manifest, split)


def _angiogram_movie(raster: np.ndarray, grid: tuple, upscale: int, tracks=(), noise_sigma: float = 0.0) -> Movie:
    """Prediction container: no frames, the angiogram in the raster field."""
    return Movie(np.zeros(tuple(grid) + (0,), np.complex64), list(tracks), raster, upscale, noise_sigma)


def _write_movie(run: Run, rel, movie: Movie) -> None:
    path = run.out / rel
    path.parent.mkdir(parents=True, exist_ok=True)
    save_movie(path, movie)
    run.add(path)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _check_outside(out: Path, *inputs) -> None:
    for p in inputs:
        if p is None:
            continue
        p = Path(p).resolve()
        if p.is_file():
            p = p.parent
        if out.resolve() == p:
            raise ConfigError(f"--out must differ from the input directory {p}")


def _sparse_path(root, entry) -> Path:
    return Path(root) / "tensors" / Path(entry["path"]).with_suffix(".spt")


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(args, cfg, run: Run) -> None:
    sim = sim_config(cfg)
    ds = cfg["dataset"]
    try:
        manifest = dataset_build(
            sim,
            run.out,
            int(ds["n_movies"]),
            tuple(ds["split"]),
            ds["kind"],
            ds["test_concentrations"],
            int(ds["train_trees"]),
            int(ds["tree_depth"]),
            workers=args.workers,
        )
    except (TypeError, KeyError) as exc:
        raise ConfigError(f"dataset: {exc}") from exc
    for e in manifest["movies"]:
        run.add(run.out / e["path"])
    run.add(run.out / "manifest.json")
    print(f"wrote {len(manifest['movies'])} movies to {run.out}")


def _sparsifier(cfg, manifest):
    sp = cfg["sparsify"]
    strategy = sp["strategy"]
    if strategy == "threshold":
        return lambda value: (lambda m: threshold_sparsify(m, float(value)))
    if strategy == "topk":
        return lambda value: (lambda m: topk_sparsify(m, int(value), bool(sp["per_frame"])))
    if strategy == "cnn":
        train_movies = [_load(manifest, e) for e in manifest["movies"] if e["split"] == "train"]
        if not train_movies:
            raise ConfigError("cnn strategy needs training movies")
        mask = CnnMask(train_movies[0].dims, int(sp["mask_width"]), seed=int(sp["mask_seed"])).fit(
            train_movies, int(sp["mask_epochs"]), float(sp["mask_lr"])
        )

        def make(value):
            m2 = dataclasses.replace(mask, decision_threshold=float(value), params=mask.params)
            return lambda m: cnn_mask_sparsify(m, m2)

        return make
    raise ConfigError(f"sparsify.strategy: unknown strategy '{strategy}' (threshold, topk, cnn)")


def cmd_sparsify(args, cfg, run: Run) -> None:
    manifest = _manifest(args.dataset)
    sp = cfg["sparsify"]
    make = _sparsifier(cfg, manifest)
    report_movies = [_load(manifest, e) for e in _entries(manifest, sp["split"])]
    reports = [sparsity_report(report_movies, sp["strategy"], v, make(v)) for v in sp["sweep"]]
    write_report_csv(run.add(run.out / "sparsity.csv"), reports)
    fn = make(sp["parameter"])
    for e in manifest["movies"]:
        path = _sparse_path(run.out, e)
        path.parent.mkdir(parents=True, exist_ok=True)
        save_tensor(path, fn(_load(manifest, e)))
        run.add(path)
    for r in reports:
        print(f"{r.strategy} {r.parameter}: mean sites {r.mean_sites:.1f}, retention {r.retention:.4f}")


def _clips_for(net, manifest, entries, tau, sparse_dir, offset=0):
    clips = []
    for i, e in enumerate(entries):
        m = _load(manifest, e)
        tensor = None
        if sparse_dir is not None:
            tensor = load_tensor(_existing(_sparse_path(sparse_dir, e), "sparse tensor"))
        clips.extend(make_clips(m, net.cfg.frames, tau, offset + i, tensor=tensor))
    return clips


def _check_geometry(net: SparseNet, movie: Movie) -> None:
    if net.cfg.dims != movie.dims or net.cfg.upscale != movie.upscale:
        raise ConfigError(
            f"network expects {net.cfg.dims}D input with upscale {net.cfg.upscale}, "
            f"movie is {movie.dims}D with upscale {movie.upscale}"
        )


def cmd_train(args, cfg, run: Run) -> None:
    manifest = _manifest(args.dataset)
    net = SparseNet(network_config(cfg))
    sched = train_schedule(cfg)
    entries = _entries(manifest, "train")
    if cfg["train"]["max_movies"] is not None:
        entries = entries[: int(cfg["train"]["max_movies"])]
    _check_geometry(net, _load(manifest, entries[0]))
    clips = _clips_for(net, manifest, entries, float(cfg["train"]["tau"]), args.sparse)
    res = train(net, clips, sched)
    save_checkpoint(run.add(run.out / "model.snn"), net)
    n_heads = net.cfg.n_heads
    with open(run.add(run.out / "history.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "lr", "phase", "loss"] + [f"head{i}_loss" for i in range(n_heads)] + ["peak_sites"])
        for row in res.history:
            w.writerow([row["epoch"], _fmt(row["lr"]), row["phase"], _fmt(row["loss"])] + [_fmt(h) for h in row["head_losses"]] + [row["peak_sites"]])
    run.timing["train_seconds"] = res.seconds
    last = res.history[-1]["loss"] if res.history else float("nan")
    print(f"trained {sched.epochs} epochs on {len(clips)} clips, final loss {last:.4f}")


def _load_net(path) -> SparseNet:
    try:
        return load_checkpoint(_existing(path, "checkpoint"))
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def cmd_infer(args, cfg, run: Run) -> None:
    net = _load_net(args.checkpoint)
    inf = cfg["infer"]
    manifest, entries = _inputs(args, inf["split"])
    rows = []
    for i, e in enumerate(entries):
        m = _load(manifest, e)
        _check_geometry(net, m)
        clips = _clips_for(net, manifest, [e], float(inf["tau"]), args.sparse)
        t0 = time.perf_counter()
        pred = predict_rasters(net, clips, float(inf["threshold"]))
        run.timing[_movie_id(e)] = (time.perf_counter() - t0) * 1e3
        _write_movie(run, e["path"], _angiogram_movie(pred, m.frames.shape[:-1], m.upscale, noise_sigma=m.noise_sigma))
        rows.append({"path": e["path"], "movie_id": _movie_id(e), "concentration": e["concentration"], "sites": int(sum(len(c.x) for c in clips))})
    write_json(run.add(run.out / "predictions.json"), {"method": "sparse_net", "movies": rows})
    print(f"wrote {len(rows)} angiograms to {run.out}")


def _baseline_one(job):
    path, n_det, bcfg = job
    m = load_movie(path)
    t0 = time.perf_counter()
    tracks = track(localize_movie(m.frames, n_det, bcfg.window), bcfg)
    ms = (time.perf_counter() - t0) * 1e3
    return tracks, ms


def cmd_baseline(args, cfg, run: Run) -> None:
    bcfg = baseline_config(cfg)
    manifest, entries = _inputs(args, cfg["baseline"]["split"])
    jobs = []
    for e in entries:
        n_det = bcfg.n_det
        if n_det is None:
            if e["concentration"] is None:
                raise ConfigError("baseline.n_det must be set when the concentration is unknown")
            n_det = max(int(round(e["concentration"])), 1)
        jobs.append((str(Path(manifest["root"]) / e["path"]), n_det, bcfg))
    if args.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(args.workers) as pool:
            results = list(pool.map(_baseline_one, jobs))
    else:
        results = [_baseline_one(j) for j in jobs]
    rows = []
    with open(run.add(run.out / "tracks.csv"), "w", newline="") as fh:
        w = None
        for e, (tracks, ms), job in zip(entries, results, jobs):
            m = load_movie(job[0])
            d = m.dims
            if w is None:
                w = csv.writer(fh)
                w.writerow(["movie_id", "track_id", "frame"] + ["x", "y", "z"][:d])
            for tr in tracks:
                for f, p in zip(tr.frames, tr.positions * m.upscale):
                    w.writerow([_movie_id(e), tr.id, int(f)] + [_fmt(float(v)) for v in p])
            ang = accumulate_angiogram(tracks, m.upscale, m.gt_raster.shape)
            _write_movie(run, e["path"], _angiogram_movie(ang, m.frames.shape[:-1], m.upscale, tracks, m.noise_sigma))
            run.timing[_movie_id(e)] = ms
            rows.append({"path": e["path"], "movie_id": _movie_id(e), "concentration": e["concentration"], "sites": int(sum(len(t) for t in tracks))})
    write_json(run.add(run.out / "predictions.json"), {"method": "baseline", "movies": rows})
    print(f"tracked {len(rows)} movies")


def _trajectory_dice(pred: Movie, gt: Movie) -> float:
    """Mean per-frame Dice of the predicted track positions against the truth."""
    vals = [dice(pred.frame_raster(t), gt.frame_raster(t)) for t in range(gt.n_frames)]
    return float(np.mean(vals)) if vals else 1.0


def cmd_eval(args, cfg, run: Run) -> None:
    mode = args.mode or cfg["eval"]["mode"]
    if mode not in ("angiogram", "trajectory"):
        raise ConfigError(f"eval.mode: unknown mode '{mode}' (angiogram, trajectory)")
    gt_manifest = _manifest(args.gt)
    entries = _entries(gt_manifest, cfg["eval"]["split"])
    pred_root = _existing(args.pred, "prediction directory")
    info = {"method": "reference", "movies": []}
    if (pred_root / "predictions.json").exists():
        info = json.loads((pred_root / "predictions.json").read_text())
    per_movie = {r["movie_id"]: r for r in info["movies"]}
    timing = {}
    if (pred_root / "run.json").exists():
        timing = json.loads((pred_root / "run.json").read_text()).get("wall_clock", {}).get("timing_ms", {})
    rows = []
    pooled: dict = {}
    for e in entries:
        path = pred_root / e["path"]
        if not path.exists():
            raise ConfigError(f"missing prediction for {e['path']} in {pred_root}")
        pred = load_movie(path)
        gt = _load(gt_manifest, e)
        if pred.gt_raster.shape != gt.gt_raster.shape:
            raise ConfigError(f"{e['path']}: prediction grid {pred.gt_raster.shape} != truth {gt.gt_raster.shape}")
        mid = _movie_id(e)
        traj = None
        if pred.tracks or pred is gt:
            traj = _trajectory_dice(pred, gt)
        elif mode == "trajectory":
            raise ConfigError(f"{e['path']}: trajectory mode needs per-frame tracks in the prediction")
        conc = e["concentration"]
        acc = pooled.setdefault(conc, [np.zeros_like(gt.gt_raster), np.zeros_like(gt.gt_raster), []])
        acc[0] |= pred.gt_raster
        acc[1] |= gt.gt_raster
        acc[2].append(dice(pred.gt_raster, gt.gt_raster))
        rows.append([mid, _fmt(conc), info["method"], _fmt(acc[2][-1]), _fmt(traj), _fmt(per_movie.get(mid, {}).get("sites")), _fmt(timing.get(mid))])
    with open(run.add(run.out / "metrics.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRICS_COLUMNS)
        w.writerows(rows)
    with open(run.add(run.out / "summary.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["concentration", "method", "n_movies", "pooled_dice", "mean_dice"])
        for conc in sorted(pooled, key=lambda c: (c is None, c)):
            p, g, vals = pooled[conc]
            w.writerow([_fmt(conc), info["method"], len(vals), _fmt(dice(p, g)), _fmt(float(np.mean(vals)))])
            print(f"{info['method']} concentration {conc}: pooled Dice {dice(p, g):.4f} over {len(vals)} movies")


def cmd_scaling(args, cfg, run: Run) -> None:
    sc = cfg["scaling"]
    try:
        alpha, rho, r = float(sc["alpha"]), float(sc["rho"]), float(sc["r"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"scaling: {exc}") from exc
    if min(alpha, rho, r) <= 0:
        raise ConfigError("scaling: alpha, rho and r must be positive")
    out = {"alpha": alpha, "rho": rho, "r": r, "delta": delta_bound(rho, alpha, r)}
    if sc["checkpoint_2d"] or sc["checkpoint_3d"]:
        if not (sc["checkpoint_2d"] and sc["checkpoint_3d"]):
            raise ConfigError("scaling: measuring needs both checkpoint_2d and checkpoint_3d")
        net2, net3 = _load_net(sc["checkpoint_2d"]), _load_net(sc["checkpoint_3d"])
        cfg2 = SimConfig.desk_2d(upscale=net2.cfg.upscale)
        cfg3 = SimConfig.desk_3d(upscale=net3.cfg.upscale)
        out["measured"] = measured_scaling(net2, net3, cfg2, cfg3, float(sc["tau"]), int(sc["seed"]), reference=out["delta"])
    write_json(run.add(run.out / "scaling.json"), out)
    print(f"delta {out['delta']!r}")
    if "measured" in out:
        meas = out["measured"]
        print(f"measured delta {meas['empirical']['delta_exp']:.4g} vs closed form {meas['closed_form']['delta_reference']:.4g}")


def cmd_bench(args, cfg, run: Run) -> None:
    net = _load_net(args.checkpoint)
    b = cfg["bench"]
    reps = int(args.reps if args.reps is not None else b["reps"])
    if reps < 1:
        raise ConfigError("bench.reps must be >= 1")
    manifest, entries = _inputs(args, b["split"])
    with open(run.add(run.out / "timing.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["movie_id", "clips", "input_sites", "peak_sites", "time_ms", "time_ms_sd", "reps"])
        for e in entries:
            m = _load(manifest, e)
            _check_geometry(net, m)
            clips = make_clips(m, net.cfg.frames, float(b["tau"]))
            stats = [measure_run(net, c.x, reps) for c in clips]
            total = sum(s.time_ms for s in stats)
            sd = math.sqrt(sum(s.time_ms_sd**2 for s in stats))
            w.writerow([_movie_id(e), len(clips), sum(len(c.x) for c in clips), max(s.peak_sites for s in stats), _fmt(total), _fmt(sd), reps])
            print(f"{_movie_id(e)}: {total:.1f} ms over {len(clips)} clips")


COMMANDS = {
    "simulate": cmd_simulate,
    "sparsify": cmd_sparsify,
    "train": cmd_train,
    "infer": cmd_infer,
    "baseline": cmd_baseline,
    "eval": cmd_eval,
    "scaling": cmd_scaling,
    "bench": cmd_bench,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False, allow_abbrev=False)
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--seed", type=int, default=None, help="overrides every seed in the config")
    common.add_argument("--workers", type=int, default=1, help="processes for dataset-parallel stages")
    common.add_argument("--config", default=None, help="JSON config file")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="sparseulm", description=__doc__.splitlines()[0], allow_abbrev=False)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], allow_abbrev=False, help="simulate a dataset")
    p = sub.add_parser("sparsify", parents=[common], allow_abbrev=False, help="sparsity report and sparse tensors")
    p.add_argument("--dataset", required=True)
    p = sub.add_parser("train", parents=[common], allow_abbrev=False, help="train a sparse network")
    p.add_argument("--dataset", required=True)
    p.add_argument("--sparse", default=None, help="output directory of 'sparsify' to read inputs from")
    p = sub.add_parser("infer", parents=[common], allow_abbrev=False, help="predict angiograms")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", default=None)
    p.add_argument("--movie", default=None)
    p.add_argument("--sparse", default=None)
    p = sub.add_parser("baseline", parents=[common], allow_abbrev=False, help="conventional localization and tracking")
    p.add_argument("--dataset", default=None)
    p.add_argument("--movie", default=None)
    p = sub.add_parser("eval", parents=[common], allow_abbrev=False, help="Dice of predictions against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--mode", default=None, choices=["angiogram", "trajectory"])
    sub.add_parser("scaling", parents=[common], allow_abbrev=False, help="memory scaling report")
    p = sub.add_parser("bench", parents=[common], allow_abbrev=False, help="forward-pass timing")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", default=None)
    p.add_argument("--movie", default=None)
    p.add_argument("--reps", type=int, default=None)
    return parser


def _apply_seed(cfg: dict, seed) -> None:
    if seed is None:
        return
    cfg["sim"]["seed"] = seed
    cfg["net"]["seed"] = seed
    cfg["train"]["seed"] = seed
    cfg["scaling"]["seed"] = seed
    cfg["sparsify"]["mask_seed"] = seed


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out)
    try:
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        cfg = apply_overrides(load_config(args.config), extra)
        _apply_seed(cfg, args.seed)
        inputs = [getattr(args, k, None) for k in ("dataset", "movie", "pred", "gt", "sparse")]
        _check_outside(out, *inputs)
        out.mkdir(parents=True, exist_ok=True)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: cannot create output directory {out}: {exc.strerror}", file=sys.stderr)
        return 2
    run = Run(args.command, argv, cfg, out, args.seed)
    try:
        COMMANDS[args.command](args, cfg, run)
    except (TrainingDiverged, FloatingPointError) as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        run.finish("diverged", str(exc))
        return 3
    except (ConfigError, ValueError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        run.finish("error", str(exc))
        return 2
    run.finish()
    return 0


if __name__ == "__main__":
    sys.exit(main())
