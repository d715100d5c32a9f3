"""scikit-learn style wrappers around the pipeline stages.

``X`` is always a sequence of :class:`~sparseulm.sim.Movie` objects; a
single movie is accepted and wrapped.  Predictions are fine-grid boolean
angiograms, one per movie.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .baseline import BaselineConfig, accumulate_angiogram, localize_movie, track
from .metrics import dice
from .nn.network import NetworkConfig, SparseNet
from .nn.train import TrainSchedule, make_clips, predict_rasters, train
from .sim import Movie
from .sparsify import CnnMask, cnn_mask_sparsify, threshold_sparsify, topk_sparsify
from .tensor import SparseTensor

__all__ = [
    "CnnMaskSparsifier",
    "ConventionalULM",
    "SparseDeepULM",
    "ThresholdSparsifier",
    "TopKSparsifier",
    "check_movie",
    "check_movies",
    "check_sparse_input",
    "pooled_dice",
]


def check_movie(movie) -> Movie:
    """Validate one movie: complex frames, matching fine raster, finite values."""
    if not isinstance(movie, Movie):
        raise TypeError(f"expected a Movie, got {type(movie).__name__}")
    if not np.iscomplexobj(movie.frames):
        raise ValueError("movie frames must be complex")
    if movie.frames.ndim not in (3, 4):
        raise ValueError(f"movie frames must be (*grid, T) with 2 or 3 spatial axes, got {movie.frames.shape}")
    fine = tuple(s * movie.upscale for s in movie.frames.shape[:-1])
    if movie.gt_raster.shape != fine:
        raise ValueError(f"raster shape {movie.gt_raster.shape} does not match grid x upscale {fine}")
    if not np.all(np.isfinite(movie.frames.view(np.float32))):
        raise ValueError("movie frames contain non-finite values")
    return movie


def check_movies(X) -> list[Movie]:
    movies = [X] if isinstance(X, Movie) else list(X)
    if not movies:
        raise ValueError("need at least one movie")
    shapes = {m.frames.shape[:-1] + (m.upscale,) for m in map(check_movie, movies)}
    if len(shapes) > 1:
        raise ValueError(f"movies disagree on grid/upscale: {sorted(shapes)}")
    return movies


def check_sparse_input(x, channels: int | None = None) -> SparseTensor:
    if not isinstance(x, SparseTensor):
        raise TypeError(f"expected a SparseTensor, got {type(x).__name__}")
    if channels is not None and x.channels != channels:
        raise ValueError(f"channel count mismatch: got {x.channels}, expected {channels}")
    if not np.all(np.isfinite(x.features)):
        raise ValueError("sparse features contain non-finite values")
    return x


def pooled_dice(predictions, movies) -> float:
    """Dice between the OR of all predictions and the OR of all ground truths."""
    pred = np.logical_or.reduce([np.asarray(p, dtype=bool) for p in predictions])
    gt = np.logical_or.reduce([m.gt_raster for m in movies])
    return dice(pred, gt)


# ---------------------------------------------------------------------------
# sparsifiers


class ThresholdSparsifier(TransformerMixin, BaseEstimator):
    """Keep pixels with complex magnitude >= ``tau``."""

    def __init__(self, tau: float = 0.10):
        self.tau = tau

    def fit(self, X=None, y=None):
        if self.tau < 0:
            raise ValueError("tau must be >= 0")
        self.fitted_ = True
        return self

    def transform(self, X):
        return [threshold_sparsify(m, self.tau) for m in check_movies(X)]


class TopKSparsifier(TransformerMixin, BaseEstimator):
    """Keep the ``k`` largest-magnitude pixels (per movie or per frame)."""

    def __init__(self, k: int = 5000, per_frame: bool = False):
        self.k = k
        self.per_frame = per_frame

    def fit(self, X=None, y=None):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        self.fitted_ = True
        return self

    def transform(self, X):
        return [topk_sparsify(m, self.k, self.per_frame) for m in check_movies(X)]


class CnnMaskSparsifier(TransformerMixin, BaseEstimator):
    """Learned low-resolution bubble mask (trained with a Dice loss on ``fit``)."""

    def __init__(self, width: int = 8, epochs: int = 30, lr: float = 1e-2, decision_threshold: float = 0.5, seed: int = 0):
        self.width = width
        self.epochs = epochs
        self.lr = lr
        self.decision_threshold = decision_threshold
        self.seed = seed

    def fit(self, X, y=None):
        movies = check_movies(X)
        dims = movies[0].frames.ndim - 1
        self.mask_ = CnnMask(dims, self.width, self.decision_threshold, self.seed).fit(movies, self.epochs, self.lr)
        return self

    def transform(self, X):
        check_is_fitted(self, "mask_")
        return [cnn_mask_sparsify(m, self.mask_) for m in check_movies(X)]


# ---------------------------------------------------------------------------
# localization models


class ConventionalULM(BaseEstimator):
    """Peak detection, Gaussian fit, Hungarian tracking and accumulation.

    ``n_det=None`` uses the simulated concentration stored in each movie.
    """

    def __init__(self, n_det: int | None = None, max_link: float = 2.0, min_track_len: int = 4, window: int = 2):
        self.n_det = n_det
        self.max_link = max_link
        self.min_track_len = min_track_len
        self.window = window

    def fit(self, X=None, y=None):
        self.config_ = BaselineConfig(self.n_det, self.max_link, self.min_track_len, self.window)
        return self

    def _n_det(self, movie) -> int:
        if self.n_det is not None:
            return int(self.n_det)
        conc = movie.meta.get("concentration")
        if conc is None:
            raise ValueError("n_det not set and movie has no concentration metadata")
        return max(int(round(conc)), 1)

    def track_movie(self, movie):
        check_is_fitted(self, "config_")
        dets = localize_movie(movie.frames, self._n_det(movie), self.window)
        return track(dets, self.config_)

    def predict(self, X) -> list[np.ndarray]:
        out = []
        for m in check_movies(X):
            out.append(accumulate_angiogram(self.track_movie(m), m.upscale, m.gt_raster.shape))
        return out

    def score(self, X, y=None) -> float:
        movies = check_movies(X)
        return pooled_dice(self.predict(movies), movies)


_NETWORKS = {
    "reference_2d": NetworkConfig.reference_2d,
    "framewise_2d": NetworkConfig.framewise_2d,
    "reference_3d": NetworkConfig.reference_3d,
}


class SparseDeepULM(BaseEstimator):
    """Sparse super-resolution network trained end to end on simulated movies.

    Args:
        network: a shipped config name or a :class:`NetworkConfig`.
        tau: input magnitude threshold.
        epochs, lr, milestones, phase1_epochs, dilation, batch_size, cascaded:
            training schedule (see :class:`TrainSchedule`).
        threshold: output probability threshold for the angiogram.
        seed: initialisation and shuffling seed.
    """

    def __init__(
        self,
        network="reference_2d",
        tau: float = 0.10,
        epochs: int = 40,
        lr: float = 1e-3,
        milestones=(),
        phase1_epochs: int = 20,
        dilation=(2, 0),
        batch_size=(8, 8),
        cascaded: bool = True,
        threshold: float = 0.5,
        seed: int = 0,
    ):
        self.network = network
        self.tau = tau
        self.epochs = epochs
        self.lr = lr
        self.milestones = milestones
        self.phase1_epochs = phase1_epochs
        self.dilation = dilation
        self.batch_size = batch_size
        self.cascaded = cascaded
        self.threshold = threshold
        self.seed = seed

    def _config(self) -> NetworkConfig:
        if isinstance(self.network, NetworkConfig):
            return NetworkConfig.from_json(self.network.to_json())
        if self.network not in _NETWORKS:
            raise ValueError(f"unknown network {self.network!r}; choose from {sorted(_NETWORKS)}")
        return _NETWORKS[self.network](seed=self.seed)

    def schedule(self) -> TrainSchedule:
        return TrainSchedule(
            epochs=self.epochs,
            lr=self.lr,
            milestones=tuple(self.milestones),
            phase1_epochs=self.phase1_epochs,
            dilation=tuple(self.dilation),
            batch_size=tuple(self.batch_size),
            cascaded=self.cascaded,
            seed=self.seed,
        )

    def _clips(self, movies, net):
        return [c for i, m in enumerate(movies) for c in make_clips(m, net.cfg.frames, self.tau, i)]

    def init_network(self) -> "SparseDeepULM":
        """Set an untrained network (useful as a reference point)."""
        self.net_ = SparseNet(self._config())
        self.history_ = []
        return self

    def fit(self, X, y=None, callback=None):
        movies = check_movies(X)
        self.init_network()
        res = train(self.net_, self._clips(movies, self.net_), self.schedule(), callback)
        self.history_ = res.history
        self.fit_seconds_ = res.seconds
        return self

    def predict(self, X) -> list[np.ndarray]:
        check_is_fitted(self, "net_")
        out = []
        for m in check_movies(X):
            clips = make_clips(m, self.net_.cfg.frames, self.tau)
            out.append(predict_rasters(self.net_, clips, self.threshold))
        return out

    def score(self, X, y=None) -> float:
        movies = check_movies(X)
        return pooled_dice(self.predict(movies), movies)
