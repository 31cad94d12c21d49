"""scikit-learn style wrappers around carving and wind advection.

``VolumeCarver`` is stateless: ``fit`` only validates hyper-parameters and
``transform`` maps a list of posed depth maps to a grid. ``WindAdvection``
learns a wind from a frame sequence and integrates sequences with it.
"""

from __future__ import annotations

from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .advection import SequenceConfig, WindProfile, fit_wind, integrate, wind_objective
from .carving import (
    DEFAULT_FILL_VALUE,
    CarveConfig,
    carving_to_density,
    depth_carve,
    silhouette_carve,
    tsdf_fuse,
    tsdf_to_carving,
)
from .exceptions import ConfigError
from .synthetic import render_silhouette
from .validation import check_domain, check_frames, check_positive, check_views
from .volume import GridDomain

__all__ = ["VolumeCarver", "WindAdvection"]

METHODS = ("depth", "silhouette", "tsdf")


class VolumeCarver(TransformerMixin, BaseEstimator):
    """Coarse volume from posed depth maps.

    method: ``"depth"`` (signed-distance carving with margin ``epsilon``),
    ``"silhouette"`` (visual hull of depth < ``silhouette_threshold``) or
    ``"tsdf"`` (fused truncated distance >= 0).
    """

    def __init__(self, domain=None, method: str = "depth", epsilon: float = 1000.0, min_views: int = 1,
                 silhouette_threshold: float = 20000.0, truncation: float = 1000.0,
                 fill_value: float | None = DEFAULT_FILL_VALUE):
        self.domain = domain
        self.method = method
        self.epsilon = epsilon
        self.min_views = min_views
        self.silhouette_threshold = silhouette_threshold
        self.truncation = truncation
        self.fill_value = fill_value

    def _validate(self):
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        domain = GridDomain() if self.domain is None else check_domain(self.domain)
        check_positive("silhouette_threshold", self.silhouette_threshold)
        check_positive("truncation", self.truncation)
        if self.fill_value is not None:
            check_positive("fill_value", self.fill_value, allow_zero=True)
        return domain, CarveConfig(epsilon=float(self.epsilon), min_views=int(self.min_views))

    def fit(self, X=None, y=None):
        self.domain_, self.carve_config_ = self._validate()
        return self

    def transform(self, X):
        """``X`` is a list of ``(camera, depth_map)`` views.

        Returns a CarvingGrid, or a DensityGrid when ``fill_value`` is set.
        """
        check_is_fitted(self, "domain_")
        cams, depths = check_views(X)
        if self.method == "depth":
            carving = depth_carve(self.domain_, cams, depths, self.carve_config_)
        elif self.method == "silhouette":
            masks = [render_silhouette(d, self.silhouette_threshold) for d in depths]
            carving = silhouette_carve(self.domain_, cams, masks)
        else:
            carving = tsdf_to_carving(self.domain_, tsdf_fuse(self.domain_, cams, depths, self.truncation))
        if self.fill_value is None:
            return carving
        return carving_to_density(carving, float(self.fill_value))


class WindAdvection(TransformerMixin, BaseEstimator):
    """Fits a constant horizontal wind to a frame sequence and integrates frames with it."""

    def __init__(self, frame_interval: float = 5.0, u_max: float = 30.0, coarse_step: float = 2.0,
                 refine_step: float = 0.25, boundary: str = "interior"):
        self.frame_interval = frame_interval
        self.u_max = u_max
        self.coarse_step = coarse_step
        self.refine_step = refine_step
        self.boundary = boundary

    def _config(self, window: int = 1) -> SequenceConfig:
        return SequenceConfig(frame_interval=float(self.frame_interval), window=window, u_max=float(self.u_max),
                              coarse_step=float(self.coarse_step), refine_step=float(self.refine_step),
                              boundary=self.boundary)

    def fit(self, X, y=None):
        frames = check_frames(X)
        cfg = self._config(len(frames))
        self.wind_: WindProfile = fit_wind(frames, cfg)
        self.u_ = self.wind_.u
        self.v_ = self.wind_.v
        self.objective_ = self.wind_.objective
        self.n_evaluations_ = self.wind_.evaluations
        self.n_frames_ = len(frames)
        self.domain_ = frames[0].domain
        return self

    def transform(self, X):
        """Integrate ``X`` to its center time with the fitted wind."""
        check_is_fitted(self, "wind_")
        frames = check_frames(X, self.domain_)
        return integrate(frames, self.wind_, self._config(len(frames)))

    def score(self, X, y=None) -> float:
        """Negative mean variance of ``X`` advected with the fitted wind (higher is better)."""
        check_is_fitted(self, "wind_")
        frames = check_frames(X, self.domain_)
        return -wind_objective(frames, self.u_, self.v_, self._config(len(frames)))
