"""Estimator-style wrappers around the pairwise and multi-camera solvers."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .config import PipelineConfig
from .pairwise import register_pair
from .pipeline import run_pipeline
from .registration import RegistrationOptions
from .validation import check_scalar, check_view, check_views


class PairwiseRegistration(BaseEstimator):
    """Register one camera against another.

    Parameters
    ----------
    window : int
        Frames per vMF window.
    max_offset : int
        Half-width of the integer offset search.
    sync : bool
        Search the offset; otherwise ``offset`` is used.
    offset : int
        Known offset when ``sync`` is False.
    ransac : bool
        Hypothesise pairs of source persons before refining.
    theta_match : float
        Association gate in radians of mean angular cost.
    init : {"tetrahedral", "single", "random"}
    seed : int

    Attributes
    ----------
    rotation_ : ndarray (3, 3)
        Maps source-camera directions into the target camera.
    translation_ : ndarray (3,)
        Unit direction of the target-from-source translation.
    offset_ : int
        Target frame ``k`` shows the same instant as source frame ``k + offset_``.
    association_ : ndarray (n_target, n_source)
    responsibility_ : ndarray (n_target, n_source)
    score_ : float
        Mean truncated angular cost of the matched persons.
    edge_ : PairwiseEdge
    """

    def __init__(self, window=5, max_offset=10, sync=True, offset=0, ransac=True,
                 theta_match=0.5, init="tetrahedral", seed=0):
        self.window = window
        self.max_offset = max_offset
        self.sync = sync
        self.offset = offset
        self.ransac = ransac
        self.theta_match = theta_match
        self.init = init
        self.seed = seed

    def _options(self):
        check_scalar(self.window, "window", lo=1, integer=True)
        check_scalar(self.max_offset, "max_offset", lo=0, integer=True)
        check_scalar(self.theta_match, "theta_match", lo=0.0, hi=np.pi)
        return RegistrationOptions(window=self.window, max_offset=self.max_offset,
                                   theta_match=self.theta_match, init=self.init, seed=self.seed)

    def fit(self, X, y):
        """Fit with ``X`` the source view and ``y`` the target view."""
        source = check_view(X, "source view")
        target = check_view(y, "target view")
        edge = register_pair(source, target, self._options(), sync=self.sync,
                             ransac=self.ransac, offset=self.offset)
        self.edge_ = edge
        self.rotation_ = edge.rotation
        self.translation_ = edge.translation
        self.offset_ = edge.offset
        self.association_ = edge.association
        self.responsibility_ = edge.responsibility
        self.score_ = edge.score
        return self

    def _check_fitted(self):
        if not hasattr(self, "rotation_"):
            raise NotFittedError("call fit before using this estimator")

    def transform(self, X, scale=1.0):
        """Map source-camera points ``(..., 3)`` into the target camera,
        taking ``scale`` as the (unknown) baseline length."""
        self._check_fitted()
        X = np.asarray(X, dtype=float)
        return X @ self.rotation_.T + scale * self.translation_

    def predict(self, X=None):
        """Matched person ids: ``[(source id, target id), ...]``."""
        self._check_fitted()
        return self.edge_.matches()

    def score(self, X=None, y=None):
        """Negative matching cost (higher is better)."""
        self._check_fitted()
        return -self.score_


class MultiCameraCalibrator(BaseEstimator):
    """Calibrate a whole rig; parameters mirror :class:`PipelineConfig`.

    Attributes
    ----------
    poses_ : list of CameraPose
        World-to-camera poses; camera 0 is the world frame.
    offsets_ : ndarray
        Continuous per-camera offsets in frames, ``offsets_[0] == 0``.
    global_association_ : GlobalAssociation
    stages_ : dict
        Per-stage summaries.
    result_ : PipelineResult
    """

    def __init__(self, window=5, max_offset=10, sync=True, ransac=True, theta_match=0.5,
                 stba_rounds=10, stop_after=None, seed=0, workers=None):
        self.window = window
        self.max_offset = max_offset
        self.sync = sync
        self.ransac = ransac
        self.theta_match = theta_match
        self.stba_rounds = stba_rounds
        self.stop_after = stop_after
        self.seed = seed
        self.workers = workers

    def _config(self):
        return PipelineConfig(window=self.window, max_offset=self.max_offset, sync=self.sync,
                              ransac=self.ransac, theta_match=self.theta_match,
                              stba_rounds=self.stba_rounds, stop_after=self.stop_after,
                              seed=self.seed, workers=self.workers)

    def fit(self, X, y=None):
        """Fit on a list of camera views; ``y`` may be a ground-truth bundle
        used only for the per-stage metrics."""
        views = check_views(X)
        res = run_pipeline(self._config(), views, truth=y)
        self.result_ = res
        self.poses_ = res.poses
        self.offsets_ = np.asarray(res.offsets, dtype=float)
        self.global_association_ = res.association
        self.stages_ = res.stage_summaries()
        return self

    def predict(self, X=None):
        """Global identity labels ``{(camera, local id): global id}``."""
        if not hasattr(self, "global_association_"):
            raise NotFittedError("call fit before using this estimator")
        return dict(self.global_association_.labels)
