"""One camera pair: rotation, association, offset and translation direction."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .registration import (RegistrationOptions, em_register, offset_search, paired_windows,
                           ransac_register)
from .translation import matched_bearings, solve_translation

log = logging.getLogger(__name__)


@dataclass
class PairwiseEdge:
    """Relative calibration of camera ``target`` with respect to ``source``.

    ``X_target = rotation @ X_source + s * translation`` for an unknown
    scale ``s > 0``; target frame ``k`` shows the same instant as source
    frame ``k + offset``. ``association[p, q]`` links target person
    ``target_ids[p]`` with source person ``source_ids[q]``.
    """

    source: int
    target: int
    rotation: np.ndarray
    translation: np.ndarray
    offset: int
    association: np.ndarray
    score: float
    source_ids: np.ndarray
    target_ids: np.ndarray
    responsibility: np.ndarray = None
    translation_residual: float = float("nan")
    log_likelihood: float = float("nan")
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.source == self.target:
            raise ValueError("an edge must join two different cameras")

    def matches(self):
        """``[(source local id, target local id), ...]`` of associated persons."""
        rows, cols = np.nonzero(self.association)
        return [(int(self.source_ids[q]), int(self.target_ids[p])) for p, q in zip(rows, cols)]

    def reversed(self):
        """The same relation seen from the other camera."""
        Rt = self.rotation.T
        t = -Rt @ self.translation
        gamma = None if self.responsibility is None else self.responsibility.T
        return PairwiseEdge(self.target, self.source, Rt, t / np.linalg.norm(t), -self.offset,
                            self.association.T.copy(), self.score, self.target_ids,
                            self.source_ids, gamma, self.translation_residual,
                            self.log_likelihood, dict(self.info))


def register_pair(source_view, target_view, opts=None, sync=True, ransac=True, offset=0,
                  init_R=None, joints=None):
    """Full pairwise registration of ``target_view`` against ``source_view``.

    Parameters
    ----------
    sync : bool
        Search the integer offset in ``[-opts.max_offset, opts.max_offset]``;
        otherwise ``offset`` is used as given.
    ransac : bool
        Hypothesise subsets of source persons. Falls back to plain
        registration when the source view has fewer than two persons.
    joints : sequence of int, optional
        Joints feeding the translation solve (all valid joints by default).
    """
    opts = opts or RegistrationOptions()
    if ransac and source_view.n_persons < max(opts.subset_size, 2):
        log.info("camera %s has %d person(s); skipping RANSAC", source_view.camera_id,
                 source_view.n_persons)
        ransac = False
    if ransac:
        res = ransac_register(source_view, target_view, opts, sync=sync, offset=offset)
    elif sync:
        _, res, _ = offset_search(source_view, target_view, opts, init_R=init_R)
    else:
        src, tgt = paired_windows(source_view, target_view, offset, opts.window, opts.stride)
        res = em_register(src, tgt, init_R, opts)
        res.offset = int(offset)
    system = matched_bearings(source_view, target_view, res.association, res.offset,
                              res.responsibility, joints)
    tr = solve_translation(system, res.rotation)
    return PairwiseEdge(int(source_view.camera_id), int(target_view.camera_id), res.rotation,
                        tr.direction, int(res.offset), res.association, float(res.score),
                        np.asarray(res.source_ids), np.asarray(res.target_ids),
                        res.responsibility, tr.residual, res.log_likelihood,
                        {"n_iter": res.n_iter, "converged": res.converged,
                         "cheirality": tr.votes})
