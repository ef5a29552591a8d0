"""End-to-end calibration driver.

Stages, each of which can be the last one run:

``pr``
    Pairwise registration of every camera pair, then tree-chained rotations,
    linearly averaged centres, chained integer offsets and merged identities.
``mi``
    Robust pose-graph refinement over all pairwise edges.
``ba``
    One spatiotemporal bundle adjustment.
``iba``
    Alternating bundle adjustment and pruning of badly reprojecting persons.
"""
from __future__ import annotations

import itertools
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .config import PipelineConfig
from .exceptions import CalibrationError, PreconditionError
from .metrics import association_precision, rotation_error, translation_error, offset_error
from .multiview import (CameraGraph, GlobalAssociation, chain_rotations, consensus_offsets,
                        linear_centers, merge_associations, normalize_gauge, pose_graph_optimize,
                        spanning_tree, _edge_weights, _poses_from)
from .pairwise import register_pair
from .stba import (build_observations, estimate_motion, iterate_stba, prune_associations,
                   reprojection_error, solve_stba, BundleState)

log = logging.getLogger(__name__)


@dataclass
class StageResult:
    name: str
    poses: list
    offsets: np.ndarray
    association: GlobalAssociation
    e2d: float = float("nan")
    metrics: dict = field(default_factory=dict)
    info: dict = field(default_factory=dict)

    def summary(self):
        d = {"E_2D": self.e2d}
        d.update(self.metrics)
        d.update(self.info)
        return d


@dataclass
class PipelineResult:
    config: PipelineConfig
    edges: list = field(default_factory=list)
    stages: dict = field(default_factory=dict)
    completed: bool = False
    error: dict | None = None
    state: BundleState | None = None
    observations: object = None

    def _last(self):
        if not self.stages:
            return None
        return self.stages[list(self.stages)[-1]]

    @property
    def poses(self):
        s = self._last()
        return [] if s is None else s.poses

    @property
    def offsets(self):
        s = self._last()
        return np.zeros(0) if s is None else s.offsets

    @property
    def association(self):
        s = self._last()
        return None if s is None else s.association

    def stage_summaries(self):
        return {k: v.summary() for k, v in self.stages.items()}

    def pair_summaries(self):
        out = []
        for e in self.edges:
            out.append({"source": e.source, "target": e.target, "offset": e.offset,
                        "score": e.score, "translation_residual": e.translation_residual,
                        "matches": [list(m) for m in e.matches()]})
        return out


def _pair_job(args):
    i, j, views, opts, sync, ransac, joints = args
    try:
        return register_pair(views[i], views[j], opts, sync=sync, ransac=ransac, joints=joints)
    except CalibrationError as exc:
        return exc


def register_all_pairs(views, config):
    """Pairwise registration of every camera pair ``(i, j)``, ``i < j``.

    Pairs that fail are skipped (and logged); the order of the returned
    edges does not depend on the number of workers.
    """
    opts = config.registration_options()
    jobs = [(i, j, views, opts, config.sync, config.ransac, config.translation_joints)
            for i, j in itertools.combinations(range(len(views)), 2)]
    n = config.n_workers
    if n > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=n) as pool:
            results = list(pool.map(_pair_job, jobs))
    else:
        results = [_pair_job(j) for j in jobs]
    edges = []
    for (i, j, *_), r in zip(jobs, results):
        if isinstance(r, Exception):
            log.warning("pair (%d, %d) failed: %s", i, j, r)
            continue
        edges.append(r)
    return edges


def _stage_e2d(views, association, poses, offsets, window):
    obs = build_observations(views, association)
    if obs.n == 0:
        return float("nan")
    pts = estimate_motion(obs, poses, [v.intrinsics for v in views], offsets, window)
    state = BundleState(poses, np.asarray(offsets, float), pts, [v.intrinsics for v in views],
                        association, window)
    return reprojection_error(state, obs)


def _metrics(stage, truth):
    if truth is None:
        return {}
    pr = association_precision(stage.association, labels=truth.labels)
    return {"E_R": rotation_error(stage.poses, truth.poses),
            "E_t": translation_error(stage.poses, truth.poses),
            "E_delta": offset_error(stage.offsets, truth.offsets),
            "P": pr.precision, "P_undefined": pr.undefined,
            "matches": pr.estimated}


def drop_groups(association, gids):
    """Association with the given global identities split into singletons."""
    gids = set(int(g) for g in gids)
    labels = {}
    nxt = max(association.labels.values(), default=-1) + 1
    for node, g in sorted(association.labels.items()):
        if g in gids:
            labels[node] = nxt
            nxt += 1
        else:
            labels[node] = g
    return GlobalAssociation(labels, list(association.inconsistent))


def run_pipeline(config, views, truth=None, intermediates=None):
    """Calibrate a rig from per-camera 3D pose tracks.

    Parameters
    ----------
    config : PipelineConfig
    views : list of CameraView
        Camera ``c`` must have ``camera_id == c`` and intrinsics.
    truth : GroundTruth, optional
        Enables per-stage metrics.
    intermediates : str, optional
        Directory where every completed stage is written as a result file.

    Returns
    -------
    PipelineResult
        On a stage failure the exception is re-raised with ``stage`` set and
        ``partial`` holding the result up to the last completed stage.
    """
    from .io import write_result
    config = config or PipelineConfig()
    problem = None
    if len(views) < 2:
        problem = "calibration needs at least two cameras"
    for c, v in enumerate(views):
        if v.camera_id != c:
            problem = f"view {c} has camera id {v.camera_id}"
        elif v.intrinsics is None:
            problem = f"camera {c} has no intrinsics"
    if problem:
        exc = PreconditionError(problem)
        exc.stage = "input"
        raise exc
    result = PipelineResult(config)

    def persist(name):
        if intermediates:
            write_result(os.path.join(intermediates, f"stage_{name}.json"), result)

    def record(stage):
        stage.metrics = _metrics(stage, truth)
        result.stages[stage.name] = stage
        persist(stage.name)

    stage_name = "registration"
    try:
        edges = register_all_pairs(views, config)
        result.edges = edges
        stage_name = "integration"
        graph = CameraGraph(len(views), edges)
        tree = spanning_tree(graph)
        offsets, residuals = consensus_offsets(graph, tree)
        association = merge_associations(graph, [v.person_ids for v in views])
        R0 = chain_rotations(graph, tree)
        c0 = linear_centers(graph, R0, _edge_weights(graph))
        pr_poses = normalize_gauge(_poses_from(R0, c0))
        W = config.motion_window
        record(StageResult("pr", pr_poses, offsets.astype(float), association,
                           _stage_e2d(views, association, pr_poses, offsets, W),
                           info={"offset_residuals": {f"{i}-{j}": r for (i, j), r
                                                      in residuals.items()},
                                 "inconsistent": len(association.inconsistent)}))
        if config.stop_after == "pr":
            result.completed = True
            return result
        pgo = pose_graph_optimize(graph, robust=config.pgo_robust,
                                  loss_scale=config.pgo_loss_scale)
        record(StageResult("mi", pgo.poses, offsets.astype(float), association,
                           _stage_e2d(views, association, pgo.poses, offsets, W),
                           info={"pgo_initial_cost": pgo.initial_cost,
                                 "pgo_final_cost": pgo.final_cost}))
        if config.stop_after == "mi":
            result.completed = True
            return result
        stage_name = "bundle"
        sopts = config.stba_options()
        obs = build_observations(views, association)
        pts = estimate_motion(obs, pgo.poses, [v.intrinsics for v in views], offsets, W)
        state = BundleState(list(pgo.poses), offsets.astype(float), pts,
                            [v.intrinsics for v in views], association, W)
        state = solve_stba(state, obs, sopts)
        record(StageResult("ba", state.poses, state.offsets.copy(), association,
                           reprojection_error(state, obs),
                           info={"cost": state.info["cost"], "n_iter": state.info["n_iter"]}))
        result.state, result.observations = state, obs
        if config.stop_after == "ba":
            result.completed = True
            return result
        removed_all = []
        if config.stba_rounds > 0:
            state, obs, removed = prune_associations(state, obs, sopts.prune_factor,
                                                     sopts.prune_floor)
            removed_all += removed
            if removed and config.stba_rounds > 1:
                state, obs, hist = iterate_stba(state, obs, config.stba_rounds - 1, sopts)
                removed_all += [g for r in hist.rounds for g in r["removed"]]
        final_assoc = drop_groups(association, removed_all)
        record(StageResult("iba", state.poses, state.offsets.copy(), final_assoc,
                           reprojection_error(state, obs),
                           info={"removed": sorted(removed_all)}))
        result.state, result.observations = state, obs
        result.completed = True
        return result
    except CalibrationError as exc:
        exc.stage = stage_name
        result.error = {"stage": exc.stage, "type": type(exc).__name__, "message": str(exc)}
        exc.partial = result
        persist("failed")
        raise
