"""Spatiotemporal bundle adjustment.

Every joint of every global person is modelled, over short windows of ``W``
world frames, as moving linearly: ``X(tau) = X + (tau - tau0) V``. Camera
``c`` observes world time ``k + delta_c`` at its local frame ``k``, so the
reprojection of an observation depends on the camera pose, the camera's
continuous offset and the window's ``(X, V)``. All of them are refined with
a damped Gauss-Newton (Levenberg-Marquardt) solver that eliminates the point
blocks through the Schur complement. Camera 0 is frozen as the gauge and the
camera 0-1 baseline is rescaled to one after each solve.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from .exceptions import DegenerateGeometry, InsufficientObservations, NonPositiveDepth
from .geometry import DEPTH_EPS, CameraPose, exp_map, hat

log = logging.getLogger(__name__)

HUBER_DELTA = 3.0
MOTION_WINDOW = 5


@dataclass(frozen=True)
class StbaOptions:
    window: int = MOTION_WINDOW
    huber: float | None = HUBER_DELTA
    max_iter: int = 100
    rel_tol: float = 1e-8
    abs_tol: float = 1e-12
    lambda0: float = 1e-3
    lambda_max: float = 1e12
    optimize_offsets: bool = True
    offset_bound: float | None = 1.0
    optimize_poses: bool = True
    max_rounds: int = 10
    prune_factor: float = 3.0
    prune_floor: float = 1.0


class Observations(NamedTuple):
    """Flat arrays of 2D joint observations."""

    camera: np.ndarray
    frame: np.ndarray  # local frame index in the observing camera
    gid: np.ndarray
    joint: np.ndarray
    uv: np.ndarray  # (n, 2)
    local: np.ndarray  # local person id in the observing camera

    @property
    def n(self):
        return len(self.camera)

    def subset(self, mask):
        return Observations(*(a[mask] for a in self))


class StructurePoints(NamedTuple):
    key: np.ndarray  # (n, 3) int: global id, joint, window
    X: np.ndarray  # (n, 3) world position at tau0
    V: np.ndarray  # (n, 3) world motion per frame
    tau0: np.ndarray  # (n,) reference world time

    @property
    def n(self):
        return len(self.key)

    def subset(self, mask):
        return StructurePoints(*(a[mask] for a in self))


@dataclass
class BundleState:
    poses: list
    offsets: np.ndarray
    points: StructurePoints
    intrinsics: list
    association: object = None
    window: int = MOTION_WINDOW
    info: dict = field(default_factory=dict)

    def copy(self, **kw):
        return replace(self, **kw)


# -- observations ------------------------------------------------------------

def build_observations(views, association, min_cameras=2):
    """2D observations of every joint of every global person seen by at
    least ``min_cameras`` cameras.

    Pixels are the projections of the views' camera-frame joint positions
    through each camera's intrinsics.
    """
    groups = association.matched_groups() if min_cameras >= 2 else association.members()
    parts = []
    for gid, members in groups.items():
        if len(members) < min_cameras:
            continue
        for c, pid in members.items():
            v = views[c]
            rows = np.flatnonzero(v.person_ids == pid)
            if len(rows) == 0:
                continue
            uv, ok = v.pixels()
            ok = ok[rows[0]]
            f, s = np.nonzero(ok)
            n = len(f)
            parts.append((np.full(n, c), f + v.frame0, np.full(n, gid), s,
                          uv[rows[0]][f, s], np.full(n, pid)))
    if not parts:
        e = np.zeros(0, dtype=int)
        return Observations(e, e, e, e, np.zeros((0, 2)), e)
    cols = list(zip(*parts))
    return Observations(*(np.concatenate(c) for c in cols[:4]),
                        np.concatenate(cols[4]).reshape(-1, 2), np.concatenate(cols[5]))


def window_index(obs, offsets, W):
    """Window of each observation under the frozen rounding of the offsets."""
    n = obs.frame + np.rint(np.asarray(offsets)[obs.camera]).astype(int)
    return np.floor_divide(n, W)


def observation_keys(obs, offsets, W):
    return np.stack([obs.gid, obs.joint, window_index(obs, offsets, W)], axis=1)


def _lookup(point_keys, obs_keys):
    table = {tuple(k): i for i, k in enumerate(point_keys.tolist())}
    return np.array([table.get(tuple(k), -1) for k in obs_keys.tolist()], dtype=int)


# -- motion model and residuals ------------------------------------------------

def obs_times(obs, offsets):
    return obs.frame + np.asarray(offsets, dtype=float)[obs.camera]


def _camera_arrays(poses, intrinsics):
    R = np.array([p.R for p in poses])
    t = np.array([p.t for p in poses])
    f = np.array([[K.fx, K.fy] for K in intrinsics])
    c = np.array([[K.cx, K.cy] for K in intrinsics])
    return R, t, f, c


def _predict(R, t, f, c, offsets, points, obs, idx):
    dt = obs_times(obs, offsets) - points.tau0[idx]
    Xw = points.X[idx] + dt[:, None] * points.V[idx]
    Rc = R[obs.camera]
    Y = np.einsum("nij,nj->ni", Rc, Xw) + t[obs.camera]
    z = Y[:, 2]
    safe = np.where(z > DEPTH_EPS, z, 1.0)
    uv = f[obs.camera] * Y[:, :2] / safe[:, None] + c[obs.camera]
    return uv, Y, Xw, dt, z


def residuals(state, obs, idx=None):
    """Pixel residuals ``project(X + (tau - tau0) V) - uv`` for all
    observations. Returns ``(r, ok)``; ``ok`` is False for observations
    without a structure point or at non-positive depth."""
    if idx is None:
        idx = _lookup(state.points.key, observation_keys(obs, state.offsets, state.window))
    has = idx >= 0
    R, t, f, c = _camera_arrays(state.poses, state.intrinsics)
    r = np.full((obs.n, 2), np.nan)
    if has.any():
        o = obs.subset(has)
        uv, _, _, _, z = _predict(R, t, f, c, state.offsets, state.points, o, idx[has])
        rr = uv - o.uv
        rr[z <= DEPTH_EPS] = np.nan
        r[has] = rr
    ok = np.all(np.isfinite(r), axis=1)
    return r, ok


def residual(ob, state):
    """Residual of a single observation ``(camera, frame, gid, joint, (u, v))``."""
    cam, frame, gid, joint, uv = ob
    obs = Observations(np.array([cam]), np.array([frame]), np.array([gid]), np.array([joint]),
                       np.asarray(uv, dtype=float).reshape(1, 2), np.array([-1]))
    idx = _lookup(state.points.key, observation_keys(obs, state.offsets, state.window))
    if idx[0] < 0:
        raise KeyError(f"no structure point for person {gid}, joint {joint}")
    R, t, f, c = _camera_arrays(state.poses, state.intrinsics)
    uv_hat, _, _, _, z = _predict(R, t, f, c, state.offsets, state.points, obs, idx)
    if z[0] <= DEPTH_EPS:
        raise NonPositiveDepth("observation projects from behind the camera")
    return uv_hat[0] - obs.uv[0]


def jacobians(R, t, f, offsets, points, obs, idx):
    """Analytic residual Jacobians.

    Returns
    -------
    Jc : ndarray (n, 2, 7)
        Derivatives with respect to the observing camera's
        ``(omega, t, delta)``, with left-multiplicative rotation updates.
    Jp : ndarray (n, 2, 6)
        Derivatives with respect to the point's ``(X, V)``.
    """
    c0 = np.zeros_like(f)
    _, Y, Xw, dt, z = _predict(R, t, f, c0, offsets, points, obs, idx)
    fx, fy = f[obs.camera, 0], f[obs.camera, 1]
    Jproj = np.zeros((obs.n, 2, 3))
    Jproj[:, 0, 0] = fx / z
    Jproj[:, 0, 2] = -fx * Y[:, 0] / z**2
    Jproj[:, 1, 1] = fy / z
    Jproj[:, 1, 2] = -fy * Y[:, 1] / z**2
    Rc = R[obs.camera]
    RX = Y - t[obs.camera]
    skew = np.zeros((obs.n, 3, 3))
    skew[:, 0, 1], skew[:, 0, 2] = RX[:, 2], -RX[:, 1]
    skew[:, 1, 0], skew[:, 1, 2] = -RX[:, 2], RX[:, 0]
    skew[:, 2, 0], skew[:, 2, 1] = RX[:, 1], -RX[:, 0]
    dY_cam = np.concatenate([skew, np.broadcast_to(np.eye(3), skew.shape),
                             np.einsum("nij,nj->ni", Rc, points.V[idx])[:, :, None]], axis=2)
    dY_pt = np.concatenate([Rc, dt[:, None, None] * Rc], axis=2)
    return Jproj @ dY_cam, Jproj @ dY_pt


def _huber_weights(norms, delta):
    if delta is None:
        return np.ones_like(norms)
    return np.where(norms <= delta, 1.0, delta / np.maximum(norms, 1e-300))


def robust_cost(norms, delta):
    if delta is None:
        return 0.5 * float(np.sum(norms**2))
    quad = norms <= delta
    return float(np.sum(np.where(quad, 0.5 * norms**2, delta * (norms - 0.5 * delta))))


# -- linear motion estimate -----------------------------------------------------

def _ray_directions(poses, intrinsics, obs):
    out = np.zeros((obs.n, 3))
    for c in np.unique(obs.camera):
        m = obs.camera == c
        K = intrinsics[c]
        out[m] = K.unproject(obs.uv[m]) @ poses[c].R
    return out


def fit_linear_motion(centers, directions, times, tau0, groups, n_groups, rcond=1e-9):
    """Batched least-squares fit of ``X + (tau - tau0) V`` to rays.

    Each ray ``(o, d)`` observed at time ``tau`` contributes the squared
    distance from the model point to the ray, which is linear in ``(X, V)``.
    Returns ``(X, V, ok)`` with ``ok`` False for underdetermined groups.
    """
    P = np.eye(3) - directions[:, :, None] * directions[:, None, :]
    a = times - tau0[groups]
    A = np.zeros((n_groups, 6, 6))
    b = np.zeros((n_groups, 6))
    blocks = np.empty((len(a), 6, 6))
    blocks[:, :3, :3] = P
    blocks[:, :3, 3:] = a[:, None, None] * P
    blocks[:, 3:, :3] = a[:, None, None] * P
    blocks[:, 3:, 3:] = (a**2)[:, None, None] * P
    Po = np.einsum("nij,nj->ni", P, centers)
    rhs = np.concatenate([Po, a[:, None] * Po], axis=1)
    np.add.at(A, groups, blocks)
    np.add.at(b, groups, rhs)
    ev = np.linalg.eigvalsh(A)
    ok = ev[:, 0] > rcond * np.maximum(ev[:, -1], 1e-300)
    sol = np.full((n_groups, 6), np.nan)
    if ok.any():
        sol[ok] = np.linalg.solve(A[ok], b[ok][..., None])[..., 0]
    return sol[:, :3], sol[:, 3:], ok


def estimate_motion(obs, poses, intrinsics, offsets, window=MOTION_WINDOW, min_cameras=2):
    """Linear-motion structure ``(X, V)`` per (person, joint, window).

    Windows are blocks of ``window`` world frames; observations are placed by
    the rounded camera offsets, and each window's reference time is its
    centre. Points seen by fewer than ``min_cameras`` cameras, or whose
    linear system is singular, are omitted.

    Returns
    -------
    StructurePoints
    """
    offsets = np.asarray(offsets, dtype=float)
    if obs.n == 0:
        return StructurePoints(np.zeros((0, 3), dtype=int), np.zeros((0, 3)), np.zeros((0, 3)),
                               np.zeros(0))
    keys = observation_keys(obs, offsets, window)
    uniq, inv = np.unique(keys, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    ncam = np.zeros(len(uniq), dtype=int)
    seen = np.unique(np.stack([inv, obs.camera], axis=1), axis=0)
    np.add.at(ncam, seen[:, 0], 1)
    tau0 = uniq[:, 2] * window + 0.5 * (window - 1)
    centers = np.array([p.center for p in poses])[obs.camera]
    dirs = _ray_directions(poses, intrinsics, obs)
    X, V, ok = fit_linear_motion(centers, dirs, obs_times(obs, offsets), tau0, inv, len(uniq))
    keep = ok & (ncam >= min_cameras)
    return StructurePoints(uniq[keep], X[keep], V[keep], tau0[keep])


def estimate_joint_motion(rays, times, tau0=None):
    """Fit ``(X, V)`` for one joint from ``[(center, direction), ...]`` rays.

    Raises
    ------
    DegenerateGeometry
        When the rays do not determine both position and motion.
    """
    centers = np.asarray([r[0] for r in rays], dtype=float)
    dirs = np.asarray([r[1] for r in rays], dtype=float)
    dirs = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    times = np.asarray(times, dtype=float)
    tau0 = float(np.mean(times)) if tau0 is None else float(tau0)
    X, V, ok = fit_linear_motion(centers, dirs, times, np.array([tau0]),
                                 np.zeros(len(times), dtype=int), 1)
    if not ok[0]:
        raise DegenerateGeometry("rays do not determine a linear motion")
    return X[0], V[0]


def initial_state(views, association, poses, offsets, window=MOTION_WINDOW, obs=None):
    """Bundle state with structure estimated from the given rig."""
    intr = [v.intrinsics for v in views]
    obs = build_observations(views, association) if obs is None else obs
    pts = estimate_motion(obs, poses, intr, offsets, window)
    return BundleState(list(poses), np.asarray(offsets, dtype=float), pts, intr, association,
                       window), obs


# -- Levenberg-Marquardt ---------------------------------------------------------

def _apply(state, dcam, dpt, free, bounds=None):
    poses = list(state.poses)
    offsets = state.offsets.copy()
    for k, c in enumerate(free):
        w, dt, dd = dcam[k, :3], dcam[k, 3:6], dcam[k, 6]
        p = poses[c]
        poses[c] = CameraPose(exp_map(w) @ p.R, p.t + dt)
        offsets[c] += dd
    if bounds is not None:
        offsets = np.clip(offsets, bounds[0], bounds[1])
    pts = state.points._replace(X=state.points.X + dpt[:, :3], V=state.points.V + dpt[:, 3:])
    return state.copy(poses=poses, offsets=offsets, points=pts)


def _normal_equations(state, obs, idx, opts, free):
    R, t, f, c = _camera_arrays(state.poses, state.intrinsics)
    uv, _, _, _, z = _predict(R, t, f, c, state.offsets, state.points, obs, idx)
    r = uv - obs.uv
    norms = np.linalg.norm(r, axis=1)
    w = _huber_weights(norms, opts.huber)
    Jc, Jp = jacobians(R, t, f, state.offsets, state.points, obs, idx)
    if not opts.optimize_offsets:
        Jc[:, :, 6] = 0.0
    if not opts.optimize_poses:
        Jc[:, :, :6] = 0.0
    npt = state.points.n
    ncf = len(free)
    cam_slot = np.full(len(state.poses), -1)
    cam_slot[free] = np.arange(ncf)
    slot = cam_slot[obs.camera]
    wJp = w[:, None, None] * Jp
    Vb = np.zeros((npt, 6, 6))
    gp = np.zeros((npt, 6))
    np.add.at(Vb, idx, np.einsum("nki,nkj->nij", wJp, Jp))
    np.add.at(gp, idx, np.einsum("nki,nk->ni", wJp, r))
    U = np.zeros((ncf, 7, 7))
    gc = np.zeros((ncf, 7))
    Wb = np.zeros((ncf * npt, 7, 6))
    m = slot >= 0
    if m.any():
        wJc = w[m, None, None] * Jc[m]
        np.add.at(U, slot[m], np.einsum("nki,nkj->nij", wJc, Jc[m]))
        np.add.at(gc, slot[m], np.einsum("nki,nk->ni", wJc, r[m]))
        np.add.at(Wb, slot[m] * npt + idx[m], np.einsum("nki,nkj->nij", wJc, Jp[m]))
    return U, gc, Wb.reshape(ncf, npt, 7, 6), Vb, gp, robust_cost(norms, opts.huber)


def _solve_damped(U, gc, Wb, Vb, gp, lam):
    ncf, npt = Wb.shape[:2]
    eye6 = np.eye(6)
    dV = np.einsum("nii->ni", Vb)
    Vd = Vb + lam * (dV[:, :, None] * eye6) + 1e-12 * eye6
    Vinv = np.linalg.inv(Vd)
    if ncf == 0:
        return np.zeros((0, 7)), -np.einsum("nij,nj->ni", Vinv, gp)
    dU = np.einsum("cii->ci", U)
    eye7 = np.eye(7)
    Ud = U + lam * (dU[:, :, None] * eye7) + 1e-12 * eye7
    Y = np.einsum("cpij,pjk->cpik", Wb, Vinv)  # W V^-1
    S = -np.einsum("apij,bpkj->aibk", Y, Wb)
    for a in range(ncf):
        S[a, :, a, :] += Ud[a]
    rhs = -gc + np.einsum("cpij,pj->ci", Y, gp)
    S = S.reshape(7 * ncf, 7 * ncf)
    try:
        dc = np.linalg.solve(S, rhs.reshape(-1)).reshape(ncf, 7)
    except np.linalg.LinAlgError:
        dc = np.linalg.lstsq(S, rhs.reshape(-1), rcond=None)[0].reshape(ncf, 7)
    dp = -np.einsum("pij,pj->pi", Vinv, gp + np.einsum("cpij,ci->pj", Wb, dc))
    return dc, dp


def _cost(state, obs, idx, opts):
    R, t, f, c = _camera_arrays(state.poses, state.intrinsics)
    uv, _, _, _, z = _predict(R, t, f, c, state.offsets, state.points, obs, idx)
    if np.any(z <= DEPTH_EPS):
        return np.inf
    return robust_cost(np.linalg.norm(uv - obs.uv, axis=1), opts.huber)


def rescale_baseline(state):
    """Scale the scene about camera 0's centre so the camera 0-1 baseline has
    unit length; camera 0's pose is left untouched."""
    if len(state.poses) < 2:
        return state
    c0 = state.poses[0].center
    base = np.linalg.norm(state.poses[1].center - c0)
    if base < 1e-12:
        return state
    s = 1.0 / base
    poses = [p if k == 0 else CameraPose(p.R, s * (p.t + p.R @ c0) - p.R @ c0)
             for k, p in enumerate(state.poses)]
    pts = state.points._replace(X=c0 + s * (state.points.X - c0), V=state.points.V * s)
    return state.copy(poses=poses, points=pts)


def _prepare(state, obs):
    """Attach observations to points, filling in points missing from the
    state, and keep points seen by at least two cameras."""
    keys = observation_keys(obs, state.offsets, state.window)
    idx = _lookup(state.points.key, keys)
    missing = idx < 0
    if missing.any():
        extra = estimate_motion(obs.subset(missing), state.poses, state.intrinsics, state.offsets,
                                state.window)
        if extra.n:
            pts = StructurePoints(*(np.concatenate([a, b]) for a, b in zip(state.points, extra)))
            state = state.copy(points=pts)
            idx = _lookup(state.points.key, keys)
    # drop points without two observing cameras
    used = idx >= 0
    pairs = np.unique(np.stack([idx[used], obs.camera[used]], axis=1), axis=0)
    ncam = np.bincount(pairs[:, 0], minlength=state.points.n) if len(pairs) else \
        np.zeros(state.points.n, dtype=int)
    good = ncam >= 2
    remap = np.full(state.points.n, -1)
    remap[good] = np.arange(good.sum())
    state = state.copy(points=state.points.subset(good))
    idx = np.where(idx >= 0, remap[np.maximum(idx, 0)], -1)
    return state, idx


def solve_stba(state, obs, opts=None):
    """Refine poses, offsets and linear-motion structure.

    Parameters
    ----------
    state : BundleState
    obs : Observations
    opts : StbaOptions, optional

    Returns
    -------
    BundleState
        ``info`` carries the per-iteration cost history, the iteration count
        and the final robust cost.

    Raises
    ------
    InsufficientObservations
        When no structure point is seen by two cameras.
    """
    opts = opts or StbaOptions()
    state, idx = _prepare(state, obs)
    use = idx >= 0
    if state.points.n == 0 or not use.any():
        raise InsufficientObservations("no joint is observed by two cameras")
    obs_u, idx_u = obs.subset(use), idx[use]
    free = list(range(1, len(state.poses)))
    bounds = None
    if opts.offset_bound is not None:
        # far from the offsets used to cut the windows, a window's velocity
        # would act as a free per-camera shift and absorb anything
        bounds = (state.offsets - opts.offset_bound, state.offsets + opts.offset_bound)
    lam = opts.lambda0
    cost = _cost(state, obs_u, idx_u, opts)
    history = [cost]
    it = 0
    for it in range(1, opts.max_iter + 1):
        U, gc, Wb, Vb, gp, _ = _normal_equations(state, obs_u, idx_u, opts, free)
        accepted = False
        while lam <= opts.lambda_max:
            dc, dp = _solve_damped(U, gc, Wb, Vb, gp, lam)
            if not (np.all(np.isfinite(dc)) and np.all(np.isfinite(dp))):
                lam *= 10.0
                continue
            cand = _apply(state, dc, dp, free, bounds)
            new = _cost(cand, obs_u, idx_u, opts)
            if new < cost:
                accepted = True
                break
            lam *= 10.0
        if not accepted:
            break
        gain = cost - new
        rel = gain / max(cost, 1e-300)
        state, cost = cand, new
        history.append(cost)
        lam = max(lam / 10.0, 1e-12)
        if rel < opts.rel_tol or gain < opts.abs_tol:
            break
    state = rescale_baseline(state)
    info = dict(state.info)
    info.update(history=history, n_iter=it, cost=history[-1], n_obs=int(use.sum()))
    return state.copy(info=info)


def reprojection_error(state, obs):
    """Mean pixel residual norm over observations with a structure point."""
    r, ok = residuals(state, obs)
    if not ok.any():
        return float("nan")
    return float(np.linalg.norm(r[ok], axis=1).mean())


def person_errors(state, obs):
    """Mean residual norm per global person id: ``{gid: error}``."""
    r, ok = residuals(state, obs)
    norms = np.linalg.norm(np.where(ok[:, None], r, 0.0), axis=1)
    out = {}
    for g in np.unique(obs.gid[ok]):
        m = ok & (obs.gid == g)
        out[int(g)] = float(norms[m].mean())
    return out


def prune_associations(state, obs, factor=3.0, floor=1.0):
    """Drop global persons whose mean reprojection error exceeds
    ``max(factor * median, floor)`` over all persons.

    Returns
    -------
    state : BundleState
        Survivors only, with structure re-estimated from the current rig.
    obs : Observations
        Observations of the survivors.
    removed : list of int
        Removed global ids.
    """
    errs = person_errors(state, obs)
    if len(errs) <= 1:
        return state, obs, []
    med = float(np.median(list(errs.values())))
    thr = max(factor * med, floor)
    removed = sorted(g for g, e in errs.items() if e > thr)
    if not removed:
        return state, obs, []
    keep = ~np.isin(obs.gid, removed)
    obs = obs.subset(keep)
    pts = estimate_motion(obs, state.poses, state.intrinsics, state.offsets, state.window)
    info = dict(state.info)
    info["pruned_threshold"] = thr
    return state.copy(points=pts, info=info), obs, removed


@dataclass
class IterationLog:
    rounds: list = field(default_factory=list)

    def append(self, **kw):
        self.rounds.append(kw)


def iterate_stba(state, obs, max_rounds=None, opts=None):
    """Alternate bundle adjustment and association pruning.

    Stops after a round without removals or after ``max_rounds`` rounds.

    Returns
    -------
    state : BundleState
    obs : Observations
        Surviving observations.
    log : IterationLog
    """
    opts = opts or StbaOptions()
    max_rounds = opts.max_rounds if max_rounds is None else max_rounds
    history = IterationLog()
    for k in range(max_rounds):
        state = solve_stba(state, obs, opts)
        state, obs, removed = prune_associations(state, obs, opts.prune_factor, opts.prune_floor)
        history.append(round=k, cost=state.info.get("cost"), n_iter=state.info.get("n_iter"),
                       removed=removed, e2d=reprojection_error(state, obs))
        log.info("STBA round %d: cost %.6g, removed %s", k, state.info.get("cost"), removed)
        if not removed:
            break
    return state, obs, history
