import numpy as np
import pytest

from posecalib.exceptions import DegenerateGeometry, InsufficientObservations
from posecalib.geometry import CameraPose, exp_map
from posecalib.metrics import association_precision
from posecalib.pipeline import drop_groups
from posecalib.stba import (BundleState, StbaOptions, _camera_arrays, _lookup, _predict,
                            build_observations, estimate_joint_motion, estimate_motion,
                            initial_state, iterate_stba, jacobians, observation_keys,
                            person_errors, prune_associations, reprojection_error, residual,
                            residuals, solve_stba)
from posecalib.synth import SceneSpec, generate

from .helpers import truth_association


def gt_state(scene, offsets=None, poses=None):
    t = scene.truth
    return initial_state(scene.views, truth_association(t), poses or t.poses,
                         t.offsets if offsets is None else offsets)


@pytest.fixture(scope="module")
def lin4():
    return generate(SceneSpec(n_cameras=4, n_people=3, n_frames=40, offsets=(0, 2, -1, 3),
                              motion="linear", seed=8))


def test_noiseless_residual_is_zero(linear_scene):
    state, obs = gt_state(linear_scene)
    r, ok = residuals(state, obs)
    assert ok.all() and np.abs(r).max() < 1e-6
    ob = (obs.camera[5], obs.frame[5], obs.gid[5], obs.joint[5], obs.uv[5])
    assert np.abs(residual(ob, state)).max() < 1e-6


def test_static_point_ignores_offset(linear_scene):
    state, obs = gt_state(linear_scene)
    still = state.copy(points=state.points._replace(V=np.zeros_like(state.points.V)))
    r0, _ = residuals(still, obs)
    shifted = still.offsets.copy()
    shifted[1] += 0.3
    idx = _lookup(still.points.key, observation_keys(obs, still.offsets, still.window))
    r1, _ = residuals(still.copy(offsets=shifted), obs, idx)
    np.testing.assert_allclose(r1, r0, atol=1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_jacobians_match_finite_differences(lin4, seed):
    rng = np.random.default_rng(seed)
    state, obs = gt_state(lin4)
    poses = [CameraPose(exp_map(rng.normal(scale=0.02, size=3)) @ p.R,
                        p.t + rng.normal(scale=0.02, size=3)) for p in state.poses]
    pts = state.points._replace(V=state.points.V + rng.normal(scale=0.01, size=state.points.V.shape))
    offs = state.offsets + rng.uniform(-0.3, 0.3, size=4) * [0, 1, 1, 1]
    state = state.copy(poses=poses, points=pts, offsets=offs)
    sel = rng.choice(obs.n, 40, replace=False)
    o = obs.subset(sel)
    idx = _lookup(state.points.key, observation_keys(o, state.offsets, state.window))
    R, t, f, c = _camera_arrays(state.poses, state.intrinsics)
    Jc, Jp = jacobians(R, t, f, state.offsets, state.points, o, idx)

    def pred(R, t, offsets, points):
        return _predict(R, t, f, c, offsets, points, o, idx)[0]

    h = 1e-6
    fd_c = np.zeros_like(Jc)
    for k in range(7):
        plus, minus = [], []
        for s in (h, -h):
            Rk, tk, ok_ = R.copy(), t.copy(), state.offsets.copy()
            for cam in range(4):
                if k < 3:
                    Rk[cam] = exp_map(s * np.eye(3)[k]) @ R[cam]
                elif k < 6:
                    tk[cam, k - 3] += s
                else:
                    ok_[cam] += s
            (plus if s > 0 else minus).append(pred(Rk, tk, ok_, state.points))
        fd_c[:, :, k] = (plus[0] - minus[0]) / (2 * h)
    fd_p = np.zeros_like(Jp)
    for k in range(6):
        out = []
        for s in (h, -h):
            X, V = state.points.X.copy(), state.points.V.copy()
            (X if k < 3 else V)[:, k % 3] += s
            out.append(pred(R, t, state.offsets, state.points._replace(X=X, V=V)))
        fd_p[:, :, k] = (out[0] - out[1]) / (2 * h)
    scale_c = np.abs(fd_c).max()
    scale_p = np.abs(fd_p).max()
    np.testing.assert_allclose(Jc, fd_c, rtol=1e-5, atol=1e-5 * scale_c)
    np.testing.assert_allclose(Jp, fd_p, rtol=1e-5, atol=1e-5 * scale_p)


def test_solve_from_truth_is_a_fixed_point(lin4):
    state, obs = gt_state(lin4)
    out = solve_stba(state, obs)
    h = out.info["history"]
    assert out.info["n_iter"] <= 2
    assert abs(h[-1] - h[0]) < 1e-10


def test_offsets_recovered_after_perturbation(lin4):
    t = lin4.truth
    offs = t.offsets + np.array([0, 0.8, 0.8, 0.8])
    state, obs = gt_state(lin4, offsets=offs)
    out = solve_stba(state, obs)
    assert np.abs(out.offsets - t.offsets).max() < 0.1


def test_noise_floor_after_rotation_perturbation():
    scene = generate(SceneSpec(n_cameras=3, n_people=3, n_frames=60, offsets=(0, 0, 0),
                               motion="linear", sigma=1.0, seed=12))
    rng = np.random.default_rng(0)
    poses = [scene.truth.poses[0]] + [CameraPose(exp_map(0.05 * _unit(rng)) @ p.R, p.t)
                                      for p in scene.truth.poses[1:]]
    state, obs = gt_state(scene, poses=poses)
    out = solve_stba(state, obs)
    assert reprojection_error(out, obs) < 1.5 * np.sqrt(np.pi / 2)


def _unit(rng):
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


@pytest.mark.invariant
def test_stba_output_is_gauge_fixed(lin4):
    rng = np.random.default_rng(1)
    t = lin4.truth
    poses = [t.poses[0]] + [CameraPose(exp_map(rng.normal(scale=0.01, size=3)) @ p.R, p.t)
                            for p in t.poses[1:]]
    out = solve_stba(*gt_state(lin4, poses=poses))
    assert out.poses[0] == t.poses[0] and out.offsets[0] == 0.0
    assert np.linalg.norm(out.poses[1].center - out.poses[0].center) == pytest.approx(1.0)


def test_no_shared_observations():
    scene = generate(SceneSpec(n_cameras=2, n_people=2, n_frames=20, seed=1))
    from posecalib.multiview import GlobalAssociation
    lone = GlobalAssociation({(0, 0): 0, (0, 1): 1, (1, 0): 2, (1, 1): 3})
    state, obs = initial_state(scene.views, lone, scene.truth.poses, scene.truth.offsets)
    with pytest.raises(InsufficientObservations):
        solve_stba(state, obs)


# -- pruning -----------------------------------------------------------------

def test_equal_errors_prune_nothing(lin4):
    state, obs = gt_state(lin4)
    _, _, removed = prune_associations(state, obs)
    assert removed == []


def test_planted_wrong_person_removed_first():
    scene = generate(SceneSpec(n_cameras=4, n_people=5, n_frames=40, motion="linear", sigma=1.0,
                               seed=14))
    t = scene.truth
    state, obs = initial_state(scene.views, truth_association(t, swap=(3, 1, 1)), t.poses,
                               t.offsets)
    # plant by hand: person 2's camera-3 observations belong to person 4
    wrong = truth_association(t)
    lab = dict(wrong.labels)
    inv = t.inverse_labels()
    lab[(3, inv[2][3])] = 4
    lab[(3, inv[4][3])] = 2
    from posecalib.multiview import GlobalAssociation
    state, obs = initial_state(scene.views, GlobalAssociation(lab), t.poses, t.offsets)
    errs = person_errors(state, obs)
    assert max(errs, key=errs.get) in (2, 4)
    _, _, removed = prune_associations(state, obs)
    assert set(removed) <= {2, 4} and removed


def test_single_person_is_kept():
    scene = generate(SceneSpec(n_cameras=3, n_people=1, n_frames=30, sigma=2.0, seed=2))
    state, obs = gt_state(scene)
    _, _, removed = prune_associations(state, obs, factor=0.1, floor=0.0)
    assert removed == []


def test_iterate_clean_scene_one_round(lin4):
    state, obs = gt_state(lin4)
    _, _, log = iterate_stba(state, obs, max_rounds=5)
    assert len(log.rounds) == 1 and log.rounds[0]["removed"] == []


def test_iterate_zero_rounds_is_identity(lin4):
    state, obs = gt_state(lin4)
    out, out_obs, log = iterate_stba(state, obs, max_rounds=0)
    assert out is state and out_obs is obs and log.rounds == []


def test_iterate_removes_planted_outliers():
    scene = generate(SceneSpec(n_cameras=4, n_people=10, n_frames=40, sigma=1.0, seed=15,
                               area_radius=2.0))
    t = scene.truth
    assoc = truth_association(t, swap=(2, 1, 6))  # corrupts 2 of 10 persons
    state, obs = initial_state(scene.views, assoc, t.poses, t.offsets)
    state, obs, log = iterate_stba(state, obs, max_rounds=5)
    removed = [g for r in log.rounds for g in r["removed"]]
    survivors = drop_groups(assoc, removed)
    assert association_precision(survivors, labels=t.labels).precision > 0.95


# -- motion ------------------------------------------------------------------

def test_linear_motion_is_exact(lin4):
    t = lin4.truth
    obs = build_observations(lin4.views, truth_association(t))
    pts = estimate_motion(obs, t.poses, lin4.intrinsics, t.offsets, 5)
    g, j, w = pts.key[0]
    frames = np.array([pts.tau0[0] - 2, pts.tau0[0] + 2])
    Xtrue = t.world_joints[g, (frames - t.world_frame0).astype(int), j]
    fit = pts.X[0] + (frames - pts.tau0[0])[:, None] * pts.V[0]
    np.testing.assert_allclose(fit, Xtrue, atol=1e-6)


def _rays(points, cams):
    out = []
    for X in points:
        for c in cams:
            d = X - c
            out.append((c, d / np.linalg.norm(d)))
    return out


CAMS = [np.array([4.0, 0, 1]), np.array([0, 4.0, 1]), np.array([-3.0, -3, 1])]


def test_stationary_joint_has_zero_velocity():
    X0 = np.array([0.2, -0.1, 1.3])
    rays = _rays([X0] * 5, CAMS)
    times = np.repeat(np.arange(5.0), 3)
    X, V = estimate_joint_motion(rays, times)
    np.testing.assert_allclose(X, X0, atol=1e-6)
    np.testing.assert_allclose(V, 0, atol=1e-6)


def test_quadratic_motion_residual_bound():
    X0, V0, A = np.array([0.1, 0.3, 1.0]), np.array([0.02, -0.01, 0.0]), np.array([0.004, 0.003, -0.002])
    tau = np.arange(5.0)
    tau0 = 2.0
    dt = tau - tau0
    pts = X0 + dt[:, None] * V0 + 0.5 * dt[:, None] ** 2 * A
    rays = _rays(pts, CAMS)
    times = np.repeat(tau, 3)
    X, V = estimate_joint_motion(rays, times, tau0)
    # the tangent line at tau0 is a feasible candidate whose ray distances are
    # at most |A| dt^2 / 2, so the least-squares optimum cannot do worse
    dist2 = 0.0
    bound2 = 0.0
    for (c, d), tt in zip(rays, times):
        p = X + (tt - tau0) * V - c
        dist2 += float(np.sum((p - (p @ d) * d) ** 2))
        bound2 += (0.5 * np.linalg.norm(A) * (tt - tau0) ** 2) ** 2
    assert dist2 <= bound2 + 1e-15
    assert np.linalg.norm(V - V0) < np.linalg.norm(A) * 2


def test_single_camera_rays_are_degenerate():
    rays = [(CAMS[0], np.array([-1.0, 0, 0]))] * 4
    with pytest.raises(DegenerateGeometry):
        estimate_joint_motion(rays, np.arange(4.0))
