import itertools

import numpy as np
import pytest

from posecalib.exceptions import InsufficientOverlap, NoValidData, PreconditionError
from posecalib.geometry import exp_map, geodesic_distance, random_rotation, rot_z
from posecalib.registration import (RegistrationOptions, SourceModel, WindowSet,
                                    association_costs, compute_responsibility, em_register,
                                    extract_association, fit_source_model, make_windows,
                                    objective_gradient, offset_search, paired_windows,
                                    ransac_register, rotation_ascent_step, soft_objective,
                                    sufficient_statistics, tetrahedral_rotations,
                                    update_mixing, window_starts)
from posecalib.synth import SceneSpec, generate


def gt_relative(truth, i, j):
    return truth.poses[j].R @ truth.poses[i].R.T


def unit(rng, shape):
    v = rng.normal(size=shape + (3,))
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def view_windows(view, T=5):
    lo, hi = view.frame_range
    return make_windows(view, window_starts(lo, hi, T), T)


@pytest.fixture(scope="module")
def base_windows(clean_scene):
    return view_windows(clean_scene.views[0])


# -- responsibilities --------------------------------------------------------

def test_single_component_responsibility(rng):
    tgt = WindowSet(unit(rng, (2, 3, 4, 5)), np.ones((2, 3, 4, 5), bool), np.arange(3), np.arange(2))
    model = SourceModel(unit(rng, (2, 1, 5)), np.full((2, 1, 5), 7.0), np.ones((2, 1, 5), bool),
                        np.ones(1))
    g = compute_responsibility(tgt, model, random_rotation(rng))
    assert np.array_equal(g, np.ones((3, 1)))


def test_separated_components(rng):
    from tests.test_vmf import sample_vmf
    S, T = 4, 6
    mu1 = np.tile([0, 0, 1.0], (S, 1))
    mu2 = np.tile([0, 0, -1.0], (S, 1))
    mean = np.stack([mu1, mu2])[None]  # (1, 2, S, 3)
    model = SourceModel(mean, np.full((1, 2, S), 50.0), np.ones((1, 2, S), bool), np.full(2, 0.5))
    draws = sample_vmf([0, 0, 1], 50.0, T * S, rng).reshape(1, 1, T, S, 3)
    tgt = WindowSet(draws, np.ones((1, 1, T, S), bool), np.arange(1), np.arange(1))
    g = compute_responsibility(tgt, model, np.eye(3))
    assert g[0, 0] > 0.999


def test_uniform_model_gives_uniform_responsibility(rng):
    tgt = WindowSet(unit(rng, (2, 3, 4, 5)), np.ones((2, 3, 4, 5), bool), np.arange(3), np.arange(2))
    model = SourceModel(unit(rng, (2, 4, 5)), np.zeros((2, 4, 5)), np.ones((2, 4, 5), bool),
                        np.full(4, 0.25))
    g = compute_responsibility(tgt, model, random_rotation(rng))
    np.testing.assert_allclose(g, 0.25, atol=1e-15)


@pytest.mark.invariant
def test_responsibility_rows_stochastic(base_windows):
    rng = np.random.default_rng(5)
    model = fit_source_model(base_windows, min_count=2)
    tgt = base_windows.rotated(random_rotation(rng))
    for _ in range(10):
        g = compute_responsibility(tgt, model, random_rotation(rng))
        assert np.all(g >= 0)
        np.testing.assert_allclose(g.sum(axis=1), 1.0, atol=1e-12)


# -- rotation ascent ---------------------------------------------------------

def _toy(mus, targets, kappa=20.0):
    S = len(mus)
    model = SourceModel(np.asarray(mus)[None, None], np.full((1, 1, S), kappa),
                        np.ones((1, 1, S), bool), np.ones(1))
    tgt = WindowSet(np.asarray(targets)[None, None, None], np.ones((1, 1, 1, S), bool),
                    np.arange(1), np.arange(1))
    return model, tgt


MUS = np.array([[1.0, 0, 0], [0, 1, 0], [0, 0.6, 0.8]])


def test_aligned_targets_are_stationary():
    R = exp_map([0.2, -0.3, 0.5])
    model, tgt = _toy(MUS, MUS @ R.T)
    stats = sufficient_statistics(tgt, model)
    assert np.linalg.norm(objective_gradient(stats, R, np.ones((1, 1)))) < 1e-9
    Rn = rotation_ascent_step(tgt, model, R, np.ones((1, 1)))
    assert np.array_equal(Rn, R)


def test_ascent_closes_ten_degree_gap():
    Q = rot_z(np.radians(10))
    model, tgt = _toy(MUS, MUS @ Q.T)
    R = np.eye(3)
    for _ in range(100):
        R = rotation_ascent_step(tgt, model, R, np.ones((1, 1)))
        if np.degrees(geodesic_distance(R, Q)) < 0.1:
            break
    assert np.degrees(geodesic_distance(R, Q)) < 0.1


@pytest.mark.parametrize("seed", range(50))
def test_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    W, P, Q, T, S = 2, 3, 2, 3, 4
    tgt = WindowSet(unit(rng, (W, P, T, S)), rng.uniform(size=(W, P, T, S)) > 0.1,
                    np.arange(P), np.arange(W))
    model = SourceModel(unit(rng, (W, Q, S)), rng.uniform(0.1, 30, size=(W, Q, S)),
                        np.ones((W, Q, S), bool), np.full(Q, 1 / Q))
    stats = sufficient_statistics(tgt, model)
    gamma = rng.dirichlet(np.ones(Q), size=P)
    R = random_rotation(rng)
    g = objective_gradient(stats, R, gamma)
    h = 1e-6
    fd = np.array([(soft_objective(stats, exp_map(h * e) @ R, gamma, model.mixing)
                    - soft_objective(stats, exp_map(-h * e) @ R, gamma, model.mixing)) / (2 * h)
                   for e in np.eye(3)])
    np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-5 * np.linalg.norm(fd))


# -- mixing ------------------------------------------------------------------

def test_mixing_uniform():
    np.testing.assert_allclose(update_mixing(np.full((4, 3), 1 / 3)), 1 / 3)


def test_mixing_zero_column():
    g = np.array([[0.3, 0.0, 0.7], [0.5, 0.0, 0.5]])
    assert update_mixing(g)[1] == 0.0


@pytest.mark.parametrize("seed", range(5))
def test_mixing_matches_grid_search(seed):
    g = np.random.default_rng(seed).dirichlet([1, 1], size=6)
    grid = np.linspace(1e-6, 1 - 1e-6, 200_001)
    obj = g[:, 0].sum() * np.log(grid) + g[:, 1].sum() * np.log(1 - grid)
    assert abs(update_mixing(g)[0] - grid[np.argmax(obj)]) < 1e-4


# -- EM ----------------------------------------------------------------------

def test_em_recovers_known_rotation(base_windows):
    Q = exp_map([0.4, 1.1, -0.7])
    res = em_register(base_windows, base_windows.rotated(Q))
    assert geodesic_distance(res.rotation, Q) < 1e-4
    assert np.array_equal(res.association, np.eye(3, dtype=int))


def test_em_fixed_point(base_windows):
    Q = exp_map([0.4, 1.1, -0.7])
    res = em_register(base_windows, base_windows.rotated(Q), Q, RegistrationOptions(init="single"))
    assert res.n_iter <= 2
    assert geodesic_distance(res.rotation, Q) < 1e-8


def test_em_recovers_permutation(base_windows):
    Q = exp_map([-0.3, 0.2, 2.0])
    perm = np.array([2, 0, 1])
    tgt = base_windows.rotated(Q).select(perm)
    res = em_register(base_windows, tgt)
    # target row p is source person perm[p]
    expected = np.zeros((3, 3), int)
    expected[np.arange(3), perm] = 1
    assert np.array_equal(res.association, expected)


@pytest.mark.invariant
def test_em_likelihood_is_monotone():
    scene = generate(SceneSpec(n_cameras=2, n_people=3, n_frames=40, offsets=(0, 0), sigma=3.0,
                               seed=11))
    src, tgt = paired_windows(scene.views[0], scene.views[1], 0, 5)
    rng = np.random.default_rng(0)
    for _ in range(5):
        res = em_register(src, tgt, random_rotation(rng), RegistrationOptions(init="single"))
        h = np.array(res.history)
        assert np.all(np.diff(h) >= -1e-9 * np.abs(h[:-1]).max())


def test_em_without_data():
    empty = WindowSet(np.zeros((1, 1, 5, 3, 3)), np.zeros((1, 1, 5, 3), bool), np.arange(1),
                      np.arange(1))
    with pytest.raises(NoValidData):
        em_register(empty, empty)


def test_tetrahedral_group_is_closed():
    G = tetrahedral_rotations()
    assert len(G) == 12
    for A, B in itertools.product(G, G):
        assert min(np.abs(A @ B - C).max() for C in G) < 1e-12


# -- association -------------------------------------------------------------

def test_identity_scenario_association(base_windows):
    cost, _ = association_costs(base_windows, base_windows, np.eye(3))
    A = extract_association(base_windows, base_windows, np.eye(3))
    assert np.array_equal(A, np.eye(3, dtype=int))
    assert np.all(np.diag(cost) < 1e-6)


def test_rectangular_association(base_windows):
    A = extract_association(base_windows, base_windows.select([0, 2]), np.eye(3))
    assert A.shape == (2, 3) and A.sum() == 2


@pytest.mark.parametrize("n", [1, 2, 3, 4, 5, 6])
def test_assignment_beats_every_permutation(n):
    rng = np.random.default_rng(n)
    for _ in range(5):
        src = WindowSet(unit(rng, (2, n, 3, 4)), np.ones((2, n, 3, 4), bool), np.arange(n),
                        np.arange(2))
        tgt = WindowSet(unit(rng, (2, n, 3, 4)), np.ones((2, n, 3, 4), bool), np.arange(n),
                        np.arange(2))
        R = random_rotation(rng)
        cost, _ = association_costs(src, tgt, R)
        A = extract_association(src, tgt, R, theta_match=np.pi)
        got = (A * cost).sum()
        brute = min(cost[np.arange(n), list(p)].sum() for p in itertools.permutations(range(n)))
        assert A.sum() == n
        assert got == pytest.approx(brute, abs=1e-12)


# -- offsets -----------------------------------------------------------------

def test_offset_search_recovers_plus_five():
    scene = generate(SceneSpec(n_cameras=2, n_people=3, n_frames=80, offsets=(0, 5), seed=21))
    delta, res, scores = offset_search(scene.views[0], scene.views[1], RegistrationOptions())
    assert delta == 5 and len(scores) == 21
    assert geodesic_distance(res.rotation, gt_relative(scene.truth, 0, 1)) < 1e-3


def test_offset_zero_is_strict_minimum():
    scene = generate(SceneSpec(n_cameras=2, n_people=3, n_frames=60, offsets=(0, 0), seed=22))
    delta, _, scores = offset_search(scene.views[0], scene.views[1],
                                     RegistrationOptions(max_offset=4))
    assert delta == 0
    assert all(scores[0] < s for d, s in scores.items() if d != 0)


@pytest.mark.parametrize("seed", range(20))
def test_true_offset_scores_best_under_noise(seed):
    scene = generate(SceneSpec(n_cameras=2, n_people=3, n_frames=50, offsets=(0, 2),
                               sigma=1.0 + (seed % 2), seed=100 + seed))
    _, _, scores = offset_search(scene.views[0], scene.views[1], RegistrationOptions(),
                                 offsets=range(-1, 6))
    assert all(scores[2] <= s for s in scores.values())


def test_no_overlap_raises(clean_scene):
    v = clean_scene.views[0]
    with pytest.raises(InsufficientOverlap):
        paired_windows(v, v, v.n_frames, 5)


# -- RANSAC ------------------------------------------------------------------

def test_ransac_matches_full_registration_with_full_visibility():
    scene = generate(SceneSpec(n_cameras=2, n_people=3, n_frames=50, offsets=(0, 0), sigma=1.0,
                               seed=31))
    opts = RegistrationOptions()
    src, tgt = paired_windows(scene.views[0], scene.views[1], 0, 5)
    plain = em_register(src, tgt, None, opts)
    rr = ransac_register(scene.views[0], scene.views[1], opts)
    assert rr.association.sum() == 3
    assert rr.score == pytest.approx(plain.score, abs=1e-6)


def test_ransac_with_target_only_persons():
    vis = np.ones((2, 5), bool)
    vis[0, 3:] = False  # persons 3 and 4 only seen by the target camera
    scene = generate(SceneSpec(n_cameras=2, n_people=5, n_frames=60, offsets=(0, 0), sigma=1.0,
                               visibility=tuple(map(tuple, vis.tolist())), seed=32))
    rr = ransac_register(scene.views[0], scene.views[1], RegistrationOptions())
    assert geodesic_distance(rr.rotation, gt_relative(scene.truth, 0, 1)) < 0.05


def test_ransac_needs_two_persons(clean_scene):
    v = clean_scene.views[0]
    one = v.select_persons(v.person_ids[:1])
    with pytest.raises(PreconditionError):
        ransac_register(one, clean_scene.views[1])
