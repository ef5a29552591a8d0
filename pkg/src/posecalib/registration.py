"""Two-view registration of bone-direction sets.

The source view is modelled as a mixture over persons; each person's joints
carry one vMF per window. A single rotation maps the source camera frame into
the target camera frame, and target persons are softly assigned to source
components. Rotation and assignments are optimised alternately (EM), the
binary association comes from a min-cost bipartite matching, and the integer
frame offset is found by exhaustive search.

Conventions: ``R`` maps source-camera directions into the target camera
(``v_target ~ R @ v_source``). Association matrices are indexed
``[target person, source person]``. An offset ``delta`` pairs target frame
``k`` with source frame ``k + delta``.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import logsumexp

from .exceptions import InsufficientOverlap, NoValidData, PreconditionError
from .geometry import exp_map, project_to_so3, random_rotation, vee
from .vmf import KAPPA_MAX, vmf_fit_batch, vmf_log_normalizer

_BIG_COST = 1e6


@dataclass(frozen=True)
class RegistrationOptions:
    """Knobs for pairwise registration (defaults follow the library design)."""

    window: int = 5
    stride: int | None = None
    max_offset: int = 10
    kappa_max: float = KAPPA_MAX
    min_window_frames: int = 2
    max_iter: int = 200
    tol: float = 1e-7
    grad_tol: float = 1e-8
    max_inner: int = 200
    max_halvings: int = 20
    precondition: bool = True
    theta_match: float = 0.5
    init: str = "tetrahedral"
    n_init: int = 12
    subset_size: int = 2
    max_hypotheses: int = 64
    seed: int = 0

    def with_(self, **kw):
        return replace(self, **kw)


class WindowSet(NamedTuple):
    """Bone directions cut into fixed-length windows.

    ``orientations[w, p, tau, s]`` is joint ``s`` of person ``person_ids[p]``
    at local frame ``starts[w] + tau``.
    """

    orientations: np.ndarray  # (W, P, T, S, 3)
    valid: np.ndarray  # (W, P, T, S)
    person_ids: np.ndarray
    starts: np.ndarray

    @property
    def n_persons(self):
        return self.orientations.shape[1]

    def select(self, rows):
        rows = np.asarray(rows, dtype=int)
        return WindowSet(self.orientations[:, rows], self.valid[:, rows],
                         self.person_ids[rows], self.starts)

    def rotated(self, Q):
        return self._replace(orientations=self.orientations @ np.asarray(Q).T)


class SourceModel(NamedTuple):
    mean: np.ndarray  # (W, Q, S, 3)
    kappa: np.ndarray  # (W, Q, S)
    valid: np.ndarray  # (W, Q, S)
    mixing: np.ndarray  # (Q,)


@dataclass
class RegistrationResult:
    rotation: np.ndarray
    responsibility: np.ndarray
    association: np.ndarray
    log_likelihood: float
    n_iter: int
    converged: bool
    mixing: np.ndarray = None
    history: list = field(default_factory=list)
    costs: np.ndarray = None
    score: float = np.inf
    offset: int = 0
    source_ids: np.ndarray = None
    target_ids: np.ndarray = None


# -- windows -----------------------------------------------------------------

def window_starts(lo, hi, T, stride=None):
    """Uniformly spaced window starts covering ``[lo, hi)``."""
    stride = stride or T
    if hi - lo < T:
        return np.zeros(0, dtype=int)
    return np.arange(lo, hi - T + 1, stride)


def make_windows(view, starts, T, orientations=None):
    """Cut a :class:`~posecalib.pose_encoding.CameraView` into windows.

    ``starts`` are local frame indices; frames outside the view are invalid.
    """
    dirs, ok = orientations if orientations is not None else view.orientations()
    starts = np.asarray(starts, dtype=int)
    idx = starts[:, None] + np.arange(T)[None, :] - view.frame0  # (W, T)
    inside = (idx >= 0) & (idx < view.n_frames)
    safe = np.clip(idx, 0, max(view.n_frames - 1, 0))
    v = dirs[:, safe]  # (P, W, T, S, 3)
    m = ok[:, safe] & inside[None, :, :, None]
    return WindowSet(np.moveaxis(v, 0, 1), np.moveaxis(m, 0, 1), view.person_ids, starts)


def paired_windows(source_view, target_view, delta, T, stride=None, src_orient=None,
                   tgt_orient=None):
    """Aligned window sets for offset ``delta`` (target frame k <-> source k+delta)."""
    s_lo, s_hi = source_view.frame_range
    t_lo, t_hi = target_view.frame_range
    lo, hi = max(t_lo, s_lo - delta), min(t_hi, s_hi - delta)
    starts = window_starts(lo, hi, T, stride)
    if len(starts) == 0:
        raise InsufficientOverlap(f"offset {delta} leaves fewer than {T} overlapping frames")
    return (make_windows(source_view, starts + delta, T, src_orient),
            make_windows(target_view, starts, T, tgt_orient))


# -- model and sufficient statistics -----------------------------------------

def fit_source_model(source, kappa_max=KAPPA_MAX, min_count=1, mixing=None):
    """Per window, person and joint vMF fits over the window's frames."""
    v = np.moveaxis(source.orientations, 2, 3)  # (W, Q, S, T, 3)
    m = np.moveaxis(source.valid, 2, 3)
    mean, kappa, ok = vmf_fit_batch(v, m, kappa_max=kappa_max, min_count=min_count)
    Q = source.n_persons
    if mixing is None:
        mixing = np.full(Q, 1.0 / Q)
    return SourceModel(mean, kappa, ok, np.asarray(mixing, dtype=float))


class _Stats(NamedTuple):
    M: np.ndarray  # (P, Q, 3, 3): sum kappa * v mu^T
    c: np.ndarray  # (P, Q): sum log C(kappa)
    weight: np.ndarray  # (P, Q): sum kappa
    count: np.ndarray  # (P, Q): number of (window, frame, joint) terms


def sufficient_statistics(targets, model):
    """Collapse the data term to per-pair 3x3 moments.

    For a person pair the data log-likelihood is ``c + <M, R>_F`` because the
    vMF exponent ``kappa (R mu)^T v`` is linear in ``R``.
    """
    tv = targets.valid.astype(float)
    vsum = np.einsum("wpts,wptsi->wpsi", tv, targets.orientations)
    n = tv.sum(axis=2)  # (W, P, S)
    sv = model.valid.astype(float)
    k = sv * model.kappa
    logc = sv * vmf_log_normalizer(model.kappa)
    M = np.einsum("wqs,wpsi,wqsj->pqij", k, vsum, model.mean)
    c = np.einsum("wps,wqs->pq", n, logc)
    weight = np.einsum("wps,wqs->pq", n, k)
    count = np.einsum("wps,wqs->pq", n, sv)
    return _Stats(M, c, weight, count)


def _log_mixing(mixing):
    with np.errstate(divide="ignore"):
        return np.log(mixing)


def component_log_likelihood(stats, R, mixing):
    """``log pi_q + sum log f_vMF`` for every (target, source) pair."""
    return _log_mixing(mixing)[None, :] + stats.c + np.einsum("pqij,ij->pq", stats.M, R)


def _responsibility_from_ll(ll):
    return np.exp(ll - logsumexp(ll, axis=1, keepdims=True))


def compute_responsibility(targets, model, R, stats=None):
    """Posterior of each source component for each target person.

    Evaluated in the log domain; rows sum to one.
    """
    stats = stats if stats is not None else sufficient_statistics(targets, model)
    return _responsibility_from_ll(component_log_likelihood(stats, R, model.mixing))


def data_log_likelihood(stats, R, mixing):
    """Mixture log-likelihood ``sum_p log sum_q exp(l_pq)``."""
    return float(logsumexp(component_log_likelihood(stats, R, mixing), axis=1).sum())


def soft_objective(stats, R, gamma, mixing):
    """Responsibility-weighted complete-data log-likelihood."""
    ll = component_log_likelihood(stats, R, mixing)
    with np.errstate(invalid="ignore"):
        terms = np.where(gamma > 0, gamma * ll, 0.0)
    return float(terms.sum())


def objective_gradient(stats, R, gamma):
    """Left-perturbation gradient of the soft objective w.r.t. ``R``.

    Equals ``sum gamma kappa (R mu) x v`` over all terms.
    """
    B = np.einsum("pq,pqij->ij", gamma, stats.M)
    return vee(B @ R.T - R @ B.T)


def _ascent_direction(B, R, g, W, precondition):
    """Tangent search direction for maximising ``<B, exp(w) R>``.

    The plain direction is the gradient scaled by the total weight. With
    ``precondition`` the local Hessian ``tr(P) I - sym(P)``, ``P = R B^T``,
    is used instead whenever it is positive definite, which removes the slow
    crawl along weakly constrained axes.
    """
    if precondition:
        P = R @ B.T
        H = np.trace(P) * np.eye(3) - 0.5 * (P + P.T)
        try:
            L = np.linalg.cholesky(H)
        except np.linalg.LinAlgError:
            return g / W
        return np.linalg.solve(L.T, np.linalg.solve(L, g))
    return g / W


def _ascent(stats, R, gamma, grad_tol, max_inner, max_halvings, precondition=True):
    B = np.einsum("pq,pqij->ij", gamma, stats.M)
    W = float((gamma * stats.weight).sum())
    if W <= 0:
        return R, 0
    f = float((B * R).sum())
    steps = 0
    for _ in range(max_inner):
        g = vee(B @ R.T - R @ B.T)
        if np.linalg.norm(g) < grad_tol * W:
            break
        d = _ascent_direction(B, R, g, W, precondition)
        step = 1.0
        for _ in range(max_halvings + 1):
            Rn = exp_map(step * d) @ R
            fn = float((B * Rn).sum())
            if fn > f:
                break
            step *= 0.5
        else:
            break
        R, f = Rn, fn
        steps += 1
    return R, steps


def rotation_ascent_step(targets, model, R, gamma, step=1.0, max_halvings=20, stats=None):
    """One backtracked gradient step on the rotation.

    The tangent gradient is scaled by the total concentration weight so that
    ``step=1`` is a well-scaled trial; the step is halved until the objective
    improves (at most ``max_halvings`` times). Returns ``R`` unchanged when no
    improving step is found.
    """
    stats = stats if stats is not None else sufficient_statistics(targets, model)
    B = np.einsum("pq,pqij->ij", gamma, stats.M)
    W = float((gamma * stats.weight).sum())
    if W <= 0:
        return R
    g = vee(B @ R.T - R @ B.T)
    f = float((B * R).sum())
    for _ in range(max_halvings + 1):
        Rn = exp_map(step * g / W) @ R
        if float((B * Rn).sum()) > f:
            return Rn
        step *= 0.5
    return R


def update_mixing(gamma):
    """Closed-form mixing proportions: column sums of ``gamma`` normalised."""
    gamma = np.asarray(gamma, dtype=float)
    col = gamma.sum(axis=0)
    return col / col.sum()


# -- initial rotations ---------------------------------------------------------

def tetrahedral_rotations():
    """The 12 proper symmetries of a tetrahedron (a subgroup of the cube's)."""
    _exp = exp_map
    rots = [np.eye(3)]
    for axis in np.eye(3):
        rots.append(_exp(np.pi * axis))
    for d in ([1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]):
        a = np.asarray(d, dtype=float) / np.sqrt(3.0)
        rots.append(_exp(2 * np.pi / 3 * a))
        rots.append(_exp(4 * np.pi / 3 * a))
    return np.array(rots)


def initial_rotations(opts, init_R=None, rng=None):
    """Starting rotations for the multi-start EM.

    ``"tetrahedral"`` composes the 12 tetrahedral symmetries with ``init_R``
    (identity by default), ``"single"`` uses ``init_R`` alone and
    ``"random"`` draws ``n_init`` uniform rotations from ``opts.seed``.
    """
    base = np.eye(3) if init_R is None else np.asarray(init_R, dtype=float)
    if opts.init == "tetrahedral":
        return tetrahedral_rotations() @ base
    if opts.init == "single":
        return base[None]
    if opts.init == "random":
        rng = rng if rng is not None else np.random.default_rng(opts.seed)
        return np.array([random_rotation(rng) for _ in range(opts.n_init)])
    raise ValueError(f"unknown init {opts.init!r}")


# -- EM ----------------------------------------------------------------------

def _em_single(stats, R0, mixing0, opts):
    R = np.array(R0, dtype=float)
    mixing = np.array(mixing0, dtype=float)
    ll = data_log_likelihood(stats, R, mixing)
    history = [ll]
    best = (ll, R, mixing)
    converged = False
    it = 0
    for it in range(1, opts.max_iter + 1):
        gamma = _responsibility_from_ll(component_log_likelihood(stats, R, mixing))
        R, _ = _ascent(stats, R, gamma, opts.grad_tol, opts.max_inner, opts.max_halvings,
                       opts.precondition)
        mixing = update_mixing(gamma)
        new = data_log_likelihood(stats, R, mixing)
        history.append(new)
        if new > best[0]:
            best = (new, R, mixing)
        if new - ll <= opts.tol * max(abs(ll), 1.0):
            converged = True
            ll = new
            break
        ll = new
    ll_best, R_best, mix_best = best
    return project_to_so3(R_best), mix_best, ll_best, it, converged, history


def em_register(source, target, init_R=None, opts=None):
    """Rotation and soft association between two window sets.

    Parameters
    ----------
    source, target : WindowSet
        Windows must be frame-aligned (same count and length).
    init_R : ndarray, shape (3, 3) or (k, 3, 3), optional
        A single rotation is expanded by :func:`initial_rotations`; a stack is
        used as is. The run with the highest log-likelihood is returned.
    opts : RegistrationOptions, optional

    Returns
    -------
    RegistrationResult
    """
    opts = opts or RegistrationOptions()
    model = fit_source_model(source, opts.kappa_max, opts.min_window_frames)
    stats = sufficient_statistics(target, model)
    if target.n_persons == 0 or source.n_persons == 0 or stats.count.sum() == 0:
        raise NoValidData("no valid joint orientations to register")
    if init_R is not None and np.ndim(init_R) == 3:
        inits = np.asarray(init_R, dtype=float)
    else:
        inits = initial_rotations(opts, init_R)
    best = None
    for R0 in inits:
        run = _em_single(stats, R0, model.mixing, opts)
        if best is None or run[2] > best[2]:
            best = run
    R, mixing, ll, n_iter, converged, history = best
    gamma = _responsibility_from_ll(component_log_likelihood(stats, R, mixing))
    costs, _ = association_costs(source, target, R)
    A = association_from_costs(costs, opts.theta_match)
    return RegistrationResult(
        rotation=R, responsibility=gamma, association=A, log_likelihood=ll, n_iter=n_iter,
        converged=converged, mixing=mixing, history=history, costs=costs,
        score=matching_score(costs, opts.theta_match), source_ids=source.person_ids,
        target_ids=target.person_ids)


# -- association -------------------------------------------------------------

def association_costs(source, target, R):
    """Mean per-joint angle between target and rotated source directions.

    Returns
    -------
    cost : ndarray (P, Q)
        ``inf`` where a pair shares no valid joint-frame.
    count : ndarray (P, Q)
    """
    rs = source.orientations @ np.asarray(R).T
    dots = np.einsum("wptsi,wqtsi->pqwts", target.orientations, rs)
    mask = target.valid[:, :, None] & source.valid[:, None, :]  # (W, P, Q, T, S)
    mask = np.moveaxis(mask, (1, 2), (0, 1))
    ang = np.arccos(np.clip(dots, -1.0, 1.0))
    count = mask.sum(axis=(2, 3, 4))
    total = np.where(mask, ang, 0.0).sum(axis=(2, 3, 4))
    with np.errstate(invalid="ignore", divide="ignore"):
        cost = np.where(count > 0, total / np.maximum(count, 1), np.inf)
    return cost, count


def _assignment(cost):
    finite = np.where(np.isfinite(cost), cost, _BIG_COST)
    return linear_sum_assignment(finite)


def association_from_costs(cost, theta_match):
    A = np.zeros(cost.shape, dtype=int)
    if cost.size == 0:
        return A
    rows, cols = _assignment(cost)
    keep = cost[rows, cols] <= theta_match
    A[rows[keep], cols[keep]] = 1
    return A


def extract_association(source, target, R, theta_match=0.5):
    """Binary association from min-cost bipartite matching, gated at
    ``theta_match`` radians of mean angular cost."""
    cost, _ = association_costs(source, target, R)
    return association_from_costs(cost, theta_match)


def matching_score(cost, theta_match):
    """Mean truncated cost of the optimal assignment.

    Every assigned pair contributes ``min(cost, theta_match)``, so pairs that
    fail the gate count as a fixed penalty instead of vanishing.
    """
    if cost.size == 0:
        return np.inf
    rows, cols = _assignment(cost)
    c = np.minimum(cost[rows, cols], theta_match)
    return float(c.mean())


# -- temporal offset ---------------------------------------------------------

def _score_key(score, delta):
    return (score, abs(delta), delta)


def offset_search(source_view, target_view, opts=None, offsets=None, init_R=None):
    """Exhaustive integer offset search.

    Each candidate ``delta`` in ``[-max_offset, max_offset]`` is registered
    independently and scored by :func:`matching_score`; ties go to the
    smaller ``|delta|`` and then the smaller ``delta``.

    Returns
    -------
    delta : int
    result : RegistrationResult
    scores : dict
        ``{delta: score}`` for every candidate.
    """
    opts = opts or RegistrationOptions()
    if offsets is None:
        offsets = range(-opts.max_offset, opts.max_offset + 1)
    src_or = source_view.orientations()
    tgt_or = target_view.orientations()
    scores = {}
    best = None
    for delta in offsets:
        src, tgt = paired_windows(source_view, target_view, delta, opts.window, opts.stride,
                                  src_or, tgt_or)
        res = em_register(src, tgt, init_R, opts)
        res.offset = int(delta)
        scores[int(delta)] = res.score
        if best is None or _score_key(res.score, delta) < _score_key(best.score, best.offset):
            best = res
    return best.offset, best, scores


# -- RANSAC ------------------------------------------------------------------

def _hypotheses(n, k, max_hypotheses, rng):
    combos = list(itertools.combinations(range(n), k))
    if len(combos) <= max_hypotheses:
        return combos
    pick = rng.choice(len(combos), size=max_hypotheses, replace=False)
    return [combos[i] for i in sorted(pick)]


def _register_pair(source_view, target_view, opts, sync, offset, init_R=None):
    if sync:
        _, res, _ = offset_search(source_view, target_view, opts, init_R=init_R)
        return res
    src, tgt = paired_windows(source_view, target_view, offset, opts.window, opts.stride)
    res = em_register(src, tgt, init_R, opts)
    res.offset = int(offset)
    return res


def ransac_register(source_view, target_view, opts=None, sync=False, offset=0):
    """Hypothesise small subsets of source persons, register each, keep the
    best by matched-pair angular cost, then refine on the matched persons.

    With ``sync`` the offset is searched per hypothesis; otherwise ``offset``
    is used as given.
    """
    opts = opts or RegistrationOptions()
    n_src = source_view.n_persons
    if n_src < opts.subset_size or n_src < 2:
        raise PreconditionError(
            f"RANSAC needs at least {max(opts.subset_size, 2)} source persons, got {n_src}")
    rng = np.random.default_rng(opts.seed)
    best = None
    for h, subset in enumerate(_hypotheses(n_src, opts.subset_size, opts.max_hypotheses, rng)):
        sub = source_view.select_persons(source_view.person_ids[list(subset)])
        try:
            res = _register_pair(sub, target_view, opts, sync, offset)
        except NoValidData:
            continue
        key = (res.score, h)
        if best is None or key < best[0]:
            best = (key, res)
    if best is None:
        raise NoValidData("no RANSAC hypothesis had valid data")
    hyp = best[1]
    # full association under the winning rotation and offset
    src, tgt = paired_windows(source_view, target_view, hyp.offset, opts.window, opts.stride)
    cost, _ = association_costs(src, tgt, hyp.rotation)
    A = association_from_costs(cost, opts.theta_match)
    rows, cols = np.nonzero(A)
    if len(rows) == 0:
        return _full_result(src, tgt, hyp.rotation, hyp, opts)
    single = opts.with_(init="single")
    if not sync:
        refined = em_register(src.select(cols), tgt.select(rows), hyp.rotation, single)
        return _full_result(src, tgt, refined.rotation, refined, opts, hyp.offset)
    # a two-person hypothesis pins the rotation well but the offset only
    # loosely, so the offset is searched again on every matched person
    delta, refined, _ = offset_search(source_view.select_persons(src.person_ids[cols]),
                                      target_view.select_persons(tgt.person_ids[rows]),
                                      single, init_R=hyp.rotation)
    src, tgt = paired_windows(source_view, target_view, delta, opts.window, opts.stride)
    return _full_result(src, tgt, refined.rotation, refined, opts, delta)


def _full_result(src, tgt, R, base, opts, offset=None):
    cost, _ = association_costs(src, tgt, R)
    A = association_from_costs(cost, opts.theta_match)
    model = fit_source_model(src, opts.kappa_max, opts.min_window_frames)
    stats = sufficient_statistics(tgt, model)
    mixing = A.sum(axis=0) + 1e-12
    mixing = mixing / mixing.sum()
    gamma = _responsibility_from_ll(component_log_likelihood(stats, R, mixing))
    return RegistrationResult(
        rotation=R, responsibility=gamma, association=A, log_likelihood=base.log_likelihood,
        n_iter=base.n_iter, converged=base.converged, mixing=mixing, history=base.history,
        costs=cost, score=matching_score(cost, opts.theta_match),
        offset=int(base.offset if offset is None else offset), source_ids=src.person_ids,
        target_ids=tgt.person_ids)
