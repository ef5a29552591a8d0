"""Evaluation metrics against ground truth.

Rotation error is the mean geodesic distance over cameras 1..N-1 after
expressing both rigs relative to camera 0. Translation error aligns the
estimated camera centres to the true ones by a rotation and a scale (camera 0
pinned at the origin) and reports the RMSE divided by the true camera 0-1
baseline. Offsets are compared by mean absolute error, associations by
precision, and reprojection error is the mean pixel residual norm.
"""
from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass, field

import numpy as np

from .exceptions import CountMismatch, DegenerateBaseline, NoGroundTruth
from .geometry import geodesic_distance, triangulate_rays
from .stba import reprojection_error  # noqa: F401  (re-exported)

PRECISION_PIXELS = 5.0


def _relative(poses):
    P0 = poses[0]
    return [p.compose(P0.inverse()) for p in poses]


def _check_counts(a, b):
    if len(a) != len(b):
        raise CountMismatch(f"{len(a)} estimated vs {len(b)} ground-truth cameras")


def rotation_errors(est, gt):
    """Per-camera geodesic errors after expressing both rigs relative to
    camera 0 (first entry is always 0)."""
    _check_counts(est, gt)
    er, gr = _relative(est), _relative(gt)
    return np.array([geodesic_distance(a.R, b.R) for a, b in zip(er, gr)])


def rotation_error(est, gt):
    """Mean geodesic rotation error over cameras 1..N-1 (radians)."""
    errs = rotation_errors(est, gt)
    return float(errs[1:].mean()) if len(errs) > 1 else 0.0


def _centers_in_cam0(poses):
    P0 = poses[0]
    return np.array([P0.R @ (p.center - P0.center) for p in poses])


def align_similarity(src, dst):
    """Rotation ``Q`` and scale ``s`` minimising ``sum |s Q src_i - dst_i|^2``
    (no translation: both sets share the origin)."""
    H = src.T @ dst
    U, S, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0])
    Q = Vt.T @ D @ U.T
    denom = float((src**2).sum())
    s = float(np.trace(np.diag(S) @ D)) / denom if denom > 0 else 0.0
    return Q, s


def translation_errors(est, gt):
    """Per-camera aligned centre errors divided by the true baseline."""
    _check_counts(est, gt)
    ce, cg = _centers_in_cam0(est), _centers_in_cam0(gt)
    if len(gt) < 2:
        return np.zeros(len(gt))
    base = np.linalg.norm(cg[1] - cg[0])
    if base < 1e-12:
        raise DegenerateBaseline("ground-truth cameras 0 and 1 coincide")
    Q, s = align_similarity(ce, cg)
    aligned = s * ce @ Q.T
    return np.linalg.norm(aligned - cg, axis=1) / base


def translation_error(est, gt):
    """Baseline-normalised RMSE of similarity-aligned camera centres over
    cameras 1..N-1."""
    errs = translation_errors(est, gt)
    if len(errs) < 2:
        return 0.0
    return float(np.sqrt(np.mean(errs[1:] ** 2)))


def offset_errors(est, gt, round_estimate=False):
    _check_counts(est, gt)
    est = np.asarray(est, dtype=float) - float(est[0])
    gt = np.asarray(gt, dtype=float) - float(gt[0])
    if round_estimate:
        est = np.rint(est)
    return np.abs(est - gt)


def offset_error(est, gt, round_estimate=None):
    """Mean absolute offset error over cameras 1..N-1 (frames).

    ``round_estimate=None`` rounds the estimate only when every true offset
    is an integer.
    """
    gt_arr = np.asarray(gt, dtype=float)
    if round_estimate is None:
        round_estimate = bool(np.all(gt_arr == np.rint(gt_arr)))
    errs = offset_errors(est, gt, round_estimate)
    return float(errs[1:].mean()) if len(errs) > 1 else 0.0


def estimated_matches(association):
    """All cross-camera person pairs implied by a global association:
    ``[((cam_a, id_a), (cam_b, id_b)), ...]`` with ``cam_a < cam_b``."""
    out = []
    for _, members in sorted(association.matched_groups().items()):
        nodes = sorted(members.items())
        out.extend(itertools.combinations(nodes, 2))
    return out


@dataclass
class PrecisionResult:
    precision: float
    correct: int
    estimated: int
    undefined: bool = False


def _precision(correct, total):
    if total == 0:
        return PrecisionResult(0.0, 0, 0, True)
    return PrecisionResult(correct / total, correct, total)


def association_precision(association, labels=None, views=None, poses=None, offsets=None,
                          threshold=PRECISION_PIXELS):
    """Fraction of estimated cross-camera matches that are correct.

    With ``labels`` (``labels[c][local id] -> true person``) correctness is
    read off directly. Otherwise each match is triangulated with the true
    ``poses`` and ``offsets`` and counts as correct when its mean
    reprojection error is below ``threshold`` pixels.
    """
    matches = estimated_matches(association)
    if labels is not None:
        ok = sum(labels[a[0]].get(a[1], -1) == labels[b[0]].get(b[1], -2) for a, b in matches)
        return _precision(int(ok), len(matches))
    if views is None or poses is None:
        raise NoGroundTruth("precision needs either labels or true camera poses")
    offsets = np.zeros(len(poses)) if offsets is None else np.asarray(offsets, dtype=float)
    ok = 0
    for a, b in matches:
        err = match_reprojection_error(views, poses, offsets, a, b)
        ok += bool(np.isfinite(err) and err < threshold)
    return _precision(ok, len(matches))


def _pixels_at(view, row, times):
    """Pixels of person ``row`` at fractional local frames (linear interpolation)."""
    uv, ok = view.pixels()
    u = np.asarray(times, dtype=float) - view.frame0
    i0 = np.floor(u).astype(int)
    a = u - i0
    inside = (i0 >= 0) & (i0 < view.n_frames)
    i0c = np.clip(i0, 0, view.n_frames - 1)
    i1c = np.clip(i0 + 1, 0, view.n_frames - 1)
    exact = np.isclose(a, 0.0)
    val = inside[:, None] & ok[row, i0c] & (exact[:, None] | ok[row, i1c])
    p = (1 - a)[:, None, None] * uv[row, i0c] + a[:, None, None] * uv[row, i1c]
    return p, val


def match_reprojection_error(views, poses, offsets, a, b):
    """Mean two-view reprojection error of a candidate match.

    ``a`` and ``b`` are ``(camera, local id)``; frames of camera ``b`` are
    interpolated at the instants seen by camera ``a``.
    """
    (ca, pa), (cb, pb) = a, b
    va, vb = views[ca], views[cb]
    ra = int(np.flatnonzero(va.person_ids == pa)[0])
    rb = int(np.flatnonzero(vb.person_ids == pb)[0])
    uva, oka = va.pixels()
    frames = np.arange(va.frame0, va.frame0 + va.n_frames)
    tb = frames + offsets[ca] - offsets[cb]
    uvb, okb = _pixels_at(vb, rb, tb)
    m = oka[ra] & okb
    if not m.any():
        return float("inf")
    Pa, Pb = poses[ca], poses[cb]
    Ka, Kb = va.intrinsics, vb.intrinsics
    xa = uva[ra][m]
    xb = uvb[m]
    da = Ka.unproject(xa) @ Pa.R
    db = Kb.unproject(xb) @ Pb.R
    centers = np.stack([np.broadcast_to(Pa.center, da.shape), np.broadcast_to(Pb.center, db.shape)],
                       axis=1)
    X, good = triangulate_rays(centers, np.stack([da, db], axis=1))
    if not good.any():
        return float("inf")
    X = X[good]
    errs = []
    for P, K, x in ((Pa, Ka, xa[good]), (Pb, Kb, xb[good])):
        Y = P.transform(X)
        front = Y[:, 2] > 0
        e = np.full(len(X), np.inf)
        e[front] = np.linalg.norm(K.project_cam(Y[front]) - x[front], axis=1)
        errs.append(e)
    return float(np.mean(np.concatenate(errs)))


@dataclass
class EvaluationReport:
    E_R: float
    E_t: float
    E_delta: float
    E_2D: float
    P: float
    P_undefined: bool = False
    per_camera: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


def evaluate(poses, offsets, truth, association=None, views=None, state=None, obs=None,
             round_offsets=None):
    """All metrics for one estimate against a ground truth bundle."""
    rot = rotation_errors(poses, truth.poses)
    tra = translation_errors(poses, truth.poses)
    off = offset_errors(offsets, truth.offsets,
                        bool(np.all(np.asarray(truth.offsets) == np.rint(truth.offsets)))
                        if round_offsets is None else round_offsets)
    if association is not None:
        pr = association_precision(association, labels=truth.labels)
    else:
        pr = PrecisionResult(0.0, 0, 0, True)
    e2d = reprojection_error(state, obs) if state is not None and obs is not None else float("nan")
    n = len(poses)
    return EvaluationReport(
        E_R=float(rot[1:].mean()) if n > 1 else 0.0,
        E_t=float(np.sqrt(np.mean(tra[1:] ** 2))) if n > 1 else 0.0,
        E_delta=float(off[1:].mean()) if n > 1 else 0.0,
        E_2D=e2d, P=pr.precision, P_undefined=pr.undefined,
        per_camera={"rotation": rot.tolist(), "translation": tra.tolist(),
                    "offset": off.tolist()})
