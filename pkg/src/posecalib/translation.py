"""Translation direction from the coplanarity constraint.

Given the relative rotation ``R`` (source camera to target camera) and
corresponding bearings ``x`` (target) and ``x'`` (source), every pair gives
one linear equation ``t . (R x' x x) = 0``. The direction ``t`` is the null
vector of the stacked system; its sign is fixed by requiring matched points
to lie in front of both cameras.
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .exceptions import CheiralityAmbiguous, RankDeficient

HUBER_DELTA = 0.01


class EpipolarSystem(NamedTuple):
    target: np.ndarray  # (n, 3) unit bearings in the target camera
    source: np.ndarray  # (n, 3) unit bearings in the source camera
    weight: np.ndarray  # (n,)

    def __len__(self):
        return len(self.target)


class TranslationResult(NamedTuple):
    direction: np.ndarray
    residual: float
    singular_values: np.ndarray
    votes: tuple


def _depths(x_t, x_s, R, t):
    """Least-squares depths ``(lambda_t, lambda_s)`` solving
    ``lambda_t x_t = lambda_s R x_s + t``."""
    a = x_t
    b = -(x_s @ R.T)
    aa = np.einsum("ni,ni->n", a, a)
    bb = np.einsum("ni,ni->n", b, b)
    ab = np.einsum("ni,ni->n", a, b)
    at = a @ t
    bt = b @ t
    det = aa * bb - ab**2
    ok = det > 1e-12
    det = np.where(ok, det, 1.0)
    lt = (bb * at - ab * bt) / det
    ls = (aa * bt - ab * at) / det
    return lt, ls, ok


def cheirality_votes(x_t, x_s, R, t):
    """Count pairs in front of both cameras for ``t`` and for ``-t``."""
    lt, ls, ok = _depths(x_t, x_s, R, t)
    pos = int(np.sum(ok & (lt > 0) & (ls > 0)))
    neg = int(np.sum(ok & (lt < 0) & (ls < 0)))
    return pos, neg


def epipolar_rows(x_t, x_s, R):
    return np.cross(x_s @ np.asarray(R).T, x_t)


def solve_translation(pairs, R, huber_delta=HUBER_DELTA, rank_tol=1e-12):
    """Unit translation direction of the target camera relative to the source.

    Parameters
    ----------
    pairs : EpipolarSystem or tuple (x_target, x_source[, weight])
    R : ndarray (3, 3)
        Rotation taking source-camera directions to the target camera.
    huber_delta : float
        Scale of the single Huber reweighting pass; ``None`` disables it.

    Returns
    -------
    TranslationResult
        ``direction`` has unit norm; ``residual = ||M t|| / sqrt(rows)`` on
        the unweighted system.
    """
    if not isinstance(pairs, EpipolarSystem):
        x_t, x_s = np.asarray(pairs[0], float), np.asarray(pairs[1], float)
        w = np.asarray(pairs[2], float) if len(pairs) > 2 else np.ones(len(x_t))
        pairs = EpipolarSystem(x_t.reshape(-1, 3), x_s.reshape(-1, 3), w.reshape(-1))
    R = np.asarray(R, dtype=float)
    if len(pairs) < 2:
        raise RankDeficient(f"need at least two bearing pairs, got {len(pairs)}")
    M = epipolar_rows(pairs.target, pairs.source, R)
    w = np.sqrt(np.clip(pairs.weight, 0.0, None))
    _, s, Vt = np.linalg.svd(w[:, None] * M, full_matrices=False)
    if len(s) < 3 or s[1] <= rank_tol * max(s[0], 1e-300):
        raise RankDeficient("epipolar system has rank below two")
    t = Vt[-1]
    if huber_delta is not None:
        r = np.abs(M @ t)
        hw = np.where(r <= huber_delta, 1.0, huber_delta / np.maximum(r, 1e-300))
        _, s2, Vt2 = np.linalg.svd((w * np.sqrt(hw))[:, None] * M, full_matrices=False)
        if s2[1] > rank_tol * max(s2[0], 1e-300):
            t, s = Vt2[-1], s2
    t = t / np.linalg.norm(t)
    pos, neg = cheirality_votes(pairs.target, pairs.source, R, t)
    if pos == neg:
        raise CheiralityAmbiguous(f"cheirality vote tied at {pos}")
    if neg > pos:
        t = -t
        pos, neg = neg, pos
    residual = float(np.linalg.norm(M @ t) / np.sqrt(len(M)))
    return TranslationResult(t, residual, s, (pos, neg))


def matched_bearings(source_view, target_view, association, offset, weights=None, joints=None):
    """Collect corresponding bearings for matched persons over shared frames.

    ``association[p, q] = 1`` pairs target person row ``p`` with source
    person row ``q``; target frame ``k`` pairs with source frame
    ``k + offset``.
    """
    sb, sok = source_view.bearings()
    tb, tok = target_view.bearings()
    s_lo, s_hi = source_view.frame_range
    t_lo, t_hi = target_view.frame_range
    lo, hi = max(t_lo, s_lo - offset), min(t_hi, s_hi - offset)
    xs, xt, ws = [], [], []
    if hi <= lo:
        return EpipolarSystem(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0))
    tsl = slice(lo - t_lo, hi - t_lo)
    ssl = slice(lo + offset - s_lo, hi + offset - s_lo)
    for p, q in zip(*np.nonzero(association)):
        m = tok[p, tsl] & sok[q, ssl]
        if joints is not None:
            keep = np.zeros(m.shape[-1], dtype=bool)
            keep[list(joints)] = True
            m &= keep
        xt.append(tb[p, tsl][m])
        xs.append(sb[q, ssl][m])
        wt = 1.0 if weights is None else float(weights[p, q])
        ws.append(np.full(int(m.sum()), wt))
    if not xt:
        return EpipolarSystem(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0))
    return EpipolarSystem(np.concatenate(xt), np.concatenate(xs), np.concatenate(ws))
