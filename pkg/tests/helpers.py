"""Builders shared by several test modules."""
import numpy as np

from posecalib.geometry import CameraPose, exp_map, random_rotation
from posecalib.pairwise import PairwiseEdge


def ring_poses(n, radius=4.0, seed=0):
    """Cameras on a jittered circle looking roughly at the origin."""
    rng = np.random.default_rng(seed)
    poses = []
    for k in range(n):
        a = 2 * np.pi * k / n + rng.normal(scale=0.1)
        c = np.array([radius * np.cos(a), radius * np.sin(a), 1.0 + rng.normal(scale=0.2)])
        f = -c / np.linalg.norm(c)
        r = np.cross(f, [0, 0, 1.0])
        r /= np.linalg.norm(r)
        d = np.cross(f, r)
        R = exp_map(rng.normal(scale=0.02, size=3)) @ np.array([r, d, f])
        poses.append(CameraPose(R, -R @ c))
    return poses


def edge_from_poses(poses, i, j, offset=0, ids=None, perm=None, score=0.1):
    """Exact relative edge between cameras ``i`` (source) and ``j`` (target)."""
    Rij = poses[j].R @ poses[i].R.T
    t = poses[j].t - Rij @ poses[i].t
    n = 3 if ids is None else len(ids)
    src_ids = np.arange(n) if ids is None else np.asarray(ids[i])
    tgt_ids = np.arange(n) if ids is None else np.asarray(ids[j])
    A = np.eye(n, dtype=int) if perm is None else perm
    return PairwiseEdge(i, j, Rij, t / np.linalg.norm(t), offset, A, score, src_ids, tgt_ids)


def gauge(poses):
    from posecalib.multiview import normalize_gauge
    return normalize_gauge(poses)


def perturb(R, scale, rng):
    return exp_map(rng.normal(scale=scale, size=3)) @ R


__all__ = ["ring_poses", "edge_from_poses", "gauge", "perturb", "random_rotation"]


def truth_association(truth, swap=None):
    """Global association from ground-truth labels; ``swap=(camera, a, b)``
    exchanges the identities of global persons ``a`` and ``b`` in one camera."""
    from posecalib.multiview import GlobalAssociation
    labels = {}
    for c, lab in enumerate(truth.labels):
        for local, g in lab.items():
            if swap is not None and c == swap[0] and g in swap[1:]:
                g = swap[2] if g == swap[1] else swap[1]
            labels[(c, int(local))] = int(g)
    return GlobalAssociation(labels)


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE = {}


def record_criterion(name, ok, detail):
    ACCEPTANCE[name] = (bool(ok), detail)
