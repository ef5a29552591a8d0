"""Fuse pairwise relations into one camera rig.

Cameras are nodes, pairwise registrations are edges. A minimum-cost spanning
tree (lowest matched-pair angular cost first) seeds rotations, offsets and
person identities; camera centres come from a linear translation-averaging
solve, and a robust pose-graph refinement over all edges polishes the rig.
Camera 0 is the gauge: identity pose, zero offset, and the baseline to
camera 1 has unit length.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares

from .exceptions import DegenerateBaseline, DisconnectedGraph
from .geometry import CameraPose, exp_map, hat, log_map

PGO_LOSS_SCALE = 0.1


class UnionFind:
    def __init__(self, items=()):
        self.parent = {}
        for x in items:
            self.add(x)

    def add(self, x):
        self.parent.setdefault(x, x)

    def find(self, x):
        self.add(x)
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        # deterministic: smaller representative wins
        if rb < ra:
            ra, rb = rb, ra
        self.parent[rb] = ra
        return True


@dataclass
class CameraGraph:
    n_cameras: int
    edges: list

    def __post_init__(self):
        for e in self.edges:
            if not (0 <= e.source < self.n_cameras and 0 <= e.target < self.n_cameras):
                raise ValueError(f"edge ({e.source}, {e.target}) references an unknown camera")
        if self.n_cameras > 1:
            spanning_tree(self)

    def edge(self, i, j):
        for e in self.edges:
            if (e.source, e.target) == (i, j):
                return e
            if (e.source, e.target) == (j, i):
                return e.reversed()
        raise KeyError((i, j))


def spanning_tree(graph):
    """Kruskal minimum spanning tree over edge scores (lower is better).

    Ties are broken by the camera indices, so the tree is deterministic.
    Returns the indices of the tree edges in ``graph.edges``.
    """
    order = sorted(range(len(graph.edges)),
                   key=lambda k: (graph.edges[k].score, min(graph.edges[k].source,
                                                              graph.edges[k].target),
                                  max(graph.edges[k].source, graph.edges[k].target), k))
    uf = UnionFind(range(graph.n_cameras))
    tree = []
    for k in order:
        e = graph.edges[k]
        if uf.union(e.source, e.target):
            tree.append(k)
    if len(tree) != graph.n_cameras - 1:
        raise DisconnectedGraph(f"camera graph with {graph.n_cameras} cameras is not connected")
    return tree


def _tree_order(graph, tree):
    """Breadth-first traversal from camera 0: ``[(parent, child, edge), ...]``
    with the edge oriented parent -> child."""
    adj = {c: [] for c in range(graph.n_cameras)}
    for k in tree:
        e = graph.edges[k]
        adj[e.source].append((e.target, e))
        adj[e.target].append((e.source, e.reversed()))
    seen = {0}
    queue = [0]
    out = []
    while queue:
        u = queue.pop(0)
        for v, e in sorted(adj[u], key=lambda x: x[0]):
            if v not in seen:
                seen.add(v)
                queue.append(v)
                out.append((u, v, e if e.source == u else e.reversed()))
    return out


def chain_rotations(graph, tree=None):
    tree = spanning_tree(graph) if tree is None else tree
    R = [None] * graph.n_cameras
    R[0] = np.eye(3)
    for u, v, e in _tree_order(graph, tree):
        R[v] = e.rotation @ R[u]
    return R


def consensus_offsets(graph, tree=None):
    """Integer per-camera offsets by chaining tree edges from camera 0.

    Returns
    -------
    offsets : ndarray of int
    residuals : dict
        ``{(i, j): offset_ij - (offset_j - offset_i)}`` for non-tree edges.
    """
    if graph.n_cameras == 1:
        return np.zeros(1, dtype=int), {}
    tree = spanning_tree(graph) if tree is None else tree
    d = np.zeros(graph.n_cameras, dtype=int)
    for u, v, e in _tree_order(graph, tree):
        d[v] = d[u] + e.offset
    in_tree = set(tree)
    residuals = {}
    for k, e in enumerate(graph.edges):
        if k not in in_tree:
            residuals[(e.source, e.target)] = int(e.offset - (d[e.target] - d[e.source]))
    return d, residuals


def _edge_weights(graph):
    inv = np.array([1.0 / max(e.score, 1e-9) for e in graph.edges])
    return inv / inv.mean()


def linear_centers(graph, rotations, weights=None):
    """Camera centres from unit baseline directions, ``c_0 = 0``, ``|c_1| = 1``.

    Each edge asks ``c_i - c_j`` to be parallel to ``R_j^T t_ij``; the
    stacked cross-product constraints are solved for their null vector.
    """
    n = graph.n_cameras
    if n == 1:
        return np.zeros((1, 3))
    w = np.ones(len(graph.edges)) if weights is None else weights
    rows = []
    for k, e in enumerate(graph.edges):
        u = rotations[e.target].T @ e.translation
        block = np.zeros((3, 3 * n))
        U = hat(u)
        block[:, 3 * e.source:3 * e.source + 3] = U
        block[:, 3 * e.target:3 * e.target + 3] = -U
        rows.append(w[k] * block)
    A = np.vstack(rows)[:, 3:]  # c_0 = 0
    _, _, Vt = np.linalg.svd(A)
    c = np.vstack([np.zeros(3), Vt[-1].reshape(n - 1, 3)])
    votes = sum(np.sign((rotations[e.target].T @ e.translation) @ (c[e.source] - c[e.target]))
                for e in graph.edges)
    if votes < 0:
        c = -c
    base = np.linalg.norm(c[1])
    if base < 1e-12:
        raise DegenerateBaseline("camera 1 coincides with camera 0")
    return c / base


def _poses_from(rotations, centers):
    return [CameraPose(R, -R @ c) for R, c in zip(rotations, centers)]


def normalize_gauge(poses):
    """Express poses relative to camera 0 with a unit camera 0-1 baseline."""
    P0 = poses[0]
    rel = [p.compose(P0.inverse()) for p in poses]
    if len(rel) < 2:
        return [CameraPose.identity()] + rel[1:]
    base = np.linalg.norm(rel[1].center)
    if base < 1e-12:
        raise DegenerateBaseline("camera 1 coincides with camera 0")
    out = [CameraPose.identity()]
    out += [CameraPose(p.R, p.t / base) for p in rel[1:]]
    return out


@dataclass
class PoseGraphResult:
    poses: list
    initial_poses: list
    tree: list
    initial_cost: float
    final_cost: float
    info: dict = field(default_factory=dict)


def _pgo_residuals(x, graph, R0, weights, lambda_t):
    n = graph.n_cameras
    om = x[:3 * (n - 1)].reshape(n - 1, 3)
    cs = np.vstack([np.zeros(3), x[3 * (n - 1):].reshape(n - 1, 3)])
    Rs = [R0[0]] + [exp_map(om[k]) @ R0[k + 1] for k in range(n - 1)]
    res = []
    for k, e in enumerate(graph.edges):
        i, j = e.source, e.target
        rr = log_map(e.rotation @ Rs[i] @ Rs[j].T)
        b = Rs[j] @ (cs[i] - cs[j])
        nb = np.linalg.norm(b)
        rt = (b / nb if nb > 1e-12 else b) - e.translation
        res.append(weights[k] * rr)
        res.append(weights[k] * lambda_t * rt)
    return np.concatenate(res)


def pose_graph_optimize(graph, robust=True, loss_scale=PGO_LOSS_SCALE, lambda_t=1.0,
                        max_nfev=200):
    """Globally consistent camera poses from all pairwise edges.

    Parameters
    ----------
    graph : CameraGraph
    robust : bool
        Cauchy loss with scale ``loss_scale`` on the weighted residuals.

    Returns
    -------
    PoseGraphResult
        Poses are world-to-camera with camera 0 the identity and a unit
        baseline between cameras 0 and 1.
    """
    n = graph.n_cameras
    if n == 1:
        return PoseGraphResult([CameraPose.identity()], [CameraPose.identity()], [], 0.0, 0.0)
    tree = spanning_tree(graph)
    weights = _edge_weights(graph)
    R0 = chain_rotations(graph, tree)
    c0 = linear_centers(graph, R0, weights)
    init = _poses_from(R0, c0)
    x0 = np.concatenate([np.zeros(3 * (n - 1)), c0[1:].ravel()])
    loss = "cauchy" if robust else "linear"
    fun = lambda x: _pgo_residuals(x, graph, R0, weights, lambda_t)  # noqa: E731
    sol = least_squares(fun, x0, loss=loss, f_scale=loss_scale, method="trf",
                        max_nfev=max_nfev, x_scale="jac")
    om = sol.x[:3 * (n - 1)].reshape(n - 1, 3)
    cs = np.vstack([np.zeros(3), sol.x[3 * (n - 1):].reshape(n - 1, 3)])
    Rs = [np.eye(3)] + [exp_map(om[k]) @ R0[k + 1] for k in range(n - 1)]
    poses = normalize_gauge(_poses_from(Rs, cs))
    initial_cost = _robust_cost(fun(x0), loss, loss_scale)
    return PoseGraphResult(poses, init, tree, initial_cost, float(sol.cost),
                           {"nfev": sol.nfev, "status": sol.status})


def _robust_cost(r, loss, scale):
    z = (r / scale) ** 2
    if loss == "cauchy":
        return float(0.5 * scale**2 * np.log1p(z).sum())
    return float(0.5 * (r**2).sum())


@dataclass
class GlobalAssociation:
    """``labels[(camera, local id)] -> global id`` plus rejected matches.

    ``inconsistent`` lists ``(source cam, source id, target cam, target id)``
    matches from non-tree edges that contradict the tree labelling.
    """

    labels: dict
    inconsistent: list = field(default_factory=list)

    def members(self):
        out = {}
        for (c, pid), g in sorted(self.labels.items()):
            out.setdefault(g, {})[c] = pid
        return out

    def matched_groups(self):
        """Global ids seen by at least two cameras."""
        return {g: m for g, m in self.members().items() if len(m) >= 2}

    def local_id(self, camera, gid):
        return self.members().get(gid, {}).get(camera)


def merge_associations(graph, person_ids=None):
    """Merge pairwise person matches into global identities.

    Tree edges are merged unconditionally. A match on a non-tree edge is
    accepted when it joins two identities seen by disjoint camera sets,
    and is recorded as inconsistent when it would put two local persons of
    the same camera into one identity or contradicts an existing link.

    Parameters
    ----------
    graph : CameraGraph
    person_ids : list of arrays, optional
        Local ids per camera; persons never matched still get a global id.
    """
    uf = UnionFind()
    if person_ids is not None:
        for c, ids in enumerate(person_ids):
            for pid in ids:
                uf.add((c, int(pid)))
    for e in graph.edges:
        for pid in e.source_ids:
            uf.add((e.source, int(pid)))
        for pid in e.target_ids:
            uf.add((e.target, int(pid)))
    tree = spanning_tree(graph) if graph.n_cameras > 1 else []
    for k in tree:
        e = graph.edges[k]
        for s, t in e.matches():
            uf.union((e.source, s), (e.target, t))

    def cameras(root):
        return {node[0] for node in uf.parent if uf.find(node) == root}

    inconsistent = []
    in_tree = set(tree)
    for k, e in enumerate(graph.edges):
        if k in in_tree:
            continue
        for s, t in e.matches():
            a, b = uf.find((e.source, s)), uf.find((e.target, t))
            if a == b:
                continue
            if cameras(a) & cameras(b):
                inconsistent.append((e.source, s, e.target, t))
            else:
                uf.union(a, b)
    roots = {}
    labels = {}
    for node in sorted(uf.parent):
        r = uf.find(node)
        if r not in roots:
            roots[r] = len(roots)
        labels[node] = roots[r]
    return GlobalAssociation(labels, inconsistent)
