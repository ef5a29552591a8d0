"""Rotation algebra on SO(3), pinhole projection and linear triangulation.

Rotations are plain ``(3, 3)`` float arrays; tangent vectors are axis-angle
``(3,)`` arrays in radians. Camera poses map world points into the camera
frame: ``X_cam = R @ X_world + t``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import DegenerateGeometry, NonPositiveDepth, ZeroVector

DEPTH_EPS = 1e-9
_SMALL_ANGLE = 1e-4
_NEAR_PI = 1e-3


def hat(w):
    """Skew-symmetric cross-product matrix, ``hat(w) @ u == np.cross(w, u)``."""
    w = np.asarray(w, dtype=float)
    x, y, z = w
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def vee(K):
    """Inverse of :func:`hat` (uses the antisymmetric part of ``K``)."""
    K = np.asarray(K, dtype=float)
    return 0.5 * np.array([K[2, 1] - K[1, 2], K[0, 2] - K[2, 0], K[1, 0] - K[0, 1]])


def exp_map(w):
    """Rodrigues' formula. Small angles use a Taylor expansion of the
    coefficients so the map stays smooth at zero."""
    w = np.asarray(w, dtype=float)
    theta2 = float(w @ w)
    K = hat(w)
    if theta2 < _SMALL_ANGLE**2:
        a = 1.0 - theta2 / 6.0 + theta2**2 / 120.0
        b = 0.5 - theta2 / 24.0 + theta2**2 / 720.0
    else:
        theta = np.sqrt(theta2)
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / theta2
    return np.eye(3) + a * K + b * (K @ K)


def exp_map_batch(W):
    """Vectorised :func:`exp_map` over an ``(n, 3)`` array."""
    W = np.asarray(W, dtype=float).reshape(-1, 3)
    theta2 = np.einsum("ni,ni->n", W, W)
    theta = np.sqrt(theta2)
    small = theta2 < _SMALL_ANGLE**2
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta2 / 24.0, (1.0 - np.cos(safe)) / safe**2)
    K = np.zeros((len(W), 3, 3))
    K[:, 0, 1], K[:, 0, 2] = -W[:, 2], W[:, 1]
    K[:, 1, 0], K[:, 1, 2] = W[:, 2], -W[:, 0]
    K[:, 2, 0], K[:, 2, 1] = -W[:, 1], W[:, 0]
    return np.eye(3) + a[:, None, None] * K + b[:, None, None] * (K @ K)


def log_map(R):
    """Axis-angle vector of a rotation matrix.

    Uses ``atan2`` for the angle, a series expansion near zero and the
    eigenvector of the symmetric part near pi, where the antisymmetric part
    carries no axis information.
    """
    R = np.asarray(R, dtype=float)
    v = vee(R)  # sin(theta) * axis
    s = np.linalg.norm(v)
    c = 0.5 * (np.trace(R) - 1.0)
    theta = np.arctan2(s, c)
    if theta < _SMALL_ANGLE:
        return v * (1.0 + theta**2 / 6.0)
    if np.pi - theta < _NEAR_PI:
        S = 0.5 * (R + R.T)
        evals, evecs = np.linalg.eigh(S)
        axis = evecs[:, np.argmax(evals)]
        if axis @ v < 0:
            axis = -axis
        return theta * axis
    return v * (theta / s)


def rotation_angle(R):
    R = np.asarray(R, dtype=float)
    return float(np.arctan2(np.linalg.norm(vee(R)), 0.5 * (np.trace(R) - 1.0)))


def geodesic_distance(R1, R2):
    """Riemannian distance on SO(3), in radians."""
    return rotation_angle(np.asarray(R1).T @ np.asarray(R2))


def project_to_so3(M):
    """Closest rotation in Frobenius norm."""
    U, _, Vt = np.linalg.svd(np.asarray(M, dtype=float))
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def rot_x(a):
    return exp_map([a, 0.0, 0.0])


def rot_y(a):
    return exp_map([0.0, a, 0.0])


def rot_z(a):
    return exp_map([0.0, 0.0, a])


def random_rotation(rng):
    """Uniformly distributed rotation (Shoemake's quaternion method)."""
    u1, u2, u3 = rng.random(3)
    q = np.array([
        np.sqrt(u1) * np.cos(2 * np.pi * u3),
        np.sqrt(1 - u1) * np.sin(2 * np.pi * u2),
        np.sqrt(1 - u1) * np.cos(2 * np.pi * u2),
        np.sqrt(u1) * np.sin(2 * np.pi * u3),
    ])
    return quat_to_rotation(q)


def quat_to_rotation(q):
    """Unit quaternion ``(w, x, y, z)`` to rotation matrix."""
    w, x, y, z = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def rotation_to_quat(R):
    """Rotation matrix to unit quaternion ``(w, x, y, z)`` with ``w >= 0``."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.asarray(q)
    q /= np.linalg.norm(q)
    return q if q[0] >= 0 else -q


def is_rotation(R, tol=1e-9):
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        return False
    return bool(np.abs(R @ R.T - np.eye(3)).max() <= tol and abs(np.linalg.det(R) - 1.0) <= tol)


@dataclass(frozen=True)
class CameraIntrinsics:
    """Zero-skew pinhole intrinsics in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int | None = None
    height: int | None = None

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")

    @property
    def matrix(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def focal(self):
        return 0.5 * (self.fx + self.fy)

    def project_cam(self, Xc):
        """Project camera-frame points ``(..., 3)`` to pixels ``(..., 2)``.

        No depth check; callers decide how to treat points behind the camera.
        """
        Xc = np.asarray(Xc, dtype=float)
        z = Xc[..., 2]
        return np.stack([self.fx * Xc[..., 0] / z + self.cx, self.fy * Xc[..., 1] / z + self.cy], axis=-1)

    def unproject(self, uv):
        """Pixels ``(..., 2)`` to unit bearing vectors in the camera frame."""
        uv = np.asarray(uv, dtype=float)
        d = np.stack([(uv[..., 0] - self.cx) / self.fx, (uv[..., 1] - self.cy) / self.fy,
                      np.ones(uv.shape[:-1])], axis=-1)
        return d / np.linalg.norm(d, axis=-1, keepdims=True)


@dataclass(frozen=True)
class CameraPose:
    """World-to-camera rigid transform."""

    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "R", np.array(self.R, dtype=float).reshape(3, 3))
        object.__setattr__(self, "t", np.array(self.t, dtype=float).reshape(3))
        self.R.flags.writeable = False
        self.t.flags.writeable = False

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @property
    def center(self):
        return -self.R.T @ self.t

    def transform(self, X):
        return np.asarray(X, dtype=float) @ self.R.T + self.t

    def compose(self, other):
        """``self ∘ other``: apply ``other`` first, then ``self``."""
        return CameraPose(self.R @ other.R, self.R @ other.t + self.t)

    def inverse(self):
        return CameraPose(self.R.T, -self.R.T @ self.t)

    def __eq__(self, other):
        if not isinstance(other, CameraPose):
            return NotImplemented
        return np.array_equal(self.R, other.R) and np.array_equal(self.t, other.t)

    __hash__ = None


def project(pose, K, X):
    """Project a world point to pixel coordinates."""
    Xc = pose.transform(X)
    if np.any(Xc[..., 2] <= DEPTH_EPS):
        raise NonPositiveDepth("point is not in front of the camera")
    return K.project_cam(Xc)


def bearing_from_point(X_cam):
    X_cam = np.asarray(X_cam, dtype=float)
    n = np.linalg.norm(X_cam)
    if n == 0.0:
        raise ZeroVector("cannot normalise the zero vector")
    return X_cam / n


def normalize_rows(X, eps=0.0):
    """Row-normalise ``(..., 3)``; rows with norm <= eps come back as zeros
    together with a ``False`` entry in the returned mask."""
    X = np.asarray(X, dtype=float)
    n = np.linalg.norm(X, axis=-1)
    ok = n > eps
    out = np.where(ok[..., None], X / np.where(ok, n, 1.0)[..., None], 0.0)
    return out, ok


def triangulate_rays(centers, directions, mask=None, rcond=1e-10):
    """Least-squares intersection of rays, batched.

    Parameters
    ----------
    centers, directions : ndarray, shape (m, k, 3)
        Ray origins and unit directions for ``m`` points seen by up to ``k``
        cameras.
    mask : ndarray of bool, shape (m, k), optional

    Returns
    -------
    X : ndarray, shape (m, 3)
    ok : ndarray of bool, shape (m,)
        False where fewer than two rays are present or the rays are parallel;
        the corresponding rows of ``X`` are NaN.
    """
    centers = np.asarray(centers, dtype=float)
    directions = np.asarray(directions, dtype=float)
    m, k = centers.shape[:2]
    if mask is None:
        mask = np.ones((m, k), dtype=bool)
    wts = mask.astype(float)
    P = np.eye(3) - directions[..., :, None] * directions[..., None, :]
    A = np.einsum("mk,mkij->mij", wts, P)
    b = np.einsum("mk,mkij,mkj->mi", wts, P, centers)
    evals = np.linalg.eigvalsh(A)
    n_rays = mask.sum(axis=1)
    mean_c = np.einsum("mk,mki->mi", wts, centers) / np.maximum(n_rays, 1)[:, None]
    spread = np.sqrt(np.einsum("mk,mk->m", wts, ((centers - mean_c[:, None]) ** 2).sum(-1)))
    scale = 1.0 + np.abs(mean_c).max(axis=1)
    ok = (n_rays >= 2) & (evals[:, 0] > rcond * np.maximum(evals[:, -1], 1e-300)) & (spread > 1e-12 * scale)
    X = np.full((m, 3), np.nan)
    if ok.any():
        X[ok] = np.linalg.solve(A[ok], b[ok][..., None])[..., 0]
    return X, ok


def triangulate(observations):
    """Triangulate one world point from ``[(pose, K, (u, v)), ...]``."""
    if len(observations) < 2:
        raise DegenerateGeometry("need at least two observations")
    centers = np.array([pose.center for pose, _, _ in observations])[None]
    dirs = np.array([pose.R.T @ K.unproject(np.asarray(uv)) for pose, K, uv in observations])[None]
    X, ok = triangulate_rays(centers, dirs)
    if not ok[0]:
        raise DegenerateGeometry("rays are parallel or share a centre")
    return X[0]
