"""Input checks shared by the estimators and the command line."""
from __future__ import annotations

import numbers

import numpy as np

from .exceptions import PreconditionError, SkeletonMismatch
from .geometry import is_rotation
from .pose_encoding import CameraView


def check_rotation(R, name="R", tol=1e-6):
    R = np.asarray(R, dtype=float)
    if not is_rotation(R, tol):
        raise ValueError(f"{name} is not a rotation matrix")
    return R


def check_unit_vectors(v, name="v", tol=1e-9):
    v = np.asarray(v, dtype=float)
    if v.shape[-1] != 3:
        raise ValueError(f"{name} must have a trailing dimension of 3")
    n = np.linalg.norm(v, axis=-1)
    if np.any(np.abs(n - 1.0) > tol):
        raise ValueError(f"{name} must contain unit vectors")
    return v


def check_scalar(x, name, lo=None, hi=None, integer=False):
    kind = numbers.Integral if integer else numbers.Real
    if not isinstance(x, kind) or isinstance(x, bool):
        raise TypeError(f"{name} must be {'an integer' if integer else 'a number'}, got {x!r}")
    if lo is not None and x < lo:
        raise ValueError(f"{name}={x} is below {lo}")
    if hi is not None and x > hi:
        raise ValueError(f"{name}={x} is above {hi}")
    return x


def check_view(view, name="view", need_intrinsics=False):
    if not isinstance(view, CameraView):
        raise TypeError(f"{name} must be a CameraView, got {type(view).__name__}")
    if view.n_persons == 0:
        raise PreconditionError(f"{name} has no person tracks")
    if need_intrinsics and view.intrinsics is None:
        raise PreconditionError(f"{name} has no intrinsics")
    return view


def check_views(views, min_cameras=2, need_intrinsics=True):
    """Validate a camera list: ids ``0..N-1``, shared skeleton, intrinsics."""
    views = list(views)
    if len(views) < min_cameras:
        raise PreconditionError(f"need at least {min_cameras} cameras, got {len(views)}")
    for c, v in enumerate(views):
        check_view(v, f"camera {c}", need_intrinsics)
        if v.camera_id != c:
            raise PreconditionError(f"camera at position {c} has id {v.camera_id}")
    if len({v.skeleton for v in views}) > 1:
        raise SkeletonMismatch("cameras use different skeletons")
    return views


def check_pose_arrays(positions, valid=None):
    """Coerce ``(P, F, S, 3)`` positions and a matching validity mask."""
    positions = np.asarray(positions, dtype=float)
    if positions.ndim != 4 or positions.shape[-1] != 3:
        raise ValueError("positions must have shape (P, F, S, 3)")
    finite = np.all(np.isfinite(positions), axis=-1)
    if valid is None:
        valid = finite
    else:
        valid = np.asarray(valid, dtype=bool)
        if valid.shape != positions.shape[:-1]:
            raise ValueError("valid must have shape (P, F, S)")
        valid = valid & finite
    return positions, valid
