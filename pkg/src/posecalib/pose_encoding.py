"""Skeletons, person tracks and the bone-direction encoding.

A 3D pose becomes a set of oriented points: each non-root joint contributes
its position and the unit direction from its parent joint. Those directions
live on the unit sphere and are what the registration aligns.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .exceptions import OutOfRange, SkeletonMismatch

BONE_EPS = 1e-9


@dataclass(frozen=True)
class Skeleton:
    names: tuple
    parents: tuple

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(str(n) for n in self.names))
        object.__setattr__(self, "parents", tuple(int(p) for p in self.parents))
        if len(self.names) != len(self.parents):
            raise SkeletonMismatch("names and parents differ in length")
        roots = [j for j, p in enumerate(self.parents) if p < 0]
        if len(roots) != 1:
            raise SkeletonMismatch(f"expected exactly one root, got {len(roots)}")
        for j, p in enumerate(self.parents):
            if p >= j:
                raise SkeletonMismatch(f"joint {j} has parent {p}; parents must precede children")

    @property
    def n_joints(self):
        return len(self.names)

    @property
    def root(self):
        return next(j for j, p in enumerate(self.parents) if p < 0)

    def parent_array(self):
        return np.array(self.parents)

    def to_dict(self):
        return {"names": list(self.names), "parents": list(self.parents)}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["names"]), tuple(d["parents"]))


H36M_17 = Skeleton(
    names=("pelvis", "r_hip", "r_knee", "r_ankle", "l_hip", "l_knee", "l_ankle",
           "spine", "thorax", "neck", "head", "l_shoulder", "l_elbow", "l_wrist",
           "r_shoulder", "r_elbow", "r_wrist"),
    parents=(-1, 0, 1, 2, 0, 4, 5, 0, 7, 8, 9, 8, 11, 12, 8, 14, 15),
)


class PoseFrame(NamedTuple):
    person_id: int
    frame: int
    positions: np.ndarray  # (S, 3), camera frame
    valid: np.ndarray  # (S,) bool


class OrientedPointSet(NamedTuple):
    person_id: int
    frame: int
    positions: np.ndarray  # (S, 3)
    orientations: np.ndarray  # (S, 3), unit where valid
    valid: np.ndarray  # (S,) bool


@dataclass(frozen=True, eq=False)
class PersonTrack:
    """One contiguous run of frames for one person in one camera."""

    person_id: int
    start: int
    positions: np.ndarray  # (n, S, 3)
    valid: np.ndarray  # (n, S)

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=float)
        val = np.asarray(self.valid, dtype=bool) & np.all(np.isfinite(pos), axis=-1)
        if pos.ndim != 3 or pos.shape[-1] != 3 or val.shape != pos.shape[:2]:
            raise ValueError("positions must be (n, S, 3) with a matching (n, S) mask")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "valid", val)

    def __len__(self):
        return self.positions.shape[0]

    @property
    def stop(self):
        return self.start + len(self)

    @property
    def n_joints(self):
        return self.positions.shape[1]

    def frame(self, k):
        i = k - self.start
        if not 0 <= i < len(self):
            raise OutOfRange(f"frame {k} outside [{self.start}, {self.stop})")
        return PoseFrame(self.person_id, k, self.positions[i], self.valid[i])

    def frames(self):
        return [self.frame(k) for k in range(self.start, self.stop)]

    def __eq__(self, other):
        if not isinstance(other, PersonTrack):
            return NotImplemented
        return (self.person_id == other.person_id and self.start == other.start
                and np.array_equal(self.valid, other.valid)
                and np.array_equal(np.where(self.valid[..., None], self.positions, 0.0),
                                   np.where(other.valid[..., None], other.positions, 0.0)))


def bone_directions(positions, valid, parents):
    """Unit parent-to-child directions for arrays of poses.

    Parameters
    ----------
    positions : ndarray, shape (..., S, 3)
    valid : ndarray of bool, shape (..., S)
    parents : sequence of int, length S (negative for the root)

    Returns
    -------
    dirs : ndarray, shape (..., S, 3)
        Zero where invalid.
    ok : ndarray of bool, shape (..., S)
        The root, joints with an invalid endpoint and degenerate bones are False.
    """
    positions = np.asarray(positions, dtype=float)
    valid = np.asarray(valid, dtype=bool)
    parents = np.asarray(parents)
    has_parent = parents >= 0
    par = np.where(has_parent, parents, 0)
    bone = positions - positions[..., par, :]
    length = np.linalg.norm(bone, axis=-1)
    ok = valid & valid[..., par] & has_parent & (length >= BONE_EPS)
    with np.errstate(invalid="ignore", divide="ignore"):
        dirs = np.where(ok[..., None], bone / np.where(ok, length, 1.0)[..., None], 0.0)
    return dirs, ok


def encode_orientations(frame, skel):
    """Oriented points (position, bone direction) for one pose frame."""
    if frame.positions.shape[0] != skel.n_joints:
        raise SkeletonMismatch(
            f"frame has {frame.positions.shape[0]} joints, skeleton has {skel.n_joints}")
    dirs, ok = bone_directions(frame.positions, frame.valid, skel.parents)
    return OrientedPointSet(frame.person_id, frame.frame, np.asarray(frame.positions, dtype=float),
                            dirs, ok)


def window(track, start, T):
    """``T`` consecutive frames of ``track`` beginning at frame ``start``."""
    if T < 1 or start < track.start or start + T > track.stop:
        raise OutOfRange(
            f"window [{start}, {start + T}) outside track range [{track.start}, {track.stop})")
    return [track.frame(k) for k in range(start, start + T)]


def split_at_gaps(person_id, frames, positions, valid):
    """Build contiguous :class:`PersonTrack` segments from unordered records.

    Frame indices must be unique; gaps start a new segment.
    """
    frames = np.asarray(frames, dtype=int)
    order = np.argsort(frames, kind="stable")
    frames = frames[order]
    positions = np.asarray(positions, dtype=float)[order]
    valid = np.asarray(valid, dtype=bool)[order]
    if len(frames) and np.any(np.diff(frames) == 0):
        raise ValueError(f"duplicate frame for person {person_id}")
    breaks = np.flatnonzero(np.diff(frames) > 1) + 1
    segments = []
    for lo, hi in zip(np.r_[0, breaks], np.r_[breaks, len(frames)]):
        if hi > lo:
            segments.append(PersonTrack(person_id, int(frames[lo]), positions[lo:hi], valid[lo:hi]))
    return segments


@dataclass(frozen=True, eq=False)
class CameraView:
    """Dense per-camera arrays built from a list of tracks.

    ``positions[p, k - frame0]`` holds person ``person_ids[p]`` at local frame
    ``k``; absent frames are marked invalid.
    """

    camera_id: int
    skeleton: Skeleton
    person_ids: np.ndarray  # (P,)
    frame0: int
    positions: np.ndarray  # (P, F, S, 3)
    valid: np.ndarray  # (P, F, S)
    intrinsics: object = None
    fps: float = 30.0

    @classmethod
    def from_tracks(cls, camera_id, skeleton, tracks, intrinsics=None, fps=30.0):
        if not tracks:
            return cls(camera_id, skeleton, np.zeros(0, dtype=int), 0,
                       np.zeros((0, 0, skeleton.n_joints, 3)),
                       np.zeros((0, 0, skeleton.n_joints), dtype=bool), intrinsics, fps)
        for tr in tracks:
            if tr.n_joints != skeleton.n_joints:
                raise SkeletonMismatch(
                    f"track of person {tr.person_id} has {tr.n_joints} joints, "
                    f"skeleton has {skeleton.n_joints}")
        ids = sorted({tr.person_id for tr in tracks})
        lo = min(tr.start for tr in tracks)
        hi = max(tr.stop for tr in tracks)
        pos = np.zeros((len(ids), hi - lo, skeleton.n_joints, 3))
        val = np.zeros((len(ids), hi - lo, skeleton.n_joints), dtype=bool)
        row = {pid: i for i, pid in enumerate(ids)}
        for tr in tracks:
            i = row[tr.person_id]
            pos[i, tr.start - lo:tr.stop - lo] = np.where(tr.valid[..., None], tr.positions, 0.0)
            val[i, tr.start - lo:tr.stop - lo] = tr.valid
        return cls(camera_id, skeleton, np.array(ids), lo, pos, val, intrinsics, fps)

    @property
    def n_persons(self):
        return len(self.person_ids)

    @property
    def n_frames(self):
        return self.positions.shape[1]

    @property
    def frame_range(self):
        return self.frame0, self.frame0 + self.n_frames

    def orientations(self):
        return bone_directions(self.positions, self.valid, self.skeleton.parents)

    def bearings(self):
        """Unit rays toward every joint, camera frame."""
        n = np.linalg.norm(self.positions, axis=-1)
        ok = self.valid & (n > 0)
        dirs = np.where(ok[..., None], self.positions / np.where(ok, n, 1.0)[..., None], 0.0)
        return dirs, ok

    def pixels(self):
        """Joint projections through the camera intrinsics, ``(P, F, S, 2)``.

        Joints at non-positive depth are reported invalid.
        """
        if self.intrinsics is None:
            raise ValueError(f"camera {self.camera_id} has no intrinsics")
        z = self.positions[..., 2]
        ok = self.valid & (z > 1e-9)
        safe = np.where(ok[..., None], self.positions, [0.0, 0.0, 1.0])
        return self.intrinsics.project_cam(safe), ok

    def select_persons(self, person_ids):
        rows = [int(np.flatnonzero(self.person_ids == pid)[0]) for pid in person_ids]
        return CameraView(self.camera_id, self.skeleton, self.person_ids[rows], self.frame0,
                          self.positions[rows], self.valid[rows], self.intrinsics, self.fps)

    def tracks(self):
        out = []
        for i, pid in enumerate(self.person_ids):
            present = self.valid[i].any(axis=-1)
            frames = np.flatnonzero(present) + self.frame0
            out.extend(split_at_gaps(int(pid), frames, self.positions[i][present],
                                     self.valid[i][present]))
        return out
