"""Synthetic multi-camera scenes with articulated people.

Cameras sit on a jittered ring looking at the scene centre. People walk on a
smoothed random path while their limbs swing and wander. Camera ``c`` sees
world time ``k + offsets[c]`` at its local frame ``k``; fractional offsets
are realised by linear interpolation of the world joints. Joint positions are
reported in each camera frame, perturbed by isotropic noise scaled so the
pixel perturbation has standard deviation ``sigma``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter1d

from .exceptions import InvalidSpec
from .geometry import CameraIntrinsics, CameraPose, exp_map_batch
from .pose_encoding import H36M_17, CameraView, PersonTrack

# Rest bone vectors in the body frame (x: person's left, y: forward, z: up),
# metres, for the 17-joint skeleton. Row j is joint j minus its parent.
_H36M_BONES = np.array([
    [0.0, 0.0, 0.0],  # pelvis (root)
    [-0.13, 0.0, 0.0],  # r_hip
    [0.0, 0.02, -0.44],  # r_knee
    [0.0, -0.03, -0.43],  # r_ankle
    [0.13, 0.0, 0.0],  # l_hip
    [0.0, 0.02, -0.44],  # l_knee
    [0.0, -0.03, -0.43],  # l_ankle
    [0.0, 0.0, 0.23],  # spine
    [0.0, 0.01, 0.25],  # thorax
    [0.0, 0.03, 0.10],  # neck
    [0.0, 0.02, 0.12],  # head
    [0.16, -0.01, -0.02],  # l_shoulder
    [0.02, 0.0, -0.28],  # l_elbow
    [0.0, 0.05, -0.24],  # l_wrist
    [-0.16, -0.01, -0.02],  # r_shoulder
    [-0.02, 0.0, -0.28],  # r_elbow
    [0.0, 0.05, -0.24],  # r_wrist
])
_PELVIS_HEIGHT = 0.92
# joints whose bones swing periodically about the body x axis, with sign
_SWING = {2: 1.0, 3: 0.6, 5: -1.0, 6: -0.6, 12: -0.8, 13: -0.5, 15: 0.8, 16: 0.5}


@dataclass(frozen=True)
class SceneSpec:
    """Everything needed to generate one scene deterministically."""

    n_cameras: int = 4
    n_people: int = 3
    n_frames: int = 120
    offsets: tuple | None = None
    sigma: float = 0.0
    motion: str = "articulated"
    ring_radius: float = 5.0
    ring_height: float = 2.0
    radius_jitter: float = 0.3
    height_jitter: float = 0.2
    angle_jitter: float = 0.25
    area_radius: float = 1.5
    focal: float = 1000.0
    image_size: tuple = (1920, 1080)
    fps: float = 30.0
    walk_speed: float = 0.012
    articulation: float = 0.35
    swing_amplitude: float = 0.45
    visibility: tuple | None = None
    dropout: float = 0.0
    permute_ids: bool = True
    seed: int = 0

    def validate(self):
        if self.n_cameras < 1 or self.n_people < 1 or self.n_frames < 1:
            raise InvalidSpec("camera, people and frame counts must be positive")
        if self.sigma < 0 or not np.isfinite(self.sigma):
            raise InvalidSpec("sigma must be a finite non-negative number")
        if not 0.0 <= self.dropout < 1.0:
            raise InvalidSpec("dropout must lie in [0, 1)")
        if self.motion not in ("articulated", "linear", "static"):
            raise InvalidSpec(f"unknown motion model {self.motion!r}")
        if self.focal <= 0 or self.ring_radius <= self.area_radius + 1.0:
            raise InvalidSpec("cameras must be outside the walking area with a positive focal")
        if self.offsets is not None:
            if len(self.offsets) != self.n_cameras:
                raise InvalidSpec("one offset per camera is required")
            if self.offsets[0] != 0:
                raise InvalidSpec("camera 0 is the time reference; its offset must be 0")
        if self.visibility is not None:
            vis = np.asarray(self.visibility, dtype=bool)
            if vis.shape != (self.n_cameras, self.n_people):
                raise InvalidSpec("visibility must have shape (n_cameras, n_people)")

    @property
    def offset_array(self):
        if self.offsets is None:
            return np.zeros(self.n_cameras)
        return np.asarray(self.offsets, dtype=float)


@dataclass
class GroundTruth:
    """Ground-truth quantities for a generated scene.

    ``labels[c]`` maps camera ``c``'s local person id to the global person
    index; ``world_joints[p, i]`` is person ``p`` at world frame
    ``world_frame0 + i``.
    """

    poses: list
    offsets: np.ndarray
    labels: list
    world_joints: np.ndarray = None
    world_frame0: int = 0
    intrinsics: list = field(default_factory=list)

    def inverse_labels(self):
        """``{global person: {camera: local id}}``."""
        out = {}
        for c, lab in enumerate(self.labels):
            for local, g in lab.items():
                out.setdefault(int(g), {})[c] = int(local)
        return out


@dataclass
class SyntheticScene:
    spec: SceneSpec
    views: list
    truth: GroundTruth

    @property
    def intrinsics(self):
        return [v.intrinsics for v in self.views]


def noise_calibration(depth, K, sigma):
    """Isotropic camera-frame noise std giving ``sigma`` pixels at ``depth``.

    ``std = sigma * Z / f`` by similar triangles (first order).
    """
    f = K if np.isscalar(K) else K.focal
    return sigma * np.asarray(depth, dtype=float) / f


def look_at(center, target, up=(0.0, 0.0, 1.0)):
    """World-to-camera pose with +z toward ``target`` and +y pointing down."""
    center = np.asarray(center, dtype=float)
    fwd = np.asarray(target, dtype=float) - center
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    return CameraPose(R, -R @ center)


def camera_ring(spec, rng):
    poses = []
    for c in range(spec.n_cameras):
        a = 2 * np.pi * c / spec.n_cameras + rng.uniform(-spec.angle_jitter, spec.angle_jitter)
        r = spec.ring_radius + rng.uniform(-spec.radius_jitter, spec.radius_jitter)
        h = spec.ring_height + rng.uniform(-spec.height_jitter, spec.height_jitter)
        target = np.array([0.0, 0.0, 1.0]) + rng.normal(0.0, 0.1, 3)
        poses.append(look_at([r * np.cos(a), r * np.sin(a), h], target))
    return poses


def _smooth_walk(rng, n, dim, step, smooth):
    x = np.cumsum(rng.normal(0.0, step, (n, dim)), axis=0)
    return gaussian_filter1d(x, smooth, axis=0, mode="nearest")


def _rot_z_batch(a):
    c, s = np.cos(a), np.sin(a)
    R = np.zeros(a.shape + (3, 3))
    R[..., 0, 0], R[..., 0, 1] = c, -s
    R[..., 1, 0], R[..., 1, 1] = s, c
    R[..., 2, 2] = 1.0
    return R


def _person_motion(spec, rng, n):
    """World joints ``(n, S, 3)`` for one person."""
    bones = _H36M_BONES
    S = len(bones)
    t = np.arange(n)
    start = rng.uniform(-1.0, 1.0, 2) * spec.area_radius * 0.6
    heading0 = rng.uniform(-np.pi, np.pi)
    if spec.motion == "static":
        root = np.tile(np.r_[start, _PELVIS_HEIGHT], (n, 1))
        heading = np.full(n, heading0)
        tilt = rng.normal(0.0, spec.articulation, (S, 3))
        local = np.einsum("sij,sj->si", exp_map_batch(tilt), bones)
        local = np.broadcast_to(local, (n, S, 3))
    elif spec.motion == "linear":
        vel = rng.normal(0.0, spec.walk_speed, 2)
        root = np.c_[start + t[:, None] * vel, np.full(n, _PELVIS_HEIGHT)]
        heading = np.full(n, heading0)
        tilt = rng.normal(0.0, spec.articulation, (S, 3))
        local = np.broadcast_to(np.einsum("sij,sj->si", exp_map_batch(tilt), bones), (n, S, 3))
    else:
        walk = _smooth_walk(rng, n, 2, spec.walk_speed, 6.0)
        root = np.c_[start + walk, _PELVIS_HEIGHT + 0.02 * np.sin(2 * np.pi * t / 15.0)]
        # keep people inside the area by reflecting excursions
        r = np.linalg.norm(root[:, :2], axis=1)
        over = r > spec.area_radius
        root[over, :2] *= (2 * spec.area_radius - r[over] / 1.0)[:, None] / r[over][:, None]
        heading = heading0 + _smooth_walk(rng, n, 1, 0.03, 6.0)[:, 0]
        # slow wandering of every bone plus a periodic swing of the limbs
        drift = _smooth_walk(rng, n, 3 * S, 0.06, 5.0).reshape(n, S, 3)
        drift = spec.articulation * np.tanh(drift / max(spec.articulation, 1e-9))
        drift += rng.normal(0.0, spec.articulation, (1, S, 3))
        freq = rng.uniform(0.8, 1.2) / spec.fps
        phase = rng.uniform(0, 2 * np.pi)
        for j, sgn in _SWING.items():
            drift[:, j, 0] += sgn * spec.swing_amplitude * np.sin(2 * np.pi * freq * t + phase)
        local = np.einsum("nsij,sj->nsi", exp_map_batch(drift.reshape(-1, 3)).reshape(n, S, 3, 3),
                          bones)
    world_bones = np.einsum("nij,nsj->nsi", _rot_z_batch(heading), local)
    X = np.zeros((n, S, 3))
    X[:, 0] = root
    for j, p in enumerate(H36M_17.parents):
        if p >= 0:
            X[:, j] = X[:, p] + world_bones[:, j]
    return X


def _interp(X, times, frame0):
    """Linear interpolation of ``X[i]`` (world frame ``frame0 + i``) at ``times``."""
    u = np.asarray(times, dtype=float) - frame0
    i0 = np.clip(np.floor(u).astype(int), 0, len(X) - 2)
    a = (u - i0)[:, None, None]
    return (1 - a) * X[i0] + a * X[i0 + 1]


def generate(spec=None, **overrides):
    """Generate a scene.

    Parameters
    ----------
    spec : SceneSpec, optional
    **overrides
        Field overrides applied to ``spec`` (or to the defaults).

    Returns
    -------
    SyntheticScene
    """
    if spec is None:
        spec = SceneSpec(**overrides)
    elif overrides:
        from dataclasses import replace
        spec = replace(spec, **overrides)
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    poses = camera_ring(spec, rng)
    offsets = spec.offset_array
    lo = int(np.floor(min(offsets.min(), 0.0))) - 1
    hi = int(np.ceil(offsets.max())) + spec.n_frames + 1
    n_world = hi - lo + 1
    world = np.stack([_person_motion(spec, rng, n_world) for _ in range(spec.n_people)])
    w, h = spec.image_size
    K = CameraIntrinsics(spec.focal, spec.focal, w / 2.0, h / 2.0, w, h)
    vis = (np.ones((spec.n_cameras, spec.n_people), dtype=bool) if spec.visibility is None
           else np.asarray(spec.visibility, dtype=bool))
    noise_rng = np.random.default_rng([spec.seed, 1])
    views, labels = [], []
    local_frames = np.arange(spec.n_frames)
    for c, pose in enumerate(poses):
        perm = rng.permutation(spec.n_people) if spec.permute_ids else np.arange(spec.n_people)
        # local id perm[p] is given to global person p
        tracks, lab = [], {}
        for p in range(spec.n_people):
            Xw = _interp(world[p], local_frames + offsets[c], lo)
            Xc = Xw @ pose.R.T + pose.t
            std = noise_calibration(Xc[..., 2], K, spec.sigma)
            Xc = Xc + noise_rng.normal(size=Xc.shape) * std[..., None]
            valid = Xc[..., 2] > 0.1
            if spec.dropout > 0:
                valid &= noise_rng.random(valid.shape) >= spec.dropout
            if not vis[c, p]:
                continue
            Xc = np.where(valid[..., None], Xc, np.nan)
            tracks.append(PersonTrack(int(perm[p]), 0, Xc, valid))
            lab[int(perm[p])] = p
        views.append(CameraView.from_tracks(c, H36M_17, tracks, K, spec.fps))
        labels.append(lab)
    truth = GroundTruth(poses, offsets.copy(), labels, world, lo, [K] * spec.n_cameras)
    return SyntheticScene(spec, views, truth)
