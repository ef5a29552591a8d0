"""File formats: track files, intrinsics, ground truth and results.

Track files are JSON lines. The first line is a header::

    {"format": "posecalib-tracks", "version": 1, "camera_id": 0, "fps": 30.0,
     "skeleton": {"names": [...], "parents": [...]}}

and every further line is one ``(frame, person)`` record::

    {"frame": 12, "person": 3, "joints": [[x, y, z], null, ...]}

with camera-frame joint positions; ``null`` (or NaN) marks an invalid joint.
All floats are written with 17 significant digits.
"""
from __future__ import annotations

import json
import logging
import math
import os
from pathlib import Path

import numpy as np

from .exceptions import ParseError, SchemaError, SkeletonMismatch
from .geometry import CameraIntrinsics, CameraPose, quat_to_rotation, rotation_to_quat
from .pose_encoding import CameraView, Skeleton, split_at_gaps

log = logging.getLogger(__name__)

TRACK_FORMAT = "posecalib-tracks"
INTRINSICS_FORMAT = "posecalib-intrinsics"
TRUTH_FORMAT = "posecalib-ground-truth"
RESULT_FORMAT = "posecalib-result"
VERSION = 1


# -- serialisation -------------------------------------------------------------

def format_float(x):
    x = float(x)
    if math.isnan(x) or math.isinf(x):
        return "null"
    s = "%.17g" % x
    if "." not in s and "e" not in s and "n" not in s:
        s += ".0"
    return s


def dumps(obj, indent=None, _level=0):
    """JSON text with 17-significant-digit floats; NaN/inf become ``null``."""
    pad = "" if indent is None else "\n" + " " * (indent * (_level + 1))
    end = "" if indent is None else "\n" + " " * (indent * _level)
    sep = ", " if indent is None else ","
    if obj is None or isinstance(obj, (bool, np.bool_)):
        return json.dumps(None if obj is None else bool(obj))
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return format_float(obj)
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, np.ndarray):
        return dumps(obj.tolist(), indent, _level)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {dumps(v, indent, _level + 1)}"
                 for k, v in obj.items()]
        return "{" + sep.join(items) + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        items = [pad + dumps(v, indent, _level + 1) for v in obj]
        return "[" + sep.join(items) + end + "]"
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def _write_text(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="\n") as fh:
        fh.write(text)


def _read_json(path, kind):
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON in {kind} file: {exc.msg}", exc.lineno) from None


# -- tracks --------------------------------------------------------------------

def track_lines(camera_id, skeleton, tracks, fps=30.0):
    """Header and record lines for one camera, sorted by (frame, person)."""
    header = {"format": TRACK_FORMAT, "version": VERSION, "camera_id": int(camera_id),
              "fps": float(fps), "skeleton": skeleton.to_dict()}
    lines = [dumps(header)]
    records = []
    for tr in tracks:
        for i in range(len(tr)):
            joints = [p.tolist() if ok else None for p, ok in zip(tr.positions[i], tr.valid[i])]
            records.append((tr.start + i, tr.person_id, joints))
    records.sort(key=lambda r: (r[0], r[1]))
    for frame, pid, joints in records:
        lines.append(dumps({"frame": int(frame), "person": int(pid), "joints": joints}))
    return lines


def write_tracks(path, camera_id, skeleton, tracks, fps=30.0):
    _write_text(path, "\n".join(track_lines(camera_id, skeleton, tracks, fps)) + "\n")


def write_view(path, view):
    write_tracks(path, view.camera_id, view.skeleton, view.tracks(), view.fps)


def _parse_header(obj, path):
    if not isinstance(obj, dict) or obj.get("format") != TRACK_FORMAT:
        raise SchemaError(f"{path}: missing track-file header")
    if obj.get("version") != VERSION:
        raise SchemaError(f"{path}: unsupported track format version {obj.get('version')!r}")
    for key in ("camera_id", "skeleton"):
        if key not in obj:
            raise SchemaError(f"{path}: header lacks {key!r}")
    try:
        skel = Skeleton.from_dict(obj["skeleton"])
    except (KeyError, TypeError) as exc:
        raise SchemaError(f"{path}: malformed skeleton: {exc}") from None
    return int(obj["camera_id"]), skel, float(obj.get("fps", 30.0))


def _parse_joint(j, lineno):
    if j is None:
        return [np.nan] * 3, False
    if not isinstance(j, list) or len(j) != 3:
        raise ParseError("joint must be [x, y, z] or null", lineno)
    try:
        xyz = [float("nan") if v is None else float(v) for v in j]
    except (TypeError, ValueError):
        raise ParseError("joint coordinates must be numbers", lineno) from None
    return xyz, all(math.isfinite(v) for v in xyz)


def load_tracks(path):
    """Read a track file.

    Returns
    -------
    camera_id : int
    skeleton : Skeleton
    tracks : list of PersonTrack
        Split into contiguous segments at frame gaps.
    fps : float

    Raises
    ------
    ParseError
        Malformed JSON or records (with the offending line number).
    SchemaError
        Missing or unsupported header.
    SkeletonMismatch
        A record whose joint count differs from the skeleton.
    """
    path = str(path)
    per_person = {}
    header = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON: {exc.msg}", lineno) from None
            if header is None:
                header = _parse_header(obj, path)
                continue
            if not isinstance(obj, dict) or not {"frame", "person", "joints"} <= set(obj):
                raise ParseError("record needs frame, person and joints", lineno)
            frame, pid, joints = obj["frame"], obj["person"], obj["joints"]
            if not isinstance(frame, int) or not isinstance(pid, int):
                raise ParseError("frame and person must be integers", lineno)
            if not isinstance(joints, list):
                raise ParseError("joints must be a list", lineno)
            if len(joints) != header[1].n_joints:
                raise SkeletonMismatch(
                    f"line {lineno}: {len(joints)} joints, skeleton has {header[1].n_joints}")
            pos, val = zip(*(_parse_joint(j, lineno) for j in joints))
            pos = np.array(pos, dtype=float)
            nan_joints = [k for k, j in enumerate(joints)
                          if j is not None and not np.all(np.isfinite(pos[k]))]
            if nan_joints:
                log.warning("%s line %d: non-finite joints %s marked invalid", path, lineno,
                            nan_joints)
            rec = per_person.setdefault(pid, ([], [], []))
            if rec[0] and frame <= rec[0][-1]:
                raise ParseError(f"frame {frame} of person {pid} does not increase", lineno)
            rec[0].append(frame)
            rec[1].append(pos)
            rec[2].append(np.array(val, dtype=bool))
    if header is None:
        raise SchemaError(f"{path}: empty file (missing header)")
    camera_id, skel, fps = header
    tracks = []
    for pid in sorted(per_person):
        frames, pos, val = per_person[pid]
        tracks.extend(split_at_gaps(pid, frames, np.array(pos), np.array(val)))
    return camera_id, skel, tracks, fps


# -- intrinsics ----------------------------------------------------------------

def intrinsics_to_dict(intrinsics):
    cams = []
    for cid, K in enumerate(intrinsics):
        cams.append({"id": cid, "fx": K.fx, "fy": K.fy, "cx": K.cx, "cy": K.cy,
                     "width": K.width, "height": K.height})
    return {"format": INTRINSICS_FORMAT, "version": VERSION, "cameras": cams}


def write_intrinsics(path, intrinsics):
    _write_text(path, dumps(intrinsics_to_dict(intrinsics), indent=2) + "\n")


def load_intrinsics(path):
    """``{camera id: CameraIntrinsics}``; validates focal lengths and that
    the principal point lies inside the image when its size is given."""
    d = _read_json(path, "intrinsics")
    if not isinstance(d, dict) or d.get("format") != INTRINSICS_FORMAT:
        raise SchemaError(f"{path}: not an intrinsics file")
    out = {}
    for cam in d.get("cameras", []):
        try:
            cid = int(cam["id"])
            fx, fy, cx, cy = (float(cam[k]) for k in ("fx", "fy", "cx", "cy"))
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"{path}: malformed camera entry: {exc}") from None
        w, h = cam.get("width"), cam.get("height")
        if not (fx > 0 and fy > 0):
            raise SchemaError(f"{path}: camera {cid} has non-positive focal length")
        if w is not None and h is not None and not (0 <= cx <= w and 0 <= cy <= h):
            raise SchemaError(f"{path}: camera {cid} principal point outside the image")
        out[cid] = CameraIntrinsics(fx, fy, cx, cy, None if w is None else int(w),
                                    None if h is None else int(h))
    return out


# -- poses, ground truth, results -------------------------------------------------

def pose_to_dict(pose):
    return {"quaternion": rotation_to_quat(pose.R).tolist(), "translation": pose.t.tolist()}


def pose_from_dict(d):
    q = np.asarray(d["quaternion"], dtype=float)
    if q.shape != (4,) or not np.isfinite(q).all() or abs(np.linalg.norm(q) - 1.0) > 1e-6:
        raise SchemaError("quaternion must be a unit 4-vector (w, x, y, z)")
    return CameraPose(quat_to_rotation(q), np.asarray(d["translation"], dtype=float))


def truth_to_dict(truth):
    return {"format": TRUTH_FORMAT, "version": VERSION,
            "cameras": [pose_to_dict(p) for p in truth.poses],
            "offsets": [float(o) for o in truth.offsets],
            "labels": [{str(k): int(v) for k, v in sorted(lab.items())} for lab in truth.labels]}


def write_ground_truth(path, truth):
    _write_text(path, dumps(truth_to_dict(truth), indent=2) + "\n")


def load_ground_truth(path):
    from .synth import GroundTruth
    d = _read_json(path, "ground-truth")
    if not isinstance(d, dict) or d.get("format") != TRUTH_FORMAT:
        raise SchemaError(f"{path}: not a ground-truth file")
    try:
        poses = [pose_from_dict(c) for c in d["cameras"]]
        offsets = np.asarray(d["offsets"], dtype=float)
        labels = [{int(k): int(v) for k, v in lab.items()} for lab in d["labels"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"{path}: malformed ground truth: {exc}") from None
    return GroundTruth(poses, offsets, labels)


def result_to_dict(result):
    """Plain-data form of a :class:`~posecalib.pipeline.PipelineResult`."""
    cams = []
    for c, (pose, off) in enumerate(zip(result.poses, result.offsets)):
        d = pose_to_dict(pose)
        d.update(id=c, offset=float(off))
        cams.append(d)
    groups = result.association.members() if result.association is not None else {}
    assoc = [{"global_id": int(g), "members": {str(c): int(p) for c, p in sorted(m.items())}}
             for g, m in sorted(groups.items())]
    return {"format": RESULT_FORMAT, "version": VERSION, "cameras": cams,
            "associations": assoc, "stages": result.stage_summaries(),
            "pairs": result.pair_summaries(), "config": result.config.to_dict(),
            "seed": int(result.config.seed), "completed": result.completed,
            "error": result.error}


def write_result(path, result):
    _write_text(path, dumps(result_to_dict(result), indent=2) + "\n")


def load_result(path):
    """Read a result file back into ``(poses, offsets, GlobalAssociation, dict)``."""
    from .multiview import GlobalAssociation
    d = _read_json(path, "result")
    if not isinstance(d, dict) or d.get("format") != RESULT_FORMAT:
        raise SchemaError(f"{path}: not a result file")
    try:
        cams = sorted(d["cameras"], key=lambda c: c["id"])
        poses = [pose_from_dict(c) for c in cams]
        offsets = np.array([c["offset"] for c in cams], dtype=float)
        labels = {}
        for g in d["associations"]:
            for c, p in g["members"].items():
                labels[(int(c), int(p))] = int(g["global_id"])
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"{path}: malformed result: {exc}") from None
    return poses, offsets, GlobalAssociation(labels), d


# -- scene directories ------------------------------------------------------------

def track_path(directory, camera_id):
    return os.path.join(directory, f"camera_{camera_id}.jsonl")


def write_scene(directory, views, truth=None):
    """Write ``camera_<id>.jsonl`` per view, ``intrinsics.json`` and, when
    given, ``ground_truth.json``."""
    os.makedirs(directory, exist_ok=True)
    for v in views:
        write_view(track_path(directory, v.camera_id), v)
    write_intrinsics(os.path.join(directory, "intrinsics.json"), [v.intrinsics for v in views])
    if truth is not None:
        write_ground_truth(os.path.join(directory, "ground_truth.json"), truth)


def load_scene(directory, intrinsics_path=None):
    """Views (sorted by camera id) and the ground truth if present."""
    directory = str(directory)
    intr = load_intrinsics(intrinsics_path or os.path.join(directory, "intrinsics.json"))
    files = sorted(f for f in os.listdir(directory) if f.endswith(".jsonl"))
    if not files:
        raise SchemaError(f"{directory}: no track files")
    views = []
    for f in files:
        cid, skel, tracks, fps = load_tracks(os.path.join(directory, f))
        if cid not in intr:
            raise SchemaError(f"{f}: no intrinsics for camera {cid}")
        views.append(CameraView.from_tracks(cid, skel, tracks, intr[cid], fps))
    views.sort(key=lambda v: v.camera_id)
    ids = [v.camera_id for v in views]
    if ids != list(range(len(views))):
        raise SchemaError(f"camera ids must be 0..N-1, got {ids}")
    skels = {v.skeleton for v in views}
    if len(skels) > 1:
        raise SkeletonMismatch("track files declare different skeletons")
    gt_path = os.path.join(directory, "ground_truth.json")
    truth = load_ground_truth(gt_path) if os.path.exists(gt_path) else None
    if truth is not None:
        truth.intrinsics = [v.intrinsics for v in views]
    return views, truth


# -- converters --------------------------------------------------------------------

def convert_csv(path, skeleton):
    """Tracks from a CSV with columns ``frame,person,joint,x,y,z`` (header
    row required; empty or NaN coordinates mark invalid joints)."""
    import csv
    rows = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        need = {"frame", "person", "joint", "x", "y", "z"}
        if reader.fieldnames is None or not need <= set(reader.fieldnames):
            raise SchemaError(f"{path}: CSV needs columns {sorted(need)}")
        for lineno, r in enumerate(reader, start=2):
            try:
                f, p, j = int(r["frame"]), int(r["person"]), int(r["joint"])
                xyz = [float(r[k]) if r[k] not in ("", None) else np.nan for k in "xyz"]
            except ValueError as exc:
                raise ParseError(str(exc), lineno) from None
            if not 0 <= j < skeleton.n_joints:
                raise SkeletonMismatch(f"line {lineno}: joint {j} outside the skeleton")
            rows.setdefault(p, {}).setdefault(f, np.full((skeleton.n_joints, 3), np.nan))[j] = xyz
    tracks = []
    for p in sorted(rows):
        frames = sorted(rows[p])
        pos = np.array([rows[p][f] for f in frames])
        tracks.extend(split_at_gaps(p, frames, pos, np.isfinite(pos).all(axis=-1)))
    return tracks


def convert_npz(path, skeleton):
    """Tracks from an ``.npz`` holding ``positions`` ``(P, F, S, 3)`` (NaN for
    missing), optional ``person_ids`` ``(P,)`` and ``frame0``."""
    data = np.load(path)
    if "positions" not in data:
        raise SchemaError(f"{path}: npz needs a 'positions' array")
    pos = np.asarray(data["positions"], dtype=float)
    if pos.ndim != 4 or pos.shape[-1] != 3:
        raise SchemaError(f"{path}: positions must have shape (P, F, S, 3)")
    if pos.shape[2] != skeleton.n_joints:
        raise SkeletonMismatch(f"{path}: {pos.shape[2]} joints, skeleton has {skeleton.n_joints}")
    ids = data["person_ids"] if "person_ids" in data else np.arange(pos.shape[0])
    frame0 = int(data["frame0"]) if "frame0" in data else 0
    tracks = []
    for p, pid in enumerate(ids):
        valid = np.isfinite(pos[p]).all(axis=-1)
        present = valid.any(axis=-1)
        frames = np.flatnonzero(present) + frame0
        tracks.extend(split_at_gaps(int(pid), frames, pos[p][present], valid[present]))
    return tracks
