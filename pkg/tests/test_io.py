import json
import logging

import numpy as np
import pytest

from posecalib import io
from posecalib.config import PipelineConfig, load_config, save_config
from posecalib.exceptions import ConfigError, ParseError, SchemaError, SkeletonMismatch
from posecalib.geometry import CameraIntrinsics
from posecalib.pose_encoding import H36M_17, CameraView, PersonTrack, Skeleton

TWO = Skeleton(("root", "tip"), (-1, 0))


def _header(**kw):
    h = {"format": "posecalib-tracks", "version": 1, "camera_id": 0, "fps": 30.0,
         "skeleton": TWO.to_dict()}
    h.update(kw)
    return json.dumps(h)


def _write(tmp_path, lines):
    p = tmp_path / "t.jsonl"
    p.write_text("\n".join(lines) + "\n")
    return p


@pytest.mark.invariant
def test_track_file_round_trip(tmp_path, clean_scene):
    v = clean_scene.views[2]
    io.write_view(tmp_path / "c.jsonl", v)
    cid, skel, tracks, fps = io.load_tracks(tmp_path / "c.jsonl")
    assert cid == v.camera_id and skel == v.skeleton and fps == v.fps
    assert tracks == v.tracks()


@pytest.mark.invariant
def test_scene_round_trip(tmp_path, clean_scene):
    io.write_scene(tmp_path, clean_scene.views, clean_scene.truth)
    views, truth = io.load_scene(tmp_path)
    for a, b in zip(views, clean_scene.views):
        assert a.intrinsics == b.intrinsics
        np.testing.assert_array_equal(a.valid, b.valid)
        np.testing.assert_array_equal(a.positions, b.positions)
    assert truth.labels == clean_scene.truth.labels
    np.testing.assert_array_equal(truth.offsets, clean_scene.truth.offsets)
    for p, q in zip(truth.poses, clean_scene.truth.poses):
        np.testing.assert_allclose(p.R, q.R, atol=1e-15)
        np.testing.assert_array_equal(p.t, q.t)


def test_nan_joint_is_invalid_and_logged(tmp_path, caplog):
    p = _write(tmp_path, [_header(),
                          '{"frame": 0, "person": 1, "joints": [[0, 0, 1], [0, 0, 2]]}',
                          '{"frame": 1, "person": 1, "joints": [[0, 0, 1], [NaN, 0, 2]]}'])
    with caplog.at_level(logging.WARNING, logger="posecalib"):
        _, _, tracks, _ = io.load_tracks(p)
    assert tracks[0].valid.tolist() == [[True, True], [True, False]]
    assert "line 3" in caplog.text


def test_null_joint_is_invalid(tmp_path):
    p = _write(tmp_path, [_header(), '{"frame": 4, "person": 0, "joints": [[0, 0, 1], null]}'])
    _, _, tracks, _ = io.load_tracks(p)
    assert tracks[0].start == 4 and tracks[0].valid.tolist() == [[True, False]]


def test_missing_header(tmp_path):
    p = _write(tmp_path, ['{"frame": 0, "person": 1, "joints": [[0, 0, 1], [0, 0, 2]]}'])
    with pytest.raises(SchemaError):
        io.load_tracks(p)


def test_bad_version(tmp_path):
    with pytest.raises(SchemaError):
        io.load_tracks(_write(tmp_path, [_header(version=7)]))


def test_parse_error_reports_line(tmp_path):
    p = _write(tmp_path, [_header(), '{"frame": 0, "person": 1, "joints": [[0, 0, 1], [0, 0, 2]]}',
                          "{oops"])
    with pytest.raises(ParseError) as info:
        io.load_tracks(p)
    assert info.value.line == 3


def test_joint_count_mismatch(tmp_path):
    p = _write(tmp_path, [_header(), '{"frame": 0, "person": 1, "joints": [[0, 0, 1]]}'])
    with pytest.raises(SkeletonMismatch):
        io.load_tracks(p)


def test_gaps_split_tracks(tmp_path):
    rec = '{"frame": %d, "person": 2, "joints": [[0, 0, 1], [0, 0, 2]]}'
    p = _write(tmp_path, [_header()] + [rec % f for f in (0, 1, 5, 6, 7)])
    _, _, tracks, _ = io.load_tracks(p)
    assert [(t.start, len(t)) for t in tracks] == [(0, 2), (5, 3)]


def test_intrinsics_round_trip(tmp_path):
    Ks = [CameraIntrinsics(1000.0, 1001.5, 960.0, 540.0, 1920, 1080),
          CameraIntrinsics(800.0, 800.0, 320.5, 240.25)]
    io.write_intrinsics(tmp_path / "k.json", Ks)
    assert io.load_intrinsics(tmp_path / "k.json") == {0: Ks[0], 1: Ks[1]}


def test_intrinsics_validation(tmp_path):
    p = tmp_path / "k.json"
    p.write_text(json.dumps({"format": "posecalib-intrinsics", "version": 1, "cameras": [
        {"id": 0, "fx": -1, "fy": 1, "cx": 0, "cy": 0}]}))
    with pytest.raises(SchemaError):
        io.load_intrinsics(p)


def test_floats_keep_17_digits():
    assert io.format_float(0.1) == "0.10000000000000001"
    assert io.format_float(2) == "2.0"
    assert io.dumps({"a": [np.float64(1 / 3), None, float("nan")]}) == \
        '{"a": [0.33333333333333331, null, null]}'
    x = np.random.default_rng(0).normal(size=50)
    assert np.array_equal(json.loads(io.dumps(x)), x)


def test_config_round_trip(tmp_path):
    cfg = PipelineConfig(window=7, sync=False, translation_joints=(1, 2, 3), seed=9)
    save_config(cfg, tmp_path / "c.yaml")
    assert load_config(tmp_path / "c.yaml") == cfg


def test_config_rejects_unknown_and_invalid(tmp_path):
    (tmp_path / "c.yaml").write_text("window: 5\nbogus: 1\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "c.yaml")
    with pytest.raises(ConfigError):
        PipelineConfig(window=0)
    with pytest.raises(ConfigError):
        PipelineConfig(stop_after="iba")


def test_workers_from_environment(monkeypatch):
    monkeypatch.setenv("POSECALIB_WORKERS", "3")
    assert PipelineConfig().n_workers == 3
    assert PipelineConfig(workers=2).n_workers == 2
    monkeypatch.setenv("POSECALIB_WORKERS", "x")
    with pytest.raises(ConfigError):
        PipelineConfig().n_workers


def test_csv_converter(tmp_path):
    rows = ["frame,person,joint,x,y,z"]
    for f in range(3):
        for j in range(2):
            z = "" if (f, j) == (1, 1) else str(2.0 + j)
            rows.append(f"{f},5,{j},0.1,0.2,{z}")
    (tmp_path / "a.csv").write_text("\n".join(rows) + "\n")
    tracks = io.convert_csv(tmp_path / "a.csv", TWO)
    assert len(tracks) == 1 and tracks[0].person_id == 5
    assert tracks[0].valid.tolist() == [[True, True], [True, False], [True, True]]


def test_npz_converter(tmp_path):
    pos = np.random.default_rng(0).normal(size=(2, 4, 17, 3))
    pos[1, 2] = np.nan
    np.savez(tmp_path / "a.npz", positions=pos, person_ids=np.array([7, 9]), frame0=10)
    tracks = io.convert_npz(tmp_path / "a.npz", H36M_17)
    assert [(t.person_id, t.start, len(t)) for t in tracks] == [(7, 10, 4), (9, 10, 2), (9, 13, 1)]


def test_npz_wrong_skeleton(tmp_path):
    np.savez(tmp_path / "a.npz", positions=np.zeros((1, 2, 5, 3)))
    with pytest.raises(SkeletonMismatch):
        io.convert_npz(tmp_path / "a.npz", H36M_17)
