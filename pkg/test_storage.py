#!/usr/bin/env python3
"""
Tests for frame I/O, .flo files, keypoint import and report writers
"""

import json
import math
import os
import sys

import numpy as np
import pytest

# Add project root to path
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from evaluation.synthetic import make_texture
from stabilizer.errors import FlowFormatError, SourceError
from stabilizer.observer import FlowField, Frame
from storage.flo import FLO_MAGIC, flow_loader, read_flo, write_flo
from storage.frames import list_frame_files, load_frames, open_frame_sink, write_frames
from storage.reports import (
    TRAJECTORY_FIELDS, load_keypoints, open_grid_dump, read_json, read_trajectory_dump, write_json,
)


def test_flo_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    flow = FlowField(rng.normal(0, 3, (7, 11, 2)).astype(np.float32))
    path = str(tmp_path / "0.flo")
    write_flo(path, flow)
    assert os.path.getsize(path) == 12 + 7 * 11 * 2 * 4

    back = read_flo(path)
    assert (back.width, back.height) == (11, 7)
    assert np.array_equal(back.vectors, flow.vectors)


def test_flo_rejects_bad_files(tmp_path):
    bad_magic = tmp_path / "bad.flo"
    with open(bad_magic, "wb") as f:
        np.array([1.0], dtype="<f4").tofile(f)
        np.array([2, 2], dtype="<i4").tofile(f)
        np.zeros(8, dtype="<f4").tofile(f)
    with pytest.raises(FlowFormatError):
        read_flo(str(bad_magic))

    truncated = tmp_path / "short.flo"
    with open(truncated, "wb") as f:
        np.array([FLO_MAGIC], dtype="<f4").tofile(f)
        np.array([4, 4], dtype="<i4").tofile(f)
        np.zeros(10, dtype="<f4").tofile(f)
    with pytest.raises(FlowFormatError):
        read_flo(str(truncated))


def test_flow_loader(tmp_path):
    write_flo(str(tmp_path / "3.flo"), FlowField.zeros(5, 4))
    load = flow_loader(str(tmp_path))
    assert load(3).vectors.shape == (4, 5, 2)
    with pytest.raises(SourceError):
        load(4)


def test_load_keypoints(tmp_path):
    path = tmp_path / "kp.csv"
    path.write_text("# frame,x,y,score,detector\n"
                    "0,10.5,20,0.9,superpoint\n"
                    "0,30,40,0.2,superpoint\n"
                    "2,5,6,1.0,sift\n")
    sets = load_keypoints(str(path))
    assert sorted(sets) == [0, 2]
    assert len(sets[0]) == 2
    assert np.allclose(sets[0].xy, [[10.5, 20.0], [30.0, 40.0]])
    assert np.allclose(sets[0].scores, [0.9, 0.2])
    assert list(sets[2].detector_ids) == ["sift"]
    assert sets[2].frame_index == 2


@pytest.mark.parametrize("line", [
    "0,1,2,0.5\n",
    "0,1,2,1.5,orb\n",
    "zero,1,2,0.5,orb\n",
])
def test_load_keypoints_rejects_malformed_lines(tmp_path, line):
    path = tmp_path / "kp.csv"
    path.write_text("0,1,1,0.5,orb\n" + line)
    with pytest.raises(SourceError):
        load_keypoints(str(path))


def test_load_keypoints_missing_file(tmp_path):
    with pytest.raises(SourceError):
        load_keypoints(str(tmp_path / "nope.csv"))


def test_frame_directory_round_trip(tmp_path):
    frames = [Frame(i, make_texture(24, 16, seed=i)) for i in range(12)]
    out = str(tmp_path / "frames")
    assert write_frames(out, frames) == 12

    paths = list_frame_files(out)
    assert [os.path.basename(p) for p in paths[:2]] == ["000000.png", "000001.png"]
    loaded = load_frames(out)
    assert [f.index for f in loaded] == list(range(12))
    for a, b in zip(frames, loaded):
        assert np.array_equal(a.data, b.data)


def test_frame_files_sorted_numerically(tmp_path):
    for n in (10, 2, 1):
        write_frames(str(tmp_path), [Frame(0, np.full((4, 4), n, dtype=np.uint8))])
        os.rename(tmp_path / "000000.png", tmp_path / f"frame{n}.png")
    loaded = load_frames(str(tmp_path))
    assert [int(f.data[0, 0]) for f in loaded] == [1, 2, 10]


def test_raw_stream(tmp_path):
    path = str(tmp_path / "clip.gray")
    frames = [Frame(i, np.full((3, 5), i * 10, dtype=np.uint8)) for i in range(4)]
    with open_frame_sink(path, raw=True) as sink:
        for frame in frames:
            sink.write(frame)
    assert os.path.getsize(path) == 4 * 15

    loaded = load_frames(path, (5, 3))
    assert [int(f.data[0, 0]) for f in loaded] == [0, 10, 20, 30]

    with open(path, "ab") as f:
        f.write(b"\x00" * 7)
    with pytest.raises(SourceError):
        load_frames(path, (5, 3))


def test_missing_or_unsized_input(tmp_path):
    with pytest.raises(SourceError):
        load_frames(str(tmp_path / "missing"))
    raw = tmp_path / "clip.gray"
    raw.write_bytes(b"\x00" * 16)
    with pytest.raises(SourceError):
        load_frames(str(raw))


def test_write_json_handles_numpy_and_infinity(tmp_path):
    path = str(tmp_path / "sub" / "report.json")
    write_json(path, {"psnr": math.inf, "frames": np.int64(3), "values": np.arange(3),
                      "nested": [{"x": np.float32(0.5)}]})
    doc = read_json(path)
    assert doc == {"psnr": "inf", "frames": 3, "values": [0, 1, 2], "nested": [{"x": 0.5}]}
    with open(path, encoding="utf-8") as f:
        assert "Infinity" not in f.read()
    assert json.loads(json.dumps(doc)) == doc


def test_trajectory_dump(tmp_path):
    path = str(tmp_path / "traj.csv")
    raw = np.arange(2 * 3 * 2, dtype=np.float64).reshape(2, 3, 2)
    smoothed = raw + 0.25
    with open_grid_dump(path, TRAJECTORY_FIELDS) as dump:
        dump.write_frame(0, raw, smoothed)
        dump.write_frame(1, raw + 1, smoothed + 1)
    back = read_trajectory_dump(path)
    assert len(back["frame"]) == 12
    assert back["col"][:3].tolist() == [0.0, 1.0, 2.0]
    assert back["ox"][1] == 2.0 and back["sy"][1] == 3.25
    assert back["ox"][6] == 1.0
