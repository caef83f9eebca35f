"""
Keypoint import, JSON reports and the CSV dumps behind the plotting script.
"""

import csv
import json
import logging
import math
import os
from collections import defaultdict
from contextlib import contextmanager
from typing import Dict, Iterable, List

import numpy as np

from stabilizer.errors import SourceError
from stabilizer.observer import KeypointSet


logger = logging.getLogger(__name__)

TRAJECTORY_FIELDS = ["frame", "row", "col", "ox", "oy", "sx", "sy"]
MOTION_FIELDS = ["frame", "row", "col", "dx", "dy"]
FRAME_METRIC_FIELDS = ["frame", "Ct", "Dt", "psnr"]
SPECTRUM_FIELDS = ["channel", "bin", "energy"]


def load_keypoints(path: str) -> Dict[int, KeypointSet]:
    """Read `frame_index,x,y,score,detector_id` lines into one KeypointSet per frame"""
    rows = defaultdict(list)
    try:
        with open(path, "r", encoding="utf-8", newline="") as f:
            for line_no, row in enumerate(csv.reader(f), start=1):
                if not row or row[0].startswith("#"):
                    continue
                if len(row) != 5:
                    raise SourceError(f"{path}:{line_no}: expected 5 fields, got {len(row)}")
                try:
                    frame, x, y, score = int(row[0]), float(row[1]), float(row[2]), float(row[3])
                except ValueError as e:
                    raise SourceError(f"{path}:{line_no}: {e}") from e
                if not 0.0 <= score <= 1.0:
                    raise SourceError(f"{path}:{line_no}: score {score} outside [0, 1]")
                rows[frame].append((x, y, score, row[4].strip()))
    except OSError as e:
        raise SourceError(f"cannot read keypoints {path}: {e}") from e

    sets = {}
    for frame, items in rows.items():
        sets[frame] = KeypointSet(np.array([(x, y) for x, y, _, _ in items], dtype=np.float64),
                                  np.array([s for _, _, s, _ in items], dtype=np.float64),
                                  np.array([d for _, _, _, d in items], dtype=object),
                                  frame, (0, 0))
    logger.info(f"Loaded keypoints for {len(sets)} frames from {path}")
    return sets


def _json_default(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"{type(value).__name__} is not JSON serializable")


def _finite(value):
    if isinstance(value, float) and math.isinf(value):
        return "inf" if value > 0 else "-inf"
    if isinstance(value, dict):
        return {k: _finite(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_finite(v) for v in value]
    return value


def write_json(path: str, doc: dict) -> None:
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(_finite(doc), f, indent=2, default=_json_default)


def read_json(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def write_csv(path: str, fieldnames: List[str], rows: Iterable[dict]) -> None:
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


class GridDump:
    """Per-vertex CSV rows appended frame by frame"""

    def __init__(self, stream, fieldnames: List[str]):
        self.writer = csv.writer(stream)
        self.writer.writerow(fieldnames)

    def write_frame(self, frame: int, *grids: np.ndarray) -> None:
        rows, cols = grids[0].shape[:2]
        for r in range(rows):
            for c in range(cols):
                values = []
                for g in grids:
                    values += [f"{g[r, c, 0]:.6f}", f"{g[r, c, 1]:.6f}"]
                self.writer.writerow([frame, r, c] + values)


@contextmanager
def open_grid_dump(path: str, fieldnames: List[str]):
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    f = open(path, "w", encoding="utf-8", newline="")
    try:
        yield GridDump(f, fieldnames)
    finally:
        f.close()


def read_trajectory_dump(path: str) -> Dict[str, np.ndarray]:
    """Trajectory dump back as arrays keyed by column name"""
    with open(path, "r", encoding="utf-8", newline="") as f:
        rows = list(csv.DictReader(f))
    return {name: np.array([float(r[name]) for r in rows]) for name in TRAJECTORY_FIELDS}
