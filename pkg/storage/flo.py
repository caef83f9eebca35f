"""
Middlebury .flo reader/writer and the per-frame flow loader used for flow import.
"""

import os
from typing import Callable

import numpy as np

from stabilizer.errors import FlowFormatError, SourceError
from stabilizer.observer import FlowField


FLO_MAGIC = 202021.25  # b"PIEH" read as little-endian float32


def read_flo(path: str) -> FlowField:
    with open(path, "rb") as f:
        magic = np.fromfile(f, "<f4", count=1)
        if len(magic) != 1 or magic[0] != FLO_MAGIC:
            raise FlowFormatError(f"{path}: bad magic number")
        dims = np.fromfile(f, "<i4", count=2)
        if len(dims) != 2 or dims[0] <= 0 or dims[1] <= 0:
            raise FlowFormatError(f"{path}: bad dimensions")
        width, height = int(dims[0]), int(dims[1])
        data = np.fromfile(f, "<f4", count=2 * width * height)
    if len(data) != 2 * width * height:
        raise FlowFormatError(f"{path}: expected {2 * width * height} floats, got {len(data)}")
    return FlowField(data.reshape(height, width, 2).astype(np.float32))


def write_flo(path: str, flow: FlowField) -> None:
    with open(path, "wb") as f:
        np.array([FLO_MAGIC], dtype="<f4").tofile(f)
        np.array([flow.width, flow.height], dtype="<i4").tofile(f)
        np.ascontiguousarray(flow.vectors, dtype="<f4").tofile(f)


def flow_loader(directory: str) -> Callable[[int], FlowField]:
    """Loader for `<t>.flo` files, the backward flow into frame t-1"""
    def load(index: int) -> FlowField:
        path = os.path.join(directory, f"{index}.flo")
        if not os.path.exists(path):
            raise SourceError(f"missing flow file {path}")
        return read_flo(path)
    return load
