"""
Frame sources and sinks: numbered image directories and raw gray8 streams.
"""

import logging
import os
import re
from contextlib import contextmanager
from typing import Iterator, List, Optional, Tuple

import cv2
import numpy as np

from stabilizer.errors import SinkError, SourceError
from stabilizer.observer import Frame


logger = logging.getLogger(__name__)

IMAGE_EXTENSIONS = (".png", ".pgm", ".ppm")
_NUMBER = re.compile(r"(\d+)")


def _frame_number(name: str) -> int:
    found = _NUMBER.findall(os.path.splitext(name)[0])
    return int(found[-1]) if found else -1


def list_frame_files(directory: str) -> List[str]:
    """Image files of a directory, ordered by the last number in their names"""
    names = [n for n in os.listdir(directory) if n.lower().endswith(IMAGE_EXTENSIONS)]
    names.sort(key=lambda n: (_frame_number(n), n))
    return [os.path.join(directory, n) for n in names]


def read_frame(path: str, index: int) -> Frame:
    data = cv2.imread(path, cv2.IMREAD_UNCHANGED)
    if data is None:
        raise SourceError(f"cannot decode frame {path}")
    if data.dtype != np.uint8:
        raise SourceError(f"{path}: expected 8-bit samples, got {data.dtype}")
    if data.ndim == 3 and data.shape[2] == 4:
        data = cv2.cvtColor(data, cv2.COLOR_BGRA2BGR)
    return Frame(index, data)


def iter_directory(directory: str) -> Iterator[Frame]:
    for index, path in enumerate(list_frame_files(directory)):
        yield read_frame(path, index)


def iter_raw(stream, width: int, height: int) -> Iterator[Frame]:
    frame_bytes = width * height
    index = 0
    while True:
        chunk = stream.read(frame_bytes)
        if not chunk:
            return
        if len(chunk) != frame_bytes:
            raise SourceError(f"raw stream ends inside frame {index} "
                              f"({len(chunk)} of {frame_bytes} bytes)")
        yield Frame(index, np.frombuffer(chunk, dtype=np.uint8).reshape(height, width).copy())
        index += 1


@contextmanager
def open_frame_source(path: str, raw_size: Optional[Tuple[int, int]] = None):
    """Context manager yielding an iterator of frames from a directory or raw file"""
    if not path or not os.path.exists(path):
        raise SourceError(f"input {path} does not exist")
    if raw_size is None:
        if not os.path.isdir(path):
            raise SourceError(f"input {path} is not a frame directory; raw files need a size")
        yield iter_directory(path)
        return
    stream = None
    try:
        try:
            stream = open(path, "rb")
        except OSError as e:
            raise SourceError(f"cannot open {path}: {e}") from e
        yield iter_raw(stream, raw_size[0], raw_size[1])
    finally:
        if stream:
            stream.close()


def load_frames(path: str, raw_size: Optional[Tuple[int, int]] = None) -> List[Frame]:
    with open_frame_source(path, raw_size) as frames:
        return list(frames)


class DirectorySink:
    def __init__(self, directory: str, frame_format: str = "png"):
        self.directory = directory
        self.frame_format = frame_format
        self.written = 0

    def write(self, frame: Frame) -> None:
        path = os.path.join(self.directory, f"{frame.index:06d}.{self.frame_format}")
        data = frame.data
        if self.frame_format == "pgm" and frame.channels == 3:
            data = cv2.cvtColor(data, cv2.COLOR_BGR2GRAY)
        if not cv2.imwrite(path, data):
            raise SinkError(f"cannot write {path}")
        self.written += 1


class RawSink:
    def __init__(self, stream):
        self.stream = stream
        self.written = 0

    def write(self, frame: Frame) -> None:
        data = frame.gray() if frame.channels == 3 else frame.data
        try:
            self.stream.write(np.ascontiguousarray(data).tobytes())
        except OSError as e:
            raise SinkError(f"cannot write frame {frame.index}: {e}") from e
        self.written += 1


@contextmanager
def open_frame_sink(path: str, frame_format: str = "png", raw: bool = False):
    """Context manager for an output directory (created if missing) or raw stream"""
    stream = None
    try:
        try:
            if raw:
                parent = os.path.dirname(os.path.abspath(path))
                os.makedirs(parent, exist_ok=True)
                stream = open(path, "wb")
                sink = RawSink(stream)
            else:
                os.makedirs(path, exist_ok=True)
                sink = DirectorySink(path, frame_format)
        except OSError as e:
            raise SinkError(f"cannot open output {path}: {e}") from e
        yield sink
        logger.info(f"Wrote {sink.written} frames to {path}")
    finally:
        if stream:
            stream.close()


def write_frames(path: str, frames, frame_format: str = "png") -> int:
    with open_frame_sink(path, frame_format) as sink:
        for frame in frames:
            sink.write(frame)
        return sink.written
