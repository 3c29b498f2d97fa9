import logging
from pathlib import Path

import numpy as np

from core.errors import ConfigurationError
from pointcloud.geometry import ColoredPointCloud

logger = logging.getLogger(__name__)

VERTEX_DTYPE = np.dtype(
    [
        ("x", "<f4"),
        ("y", "<f4"),
        ("z", "<f4"),
        ("red", "u1"),
        ("green", "u1"),
        ("blue", "u1"),
    ]
)


def _header(count: int) -> bytes:
    lines = [
        "ply",
        "format binary_little_endian 1.0",
        f"element vertex {count}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "end_header",
    ]
    return ("\n".join(lines) + "\n").encode("ascii")


def write_ply(cloud: ColoredPointCloud, path: Path | str) -> Path:
    path = Path(path)
    vertices = np.empty(len(cloud), dtype=VERTEX_DTYPE)
    vertices["x"], vertices["y"], vertices["z"] = cloud.points.T
    vertices["red"], vertices["green"], vertices["blue"] = cloud.colors.T
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("wb") as fh:
            fh.write(_header(len(cloud)))
            fh.write(vertices.tobytes())
    except OSError as e:
        raise ConfigurationError(f"cannot write PLY {path}: {e.strerror}") from e
    logger.info(f"Wrote {len(cloud)} points to {path}")
    return path


def read_ply(path: Path | str) -> ColoredPointCloud:
    """Reads the binary layout produced by `write_ply`."""
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"PLY file not found: {path}")
    blob = path.read_bytes()
    end = blob.find(b"end_header\n")
    if not blob.startswith(b"ply\n") or end < 0:
        raise ConfigurationError(f"{path}: not a PLY file")
    header = blob[:end].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in header:
        raise ConfigurationError(f"{path}: only binary little-endian PLY is supported")
    count = next(
        (int(line.split()[2]) for line in header if line.startswith("element vertex")), None
    )
    if count is None:
        raise ConfigurationError(f"{path}: missing vertex element")
    body = blob[end + len(b"end_header\n") :]
    if len(body) != count * VERTEX_DTYPE.itemsize:
        raise ConfigurationError(f"{path}: expected {count} vertices, body has {len(body)} bytes")
    if count == 0:
        vertices = np.empty(0, dtype=VERTEX_DTYPE)
    else:
        vertices = np.frombuffer(body, dtype=VERTEX_DTYPE, count=count)
    return ColoredPointCloud(
        points=np.column_stack([vertices["x"], vertices["y"], vertices["z"]]),
        colors=np.column_stack([vertices["red"], vertices["green"], vertices["blue"]]),
    )
