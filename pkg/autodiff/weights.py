"""DSV2 weights file: little-endian, magic + version + count, then named float32 tensors."""

import logging
import struct
from pathlib import Path

import numpy as np

from core.errors import ConfigurationError

logger = logging.getLogger(__name__)

MAGIC = b"DSV2"
FORMAT_VERSION = 1


def _dims4(shape: tuple[int, ...], name: str) -> tuple[int, int, int, int]:
    if len(shape) > 4:
        raise ConfigurationError(f"tensor {name!r} has rank {len(shape)} > 4")
    padded = tuple(shape) + (1,) * (4 - len(shape))
    return padded  # type: ignore[return-value]


def encode_weights(tensors: dict[str, np.ndarray]) -> bytes:
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF:
            raise ConfigurationError(f"tensor name too long: {name[:40]}...")
        dims = _dims4(np.shape(arr), name)
        chunks.append(struct.pack("<H", len(raw_name)))
        chunks.append(raw_name)
        chunks.append(struct.pack("<4I", *dims))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(chunks)


def decode_weights(blob: bytes, source: str = "<bytes>") -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise ConfigurationError(f"{source}: not a DSV2 weights file")
    tensors: dict[str, np.ndarray] = {}
    try:
        version, count = struct.unpack_from("<II", blob, 4)
        if version != FORMAT_VERSION:
            raise ConfigurationError(f"{source}: unsupported weights version {version}")
        offset = 12
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", blob, offset)
            offset += 2
            name = blob[offset : offset + name_len].decode("utf-8")
            offset += name_len
            dims = struct.unpack_from("<4I", blob, offset)
            offset += 16
            size = int(np.prod(dims))
            arr = np.frombuffer(blob, dtype="<f4", count=size, offset=offset)
            offset += 4 * size
            tensors[name] = arr.reshape(dims).astype(np.float32)
    except (struct.error, ValueError) as e:
        raise ConfigurationError(f"{source}: truncated weights file ({e})") from e
    if offset != len(blob):
        raise ConfigurationError(f"{source}: {len(blob) - offset} trailing bytes")
    return tensors


def save_weights(tensors: dict[str, np.ndarray], path: Path | str) -> int:
    path = Path(path)
    blob = encode_weights(tensors)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(blob)
    logger.info(f"Wrote {len(tensors)} tensors ({len(blob)} bytes) to {path}")
    return len(blob)


def load_weights(path: Path | str) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"weights file not found: {path}")
    return decode_weights(path.read_bytes(), source=str(path))
