"""Binary checkpoint container.

Little-endian layout::

    b"CCAP"  u32 version  u32 header_len  header (UTF-8 JSON, sorted keys)
    repeated: u32 name_len  name (UTF-8)  u64 count  count x f64

The header holds the variant spec and free-form training metadata.  Blobs
follow in canonical parameter order; optimiser velocities are stored as
extra blobs prefixed with ``velocity/``.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .models import Model, VariantSpec, param_shapes
from .tensor import Tensor

MAGIC = b"CCAP"
VERSION = 1


class CheckpointError(ValueError):
    pass


def atomic_write(path, data: bytes) -> None:
    """Write to a temporary sibling, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _blob(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode()
    vals = np.ascontiguousarray(arr, dtype="<f8").reshape(-1)
    return struct.pack("<I", len(raw)) + raw + struct.pack("<Q", vals.size) + vals.tobytes()


def encode_checkpoint(model: Model, velocity: dict | None = None, meta: dict | None = None) -> bytes:
    header = json.dumps({"spec": model.spec.to_dict(), "meta": meta or {}},
                        sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(header)), header]
    for name in param_shapes(model.spec):
        parts.append(_blob(name, model.params[name].data))
    for name in param_shapes(model.spec):
        if velocity and name in velocity:
            parts.append(_blob(f"velocity/{name}", velocity[name]))
    return b"".join(parts)


def save_checkpoint(path, model: Model, velocity: dict | None = None, meta: dict | None = None) -> None:
    atomic_write(path, encode_checkpoint(model, velocity, meta))


def decode_checkpoint(buf: bytes) -> tuple[Model, dict, dict]:
    if buf[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    if len(buf) < 12:
        raise CheckpointError("truncated header")
    version, hlen = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 12 + hlen
    if len(buf) < off:
        raise CheckpointError("truncated header")
    header = json.loads(buf[12:off].decode())
    spec = VariantSpec.from_dict(header["spec"])
    shapes = param_shapes(spec)
    blobs = OrderedDict()
    while off < len(buf):
        if off + 4 > len(buf):
            raise CheckpointError("truncated blob name length")
        (nlen,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off:off + nlen].decode()
        off += nlen
        if off + 8 > len(buf):
            raise CheckpointError(f"truncated blob {name!r}")
        (count,) = struct.unpack_from("<Q", buf, off)
        off += 8
        if off + 8 * count > len(buf):
            raise CheckpointError(f"truncated blob {name!r}")
        blobs[name] = np.frombuffer(buf, "<f8", count, off).astype(np.float64)
        off += 8 * count
    params = OrderedDict()
    for name, shape in shapes.items():
        if name not in blobs:
            raise CheckpointError(f"checkpoint lacks parameter {name!r}")
        if blobs[name].size != int(np.prod(shape)):
            raise CheckpointError(f"parameter {name!r} has {blobs[name].size} values, expected {shape}")
        params[name] = Tensor(blobs[name].reshape(shape), requires_grad=True, name=name)
    velocity = {k[len("velocity/"):]: v.reshape(shapes[k[len("velocity/"):]])
                for k, v in blobs.items() if k.startswith("velocity/")}
    return Model(spec, params), velocity, header.get("meta", {})


def load_checkpoint(path) -> tuple[Model, dict, dict]:
    """Returns ``(model, velocity, meta)``."""
    return decode_checkpoint(Path(path).read_bytes())
