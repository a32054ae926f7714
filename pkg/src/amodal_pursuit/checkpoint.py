"""Binary checkpoint container.

Layout: magic, u32 version, u32 manifest length, UTF-8 JSON manifest, then the
tensors as row-major little-endian float32 in manifest order, then a u32 CRC32
of everything before it.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import FormatError, ShapeError
from .policy import PolicyConfig, PolicyParams, param_shapes

MAGIC = b"APCKPT\x00\x01"
VERSION = 1


def to_bytes(params: PolicyParams) -> bytes:
    names = list(param_shapes(params.config))
    manifest = {
        "config": params.config.to_dict(),
        "tensors": [{"name": n, "dims": list(params.tensors[n].shape), "dtype": "float32"} for n in names],
    }
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    body = bytearray(MAGIC)
    body += struct.pack("<II", VERSION, len(head))
    body += head
    for n in names:
        body += np.ascontiguousarray(params.tensors[n], dtype="<f4").tobytes()
    body += struct.pack("<I", zlib.crc32(bytes(body)))
    return bytes(body)


def from_bytes(blob: bytes, expect: PolicyConfig | None = None) -> PolicyParams:
    """Parse a checkpoint. ``expect`` pins the network shape (cross-preset loads fail)."""
    fixed = len(MAGIC) + 8
    if len(blob) < fixed + 4 or blob[:len(MAGIC)] != MAGIC:
        raise FormatError("not a checkpoint file (bad magic or truncated header)")
    version, hlen = struct.unpack_from("<II", blob, len(MAGIC))
    if version != VERSION:
        raise FormatError(f"checkpoint version {version} not supported (expected {VERSION})")
    if len(blob) < fixed + hlen + 4:
        raise FormatError("truncated checkpoint manifest")
    (crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(blob[:-4]) != crc:
        raise FormatError("checkpoint checksum mismatch (corrupt or truncated)")
    try:
        manifest = json.loads(blob[fixed:fixed + hlen].decode())
        cfg = PolicyConfig.from_dict(manifest["config"])
        entries = manifest["tensors"]
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"corrupt checkpoint manifest: {exc}") from exc
    shapes = param_shapes(expect if expect is not None else cfg)
    offset = fixed + hlen
    tensors = {}
    for e in entries:
        name, dims = e.get("name"), tuple(e.get("dims", ()))
        if e.get("dtype") != "float32":
            raise FormatError(f"tensor {name}: unsupported dtype {e.get('dtype')}")
        if name not in shapes:
            raise ShapeError(f"tensor {name} is not part of the configured network")
        if dims != tuple(shapes[name]):
            raise ShapeError(f"tensor {name}: checkpoint dims {dims} != configured {tuple(shapes[name])}")
        size = 4 * int(np.prod(dims, dtype=np.int64))
        if offset + size > len(blob) - 4:
            raise FormatError(f"tensor {name}: payload truncated")
        tensors[name] = np.frombuffer(blob, dtype="<f4", count=size // 4, offset=offset).reshape(dims).astype(np.float32)
        offset += size
    missing = set(shapes) - set(tensors)
    if missing:
        raise FormatError(f"checkpoint lacks tensors: {sorted(missing)}")
    if offset != len(blob) - 4:
        raise FormatError("trailing bytes after tensor payloads")
    return PolicyParams(expect if expect is not None else cfg, tensors)


def save_checkpoint(params: PolicyParams, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(to_bytes(params))
    tmp.replace(path)


def load_checkpoint(path, expect: PolicyConfig | None = None) -> PolicyParams:
    from .errors import ConfigError
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"checkpoint {path} does not exist")
    return from_bytes(path.read_bytes(), expect)
