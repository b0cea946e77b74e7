"""Versioned binary container for checkpoints and perturbation files.

Layout: magic "SUPF", u32 version, 4-byte kind tag, length-prefixed UTF-8
config block (line-oriented key = value text), then named parameter
records: u32 name length + bytes, u8 ndim, u32 dims, little-endian f64
payload. Writing the same payload twice produces byte-identical files.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"SUPF"
VERSION = 1

KIND_NET = b"SNET"
KIND_PERTURBATION = b"SUPP"


def config_to_text(items: dict) -> str:
    """Serialize a flat mapping as sorted `key = value` lines."""
    lines = []
    for key in sorted(items):
        value = items[key]
        if isinstance(value, (tuple, list)):
            value = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def text_to_config(text: str) -> dict:
    """Parse `key = value` lines; `#` starts a comment, blanks ignored."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ValueError(f"line {lineno}: empty key in {raw!r}")
        out[key] = value.strip()
    return out


def save_container(path, kind: bytes, config_items: dict, params: dict):
    """Write named float64 arrays plus a config block to ``path``."""
    if len(kind) != 4:
        raise ValueError(f"kind tag must be 4 bytes, got {kind!r}")
    cfg_blob = config_to_text(config_items).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(kind)
        f.write(struct.pack("<I", len(cfg_blob)))
        f.write(cfg_blob)
        f.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            arr = np.ascontiguousarray(np.asarray(params[name], dtype=np.float64))
            blob = name.encode("utf-8")
            f.write(struct.pack("<I", len(blob)))
            f.write(blob)
            f.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                f.write(struct.pack("<I", dim))
            f.write(arr.astype("<f8").tobytes())


def load_container(path):
    """Read a container; returns (kind, config dict of strings, params dict)."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise ValueError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported container version {version}")
    kind = blob[8:12]
    pos = 12
    (cfg_len,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    config = text_to_config(blob[pos:pos + cfg_len].decode("utf-8"))
    pos += cfg_len
    (n_records,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    params = {}
    for _ in range(n_records):
        (name_len,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (ndim,) = struct.unpack_from("<B", blob, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, pos) if ndim else ()
        pos += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(shape)
        pos += 8 * count
        params[name] = arr.astype(np.float64)
    return kind, config, params
