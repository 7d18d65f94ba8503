"""Binary weight files (``.htw``) and checkpoint run directories.

Layout::

    0..3    magic b"HTRC"
    4..7    u32 LE format version (1)
    8..15   u64 LE header length N
    16..    N bytes UTF-8 JSON header: {"config": {...}, "tensors": [...], "meta": {...}}
    ...     little-endian float32 payload, tensors row-major in manifest order

Each manifest entry is ``{"name", "shape", "offset", "dtype": "f32"}`` with
``offset`` counted in bytes from the start of the payload.
"""
from __future__ import annotations

import json
import logging
import os
import re
import struct
from pathlib import Path

import numpy as np

from .model import ModelConfig, Transformer, param_shapes
from .tensor import Parameter

log = logging.getLogger(__name__)

MAGIC = b"HTRC"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


class HtwError(Exception):
    pass


class FormatError(HtwError):
    pass


class VersionError(HtwError):
    pass


class TruncatedError(HtwError):
    pass


class ManifestError(HtwError):
    pass


def _dumps(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def encode_weights(model: Transformer, meta=None) -> bytes:
    manifest = []
    chunks = []
    offset = 0
    for name, p in model.params.items():
        arr = np.ascontiguousarray(p.data, dtype="<f4")
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset, "dtype": "f32"})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    header = _dumps({"config": model.cfg.to_dict(), "tensors": manifest,
                     "meta": meta or {}}).encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(header)) + header + b"".join(chunks)


def decode_weights(buf: bytes):
    """Parse ``.htw`` bytes into ``(Transformer, meta)``."""
    if len(buf) < _PREFIX.size:
        raise TruncatedError("file shorter than the fixed prefix")
    magic, version, hlen = _PREFIX.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise VersionError(f"unsupported format version {version}")
    start = _PREFIX.size
    if len(buf) < start + hlen:
        raise TruncatedError("header extends past end of file")
    try:
        header = json.loads(buf[start:start + hlen].decode("utf-8"))
        cfg = ModelConfig.from_dict(header["config"])
        manifest = header["tensors"]
    except (ValueError, KeyError, TypeError) as e:
        raise FormatError(f"unreadable header: {e}") from e
    payload = memoryview(buf)[start + hlen:]
    expected_bytes = sum(4 * int(np.prod(t["shape"], dtype=np.int64)) for t in manifest)
    if len(payload) != expected_bytes:
        raise TruncatedError(
            f"payload is {len(payload)} bytes but the manifest of {len(manifest)} tensors "
            f"needs {expected_bytes}")
    expected = param_shapes(cfg)
    names = [t["name"] for t in manifest]
    if names != list(expected):
        raise ManifestError("tensor manifest does not match the model configuration")
    params = {}
    for t in manifest:
        shape = tuple(t["shape"])
        if shape != expected[t["name"]] or t.get("dtype") != "f32":
            raise ManifestError(f"tensor {t['name']} has shape {shape}, expected {expected[t['name']]}")
        n = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f4", count=n, offset=t["offset"]).reshape(shape)
        params[t["name"]] = Parameter(t["name"], arr.astype(np.float32))
    return Transformer(cfg, params, np.float32), header.get("meta", {})


def save_weights(model: Transformer, path, meta=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_weights(model, meta))
    os.replace(tmp, path)


def load_weights(path):
    model, _ = decode_weights(Path(path).read_bytes())
    return model


# -- run directories -------------------------------------------------------------

RUN_MANIFEST = "run_manifest.json"
_STEP_RE = re.compile(r"^step-(\d{6})\.htw$")


def checkpoint_name(step):
    return f"step-{step:06d}.htw"


def write_checkpoint(run_dir, step, model, meta=None):
    run_dir = Path(run_dir)
    save_weights(model, run_dir / checkpoint_name(step), meta)
    man_path = run_dir / RUN_MANIFEST
    steps = json.loads(man_path.read_text())["steps"] if man_path.exists() else []
    if step not in steps:
        steps = sorted(steps + [step])
    man_path.write_text(_dumps({"steps": steps,
                                "files": [checkpoint_name(s) for s in steps]}) + "\n")


def list_checkpoints(run_dir):
    """``[(step, path)]`` in increasing step order (manifest first, glob fallback)."""
    run_dir = Path(run_dir)
    man = run_dir / RUN_MANIFEST
    if man.exists():
        steps = json.loads(man.read_text())["steps"]
        return [(s, run_dir / checkpoint_name(s)) for s in sorted(steps)]
    found = []
    for p in run_dir.iterdir():
        m = _STEP_RE.match(p.name)
        if m:
            found.append((int(m.group(1)), p))
    return sorted(found)
