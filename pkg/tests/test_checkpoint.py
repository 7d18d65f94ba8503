import json
import struct

import numpy as np
import pytest

from hallucitrace.checkpoint import (FormatError, ManifestError, TruncatedError, VersionError,
                                     decode_weights, encode_weights, list_checkpoints, load_weights,
                                     save_weights, write_checkpoint)
from tests.conftest import make_model


@pytest.fixture
def model32():
    return make_model(dtype=np.float32)


def test_round_trip_is_bit_exact(tmp_path, model32):
    save_weights(model32, tmp_path / "m.htw", meta={"step": 7})
    back = load_weights(tmp_path / "m.htw")
    assert back.cfg == model32.cfg
    for name, p in model32.params.items():
        assert back[name].data.tobytes() == p.data.tobytes()
    _, meta = decode_weights((tmp_path / "m.htw").read_bytes())
    assert meta == {"step": 7}


def test_layout_prefix_and_header(model32):
    buf = encode_weights(model32)
    magic, version, hlen = struct.unpack_from("<4sIQ", buf, 0)
    assert magic == b"HTRC" and version == 1
    header = json.loads(buf[16:16 + hlen])
    first = header["tensors"][0]
    assert first["offset"] == 0 and first["dtype"] == "f32"
    arr = np.frombuffer(buf, "<f4", count=int(np.prod(first["shape"])), offset=16 + hlen)
    np.testing.assert_array_equal(arr.reshape(first["shape"]), model32[first["name"]].data)


def test_bad_magic(model32):
    buf = bytearray(encode_weights(model32))
    buf[:4] = b"XXXX"
    with pytest.raises(FormatError):
        decode_weights(bytes(buf))


def test_bad_version(model32):
    buf = bytearray(encode_weights(model32))
    struct.pack_into("<I", buf, 4, 2)
    with pytest.raises(VersionError):
        decode_weights(bytes(buf))


@pytest.mark.parametrize("cut", [3, 40, -1])
def test_truncated_file(model32, cut):
    buf = encode_weights(model32)
    with pytest.raises(TruncatedError):
        decode_weights(buf[:cut])


def test_garbled_header(model32):
    buf = bytearray(encode_weights(model32))
    buf[16] = ord("!")
    with pytest.raises(FormatError):
        decode_weights(bytes(buf))


def test_manifest_mismatch(model32):
    buf = encode_weights(model32)
    hlen = struct.unpack_from("<Q", buf, 8)[0]
    header = json.loads(buf[16:16 + hlen])
    header["tensors"][0], header["tensors"][1] = header["tensors"][1], header["tensors"][0]
    new = json.dumps(header).encode()
    with pytest.raises(ManifestError):
        decode_weights(buf[:8] + struct.pack("<Q", len(new)) + new + buf[16 + hlen:])


def test_run_directory_listing(tmp_path, model32):
    for step in (500, 0, 1000):
        write_checkpoint(tmp_path, step, model32)
    listed = list_checkpoints(tmp_path)
    assert [s for s, _ in listed] == [0, 500, 1000]
    assert all(p.exists() for _, p in listed)
    (tmp_path / "run_manifest.json").unlink()
    assert [s for s, _ in list_checkpoints(tmp_path)] == [0, 500, 1000]
