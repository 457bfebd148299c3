import struct

import numpy as np
import pytest

from fedlfd import checkpoint
from fedlfd.errors import UsageError
from fedlfd.tensor import MlpModel


@pytest.fixture
def params():
    return MlpModel.create((3, 4, 2), seed=5).params


def test_round_trip_is_exact_to_float32(params, tmp_path):
    path = tmp_path / "m.flfd"
    checkpoint.save(path, params, {"model_id": 1})
    back, meta = checkpoint.load(path)
    assert meta == {"model_id": 1}
    assert back.shape_meta == params.shape_meta
    np.testing.assert_array_equal(back.values, params.values.astype(np.float32).astype(np.float64))


def test_header_layout(params):
    blob = checkpoint.encode(params)
    magic, version, count = struct.unpack_from("<4sIQ", blob)
    assert (magic, version, count) == (b"FLFD", 1, len(params))
    first = struct.unpack_from("<f", blob, 16)[0]
    assert first == np.float32(params.values[0])


def test_encoding_is_deterministic(params):
    assert checkpoint.encode(params, {"b": 1, "a": 2}) == checkpoint.encode(params, {"a": 2, "b": 1})


@pytest.mark.parametrize("mutate, message", [
    (lambda b: b"XXXX" + b[4:], "magic"),
    (lambda b: b[:4] + struct.pack("<I", 9) + b[8:], "version"),
    (lambda b: b[:20], "truncated"),
    (lambda b: b[:10], "truncated"),
])
def test_corrupt_files_rejected(params, mutate, message):
    with pytest.raises(UsageError, match=message):
        checkpoint.decode(mutate(checkpoint.encode(params)))


def test_describe(params, tmp_path):
    path = tmp_path / "m.flfd"
    checkpoint.save(path, params, {"round": 3})
    info = checkpoint.describe(path)
    assert info["version"] == 1
    assert info["count"] == len(params)
    assert [layer["name"] for layer in info["layers"]][0] == "layer0.weight"
    assert info["meta"] == {"round": 3}
