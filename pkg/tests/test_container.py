import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from samimo import container as ac

DTYPES = ["<f4", "<f8", "<c8", "<c16", "<i1", "<i8"]


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(DTYPES).flatmap(lambda dt: hnp.arrays(dt, hnp.array_shapes(min_dims=0, max_dims=3, max_side=5))))
def test_round_trip_bit_exact(a):
    out, meta = ac.unpack(ac.pack({"a": a}, {"seed": 3}))
    assert meta == {"seed": 3}
    assert out["a"].dtype == a.dtype and out["a"].shape == a.shape
    assert out["a"].tobytes() == a.tobytes()


def test_manifest_is_readable_json():
    blob = ac.pack({"x": np.ones((2, 3), np.complex64), "y": np.arange(4)}, {"seeds": [1, 2]})
    m = ac.read_manifest(blob)
    assert m["endianness"] == "little"
    assert [e["name"] for e in m["arrays"]] == ["x", "y"]
    assert m["arrays"][0] == {"name": "x", "shape": [2, 3], "dtype": "c8", "offset": 0, "nbytes": 48}
    assert m["arrays"][1]["offset"] == 48
    assert blob[:8] == ac.MAGIC
    _, _, n = ac._HEAD.unpack_from(blob)
    assert json.loads(blob[ac._HEAD.size : ac._HEAD.size + n].decode("utf-8")) == m


def test_complex_layout_is_interleaved_float32():
    z = np.array([1 + 2j, 3 - 4j], np.complex64)
    blob = ac.pack({"z": z})
    out, _ = ac.unpack(blob)
    payload = blob[-ac.read_manifest(blob)["arrays"][0]["nbytes"] :]
    assert np.array_equal(np.frombuffer(payload, "<f4"), [1, 2, 3, -4])
    assert np.array_equal(out["z"], z)


def test_big_endian_input_is_stored_little_endian():
    a = np.arange(5, dtype=">f8")
    out, _ = ac.unpack(ac.pack({"a": a}))
    assert out["a"].dtype == np.dtype("<f8") and np.array_equal(out["a"], a)


def test_bool_maps_to_int8():
    out, _ = ac.unpack(ac.pack({"b": np.array([True, False])}))
    assert out["b"].dtype == np.int8 and out["b"].tolist() == [1, 0]


def test_errors():
    with pytest.raises(ac.ContainerError):
        ac.pack({"u": np.zeros(2, np.uint16)})
    with pytest.raises(ac.ContainerError):
        ac.unpack(b"NOTMAGIC" + bytes(20))
    with pytest.raises(ac.ContainerError):
        ac.unpack(b"abc")
    blob = ac.pack({"a": np.arange(10.0)})
    with pytest.raises(ac.ContainerError):
        ac.unpack(blob[:-8])


def test_deterministic_bytes():
    a = {"a": np.arange(6.0).reshape(2, 3)}
    assert ac.pack(a, {"b": 1, "a": 2}) == ac.pack(a, {"a": 2, "b": 1})


def test_checkpoint_round_trip():
    net = torch.nn.Sequential(torch.nn.Linear(3, 4), torch.nn.LayerNorm(4))
    torch.nn.init.normal_(net[1].weight)
    blob = ac.pack_state(net.state_dict(), 17, {"d_model": 4})
    state, seed, cfg = ac.unpack_state(blob)
    assert seed == 17 and cfg == {"d_model": 4}
    for k, v in net.state_dict().items():
        assert torch.equal(state[k], v)
    with pytest.raises(ac.ContainerError):
        ac.unpack_state(ac.pack({"a": np.zeros(1)}))
