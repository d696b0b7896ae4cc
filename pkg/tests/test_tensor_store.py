import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mergegrid.tensor_store import (
    Checkpoint,
    StoreError,
    TensorEntry,
    diff_keys,
    dumps,
    from_arrays,
    load,
    loads,
    save,
)


def raw_file(header: dict, payload: bytes, pad: bool = True) -> bytes:
    """Build a container by hand, independently of ``dumps``."""
    h = json.dumps(header).encode()
    if pad:
        h += b" " * (-len(h) % 8)
    return struct.pack("<Q", len(h)) + h + payload


def test_reads_hand_built_file():
    payload = np.array([1.5, -2.0, 3.25], "<f4").tobytes() + np.array([7.0], "<f4").tobytes()
    buf = raw_file(
        {
            "b": {"dtype": "F32", "shape": [1], "data_offsets": [12, 16]},
            "a": {"dtype": "F32", "shape": [3], "data_offsets": [0, 12]},
            "__metadata__": {"id": "hand", "domain": "Books", "seed": "7"},
        },
        payload,
    )
    ck = loads(buf)
    assert ck.id == "hand" and ck.domain == "Books" and ck.seed == 7
    assert ck["a"].data.tolist() == [1.5, -2.0, 3.25]
    assert ck["b"].data.tolist() == [7.0]


def test_layout_is_canonical():
    ck = from_arrays("x", {"w": np.arange(3)})
    buf = dumps(ck)
    (hlen,) = struct.unpack_from("<Q", buf)
    assert hlen % 8 == 0
    header = json.loads(buf[8 : 8 + hlen])
    assert header["w"] == {"data_offsets": [0, 12], "dtype": "F32", "shape": [3]}
    assert buf[8 + hlen :] == np.arange(3, dtype="<f4").tobytes()


def test_round_trip_nan_inf_and_labels(tmp_path):
    data = np.array([[np.nan, np.inf], [-np.inf, -0.0]], np.float32)
    ck = from_arrays("c", {"emb": data}, row_labels={"emb": ["p", "q"]}, domain="D", phase="t1", lineage="base", seed=3)
    path = tmp_path / "c.mgt"
    save(ck, path)
    back = load(path)
    assert back.same_bits(ck)
    assert back["emb"].row_labels == ("p", "q")
    assert dumps(back) == path.read_bytes()


def test_missing_id_uses_stem(tmp_path):
    path = tmp_path / "stem_name.mgt"
    path.write_bytes(raw_file({"w": {"dtype": "F32", "shape": [1], "data_offsets": [0, 4]}}, b"\0" * 4))
    assert load(path).id == "stem_name"


def test_truncated_payload_names_tensor():
    buf = raw_file({"w": {"dtype": "F32", "shape": [4], "data_offsets": [0, 16]}, "__metadata__": {"id": "x"}}, b"\0" * 8)
    with pytest.raises(StoreError, match="payload length mismatch") as err:
        loads(buf)
    assert err.value.tensor == "w"


def test_trailing_bytes_rejected():
    buf = raw_file({"w": {"dtype": "F32", "shape": [1], "data_offsets": [0, 4]}, "__metadata__": {"id": "x"}}, b"\0" * 8)
    with pytest.raises(StoreError, match="trailing"):
        loads(buf)


def test_wrong_dtype_rejected():
    buf = raw_file({"w": {"dtype": "F16", "shape": [2], "data_offsets": [0, 4]}, "__metadata__": {"id": "x"}}, b"\0" * 4)
    with pytest.raises(StoreError, match="dtype"):
        loads(buf)


def test_duplicate_names_rejected():
    h = b'{"w":{"dtype":"F32","shape":[1],"data_offsets":[0,4]},"w":{"dtype":"F32","shape":[1],"data_offsets":[0,4]}}'
    buf = struct.pack("<Q", len(h)) + h + b"\0" * 4
    with pytest.raises(StoreError, match="duplicate"):
        loads(buf, "x")


def test_short_and_garbage_headers():
    with pytest.raises(StoreError):
        loads(b"\1\2")
    with pytest.raises(StoreError, match="exceeds"):
        loads(struct.pack("<Q", 999) + b"{}")
    with pytest.raises(StoreError, match="malformed"):
        loads(struct.pack("<Q", 3) + b"{{{")


def test_non_contiguous_rejected():
    buf = raw_file(
        {"a": {"dtype": "F32", "shape": [1], "data_offsets": [4, 8]}, "b": {"dtype": "F32", "shape": [1], "data_offsets": [4, 8]}},
        b"\0" * 8,
    )
    with pytest.raises(StoreError, match="contiguous"):
        loads(buf, "x")


def test_orphan_row_labels():
    buf = raw_file(
        {"w": {"dtype": "F32", "shape": [1], "data_offsets": [0, 4]}, "__metadata__": {"id": "x", "row_labels.zz": '["a"]'}},
        b"\0" * 4,
    )
    with pytest.raises(StoreError, match="zz"):
        loads(buf)


def test_entry_validation():
    with pytest.raises(StoreError):
        TensorEntry("w", np.zeros(3, np.float64))
    with pytest.raises(StoreError):
        TensorEntry("w", np.zeros((2, 1), np.float32), ["a", "a"])
    with pytest.raises(StoreError):
        TensorEntry("bad name", np.zeros(1, np.float32))


def test_duplicate_tensor_in_checkpoint():
    e = TensorEntry("w", np.zeros(1, np.float32))
    with pytest.raises(StoreError):
        Checkpoint("x", [e, e])


def test_diff_keys():
    a = from_arrays("a", {"x": np.zeros(2), "y": np.zeros(1), "s": np.zeros(3)})
    b = from_arrays("b", {"x": np.zeros(2), "z": np.zeros(1), "s": np.zeros(4)})
    shared, only_a, only_b = diff_keys(a, b)
    assert shared == {"x", "s"} and only_a == {"y"} and only_b == {"z"}
    assert diff_keys(a, b).shape_mismatch == {"s"}


def test_entries_are_read_only():
    ck = from_arrays("a", {"x": np.zeros(2)})
    with pytest.raises(ValueError):
        ck["x"].data[0] = 1.0


@settings(max_examples=40, deadline=None)
@given(
    st.lists(
        st.tuples(st.integers(1, 6), st.integers(1, 5)),
        min_size=1,
        max_size=8,
    ),
    st.binary(min_size=4, max_size=4),
)
def test_round_trip_property(shapes, salt):
    rng = np.random.default_rng(int.from_bytes(salt, "little"))
    arrays = {}
    for k, (r, c) in enumerate(shapes):
        bits = rng.integers(0, 2**32, size=r * c, dtype=np.uint64).astype(np.uint32)
        arrays[f"t{k}"] = bits.view(np.float32).reshape(r, c)  # arbitrary bit patterns incl. NaN payloads
    ck = from_arrays("p", arrays)
    buf = dumps(ck)
    assert dumps(loads(buf)) == buf
