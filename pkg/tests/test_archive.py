import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from deanet.archive import (
    MAGIC,
    ArchiveError,
    ArchiveFormatError,
    BadMagicError,
    DimOverflowError,
    DuplicateNameError,
    TruncatedError,
    VersionError,
    decode,
    encode,
    load_weights,
    read_archive,
    save_weights,
)
from deanet.network import TINY_CONFIG, NetworkConfig, fuse_network, random_params


def entry(name, arr):
    raw = name.encode()
    return (
        struct.pack("<H", len(raw)) + raw + struct.pack("<BB", 0, arr.ndim)
        + struct.pack(f"<{arr.ndim}I", *arr.shape) + arr.astype("<f4").tobytes()
    )


def handmade(*entries, version=1, count=None):
    n = len(entries) if count is None else count
    return MAGIC + struct.pack("<II", version, n) + b"".join(entries)


def test_byte_layout_matches_hand_encoding():
    a = np.arange(6, dtype=np.float32).reshape(2, 3)
    b = np.array([-0.0, np.inf], np.float32)
    assert encode({"b": b, "a": a}) == handmade(entry("a", a), entry("b", b))


def test_names_sorted():
    tensors = {n: np.zeros(1, np.float32) for n in ["z", "a.b", "a", "M", "ä"]}
    assert list(decode(encode(tensors))) == sorted(tensors)


def test_empty_archive():
    assert decode(encode({})) == {}


finite_or_special = hnp.arrays(
    np.float32,
    hnp.array_shapes(min_dims=0, max_dims=4, min_side=0, max_side=4),
    elements=st.floats(width=32, allow_nan=True, allow_infinity=True),
)


@settings(max_examples=1000, deadline=None)
@given(st.dictionaries(st.text(min_size=1, max_size=12), finite_or_special, max_size=4))
def test_round_trip_is_bit_exact(tensors):
    blob = encode(tensors)
    back = decode(blob)
    assert list(back) == sorted(tensors)
    for k, v in tensors.items():
        assert back[k].shape == v.shape and back[k].dtype == np.float32
        assert back[k].tobytes() == np.ascontiguousarray(v).tobytes()
    assert encode(back) == blob


def test_nan_payload_bits_preserved():
    a = np.array([0x7FC00001, 0xFFC12345], np.uint32).view(np.float32)
    assert decode(encode({"n": a}))["n"].view(np.uint32).tolist() == [0x7FC00001, 0xFFC12345]


class TestErrors:
    def test_bad_magic(self):
        blob = bytearray(encode({"a": np.ones(2, np.float32)}))
        blob[0:4] = b"DEAX"
        with pytest.raises(BadMagicError):
            decode(bytes(blob))
        with pytest.raises(BadMagicError):
            decode(b"")

    def test_version(self):
        with pytest.raises(VersionError):
            decode(handmade(version=2))

    @pytest.mark.parametrize("cut", [6, 10, 13, 16, 20, -1])
    def test_truncated(self, cut):
        blob = encode({"abc": np.ones((2, 2), np.float32)})
        with pytest.raises(TruncatedError):
            decode(blob[:cut])

    def test_count_larger_than_contents(self):
        with pytest.raises(TruncatedError):
            decode(handmade(entry("a", np.ones(1)), count=2))

    def test_duplicate(self):
        e = entry("w", np.ones(1))
        with pytest.raises(DuplicateNameError):
            decode(handmade(e, e))

    def test_ndim_overflow(self):
        raw = struct.pack("<H", 1) + b"x" + struct.pack("<BB", 0, 9) + struct.pack("<9I", *[1] * 9) + b"\0" * 4
        with pytest.raises(DimOverflowError):
            decode(handmade(raw))

    def test_element_overflow(self):
        raw = struct.pack("<H", 1) + b"x" + struct.pack("<BB", 0, 2) + struct.pack("<2I", 2**16, 2**16)
        with pytest.raises(DimOverflowError):
            decode(handmade(raw))

    def test_unsorted(self):
        with pytest.raises(ArchiveFormatError):
            decode(handmade(entry("b", np.ones(1)), entry("a", np.ones(1))))

    def test_bad_dtype_code(self):
        raw = bytearray(entry("a", np.ones(1)))
        raw[3] = 7
        with pytest.raises(ArchiveFormatError):
            decode(handmade(bytes(raw)))

    def test_trailing_bytes(self):
        with pytest.raises(ArchiveFormatError):
            decode(encode({"a": np.ones(1, np.float32)}) + b"\0")

    def test_non_f32_rejected_on_write(self):
        with pytest.raises(ArchiveFormatError):
            encode({"a": np.ones(1, np.float64)})

    def test_all_distinct_and_share_base(self):
        kinds = [BadMagicError, VersionError, TruncatedError, DuplicateNameError, DimOverflowError, ArchiveFormatError]
        assert len(set(kinds)) == 6 and all(issubclass(k, ArchiveError) for k in kinds)

    def test_failed_load_leaves_no_state(self, tmp_path):
        good = tmp_path / "w.deaw"
        save_weights(random_params(TINY_CONFIG, np.random.default_rng(0)), good)
        blob = bytearray(good.read_bytes())
        blob[0] ^= 0xFF
        bad = tmp_path / "bad.deaw"
        bad.write_bytes(bytes(blob))
        with pytest.raises(BadMagicError):
            load_weights(bad)


class TestNetworkWeights:
    @pytest.mark.parametrize("fused", [False, True])
    def test_save_load_save_identical(self, tmp_path, fused):
        p = random_params(TINY_CONFIG, np.random.default_rng(1))
        if fused:
            p = fuse_network(p)
        a, b = tmp_path / "a", tmp_path / "b"
        save_weights(p, a)
        q = load_weights(a)
        save_weights(q, b)
        assert a.read_bytes() == b.read_bytes()
        assert q.config == TINY_CONFIG and q.fused == fused
        for k, t in p.tensors.items():
            assert q[k].data.tobytes() == t.data.tobytes()

    def test_config_recovered(self, tmp_path):
        cfg = NetworkConfig(base_channels=4, block_counts=(2, 0, 1, 3, 1))
        save_weights(random_params(cfg, np.random.default_rng(0)), tmp_path / "w")
        assert load_weights(tmp_path / "w").config == cfg

    def test_not_a_network(self, tmp_path):
        from deanet.archive import write_archive

        write_archive({"x": np.ones(1, np.float32)}, tmp_path / "w")
        assert list(read_archive(tmp_path / "w")) == ["x"]
        with pytest.raises(ArchiveFormatError):
            load_weights(tmp_path / "w")
