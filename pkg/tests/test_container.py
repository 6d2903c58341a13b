import struct
import zlib

import numpy as np
import pytest

from mvot.container import (MAGIC, ChecksumError, HelperFormatError, TruncatedError, VersionError,
                            deserialize_helper, load_helper, save_helper, serialize_helper)
from mvot.embedding import hash_entry_tuple
from mvot.vault import ProtocolParams, enroll, enroll_traced, verify


@pytest.fixture(scope="module")
def traced(small_population, small_params):
    return enroll_traced(small_population.template(3), small_population.chaff_source(),
                         small_params, np.random.default_rng(2))


def test_round_trip_bit_exact(traced):
    helper, positions = traced
    blob = serialize_helper(helper)
    back = deserialize_helper(blob)
    assert back.params == helper.params
    assert back.salt == helper.salt
    assert back.commitments == helper.commitments
    for a, b in zip(helper.vaults, back.vaults):
        assert a.entries.tobytes() == b.entries.tobytes()
        assert a.channel_index == b.channel_index
    assert serialize_helper(back) == blob
    # re-hashing the reloaded entry bytes reproduces the commitments
    for subset, digest in back.commitments.items():
        entries = [back.vaults[i].entry_bytes(positions[i]) for i in subset]
        assert hash_entry_tuple(subset, entries, back.salt) == digest


def test_round_trip_preserves_decisions(traced, small_population):
    helper, _ = traced
    back = deserialize_helper(serialize_helper(helper))
    rng = np.random.default_rng(4)
    queries = [small_population.genuine_query(3, rng) for _ in range(10)]
    queries += [small_population.unrelated_query(rng) for _ in range(10)]
    for q in queries:
        for tr in (1, 3):
            a, b = verify(helper, q, tr), verify(back, q, tr)
            assert a.to_dict() == b.to_dict()


def test_size_arithmetic(default_population):
    params = ProtocolParams(gamma=54)
    helper = enroll(default_population.template(0), default_population.chaff_source(), params,
                    np.random.default_rng(0))
    blob = serialize_helper(helper)
    payload = 4 * 512 * 5 * 2001
    # magic+version, params block, salt, vault headers, commitment, crc
    metadata = 6 + 4 + struct.calcsize("<IIIIIIdddIQ") + 16 + 4 + 5 * 12 + 4 + 4 + 5 * 4 + 32 + 4
    assert len(blob) == payload + metadata
    assert blob[:4] == MAGIC


def test_file_io(traced, tmp_path):
    helper, _ = traced
    path = tmp_path / "h.mvot"
    save_helper(helper, path)
    assert load_helper(path).commitments == helper.commitments


def test_empty_stream_is_version_error():
    with pytest.raises(VersionError):
        deserialize_helper(b"")


def test_bad_magic_and_version(traced):
    blob = bytearray(serialize_helper(traced[0]))
    with pytest.raises(VersionError):
        deserialize_helper(b"XVOT" + bytes(blob[4:]))
    blob[4:6] = struct.pack("<H", 99)
    with pytest.raises(VersionError, match="99"):
        deserialize_helper(bytes(blob))


def test_truncation(traced):
    blob = serialize_helper(traced[0])
    for cut in (7, 40, len(blob) // 2, len(blob) - 1):
        with pytest.raises(HelperFormatError):
            deserialize_helper(blob[:cut])
    with pytest.raises(TruncatedError):
        deserialize_helper(blob[:len(blob) // 2])


def test_trailing_bytes(traced):
    with pytest.raises(HelperFormatError):
        deserialize_helper(serialize_helper(traced[0]) + b"\x00")


def test_entry_octet_flip_caught_by_checksum(traced):
    blob = serialize_helper(traced[0])
    rng = np.random.default_rng(9)
    start = 6 + 4 + 64 + 16 + 4 + 12
    for _ in range(50):
        i = int(rng.integers(start, start + 51 * 64 * 4))
        bad = bytearray(blob)
        bad[i] ^= int(rng.integers(1, 256))
        with pytest.raises(ChecksumError):
            deserialize_helper(bytes(bad))


def test_any_octet_flip_rejected(traced):
    blob = serialize_helper(traced[0])
    rng = np.random.default_rng(10)
    for i in rng.choice(len(blob), size=300, replace=False):
        bad = bytearray(blob)
        bad[int(i)] ^= 0x01
        with pytest.raises(HelperFormatError):
            deserialize_helper(bytes(bad))


def test_flip_with_fixed_crc_never_matches_silently(traced, small_population):
    # an attacker who also rewrites the checksum gets a perturbed chaff point at worst
    helper, positions = traced
    blob = bytearray(serialize_helper(helper))
    vault0 = 6 + 4 + 64 + 16 + 4 + 12
    i = vault0 + positions[0] * 64 * 4 + 5
    blob[i] ^= 0x40
    blob[-4:] = struct.pack("<I", zlib.crc32(bytes(blob[:-4])))
    tampered = deserialize_helper(bytes(blob))
    res = verify(tampered, small_population.template(3), tr=3)
    assert not res.accepted
    # only the flipped entry changed
    diff = tampered.vaults[0].entries != helper.vaults[0].entries
    assert diff.sum() == 1
