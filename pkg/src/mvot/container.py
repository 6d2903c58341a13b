"""Binary helper-data container (``.mvot``).

All integers little-endian::

    magic      4s   b"MVOT"
    version    u16
    params     u32 length, then <IIIIIIdddIQ>
               (gamma, n, m, k, tr, dim, r_min, r_max, delta,
                hash_version, combination_budget)
    salt       16 bytes
    vaults     u32 count, then per vault:
               u32 channel_index, u32 rows, u32 dim, rows*dim float32 LE
    commits    u32 count, then per commitment:
               u32 size, size * u32 vault index, 32-byte digest
    crc32      u32 over every preceding byte

Entry blocks are the exact bytes that were hashed at enrollment.
"""
from __future__ import annotations

import struct
import zlib

import numpy as np

from .embedding import DIGEST_SIZE, FLOAT_DTYPE
from .vault import FORMAT_VERSION, SALT_SIZE, HelperData, ProtocolParams, Vault

MAGIC = b"MVOT"
_PARAMS = struct.Struct("<IIIIIIdddIQ")


class HelperFormatError(ValueError):
    pass


class VersionError(HelperFormatError):
    pass


class TruncatedError(HelperFormatError):
    pass


class ChecksumError(HelperFormatError):
    pass


def serialize_helper(helper: HelperData) -> bytes:
    p = helper.params
    out = bytearray()
    out += MAGIC
    out += struct.pack("<H", helper.format_version)
    out += struct.pack("<I", _PARAMS.size)
    out += _PARAMS.pack(p.gamma, p.n, p.m, p.k, p.tr, p.dim, p.scalar_range[0],
                        p.scalar_range[1], p.noise_delta, p.hash_version, p.combination_budget)
    out += helper.salt
    out += struct.pack("<I", len(helper.vaults))
    for v in helper.vaults:
        rows, dim = v.entries.shape
        out += struct.pack("<III", v.channel_index, rows, dim)
        out += v.entries.tobytes()
    out += struct.pack("<I", len(helper.commitments))
    for subset, digest in helper.commitments.items():
        out += struct.pack(f"<I{len(subset)}I", len(subset), *subset)
        out += digest
    out += struct.pack("<I", zlib.crc32(out))
    return bytes(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n: int) -> memoryview:
        if self.pos + n > len(self.data):
            raise TruncatedError(f"stream truncated at offset {self.pos} (wanted {n} more bytes)")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))


def deserialize_helper(data: bytes) -> HelperData:
    if len(data) < 6 or bytes(data[:4]) != MAGIC:
        raise VersionError("not an MVOT helper stream (bad magic)")
    r = _Reader(data)
    r.take(4)
    (version,) = r.unpack("<H")
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported format version {version} (expected {FORMAT_VERSION})")
    (plen,) = r.unpack("<I")
    if plen != _PARAMS.size:
        raise HelperFormatError(f"params block is {plen} bytes, expected {_PARAMS.size}")
    gamma, n, m, k, tr, dim, r_min, r_max, delta, hv, budget = _PARAMS.unpack(r.take(plen))
    salt = bytes(r.take(SALT_SIZE))
    (nv,) = r.unpack("<I")
    vault_blocks = []
    for _ in range(nv):
        ch, rows, vdim = r.unpack("<III")
        raw = r.take(rows * vdim * FLOAT_DTYPE.itemsize)
        vault_blocks.append((ch, rows, vdim, raw))
    (nc,) = r.unpack("<I")
    commitments = {}
    for _ in range(nc):
        (size,) = r.unpack("<I")
        subset = r.unpack(f"<{size}I")
        commitments[tuple(subset)] = bytes(r.take(DIGEST_SIZE))
    body_end = r.pos
    (crc,) = r.unpack("<I")
    if r.pos != len(data):
        raise HelperFormatError(f"{len(data) - r.pos} trailing bytes after checksum")
    if zlib.crc32(r.data[:body_end]) != crc:
        raise ChecksumError("helper checksum mismatch")
    try:
        params = ProtocolParams(gamma=gamma, n=n, m=m, k=k, tr=tr, dim=dim,
                                scalar_range=(r_min, r_max), noise_delta=delta,
                                hash_version=hv, combination_budget=budget)
        vaults = tuple(
            Vault(np.frombuffer(raw, dtype=FLOAT_DTYPE).reshape(rows, vdim), ch)
            for ch, rows, vdim, raw in vault_blocks)
        return HelperData(params, vaults, salt, commitments, version)
    except ValueError as e:
        raise HelperFormatError(f"inconsistent helper contents: {e}") from e


def save_helper(helper: HelperData, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_helper(helper))


def load_helper(path) -> HelperData:
    with open(path, "rb") as fh:
        return deserialize_helper(fh.read())
