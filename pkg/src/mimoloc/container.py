"""ADPF binary container for angle-delay profile datasets.

Layout, all little-endian:

    magic   4 bytes  b"ADPF"
    version u16      1 = fingerprint records, 2 = sequence records
    n_t     u32      angle rows per profile
    n_c     u32      delay columns per profile
    count   u64      record count

Version 1 record: position as two float64 (x, y), then n_t*n_c float32
pixels row-major. Version 2 appends walk metadata per record: sequence id
u32, frame index u16, distorted flag u8. Pixels are stored exactly as
given (float32), so write -> read -> write is byte-identical.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import FormatError, TruncatedFile, VersionError

MAGIC = b"ADPF"
VERSION_FINGERPRINTS = 1
VERSION_SEQUENCES = 2

_HEADER = struct.Struct("<4sHIIQ")


def _record_dtype(version: int, n_t: int, n_c: int) -> np.dtype:
    fields = [("position", "<f8", (2,)), ("pixels", "<f4", (n_t, n_c))]
    if version == VERSION_SEQUENCES:
        fields += [
            ("sequence_id", "<u4"),
            ("frame_index", "<u2"),
            ("distorted", "u1"),
        ]
    return np.dtype(fields)


def write_container(
    path,
    version: int,
    n_t: int,
    n_c: int,
    records: np.ndarray,
) -> None:
    """Write a structured record array (matching ``record_dtype``) to disk."""
    if version not in (VERSION_FINGERPRINTS, VERSION_SEQUENCES):
        raise VersionError(f"unsupported container version {version}")
    expected = _record_dtype(version, n_t, n_c)
    if records.dtype != expected:
        raise FormatError("record array dtype does not match container layout")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, version, n_t, n_c, len(records)))
        fh.write(records.tobytes())


def read_container(path, expect_version: int | None = None):
    """Read an ADPF file.

    Returns:
        (version, n_t, n_c, records) where records is a structured array
        with fields position/pixels (+ sequence metadata for version 2).

    Raises:
        FormatError: bad magic or trailing garbage.
        VersionError: version unsupported or not the expected one.
        TruncatedFile: file ends before the declared record count.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _HEADER.size:
        raise TruncatedFile("file shorter than the ADPF header")
    magic, version, n_t, n_c, count = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version not in (VERSION_FINGERPRINTS, VERSION_SEQUENCES):
        raise VersionError(f"unsupported container version {version}")
    if expect_version is not None and version != expect_version:
        raise VersionError(f"expected version {expect_version}, found {version}")
    dtype = _record_dtype(version, n_t, n_c)
    body = data[_HEADER.size:]
    need = count * dtype.itemsize
    if len(body) < need:
        raise TruncatedFile(
            f"expected {need} record bytes, found {len(body)}"
        )
    if len(body) > need:
        raise FormatError(f"{len(body) - need} trailing bytes after records")
    records = np.frombuffer(body, dtype=dtype, count=count).copy()
    return version, n_t, n_c, records


def make_records(version: int, n_t: int, n_c: int, count: int) -> np.ndarray:
    """Allocate an empty record array with the exact on-disk layout."""
    return np.zeros(count, dtype=_record_dtype(version, n_t, n_c))
