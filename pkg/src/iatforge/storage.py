"""Canonical on-disk encodings for registries, table vectors and bitvector bases.

All encoders are deterministic: the same value always serialises to the same
bytes, so files can be compared by hash.

Registry (UTF-8 text, LF)::

    IATREG 1
    D <dll_id> <dll_name>
    F <dll_id> <func_id> <function_key>

Vector file (little-endian)::

    "IATV" | 0x01 | kind u8 | registry_version u64 | count u64 | ids u64* | crc32 u32

Bitvector base file (little-endian)::

    "IATB" | 0x01 | role u8 | universe u64 | count u64 | (nbytes u64, bytes)* | crc32 u32
"""

from __future__ import annotations

import enum
import struct
import zlib
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .errors import BadMagic, CorruptPayload, StoreFormatError, UnsupportedVersion
from .features import (
    CombinationVector,
    FunctionBitVector,
    PairRegistry,
    TableKind,
    TableVector,
)

REGISTRY_HEADER = "IATREG 1"
VECTOR_MAGIC = b"IATV"
BASE_MAGIC = b"IATB"
FORMAT_VERSION = 1

PathLike = Union[str, Path]


class Role(enum.IntEnum):
    MALWARE_SET = 0x01
    BENIGN_SET = 0x02
    BLACKLIST = 0x03
    BINOMIAL_UNION = 0x12
    TRINOMIAL_UNION = 0x13


# ---------------------------------------------------------------------------
# Registry
# ---------------------------------------------------------------------------


def dumps_registry(registry: PairRegistry) -> bytes:
    for name in registry.dll_names:
        _check_token(name)
    for keys in registry.func_keys:
        for key in keys:
            _check_token(key)
    lines = [REGISTRY_HEADER]
    for dll_id, name in enumerate(registry.dll_names):
        lines.append(f"D {dll_id} {name}")
    for dll_id, keys in enumerate(registry.func_keys):
        for func_id, key in enumerate(keys):
            lines.append(f"F {dll_id} {func_id} {key}")
    return ("\n".join(lines) + "\n").encode("utf-8")


def _check_token(text: str) -> None:
    if not text or "\n" in text or "\r" in text:
        raise ValueError(f"name {text!r} cannot be stored in a registry file")


def loads_registry(data: bytes) -> PairRegistry:
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CorruptPayload(f"registry is not UTF-8: {exc}") from None
    lines = text.split("\n")
    if not lines or lines[0] != REGISTRY_HEADER:
        if lines and lines[0].startswith("IATREG "):
            raise UnsupportedVersion(lines[0])
        raise BadMagic("registry header missing")
    if lines[-1] == "":
        lines.pop()

    registry = PairRegistry()
    for lineno, line in enumerate(lines[1:], start=2):
        tag, _, rest = line.partition(" ")
        try:
            if tag == "D":
                dll_id, name = rest.split(" ", 1)
                if int(dll_id) != registry.dll_count or not name:
                    raise ValueError("dll ids must be dense and names non-empty")
                if name in registry.dll_ids:
                    raise ValueError(f"duplicate dll {name!r}")
                registry.dll_ids[name] = int(dll_id)
                registry.dll_names.append(name)
                registry.func_keys.append([])
            elif tag == "F":
                raw_dll, func_id, key = rest.split(" ", 2)
                dll_id = int(raw_dll)
                if not 0 <= dll_id < registry.dll_count:
                    raise ValueError(f"unknown dll id {dll_id}")
                keys = registry.func_keys[dll_id]
                if int(func_id) != len(keys):
                    raise ValueError("function ids must be dense and ordered")
                if not key or (dll_id, key) in registry.func_ids:
                    raise ValueError(f"empty or duplicate function key {key!r}")
                registry.func_ids[(dll_id, key)] = len(keys)
                keys.append(key)
            else:
                raise ValueError(f"unknown record {tag!r}")
        except (ValueError, IndexError) as exc:
            raise CorruptPayload(f"registry line {lineno}: {exc}") from None
    registry.version = registry.universe_size
    return registry


def save_registry(registry: PairRegistry, path: PathLike) -> None:
    Path(path).write_bytes(dumps_registry(registry))


def load_registry(path: PathLike) -> PairRegistry:
    return loads_registry(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# Checksummed binary framing
# ---------------------------------------------------------------------------


def _seal(body: bytes) -> bytes:
    return body + struct.pack("<I", zlib.crc32(body))


def _open(data: bytes, magic: bytes) -> memoryview:
    if len(data) < 4 or data[:4] != magic:
        raise BadMagic(f"expected {magic!r}, found {bytes(data[:4])!r}")
    if len(data) < 6:
        raise CorruptPayload("truncated header")
    if data[4] != FORMAT_VERSION:
        raise UnsupportedVersion(f"format version {data[4]}")
    if len(data) < 10:
        raise CorruptPayload("truncated header")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptPayload("checksum mismatch")
    return memoryview(body)


# ---------------------------------------------------------------------------
# Table vectors
# ---------------------------------------------------------------------------


def dumps_vector(vector: TableVector) -> bytes:
    head = VECTOR_MAGIC + struct.pack("<BBQQ", FORMAT_VERSION, int(vector.kind), vector.registry_version, len(vector))
    return _seal(head + vector.ids.astype("<u8").tobytes())


def loads_vector(data: bytes) -> TableVector:
    body = _open(data, VECTOR_MAGIC)
    if len(body) < 22:
        raise CorruptPayload("truncated vector header")
    _, kind, version, count = struct.unpack_from("<BBQQ", body, 4)
    if len(body) != 22 + 8 * count:
        raise CorruptPayload(f"vector payload holds {len(body) - 22} bytes, header says {8 * count}")
    try:
        kind = TableKind(kind)
    except ValueError:
        raise CorruptPayload(f"unknown table kind {kind}") from None
    ids = np.frombuffer(body[22:], dtype="<u8").astype(np.uint64)
    try:
        return TableVector(kind, ids, version)
    except ValueError as exc:
        raise CorruptPayload(str(exc)) from None


def save_vector(vector: TableVector, path: PathLike) -> None:
    Path(path).write_bytes(dumps_vector(vector))


def load_vector(path: PathLike) -> TableVector:
    return loads_vector(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# Bitvector bases
# ---------------------------------------------------------------------------


BaseVector = Union[FunctionBitVector, CombinationVector]


def _positions_to_bytes(positions: np.ndarray) -> bytes:
    if positions.size == 0:
        return b""
    buf = np.zeros(int(positions[-1]) // 8 + 1, dtype=np.uint8)
    np.bitwise_or.at(buf, positions // 8, (1 << (positions % 8)).astype(np.uint8))
    return buf.tobytes()


def _encode_bits(vector: BaseVector) -> bytes:
    if isinstance(vector, CombinationVector):
        return _positions_to_bytes(vector.positions)
    bits = vector.bits
    return bits.to_bytes((bits.bit_length() + 7) // 8, "little")


def dumps_base(role: Role, universe_size: int, vectors: Sequence[BaseVector]) -> bytes:
    """Serialise a labeled bitvector set, the blacklist, or a pair of unions.

    Union files hold two vectors: the malware union first, then the benign one.
    """
    role = Role(role)
    parts = [BASE_MAGIC, struct.pack("<BBQQ", FORMAT_VERSION, int(role), universe_size, len(vectors))]
    for vec in vectors:
        if vec.universe_size != universe_size:
            raise ValueError("vector universe differs from the file universe")
        payload = _encode_bits(vec)
        parts.append(struct.pack("<Q", len(payload)))
        parts.append(payload)
    return _seal(b"".join(parts))


def loads_base(data: bytes, registry_version: int = 0) -> tuple[Role, int, list[BaseVector]]:
    body = _open(data, BASE_MAGIC)
    if len(body) < 22:
        raise CorruptPayload("truncated base header")
    _, role, universe, count = struct.unpack_from("<BBQQ", body, 4)
    try:
        role = Role(role)
    except ValueError:
        raise CorruptPayload(f"unknown role byte {role:#x}") from None
    order = {Role.BINOMIAL_UNION: 2, Role.TRINOMIAL_UNION: 3}.get(role)
    pos = 22
    vectors: list[BaseVector] = []
    for _ in range(count):
        if pos + 8 > len(body):
            raise CorruptPayload("truncated vector length")
        (n,) = struct.unpack_from("<Q", body, pos)
        pos += 8
        if pos + n > len(body):
            raise CorruptPayload("truncated vector payload")
        raw = bytes(body[pos : pos + n])
        pos += n
        if n and raw[-1] == 0:
            raise CorruptPayload("non-canonical trailing zero byte")
        try:
            if order is None:
                vectors.append(FunctionBitVector(int.from_bytes(raw, "little"), universe, registry_version))
            else:
                bits = np.flatnonzero(np.unpackbits(np.frombuffer(raw, np.uint8), bitorder="little"))
                vectors.append(CombinationVector(order, universe, bits))
        except (ValueError, StoreFormatError, IndexError) as exc:
            raise CorruptPayload(str(exc)) from None
    if pos != len(body):
        raise CorruptPayload("trailing bytes after last vector")
    return role, universe, vectors


def save_base(role: Role, universe_size: int, vectors: Sequence[BaseVector], path: PathLike) -> None:
    Path(path).write_bytes(dumps_base(role, universe_size, vectors))


def load_base(path: PathLike, registry_version: int = 0) -> tuple[Role, int, list[BaseVector]]:
    return loads_base(Path(path).read_bytes(), registry_version)

