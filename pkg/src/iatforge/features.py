"""Pair registry and feature encodings.

Two families of encodings live here:

* sparse ``TableVector``\\ s -- strictly sorted arrays of 64-bit pair ids, the
  input of the k-NN detector;
* dense bit encodings over the registered function universe --
  ``FunctionBitVector`` (one bit per function, stored as a Python ``int``) and
  ``CombinationVector`` (one bit per 2- or 3-subset of functions, stored as the
  sorted positions of its set bits because the dense form grows as n**3).

Bit ``i`` of a function bitvector belongs to the function whose pair id has
rank ``i`` among all registered pair ids.  That order is fixed for a given
registry content, is recoverable from the registry file alone, and coincides
with the sort order of table vectors.
"""

from __future__ import annotations

import enum
import functools
import math
from dataclasses import dataclass, field
from typing import Iterable, Literal, Optional, Sequence, Union

import numpy as np

from .errors import (
    CapacityExhausted,
    DegenerateInput,
    IndexOutOfRange,
    LengthMismatch,
    VersionMismatch,
)

DLL_BITS = 20
FUNC_BITS = 44
MAX_DLLS = 1 << DLL_BITS
MAX_FUNCS_PER_DLL = 1 << FUNC_BITS
_FUNC_MASK = MAX_FUNCS_PER_DLL - 1


class Label(str, enum.Enum):
    MALWARE = "malware"
    BENIGN = "benign"

    @property
    def malicious(self) -> bool:
        return self is Label.MALWARE

    def other(self) -> "Label":
        return Label.BENIGN if self is Label.MALWARE else Label.MALWARE


class TableKind(enum.IntEnum):
    IAT = 1
    EAT = 2


# ---------------------------------------------------------------------------
# Pair ids
# ---------------------------------------------------------------------------


class PairId(int):
    """64-bit id: 20-bit DLL id in the high bits, 44-bit function id below."""

    __slots__ = ()

    def __new__(cls, value: int) -> "PairId":
        if not 0 <= value < 1 << 64:
            raise ValueError(f"pair id {value} outside 64 bits")
        return super().__new__(cls, value)

    @classmethod
    def pack(cls, dll_id: int, func_id: int) -> "PairId":
        if not 0 <= dll_id < MAX_DLLS:
            raise ValueError(f"dll id {dll_id} outside {DLL_BITS} bits")
        if not 0 <= func_id < MAX_FUNCS_PER_DLL:
            raise ValueError(f"function id {func_id} outside {FUNC_BITS} bits")
        return cls((dll_id << FUNC_BITS) | func_id)

    @property
    def value(self) -> int:
        return int(self)

    @property
    def dll_id(self) -> int:
        return int(self) >> FUNC_BITS

    @property
    def func_id(self) -> int:
        return int(self) & _FUNC_MASK

    def __repr__(self) -> str:
        return f"PairId(dll={self.dll_id}, func={self.func_id})"


class PairRegistry:
    """Dense id assignment for DLLs and their functions.

    ``version`` counts mutations: it grows by one each time a new pair is
    registered, so it always equals ``universe_size`` for a registry built by
    :meth:`register`.
    """

    def __init__(self, *, max_dlls: int = MAX_DLLS, max_funcs_per_dll: int = MAX_FUNCS_PER_DLL) -> None:
        self.max_dlls = min(max_dlls, MAX_DLLS)
        self.max_funcs_per_dll = min(max_funcs_per_dll, MAX_FUNCS_PER_DLL)
        self.dll_ids: dict[str, int] = {}
        self.dll_names: list[str] = []
        self.func_ids: dict[tuple[int, str], int] = {}
        self.func_keys: list[list[str]] = []
        self.version = 0
        self._sorted_cache: Optional[tuple[int, np.ndarray]] = None

    @property
    def universe_size(self) -> int:
        return len(self.func_ids)

    @property
    def dll_count(self) -> int:
        return len(self.dll_names)

    def register(self, dll_name: str, function_key: str) -> PairId:
        dll_id = self.dll_ids.get(dll_name)
        if dll_id is not None:
            func_id = self.func_ids.get((dll_id, function_key))
            if func_id is not None:
                return PairId.pack(dll_id, func_id)
            if len(self.func_keys[dll_id]) >= self.max_funcs_per_dll:
                raise CapacityExhausted(f"function namespace of {dll_name!r} is full")
        elif len(self.dll_names) >= self.max_dlls:
            raise CapacityExhausted("dll namespace is full")
        else:
            dll_id = len(self.dll_names)
            self.dll_ids[dll_name] = dll_id
            self.dll_names.append(dll_name)
            self.func_keys.append([])

        func_id = len(self.func_keys[dll_id])
        self.func_keys[dll_id].append(function_key)
        self.func_ids[(dll_id, function_key)] = func_id
        self.version += 1
        return PairId.pack(dll_id, func_id)

    def lookup(self, dll_name: str, function_key: str) -> Optional[PairId]:
        dll_id = self.dll_ids.get(dll_name)
        if dll_id is None:
            return None
        func_id = self.func_ids.get((dll_id, function_key))
        if func_id is None:
            return None
        return PairId.pack(dll_id, func_id)

    def describe(self, pair: int) -> tuple[str, str]:
        pid = PairId(int(pair))
        return self.dll_names[pid.dll_id], self.func_keys[pid.dll_id][pid.func_id]

    def all_ids(self) -> np.ndarray:
        """Every registered pair id, ascending (cached per version)."""
        cache = self._sorted_cache
        if cache is not None and cache[0] == self.version:
            return cache[1]
        ids = np.fromiter(
            ((d << FUNC_BITS) | f for d, keys in enumerate(self.func_keys) for f in range(len(keys))),
            dtype=np.uint64,
            count=self.universe_size,
        )
        ids.sort()
        ids.setflags(write=False)
        self._sorted_cache = (self.version, ids)
        return ids

    def global_index(self, pair: Union[int, np.ndarray]) -> Union[int, np.ndarray]:
        """Dense function index (bit position) of registered pair id(s)."""
        ids = self.all_ids()
        arr = np.asarray(pair, dtype=np.uint64)
        pos = np.searchsorted(ids, arr)
        if np.any(pos >= ids.size) or np.any(ids[np.minimum(pos, ids.size - 1)] != arr):
            raise KeyError("pair id not registered")
        return int(pos) if np.ndim(pos) == 0 else pos

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PairRegistry):
            return NotImplemented
        return (
            self.dll_names == other.dll_names
            and self.func_keys == other.func_keys
            and self.version == other.version
        )

    def __repr__(self) -> str:
        return f"PairRegistry(dlls={self.dll_count}, functions={self.universe_size}, version={self.version})"


def register_pair(registry: PairRegistry, dll_name: str, function_key: str) -> PairId:
    return registry.register(dll_name, function_key)


# ---------------------------------------------------------------------------
# Table vectors
# ---------------------------------------------------------------------------


def _frozen_ids(ids: Iterable[int]) -> np.ndarray:
    arr = np.array(list(ids) if not isinstance(ids, np.ndarray) else ids, dtype=np.uint64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class TableVector:
    kind: TableKind
    ids: np.ndarray
    registry_version: int

    def __post_init__(self) -> None:
        ids = _frozen_ids(self.ids)
        if ids.ndim != 1:
            raise ValueError("ids must be one-dimensional")
        if ids.size > 1 and not np.all(ids[1:] > ids[:-1]):
            raise ValueError("ids must be strictly increasing")
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "kind", TableKind(self.kind))

    @classmethod
    def from_ids(cls, ids: Iterable[int], kind: TableKind = TableKind.IAT, registry_version: int = 0) -> "TableVector":
        return cls(kind, np.unique(np.array(list(ids), dtype=np.uint64)), registry_version)

    def retagged(self, registry_version: int) -> "TableVector":
        return TableVector(self.kind, self.ids, registry_version)

    def key(self) -> bytes:
        """Hashable identity of the id set (kind and version excluded)."""
        return self.ids.astype("<u8").tobytes()

    def __len__(self) -> int:
        return int(self.ids.size)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TableVector):
            return NotImplemented
        return (
            self.kind == other.kind
            and self.registry_version == other.registry_version
            and np.array_equal(self.ids, other.ids)
        )

    def __hash__(self) -> int:
        return hash((self.kind, self.registry_version, self.key()))

    def __repr__(self) -> str:
        shown = ", ".join(str(int(i)) for i in self.ids[:6])
        more = ", ..." if self.ids.size > 6 else ""
        return f"TableVector({self.kind.name}, [{shown}{more}], v{self.registry_version})"


PairKey = tuple[str, str]


def vectorize(pairs: Iterable[Union[PairKey, object]], registry: PairRegistry, kind: TableKind = TableKind.IAT) -> TableVector:
    """Look each (dll, function key) pair up; unknown pairs are dropped.

    Accepts ``(dll_name, function_key)`` tuples or any object exposing
    ``dll_name`` and ``function_key`` (e.g. :class:`ImportedPair`).
    """
    found = []
    for pair in pairs:
        if isinstance(pair, tuple):
            dll, key = pair
        else:
            dll, key = pair.dll_name, pair.function_key  # type: ignore[attr-defined]
        pid = registry.lookup(dll, key)
        if pid is not None:
            found.append(int(pid))
    return TableVector(kind, np.unique(np.array(found, dtype=np.uint64)), registry.version)


def import_keys(imports: Iterable) -> list[PairKey]:
    return [(p.dll_name, p.function_key) for p in imports]


def export_keys(dll_name: str, exports: Iterable) -> list[PairKey]:
    return [(dll_name, e.function_key) for e in exports]


# ---------------------------------------------------------------------------
# Function bitvectors
# ---------------------------------------------------------------------------


def int_from_indices(indices: Iterable[int]) -> int:
    arr = np.asarray(list(indices) if not isinstance(indices, np.ndarray) else indices, dtype=np.int64)
    if arr.size == 0:
        return 0
    if arr.min() < 0:
        raise IndexOutOfRange("negative bit index")
    buf = np.zeros(int(arr.max()) // 8 + 1, dtype=np.uint8)
    np.bitwise_or.at(buf, arr // 8, (1 << (arr % 8)).astype(np.uint8))
    return int.from_bytes(buf.tobytes(), "little")


def indices_from_int(value: int) -> np.ndarray:
    if value == 0:
        return np.zeros(0, dtype=np.int64)
    raw = np.frombuffer(value.to_bytes((value.bit_length() + 7) // 8, "little"), dtype=np.uint8)
    return np.flatnonzero(np.unpackbits(raw, bitorder="little")).astype(np.int64)


@dataclass(frozen=True)
class FunctionBitVector:
    bits: int
    universe_size: int
    registry_version: int = 0

    def __post_init__(self) -> None:
        if self.bits < 0 or self.bits.bit_length() > self.universe_size:
            raise IndexOutOfRange("bitvector has bits beyond the universe")

    @classmethod
    def from_indices(cls, indices: Iterable[int], universe_size: int, registry_version: int = 0) -> "FunctionBitVector":
        return cls(int_from_indices(indices), universe_size, registry_version)

    def indices(self) -> np.ndarray:
        return indices_from_int(self.bits)

    @property
    def popcount(self) -> int:
        return self.bits.bit_count()

    def __int__(self) -> int:
        return self.bits


def to_bitvector(vector: TableVector, registry: PairRegistry) -> FunctionBitVector:
    if vector.registry_version != registry.version:
        raise VersionMismatch(
            f"vector built against registry v{vector.registry_version}, registry is v{registry.version}"
        )
    positions = registry.global_index(vector.ids) if len(vector) else []
    return FunctionBitVector(int_from_indices(positions), registry.universe_size, registry.version)


# ---------------------------------------------------------------------------
# Combination indexing
# ---------------------------------------------------------------------------


def pair_index(i: int, j: int, n: int) -> int:
    """0-based lexicographic rank of the 1-based pair (i, j) among C(n, 2)."""
    if not 1 <= i < j <= n:
        raise IndexOutOfRange(f"need 1 <= i < j <= n, got ({i}, {j}), n={n}")
    return (i - 1) * n - i * (i - 1) // 2 + (j - i - 1)


def triple_index(i: int, j: int, k: int, n: int) -> int:
    """0-based lexicographic rank of the 1-based triple (i, j, k) among C(n, 3)."""
    if not 1 <= i < j < k <= n:
        raise IndexOutOfRange(f"need 1 <= i < j < k <= n, got ({i}, {j}, {k}), n={n}")
    # triples whose first element is < i, then the (j, k) pair inside {i+1..n}
    return math.comb(n, 3) - math.comb(n - i + 1, 3) + pair_index(j - i, k - i, n - i)


@functools.lru_cache(maxsize=256)
def _local_pairs(s: int) -> tuple[np.ndarray, np.ndarray]:
    return np.triu_indices(s, k=1)


_TRIPLE_TABLE_MAX = 128


@functools.lru_cache(maxsize=128)
def _local_triples(s: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # every (a, b, c) with a < b < c < s, lexicographic; cached for small s only
    a, b, c = [], [], []
    for ai in range(s - 2):
        bb, cc = np.triu_indices(s - ai - 1, k=1)
        a.append(np.full(bb.size, ai))
        b.append(bb + ai + 1)
        c.append(cc + ai + 1)
    return tuple(np.concatenate(part) if part else np.zeros(0, dtype=np.int64) for part in (a, b, c))


def _pair_positions(idx: np.ndarray, n: int) -> np.ndarray:
    # idx: sorted 0-based function indices
    a, b = _local_pairs(idx.size)
    i0, j0 = idx[a], idx[b]
    return i0 * n - i0 * (i0 + 1) // 2 + (j0 - i0 - 1)


def _triple_positions(idx: np.ndarray, n: int) -> np.ndarray:
    s = idx.size
    if s < 3:
        return np.zeros(0, dtype=np.int64)
    total = math.comb(n, 3)
    # rank of the first element's block: C(n,3) - C(n - i0, 3), one exact value per i0
    heads = np.array([total - math.comb(n - int(i0), 3) for i0 in idx[: s - 2]], dtype=np.int64)
    if s <= _TRIPLE_TABLE_MAX:
        a, b, c = _local_triples(s)
        i0 = idx[a]
        j1, k1 = idx[b] - i0 - 1, idx[c] - i0 - 1
        m = n - i0 - 1
        return heads[a] + j1 * m - j1 * (j1 + 1) // 2 + (k1 - j1 - 1)
    chunks = []
    for ai in range(s - 2):
        i0 = idx[ai]
        rest = idx[ai + 1 :]
        b, c = np.triu_indices(rest.size, k=1)
        j1, k1 = rest[b] - i0 - 1, rest[c] - i0 - 1
        m = n - i0 - 1
        chunks.append(heads[ai] + j1 * m - j1 * (j1 + 1) // 2 + (k1 - j1 - 1))
    return np.concatenate(chunks)


def combination_positions(indices: Iterable[int], n: int, order: int) -> np.ndarray:
    """Sorted bit positions of every ``order``-subset of the given function indices."""
    idx = np.unique(np.asarray(list(indices) if not isinstance(indices, np.ndarray) else indices, dtype=np.int64))
    if idx.size and (idx[0] < 0 or idx[-1] >= n):
        raise IndexOutOfRange("function index outside universe")
    if math.comb(n, order) >= 1 << 62:
        raise IndexOutOfRange(f"C({n}, {order}) does not fit 62-bit positions")
    if order == 2:
        pos = _pair_positions(idx, n)
    elif order == 3:
        pos = _triple_positions(idx, n)
    else:
        raise ValueError("order must be 2 or 3")
    pos = pos.astype(np.int64, copy=False)
    pos.sort()
    return pos


@dataclass(frozen=True, eq=False)
class CombinationVector:
    """Bitstring over all ``order``-subsets of an ``universe_size`` universe.

    Only the set positions are stored, ascending.
    """

    order: int
    universe_size: int
    positions: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        if self.order not in (2, 3):
            raise ValueError("order must be 2 or 3")
        pos = np.array(self.positions, dtype=np.int64)
        if pos.size > 1 and not np.all(pos[1:] > pos[:-1]):
            raise ValueError("positions must be strictly increasing")
        if pos.size and (pos[0] < 0 or pos[-1] >= self.length):
            raise IndexOutOfRange("combination position outside vector length")
        pos.setflags(write=False)
        object.__setattr__(self, "positions", pos)

    @property
    def length(self) -> int:
        return math.comb(self.universe_size, self.order)

    @property
    def popcount(self) -> int:
        return int(self.positions.size)

    def to_int(self) -> int:
        return int_from_indices(self.positions)

    @classmethod
    def from_int(cls, order: int, universe_size: int, value: int) -> "CombinationVector":
        return cls(order, universe_size, indices_from_int(value))

    def intersection_count(self, other: "CombinationVector") -> int:
        _check_compatible(self, other)
        return int(np.intersect1d(self.positions, other.positions, assume_unique=True).size)

    def union(self, other: "CombinationVector") -> "CombinationVector":
        _check_compatible(self, other)
        return CombinationVector(self.order, self.universe_size, np.union1d(self.positions, other.positions))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, CombinationVector):
            return NotImplemented
        return (
            self.order == other.order
            and self.universe_size == other.universe_size
            and np.array_equal(self.positions, other.positions)
        )

    def __repr__(self) -> str:
        return f"CombinationVector(order={self.order}, n={self.universe_size}, popcount={self.popcount})"


def _check_compatible(a: CombinationVector, b: CombinationVector) -> None:
    if a.order != b.order or a.universe_size != b.universe_size:
        raise LengthMismatch(
            f"combination vectors differ: order {a.order}/{b.order}, n {a.universe_size}/{b.universe_size}"
        )


def build_combination_vector(fbv: FunctionBitVector, order: int) -> CombinationVector:
    if fbv.universe_size < order:
        raise ValueError(f"universe of {fbv.universe_size} functions has no {order}-subsets")
    return CombinationVector(order, fbv.universe_size, combination_positions(fbv.indices(), fbv.universe_size, order))


def union_of(vectors: Iterable[FunctionBitVector], order: int, universe_size: int) -> CombinationVector:
    """Union of the ``order``-combination vectors of every input bitvector."""
    acc = np.zeros(0, dtype=np.int64)
    pending: list[np.ndarray] = []
    pending_size = 0
    for fbv in vectors:
        if fbv.universe_size != universe_size:
            raise LengthMismatch("bitvector universe differs from union universe")
        pos = combination_positions(fbv.indices(), universe_size, order)
        pending.append(pos)
        pending_size += pos.size
        if pending_size > 16_000_000:
            acc = np.union1d(acc, np.concatenate(pending))
            pending, pending_size = [], 0
    if pending:
        acc = np.union1d(acc, np.concatenate(pending))
    return CombinationVector(order, universe_size, acc)


def remove_common_sets(
    m_union: CombinationVector, g_union: CombinationVector
) -> tuple[CombinationVector, CombinationVector]:
    """Return ``(m AND NOT g, g AND NOT m)``."""
    _check_compatible(m_union, g_union)
    m_only = np.setdiff1d(m_union.positions, g_union.positions, assume_unique=True)
    g_only = np.setdiff1d(g_union.positions, m_union.positions, assume_unique=True)
    return (
        CombinationVector(m_union.order, m_union.universe_size, m_only),
        CombinationVector(g_union.order, g_union.universe_size, g_only),
    )


# ---------------------------------------------------------------------------
# Information gain and pruning
# ---------------------------------------------------------------------------

Vector = Union[TableVector, FunctionBitVector]
LabeledVector = tuple[Vector, Label]


def _attributes(vector: Vector) -> np.ndarray:
    if isinstance(vector, TableVector):
        return vector.ids.astype(np.uint64)
    return vector.indices().astype(np.uint64)


def _ig_from_counts(n1m: np.ndarray, n1b: np.ndarray, n_m: int, n_b: int) -> np.ndarray:
    """Vectorised mutual information (bits) from per-attribute presence counts."""
    total = n_m + n_b
    n1m = np.asarray(n1m, dtype=np.float64)
    n1b = np.asarray(n1b, dtype=np.float64)
    joint = np.stack([n1m, n1b, n_m - n1m, n_b - n1b])  # (v=1,M) (v=1,B) (v=0,M) (v=0,B)
    pv = np.stack([n1m + n1b, n1m + n1b, total - n1m - n1b, total - n1m - n1b])
    pc = np.array([n_m, n_b, n_m, n_b], dtype=np.float64)[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = (joint / total) * np.log2(joint * total / (pv * pc))
    terms = np.where(joint > 0, terms, 0.0)
    return np.maximum(terms.sum(axis=0), 0.0)


def information_gain(attribute: int, samples: Sequence[tuple[Vector, Label]]) -> float:
    """Mutual information in bits between one attribute and the class label.

    ``attribute`` is a bit position for function bitvectors and a pair id for
    table vectors.
    """
    if not samples:
        raise DegenerateInput("no samples")
    labels = {Label(lbl) for _, lbl in samples}
    if len(labels) < 2:
        raise DegenerateInput("information gain needs both labels")
    counts = {(v, c): 0 for v in (0, 1) for c in Label}
    for vec, lbl in samples:
        if isinstance(vec, TableVector):
            present = bool(np.any(vec.ids == np.uint64(attribute)))
        else:
            present = bool(vec.bits >> attribute & 1)
        counts[(int(present), Label(lbl))] += 1
    n = len(samples)
    ig = 0.0
    for v in (0, 1):
        p_v = (counts[(v, Label.MALWARE)] + counts[(v, Label.BENIGN)]) / n
        for c in Label:
            p_vc = counts[(v, c)] / n
            if p_vc == 0:
                continue
            p_c = (counts[(0, c)] + counts[(1, c)]) / n
            ig += p_vc * math.log2(p_vc / (p_v * p_c))
    return max(ig, 0.0)


def attribute_gains(samples: Sequence[tuple[Vector, Label]]) -> dict[int, float]:
    """Information gain of every attribute that is set in at least one sample."""
    labels = [Label(lbl) for _, lbl in samples]
    n_m = sum(lbl is Label.MALWARE for lbl in labels)
    n_b = len(labels) - n_m
    if n_m == 0 or n_b == 0:
        raise DegenerateInput("information gain needs both labels")
    attrs = [_attributes(v) for v, _ in samples]
    malware_attrs = [a for a, lbl in zip(attrs, labels) if lbl is Label.MALWARE]
    benign_attrs = [a for a, lbl in zip(attrs, labels) if lbl is Label.BENIGN]
    all_m = np.concatenate(malware_attrs) if malware_attrs else np.zeros(0, np.uint64)
    all_b = np.concatenate(benign_attrs) if benign_attrs else np.zeros(0, np.uint64)
    keys = np.union1d(all_m, all_b)
    if keys.size == 0:
        return {}
    um, cm = np.unique(all_m, return_counts=True)
    ub, cb = np.unique(all_b, return_counts=True)
    n1m = np.zeros(keys.size)
    n1b = np.zeros(keys.size)
    n1m[np.searchsorted(keys, um)] = cm
    n1b[np.searchsorted(keys, ub)] = cb
    gains = _ig_from_counts(n1m, n1b, n_m, n_b)
    return dict(zip((int(k) for k in keys), gains.tolist()))


Score = Literal["ig", "density"]


def vector_scores(samples: Sequence[tuple[Vector, Label]], score: Score) -> list[float]:
    if score == "density":
        return [float(_attributes(v).size) for v, _ in samples]
    if score == "ig":
        gains = attribute_gains(samples)
        out = []
        for vec, _ in samples:
            attrs = _attributes(vec)
            out.append(sum(gains[int(a)] for a in attrs) / attrs.size if attrs.size else 0.0)
        return out
    raise ValueError(f"unknown score {score!r}")


def keep_count(keep_fraction: float, count: int) -> int:
    """``ceil(keep_fraction * count)``, immune to float noise such as 0.7 * 10 = 7.000000000000001."""
    return min(count, math.ceil(round(keep_fraction * count, 9)))


def prune_base(
    vectors: Sequence[tuple[Vector, Label]], keep_fraction: float, score: Score = "density"
) -> list[tuple[Vector, Label]]:
    """Keep the ``ceil(keep_fraction * count)`` best-scoring vectors of each label.

    Ties go to the earlier vector; survivors keep their original order.
    """
    if not 0 < keep_fraction <= 1:
        raise ValueError("keep_fraction must lie in (0, 1]")
    vectors = list(vectors)
    if keep_fraction == 1 or not vectors:
        return vectors
    scores = vector_scores(vectors, score)
    keep: set[int] = set()
    for label in Label:
        members = [i for i, (_, lbl) in enumerate(vectors) if Label(lbl) is label]
        quota = keep_count(keep_fraction, len(members))
        ranked = sorted(members, key=lambda i: (-scores[i], i))
        keep.update(ranked[:quota])
    return [item for i, item in enumerate(vectors) if i in keep]

