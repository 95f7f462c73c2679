"""Five-test combinatorial detector over function bitvectors.

Tests run in a fixed order and each malicious outcome adds one vote:

1. blacklist -- any shared bit with the blacklist vector;
2. XOR neighbours -- Hamming distance, smaller is closer;
3. AND neighbours -- shared-function count, larger is closer;
4. binomial -- function pairs shared with the malware vs benign pair unions;
5. trinomial -- same with function triples.

A file is malicious when the vote count reaches ``vote_threshold``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .errors import EmptyBase, LengthMismatch
from .features import (
    CombinationVector,
    FunctionBitVector,
    Label,
    build_combination_vector,
    remove_common_sets,
    union_of,
)


class Mode(str, enum.Enum):
    XOR = "xor"
    AND = "and"


@dataclass(frozen=True)
class CombiConfig:
    p: int = 15
    gap_ratio: float = 4.0
    vote_threshold: int = 2
    blacklist_decisive: bool = False

    def __post_init__(self) -> None:
        if self.p < 1:
            raise ValueError("p must be positive")
        if self.gap_ratio < 1:
            raise ValueError("gap_ratio must be >= 1")

    @property
    def neighbors(self) -> int:
        return 2 * self.p + 1


@dataclass(frozen=True)
class CombiBase:
    blacklist: FunctionBitVector
    malware_vectors: tuple[FunctionBitVector, ...]
    benign_vectors: tuple[FunctionBitVector, ...]
    mbs: CombinationVector
    gbs: CombinationVector
    mts: CombinationVector
    gts: CombinationVector
    universe_size: int
    registry_version: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "malware_vectors", tuple(self.malware_vectors))
        object.__setattr__(self, "benign_vectors", tuple(self.benign_vectors))
        n = self.universe_size
        for vec in (self.blacklist, *self.malware_vectors, *self.benign_vectors):
            if vec.universe_size != n:
                raise LengthMismatch(f"bitvector over {vec.universe_size} functions in a base over {n}")
        for order, (m, g) in ((2, (self.mbs, self.gbs)), (3, (self.mts, self.gts))):
            if m.order != order or g.order != order or m.universe_size != n or g.universe_size != n:
                raise LengthMismatch(f"order-{order} unions do not match the base universe")
            if m.intersection_count(g):
                raise ValueError(f"order-{order} unions share common sets")

    @classmethod
    def build(
        cls,
        malware: Sequence[FunctionBitVector],
        benign: Sequence[FunctionBitVector],
        blacklist: Optional[FunctionBitVector] = None,
        *,
        universe_size: Optional[int] = None,
        registry_version: int = 0,
    ) -> "CombiBase":
        """Build both union pairs and strip the sets common to the two labels."""
        if universe_size is None:
            universe_size = next(v.universe_size for v in (*malware, *benign, blacklist) if v is not None)
        if blacklist is None:
            blacklist = FunctionBitVector(0, universe_size, registry_version)
        unions = {}
        for order in (2, 3):
            m = union_of(malware, order, universe_size)
            g = union_of(benign, order, universe_size)
            unions[order] = remove_common_sets(m, g)
        return cls(
            blacklist,
            tuple(malware),
            tuple(benign),
            *unions[2],
            *unions[3],
            universe_size=universe_size,
            registry_version=registry_version,
        )


@dataclass(frozen=True)
class NeighborEvidence:
    mode: Mode
    kept: tuple[tuple[int, Label, int], ...]  # (score, label, index within label)
    malware_votes: int
    benign_votes: int
    gap_applied: bool


@dataclass(frozen=True)
class CheckOutcome:
    name: str
    malicious: bool
    detail: object = None


@dataclass(frozen=True)
class CombiVerdict:
    label: Label
    type_count: int
    per_test: tuple[CheckOutcome, ...] = field(default_factory=tuple)

    @property
    def malicious(self) -> bool:
        return self.label is Label.MALWARE


def _check_universe(x: FunctionBitVector, base: CombiBase) -> None:
    if x.universe_size != base.universe_size:
        raise LengthMismatch(f"file vector over {x.universe_size} functions, base over {base.universe_size}")


def blacklist_test(x: FunctionBitVector, base: CombiBase) -> bool:
    _check_universe(x, base)
    return (x.bits & base.blacklist.bits) != 0


def _gap(best: int, second: int, mode: Mode, ratio: float) -> bool:
    if mode is Mode.XOR:
        return second > best and second >= ratio * best
    return best > second and best >= ratio * second


def neighbor_vote_test(
    x: FunctionBitVector, base: CombiBase, mode: Mode, config: CombiConfig = CombiConfig()
) -> tuple[Label, NeighborEvidence]:
    """Vote among the ``2p + 1`` closest base vectors under XOR or AND popcount.

    When the single closest vector disagrees with the majority and stands out
    from the runner-up by ``gap_ratio``, its label wins.
    """
    _check_universe(x, base)
    if not base.malware_vectors or not base.benign_vectors:
        raise EmptyBase("both labeled vector sets must be non-empty")
    mode = Mode(mode)
    bits = x.bits
    scored = []
    for label, vectors in ((Label.BENIGN, base.benign_vectors), (Label.MALWARE, base.malware_vectors)):
        rank = 0 if label is Label.BENIGN else 1
        for i, v in enumerate(vectors):
            if mode is Mode.XOR:
                s = (bits ^ v.bits).bit_count()
                scored.append((s, rank, i, s, label))
            else:
                s = (bits & v.bits).bit_count()
                scored.append((-s, rank, i, s, label))
    scored.sort()
    kept = scored[: config.neighbors]

    m = sum(1 for item in kept if item[4] is Label.MALWARE)
    b = len(kept) - m
    label = Label.MALWARE if m > b else Label.BENIGN
    gap = False
    if len(kept) >= 2 and kept[0][4] is not label and _gap(kept[0][3], kept[1][3], mode, config.gap_ratio):
        label, gap = kept[0][4], True
    evidence = NeighborEvidence(mode, tuple((s, lbl, i) for _, _, i, s, lbl in kept), m, b, gap)
    return label, evidence


def combination_test(x: FunctionBitVector, base: CombiBase, order: int) -> tuple[Label, int, int]:
    """Count ``x``'s function ``order``-subsets found in each label's union."""
    _check_universe(x, base)
    m_union, g_union = (base.mbs, base.gbs) if order == 2 else (base.mts, base.gts)
    if x.popcount < order:
        return Label.BENIGN, 0, 0
    comb = build_combination_vector(x, order)
    d_m = comb.intersection_count(m_union)
    d_g = comb.intersection_count(g_union)
    return (Label.MALWARE if d_m > d_g else Label.BENIGN), d_m, d_g


def detect(x: FunctionBitVector, base: CombiBase, config: CombiConfig = CombiConfig()) -> CombiVerdict:
    outcomes = [CheckOutcome("blacklist", blacklist_test(x, base))]
    for mode in (Mode.XOR, Mode.AND):
        label, evidence = neighbor_vote_test(x, base, mode, config)
        outcomes.append(CheckOutcome(mode.value, label is Label.MALWARE, evidence))
    for order, name in ((2, "binomial"), (3, "trinomial")):
        label, d_m, d_g = combination_test(x, base, order)
        outcomes.append(CheckOutcome(name, label is Label.MALWARE, (d_m, d_g)))
    votes = sum(o.malicious for o in outcomes)
    malicious = votes >= config.vote_threshold or (config.blacklist_decisive and outcomes[0].malicious)
    return CombiVerdict(Label.MALWARE if malicious else Label.BENIGN, votes, tuple(outcomes))
