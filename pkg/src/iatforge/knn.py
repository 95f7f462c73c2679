"""Set-dissimilarity k-NN over sorted IAT/EAT pair-id vectors.

The distance between two vectors is the fraction of ids (counted over both
vectors) that the other vector lacks::

    f(a, b) = (|a \\ b| + |b \\ a|) / (|a| + |b|)

It is 0 for equal sets and 1 for disjoint ones.  Classification first looks
for an exact match, then votes among the k nearest neighbours closer than a
similarity threshold, then falls back to a vote over all k.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import BothEmpty, EmptyBase, EmptyVector
from .features import Label, TableKind, TableVector


class EatPolicy(str, enum.Enum):
    IGNORE = "ignore"
    OR = "or"
    AND = "and"


@dataclass(frozen=True)
class KnnConfig:
    k: int = 9
    similarity_threshold: float = 0.5
    eat_policy: EatPolicy = EatPolicy.OR

    def __post_init__(self) -> None:
        if self.k < 1 or self.k % 2 == 0:
            raise ValueError("k must be a positive odd integer")
        if not 0 < self.similarity_threshold <= 1:
            raise ValueError("similarity_threshold must lie in (0, 1]")
        object.__setattr__(self, "eat_policy", EatPolicy(self.eat_policy))


@dataclass(frozen=True)
class Neighbor:
    distance: float
    label: Label
    base_index: int

    def sort_key(self) -> tuple[float, int, int]:
        # benign sorts before malicious at equal distance
        return (self.distance, 0 if self.label is Label.BENIGN else 1, self.base_index)


@dataclass(frozen=True)
class Verdict:
    label: Label
    neighbors: tuple[Neighbor, ...]
    stage: str  # "exact", "filtered" or "fallback"

    @property
    def malicious(self) -> bool:
        return self.label is Label.MALWARE


def similarity(a: TableVector, b: TableVector) -> float:
    """Dissimilarity of two table vectors, by a merge over their sorted ids."""
    if a.kind != b.kind:
        raise ValueError(f"cannot compare {a.kind.name} with {b.kind.name}")
    xs, ys = a.ids.tolist(), b.ids.tolist()
    total = len(xs) + len(ys)
    if total == 0:
        raise BothEmpty("similarity of two empty vectors is undefined")
    i = j = common = 0
    while i < len(xs) and j < len(ys):
        if xs[i] == ys[j]:
            common += 1
            i += 1
            j += 1
        elif xs[i] < ys[j]:
            i += 1
        else:
            j += 1
    return (total - 2 * common) / total


class TrainingBase:
    """Labeled table vectors of one kind, with a flattened index for scans."""

    def __init__(
        self,
        kind: TableKind = TableKind.IAT,
        registry_version: int = 0,
        malware: Sequence[TableVector] = (),
        benign: Sequence[TableVector] = (),
    ) -> None:
        self.kind = TableKind(kind)
        self.registry_version = registry_version
        self.malware = tuple(malware)
        self.benign = tuple(benign)
        for vec in self.malware + self.benign:
            if vec.kind != self.kind:
                raise ValueError(f"{vec.kind.name} vector in {self.kind.name} base")
            if vec.registry_version != registry_version:
                raise ValueError("vector registry version differs from base")
        clash = {v.key() for v in self.malware} & {v.key() for v in self.benign}
        if clash:
            raise ValueError(f"{len(clash)} vector(s) present under both labels")
        self._index: Optional[_FlatIndex] = None

    def __len__(self) -> int:
        return len(self.malware) + len(self.benign)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TrainingBase):
            return NotImplemented
        return (
            self.kind == other.kind
            and self.registry_version == other.registry_version
            and self.malware == other.malware
            and self.benign == other.benign
        )

    def __repr__(self) -> str:
        return (
            f"TrainingBase({self.kind.name}, malware={len(self.malware)}, "
            f"benign={len(self.benign)}, v{self.registry_version})"
        )

    def labeled(self) -> list[tuple[TableVector, Label]]:
        return [(v, Label.MALWARE) for v in self.malware] + [(v, Label.BENIGN) for v in self.benign]

    def with_malware(self, extra: Sequence[TableVector]) -> "TrainingBase":
        return TrainingBase(self.kind, self.registry_version, self.malware + tuple(extra), self.benign)

    def retagged(self, registry_version: int) -> "TrainingBase":
        return TrainingBase(
            self.kind,
            registry_version,
            [v.retagged(registry_version) for v in self.malware],
            [v.retagged(registry_version) for v in self.benign],
        )

    @classmethod
    def from_labeled(
        cls, items: Sequence[tuple[TableVector, Label]], kind: TableKind, registry_version: int
    ) -> "TrainingBase":
        malware = [v for v, lbl in items if Label(lbl) is Label.MALWARE]
        benign = [v for v, lbl in items if Label(lbl) is Label.BENIGN]
        return cls(kind, registry_version, malware, benign)

    def distances(self, x: TableVector) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Distances from ``x`` to every base vector.

        Returns ``(distance, is_malware, index_within_label)`` arrays in the
        order benign vectors first, then malware.
        """
        if self._index is None:
            self._index = _FlatIndex(self.benign, self.malware)
        return self._index.distances(x)


class _FlatIndex:
    def __init__(self, benign: Sequence[TableVector], malware: Sequence[TableVector]) -> None:
        vectors = list(benign) + list(malware)
        self.lengths = np.array([len(v) for v in vectors], dtype=np.int64)
        self.owner = np.repeat(np.arange(len(vectors)), self.lengths)
        self.ids = np.concatenate([v.ids for v in vectors]) if vectors else np.zeros(0, np.uint64)
        self.is_malware = np.array([False] * len(benign) + [True] * len(malware))
        self.local_index = np.concatenate([np.arange(len(benign)), np.arange(len(malware))]).astype(np.int64)

    def distances(self, x: TableVector) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        hits = np.isin(self.ids, x.ids, assume_unique=False)
        common = np.bincount(self.owner[hits], minlength=self.lengths.size)
        total = self.lengths + len(x)
        with np.errstate(invalid="ignore", divide="ignore"):
            dist = (total - 2 * common) / total
        return dist, self.is_malware, self.local_index


def _neighbors_from(dist: np.ndarray, is_malware: np.ndarray, local: np.ndarray, k: int) -> list[Neighbor]:
    order = np.lexsort((local, is_malware, dist))[:k]
    return [
        Neighbor(float(dist[i]), Label.MALWARE if is_malware[i] else Label.BENIGN, int(local[i]))
        for i in order
    ]


def k_nearest(x: TableVector, base: TrainingBase, k: int) -> list[Neighbor]:
    """The ``min(k, len(base))`` nearest base vectors.

    Order is (distance, benign before malicious, index within label).
    """
    if len(base) == 0:
        raise EmptyBase("training base is empty")
    if x.kind != base.kind:
        raise ValueError(f"cannot compare {x.kind.name} vector with {base.kind.name} base")
    if len(x) == 0 and any(len(v) == 0 for v in base.malware + base.benign):
        raise BothEmpty("empty query against an empty base vector")
    return _neighbors_from(*base.distances(x), k)


def _majority(neighbors: Sequence[Neighbor]) -> Optional[Label]:
    m = sum(n.label is Label.MALWARE for n in neighbors)
    b = len(neighbors) - m
    if m == b:
        return None
    return Label.MALWARE if m > b else Label.BENIGN


def classify(x: TableVector, base: TrainingBase, config: KnnConfig = KnnConfig()) -> Verdict:
    if len(base) == 0:
        raise EmptyBase("training base is empty")
    if len(x) == 0:
        raise EmptyVector("cannot classify an empty vector")
    if x.kind != base.kind:
        raise ValueError(f"cannot compare {x.kind.name} vector with {base.kind.name} base")

    dist, is_malware, local = base.distances(x)
    exact = dist == 0
    for malware_side in (False, True):
        hit = np.flatnonzero(exact & (is_malware == malware_side))
        if hit.size:
            i = hit[0]
            label = Label.MALWARE if malware_side else Label.BENIGN
            return Verdict(label, (Neighbor(0.0, label, int(local[i])),), "exact")

    neighbors = tuple(_neighbors_from(dist, is_malware, local, config.k))
    close = [n for n in neighbors if n.distance < config.similarity_threshold]
    label = _majority(close)
    if label is not None:
        return Verdict(label, neighbors, "filtered")
    # an even-sized tie (base smaller than k) falls back to benign
    return Verdict(_majority(neighbors) or Label.BENIGN, neighbors, "fallback")


@dataclass(frozen=True)
class TableVerdict:
    """Combined IAT/EAT decision for one file."""

    label: Label
    iat: Optional[Verdict]
    eat: Optional[Verdict]


def classify_tables(
    iat: TableVector,
    eat: Optional[TableVector],
    iat_base: TrainingBase,
    eat_base: Optional[TrainingBase],
    config: KnnConfig = KnnConfig(),
) -> TableVerdict:
    """Run the IAT test and, when both sides exist, the EAT test; combine per policy."""
    iat_verdict = classify(iat, iat_base, config)
    eat_verdict = None
    if (
        config.eat_policy is not EatPolicy.IGNORE
        and eat is not None
        and len(eat)
        and eat_base is not None
        and len(eat_base)
    ):
        eat_verdict = classify(eat, eat_base, config)
    if eat_verdict is None:
        return TableVerdict(iat_verdict.label, iat_verdict, None)
    if config.eat_policy is EatPolicy.OR:
        malicious = iat_verdict.malicious or eat_verdict.malicious
    else:
        malicious = iat_verdict.malicious and eat_verdict.malicious
    return TableVerdict(Label.MALWARE if malicious else Label.BENIGN, iat_verdict, eat_verdict)


# ---------------------------------------------------------------------------
# Iterative database construction
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    epsilon: float = 0.05
    max_rounds: int = 10
    knn: KnnConfig = field(default_factory=KnnConfig)

    def __post_init__(self) -> None:
        if not 0 <= self.epsilon <= 1:
            raise ValueError("epsilon must lie in [0, 1]")
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be positive")


@dataclass(frozen=True)
class RoundStats:
    round: int
    classified: int
    detected: int
    undetected: int


@dataclass
class TrainingRun:
    base: TrainingBase
    rounds: list[RoundStats]
    absorbed: list[int]  # sample indices appended to the malware side, in order
    rejected: list[int] = field(default_factory=list)  # undetected but identical to a benign vector

    @property
    def undetected_per_round(self) -> list[int]:
        return [r.undetected for r in self.rounds]


def train_iterative(
    seed: TrainingBase,
    samples: Sequence[TableVector],
    config: TrainConfig = TrainConfig(),
    detector: Optional[Callable[[TableVector, TrainingBase], bool]] = None,
) -> TrainingRun:
    """Grow ``seed``'s malware side with the samples it fails to detect.

    Each round classifies every sample not yet absorbed against the base as it
    stood at the start of the round, then appends the undetected ones.  The
    loop stops once a round's undetected fraction (of all samples) is at most
    ``epsilon``, when nothing was undetected, or after ``max_rounds``.
    """
    if detector is None:
        def detector(vec: TableVector, base: TrainingBase) -> bool:
            return classify(vec, base, config.knn).malicious

    n = len(samples)
    base = seed
    benign_keys = {v.key() for v in seed.benign}
    absorbed: list[int] = []
    rejected: list[int] = []
    pending = [i for i, v in enumerate(samples) if len(v)]
    rounds: list[RoundStats] = []
    for round_no in range(1, config.max_rounds + 1):
        if len(base) == 0:
            undetected = list(pending)
        else:
            undetected = [i for i in pending if not detector(samples[i], base)]
        rounds.append(RoundStats(round_no, len(pending), len(pending) - len(undetected), len(undetected)))

        fresh, seen = [], {v.key() for v in base.malware}
        for i in undetected:
            key = samples[i].key()
            if key in benign_keys:
                rejected.append(i)
            elif key not in seen:
                seen.add(key)
                fresh.append(i)
        if fresh:
            base = base.with_malware([samples[i] for i in fresh])
            absorbed.extend(fresh)
        done = set(undetected)
        pending = [i for i in pending if i not in done]
        if not undetected or len(undetected) <= config.epsilon * n:
            break
    return TrainingRun(base, rounds, absorbed, rejected)
