"""Seeded synthetic corpora of (dll, function) pair lists.

A family owns a pool of pairs split into clusters.  Each synthetic file picks
one cluster of its family and draws most of its pairs from it, the rest from
the family's whole pool.  Two families share ``overlap * pool_size`` pairs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .features import Label, PairRegistry, TableKind, TableVector, vectorize

PairKey = tuple[str, str]


@dataclass(frozen=True)
class SyntheticFile:
    pairs: tuple[PairKey, ...]
    label: Label
    family: str
    cluster: int


@dataclass(frozen=True)
class Family:
    name: str
    label: Label
    pool: tuple[PairKey, ...]
    clusters: int = 4


def _pair_name(i: int, dlls: int) -> PairKey:
    return (f"lib{i % dlls:03d}.dll", f"Fn{i:05d}")


def two_families(pool_size: int = 120, overlap: float = 0.2, *, dlls: int = 16, clusters: int = 4) -> tuple[Family, Family]:
    """A malware and a benign family whose pools share ``overlap`` of their pairs.

    The shared pairs sit at the end of the malware pool and at the start of the
    benign pool, so they spread over the last/first clusters respectively.
    """
    if not 0 <= overlap <= 1:
        raise ValueError("overlap must lie in [0, 1]")
    shared = round(overlap * pool_size)
    malware = [_pair_name(i, dlls) for i in range(pool_size)]
    benign = malware[pool_size - shared :] + [_pair_name(pool_size + i, dlls) for i in range(pool_size - shared)]
    return (
        Family("malware-family", Label.MALWARE, tuple(malware), clusters),
        Family("benign-family", Label.BENIGN, tuple(benign), clusters),
    )


def sample_files(
    family: Family,
    count: int,
    rng: np.random.Generator,
    *,
    size_range: tuple[int, int] = (12, 24),
    cluster_share: float = 0.75,
) -> list[SyntheticFile]:
    pool = family.pool
    bounds = np.linspace(0, len(pool), family.clusters + 1).astype(int)
    files = []
    for _ in range(count):
        cluster = int(rng.integers(family.clusters))
        lo, hi = bounds[cluster], bounds[cluster + 1]
        size = int(rng.integers(size_range[0], size_range[1] + 1))
        n_local = min(hi - lo, round(size * cluster_share))
        local = rng.choice(np.arange(lo, hi), size=n_local, replace=False)
        rest = np.setdiff1d(np.arange(len(pool)), local)
        extra = rng.choice(rest, size=min(rest.size, size - n_local), replace=False)
        chosen = sorted(set(local.tolist()) | set(extra.tolist()))
        files.append(SyntheticFile(tuple(pool[i] for i in chosen), family.label, family.name, cluster))
    return files


def make_corpus(
    seed: int = 42,
    *,
    n_malware: int = 200,
    n_benign: int = 200,
    pool_size: int = 120,
    overlap: float = 0.2,
    size_range: tuple[int, int] = (12, 24),
    clusters: int = 4,
) -> list[SyntheticFile]:
    """Two-family corpus; malware files first, then benign, all seeded."""
    rng = np.random.default_rng(seed)
    malware, benign = two_families(pool_size, overlap, clusters=clusters)
    return sample_files(malware, n_malware, rng, size_range=size_range) + sample_files(
        benign, n_benign, rng, size_range=size_range
    )


def register_all(files: Sequence[SyntheticFile], registry: PairRegistry) -> PairRegistry:
    for f in files:
        for dll, key in f.pairs:
            registry.register(dll, key)
    return registry


def vectors_of(files: Sequence[SyntheticFile], registry: PairRegistry, kind: TableKind = TableKind.IAT) -> list[TableVector]:
    return [vectorize(f.pairs, registry, kind) for f in files]


def random_table_vectors(
    count: int, size: int, universe: int, rng: np.random.Generator, *, registry_version: int = 0
) -> list[TableVector]:
    """Uniformly random id sets, for scale tests that need no registry."""
    out = []
    for _ in range(count):
        ids = rng.choice(universe, size=size, replace=False).astype(np.uint64)
        out.append(TableVector(TableKind.IAT, np.sort(ids), registry_version))
    return out
