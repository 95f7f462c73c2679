from __future__ import annotations

import random
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from iatforge.errors import BothEmpty, EmptyBase, EmptyVector
from iatforge.features import Label, TableKind, TableVector
from iatforge.knn import (
    EatPolicy,
    KnnConfig,
    TrainConfig,
    TrainingBase,
    classify,
    classify_tables,
    k_nearest,
    similarity,
    train_iterative,
)

M, B = Label.MALWARE, Label.BENIGN


def tv(*ids, kind=TableKind.IAT) -> TableVector:
    return TableVector.from_ids(ids, kind)


def base_of(malware=(), benign=(), kind=TableKind.IAT) -> TrainingBase:
    return TrainingBase(kind, 0, [tv(*s, kind=kind) for s in malware], [tv(*s, kind=kind) for s in benign])


def random_set(rng: random.Random, universe: int, lo: int = 1, hi: int = 8) -> set:
    return set(rng.sample(range(universe), rng.randint(lo, min(hi, universe))))


# -- similarity ---------------------------------------------------------------


def test_similarity_examples():
    assert similarity(tv(5), tv(5)) == 0.0
    assert similarity(tv(1, 2), tv(3, 4)) == 1.0
    assert similarity(tv(1, 2, 3), tv(2, 3, 4)) == pytest.approx(1 / 3, abs=1e-15)


def test_similarity_errors():
    with pytest.raises(BothEmpty):
        similarity(tv(), tv())
    with pytest.raises(ValueError):
        similarity(tv(1), tv(1, kind=TableKind.EAT))


def test_similarity_one_empty_side_is_one():
    assert similarity(tv(), tv(1, 2)) == 1.0


ids = st.sets(st.integers(0, 40), max_size=12)


@settings(max_examples=300)
@given(ids, ids)
def test_similarity_axioms(a, b):
    if not a and not b:
        return
    va, vb = tv(*a), tv(*b)
    f = similarity(va, vb)
    assert f == float(oracles.similarity(a, b))
    assert f == similarity(vb, va)
    assert 0.0 <= f <= 1.0
    assert (f == 0.0) == (a == b)


def test_triangle_inequality_does_not_hold_in_general():
    a, b, c = tv(1), tv(1, 2), tv(2)
    assert similarity(a, c) == 1.0
    assert similarity(a, b) + similarity(b, c) == pytest.approx(2 / 3)


def test_triangle_violations_are_monitored():
    # the measure only promises separation, symmetry and range; record how
    # often the triangle inequality fails on random triples
    rng = random.Random(12)
    violations = 0
    trials = 2000
    for _ in range(trials):
        a, b, c = (tv(*random_set(rng, 30, 1, 10)) for _ in range(3))
        if similarity(a, c) > similarity(a, b) + similarity(b, c) + 1e-12:
            violations += 1
    print(f"triangle violations: {violations}/{trials}")
    assert violations < trials


def test_bulk_distances_match_merge():
    rng = random.Random(4)
    base = base_of([random_set(rng, 60) for _ in range(30)], [random_set(rng, 60) for _ in range(30)])
    x = tv(*random_set(rng, 60))
    dist, is_malware, local = base.distances(x)
    for d, mal, i in zip(dist, is_malware, local):
        other = (base.malware if mal else base.benign)[i]
        assert d == similarity(x, other)


# -- k_nearest ----------------------------------------------------------------


def test_k_larger_than_base_returns_all():
    base = base_of([{1}, {2}], [{3}])
    assert len(k_nearest(tv(1), base, 9)) == 3


def test_exact_vector_is_nearest():
    base = base_of([{1, 2}, {7}], [{3}])
    (n,) = k_nearest(tv(7), base, 1)
    assert (n.distance, n.label, n.base_index) == (0.0, M, 1)


def test_ties_put_benign_first_then_index():
    base = base_of([{1}, {2}], [{3}, {4}])
    got = [(n.label, n.base_index) for n in k_nearest(tv(9), base, 4)]
    assert got == [(B, 0), (B, 1), (M, 0), (M, 1)]


def test_k_nearest_empty_base():
    with pytest.raises(EmptyBase):
        k_nearest(tv(1), base_of(), 3)


# -- classify -----------------------------------------------------------------


def test_exact_benign_match():
    base = base_of([{1, 2, 3}], [{4, 5}])
    v = classify(tv(4, 5), base)
    assert v.label is B and v.stage == "exact"


def test_exact_malware_match_is_malicious():
    base = base_of([{1, 2, 3}], [{4, 5}])
    v = classify(tv(1, 2, 3), base)
    assert v.label is M and v.stage == "exact"


def test_filtered_majority():
    # three neighbours under the threshold, two malicious and nearer
    x = set(range(10))
    m1 = set(range(8))  # 2/18
    m2 = set(range(7)) | {20}  # 4/18
    b1 = set(range(6)) | {30, 31}  # 6/18
    base = base_of([m1, m2], [b1])
    v = classify(tv(*x), base, KnnConfig(k=3))
    assert [n.label for n in v.neighbors] == [M, M, B]
    assert v.label is M and v.stage == "filtered"


def test_fallback_vote_when_nothing_close():
    base = base_of([{1, 50}, {2, 51}], [{3, 52}])
    v = classify(tv(1, 2, 3, 4, 5, 6), base, KnnConfig(k=3, similarity_threshold=0.5))
    assert v.stage == "fallback" and v.label is M


def test_even_fallback_tie_is_benign():
    base = base_of([{1, 50}], [{2, 51}])
    v = classify(tv(1, 2, 3, 4, 5, 6), base, KnnConfig(k=3))
    assert v.stage == "fallback" and v.label is B


def test_classify_errors():
    with pytest.raises(EmptyBase):
        classify(tv(1), base_of())
    with pytest.raises(EmptyVector):
        classify(tv(), base_of([{1}]))


def test_config_validation():
    with pytest.raises(ValueError):
        KnnConfig(k=4)
    with pytest.raises(ValueError):
        KnnConfig(similarity_threshold=0)


def test_base_rejects_vector_under_both_labels():
    with pytest.raises(ValueError):
        base_of([{1, 2}], [{1, 2}])


def test_classify_matches_oracle():
    rng = random.Random(2024)
    for _ in range(250):
        universe = rng.randint(4, 40)
        malware = [random_set(rng, universe) for _ in range(rng.randint(0, 25))]
        benign = [s for s in (random_set(rng, universe) for _ in range(rng.randint(0, 25))) if s not in malware]
        if not malware and not benign:
            continue
        x = random_set(rng, universe)
        k = rng.choice([1, 3, 5, 9])
        threshold = rng.choice([0.25, 0.5, 0.75, 1.0])
        got = classify(tv(*x), base_of(malware, benign), KnnConfig(k=k, similarity_threshold=threshold))
        assert got.label is oracles.classify(x, malware, benign, k, threshold)


def test_classify_invariant_under_storage_order():
    rng = random.Random(8)
    malware = [random_set(rng, 30) for _ in range(15)]
    benign = [s for s in (random_set(rng, 30) for _ in range(15)) if s not in malware]
    queries = [random_set(rng, 30) for _ in range(40)]
    base = base_of(malware, benign)
    shuffled = base_of(rng.sample(malware, len(malware)), rng.sample(benign, len(benign)))
    for q in queries:
        assert classify(tv(*q), base).label is classify(tv(*q), shuffled).label


def test_neighbor_distances_are_exact_fractions():
    rng = random.Random(1)
    malware = [random_set(rng, 20) for _ in range(10)]
    x = random_set(rng, 20)
    for n in k_nearest(tv(*x), base_of(malware), 10):
        exact = oracles.similarity(x, malware[n.base_index])
        assert Fraction(n.distance).limit_denominator(1000) == exact


# -- IAT + EAT ----------------------------------------------------------------


def test_eat_policies():
    iat_base = base_of([{1, 2, 3}], [{10, 11, 12}])
    eat_base = base_of([{100, 101}], [{200, 201}], kind=TableKind.EAT)
    iat, eat = tv(10, 11, 12), tv(100, 101, kind=TableKind.EAT)
    assert classify_tables(iat, eat, iat_base, eat_base, KnnConfig(eat_policy=EatPolicy.OR)).label is M
    assert classify_tables(iat, eat, iat_base, eat_base, KnnConfig(eat_policy=EatPolicy.AND)).label is B
    ignored = classify_tables(iat, eat, iat_base, eat_base, KnnConfig(eat_policy=EatPolicy.IGNORE))
    assert ignored.label is B and ignored.eat is None


def test_eat_skipped_without_eat_side():
    iat_base = base_of([{1, 2, 3}], [{10, 11, 12}])
    verdict = classify_tables(tv(10, 11, 12), None, iat_base, None)
    assert verdict.eat is None and verdict.label is B


# -- training -----------------------------------------------------------------


def test_training_no_change_when_all_detected():
    seed = base_of([{1, 2, 3}, {1, 2, 4}], [{50, 51, 52}])
    samples = [tv(1, 2, 3), tv(1, 2, 4)]
    run = train_iterative(seed, samples, TrainConfig(epsilon=0.0))
    assert run.base == seed
    assert len(run.rounds) == 1 and run.absorbed == []


def test_training_absorbs_disjoint_family_with_zero_epsilon():
    seed = base_of([{1, 2, 3}], [{50, 51, 52}])
    family = [tv(100 + i, 200 + i, 300) for i in range(6)]
    run = train_iterative(seed, family, TrainConfig(epsilon=0.0))
    assert set(run.base.malware) >= set(family)
    for vec in family:
        assert classify(vec, run.base).malicious


def test_training_two_rounds():
    exemplar = {10, 11, 12, 13, 14, 15}
    near = [{1, 2, 3, 4, 5, 90 + i} for i in range(3)]
    seed = base_of([{1, 2, 3, 4, 5}], [{50, 51, 52, 53}])
    samples = [tv(*exemplar)] + [tv(*s) for s in near]
    run = train_iterative(seed, samples, TrainConfig(epsilon=0.1))
    assert run.undetected_per_round == [1, 0]
    assert run.absorbed == [0]
    assert run.base.malware == seed.malware + (samples[0],)


def test_training_rejects_benign_copies_and_dedupes():
    seed = base_of([{1, 2, 3}], [{50, 51, 52}])
    samples = [tv(50, 51, 52), tv(7, 8, 9), tv(7, 8, 9)]
    run = train_iterative(seed, samples, TrainConfig(epsilon=0.0))
    assert run.rejected == [0]
    assert run.absorbed == [1]
    assert len(run.base.malware) == 2


def test_training_epsilon_validation():
    with pytest.raises(ValueError):
        TrainConfig(epsilon=1.5)
    with pytest.raises(ValueError):
        TrainConfig(max_rounds=0)


def test_training_matches_oracle_and_never_increases():
    rng = random.Random(77)
    for trial in range(40):
        universe = rng.randint(10, 40)
        seed_m = [random_set(rng, universe) for _ in range(rng.randint(1, 5))]
        benign = [s for s in (random_set(rng, universe) for _ in range(rng.randint(1, 10))) if s not in seed_m]
        samples = [random_set(rng, universe) for _ in range(rng.randint(1, 25))]
        eps = rng.choice([0.0, 0.05, 0.2])
        seed = base_of(seed_m, benign)
        run = train_iterative(seed, [tv(*s) for s in samples], TrainConfig(epsilon=eps, max_rounds=6))
        grown, history = oracles.train(seed_m, benign, samples, eps, max_rounds=6)
        assert run.undetected_per_round == history, trial
        assert [set(v.ids.tolist()) for v in run.base.malware] == grown
        assert all(a >= b for a, b in zip(history, history[1:]))
        assert len(run.rounds) <= 6


def test_training_with_custom_detector():
    seed = base_of([{1}], [{2}])
    calls = []

    def never(vec, base):
        calls.append(len(base.malware))
        return False

    run = train_iterative(seed, [tv(5), tv(6)], TrainConfig(epsilon=0.0), detector=never)
    assert run.absorbed == [0, 1]
    assert calls == [1, 1]


def test_large_base_scan_is_vectorised():
    rng = np.random.default_rng(0)
    vectors = [TableVector(TableKind.IAT, np.sort(rng.choice(10_000, 50, replace=False)).astype(np.uint64), 0) for _ in range(2000)]
    base = TrainingBase(TableKind.IAT, 0, vectors[:1000], vectors[1000:])
    x = vectors[5]
    assert classify(x, base).label is M
