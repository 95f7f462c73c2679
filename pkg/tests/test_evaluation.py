from __future__ import annotations

import math
import random

import pytest

import oracles
from protocol import EVAL_BASE, as_set, seeded_corpus
from iatforge.database import Database
from iatforge.errors import IncompatibleRegistry
from iatforge.evaluation import LabeledCorpus, MetricsReport, Sample, evaluate, sweep, sweep_table
from iatforge.features import Label, PairRegistry, TableKind, TableVector, to_bitvector, vectorize
from iatforge.knn import TrainingBase
from iatforge.pe_fixtures import FixtureImport, FixtureSpec, build_pe
from iatforge.pipeline import Mode

M, B = Label.MALWARE, Label.BENIGN

# One-time reference run of the brute-force oracles on the seed-42 corpus
# (first 100 of each label as the base, the other 100 + 100 scanned).
FROZEN_KNN_TPR = 0.99
FROZEN_KNN_FPR = 0.0
# Detection rates of the combinatorial engine with IG pruning, fractions 1.0 .. 0.1.
FROZEN_COMBI_IG_SWEEP = [1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.99, 0.96, 0.93, 0.66]
FRACTIONS = [1.0, 0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1]


@pytest.fixture(scope="module")
def seeded():
    c = seeded_corpus()
    v = c.registry.version
    db = Database(c.registry, TrainingBase(TableKind.IAT, v, c.malware[:EVAL_BASE], c.benign[:EVAL_BASE]))
    entries = [(Sample(x, name=f"m{i}"), M) for i, x in enumerate(c.malware[EVAL_BASE:])]
    entries += [(Sample(x, name=f"b{i}"), B) for i, x in enumerate(c.benign[EVAL_BASE:])]
    return c, db, LabeledCorpus(entries)


def small_db(malware, benign) -> tuple[Database, PairRegistry]:
    reg = PairRegistry()
    for pairs in (*malware, *benign):
        for dll, fn in pairs:
            reg.register(dll, fn)
    v = reg.version
    iat = TrainingBase(
        TableKind.IAT, v, [vectorize(p, reg) for p in malware], [vectorize(p, reg) for p in benign]
    )
    return Database(reg, iat), reg


def pairs(prefix: str, *nums) -> list[tuple[str, str]]:
    return [(f"{prefix}.dll", f"F{n}") for n in nums]


# -- evaluate -----------------------------------------------------------------


@pytest.mark.parametrize("engine", ["knn", "combi", "both"])
def test_identical_vectors_are_perfect(engine):
    malware = [pairs("m", 1, 2, 3), pairs("m", 2, 3, 4), pairs("m", 5, 6)]
    benign = [pairs("b", 1, 2), pairs("b", 3, 4, 5), pairs("b", 7)]
    db, reg = small_db(malware, benign)
    corpus = LabeledCorpus(
        [(Sample(vectorize(p, reg)), M) for p in malware] + [(Sample(vectorize(p, reg)), B) for p in benign]
    )
    report = evaluate(corpus, db, engine=engine)
    if engine == "knn":
        assert report.true_positive_rate == 1.0 and report.true_negative_rate == 1.0
    else:
        # the combinatorial engine has no exact-match shortcut; it must still not miss malware here
        assert report.true_positive_rate == 1.0


def test_disjoint_families_are_separated():
    rng = random.Random(4)
    malware = [pairs("evil", *rng.sample(range(40), 6)) for _ in range(30)]
    benign = [pairs("good", *rng.sample(range(40), 6)) for _ in range(30)]
    db, reg = small_db(malware[:15], benign[:15])
    corpus = LabeledCorpus(
        [(Sample(vectorize(p, reg)), M) for p in malware[15:]] + [(Sample(vectorize(p, reg)), B) for p in benign[15:]]
    )
    report = evaluate(corpus, db, engine="knn")
    assert report.true_positive_rate == 1.0 and report.false_positive_rate == 0.0


def test_seeded_knn_rate_matches_frozen_reference(seeded):
    _, db, corpus = seeded
    report = evaluate(corpus, db, engine="knn")
    assert abs(report.true_positive_rate - FROZEN_KNN_TPR) <= 0.02
    assert abs(report.false_positive_rate - FROZEN_KNN_FPR) <= 0.02
    assert report.errors == 0


def test_seeded_knn_counts_match_oracle(seeded):
    c, db, corpus = seeded
    malware = [as_set(v) for v in c.malware[:EVAL_BASE]]
    benign = [as_set(v) for v in c.benign[:EVAL_BASE]]
    expected = {(t, lbl): 0 for t in Label for lbl in Label}
    for sample, truth in corpus.entries:
        expected[(truth, oracles.classify(as_set(sample.iat), malware, benign))] += 1
    report = evaluate(corpus, db, engine="knn")
    assert report.true_positives == expected[(M, M)]
    assert report.false_negatives == expected[(M, B)]
    assert report.false_positives == expected[(B, M)]
    assert report.true_negatives == expected[(B, B)]


def test_confusion_rows_and_rates(seeded):
    _, db, corpus = seeded
    report = evaluate(corpus, db, engine="both")
    assert report.malware_count == 100 and report.benign_count == 100
    payload = report.payload()
    conf = payload["confusion"]
    tp, fn = conf["malware"]["detected_as_malware"], conf["malware"]["detected_as_benign"]
    fp, tn = conf["benign"]["detected_as_malware"], conf["benign"]["detected_as_benign"]
    assert payload["true_positive_rate"] == tp / (tp + fn)
    assert payload["false_negative_rate"] == fn / (tp + fn)
    assert payload["false_positive_rate"] == fp / (fp + tn)
    assert payload["true_negative_rate"] == tn / (fp + tn)
    for key in ("true_positive_rate", "false_positive_rate", "true_negative_rate", "false_negative_rate"):
        assert 0.0 <= payload[key] <= 1.0


def test_shuffle_leaves_metrics_unchanged(seeded):
    _, db, corpus = seeded
    entries = list(corpus.entries)
    random.Random(8).shuffle(entries)
    a = evaluate(corpus, db, engine="both").payload()
    b = evaluate(LabeledCorpus(entries), db, engine="both").payload()
    assert a == b


def test_empty_corpus_rates_are_zero():
    report = MetricsReport(0, 0, 0, 0)
    assert report.true_positive_rate == 0.0 and report.false_positive_rate == 0.0
    assert report.to_dict()["schema"] == 1


def test_text_report_has_confusion_table():
    text = MetricsReport(95, 5, 2, 98).to_text()
    assert "Detected as malware" in text and "95.000%" in text and "2.000%" in text


def test_incompatible_registry_rejected(seeded):
    _, db, _ = seeded
    stale = TableVector.from_ids([0, 1], TableKind.IAT, registry_version=db.registry.version - 1)
    with pytest.raises(IncompatibleRegistry):
        evaluate(LabeledCorpus([(Sample(stale), M)]), db, engine="knn")


# -- truth files --------------------------------------------------------------


def test_truth_csv_and_file_scanning(tmp_path):
    spec = FixtureSpec(imports=[FixtureImport("evil.dll", [("Steal", 0), ("Hide", 1)])])
    good = FixtureSpec(imports=[FixtureImport("kernel32.dll", [("ExitProcess", 0)])])
    (tmp_path / "bad.exe").write_bytes(build_pe(spec))
    (tmp_path / "good.exe").write_bytes(build_pe(good))
    (tmp_path / "truth.csv").write_text("path,label\nbad.exe,malware\ngood.exe,benign\nmissing.exe,benign\n")
    db, _ = small_db([[("evil.dll", "Steal"), ("evil.dll", "Hide")]], [[("kernel32.dll", "ExitProcess")]])
    corpus = LabeledCorpus.from_truth_csv(tmp_path / "truth.csv")
    assert [lbl for _, lbl in corpus.entries] == [M, B, B]
    report = evaluate(corpus, db, engine="knn")
    assert (report.true_positives, report.true_negatives, report.errors) == (1, 1, 1)


@pytest.mark.parametrize("text", ["file,label\nx,malware\n", "path,label\nx,trojan\n"])
def test_truth_csv_rejects(tmp_path, text):
    (tmp_path / "t.csv").write_text(text)
    with pytest.raises(ValueError):
        LabeledCorpus.from_truth_csv(tmp_path / "t.csv")


# -- sweep --------------------------------------------------------------------


def test_sweep_full_fraction_equals_evaluate(seeded):
    _, db, corpus = seeded
    rows = sweep(corpus, db, [1.0], engine="both")
    assert rows[0].report.payload() == evaluate(corpus, db, engine="both").payload()
    assert rows[0].base_bytes == db.byte_size()


def test_sweep_row_order_and_sizes(seeded):
    _, db, corpus = seeded
    rows = sweep(corpus, db, [0.5, 1.0, 0.8], engine="knn")
    assert [r.fraction for r in rows] == [1.0, 0.8, 0.5]
    assert rows[2].base_bytes == db.pruned(0.5).byte_size()
    assert rows[0].base_bytes > rows[1].base_bytes > rows[2].base_bytes
    assert "% of original base" in sweep_table(rows)


def test_sweep_rejects_bad_fraction(seeded):
    _, db, corpus = seeded
    with pytest.raises(ValueError):
        sweep(corpus, db, [0.0])
    with pytest.raises(ValueError):
        sweep(corpus, db, [1.5])


@pytest.mark.slow
def test_sweep_is_monotone_for_seeded_corpus(seeded):
    _, db, corpus = seeded
    rows = sweep(corpus, db, FRACTIONS, score="ig", engine="combi")
    rates = [r.detection_rate for r in rows]
    assert all(a >= b for a, b in zip(rates, rates[1:]))
    for got, want in zip(rates, FROZEN_COMBI_IG_SWEEP):
        assert abs(got - want) <= 0.02


@pytest.mark.slow
@pytest.mark.parametrize("fraction", [0.5, 0.1])
def test_sweep_row_matches_oracle(seeded, fraction):
    c, db, corpus = seeded
    reg = c.registry
    base = [(as_set(v), M) for v in c.malware[:EVAL_BASE]] + [(as_set(v), B) for v in c.benign[:EVAL_BASE]]
    attrs = sorted(set().union(*(s for s, _ in base)))
    labels = [lbl for _, lbl in base]
    gains = {a: oracles.information_gain([int(a in s) for s, _ in base], labels) for a in attrs}
    kept = []
    for label in (M, B):
        side = [(i, s) for i, (s, lbl) in enumerate(base) if lbl is label]
        quota = min(len(side), math.ceil(round(fraction * len(side), 9)))
        ranked = sorted(side, key=lambda t: (-oracles.mean_gain(t[1], gains), t[0]))[:quota]
        kept.append([s for _, s in sorted(ranked)])

    def bits(s: set) -> int:
        return to_bitvector(TableVector.from_ids(sorted(s), TableKind.IAT, reg.version), reg).bits

    malware, benign = [bits(s) for s in kept[0]], [bits(s) for s in kept[1]]
    detected = sum(oracles.detect(bits(as_set(s.iat)), malware, benign)[0] is M for s, t in corpus.entries if t is M)
    row = sweep(corpus, db, [fraction], score="ig", engine=Mode.COMBI)[0]
    assert row.report.true_positives == detected
