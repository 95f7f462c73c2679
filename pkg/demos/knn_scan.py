"""Nearest-neighbour scanning on the seeded synthetic corpus.

The base holds the first 100 files of each label; a few of the remaining files
are classified and their neighbour lists printed.

    python demos/knn_scan.py
"""

from __future__ import annotations

from iatforge.features import Label, PairRegistry, TableKind
from iatforge.knn import KnnConfig, TrainingBase, classify, similarity
from iatforge.synthetic import make_corpus, register_all, vectors_of

files = make_corpus(42)
reg = register_all(files, PairRegistry())
vectors = vectors_of(files, reg)
malware = [v for v, f in zip(vectors, files) if f.label is Label.MALWARE]
benign = [v for v, f in zip(vectors, files) if f.label is Label.BENIGN]
base = TrainingBase(TableKind.IAT, reg.version, malware[:100], benign[:100])
print(base)

a, b = malware[0], benign[0]
print(f"distance between first malware and first benign file: {similarity(a, b):.3f}")
print(f"distance between the first two malware files: {similarity(malware[0], malware[1]):.3f}")
print()

config = KnnConfig(k=9, similarity_threshold=0.5)
for truth, vec in [("malware", malware[100]), ("malware", malware[150]), ("benign", benign[120]), ("stored", malware[3])]:
    verdict = classify(vec, base, config)
    near = ", ".join(f"{n.distance:.2f}{n.label.value[0]}" for n in verdict.neighbors[:5])
    print(f"{truth:>7} file -> {verdict.label.value:<7} stage={verdict.stage:<8} nearest: {near}")
print("(the last row scans a stored malware vector: the exact-match stage answers directly)")

hits = sum(classify(v, base).malicious for v in malware[100:])
false_alarms = sum(classify(v, base).malicious for v in benign[100:])
print()
print(f"held-out malware detected: {hits}/100, benign flagged: {false_alarms}/100")
