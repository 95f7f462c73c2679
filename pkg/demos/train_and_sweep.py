"""Grow a small malware base by iterative training, then sweep pruned bases.

    python demos/train_and_sweep.py
"""

from __future__ import annotations

from iatforge.database import Database
from iatforge.evaluation import LabeledCorpus, Sample, sweep, sweep_table
from iatforge.features import Label, PairRegistry, TableKind
from iatforge.knn import TrainConfig, TrainingBase, classify, train_iterative
from iatforge.synthetic import make_corpus, register_all, vectors_of

files = make_corpus(42)
reg = register_all(files, PairRegistry())
vectors = vectors_of(files, reg)
malware = [v for v, f in zip(vectors, files) if f.label is Label.MALWARE]
benign = [v for v, f in zip(vectors, files) if f.label is Label.BENIGN]

seed = TrainingBase(TableKind.IAT, reg.version, malware[:10], benign[:100])
held_out = malware[130:]
run = train_iterative(seed, malware[10:130], TrainConfig(epsilon=0.05))
for r in run.rounds:
    print(f"round {r.round}: classified {r.classified}, detected {r.detected}, undetected {r.undetected}")
before = sum(classify(v, seed).malicious for v in held_out) / len(held_out)
after = sum(classify(v, run.base).malicious for v in held_out) / len(held_out)
print(f"malware base {len(seed.malware)} -> {len(run.base.malware)} vectors; held-out detection {before:.3f} -> {after:.3f}")
print()

db = Database(reg, TrainingBase(TableKind.IAT, reg.version, malware[:100], benign[:100]))
corpus = LabeledCorpus(
    [(Sample(v), Label.MALWARE) for v in malware[100:]] + [(Sample(v), Label.BENIGN) for v in benign[100:]]
)
print("combinatorial engine, bases pruned by information gain:")
print(sweep_table(sweep(corpus, db, [1.0, 0.8, 0.6, 0.4, 0.2, 0.1], score="ig", engine="combi")))
