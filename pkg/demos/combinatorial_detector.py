"""The five-test combinatorial detector on hand-made bitvectors.

First scenario: one malware vector three functions away from the scanned file
and thirty benign vectors twenty-seven away.  The benign side wins the plain
vote but the distance gap hands the XOR test to the malware side.

    python demos/combinatorial_detector.py
"""

from __future__ import annotations

import random

from iatforge.combi import CombiBase, CombiConfig, detect
from iatforge.features import FunctionBitVector

N = 64


def bits(indices) -> FunctionBitVector:
    return FunctionBitVector.from_indices(indices, N)


def report(title: str, x: FunctionBitVector, base: CombiBase, config: CombiConfig = CombiConfig()) -> None:
    verdict = detect(x, base, config)
    print(f"== {title}: {verdict.label.value} ({verdict.type_count} malicious test(s))")
    for outcome in verdict.per_test:
        detail = outcome.detail
        if hasattr(detail, "kept"):
            detail = f"votes {detail.malware_votes}m/{detail.benign_votes}b, best score {detail.kept[0][0]}, gap applied {detail.gap_applied}"
        elif isinstance(detail, tuple):
            detail = f"d_m={detail[0]} d_g={detail[1]}"
        print(f"  {outcome.name:<9} {'MALICIOUS' if outcome.malicious else 'benign':<9} {detail or ''}")
    print()


rng = random.Random(3)
x = bits(range(30))
malware = [bits(range(3, 30))]
benign = [bits([*range(30), *rng.sample(range(30, 64), 27)]) for _ in range(30)]
base = CombiBase.build(malware, benign, bits([1]), universe_size=N)
report("gap scenario, function 1 blacklisted", x, base)

base = CombiBase.build(malware, benign, bits([]), universe_size=N)
report("same base, empty blacklist", x, base)
report("same base, stricter gap ratio 10", x, base, CombiConfig(gap_ratio=10.0))
