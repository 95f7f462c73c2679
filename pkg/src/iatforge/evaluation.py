"""Detection metrics over labeled corpora and base-size sweeps."""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence, Union

from .database import Database
from .errors import IncompatibleRegistry
from .features import Label, Score, TableVector
from .pe_format import StructuralFindings
from .pipeline import Bases, Mode, RunConfig, ScanReport, scan_pipeline, scan_vectors


@dataclass(frozen=True)
class Sample:
    """Prebuilt vectors standing in for a file."""

    iat: TableVector
    eat: Optional[TableVector] = None
    findings: Optional[StructuralFindings] = None
    name: str = ""


Source = Union[str, Path, Sample]


@dataclass
class LabeledCorpus:
    entries: list[tuple[Source, Label]] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.entries = [(src, Label(lbl)) for src, lbl in self.entries]

    def __len__(self) -> int:
        return len(self.entries)

    @classmethod
    def from_truth_csv(cls, path: Union[str, Path]) -> "LabeledCorpus":
        """Read a ``path,label`` CSV; relative paths resolve against the CSV's folder."""
        path = Path(path)
        entries = []
        with path.open(newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["path", "label"]:
                raise ValueError(f"{path}: header must be 'path,label'")
            for row in reader:
                target = Path(row["path"].strip())
                if not target.is_absolute():
                    target = path.parent / target
                entries.append((target, Label(row["label"].strip())))
        return cls(entries)


@dataclass(frozen=True)
class MetricsReport:
    true_positives: int
    false_negatives: int
    false_positives: int
    true_negatives: int
    errors: int = 0
    seconds_per_file: float = 0.0

    @property
    def malware_count(self) -> int:
        return self.true_positives + self.false_negatives

    @property
    def benign_count(self) -> int:
        return self.false_positives + self.true_negatives

    @staticmethod
    def _rate(num: int, den: int) -> float:
        return num / den if den else 0.0

    @property
    def true_positive_rate(self) -> float:
        return self._rate(self.true_positives, self.malware_count)

    @property
    def false_negative_rate(self) -> float:
        return self._rate(self.false_negatives, self.malware_count)

    @property
    def false_positive_rate(self) -> float:
        return self._rate(self.false_positives, self.benign_count)

    @property
    def true_negative_rate(self) -> float:
        return self._rate(self.true_negatives, self.benign_count)

    def payload(self) -> dict[str, Any]:
        """Everything except timing; deterministic for fixed inputs."""
        return {
            "confusion": {
                "malware": {"detected_as_malware": self.true_positives, "detected_as_benign": self.false_negatives},
                "benign": {"detected_as_malware": self.false_positives, "detected_as_benign": self.true_negatives},
            },
            "true_positive_rate": self.true_positive_rate,
            "false_negative_rate": self.false_negative_rate,
            "false_positive_rate": self.false_positive_rate,
            "true_negative_rate": self.true_negative_rate,
            "errors": self.errors,
        }

    def to_dict(self) -> dict[str, Any]:
        return {"schema": 1, **self.payload(), "seconds_per_file": self.seconds_per_file}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self) -> str:
        lines = [
            f"files: {self.malware_count + self.benign_count} ({self.malware_count} malware, {self.benign_count} benign)",
            f"errors: {self.errors}",
            f"true_positive_rate: {self.true_positive_rate:.5f}",
            f"false_positive_rate: {self.false_positive_rate:.5f}",
            f"true_negative_rate: {self.true_negative_rate:.5f}",
            f"false_negative_rate: {self.false_negative_rate:.5f}",
            f"seconds_per_file: {self.seconds_per_file:.6f}",
            "",
            f"{'':26}{'Malware set':>14}{'Benign set':>14}",
            f"{'Detected as malware':26}{self.true_positive_rate:>14.3%}{self.false_positive_rate:>14.3%}",
            f"{'Detected as benign file':26}{self.false_negative_rate:>14.3%}{self.true_negative_rate:>14.3%}",
        ]
        return "\n".join(lines)


def _as_bases(bases: Union[Bases, Database], mode: Mode) -> Bases:
    if isinstance(bases, Database):
        return bases.bases(with_combi=mode is not Mode.KNN)
    return bases


def _scan(source: Source, bases: Bases, config: RunConfig) -> ScanReport:
    if isinstance(source, Sample):
        for vec in (source.iat, source.eat):
            if vec is not None and vec.registry_version != bases.registry.version:
                raise IncompatibleRegistry(
                    f"{source.name or 'sample'} built for registry v{vec.registry_version}, "
                    f"base is v{bases.registry.version}"
                )
        return scan_vectors(source.iat, source.eat, bases, config, source.findings, source.name)
    return scan_pipeline(source, bases, config)


def evaluate(
    corpus: LabeledCorpus,
    bases: Union[Bases, Database],
    config: RunConfig = RunConfig(),
    engine: Optional[Union[Mode, str]] = None,
) -> MetricsReport:
    """Classify every entry and tabulate the confusion matrix.

    ``engine`` ("knn", "combi" or "both") overrides ``config.mode``.  Entries
    whose scan fails are counted under ``errors`` and left out of the matrix.
    """
    if engine is not None:
        config = RunConfig(Mode(engine), config.knn, config.combi, config.structural_decisive)
    resolved = _as_bases(bases, config.mode)
    counts = {(truth, verdict): 0 for truth in Label for verdict in Label}
    errors = 0
    start = time.perf_counter()
    for source, truth in corpus.entries:
        report = _scan(source, resolved, config)
        if report.final is None:
            errors += 1
        else:
            counts[(truth, report.final)] += 1
    elapsed = time.perf_counter() - start
    return MetricsReport(
        true_positives=counts[(Label.MALWARE, Label.MALWARE)],
        false_negatives=counts[(Label.MALWARE, Label.BENIGN)],
        false_positives=counts[(Label.BENIGN, Label.MALWARE)],
        true_negatives=counts[(Label.BENIGN, Label.BENIGN)],
        errors=errors,
        seconds_per_file=elapsed / len(corpus) if len(corpus) else 0.0,
    )


@dataclass(frozen=True)
class SweepRow:
    fraction: float
    detection_rate: float
    false_positive_rate: float
    base_bytes: int
    seconds: float
    report: MetricsReport


def sweep(
    corpus: LabeledCorpus,
    base: Database,
    fractions: Sequence[float],
    score: Score = "density",
    config: RunConfig = RunConfig(),
    engine: Optional[Union[Mode, str]] = None,
) -> list[SweepRow]:
    """Prune the base to each fraction, re-evaluate, and tabulate, largest fraction first."""
    for f in fractions:
        if not 0 < f <= 1:
            raise ValueError(f"fraction {f} outside (0, 1]")
    rows = []
    for fraction in sorted(set(fractions), reverse=True):
        pruned = base if fraction == 1 else base.pruned(fraction, score)
        start = time.perf_counter()
        report = evaluate(corpus, pruned, config, engine)
        seconds = time.perf_counter() - start
        rows.append(
            SweepRow(fraction, report.true_positive_rate, report.false_positive_rate, pruned.byte_size(), seconds, report)
        )
    return rows


def sweep_table(rows: Sequence[SweepRow]) -> str:
    lines = [f"{'% of original base':>20}{'Size on disk':>16}{'Detection rate':>16}{'FP rate':>10}{'Time':>10}"]
    for r in rows:
        lines.append(
            f"{r.fraction * 100:>20.0f}{r.base_bytes:>14} B{r.detection_rate * 100:>15.1f}%"
            f"{r.false_positive_rate * 100:>9.1f}%{r.seconds:>9.2f}s"
        )
    return "\n".join(lines)
