"""Per-file scanning: structural check, then k-NN, then the combinatorial detector."""

from __future__ import annotations

import enum
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence, Union

from .combi import CombiBase, CombiConfig, CombiVerdict, NeighborEvidence, detect
from .errors import EmptyBase, IncompatibleRegistry, PeFormatError
from .features import (
    Label,
    PairRegistry,
    TableKind,
    TableVector,
    export_keys,
    import_keys,
    to_bitvector,
    vectorize,
)
from .knn import KnnConfig, TableVerdict, TrainingBase, classify_tables
from .pe_format import (
    ExportEntry,
    ImportedPair,
    PeLayout,
    StructuralFindings,
    extract_exports,
    extract_imports,
    parse_pe,
    structural_check,
)

REPORT_SCHEMA = 1
UNNAMED_DLL = "<unnamed>"


class Mode(str, enum.Enum):
    KNN = "knn"
    COMBI = "combi"
    BOTH = "both"


@dataclass(frozen=True)
class RunConfig:
    mode: Mode = Mode.BOTH
    knn: KnnConfig = field(default_factory=KnnConfig)
    combi: CombiConfig = field(default_factory=CombiConfig)
    structural_decisive: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", Mode(self.mode))


# ---------------------------------------------------------------------------
# Extraction
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Extraction:
    layout: PeLayout
    imports: tuple[ImportedPair, ...]
    export_dll: str
    exports: tuple[ExportEntry, ...]
    findings: StructuralFindings

    def import_pairs(self) -> list[tuple[str, str]]:
        return [p for p in import_keys(self.imports) if _storable(p)]

    def export_pairs(self) -> list[tuple[str, str]]:
        return [p for p in export_keys(self.export_dll or UNNAMED_DLL, self.exports) if _storable(p)]


def _storable(pair: tuple[str, str]) -> bool:
    return all(part and "\n" not in part and "\r" not in part for part in pair)


def extract(data: bytes) -> Extraction:
    """Parse a PE image and walk both tables.

    Header errors propagate.  Errors inside the import or export walk are
    recorded as malformed findings and leave that table empty.
    """
    layout = parse_pe(data)
    malformed = []
    imports: list[ImportedPair] = []
    if layout.import_dir.present:
        try:
            imports = extract_imports(layout, data)
        except PeFormatError as exc:
            malformed.append(f"imports: {type(exc).__name__}: {exc}")
    dll, exports = "", []
    if layout.export_dir.present:
        try:
            dll, exports = extract_exports(layout, data)
        except PeFormatError as exc:
            malformed.append(f"exports: {type(exc).__name__}: {exc}")
    findings = structural_check(layout, imports, exports, malformed)
    return Extraction(layout, tuple(imports), dll, tuple(exports), findings)


def extract_file(path: Union[str, Path]) -> Extraction:
    return extract(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# Bases and reports
# ---------------------------------------------------------------------------


@dataclass
class Bases:
    registry: PairRegistry
    iat: Optional[TrainingBase] = None
    eat: Optional[TrainingBase] = None
    combi: Optional[CombiBase] = None

    def __post_init__(self) -> None:
        version = self.registry.version
        for name, base in (("iat", self.iat), ("eat", self.eat), ("combi", self.combi)):
            if base is not None and base.registry_version != version:
                raise IncompatibleRegistry(
                    f"{name} base built for registry v{base.registry_version}, registry is v{version}"
                )


@dataclass(frozen=True)
class ScanReport:
    path: str
    structural: Optional[StructuralFindings]
    knn: Optional[TableVerdict]
    combi: Optional[CombiVerdict]
    final: Optional[Label]
    reasons: tuple[str, ...]
    error: Optional[str] = None

    @property
    def malicious(self) -> bool:
        return self.final is Label.MALWARE

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "path": self.path,
            "final": self.final.value if self.final else None,
            "reasons": list(self.reasons),
            "error": self.error,
        }
        if self.structural is not None:
            s = self.structural
            out["structural"] = {
                "has_iat": s.has_iat,
                "has_eat": s.has_eat,
                "empty_iat": s.empty_iat,
                "ordinal_rule_violation": s.ordinal_rule_violation,
                "hint_rule_warning": s.hint_rule_warning,
                "malformed": list(s.malformed),
            }
        if self.knn is not None:
            out["knn"] = {
                "label": self.knn.label.value,
                "iat": _verdict_dict(self.knn.iat),
                "eat": _verdict_dict(self.knn.eat),
            }
        if self.combi is not None:
            out["combi"] = {
                "label": self.combi.label.value,
                "type_count": self.combi.type_count,
                "tests": [_outcome_dict(o.name, o.malicious, o.detail) for o in self.combi.per_test],
            }
        return out


def _verdict_dict(v) -> Optional[dict[str, Any]]:
    if v is None:
        return None
    return {
        "label": v.label.value,
        "stage": v.stage,
        "neighbors": [[n.distance, n.label.value, n.base_index] for n in v.neighbors],
    }


def _outcome_dict(name: str, malicious: bool, detail: object) -> dict[str, Any]:
    out: dict[str, Any] = {"name": name, "malicious": malicious}
    if isinstance(detail, NeighborEvidence):
        out.update(
            malware_votes=detail.malware_votes,
            benign_votes=detail.benign_votes,
            gap_applied=detail.gap_applied,
            best=[detail.kept[0][0], detail.kept[0][1].value] if detail.kept else None,
        )
    elif isinstance(detail, tuple):
        out.update(d_malware=detail[0], d_benign=detail[1])
    return out


# ---------------------------------------------------------------------------
# Scanning
# ---------------------------------------------------------------------------


def scan_vectors(
    iat: TableVector,
    eat: Optional[TableVector],
    bases: Bases,
    config: RunConfig = RunConfig(),
    findings: Optional[StructuralFindings] = None,
    path: str = "",
) -> ScanReport:
    """Run the enabled stages on prebuilt vectors."""
    reasons: list[str] = []
    if findings is not None:
        if findings.empty_iat:
            reasons.append("structural: executable has no import address table")
        if findings.ordinal_rule_violation:
            reasons.append("structural: export ordinals do not form 1..N")
        if findings.hint_rule_warning:
            reasons.append("structural (advisory): import hint not below the DLL's imported-function count")
        for msg in findings.malformed:
            reasons.append(f"structural: malformed {msg}")
        if config.structural_decisive and findings.decisive:
            return ScanReport(path, findings, None, None, Label.MALWARE, tuple(reasons))

    for vec in (iat, eat):
        if vec is not None and vec.registry_version != bases.registry.version:
            raise IncompatibleRegistry(
                f"vector built for registry v{vec.registry_version}, registry is v{bases.registry.version}"
            )

    votes: list[bool] = []
    knn_verdict = None
    if config.mode in (Mode.KNN, Mode.BOTH):
        if bases.iat is None or len(bases.iat) == 0:
            reasons.append("knn: skipped, IAT base is empty")
        elif len(iat) == 0:
            reasons.append("knn: skipped, no registered IAT pairs")
        else:
            knn_verdict = classify_tables(iat, eat, bases.iat, bases.eat, config.knn)
            votes.append(knn_verdict.label is Label.MALWARE)
            reasons.append(f"knn: {knn_verdict.label.value} (iat stage {knn_verdict.iat.stage})")

    combi_verdict = None
    if config.mode in (Mode.COMBI, Mode.BOTH):
        if bases.combi is None:
            reasons.append("combi: skipped, no combinatorial base")
        else:
            try:
                combi_verdict = detect(to_bitvector(iat, bases.registry), bases.combi, config.combi)
            except EmptyBase:
                reasons.append("combi: skipped, base needs vectors of both labels")
            else:
                votes.append(combi_verdict.malicious)
                fired = ",".join(o.name for o in combi_verdict.per_test if o.malicious) or "none"
                reasons.append(
                    f"combi: {combi_verdict.label.value} (type_count {combi_verdict.type_count}; votes: {fired})"
                )

    final = Label.MALWARE if any(votes) else Label.BENIGN
    return ScanReport(path, findings, knn_verdict, combi_verdict, final, tuple(reasons))


def scan_extraction(ext: Extraction, bases: Bases, config: RunConfig = RunConfig(), path: str = "") -> ScanReport:
    iat = vectorize(ext.import_pairs(), bases.registry, TableKind.IAT)
    eat = vectorize(ext.export_pairs(), bases.registry, TableKind.EAT) if ext.exports else None
    return scan_vectors(iat, eat, bases, config, ext.findings, path)


def scan_pipeline(path: Union[str, Path], bases: Bases, config: RunConfig = RunConfig()) -> ScanReport:
    """Scan one file; I/O and parse failures become an error report."""
    name = str(path)
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        return ScanReport(name, None, None, None, None, (), f"IoError: {exc}")
    try:
        ext = extract(data)
    except PeFormatError as exc:
        return ScanReport(name, None, None, None, None, (), f"ParseError: {type(exc).__name__}: {exc}")
    return scan_extraction(ext, bases, config, name)


def scan_batch(
    paths: Sequence[Union[str, Path]],
    bases: Bases,
    config: RunConfig = RunConfig(),
    workers: Optional[int] = None,
) -> list[ScanReport]:
    """Scan many files; results come back in input order."""
    workers = workers or min(8, os.cpu_count() or 1)
    if workers <= 1 or len(paths) <= 1:
        return [scan_pipeline(p, bases, config) for p in paths]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda p: scan_pipeline(p, bases, config), paths))


def exit_code(reports: Iterable[ScanReport]) -> int:
    """1 if any file is malicious, else 2 if any file failed, else 0."""
    reports = list(reports)
    if any(r.malicious for r in reports):
        return 1
    if any(r.error for r in reports):
        return 2
    return 0
