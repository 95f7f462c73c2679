"""Command-line entry point: ``iatforge <command> ...``.

Exit codes: 0 all benign / success, 1 at least one malicious file, 2 usage or
internal error (and, for ``scan``, a file that could not be parsed when none
was malicious).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .combi import CombiConfig
from .database import Database
from .errors import IatForgeError, PeFormatError
from .evaluation import LabeledCorpus, evaluate, sweep, sweep_table
from .features import Label, TableKind, vectorize
from .knn import KnnConfig, TrainConfig, train_iterative
from .pipeline import REPORT_SCHEMA, Mode, RunConfig, exit_code, extract_file, scan_batch

log = logging.getLogger("iatforge")

BASE_ENV = "IATFORGE_BASE"


class UsageError(Exception):
    pass


def _fraction_list(text: str) -> list[float]:
    try:
        values = [float(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from None
    if not values or any(not 0 < v <= 1 for v in values):
        raise argparse.ArgumentTypeError("fractions must lie in (0, 1]")
    return values


def _keep_fraction(text: str) -> float:
    value = float(text)
    if not 0 < value <= 1:
        raise argparse.ArgumentTypeError("--keep must lie in (0, 1]")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="iatforge", description="IAT/EAT static malware detection.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="print the import/export pairs and structural findings of a file")
    p.add_argument("file")
    p.add_argument("--json", action="store_true")

    db = sub.add_parser("db", help="create and maintain a base directory")
    dbsub = db.add_subparsers(dest="db_command", required=True)
    p = dbsub.add_parser("init", help="create an empty base")
    p.add_argument("--out", required=True)
    p = dbsub.add_parser("add", help="register files' pairs and store their vectors under a label")
    p.add_argument("--base")
    p.add_argument("--label", required=True, choices=[lbl.value for lbl in Label])
    p.add_argument("files", nargs="+")
    p = dbsub.add_parser("blacklist", help="add dll!function lines from a text file to the blacklist")
    p.add_argument("--base")
    p.add_argument("pairs_file")
    p = dbsub.add_parser("prune", help="keep only the best-scoring fraction of each label")
    p.add_argument("--base")
    p.add_argument("--keep", required=True, type=_keep_fraction)
    p.add_argument("--score", choices=["ig", "density"], default="density")
    p = dbsub.add_parser("stats", help="summarise a base")
    p.add_argument("--base")
    p.add_argument("--json", action="store_true")

    p = sub.add_parser("scan", help="classify files")
    p.add_argument("--base")
    p.add_argument("--mode", choices=[m.value for m in Mode], default=Mode.BOTH.value)
    p.add_argument("--k", type=int, default=9)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--gap", type=float, default=4.0)
    p.add_argument("--no-structural-decisive", action="store_true")
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--json", action="store_true")
    p.add_argument("files", nargs="+")

    p = sub.add_parser("train", help="absorb undetected malware samples into the base")
    p.add_argument("--base")
    p.add_argument("--epsilon", required=True, type=float)
    p.add_argument("--max-rounds", type=int, default=10)
    p.add_argument("--k", type=int, default=9)
    p.add_argument("files", nargs="+")

    p = sub.add_parser("eval", help="measure detection rates against a truth CSV")
    p.add_argument("--base")
    p.add_argument("--truth", required=True)
    p.add_argument("--sweep", type=_fraction_list)
    p.add_argument("--score", choices=["ig", "density"], default="density")
    p.add_argument("--mode", choices=[m.value for m in Mode], default=Mode.BOTH.value)
    p.add_argument("--json", action="store_true")
    return parser


def _base_dir(args: argparse.Namespace) -> Path:
    base = args.base or os.environ.get(BASE_ENV)
    if not base:
        raise UsageError(f"--base is required (or set {BASE_ENV})")
    return Path(base)


def _run_config(args: argparse.Namespace) -> RunConfig:
    try:
        return RunConfig(
            mode=Mode(args.mode),
            knn=KnnConfig(k=args.k, similarity_threshold=args.threshold),
            combi=CombiConfig(gap_ratio=args.gap),
            structural_decisive=not args.no_structural_decisive,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _extract_many(paths: Sequence[str]) -> tuple[list, list[str]]:
    extractions, names = [], []
    for path in paths:
        try:
            extractions.append(extract_file(path))
            names.append(path)
        except (OSError, PeFormatError) as exc:
            print(f"{path}: skipped ({type(exc).__name__}: {exc})", file=sys.stderr)
    return extractions, names


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_extract(args: argparse.Namespace) -> int:
    ext = extract_file(args.file)
    f = ext.findings
    if args.json:
        doc = {
            "schema": REPORT_SCHEMA,
            "path": args.file,
            "pe32_plus": ext.layout.is_pe32_plus,
            "is_dll": ext.layout.is_dll,
            "imports": [
                {
                    "dll": p.dll_name,
                    "function": p.function_key,
                    "hint": p.hint,
                }
                for p in ext.imports
            ],
            "export_dll": ext.export_dll,
            "exports": [{"name": e.name, "ordinal": e.ordinal} for e in ext.exports],
            "structural": {
                "has_iat": f.has_iat,
                "has_eat": f.has_eat,
                "empty_iat": f.empty_iat,
                "ordinal_rule_violation": f.ordinal_rule_violation,
                "hint_rule_warning": f.hint_rule_warning,
                "malformed": list(f.malformed),
            },
        }
        print(json.dumps(doc, indent=2))
        return 0
    print(f"file: {args.file}  ({'PE32+' if ext.layout.is_pe32_plus else 'PE32'}, {'dll' if ext.layout.is_dll else 'exe'})")
    print(f"imports: {len(ext.imports)}")
    for p in ext.imports:
        hint = "" if p.hint is None else f"  (hint {p.hint})"
        print(f"  {p.dll_name}!{p.function_key}{hint}")
    if ext.exports:
        print(f"exports of {ext.export_dll or '?'}: {len(ext.exports)}")
        for e in ext.exports:
            print(f"  {e.ordinal:>5} {e.name or ''}")
    print(
        f"findings: empty_iat={f.empty_iat} ordinal_rule_violation={f.ordinal_rule_violation} "
        f"hint_rule_warning={f.hint_rule_warning}"
    )
    for msg in f.malformed:
        print(f"  malformed: {msg}")
    return 0


def cmd_db(args: argparse.Namespace) -> int:
    if args.db_command == "init":
        Database.create(args.out)
        print(f"created empty base in {args.out}")
        return 0

    root = _base_dir(args)
    db = Database.load(root)
    if args.db_command == "add":
        extractions, names = _extract_many(args.files)
        result = db.add_extractions(extractions, Label(args.label), names)
        db.save(root)
        print(f"added {result.added} {args.label} vector(s), {result.duplicates} duplicate(s) skipped")
        for msg in result.conflicts:
            print(f"  conflict: {msg}", file=sys.stderr)
    elif args.db_command == "blacklist":
        pairs = []
        for lineno, line in enumerate(Path(args.pairs_file).read_text("utf-8").splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            dll, sep, func = line.partition("!")
            if not sep or not dll or not func:
                raise UsageError(f"{args.pairs_file}:{lineno}: expected dll!function")
            pairs.append((dll.strip().lower(), func.strip()))
        added = db.add_blacklist(pairs)
        db.save(root)
        print(f"blacklisted {added} new function(s)")
    elif args.db_command == "prune":
        before = db.stats()
        db = db.pruned(args.keep, args.score)
        db.save(root)
        after = db.stats()
        print(
            f"kept {after['iat_malware']}/{before['iat_malware']} malware and "
            f"{after['iat_benign']}/{before['iat_benign']} benign IAT vectors"
        )
    elif args.db_command == "stats":
        stats = db.stats()
        stats["bytes"] = db.byte_size()
        if args.json:
            print(json.dumps({"schema": REPORT_SCHEMA, **stats}, indent=2, sort_keys=True))
        else:
            for key, value in stats.items():
                print(f"{key}: {value}")
    return 0


def cmd_scan(args: argparse.Namespace) -> int:
    config = _run_config(args)
    db = Database.load(_base_dir(args))
    reports = scan_batch(args.files, db.bases(with_combi=config.mode is not Mode.KNN), config, args.workers)
    if args.json:
        print(json.dumps({"schema": REPORT_SCHEMA, "results": [r.to_dict() for r in reports]}, indent=2))
    else:
        for r in reports:
            if r.error:
                print(f"{r.path}: ERROR {r.error}")
            else:
                verdict = "MALICIOUS" if r.malicious else "benign"
                print(f"{r.path}: {verdict}" + (f"  [{'; '.join(r.reasons)}]" if r.reasons else ""))
    return exit_code(reports)


def cmd_train(args: argparse.Namespace) -> int:
    root = _base_dir(args)
    db = Database.load(root)
    extractions, names = _extract_many(args.files)
    db.register(p for ext in extractions for p in (*ext.import_pairs(), *ext.export_pairs()))
    samples = [vectorize(ext.import_pairs(), db.registry, TableKind.IAT) for ext in extractions]
    try:
        config = TrainConfig(args.epsilon, args.max_rounds, KnnConfig(k=args.k))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    run = train_iterative(db.iat, samples, config)
    for r in run.rounds:
        print(f"round {r.round}: classified {r.classified}, detected {r.detected}, undetected {r.undetected}")
    absorbed = sorted(run.absorbed)
    db.add_extractions([extractions[i] for i in absorbed], Label.MALWARE, [names[i] for i in absorbed])
    db.save(root)
    print(f"absorbed {len(absorbed)} of {len(samples)} sample(s) into the malware base")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    config = RunConfig(mode=Mode(args.mode))
    db = Database.load(_base_dir(args))
    corpus = LabeledCorpus.from_truth_csv(args.truth)
    if args.sweep:
        rows = sweep(corpus, db, args.sweep, args.score, config)
        if args.json:
            doc = {
                "schema": REPORT_SCHEMA,
                "sweep": [
                    {
                        "fraction": r.fraction,
                        "detection_rate": r.detection_rate,
                        "false_positive_rate": r.false_positive_rate,
                        "base_bytes": r.base_bytes,
                        "seconds": r.seconds,
                    }
                    for r in rows
                ],
            }
            print(json.dumps(doc, indent=2))
        else:
            print(sweep_table(rows))
        return 0
    report = evaluate(corpus, db, config)
    print(report.to_json() if args.json else report.to_text())
    return 0


COMMANDS = {"extract": cmd_extract, "db": cmd_db, "scan": cmd_scan, "train": cmd_train, "eval": cmd_eval}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"iatforge: error: {exc}", file=sys.stderr)
        return 2
    except (IatForgeError, OSError, ValueError) as exc:
        print(f"iatforge: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
