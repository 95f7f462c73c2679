from __future__ import annotations

import hashlib
import json
import subprocess
import sys
from pathlib import Path

import pytest

from iatforge.cli import main
from iatforge.combi import CombiConfig
from iatforge.database import Database
from iatforge.errors import IncompatibleRegistry
from iatforge.features import Label, TableKind, TableVector, vectorize
from iatforge.pe_fixtures import FixtureExport, FixtureImport, FixtureSpec, build_pe
from iatforge.pipeline import (
    Mode,
    RunConfig,
    ScanReport,
    exit_code,
    extract,
    scan_batch,
    scan_pipeline,
    scan_vectors,
)

M, B = Label.MALWARE, Label.BENIGN


def imports_of(dll: str, names) -> FixtureSpec:
    return FixtureSpec(imports=[FixtureImport(dll, [(n, 0) for n in names])])


EVIL = imports_of("evil.dll", ["Steal", "Hide", "Spread"])
EVIL_2 = imports_of("evil.dll", ["Steal", "Hide", "Beacon"])
GOOD = imports_of("kernel32.dll", ["ExitProcess", "GetTickCount", "Sleep"])
GOOD_2 = imports_of("kernel32.dll", ["ExitProcess", "GetTickCount", "CreateFileW"])


def write(tmp: Path, name: str, spec: FixtureSpec) -> Path:
    path = tmp / name
    path.write_bytes(build_pe(spec))
    return path


@pytest.fixture
def db() -> Database:
    d = Database()
    d.add_extractions([extract(build_pe(EVIL)), extract(build_pe(EVIL_2))], M)
    d.add_extractions([extract(build_pe(GOOD)), extract(build_pe(GOOD_2))], B)
    return d


# -- scan_pipeline ------------------------------------------------------------


def test_ordinal_violation_short_circuits(tmp_path, db):
    spec = FixtureSpec(
        imports=GOOD.imports, is_dll=True, exports=FixtureExport("x.dll", [("A", 2), ("B", 3)], ordinal_base=2)
    )
    report = scan_pipeline(write(tmp_path, "odd.dll", spec), db.bases())
    assert report.final is M
    assert report.knn is None and report.combi is None
    assert any("ordinals" in r for r in report.reasons)

    relaxed = scan_pipeline(tmp_path / "odd.dll", db.bases(), RunConfig(structural_decisive=False))
    assert relaxed.knn is not None and relaxed.structural.ordinal_rule_violation


def test_empty_iat_short_circuits(tmp_path, db):
    report = scan_pipeline(write(tmp_path, "bare.exe", FixtureSpec()), db.bases())
    assert report.final is M and report.structural.empty_iat and report.knn is None


def test_exact_benign_match_in_knn_mode(tmp_path, db):
    report = scan_pipeline(write(tmp_path, "good.exe", GOOD), db.bases(with_combi=False), RunConfig(mode=Mode.KNN))
    assert report.final is B
    assert report.knn.iat.stage == "exact"
    assert report.combi is None


def test_both_mode_combi_votes_override_knn():
    # k-NN falls back to a 6-vs-1 benign vote, while the blacklist and binomial
    # tests of the combinatorial detector both fire
    d = Database()
    malware = [("x.dll", f"F{i}") for i in (1, 2, *range(30, 40))]
    benign = [[("x.dll", f"F{50 + i}")] for i in range(4)] + [[("x.dll", "F50"), ("x.dll", "F54")], [("x.dll", "F51"), ("x.dll", "F55")]]
    d.add_pairs([(malware, [])], M)
    d.add_pairs([(p, []) for p in benign], B)
    d.add_blacklist([("x.dll", "F2")])
    ext_pairs = [("x.dll", f"F{i}") for i in (1, 2, 50, 51, 52, 53)]
    config = RunConfig(mode=Mode.BOTH, combi=CombiConfig(p=2, gap_ratio=100.0))
    report = scan_vectors(vectorize(ext_pairs, d.registry, TableKind.IAT), None, d.bases(), config)
    assert report.knn.label is B
    assert report.combi.type_count == 2
    assert report.final is M
    assert any(r.startswith("combi: malware") for r in report.reasons)


def test_modes_run_only_their_stages(tmp_path, db):
    path = write(tmp_path, "e.exe", EVIL)
    knn_only = scan_pipeline(path, db.bases(), RunConfig(mode=Mode.KNN))
    combi_only = scan_pipeline(path, db.bases(), RunConfig(mode=Mode.COMBI))
    assert knn_only.combi is None and knn_only.knn is not None
    assert combi_only.knn is None and combi_only.combi is not None


def test_final_iff_any_stage_votes(tmp_path, db):
    for spec in (EVIL, GOOD, imports_of("evil.dll", ["Steal", "Sleep"])):
        r = scan_pipeline(write(tmp_path, "f.exe", spec), db.bases())
        votes = [r.knn.label is M, r.combi.malicious]
        assert r.malicious is any(votes)


def test_io_and_parse_errors_are_reported(tmp_path, db):
    missing = scan_pipeline(tmp_path / "nope.exe", db.bases())
    assert missing.final is None and missing.error.startswith("IoError")
    (tmp_path / "junk.exe").write_bytes(b"XY" + bytes(100))
    junk = scan_pipeline(tmp_path / "junk.exe", db.bases())
    assert junk.final is None and junk.error.startswith("ParseError")


def test_incompatible_vector_rejected(db):
    stale = TableVector.from_ids([0], TableKind.IAT, db.registry.version + 1)
    with pytest.raises(IncompatibleRegistry):
        scan_vectors(stale, None, db.bases())


def test_batch_order_and_isolation(tmp_path, db):
    paths = []
    for i in range(12):
        spec = (EVIL, GOOD, None)[i % 3]
        if spec is None:
            p = tmp_path / f"{i:02d}.exe"
            p.write_bytes(b"MZ" + bytes(10))
            paths.append(p)
        else:
            paths.append(write(tmp_path, f"{i:02d}.exe", spec))
    serial = scan_batch(paths, db.bases(), workers=1)
    parallel = scan_batch(paths, db.bases(), workers=4)
    assert [r.path for r in parallel] == [str(p) for p in paths]
    assert [r.to_dict() for r in serial] == [r.to_dict() for r in parallel]
    clean = [p for i, p in enumerate(paths) if i % 3 != 2]
    alone = scan_batch(clean, db.bases(), workers=1)
    mixed = [r for i, r in enumerate(serial) if i % 3 != 2]
    assert [r.final for r in alone] == [r.final for r in mixed]


def report(final, error=None) -> ScanReport:
    return ScanReport("f", None, None, None, final, (), error)


@pytest.mark.parametrize(
    "finals, code",
    [
        ([], 0),
        ([B, B], 0),
        ([B, M], 1),
        ([None, B], 2),
        ([None, M], 1),
    ],
)
def test_exit_code(finals, code):
    reports = [report(f, None if f else "ParseError") for f in finals]
    assert exit_code(reports) == code
    assert exit_code(reversed(reports)) == code


def test_report_json_shape(tmp_path, db):
    r = scan_pipeline(write(tmp_path, "e.exe", EVIL), db.bases())
    doc = json.loads(json.dumps(r.to_dict()))
    assert doc["final"] == "malware"
    assert [t["name"] for t in doc["combi"]["tests"]] == ["blacklist", "xor", "and", "binomial", "trinomial"]
    assert doc["knn"]["iat"]["stage"] == "exact"


# -- persistence --------------------------------------------------------------


def tree_digest(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode() + b"\0" + p.read_bytes())
    return h.hexdigest()


def test_database_roundtrip(tmp_path, db):
    db.add_blacklist([("evil.dll", "Spread")])
    db.save(tmp_path / "a")
    back = Database.load(tmp_path / "a")
    assert back.registry == db.registry
    assert back.iat == db.iat and back.eat == db.eat and back.blacklist == db.blacklist
    assert back.combi.mbs == db.combi.mbs and back.combi.gts == db.combi.gts
    back.save(tmp_path / "b")
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")


def test_database_load_rejects_mismatched_registry(tmp_path, db):
    db.save(tmp_path / "a")
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    manifest["registry_version"] += 1
    (tmp_path / "a" / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(IncompatibleRegistry):
        Database.load(tmp_path / "a")


def test_database_conflicts_and_duplicates(db):
    result = db.add_extractions([extract(build_pe(EVIL)), extract(build_pe(GOOD))], M, ["dup", "clash"])
    assert result.added == 0 and result.duplicates == 1
    assert result.conflicts and result.conflicts[0].startswith("clash")


def test_pruned_database(db):
    small = db.pruned(0.5)
    assert len(small.iat.malware) == 1 and len(small.iat.benign) == 1
    assert small.byte_size() < db.byte_size()


# -- command line -------------------------------------------------------------


@pytest.fixture
def base_dir(tmp_path) -> Path:
    root = tmp_path / "base"
    assert main(["db", "init", "--out", str(root)]) == 0
    mal = [write(tmp_path, "m1.exe", EVIL), write(tmp_path, "m2.exe", EVIL_2)]
    ben = [write(tmp_path, "g1.exe", GOOD), write(tmp_path, "g2.exe", GOOD_2)]
    assert main(["db", "add", "--base", str(root), "--label", "malware", *map(str, mal)]) == 0
    assert main(["db", "add", "--base", str(root), "--label", "benign", *map(str, ben)]) == 0
    return root


def test_cli_scan_exit_codes(tmp_path, base_dir, capsys):
    good = write(tmp_path, "good.exe", GOOD)
    evil = write(tmp_path, "evil.exe", EVIL)
    junk = tmp_path / "junk.exe"
    junk.write_bytes(b"nope")
    base = ["--base", str(base_dir)]
    assert main(["scan", *base, str(good)]) == 0
    assert main(["scan", *base, str(good), str(evil)]) == 1
    assert main(["scan", *base, str(good), str(junk)]) == 2
    assert main(["scan", *base, str(junk), str(evil)]) == 1
    out = capsys.readouterr().out
    assert "MALICIOUS" in out and "ERROR" in out


def test_cli_unknown_flag_prints_usage(capsys):
    assert main(["scan", "--bogus", "x"]) == 2
    assert "usage:" in capsys.readouterr().err


def test_cli_missing_base_is_usage_error(tmp_path, monkeypatch, capsys):
    monkeypatch.delenv("IATFORGE_BASE", raising=False)
    assert main(["scan", str(tmp_path / "x.exe")]) == 2
    assert "usage:" in capsys.readouterr().err


def test_cli_env_base_and_json(tmp_path, base_dir, monkeypatch, capsys):
    monkeypatch.setenv("IATFORGE_BASE", str(base_dir))
    evil = write(tmp_path, "evil.exe", EVIL)
    assert main(["scan", "--json", "--mode", "knn", str(evil)]) == 1
    doc = json.loads(capsys.readouterr().out)
    assert doc["schema"] == 1
    assert doc["results"][0]["final"] == "malware"
    assert "combi" not in doc["results"][0]


def test_cli_extract(tmp_path, capsys):
    path = write(tmp_path, "good.exe", GOOD)
    assert main(["extract", "--json", str(path)]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["schema"] == 1
    assert [(i["dll"], i["function"]) for i in doc["imports"]] == [
        ("kernel32.dll", "ExitProcess"),
        ("kernel32.dll", "GetTickCount"),
        ("kernel32.dll", "Sleep"),
    ]
    assert main(["extract", str(path)]) == 0
    assert "kernel32.dll!Sleep" in capsys.readouterr().out
    assert main(["extract", str(tmp_path / "missing.exe")]) == 2


def test_cli_db_commands(tmp_path, base_dir, capsys):
    base = ["--base", str(base_dir)]
    assert main(["db", "stats", *base, "--json"]) == 0
    stats = json.loads(capsys.readouterr().out)
    assert (stats["iat_malware"], stats["iat_benign"], stats["functions"]) == (2, 2, 8)

    (tmp_path / "bl.txt").write_text("# known bad\nevil.dll!Spread\nntdll.dll!NtQueueApcThread\n")
    assert main(["db", "blacklist", *base, str(tmp_path / "bl.txt")]) == 0
    (tmp_path / "bad.txt").write_text("no separator\n")
    assert main(["db", "blacklist", *base, str(tmp_path / "bad.txt")]) == 2

    assert main(["db", "prune", *base, "--keep", "0.5", "--score", "ig"]) == 0
    assert main(["db", "prune", *base, "--keep", "1.5"]) == 2
    capsys.readouterr()
    assert main(["db", "stats", *base, "--json"]) == 0
    stats = json.loads(capsys.readouterr().out)
    assert (stats["iat_malware"], stats["iat_benign"], stats["blacklisted"]) == (1, 1, 2)
    assert main(["db", "init", "--out", str(base_dir)]) == 2


def test_cli_train_absorbs_undetected(tmp_path, base_dir, capsys):
    novel = write(tmp_path, "novel.exe", imports_of("worm.dll", ["Dig", "Tunnel", "Hatch"]))
    known = write(tmp_path, "known.exe", EVIL)
    base = ["--base", str(base_dir)]
    assert main(["train", *base, "--epsilon", "0", str(novel), str(known)]) == 0
    assert "absorbed 1 of 2" in capsys.readouterr().out
    assert main(["scan", *base, "--mode", "knn", str(novel)]) == 1
    assert main(["train", *base, "--epsilon", "2", str(novel)]) == 2


def test_cli_eval(tmp_path, base_dir, capsys):
    write(tmp_path, "e.exe", EVIL)
    write(tmp_path, "g.exe", GOOD)
    truth = tmp_path / "truth.csv"
    truth.write_text("path,label\ne.exe,malware\ng.exe,benign\n")
    assert main(["eval", "--base", str(base_dir), "--truth", str(truth), "--json"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["schema"] == 1 and doc["true_positive_rate"] == 1.0 and doc["false_positive_rate"] == 0.0
    assert main(["eval", "--base", str(base_dir), "--truth", str(truth), "--sweep", "1,0.5"]) == 0
    assert "% of original base" in capsys.readouterr().out
    assert main(["eval", "--base", str(base_dir), "--truth", str(truth), "--sweep", "0"]) == 2


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "iatforge", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and "iatforge" in proc.stdout
