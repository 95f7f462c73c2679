"""Drive the ``iatforge`` command line over fixture files in a scratch folder.

Equivalent shell session (paths shortened)::

    iatforge db init --out base
    iatforge db add --base base --label malware m*.exe
    iatforge db add --base base --label benign g*.exe
    iatforge scan --base base probe.exe

    python demos/cli_walkthrough.py
"""

from __future__ import annotations

import tempfile
from pathlib import Path

from iatforge.cli import main
from iatforge.pe_fixtures import FixtureImport, FixtureSpec, build_pe


def exe(folder: Path, name: str, dll: str, functions) -> str:
    path = folder / name
    path.write_bytes(build_pe(FixtureSpec(imports=[FixtureImport(dll, [(f, 0) for f in functions])])))
    return str(path)


def run(*argv: str) -> int:
    print(f"$ iatforge {' '.join(Path(a).name if '/' in a else a for a in argv)}")
    code = main(list(argv))
    print(f"[exit {code}]\n")
    return code


with tempfile.TemporaryDirectory() as tmp:
    root = Path(tmp)
    base = str(root / "base")
    mal = [exe(root, f"m{i}.exe", "evil.dll", ["Inject", "Hide", f"Stage{i}"]) for i in range(3)]
    good = [exe(root, f"g{i}.exe", "kernel32.dll", ["ExitProcess", "Sleep", f"Helper{i}"]) for i in range(3)]
    probe = exe(root, "probe.exe", "evil.dll", ["Inject", "Hide", "Stage9"])
    clean = exe(root, "clean.exe", "kernel32.dll", ["ExitProcess", "Sleep", "Helper0"])

    run("db", "init", "--out", base)
    run("db", "add", "--base", base, "--label", "malware", *mal)
    run("db", "add", "--base", base, "--label", "benign", *good)
    run("db", "stats", "--base", base)
    run("scan", "--base", base, clean)
    run("scan", "--base", base, "--mode", "knn", probe, clean)
    (root / "truth.csv").write_text("path,label\nprobe.exe,malware\nclean.exe,benign\n")
    run("eval", "--base", base, "--truth", str(root / "truth.csv"), "--mode", "knn")
