"""Build two small PE images in memory and walk their import/export tables.

The second image is a DLL whose export ordinals start at 2, which the
structural check flags as a decisive finding.

    python demos/extract_fixture.py
"""

from __future__ import annotations

from iatforge.pe_fixtures import FixtureExport, FixtureImport, FixtureSpec, build_pe
from iatforge.pipeline import extract


def show(title: str, spec: FixtureSpec) -> None:
    ext = extract(build_pe(spec))
    print(f"== {title} ({'PE32+' if ext.layout.is_pe32_plus else 'PE32'}, {len(ext.layout.sections)} section)")
    for pair in ext.imports:
        hint = "" if pair.hint is None else f"  hint={pair.hint}"
        print(f"  import {pair.dll_name}!{pair.function_key}{hint}")
    for entry in ext.exports:
        print(f"  export #{entry.ordinal} {entry.name or '(no name)'}")
    f = ext.findings
    print(f"  empty_iat={f.empty_iat} ordinal_rule_violation={f.ordinal_rule_violation} decisive={f.decisive}")
    print()


if __name__ == "__main__":
    show(
        "dropper.exe",
        FixtureSpec(
            imports=[
                FixtureImport("C:\\Windows\\System32\\KERNEL32.dll", [("VirtualAlloc", 0), ("CreateThread", 1)]),
                FixtureImport("WS2_32.dll", [("connect", 0), 115]),  # 115: ordinal-only import
            ]
        ),
    )
    show(
        "odd.dll",
        FixtureSpec(
            imports=[FixtureImport("kernel32.dll", [("Sleep", 0)])],
            is_dll=True,
            exports=FixtureExport("odd.dll", [("Start", 2), ("Stop", 3)], ordinal_base=2),
            pe32_plus=True,
        ),
    )
    show("no-imports.exe", FixtureSpec())
