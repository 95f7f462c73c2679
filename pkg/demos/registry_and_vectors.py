"""Pair identifiers, table vectors, function bitvectors and the on-disk formats.

    python demos/registry_and_vectors.py
"""

from __future__ import annotations

import tempfile
from pathlib import Path

from iatforge.features import (
    PairRegistry,
    TableKind,
    build_combination_vector,
    to_bitvector,
    vectorize,
)
from iatforge.storage import Role, load_base, load_vector, save_base, save_registry, save_vector

reg = PairRegistry()
functions = ["CreateFileA", "ReadFile", "WriteFile", "CloseHandle", "VirtualAlloc", "LoadLibraryA", "GetProcAddress"]
for name in functions:
    reg.register("kernel32.dll", name)
print(f"registry version {reg.version}, universe {reg.universe_size} functions")

# functions 1, 2 and 5 of the seven: bits {0, 1, 4}
sample = [("kernel32.dll", "CreateFileA"), ("kernel32.dll", "ReadFile"), ("kernel32.dll", "VirtualAlloc")]
vec = vectorize(sample, reg, TableKind.IAT)
fbv = to_bitvector(vec, reg)
print(f"table vector ids {vec.ids.tolist()}")
print(f"function bitvector {int(fbv)} = 0b{int(fbv):b}")

pairs = build_combination_vector(fbv, 2)
triples = build_combination_vector(fbv, 3)
print(f"pair positions {pairs.positions.tolist()} of {pairs.length} -> integer {pairs.to_int()}")
print(f"triple positions {triples.positions.tolist()} of {triples.length}")

# a second DLL gets the next 20-bit dll id; its functions count from zero again
pid = reg.register("user32.dll", "MessageBoxA")
print(f"user32.dll!MessageBoxA -> {pid!r}: dll_id={pid.dll_id}, func_id={pid.func_id}, value {int(pid):#x}")
vec = vectorize([*sample, ("user32.dll", "MessageBoxA")], reg, TableKind.IAT)
fbv = to_bitvector(vec, reg)

with tempfile.TemporaryDirectory() as tmp:
    root = Path(tmp)
    save_registry(reg, root / "registry.txt")
    save_vector(vec, root / "sample.iatv")
    save_base(Role.MALWARE_SET, reg.universe_size, [fbv], root / "malware.iatb")
    print()
    print((root / "registry.txt").read_text(), end="")
    print(f"sample.iatv: {(root / 'sample.iatv').stat().st_size} bytes, reloads equal: {load_vector(root / 'sample.iatv') == vec}")
    role, n, back = load_base(root / "malware.iatb", reg.version)
    print(f"malware.iatb: role {role.name}, universe {n}, reloads equal: {back == [fbv]}")
