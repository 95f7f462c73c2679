"""Build small, valid PE images from a declarative description.

Used by the test-suite, the fuzz harness and the demos: the real-world corpus
is not redistributable, so every extraction test is anchored on bytes produced
here.  The image has a single ``.rdata`` section holding the import
descriptors, thunk arrays, hint/name entries, DLL names and export tables.

>>> spec = FixtureSpec(imports=[FixtureImport("KERNEL32.dll", [("ExitProcess", 42)])])
>>> data = build_pe(spec)
>>> data[:2]
b'MZ'
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional, Union

from .pe_format import IMAGE_FILE_DLL, PE32_MAGIC, PE32_PLUS_MAGIC

FILE_ALIGNMENT = 0x200
SECTION_ALIGNMENT = 0x1000
HEADERS_SIZE = 0x400
SECTION_RVA = 0x1000
E_LFANEW = 0x80

ImportEntry = Union[tuple[str, int], int]


@dataclass
class FixtureImport:
    """One imported DLL.  Entries are ``(name, hint)`` tuples or bare ordinals."""

    dll: str
    entries: list[ImportEntry]
    use_original_first_thunk: bool = True


@dataclass
class FixtureExport:
    dll: str
    named: list[tuple[str, int]]
    number_of_functions: Optional[int] = None
    ordinal_base: int = 1

    def function_count(self) -> int:
        if self.number_of_functions is not None:
            return self.number_of_functions
        return max((o - self.ordinal_base + 1 for _, o in self.named), default=0)


@dataclass
class FixtureSpec:
    imports: list[FixtureImport] = field(default_factory=list)
    exports: Optional[FixtureExport] = None
    pe32_plus: bool = False
    is_dll: bool = False
    image_base: Optional[int] = None
    section_name: bytes = b".rdata"
    # True keeps an import directory (pointing at a lone terminator) even when
    # ``imports`` is empty; False zeroes the directory entry instead.
    import_dir_when_empty: bool = False


class _Blob:
    def __init__(self) -> None:
        self.buf = bytearray()

    def alloc(self, size: int, align: int = 4) -> int:
        pad = (-len(self.buf)) % align
        self.buf += bytes(pad)
        rva = SECTION_RVA + len(self.buf)
        self.buf += bytes(size)
        return rva

    def put(self, data: bytes, align: int = 2) -> int:
        rva = self.alloc(len(data), align)
        self.patch(rva, data)
        return rva

    def patch(self, rva: int, data: bytes) -> None:
        off = rva - SECTION_RVA
        self.buf[off : off + len(data)] = data

    def pack(self, rva: int, fmt: str, *values: int) -> None:
        self.patch(rva, struct.pack(fmt, *values))


def _layout_imports(blob: _Blob, spec: FixtureSpec) -> tuple[int, int]:
    if not spec.imports and not spec.import_dir_when_empty:
        return 0, 0
    thunk_size = 8 if spec.pe32_plus else 4
    thunk_fmt = "<Q" if spec.pe32_plus else "<I"
    ordinal_flag = 1 << (thunk_size * 8 - 1)

    n = len(spec.imports)
    desc_rva = blob.alloc(20 * (n + 1))
    for i, imp in enumerate(spec.imports):
        ilt = blob.alloc(thunk_size * (len(imp.entries) + 1), thunk_size)
        iat = blob.alloc(thunk_size * (len(imp.entries) + 1), thunk_size)
        for j, entry in enumerate(imp.entries):
            if isinstance(entry, int):
                value = ordinal_flag | (entry & 0xFFFF)
            else:
                name, hint = entry
                value = blob.put(struct.pack("<H", hint) + name.encode("latin-1") + b"\x00")
            blob.pack(ilt + j * thunk_size, thunk_fmt, value)
            blob.pack(iat + j * thunk_size, thunk_fmt, value)
        name_rva = blob.put(imp.dll.encode("latin-1") + b"\x00")
        oft = ilt if imp.use_original_first_thunk else 0
        blob.pack(desc_rva + 20 * i, "<IIIII", oft, 0, 0, name_rva, iat)
    return desc_rva, 20 * (n + 1)


def _layout_exports(blob: _Blob, exp: Optional[FixtureExport]) -> tuple[int, int]:
    if exp is None:
        return 0, 0
    start = len(blob.buf)
    n_functions = exp.function_count()
    # Name arrays are sorted lexically in real images; keep that property.
    named = sorted(exp.named, key=lambda item: item[0].encode("latin-1"))
    dir_rva = blob.alloc(40)
    functions_rva = blob.alloc(4 * n_functions) if n_functions else 0
    names_rva = blob.alloc(4 * len(named)) if named else 0
    ordinals_rva = blob.alloc(2 * len(named), 2) if named else 0
    for i in range(n_functions):
        # dummy code address inside the section
        blob.pack(functions_rva + 4 * i, "<I", SECTION_RVA + 0x10 * (i + 1))
    for i, (name, ordinal) in enumerate(named):
        blob.pack(names_rva + 4 * i, "<I", blob.put(name.encode("latin-1") + b"\x00"))
        blob.pack(ordinals_rva + 2 * i, "<H", (ordinal - exp.ordinal_base) & 0xFFFF)
    dll_rva = blob.put(exp.dll.encode("latin-1") + b"\x00")
    blob.pack(
        dir_rva,
        "<IIHHIIIIIII",
        0,
        0,
        0,
        0,
        dll_rva,
        exp.ordinal_base,
        n_functions,
        len(named),
        functions_rva,
        names_rva,
        ordinals_rva,
    )
    return dir_rva, len(blob.buf) - start


def build_pe(spec: FixtureSpec) -> bytes:
    """Serialise ``spec`` into a loadable-looking PE32 or PE32+ image."""
    blob = _Blob()
    import_rva, import_size = _layout_imports(blob, spec)
    export_rva, export_size = _layout_exports(blob, spec.exports)
    if not blob.buf:
        blob.alloc(16)

    raw_size = len(blob.buf) + (-len(blob.buf)) % FILE_ALIGNMENT
    virtual_size = len(blob.buf)

    opt_size = 0xF0 if spec.pe32_plus else 0xE0
    image_base = spec.image_base
    if image_base is None:
        image_base = 0x140000000 if spec.pe32_plus else 0x400000
    characteristics = 0x0002 | (0x0020 if spec.pe32_plus else 0x0100)
    if spec.is_dll:
        characteristics |= IMAGE_FILE_DLL

    header = bytearray(HEADERS_SIZE)
    header[0:2] = b"MZ"
    struct.pack_into("<I", header, 0x3C, E_LFANEW)
    header[E_LFANEW : E_LFANEW + 4] = b"PE\x00\x00"
    coff = E_LFANEW + 4
    machine = 0x8664 if spec.pe32_plus else 0x14C
    struct.pack_into("<HHIIIHH", header, coff, machine, 1, 0, 0, 0, opt_size, characteristics)

    opt = coff + 20
    size_of_image = SECTION_RVA + virtual_size + (-virtual_size) % SECTION_ALIGNMENT
    if spec.pe32_plus:
        struct.pack_into("<H", header, opt, PE32_PLUS_MAGIC)
        struct.pack_into("<Q", header, opt + 24, image_base)
        dirs = opt + 112
        struct.pack_into("<I", header, opt + 108, 16)
    else:
        struct.pack_into("<H", header, opt, PE32_MAGIC)
        struct.pack_into("<I", header, opt + 28, image_base)
        dirs = opt + 96
        struct.pack_into("<I", header, opt + 92, 16)
    struct.pack_into("<II", header, opt + 32, SECTION_ALIGNMENT, FILE_ALIGNMENT)
    struct.pack_into("<II", header, opt + 56, size_of_image, HEADERS_SIZE)
    struct.pack_into("<II", header, dirs, export_rva, export_size)
    struct.pack_into("<II", header, dirs + 8, import_rva, import_size)

    sh = opt + opt_size
    header[sh : sh + 8] = spec.section_name[:8].ljust(8, b"\x00")
    struct.pack_into("<IIII", header, sh + 8, virtual_size, SECTION_RVA, raw_size, HEADERS_SIZE)
    struct.pack_into("<I", header, sh + 36, 0x40000040)

    body = bytes(blob.buf) + bytes(raw_size - len(blob.buf))
    return bytes(header) + body
