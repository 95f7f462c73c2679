"""MZ-PE parsing: headers, section map, import/export walks, structural checks.

Everything here is a pure function over an immutable ``bytes`` object.  Every
read goes through :class:`_Reader`, which raises :class:`OutOfBounds` instead
of slicing past the end of the buffer.
"""

from __future__ import annotations

import struct
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence, Union

from .errors import (
    Cyclic,
    InconsistentCounts,
    MalformedHeader,
    MissingDirectory,
    OutOfBounds,
)

DOS_MAGIC = b"MZ"
NT_SIGNATURE = b"PE\x00\x00"
PE32_MAGIC = 0x10B
PE32_PLUS_MAGIC = 0x20B

IMAGE_FILE_DLL = 0x2000

DIR_EXPORT = 0
DIR_IMPORT = 1

MAX_IMPORT_DESCRIPTORS = 4096
MAX_THUNKS_PER_DLL = 65536
MAX_NAME_LENGTH = 4096

_DESCRIPTOR_SIZE = 20
_SECTION_HEADER_SIZE = 40
_EXPORT_DIRECTORY_SIZE = 40


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Section:
    name: bytes
    virtual_address: int
    virtual_size: int
    raw_offset: int
    raw_size: int

    @property
    def display_name(self) -> str:
        return self.name.rstrip(b"\x00").decode("latin-1")


@dataclass(frozen=True)
class DataDirectory:
    rva: int = 0
    size: int = 0

    @property
    def present(self) -> bool:
        return self.rva != 0 and self.size != 0


@dataclass(frozen=True)
class PeLayout:
    is_pe32_plus: bool
    image_base: int
    sections: tuple[Section, ...]
    import_dir: DataDirectory
    export_dir: DataDirectory
    characteristics: int = 0
    file_size: int = 0

    @property
    def is_dll(self) -> bool:
        return bool(self.characteristics & IMAGE_FILE_DLL)


@dataclass(frozen=True)
class Name:
    value: str


@dataclass(frozen=True)
class Ordinal:
    value: int


FunctionRef = Union[Name, Ordinal]


@dataclass(frozen=True)
class ImportedPair:
    dll_name: str
    func: FunctionRef
    hint: Optional[int] = None

    def __post_init__(self) -> None:
        if not self.dll_name:
            raise ValueError("dll_name must be non-empty")
        if not isinstance(self.func, (Name, Ordinal)):
            raise TypeError("func must be Name or Ordinal")

    @property
    def function_key(self) -> str:
        return function_key(self.func)


@dataclass(frozen=True)
class ExportEntry:
    name: Optional[str]
    ordinal: int

    @property
    def function_key(self) -> str:
        if self.name is not None:
            return self.name
        return f"#{self.ordinal}"


@dataclass(frozen=True)
class StructuralFindings:
    has_iat: bool
    has_eat: bool
    empty_iat: bool
    ordinal_rule_violation: bool
    hint_rule_warning: bool
    malformed: tuple[str, ...] = field(default_factory=tuple)

    @property
    def decisive(self) -> bool:
        """True when a finding alone is enough to call the file malicious."""
        return self.empty_iat or self.ordinal_rule_violation


def function_key(func: FunctionRef) -> str:
    """Registry key of an imported function: its name, or ``#<ordinal>``."""
    if isinstance(func, Name):
        return func.value
    return f"#{func.value}"


def normalize_dll_name(raw: str) -> str:
    base = raw.replace("\\", "/").rsplit("/", 1)[-1]
    return base.strip().lower()


# ---------------------------------------------------------------------------
# Bounded reads
# ---------------------------------------------------------------------------


class _Reader:
    __slots__ = ("data", "size")

    def __init__(self, data: bytes) -> None:
        self.data = data
        self.size = len(data)

    def _check(self, offset: int, length: int, what: str) -> None:
        if offset < 0 or length < 0 or offset + length > self.size:
            raise OutOfBounds(
                f"{what}: [{offset:#x}, {offset + length:#x}) outside file of {self.size:#x} bytes"
            )

    def u16(self, offset: int, what: str = "u16") -> int:
        self._check(offset, 2, what)
        return struct.unpack_from("<H", self.data, offset)[0]

    def u32(self, offset: int, what: str = "u32") -> int:
        self._check(offset, 4, what)
        return struct.unpack_from("<I", self.data, offset)[0]

    def u64(self, offset: int, what: str = "u64") -> int:
        self._check(offset, 8, what)
        return struct.unpack_from("<Q", self.data, offset)[0]

    def raw(self, offset: int, length: int, what: str = "bytes") -> bytes:
        self._check(offset, length, what)
        return self.data[offset : offset + length]

    def cstring(self, offset: int, what: str = "string") -> str:
        self._check(offset, 1, what)
        end = self.data.find(b"\x00", offset, min(self.size, offset + MAX_NAME_LENGTH + 1))
        if end < 0:
            raise OutOfBounds(f"{what}: unterminated string at {offset:#x}")
        return self.data[offset:end].decode("latin-1")


def rva_to_offset(layout: PeLayout, rva: int) -> int:
    """Map an RVA to a file offset by scanning the section table.

    RVAs below the first section's virtual address map to the same offset
    (they point into the headers).
    """
    if rva < 0:
        raise OutOfBounds(f"negative rva {rva}")
    first_va = min((s.virtual_address for s in layout.sections), default=None)
    if first_va is None or rva < first_va:
        if rva >= layout.file_size:
            raise OutOfBounds(f"header rva {rva:#x} past end of file")
        return rva
    for s in layout.sections:
        span = s.virtual_size or s.raw_size
        if s.virtual_address <= rva < s.virtual_address + span:
            delta = rva - s.virtual_address
            if delta >= s.raw_size:
                raise OutOfBounds(f"rva {rva:#x} lies in uninitialised part of {s.display_name!r}")
            return s.raw_offset + delta
    raise OutOfBounds(f"rva {rva:#x} not covered by any section")


# ---------------------------------------------------------------------------
# Header parsing
# ---------------------------------------------------------------------------


def parse_pe(data: bytes) -> PeLayout:
    """Parse DOS/NT headers, the section table and the import/export directories."""
    data = bytes(data)
    r = _Reader(data)
    if r.size < 0x40 or data[:2] != DOS_MAGIC:
        raise MalformedHeader("missing MZ signature")
    e_lfanew = r.u32(0x3C)
    if e_lfanew + 24 > r.size:
        raise MalformedHeader("truncated NT headers")
    if data[e_lfanew : e_lfanew + 4] != NT_SIGNATURE:
        raise MalformedHeader("missing PE signature")

    coff = e_lfanew + 4
    n_sections = r.u16(coff + 2)
    opt_size = r.u16(coff + 16)
    characteristics = r.u16(coff + 18)
    opt = coff + 20
    if opt + 2 > r.size or opt_size < 2:
        raise MalformedHeader("truncated optional header")
    magic = r.u16(opt)
    if magic == PE32_MAGIC:
        is_plus = False
        fixed = 96
    elif magic == PE32_PLUS_MAGIC:
        is_plus = True
        fixed = 112
    else:
        raise MalformedHeader(f"optional header magic {magic:#x}")
    if opt_size < fixed or opt + opt_size > r.size:
        raise MalformedHeader("truncated optional header")

    image_base = r.u64(opt + 24) if is_plus else r.u32(opt + 28)
    n_dirs = r.u32(opt + fixed - 4)
    dir_base = opt + fixed
    available = (opt_size - fixed) // 8
    n_dirs = min(n_dirs, available, 16)

    def directory(index: int) -> DataDirectory:
        if index >= n_dirs:
            return DataDirectory()
        off = dir_base + index * 8
        return DataDirectory(r.u32(off), r.u32(off + 4))

    table = opt + opt_size
    if table + n_sections * _SECTION_HEADER_SIZE > r.size:
        raise MalformedHeader("truncated section table")
    sections = []
    for i in range(n_sections):
        off = table + i * _SECTION_HEADER_SIZE
        name = r.raw(off, 8)
        vsize, va, raw_size, raw_off = struct.unpack_from("<IIII", data, off + 8)
        if raw_size and raw_off + raw_size > r.size:
            raise OutOfBounds(f"section {i} raw data past end of file")
        sections.append(Section(name, va, vsize, raw_off, raw_size))

    spans = sorted((s.raw_offset, s.raw_offset + s.raw_size) for s in sections if s.raw_size)
    for (_, end), (start, _) in zip(spans, spans[1:]):
        if start < end:
            raise MalformedHeader("overlapping section raw ranges")

    return PeLayout(
        is_pe32_plus=is_plus,
        image_base=image_base,
        sections=tuple(sections),
        import_dir=directory(DIR_IMPORT),
        export_dir=directory(DIR_EXPORT),
        characteristics=characteristics,
        file_size=r.size,
    )


# ---------------------------------------------------------------------------
# Import / export walks
# ---------------------------------------------------------------------------


def extract_imports(layout: PeLayout, data: bytes) -> list[ImportedPair]:
    """Walk IMAGE_IMPORT_DESCRIPTORs and their thunk arrays in file order."""
    if not layout.import_dir.present:
        raise MissingDirectory("import directory absent")
    r = _Reader(bytes(data))
    thunk_size = 8 if layout.is_pe32_plus else 4
    ordinal_flag = 1 << (thunk_size * 8 - 1)
    read_thunk = r.u64 if layout.is_pe32_plus else r.u32

    pairs: list[ImportedPair] = []
    desc_rva = layout.import_dir.rva
    for n_desc in range(MAX_IMPORT_DESCRIPTORS + 1):
        if n_desc == MAX_IMPORT_DESCRIPTORS:
            raise Cyclic(f"more than {MAX_IMPORT_DESCRIPTORS} import descriptors")
        off = rva_to_offset(layout, desc_rva + n_desc * _DESCRIPTOR_SIZE)
        desc = r.raw(off, _DESCRIPTOR_SIZE, "import descriptor")
        if desc == bytes(_DESCRIPTOR_SIZE):
            break
        original_first_thunk, _, _, name_rva, first_thunk = struct.unpack("<IIIII", desc)
        dll = normalize_dll_name(r.cstring(rva_to_offset(layout, name_rva), "dll name"))
        if not dll:
            raise MalformedHeader(f"empty dll name in import descriptor {n_desc}")
        thunk_rva = original_first_thunk or first_thunk
        if thunk_rva == 0:
            raise MalformedHeader(f"import descriptor {n_desc} has no thunk array")

        for n_thunk in range(MAX_THUNKS_PER_DLL + 1):
            if n_thunk == MAX_THUNKS_PER_DLL:
                raise Cyclic(f"more than {MAX_THUNKS_PER_DLL} thunks for {dll}")
            value = read_thunk(rva_to_offset(layout, thunk_rva + n_thunk * thunk_size), "thunk")
            if value == 0:
                break
            if value & ordinal_flag:
                pairs.append(ImportedPair(dll, Ordinal(value & 0xFFFF)))
                continue
            hint_off = rva_to_offset(layout, value & 0x7FFFFFFF)
            hint = r.u16(hint_off, "hint")
            name = r.cstring(hint_off + 2, "import name")
            pairs.append(ImportedPair(dll, Name(name), hint))
    return pairs


def extract_exports(layout: PeLayout, data: bytes) -> tuple[str, list[ExportEntry]]:
    """Read the export directory.

    Named entries come from the parallel AddressOfNames/AddressOfNameOrdinals
    arrays; every function slot not claimed by a name follows as an
    ordinal-only entry.  Ordinals are reported biased by the directory's base.
    """
    if not layout.export_dir.present:
        raise MissingDirectory("export directory absent")
    r = _Reader(bytes(data))
    off = rva_to_offset(layout, layout.export_dir.rva)
    (
        _characteristics,
        _timestamp,
        _major,
        _minor,
        name_rva,
        base,
        n_functions,
        n_names,
        functions_rva,
        names_rva,
        ordinals_rva,
    ) = struct.unpack("<IIHHIIIIIII", r.raw(off, _EXPORT_DIRECTORY_SIZE, "export directory"))

    if n_names > n_functions:
        raise InconsistentCounts(f"NumberOfNames {n_names} > NumberOfFunctions {n_functions}")
    if n_functions and base + n_functions - 1 > 0xFFFF:
        raise InconsistentCounts(f"ordinals {base}..{base + n_functions - 1} do not fit in 16 bits")
    dll = normalize_dll_name(r.cstring(rva_to_offset(layout, name_rva), "export dll name")) if name_rva else ""

    if n_functions:
        _check_array(layout, r, functions_rva, n_functions, 4, "AddressOfFunctions")
    if n_names:
        names_off = _check_array(layout, r, names_rva, n_names, 4, "AddressOfNames")
        ords_off = _check_array(layout, r, ordinals_rva, n_names, 2, "AddressOfNameOrdinals")

    entries: list[ExportEntry] = []
    claimed: set[int] = set()
    for i in range(n_names):
        index = r.u16(ords_off + 2 * i)
        if index >= n_functions:
            raise InconsistentCounts(f"name ordinal index {index} >= NumberOfFunctions {n_functions}")
        name = r.cstring(rva_to_offset(layout, r.u32(names_off + 4 * i)), "export name")
        claimed.add(index)
        entries.append(ExportEntry(name, index + base))
    for index in range(n_functions):
        if index not in claimed:
            entries.append(ExportEntry(None, index + base))
    return dll, entries


def _check_array(layout: PeLayout, r: _Reader, rva: int, count: int, width: int, what: str) -> int:
    start = rva_to_offset(layout, rva)
    end = rva_to_offset(layout, rva + count * width - 1)
    if end - start != count * width - 1:
        raise OutOfBounds(f"{what} spans non-contiguous sections")
    r._check(start, count * width, what)
    return start


# ---------------------------------------------------------------------------
# Structural rules
# ---------------------------------------------------------------------------


def ordinals_well_formed(ordinals: Iterable[int]) -> bool:
    """True iff the multiset of ordinals is exactly {1, ..., N}."""
    ordered = sorted(ordinals)
    return ordered == list(range(1, len(ordered) + 1))


def structural_check(
    layout: PeLayout,
    imports: Sequence[ImportedPair],
    exports: Sequence[ExportEntry],
    malformed: Iterable[str] = (),
) -> StructuralFindings:
    has_iat = len(imports) > 0
    empty_iat = not has_iat and not layout.is_dll

    per_dll = Counter(p.dll_name for p in imports)
    hints = defaultdict(list)
    for p in imports:
        if p.hint is not None:
            hints[p.dll_name].append(p.hint)
    hint_warning = any(h >= per_dll[dll] for dll, hs in hints.items() for h in hs)

    return StructuralFindings(
        has_iat=has_iat,
        has_eat=layout.export_dir.present,
        empty_iat=empty_iat,
        ordinal_rule_violation=bool(exports) and not ordinals_well_formed(e.ordinal for e in exports),
        hint_rule_warning=hint_warning,
        malformed=tuple(malformed),
    )
