"""Base directory: registry, labeled IAT/EAT vectors, blacklist and combi files.

Layout::

    manifest.json
    registry.txt
    blacklist.iatv
    knn/iat/malware/000000.iatv ...   (and benign/, and knn/eat/...)
    combi/malware.iatb  benign.iatb  blacklist.iatb  binomial.iatb  trinomial.iatb

The table vectors are the source of truth; the combinatorial files are
derived from the IAT vectors and rewritten on every save.
"""

from __future__ import annotations

import json
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

from .combi import CombiBase
from .errors import IncompatibleRegistry, StoreFormatError
from .features import (
    Label,
    PairRegistry,
    Score,
    TableKind,
    TableVector,
    prune_base,
    to_bitvector,
    vectorize,
)
from .knn import TrainingBase
from .pipeline import Bases, Extraction
from .storage import (
    Role,
    dumps_base,
    dumps_registry,
    dumps_vector,
    loads_base,
    loads_registry,
    loads_vector,
)

MANIFEST = "manifest.json"
MANIFEST_SCHEMA = 1

PathLike = Union[str, Path]


@dataclass
class AddResult:
    added: int = 0
    duplicates: int = 0
    conflicts: list[str] = field(default_factory=list)


class Database:
    def __init__(
        self,
        registry: Optional[PairRegistry] = None,
        iat: Optional[TrainingBase] = None,
        eat: Optional[TrainingBase] = None,
        blacklist: Optional[TableVector] = None,
    ) -> None:
        self.registry = registry or PairRegistry()
        v = self.registry.version
        self.iat = iat if iat is not None else TrainingBase(TableKind.IAT, v)
        self.eat = eat if eat is not None else TrainingBase(TableKind.EAT, v)
        self.blacklist = blacklist if blacklist is not None else TableVector(TableKind.IAT, [], v)
        for base in (self.iat, self.eat, self.blacklist):
            if base.registry_version != v:
                raise IncompatibleRegistry(f"component built for v{base.registry_version}, registry is v{v}")
        self._combi: Optional[CombiBase] = None

    # -- derived views -------------------------------------------------------

    @property
    def combi(self) -> CombiBase:
        if self._combi is None:
            reg = self.registry
            self._combi = CombiBase.build(
                [to_bitvector(v, reg) for v in self.iat.malware],
                [to_bitvector(v, reg) for v in self.iat.benign],
                to_bitvector(self.blacklist, reg),
                universe_size=reg.universe_size,
                registry_version=reg.version,
            )
        return self._combi

    def bases(self, *, with_combi: bool = True) -> Bases:
        return Bases(self.registry, self.iat, self.eat, self.combi if with_combi else None)

    # -- mutation ------------------------------------------------------------

    def _retag(self) -> None:
        v = self.registry.version
        if self.iat.registry_version != v:
            self.iat = self.iat.retagged(v)
            self.eat = self.eat.retagged(v)
            self.blacklist = self.blacklist.retagged(v)
        self._combi = None

    def register(self, pairs: Iterable[tuple[str, str]]) -> None:
        """Register pairs without storing any vector (retags stored vectors)."""
        for dll, key in pairs:
            self.registry.register(dll, key)
        self._retag()

    def add_pairs(
        self,
        items: Sequence[tuple[Sequence[tuple[str, str]], Sequence[tuple[str, str]]]],
        label: Label,
        names: Optional[Sequence[str]] = None,
    ) -> AddResult:
        """Register and store ``(iat_pairs, eat_pairs)`` of several files under ``label``.

        Identical vectors are stored once; a vector already stored under the
        other label is reported as a conflict and skipped.
        """
        label = Label(label)
        for iat_pairs, eat_pairs in items:
            for dll, key in (*iat_pairs, *eat_pairs):
                self.registry.register(dll, key)
        self._retag()
        names = list(names) if names is not None else [f"#{i}" for i in range(len(items))]

        result = AddResult()
        sides = {TableKind.IAT: self.iat, TableKind.EAT: self.eat}
        new = {kind: {Label.MALWARE: list(b.malware), Label.BENIGN: list(b.benign)} for kind, b in sides.items()}
        for name, (iat_pairs, eat_pairs) in zip(names, items):
            for kind, pairs in ((TableKind.IAT, iat_pairs), (TableKind.EAT, eat_pairs)):
                vec = vectorize(pairs, self.registry, kind)
                if len(vec) == 0:
                    continue
                own = {v.key() for v in new[kind][label]}
                other = {v.key() for v in new[kind][label.other()]}
                if vec.key() in other:
                    result.conflicts.append(f"{name}: {kind.name} vector already stored as {label.other().value}")
                elif vec.key() in own:
                    result.duplicates += 1
                else:
                    new[kind][label].append(vec)
                    if kind is TableKind.IAT:
                        result.added += 1
        v = self.registry.version
        self.iat = TrainingBase(TableKind.IAT, v, new[TableKind.IAT][Label.MALWARE], new[TableKind.IAT][Label.BENIGN])
        self.eat = TrainingBase(TableKind.EAT, v, new[TableKind.EAT][Label.MALWARE], new[TableKind.EAT][Label.BENIGN])
        self._combi = None
        return result

    def add_extractions(self, extractions: Sequence[Extraction], label: Label, names: Optional[Sequence[str]] = None) -> AddResult:
        return self.add_pairs([(e.import_pairs(), e.export_pairs()) for e in extractions], label, names)

    def add_blacklist(self, pairs: Iterable[tuple[str, str]]) -> int:
        """Register the pairs and set their bits in the blacklist vector."""
        pairs = list(pairs)
        for dll, key in pairs:
            self.registry.register(dll, key)
        self._retag()
        extra = vectorize(pairs, self.registry, TableKind.IAT)
        merged = TableVector.from_ids([*self.blacklist.ids.tolist(), *extra.ids.tolist()], TableKind.IAT, self.registry.version)
        added = len(merged) - len(self.blacklist)
        self.blacklist = merged
        return added

    def pruned(self, keep_fraction: float, score: Score = "density") -> "Database":
        """A copy whose IAT and EAT bases keep only the best-scoring vectors per label."""
        v = self.registry.version
        sides = []
        for base in (self.iat, self.eat):
            items = base.labeled()
            has_both = base.malware and base.benign
            if items and (score == "density" or has_both):
                items = prune_base(items, keep_fraction, score)
            sides.append(TrainingBase.from_labeled(items, base.kind, v))
        return Database(self.registry, sides[0], sides[1], self.blacklist)

    def stats(self) -> dict[str, int]:
        return {
            "registry_version": self.registry.version,
            "dlls": self.registry.dll_count,
            "functions": self.registry.universe_size,
            "iat_malware": len(self.iat.malware),
            "iat_benign": len(self.iat.benign),
            "eat_malware": len(self.eat.malware),
            "eat_benign": len(self.eat.benign),
            "blacklisted": len(self.blacklist),
        }

    # -- persistence ---------------------------------------------------------

    def serialize(self) -> dict[str, bytes]:
        """Every file of the base directory, keyed by relative path."""
        files: dict[str, bytes] = {"registry.txt": dumps_registry(self.registry)}
        files["blacklist.iatv"] = dumps_vector(self.blacklist)
        knn: dict[str, dict[str, list[str]]] = {}
        for base in (self.iat, self.eat):
            kind = base.kind.name.lower()
            knn[kind] = {}
            for label, vectors in ((Label.MALWARE, base.malware), (Label.BENIGN, base.benign)):
                names = []
                for i, vec in enumerate(vectors):
                    rel = f"knn/{kind}/{label.value}/{i:06d}.iatv"
                    files[rel] = dumps_vector(vec)
                    names.append(rel)
                knn[kind][label.value] = names

        combi = self.combi
        n = combi.universe_size
        files["combi/malware.iatb"] = dumps_base(Role.MALWARE_SET, n, combi.malware_vectors)
        files["combi/benign.iatb"] = dumps_base(Role.BENIGN_SET, n, combi.benign_vectors)
        files["combi/blacklist.iatb"] = dumps_base(Role.BLACKLIST, n, [combi.blacklist])
        files["combi/binomial.iatb"] = dumps_base(Role.BINOMIAL_UNION, n, [combi.mbs, combi.gbs])
        files["combi/trinomial.iatb"] = dumps_base(Role.TRINOMIAL_UNION, n, [combi.mts, combi.gts])

        manifest = {
            "schema": MANIFEST_SCHEMA,
            "registry": "registry.txt",
            "registry_version": self.registry.version,
            "universe_size": self.registry.universe_size,
            "blacklist": "blacklist.iatv",
            "knn": knn,
            "combi": {
                "malware": "combi/malware.iatb",
                "benign": "combi/benign.iatb",
                "blacklist": "combi/blacklist.iatb",
                "binomial": "combi/binomial.iatb",
                "trinomial": "combi/trinomial.iatb",
            },
        }
        files[MANIFEST] = (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode("utf-8")
        return files

    def byte_size(self) -> int:
        return sum(len(b) for b in self.serialize().values())

    def save(self, path: PathLike) -> None:
        root = Path(path)
        root.mkdir(parents=True, exist_ok=True)
        for sub in ("knn", "combi"):
            if (root / sub).is_dir():
                shutil.rmtree(root / sub)
        for rel, data in self.serialize().items():
            target = root / rel
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_bytes(data)

    @classmethod
    def create(cls, path: PathLike) -> "Database":
        root = Path(path)
        if (root / MANIFEST).exists():
            raise FileExistsError(f"{root} already holds a base")
        db = cls()
        db.save(root)
        return db

    @classmethod
    def load(cls, path: PathLike) -> "Database":
        root = Path(path)
        try:
            manifest = json.loads((root / MANIFEST).read_text("utf-8"))
        except json.JSONDecodeError as exc:
            raise StoreFormatError(f"unreadable manifest: {exc}") from None
        if manifest.get("schema") != MANIFEST_SCHEMA:
            raise StoreFormatError(f"unsupported manifest schema {manifest.get('schema')!r}")
        registry = loads_registry((root / manifest["registry"]).read_bytes())
        version = manifest["registry_version"]
        if registry.version != version or registry.universe_size != manifest["universe_size"]:
            raise IncompatibleRegistry("registry file does not match the manifest")

        def vector(rel: str) -> TableVector:
            vec = loads_vector((root / rel).read_bytes())
            if vec.registry_version != version:
                raise IncompatibleRegistry(f"{rel} built for registry v{vec.registry_version}, base is v{version}")
            return vec

        sides = {}
        for kind in (TableKind.IAT, TableKind.EAT):
            entry = manifest["knn"][kind.name.lower()]
            sides[kind] = TrainingBase(
                kind,
                version,
                [vector(rel) for rel in entry["malware"]],
                [vector(rel) for rel in entry["benign"]],
            )
        db = cls(registry, sides[TableKind.IAT], sides[TableKind.EAT], vector(manifest["blacklist"]))
        db._combi = _load_combi(root, manifest["combi"], registry)
        return db


def _load_combi(root: Path, files: dict[str, str], registry: PairRegistry) -> CombiBase:
    n, v = registry.universe_size, registry.version
    loaded = {}
    for key, role in (
        ("malware", Role.MALWARE_SET),
        ("benign", Role.BENIGN_SET),
        ("blacklist", Role.BLACKLIST),
        ("binomial", Role.BINOMIAL_UNION),
        ("trinomial", Role.TRINOMIAL_UNION),
    ):
        got_role, universe, vectors = loads_base((root / files[key]).read_bytes(), v)
        if got_role is not role or universe != n:
            raise IncompatibleRegistry(f"{files[key]}: role {got_role.name} over {universe} functions")
        loaded[key] = vectors
    if len(loaded["blacklist"]) != 1 or len(loaded["binomial"]) != 2 or len(loaded["trinomial"]) != 2:
        raise StoreFormatError("combinatorial base files hold the wrong number of vectors")
    return CombiBase(
        loaded["blacklist"][0],
        tuple(loaded["malware"]),
        tuple(loaded["benign"]),
        *loaded["binomial"],
        *loaded["trinomial"],
        universe_size=n,
        registry_version=v,
    )

