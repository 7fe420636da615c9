"""Ontology relations between an extra taxonomy and the source taxonomy.

A relation answers one question per ground-truth pixel: given the extra
dataset's label, which source classes may the pseudo-label take?  It is
stored in that direction only (extra class -> allowed source classes).

File format (``.ont``)::

    ontology <extra-taxonomy> -> <source-taxonomy>
    map <extra-class> -> <source-class>[, <source-class>]*
    exclude <source-class>
    fallback <error|void|unconstrained>

``map void -> ...`` narrows the row used for void ground-truth pixels.
Repeated ``map`` lines for one class union their right-hand sides.
"""

from __future__ import annotations

import enum
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ParseError, ValidationError
from .taxonomy import VOID_ID, Taxonomy, decode_text, normalize_name

_HEADER = re.compile(r"\s*ontology\s+(?P<extra>\S+?)\s*->\s*(?P<source>\S+)\s*\Z")
_MAP = re.compile(r"\s*map\s+(?P<lhs>\S+?)\s*->(?P<rhs>.*)\Z")


class FallbackPolicy(enum.Enum):
    ERROR = "error"
    VOID = "void"
    UNCONSTRAINED = "unconstrained"

    @classmethod
    def parse(cls, text: str) -> FallbackPolicy:
        try:
            return cls(text.lower())
        except ValueError:
            raise ValueError(f"unknown fallback policy {text!r}; expected error, void or unconstrained") from None


@dataclass(frozen=True)
class OntologyRelation:
    """Extra class id (or ``VOID_ID`` for the void row) -> allowed source ids."""

    extra: Taxonomy
    source: Taxonomy
    entries: dict[int, frozenset[int]]
    excluded_source: frozenset[int] = frozenset()
    default_fallback: FallbackPolicy = FallbackPolicy.VOID

    @property
    def extra_taxonomy(self) -> str:
        return self.extra.name

    @property
    def source_taxonomy(self) -> str:
        return self.source.name

    def allowed(self, extra_id: int) -> frozenset[int]:
        """Mapped source classes for one extra class, before exclusions."""
        return self.entries.get(extra_id, frozenset())


def _strip_comment(line: str) -> str:
    pos = line.find("#")
    return line if pos < 0 else line[:pos]


def parse_ontology(
    text: str | bytes,
    extra: Taxonomy,
    source: Taxonomy,
    *,
    strict: bool = True,
    source_name: str | None = None,
) -> OntologyRelation:
    """Parse an ``.ont`` document against its two taxonomies.

    With ``strict=False`` a class that is both mapped and excluded is kept
    in the relation so that :func:`validate_ontology` can report it.
    """
    text = decode_text(text, source_name)
    entries: dict[int, set[int]] = {}
    excluded: dict[int, tuple[int, int]] = {}
    fallback: FallbackPolicy | None = None
    header_seen = False

    for lineno, raw in enumerate(text.splitlines(), 1):
        line = _strip_comment(raw)
        stripped = line.strip()
        if not stripped:
            continue
        head = stripped.split()[0]
        head_col = len(line) - len(line.lstrip()) + 1

        def err(msg: str, column: int | None = head_col) -> ParseError:
            return ParseError(msg, line=lineno, column=column, source=source_name)

        if head == "ontology":
            if header_seen:
                raise err("duplicate 'ontology' header")
            m = _HEADER.match(line)
            if not m:
                raise err("expected 'ontology <extra-taxonomy> -> <source-taxonomy>'")
            for key, tax in (("extra", extra), ("source", source)):
                got = normalize_name(m.group(key))
                if got != tax.name:
                    raise err(
                        f"header names {key} taxonomy {got!r} but {tax.name!r} was supplied",
                        m.start(key) + 1,
                    )
            header_seen = True
            continue
        if not header_seen:
            raise err(f"{head!r} before 'ontology' header")

        if head == "map":
            m = _MAP.match(line)
            if not m:
                raise err("expected 'map <extra-class> -> <source-class>[, <source-class>]*'")
            lhs = m.group("lhs")
            key = _resolve_extra(lhs, extra)
            if key is None:
                raise err(f"unknown class {lhs!r} in taxonomy {extra.name!r}", m.start("lhs") + 1)
            rhs_start = m.start("rhs")
            targets = entries.setdefault(key, set())
            parts = m.group("rhs").split(",")
            offset = rhs_start
            for part in parts:
                token = part.strip()
                col = offset + (len(part) - len(part.lstrip())) + 1
                offset += len(part) + 1
                if not token:
                    raise err("empty class name in mapping list", col)
                if len(token.split()) != 1:
                    raise err(f"expected ',' between class names in {token!r}", col)
                sid = source.get(token)
                if sid is None:
                    raise err(f"unknown class {token!r} in taxonomy {source.name!r}", col)
                targets.add(sid)
        elif head == "exclude":
            toks = stripped.split()
            if len(toks) != 2:
                raise err("expected 'exclude <source-class>'")
            col = line.find(toks[1], head_col + len("exclude")) + 1
            sid = source.get(toks[1])
            if sid is None:
                raise err(f"unknown class {toks[1]!r} in taxonomy {source.name!r}", col)
            excluded.setdefault(sid, (lineno, col))
        elif head == "fallback":
            toks = stripped.split()
            if len(toks) != 2:
                raise err("expected 'fallback <error|void|unconstrained>'")
            if fallback is not None:
                raise err("duplicate 'fallback' directive")
            try:
                fallback = FallbackPolicy.parse(toks[1])
            except ValueError as exc:
                raise err(str(exc), line.find(toks[1], head_col + len("fallback")) + 1) from None
        else:
            raise err(f"unknown directive {head!r}")

    if not header_seen:
        raise ParseError("missing 'ontology <extra> -> <source>' header", source=source_name)

    if strict:
        mapped = set().union(*entries.values()) if entries else set()
        clash = sorted(set(excluded) & mapped)
        if clash:
            sid = clash[0]
            line, col = excluded[sid]
            raise ParseError(
                f"source class {source.classes[sid].name!r} is both mapped and excluded",
                line=line,
                column=col,
                source=source_name,
            )

    return OntologyRelation(
        extra=extra,
        source=source,
        entries={k: frozenset(v) for k, v in sorted(entries.items())},
        excluded_source=frozenset(excluded),
        default_fallback=fallback or FallbackPolicy.VOID,
    )


def _resolve_extra(name: str, extra: Taxonomy) -> int | None:
    cid = extra.get(name)
    if cid is not None:
        return VOID_ID if cid == extra.void_id else cid
    if normalize_name(name) == "void":
        return VOID_ID
    return None


def serialize_ontology(rel: OntologyRelation) -> str:
    """Canonical text form: entries by extra id (void last), names by source id."""
    src = rel.source.classes
    lines = [f"ontology {rel.extra.name} -> {rel.source.name}"]
    for key in sorted(rel.entries):
        targets = rel.entries[key]
        if not targets:
            continue
        lhs = "void" if key == VOID_ID else rel.extra.classes[key].name
        if key == VOID_ID and rel.extra.void_id is not None:
            lhs = rel.extra.classes[rel.extra.void_id].name
        lines.append(f"map {lhs} -> " + ", ".join(src[s].name for s in sorted(targets)))
    for sid in sorted(rel.excluded_source):
        lines.append(f"exclude {src[sid].name}")
    lines.append(f"fallback {rel.default_fallback.value}")
    return "\n".join(lines) + "\n"


def load_ontology(path: str | Path, extra: Taxonomy, source: Taxonomy, *, strict: bool = True) -> OntologyRelation:
    path = Path(path)
    return parse_ontology(path.read_bytes(), extra, source, strict=strict, source_name=str(path))


def read_ontology_header(path: str | Path) -> tuple[str, str]:
    """Return the (extra, source) taxonomy names named by an ontology file."""
    path = Path(path)
    text = decode_text(path.read_bytes(), str(path))
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = _strip_comment(raw)
        if not line.strip():
            continue
        m = _HEADER.match(line)
        if not m:
            raise ParseError("expected 'ontology <extra-taxonomy> -> <source-taxonomy>'", line=lineno, source=str(path))
        return normalize_name(m.group("extra")), normalize_name(m.group("source"))
    raise ParseError("missing 'ontology <extra> -> <source>' header", source=str(path))


# -- validation ---------------------------------------------------------------

@dataclass(frozen=True, order=True)
class Diagnostic:
    severity: str  # "error" | "warning"
    code: str
    subject: str
    message: str = field(compare=False)
    taxonomy: str = field(default="", compare=False)

    def format(self) -> str:
        return f"{self.severity.upper()} {self.code} {self.subject} {json.dumps(self.message, ensure_ascii=False)}"


def validate_ontology(rel: OntologyRelation) -> list[Diagnostic]:
    """Check coverage, emptiness, overlap and reachability of a relation.

    Returns diagnostics sorted by (severity, code, subject); never raises.
    """
    extra, source = rel.extra, rel.source
    out: list[Diagnostic] = []
    excluded = rel.excluded_source
    all_source = frozenset(c.id for c in source.classes if not c.is_void)

    for c in extra.classes:
        if c.is_void:
            continue
        if c.id not in rel.entries or not rel.entries[c.id]:
            out.append(Diagnostic("error", "uncovered-extra-class", c.name,
                                  f"extra class {c.name!r} has no mapping", extra.name))

    mapped: set[int] = set()
    for key, targets in rel.entries.items():
        mapped |= targets
        if not targets:
            continue
        subject = "void" if key == VOID_ID else extra.classes[key].name
        allowed = targets - excluded
        if not allowed:
            out.append(Diagnostic("error", "empty-allowed-set", subject,
                                  f"every source class mapped from {subject!r} is excluded", extra.name))
        elif allowed >= all_source - excluded and len(all_source) > 1:
            out.append(Diagnostic("warning", "vacuous-constraint", subject,
                                  f"{subject!r} allows every source class", extra.name))

    for sid in sorted(excluded & mapped):
        name = source.classes[sid].name
        out.append(Diagnostic("error", "mapped-and-excluded", name,
                              f"source class {name!r} is both mapped and excluded", source.name))

    for c in source.classes:
        if c.is_void or c.id in mapped or c.id in excluded:
            continue
        out.append(Diagnostic("warning", "unreachable-source-class", c.name,
                              f"source class {c.name!r} is reachable from no extra class", source.name))

    return sorted(set(out))


def has_errors(diags: list[Diagnostic]) -> bool:
    return any(d.severity == "error" for d in diags)


# -- constraint lookup ----------------------------------------------------------

@dataclass(frozen=True)
class ConstraintTable:
    """Per extra class bitset of allowed source ids, plus the void row.

    ``lookup`` is a 256 x C boolean matrix indexed directly by label value,
    so a whole ground-truth map resolves with one gather.
    """

    rows: tuple[int, ...]
    void_row: int
    n_source: int
    lookup: np.ndarray = field(repr=False, compare=False)

    def row(self, extra_id: int) -> int:
        if extra_id == VOID_ID:
            return self.void_row
        if 0 <= extra_id < len(self.rows):
            return self.rows[extra_id]
        raise KeyError(f"extra class id {extra_id} out of range")

    def allowed(self, extra_id: int) -> frozenset[int]:
        bits = self.row(extra_id)
        return frozenset(c for c in range(self.n_source) if bits >> c & 1)

    def row_size(self) -> np.ndarray:
        """Popcount of every lookup row (length 256)."""
        return self.lookup.sum(axis=1)

    @classmethod
    def from_rows(cls, rows: list[int], void_row: int, n_source: int) -> ConstraintTable:
        full = (1 << n_source) - 1
        for bits in [*rows, void_row]:
            if bits & ~full:
                raise ValueError("row references a source id >= C_source")
        lookup = np.zeros((256, n_source), dtype=bool)
        for e, bits in enumerate(rows):
            lookup[e] = [bits >> c & 1 for c in range(n_source)]
        lookup[VOID_ID] = [void_row >> c & 1 for c in range(n_source)]
        lookup.flags.writeable = False
        return cls(tuple(rows), void_row, n_source, lookup)


def _bits(ids) -> int:
    out = 0
    for i in ids:
        out |= 1 << i
    return out


def build_constraint_table(rel: OntologyRelation) -> ConstraintTable:
    diags = validate_ontology(rel)
    for d in diags:
        if d.severity == "error":
            raise ValidationError(f"ontology has errors: {d.code} {d.subject}: {d.message}")
    excluded = _bits(rel.excluded_source)
    rows = []
    for c in rel.extra.classes:
        rows.append(_bits(rel.entries.get(c.id, ())) & ~excluded)
    if VOID_ID in rel.entries:
        void_row = _bits(rel.entries[VOID_ID]) & ~excluded
    else:
        void_row = 0
        for bits in rows:
            void_row |= bits
    if rel.extra.void_id is not None:
        rows[rel.extra.void_id] = void_row
    return ConstraintTable.from_rows(rows, void_row, len(rel.source))
