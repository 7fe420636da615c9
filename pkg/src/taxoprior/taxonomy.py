"""Taxonomies: ordered class lists with colors and an optional void class.

File format (``.tax``), one declaration per line::

    taxonomy <name>
    class <id> <name> <r> <g> <b> [void]

Blank lines are ignored and ``#`` starts a comment.
"""

from __future__ import annotations

import re
import unicodedata
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ParseError

VOID_ID = 255
MAX_CLASSES = 255

_TOKEN = re.compile(r"[a-z0-9_-]+\Z")
_UINT = re.compile(r"[0-9]+\Z")


def normalize_name(name: str) -> str:
    """Canonical form used for all class and taxonomy name comparisons."""
    return unicodedata.normalize("NFC", name).casefold()


def is_token(name: str) -> bool:
    return bool(_TOKEN.match(name))


@dataclass(frozen=True)
class ClassDef:
    id: int
    name: str
    color: tuple[int, int, int]
    is_void: bool = False


@dataclass(frozen=True)
class Taxonomy:
    name: str
    classes: tuple[ClassDef, ...]
    _by_name: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if not self.classes:
            raise ValueError("taxonomy needs at least one class")
        if len(self.classes) > MAX_CLASSES:
            raise ValueError(f"taxonomy has {len(self.classes)} classes, at most {MAX_CLASSES} fit an 8-bit label map")
        by_name: dict[str, int] = {}
        voids = 0
        for i, c in enumerate(self.classes):
            if c.id != i:
                raise ValueError(f"class ids must be dense and ordered, found id {c.id} at position {i}")
            if c.name in by_name:
                raise ValueError(f"duplicate class name {c.name!r}")
            by_name[c.name] = i
            voids += c.is_void
        if voids > 1:
            raise ValueError("at most one class may be void")
        object.__setattr__(self, "_by_name", by_name)

    def __len__(self) -> int:
        return len(self.classes)

    @property
    def void_id(self) -> int | None:
        for c in self.classes:
            if c.is_void:
                return c.id
        return None

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.classes]

    def id_of(self, name: str) -> int:
        """Look up a class id by (case-insensitive) name. Raises KeyError."""
        return self._by_name[normalize_name(name)]

    def get(self, name: str) -> int | None:
        return self._by_name.get(normalize_name(name))

    def palette(self) -> np.ndarray:
        """256x3 uint8 lookup table; unused entries and the void sentinel are black."""
        lut = np.zeros((256, 3), dtype=np.uint8)
        for c in self.classes:
            lut[c.id] = (0, 0, 0) if c.is_void else c.color
        return lut


def _strip_comment(line: str) -> str:
    pos = line.find("#")
    return line if pos < 0 else line[:pos]


def tokenize(line: str) -> list[tuple[str, int]]:
    """Split a line on whitespace, keeping the 1-based column of each token."""
    return [(m.group(), m.start() + 1) for m in re.finditer(r"\S+", line)]


def decode_text(data: str | bytes, source: str | None = None) -> str:
    if isinstance(data, str):
        return data
    try:
        return data.decode("utf-8")
    except UnicodeDecodeError as exc:
        line = data[: exc.start].count(b"\n") + 1
        raise ParseError(f"invalid UTF-8 at byte {exc.start}", line=line, source=source) from None


def parse_taxonomy(text: str | bytes, source: str | None = None) -> Taxonomy:
    text = decode_text(text, source)
    name: str | None = None
    seen_ids: dict[int, int] = {}
    seen_names: dict[str, int] = {}
    void_line: int | None = None
    defs: dict[int, ClassDef] = {}

    for lineno, raw in enumerate(text.splitlines(), 1):
        toks = tokenize(_strip_comment(raw))
        if not toks:
            continue
        head, col = toks[0]

        def err(msg: str, column: int | None = col) -> ParseError:
            return ParseError(msg, line=lineno, column=column, source=source)

        if head == "taxonomy":
            if name is not None:
                raise err("duplicate 'taxonomy' header")
            if len(toks) != 2:
                raise err("expected 'taxonomy <name>'")
            tname = normalize_name(toks[1][0])
            if not is_token(tname):
                raise err(f"invalid taxonomy name {toks[1][0]!r}", toks[1][1])
            name = tname
        elif head == "class":
            if name is None:
                raise err("'class' before 'taxonomy' header")
            if len(toks) not in (6, 7):
                raise err("expected 'class <id> <name> <r> <g> <b> [void]'")
            id_tok, id_col = toks[1]
            if not _UINT.match(id_tok):
                raise err(f"class id must be a non-negative integer, got {id_tok!r}", id_col)
            cid = int(id_tok)
            if cid >= MAX_CLASSES:
                raise err(f"class id {cid} out of range (max {MAX_CLASSES - 1})", id_col)
            if cid in seen_ids:
                raise err(f"duplicate class id {cid} (first declared on line {seen_ids[cid]})", id_col)
            cname = normalize_name(toks[2][0])
            if not is_token(cname):
                raise err(f"invalid class name {toks[2][0]!r}", toks[2][1])
            if cname in seen_names:
                raise err(f"duplicate class name {cname!r} (line {lineno})", toks[2][1])
            rgb = []
            for tok, tcol in toks[3:6]:
                if not _UINT.match(tok) or int(tok) > 255:
                    raise err(f"color channel must be an integer in 0..255, got {tok!r}", tcol)
                rgb.append(int(tok))
            is_void = False
            if len(toks) == 7:
                if toks[6][0] != "void":
                    raise err(f"unexpected token {toks[6][0]!r}, expected 'void'", toks[6][1])
                if void_line is not None:
                    raise err(f"multiple void classes (first on line {void_line})", toks[6][1])
                void_line = lineno
                is_void = True
            seen_ids[cid] = lineno
            seen_names[cname] = lineno
            defs[cid] = ClassDef(cid, cname, (rgb[0], rgb[1], rgb[2]), is_void)
        else:
            raise err(f"unknown directive {head!r}")

    if name is None:
        raise ParseError("missing 'taxonomy <name>' header", source=source)
    if not defs:
        raise ParseError("taxonomy declares no classes", source=source)
    for i in range(len(defs)):
        if i not in defs:
            raise ParseError(f"class ids are not dense: id {i} is missing (max id {max(defs)})", source=source)
    return Taxonomy(name, tuple(defs[i] for i in range(len(defs))))


def serialize_taxonomy(tax: Taxonomy) -> str:
    lines = [f"taxonomy {tax.name}"]
    for c in tax.classes:
        r, g, b = c.color
        lines.append(f"class {c.id} {c.name} {r} {g} {b}" + (" void" if c.is_void else ""))
    return "\n".join(lines) + "\n"


def load_taxonomy(path: str | Path) -> Taxonomy:
    path = Path(path)
    return parse_taxonomy(path.read_bytes(), source=str(path))
