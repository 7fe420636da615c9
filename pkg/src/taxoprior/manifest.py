"""Dataset manifests: frame lists, subsampling, pairing and frame statistics.

Grammar (one declaration per line, ``#`` comments)::

    manifestset <title>
    dataset <name> taxonomy <tax-name> [ontology <path>] [contiguous] [step <k>]
    frame <id> gt <path> [image <path>] [predictions <dir>] [split train|val]
    frames <start> <count> id <tmpl> gt <tmpl> [image <tmpl>] [split train|val]

``frames`` declares ``count`` consecutive frames; templates are Python
format strings over a single field ``i`` (e.g. ``seq-{i:06d}``).
"""

from __future__ import annotations

import math
import re
import string
import warnings
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path, PurePosixPath
from typing import Iterator

from .errors import ParseError
from .taxonomy import decode_text, normalize_name
from .tensorio import AugDescriptor, default_augmentations

SPLITS = ("train", "val")
SCHEMA = 1
_FRAME_ID = re.compile(r"[A-Za-z0-9][A-Za-z0-9_.-]*\Z")
_UINT = re.compile(r"[0-9]+\Z")
_INT_SPEC = re.compile(r"(0[0-9]+)?d?\Z")


@dataclass(frozen=True, slots=True)
class FrameEntry:
    id: str
    gt: str
    image: str | None = None
    predictions: str | None = None
    split: str = "train"


@dataclass(frozen=True)
class DatasetManifest:
    name: str
    taxonomy: str
    frames: tuple[FrameEntry, ...] = ()
    ontology: str | None = None
    contiguous: bool = False
    sampling_step: int = 1
    root: Path | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        if self.sampling_step < 1:
            raise ValueError("sampling_step must be >= 1")
        ids = [f.id for f in self.frames]
        if len(set(ids)) != len(ids):
            raise ValueError(f"dataset {self.name!r} has duplicate frame ids")

    @property
    def is_source(self) -> bool:
        return self.ontology is None

    def resolve(self, rel: str) -> Path:
        return (self.root or Path(".")) / rel


@dataclass(frozen=True)
class ManifestSet:
    title: str | None
    datasets: tuple[DatasetManifest, ...]


def _check_path(tok: str, err) -> str:
    p = PurePosixPath(tok)
    if p.is_absolute() or tok.startswith("\\") or re.match(r"[A-Za-z]:", tok):
        raise err(f"path must be relative to the manifest root: {tok!r}")
    return tok


def _check_template(tmpl: str, err) -> str:
    try:
        parts = [(f, spec, conv) for _, f, spec, conv in string.Formatter().parse(tmpl) if f is not None]
    except ValueError as exc:
        raise err(f"bad template {tmpl!r}: {exc}") from None
    if not parts or any(f != "i" for f, _, _ in parts):
        raise err(f"template {tmpl!r} must use the single field {{i}}")
    # plain or zero-padded decimal only, so rendered ids differ only in their digits
    if any(conv is not None or not _INT_SPEC.match(spec or "") for _, spec, conv in parts):
        raise err(f"template {tmpl!r}: only '{{i}}' or zero-padded forms like '{{i:06d}}' are allowed")
    try:
        tmpl.format(i=0)
    except (ValueError, KeyError, IndexError) as exc:
        raise err(f"bad template {tmpl!r}: {exc}") from None
    return tmpl


def _options(toks: list[tuple[str, int]], spec: dict[str, bool], err) -> dict[str, tuple[str | None, int]]:
    """Parse ``key [value]`` option pairs; ``spec`` maps key -> takes_value."""
    out: dict[str, tuple[str | None, int]] = {}
    i = 0
    while i < len(toks):
        key, col = toks[i]
        if key not in spec:
            raise err(f"unexpected token {key!r}", col)
        if key in out:
            raise err(f"duplicate option {key!r}", col)
        if spec[key]:
            if i + 1 >= len(toks):
                raise err(f"option {key!r} needs a value", col)
            out[key] = (toks[i + 1][0], toks[i + 1][1])
            i += 2
        else:
            out[key] = (None, col)
            i += 1
    return out


def parse_manifest_set(text: str | bytes, source: str | None = None, root: Path | None = None) -> ManifestSet:
    text = decode_text(text, source)
    title: str | None = None
    datasets: list[DatasetManifest] = []
    current: dict | None = None
    frame_lines: dict[str, int] = {}

    def close() -> None:
        if current is not None:
            datasets.append(DatasetManifest(frames=tuple(current.pop("frames")), root=root, **current))

    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0]
        toks = [(m.group(), m.start() + 1) for m in re.finditer(r"\S+", line)]
        if not toks:
            continue
        head, hcol = toks[0]

        def err(msg: str, column: int | None = hcol) -> ParseError:
            return ParseError(msg, line=lineno, column=column, source=source)

        if head == "manifestset":
            if title is not None or datasets or current is not None:
                raise err("'manifestset' must come first and only once")
            if len(toks) < 2:
                raise err("expected 'manifestset <title>'")
            title = " ".join(t for t, _ in toks[1:])
        elif head == "dataset":
            if len(toks) < 4 or toks[2][0] != "taxonomy":
                raise err("expected 'dataset <name> taxonomy <tax-name> [ontology <path>] [contiguous] [step <k>]'")
            name = toks[1][0]
            if any(d.name == name for d in datasets) or (current and current["name"] == name):
                raise err(f"duplicate dataset {name!r}", toks[1][1])
            opts = _options(toks[4:], {"ontology": True, "contiguous": False, "step": True}, err)
            step = 1
            if "step" in opts:
                val, col = opts["step"]
                if not _UINT.match(val) or int(val) < 1:
                    raise err(f"step must be a positive integer, got {val!r}", col)
                step = int(val)
            close()
            frame_lines = {}
            current = {
                "name": name,
                "taxonomy": normalize_name(toks[3][0]),
                "ontology": _check_path(opts["ontology"][0], err) if "ontology" in opts else None,
                "contiguous": "contiguous" in opts,
                "sampling_step": step,
                "frames": [],
            }
        elif head in ("frame", "frames"):
            if current is None:
                raise err(f"'{head}' before any 'dataset'")
            if head == "frame":
                new = _parse_frame(toks, err)
            else:
                new = _parse_frames(toks, err)
            for entry in new:
                if entry.id in frame_lines:
                    raise err(f"duplicate frame id {entry.id!r} (first on line {frame_lines[entry.id]})",
                              toks[1][1])
                frame_lines[entry.id] = lineno
            current["frames"].extend(new)
        else:
            raise err(f"unknown directive {head!r}")
    close()
    return ManifestSet(title, tuple(datasets))


def _parse_split(opts, err) -> str:
    if "split" not in opts:
        return "train"
    val, col = opts["split"]
    if val not in SPLITS:
        raise err(f"unknown split tag {val!r}; expected train or val", col)
    return val


def _parse_frame(toks, err) -> list[FrameEntry]:
    if len(toks) < 2:
        raise err("expected 'frame <id> gt <path> ...'")
    fid, fcol = toks[1]
    if not _FRAME_ID.match(fid):
        raise err(f"invalid frame id {fid!r}", fcol)
    opts = _options(toks[2:], {"gt": True, "image": True, "predictions": True, "split": True}, err)
    if "gt" not in opts:
        raise err(f"frame {fid!r} is missing required field 'gt'")
    return [FrameEntry(
        id=fid,
        gt=_check_path(opts["gt"][0], err),
        image=_check_path(opts["image"][0], err) if "image" in opts else None,
        predictions=_check_path(opts["predictions"][0], err) if "predictions" in opts else None,
        split=_parse_split(opts, err),
    )]


def _parse_frames(toks, err) -> list[FrameEntry]:
    if len(toks) < 3:
        raise err("expected 'frames <start> <count> id <tmpl> gt <tmpl> ...'")
    nums = []
    for tok, col in toks[1:3]:
        if not _UINT.match(tok):
            raise err(f"expected a non-negative integer, got {tok!r}", col)
        nums.append(int(tok))
    start, count = nums
    opts = _options(toks[3:], {"id": True, "gt": True, "image": True, "split": True}, err)
    for key in ("id", "gt"):
        if key not in opts:
            raise err(f"'frames' is missing required field {key!r}")
    id_t = _check_template(opts["id"][0], err)
    gt_t = _check_template(_check_path(opts["gt"][0], err), err)
    img_t = _check_template(_check_path(opts["image"][0], err), err) if "image" in opts else None
    split = _parse_split(opts, err)
    # integer formatting only varies in length, so the extremes stand for the range
    for i in {start, max(start, start + count - 1)}:
        fid = id_t.format(i=i)
        if not _FRAME_ID.match(fid):
            raise err(f"template produces invalid frame id {fid!r}", opts["id"][1])
    idx = range(start, start + count)
    ids = map(id_t.format_map, ({"i": i} for i in idx))
    gts = [gt_t.format(i=i) for i in idx]
    imgs = [img_t.format(i=i) for i in idx] if img_t else [None] * count
    return [FrameEntry(f, g, m, None, split) for f, g, m in zip(ids, gts, imgs)]


def parse_manifest(text: str | bytes, source: str | None = None, root: Path | None = None) -> DatasetManifest:
    ms = parse_manifest_set(text, source, root)
    if len(ms.datasets) != 1:
        raise ParseError(f"expected exactly one dataset, found {len(ms.datasets)}", source=source)
    return ms.datasets[0]


def load_manifest_set(path: str | Path) -> ManifestSet:
    path = Path(path)
    return parse_manifest_set(path.read_bytes(), source=str(path), root=path.parent)


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    return parse_manifest(path.read_bytes(), source=str(path), root=path.parent)


# -- operations -------------------------------------------------------------------------

def subsample(manifest: DatasetManifest, step: int) -> DatasetManifest:
    """Keep every ``step``-th frame of a contiguous dataset."""
    if step < 1:
        raise ValueError("step must be >= 1")
    if step == 1:
        return manifest
    if not manifest.contiguous:
        warnings.warn(
            f"dataset {manifest.name!r} is not contiguous; subsampling would drop unique scenes, left unchanged",
            stacklevel=2,
        )
        return manifest
    return replace(manifest, frames=manifest.frames[::step], sampling_step=manifest.sampling_step * step)


@dataclass(frozen=True)
class StatsRow:
    name: str
    frames: int
    relative: str
    contiguous: bool


@dataclass(frozen=True)
class StatsTable:
    title: str | None
    rows: tuple[StatsRow, ...]
    total: int

    def to_json(self) -> dict:
        return {
            "schema": SCHEMA,
            "title": self.title,
            "total": self.total,
            "datasets": [
                {"name": r.name, "frames": r.frames, "relative_percent": r.relative, "contiguous": r.contiguous}
                for r in self.rows
            ],
        }


def relative_percent(n: int, total: int) -> str:
    """Integer percent with halves rounded up; nonzero shares below 0.5% print as ``<1``."""
    if total == 0:
        return "0"
    pct = math.floor(Fraction(100 * n, total) + Fraction(1, 2))
    if pct == 0 and n > 0:
        return "<1"
    return str(pct)


def stats(manifests, title: str | None = None) -> StatsTable:
    manifests = list(manifests)
    total = sum(len(m.frames) for m in manifests)
    rows = tuple(StatsRow(m.name, len(m.frames), relative_percent(len(m.frames), total), m.contiguous)
                 for m in manifests)
    return StatsTable(title, rows, total)


def render_stats(tables: list[StatsTable]) -> str:
    """Aligned text table; several tables share one column layout."""
    header = ("Dataset", "Frames", "Rel. [%]", "Contiguous")
    cells: list[tuple[str, str, str, str] | None] = []
    for i, t in enumerate(tables):
        if i:
            cells.append(None)
        for r in t.rows:
            cells.append((r.name, f"{r.frames:,}", r.relative, "yes" if r.contiguous else ""))
        cells.append(None)
        label = f"Total {t.title}" if t.title else "Total"
        cells.append((label, f"{t.total:,}", "", ""))
    rows = [c for c in cells if c is not None]
    widths = [max([len(h), *(len(r[k]) for r in rows)]) for k, h in enumerate(header)]
    rule = "-" * (sum(widths) + 2 * (len(widths) - 1))

    def fmt(r) -> str:
        return (f"{r[0]:<{widths[0]}}  {r[1]:>{widths[1]}}  {r[2]:>{widths[2]}}  {r[3]:<{widths[3]}}").rstrip()

    lines = [fmt(header), rule]
    for c in cells:
        lines.append(rule if c is None else fmt(c))
    return "\n".join(lines) + "\n"


# -- pairing ------------------------------------------------------------------------------

@dataclass(frozen=True)
class FramePair:
    frame_id: str
    gt: Path
    predictions: tuple[Path, ...]
    augmentations: tuple[AugDescriptor, ...]


class FramePairing:
    """Lazy stream of frames whose prediction set is complete.

    ``incomplete`` maps frame id -> missing file names and fills in as the
    stream is consumed.
    """

    def __init__(self, manifest: DatasetManifest, prediction_root: Path, augs: list[AugDescriptor]):
        self.manifest = manifest
        self.root = prediction_root
        self.augs = tuple(augs)
        self.incomplete: dict[str, list[str]] = {}

    def __iter__(self) -> Iterator[FramePair]:
        for frame in self.manifest.frames:
            fdir = self.root / (frame.predictions or frame.id)
            paths = tuple(fdir / f"{a.name}.sftp" for a in self.augs)
            missing = [p.name for p in paths if not p.is_file()]
            if missing:
                self.incomplete[frame.id] = missing
                continue
            yield FramePair(frame.id, self.manifest.resolve(frame.gt), paths, self.augs)


def pair_frames(manifest: DatasetManifest, prediction_root: str | Path,
                augs: list[AugDescriptor] | None = None) -> FramePairing:
    """Pair frames with ``<root>/<frame-id>/<aug-name>.sftp`` prediction files."""
    root = Path(prediction_root)
    if not root.is_dir():
        raise FileNotFoundError(f"prediction root {root} does not exist")
    return FramePairing(manifest, root, augs if augs is not None else default_augmentations())
