"""On-disk artifacts: soft-prediction tensors, label maps and visualizations.

Soft tensors use a raw little-endian layout (``.sftp``)::

    b"SFTP1\\n" | H u32 | W u32 | C u32 | flags u8 | scale f32 | H*W*C f32

Scores are row-major, channel-minor. ``flags`` bit 0 records a horizontal
flip; all other bits must be zero.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import FormatError
from .taxonomy import VOID_ID, Taxonomy

log = logging.getLogger(__name__)

MAGIC = b"SFTP1\n"
_HEADER = struct.Struct("<IIIBf")
HEADER_SIZE = len(MAGIC) + _HEADER.size
SCALES = (0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0)
SIMPLEX_TOL = 1e-4
MAX_DRIFT = 0.1


@dataclass(frozen=True, eq=False)
class SoftPrediction:
    """H x W x C float32 class scores, one probability vector per pixel."""

    scores: np.ndarray
    renormalized_pixels: int = field(default=0, compare=False)

    def __post_init__(self) -> None:
        s = self.scores
        if s.ndim != 3:
            raise ValueError(f"scores must be H x W x C, got shape {s.shape}")
        if s.dtype != np.float32:
            raise ValueError(f"scores must be float32, got {s.dtype}")
        h, w, c = s.shape
        if h < 1 or w < 1 or c < 2:
            raise ValueError(f"need H, W >= 1 and C >= 2, got {s.shape}")

    @property
    def height(self) -> int:
        return self.scores.shape[0]

    @property
    def width(self) -> int:
        return self.scores.shape[1]

    @property
    def channels(self) -> int:
        return self.scores.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.scores.shape

    def simplex_error(self) -> float:
        """Largest per-pixel deviation of the channel sum from 1."""
        return float(np.abs(self.scores.sum(axis=-1, dtype=np.float64) - 1.0).max())


@dataclass(frozen=True, eq=False)
class LabelMap:
    """H x W uint8 class ids; 255 marks void."""

    ids: np.ndarray

    def __post_init__(self) -> None:
        if self.ids.ndim != 2 or self.ids.dtype != np.uint8:
            raise ValueError(f"label map must be a 2-D uint8 array, got {self.ids.dtype} {self.ids.shape}")

    @property
    def height(self) -> int:
        return self.ids.shape[0]

    @property
    def width(self) -> int:
        return self.ids.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.ids.shape

    def __eq__(self, other: object) -> bool:
        return isinstance(other, LabelMap) and np.array_equal(self.ids, other.ids)


def scaled_size(base: int, scale: float) -> int:
    """round(base * scale), halves rounded up, computed exactly."""
    exact = Fraction(base) * Fraction(scale)
    return math.floor(exact + Fraction(1, 2))


@dataclass(frozen=True)
class AugDescriptor:
    hflip: bool = False
    scale: float = 1.0
    base_height: int | None = None
    base_width: int | None = None

    def validate(self, allow_any_scale: bool = False) -> None:
        if not (math.isfinite(self.scale) and self.scale > 0):
            raise FormatError(f"scale must be a positive finite number, got {self.scale}")
        if not allow_any_scale and self.scale not in SCALES:
            raise FormatError(f"scale {self.scale} not in {SCALES} (use allow_any_scale to override)")
        for b in (self.base_height, self.base_width):
            if b is not None and (b < 1 or scaled_size(b, self.scale) < 1):
                raise FormatError(f"base size {b} at scale {self.scale} gives an empty image")

    def with_base(self, height: int, width: int) -> AugDescriptor:
        return replace(self, base_height=height, base_width=width)

    @property
    def scaled_shape(self) -> tuple[int, int]:
        if self.base_height is None or self.base_width is None:
            raise ValueError("descriptor has no base geometry")
        return scaled_size(self.base_height, self.scale), scaled_size(self.base_width, self.scale)

    @property
    def name(self) -> str:
        return aug_name(self.scale, self.hflip)

    @property
    def is_identity(self) -> bool:
        return not self.hflip and self.scale == 1.0


def aug_name(scale: float, hflip: bool) -> str:
    """File stem for one augmentation, e.g. ``s075_flip``."""
    pct = Fraction(scale) * 100
    if pct.denominator != 1:
        raise ValueError(f"scale {scale} has no integer percentage")
    return f"s{int(pct):03d}" + ("_flip" if hflip else "")


def parse_aug_name(stem: str) -> AugDescriptor:
    body, _, suffix = stem.partition("_")
    if not body.startswith("s") or not body[1:].isascii() or not body[1:].isdigit() or suffix not in ("", "flip"):
        raise FormatError(f"not an augmentation name: {stem!r}")
    return AugDescriptor(hflip=suffix == "flip", scale=int(body[1:]) / 100)


def default_augmentations(scales=SCALES, flip: bool = True) -> list[AugDescriptor]:
    out = []
    for s in scales:
        out.append(AugDescriptor(False, s))
        if flip:
            out.append(AugDescriptor(True, s))
    return out


# -- soft tensors -----------------------------------------------------------------

def encode_soft(pred: SoftPrediction, desc: AugDescriptor) -> bytes:
    h, w, c = pred.shape
    header = MAGIC + _HEADER.pack(h, w, c, 1 if desc.hflip else 0, desc.scale)
    return header + np.ascontiguousarray(pred.scores, dtype="<f4").tobytes()


# bound on float32 summation error over at most 255 channels summing to about 1
_SCREEN_MARGIN = 5e-5


def decode_soft(data: bytes, allow_any_scale: bool = False) -> tuple[SoftPrediction, AugDescriptor]:
    """Parse and validate an ``.sftp`` payload.

    Pixels whose channel sum drifts from 1 by more than 1e-4 (but at most
    10%) are renormalized; anything worse is rejected with its coordinate.
    """
    if len(data) < len(MAGIC) or data[: len(MAGIC)] != MAGIC:
        raise FormatError("bad magic: not an SFTP1 tensor")
    if len(data) < HEADER_SIZE:
        raise FormatError(f"truncated header: expected {HEADER_SIZE} bytes, got {len(data)}")
    h, w, c, flags, scale = _HEADER.unpack_from(data, len(MAGIC))
    if h < 1 or w < 1:
        raise FormatError(f"invalid dimensions {h}x{w}")
    if c < 2 or c > 255:
        raise FormatError(f"invalid channel count {c} (need 2..255)")
    if flags & ~1:
        raise FormatError(f"unknown flag bits 0x{flags:02x}")
    desc = AugDescriptor(hflip=bool(flags & 1), scale=float(scale))
    desc.validate(allow_any_scale)

    expected = h * w * c * 4
    actual = len(data) - HEADER_SIZE
    if actual < expected:
        raise FormatError(f"truncated: expected {expected} bytes, got {actual}")
    if actual > expected:
        raise FormatError(f"trailing data: expected {expected} bytes, got {actual}")

    scores = np.frombuffer(data, dtype="<f4", count=h * w * c, offset=HEADER_SIZE).reshape(h, w, c)
    # cheap float32 screening; exact float64 checks run only on flagged pixels
    rough = np.einsum("ijk->ij", scores)
    if not np.isfinite(rough).all():
        bad = ~np.isfinite(scores)
        if bad.any():
            r, col, ch = np.argwhere(bad)[0]
            raise FormatError(f"non-finite score at ({r}, {col}) channel {ch}")
    if scores.min() < 0:
        r, col, ch = np.argwhere(scores < 0)[0]
        raise FormatError(f"negative score at ({r}, {col}) channel {ch}")

    flat = scores.reshape(-1, c)
    cand = np.flatnonzero(~(np.abs(rough.ravel() - 1.0) <= SIMPLEX_TOL - _SCREEN_MARGIN))
    sums = flat[cand].sum(axis=-1, dtype=np.float64)
    zero = sums == 0
    if zero.any():
        r, col = divmod(int(cand[np.argmax(zero)]), w)
        raise FormatError(f"zero-sum pixel at ({r}, {col}) cannot be renormalized")
    drift = np.abs(sums - 1.0)
    if (drift > MAX_DRIFT).any():
        i = int(np.argmax(drift > MAX_DRIFT))
        r, col = divmod(int(cand[i]), w)
        raise FormatError(f"pixel ({r}, {col}) sums to {sums[i]:.6g}, more than 10% away from 1")
    off = drift > SIMPLEX_TOL
    n_off = int(off.sum())
    if n_off:
        fixed = scores.astype(np.float32, copy=True).reshape(-1, c)
        rows = cand[off]
        fixed[rows] = (flat[rows] / sums[off][:, None]).astype(np.float32)
        scores = fixed.reshape(h, w, c)
        log.info("renormalized %d pixel(s) whose scores did not sum to 1", n_off)
    else:
        scores = scores.astype(np.float32, copy=False)
    return SoftPrediction(scores, renormalized_pixels=n_off), desc


def sidecar_path(path: Path) -> Path:
    return path.with_suffix(".aug.json")


_SIDECAR_TYPES = {"hflip": (bool,), "scale": (int, float), "base_height": (int,), "base_width": (int,)}


def read_soft(path: str | Path, allow_any_scale: bool = False) -> tuple[SoftPrediction, AugDescriptor]:
    path = Path(path)
    pred, desc = decode_soft(path.read_bytes(), allow_any_scale)
    side = sidecar_path(path)
    if side.exists():
        try:
            meta = json.loads(side.read_text(encoding="utf-8"))
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise FormatError(f"{side}: invalid JSON sidecar: {exc}") from None
        if not isinstance(meta, dict):
            raise FormatError(f"{side}: sidecar must be a JSON object")
        unknown = set(meta) - set(_SIDECAR_TYPES)
        if unknown:
            raise FormatError(f"{side}: unknown sidecar keys {sorted(unknown)}")
        for key, value in meta.items():
            ok = _SIDECAR_TYPES[key]
            if not isinstance(value, ok) or (bool not in ok and isinstance(value, bool)):
                raise FormatError(f"{side}: {key} has wrong type {type(value).__name__}")
        if "scale" in meta:
            meta["scale"] = float(meta["scale"])
        desc = replace(desc, **meta)
        desc.validate(allow_any_scale)
    return pred, desc


def write_soft(pred: SoftPrediction, desc: AugDescriptor, path: str | Path) -> None:
    Path(path).write_bytes(encode_soft(pred, desc))


# -- label maps ---------------------------------------------------------------------

def check_labelmap(ids: np.ndarray, taxonomy: Taxonomy) -> None:
    bad = (ids >= len(taxonomy)) & (ids != VOID_ID)
    if bad.any():
        r, c = np.argwhere(bad)[0]
        raise FormatError(f"invalid id {ids[r, c]} at ({r}, {c}) for taxonomy {taxonomy.name!r} with {len(taxonomy)} classes")


def read_labelmap(path: str | Path, taxonomy: Taxonomy) -> LabelMap:
    """Load an 8-bit grayscale PNG. The taxonomy's void class becomes 255."""
    path = Path(path)
    try:
        with Image.open(path) as img:
            if img.mode != "L":
                raise FormatError(f"{path}: expected 8-bit single-channel PNG, got mode {img.mode}")
            ids = np.array(img, dtype=np.uint8)
    except (OSError, SyntaxError) as exc:
        raise FormatError(f"{path}: unreadable image: {exc}") from None
    try:
        check_labelmap(ids, taxonomy)
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from None
    if taxonomy.void_id is not None:
        ids[ids == taxonomy.void_id] = VOID_ID
    return LabelMap(ids)


def write_labelmap(label: LabelMap, path: str | Path) -> None:
    Image.fromarray(label.ids, mode="L").save(path, format="PNG")


def colorize(label: LabelMap, taxonomy: Taxonomy) -> np.ndarray:
    return taxonomy.palette()[label.ids]


def write_colorized(label: LabelMap, taxonomy: Taxonomy, path: str | Path) -> None:
    check_labelmap(label.ids, taxonomy)
    Image.fromarray(colorize(label, taxonomy), mode="RGB").save(path, format="PNG")
