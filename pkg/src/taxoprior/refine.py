"""Prediction refinement: undo augmentations, average, mask by ontology, argmax.

Floating-point contract (relied on by the brute-force tests):

* resizing and averaging happen in float64 and are cast to float32 once;
* per-pixel channel sums accumulate sequentially over channels;
* fused inputs are summed in a canonical order (sorted by content digest),
  which makes fusion bit-exactly independent of input order;
* argmax ties resolve to the lowest class id.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import FallbackError
from .ontology import ConstraintTable, FallbackPolicy
from .tensorio import SIMPLEX_TOL, AugDescriptor, LabelMap, SoftPrediction
from .taxonomy import VOID_ID

SCHEMA = 1


@dataclass(frozen=True)
class RefineConfig:
    fallback: FallbackPolicy = FallbackPolicy.VOID
    renormalize_output: bool = False
    simplex_tol: float = SIMPLEX_TOL
    report_fallback_pixels: bool = True
    max_listed_fallback: int = 100

    def __post_init__(self) -> None:
        if not self.simplex_tol > 0:
            raise ValueError("simplex_tol must be positive")


@dataclass
class RefineReport:
    pixels_total: int = 0
    pixels_constrained: int = 0
    pixels_fallback: int = 0
    pixels_changed_by_mask: int = 0
    histogram: dict[int, int] = field(default_factory=dict)
    fallback_pixels: list[tuple[int, int]] = field(default_factory=list)
    fallback_mask: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def pixels_resolved(self) -> int:
        return self.pixels_total - self.pixels_fallback

    def to_json(self) -> dict:
        total = self.pixels_total or 1
        return {
            "schema": SCHEMA,
            "pixels_total": self.pixels_total,
            "pixels_constrained": self.pixels_constrained,
            "pixels_fallback": self.pixels_fallback,
            "pixels_changed_by_mask": self.pixels_changed_by_mask,
            "fraction_constrained": self.pixels_constrained / total,
            "fraction_fallback": self.pixels_fallback / total,
            "fraction_changed": self.pixels_changed_by_mask / total,
            "histogram": {str(k): v for k, v in sorted(self.histogram.items())},
            "fallback_pixels": [list(p) for p in self.fallback_pixels],
        }

    @classmethod
    def merge(cls, reports: Iterable[RefineReport]) -> RefineReport:
        """Sum counts; per-pixel detail is not carried over."""
        out = cls()
        for r in reports:
            out.pixels_total += r.pixels_total
            out.pixels_constrained += r.pixels_constrained
            out.pixels_fallback += r.pixels_fallback
            out.pixels_changed_by_mask += r.pixels_changed_by_mask
            for k, v in r.histogram.items():
                out.histogram[k] = out.histogram.get(k, 0) + v
        return out


# -- numeric helpers ------------------------------------------------------------------

def channel_sum(x: np.ndarray) -> np.ndarray:
    """Per-pixel sum over the last axis, accumulated channel by channel."""
    s = x[..., 0].astype(np.float64)
    for c in range(1, x.shape[-1]):
        s += x[..., c]
    return s


def _axis_weights(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    ratio = n_in / n_out
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * ratio - 0.5
    src = np.minimum(np.maximum(src, 0.0), float(n_in - 1))
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def resize_bilinear(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centred bilinear resize of an H x W x C array, in float64."""
    x = np.asarray(x, dtype=np.float64)
    y0, y1, wy = _axis_weights(x.shape[0], out_h)
    x0, x1, wx = _axis_weights(x.shape[1], out_w)
    top, bot = x[y0], x[y1]
    wxb = wx[None, :, None]
    t = (1.0 - wxb) * top[:, x0] + wxb * top[:, x1]
    b = (1.0 - wxb) * bot[:, x0] + wxb * bot[:, x1]
    wyb = wy[:, None, None]
    return (1.0 - wyb) * t + wyb * b


def _check_simplex(x: np.ndarray, tol: float, stage: str) -> None:
    err = np.abs(channel_sum(x) - 1.0)
    if (err > tol).any():
        r, c = np.argwhere(err > tol)[0]
        raise ValueError(f"{stage}: pixel ({r}, {c}) is off the simplex by {err[r, c]:.3g}")


# -- operations ----------------------------------------------------------------------------

def inverse_transform(pred: SoftPrediction, desc: AugDescriptor) -> SoftPrediction:
    """Map a prediction made on an augmented input back to base geometry.

    Resizing (if any) comes first, then the flip is undone. Scale 1 is
    exact: no arithmetic touches the scores.
    """
    if desc.base_height is None or desc.base_width is None:
        if desc.scale != 1.0:
            raise ValueError("descriptor needs base geometry to undo a rescale")
        desc = desc.with_base(pred.height, pred.width)
    expected = desc.scaled_shape
    if (pred.height, pred.width) != expected:
        raise ValueError(
            f"prediction is {pred.height}x{pred.width} but {desc.name} of a "
            f"{desc.base_height}x{desc.base_width} base should be {expected[0]}x{expected[1]}"
        )
    if desc.scale == 1.0:
        scores = pred.scores
        if desc.hflip:
            scores = np.ascontiguousarray(scores[:, ::-1])
        return SoftPrediction(scores)
    out = resize_bilinear(pred.scores, desc.base_height, desc.base_width)
    out /= channel_sum(out)[..., None]
    if desc.hflip:
        out = out[:, ::-1]
    return SoftPrediction(np.ascontiguousarray(out, dtype=np.float32))


def _digest(pred: SoftPrediction) -> bytes:
    return hashlib.blake2b(np.ascontiguousarray(pred.scores).tobytes(), digest_size=16).digest()


def fuse_tta(preds: Sequence[SoftPrediction]) -> SoftPrediction:
    """Per-score mean over augmentations already in base geometry."""
    if not preds:
        raise ValueError("cannot fuse an empty list of predictions")
    shape = preds[0].shape
    for p in preds[1:]:
        if p.shape != shape:
            raise ValueError(f"shape mismatch in fusion: {p.shape} vs {shape}")
    if len(preds) == 1:
        return preds[0]
    acc = np.zeros(shape, dtype=np.float64)
    for p in sorted(preds, key=_digest):
        acc += p.scores
    acc /= len(preds)
    return SoftPrediction(acc.astype(np.float32))


def _allowed(gt: LabelMap, table: ConstraintTable) -> np.ndarray:
    return np.take(table.lookup, gt.ids, axis=0)


def _check_pair(pred: SoftPrediction, gt: LabelMap, table: ConstraintTable) -> None:
    if (pred.height, pred.width) != gt.shape:
        raise ValueError(f"prediction is {pred.height}x{pred.width} but ground truth is {gt.height}x{gt.width}")
    if pred.channels != table.n_source:
        raise ValueError(f"prediction has {pred.channels} channels but the source taxonomy has {table.n_source}")


def _mask(pred: SoftPrediction, gt: LabelMap, table: ConstraintTable, cfg: RefineConfig):
    """Masked float32 scores, fallback mask and constrained-pixel count."""
    _check_pair(pred, gt, table)
    scores = pred.scores
    masked = scores * _allowed(gt, table)
    fallback = masked.sum(axis=-1) == 0
    n_fallback = int(fallback.sum())
    if n_fallback:
        if cfg.fallback is FallbackPolicy.ERROR:
            r, c = np.argwhere(fallback)[0]
            raise FallbackError(int(r), int(c), int(gt.ids[r, c]))
        if cfg.fallback is FallbackPolicy.UNCONSTRAINED:
            masked[fallback] = scores[fallback]
    if cfg.renormalize_output:
        keep = ~fallback if cfg.fallback is FallbackPolicy.VOID else np.ones_like(fallback)
        sums = channel_sum(masked)
        norm = masked.astype(np.float64)
        norm[keep] /= sums[keep][:, None]
        masked = norm.astype(np.float32)
    row_size = table.row_size()[gt.ids]
    n_constrained = int((row_size < table.n_source).sum())
    return masked, fallback, n_constrained


def _argmax(scores: np.ndarray) -> np.ndarray:
    return np.argmax(scores, axis=-1).astype(np.uint8)


def _report(before: np.ndarray, after: np.ndarray, fallback: np.ndarray, n_constrained: int,
            cfg: RefineConfig) -> RefineReport:
    hist = np.bincount(after.ravel(), minlength=256)
    listed: list[tuple[int, int]] = []
    if cfg.report_fallback_pixels and fallback.any():
        listed = [(int(r), int(c)) for r, c in np.argwhere(fallback)[: cfg.max_listed_fallback]]
    return RefineReport(
        pixels_total=int(before.size),
        pixels_constrained=n_constrained,
        pixels_fallback=int(fallback.sum()),
        pixels_changed_by_mask=int((before != after).sum()),
        histogram={int(k): int(hist[k]) for k in np.flatnonzero(hist)},
        fallback_pixels=listed,
        fallback_mask=fallback,
    )


def constraint_mask(pred: SoftPrediction, gt: LabelMap, table: ConstraintTable,
                    cfg: RefineConfig | None = None) -> tuple[SoftPrediction, RefineReport]:
    """Zero every score whose class is not allowed by the pixel's ground truth."""
    cfg = cfg or RefineConfig()
    masked, fallback, n_constrained = _mask(pred, gt, table, cfg)
    before = _argmax(pred.scores)
    after = _harden_array(masked, fallback, cfg)
    return SoftPrediction(masked), _report(before, after, fallback, n_constrained, cfg)


def _harden_array(scores: np.ndarray, fallback: np.ndarray | None, cfg: RefineConfig) -> np.ndarray:
    out = _argmax(scores)
    if fallback is not None and cfg.fallback is FallbackPolicy.VOID:
        out[fallback] = VOID_ID
    return out


def harden(pred: SoftPrediction, fallback_mask: np.ndarray | None = None,
           cfg: RefineConfig | None = None) -> LabelMap:
    """Argmax per pixel, lowest id on ties; void where fallback applies."""
    return LabelMap(_harden_array(pred.scores, fallback_mask, cfg or RefineConfig()))


def _hard_labels(pred: SoftPrediction, gt: LabelMap, table: ConstraintTable, cfg: RefineConfig):
    """Masked argmax without materializing the masked tensor where it can be avoided.

    A pixel whose unmasked argmax is allowed (and positive) keeps it, since
    masking only removes competitors. The masked argmax is computed only for
    the remaining pixels, or for the whole image when they are the majority.
    Returns (before, after, fallback, n_constrained); ``after`` has no
    fallback policy applied yet.
    """
    _check_pair(pred, gt, table)
    scores = pred.scores
    c = scores.shape[-1]
    flat = scores.reshape(-1, c)
    gt_flat = gt.ids.ravel()
    before = _argmax(scores)
    b_flat = before.ravel()
    keep = table.lookup[gt_flat, b_flat] & (flat[np.arange(flat.shape[0]), b_flat] > 0)
    after = b_flat.copy()
    fallback = np.zeros(b_flat.shape, dtype=bool)
    todo = np.flatnonzero(~keep)
    if todo.size:
        if 4 * todo.size < b_flat.size:
            sub = flat[todo] * np.take(table.lookup, gt_flat[todo], axis=0)
            pick = np.argmax(sub, axis=-1)
            after[todo] = pick
            fallback[todo] = sub[np.arange(todo.size), pick] == 0
        else:
            masked = flat * np.take(table.lookup, gt_flat, axis=0)
            pick = np.argmax(masked, axis=-1)
            after[:] = pick
            fallback = masked[np.arange(masked.shape[0]), pick] == 0
    n_constrained = int((table.row_size()[gt.ids] < table.n_source).sum())
    return before, after.reshape(before.shape), fallback.reshape(before.shape), n_constrained


def _canonical_fused(aug_preds, gt: LabelMap, cfg: RefineConfig) -> SoftPrediction:
    if not aug_preds:
        raise ValueError("no augmented predictions given")
    ordered = sorted(aug_preds, key=lambda pd: (pd[1].scale, pd[1].hflip))
    canon = []
    for pred, desc in ordered:
        if desc.base_height is None or desc.base_width is None:
            desc = desc.with_base(gt.height, gt.width)
        canon.append(inverse_transform(pred, desc))
    fused = fuse_tta(canon)
    if len(canon) > 1:
        _check_simplex(fused.scores, cfg.simplex_tol, "fused prediction")
    return fused


def refine_image(aug_preds: Sequence[tuple[SoftPrediction, AugDescriptor]], gt: LabelMap,
                 table: ConstraintTable, cfg: RefineConfig | None = None) -> tuple[LabelMap, RefineReport]:
    """Inverse-transform, fuse, mask and harden one image."""
    cfg = cfg or RefineConfig()
    fused = _canonical_fused(aug_preds, gt, cfg)
    before, after, fallback, n_constrained = _hard_labels(fused, gt, table, cfg)
    if fallback.any():
        if cfg.fallback is FallbackPolicy.ERROR:
            r, c = np.argwhere(fallback)[0]
            raise FallbackError(int(r), int(c), int(gt.ids[r, c]))
        if cfg.fallback is FallbackPolicy.UNCONSTRAINED:
            after[fallback] = before[fallback]
        else:
            after[fallback] = VOID_ID
    return LabelMap(after), _report(before, after, fallback, n_constrained, cfg)


def refine_image_with_scores(aug_preds: Sequence[tuple[SoftPrediction, AugDescriptor]], gt: LabelMap,
                             table: ConstraintTable, cfg: RefineConfig | None = None
                             ) -> tuple[LabelMap, RefineReport, SoftPrediction]:
    """Like :func:`refine_image` but also returns the masked soft scores."""
    cfg = cfg or RefineConfig()
    fused = _canonical_fused(aug_preds, gt, cfg)
    masked, fallback, n_constrained = _mask(fused, gt, table, cfg)
    before = _argmax(fused.scores)
    after = _harden_array(masked, fallback, cfg)
    report = _report(before, after, fallback, n_constrained, cfg)
    return LabelMap(after), report, SoftPrediction(masked)
