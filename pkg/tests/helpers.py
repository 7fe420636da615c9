"""Random instances and on-disk toy workspaces shared by several test modules."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from taxoprior import fixtures
from taxoprior.ontology import ConstraintTable
from taxoprior.simulator import SceneSpec, coarsen, generate_scene
from taxoprior.tensorio import (
    AugDescriptor,
    LabelMap,
    SoftPrediction,
    default_augmentations,
    scaled_size,
    write_labelmap,
    write_soft,
)

VOID = 255


def random_simplex(rng: np.random.Generator, h: int, w: int, c: int, zeros: float = 0.0) -> np.ndarray:
    """Float32 scores on the probability simplex; ``zeros`` is the chance a score is exactly 0."""
    x = rng.gamma(0.7, size=(h, w, c)) + 1e-3
    if zeros:
        x[rng.random((h, w, c)) < zeros] = 0.0
        dead = x.sum(axis=-1) == 0
        x[dead, 0] = 1.0
    return (x / x.sum(axis=-1, keepdims=True)).astype(np.float32)


def random_table(rng: np.random.Generator, n_extra: int, c: int, allow_empty: bool = True):
    rows = []
    for _ in range(n_extra):
        bits = int(rng.integers(0 if allow_empty else 1, 1 << c))
        rows.append(bits)
    void_row = 0
    for b in rows:
        void_row |= b
    table = ConstraintTable.from_rows(rows, void_row, c)
    allowed = {e: {k for k in range(c) if rows[e] >> k & 1} for e in range(n_extra)}
    allowed[VOID] = {k for k in range(c) if void_row >> k & 1}
    return table, allowed


def random_gt(rng: np.random.Generator, h: int, w: int, n_extra: int, void_share: float = 0.1) -> np.ndarray:
    gt = rng.integers(0, n_extra, size=(h, w)).astype(np.uint8)
    gt[rng.random((h, w)) < void_share] = VOID
    return gt


def random_instance(rng: np.random.Generator, max_hw: int = 16, max_c: int = 8):
    """(aug_preds, gt, table, allowed) with 1-4 augmentations of a random base image."""
    c = int(rng.integers(2, max_c + 1))
    h = int(rng.integers(1, max_hw + 1))
    w = int(rng.integers(1, max_hw + 1))
    n_extra = int(rng.integers(1, 6))
    table, allowed = random_table(rng, n_extra, c)
    gt = random_gt(rng, h, w, n_extra)
    augs = default_augmentations()
    pick = rng.choice(len(augs), size=int(rng.integers(1, 5)), replace=False)
    zeros = float(rng.choice([0.0, 0.3]))
    preds = []
    for i in sorted(pick):
        d = augs[i]
        sh, sw = scaled_size(h, d.scale), scaled_size(w, d.scale)
        if sh < 1 or sw < 1:
            continue
        preds.append((random_simplex(rng, sh, sw, c, zeros), d))
    if not preds:
        preds.append((random_simplex(rng, h, w, c, zeros), AugDescriptor()))
    return preds, gt, table, allowed


def as_pkg(preds):
    return [(SoftPrediction(s), d) for s, d in preds]


def as_oracle(preds):
    return [(s, d.hflip, d.scale) for s, d in preds]


TOY_MANIFEST = """\
# three-frame toy dataset labelled in the coarse simulator taxonomy
dataset toy taxonomy sim-coarse ontology sim.ont
frame f000 gt gt/f000.png
frame f001 gt gt/f001.png
frame f002 gt gt/f002.png
"""


def build_toy_workspace(root: Path, seed: int = 0, height: int = 12, width: int = 16) -> dict:
    """GT PNGs plus all 14 augmented predictions per frame under ``it1/predictions``."""
    rng = np.random.default_rng(seed)
    rel = fixtures.ontology("sim")
    fine_tax = rel.source
    (root / "gt").mkdir(parents=True, exist_ok=True)
    pred_root = root / "it1" / "predictions"
    frames = {}
    for f in range(3):
        fid = f"f{f:03d}"
        fine = generate_scene(SceneSpec(height, width, 6, fine_tax, seed * 10 + f))
        gt = coarsen(fine, rel).ids.copy()
        gt[0, : 2 + f] = VOID
        write_labelmap(LabelMap(gt), root / "gt" / f"{fid}.png")
        preds = []
        fdir = pred_root / fid
        fdir.mkdir(parents=True, exist_ok=True)
        for d in default_augmentations():
            sh, sw = scaled_size(height, d.scale), scaled_size(width, d.scale)
            s = random_simplex(rng, sh, sw, len(fine_tax))
            write_soft(SoftPrediction(s), d, fdir / f"{d.name}.sftp")
            preds.append((s, d))
        frames[fid] = (preds, gt)
    (root / "toy.manifest").write_text(TOY_MANIFEST, encoding="utf-8")
    return frames
