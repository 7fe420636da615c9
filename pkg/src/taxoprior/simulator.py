"""Synthetic scenes for checking what constraint masking buys.

A fine-grained Voronoi scene plays the role of the unknown truth in the
source taxonomy; coarsening it through an ontology gives the extra
dataset's ground truth; a noisy teacher supplies soft predictions. Because
the coarse label of every pixel admits its true fine class, masking can
only remove wrong competitors, so constrained accuracy never drops below
unconstrained accuracy.

Random numbers come from NumPy's PCG64 bit generator. Each trial draws
from ``SeedSequence(base_seed, spawn_key=(trial, stream))`` with stream 0
for the scene and 1 for the teacher noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .metrics import ConfusionMatrix
from .ontology import OntologyRelation, build_constraint_table
from .refine import RefineConfig, constraint_mask, harden
from .taxonomy import VOID_ID, Taxonomy
from .tensorio import LabelMap, SoftPrediction, colorize

RNG_ALGORITHM = "numpy PCG64 via SeedSequence(base_seed, spawn_key=(trial, stream))"
SCHEMA = 1


@dataclass(frozen=True)
class SceneSpec:
    height: int
    width: int
    num_cells: int
    taxonomy: Taxonomy
    seed: int

    def __post_init__(self) -> None:
        if self.num_cells < 1:
            raise ValueError("num_cells must be >= 1")
        if self.height < 8 or self.width < 8:
            raise ValueError("scenes must be at least 8x8")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in 64 bits")
        if not [c for c in self.taxonomy.classes if not c.is_void]:
            raise ValueError("taxonomy has no non-void class")


@dataclass(frozen=True)
class TeacherNoise:
    """Logit model: ``beta`` on the true class, ``gamma`` on confused classes, Gaussian ``sigma``."""

    beta: float
    sigma: float = 0.0
    confusions: tuple[tuple[int, int, float], ...] = ()
    seed: int = 0

    def __post_init__(self) -> None:
        values = [self.beta, self.sigma, *(g for _, _, g in self.confusions)]
        if not all(math.isfinite(v) and v >= 0 for v in values):
            raise ValueError("beta, sigma and confusion strengths must be finite and non-negative")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in 64 bits")


def rng_for(base_seed: int, trial: int = 0, stream: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(base_seed, spawn_key=(trial, stream))))


def generate_scene(spec: SceneSpec, rng: np.random.Generator | None = None) -> LabelMap:
    """Label each pixel with the class of its nearest Voronoi seed."""
    rng = rng or rng_for(spec.seed)
    labels = np.array([c.id for c in spec.taxonomy.classes if not c.is_void])
    sy = rng.uniform(0, spec.height, spec.num_cells)
    sx = rng.uniform(0, spec.width, spec.num_cells)
    cell_class = labels[rng.integers(0, len(labels), spec.num_cells)]
    yy = np.arange(spec.height)[:, None, None] + 0.5
    xx = np.arange(spec.width)[None, :, None] + 0.5
    d2 = (yy - sy) ** 2 + (xx - sx) ** 2
    owner = np.argmin(d2, axis=-1)
    return LabelMap(cell_class[owner].astype(np.uint8))


def partition_lut(rel: OntologyRelation) -> np.ndarray:
    """Fine (source) id -> owning coarse (extra) id; -1 unowned, -2 ambiguous."""
    lut = np.full(256, -1, dtype=np.int64)
    for key, targets in rel.entries.items():
        if key == VOID_ID:
            continue
        for s in targets - rel.excluded_source:
            lut[s] = -2 if lut[s] != -1 else key
    return lut


def coarsen(fine: LabelMap, rel: OntologyRelation) -> LabelMap:
    lut = partition_lut(rel)
    present = np.unique(fine.ids)
    for s in present:
        if s == VOID_ID:
            continue
        if lut[s] == -1:
            raise ValueError(f"fine class {rel.source.classes[s].name!r} appears in no mapping entry")
        if lut[s] == -2:
            raise ValueError(f"fine class {rel.source.classes[s].name!r} appears in several mapping entries")
    lut[VOID_ID] = VOID_ID
    out = lut[fine.ids]
    return LabelMap(out.astype(np.uint8))


def simulate_teacher(fine: LabelMap, noise: TeacherNoise, num_classes: int,
                     rng: np.random.Generator | None = None) -> SoftPrediction:
    ids = fine.ids
    valid = ids != VOID_ID
    if (ids[valid] >= num_classes).any():
        raise ValueError("fine label id exceeds class count")
    for a, b, _ in noise.confusions:
        if not (0 <= a < num_classes and 0 <= b < num_classes):
            raise ValueError(f"confusion pair ({a}, {b}) out of range")
    rng = rng or rng_for(noise.seed)
    h, w = ids.shape
    logits = np.zeros((h, w, num_classes), dtype=np.float64)
    onehot = (ids[..., None] == np.arange(num_classes)) & valid[..., None]
    logits += noise.beta * onehot
    for a, b, gamma in noise.confusions:
        logits[..., b] += gamma * (ids == a)
    if noise.sigma > 0:
        logits += noise.sigma * rng.standard_normal((h, w, num_classes))
    logits -= logits.max(axis=-1, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=-1, keepdims=True)
    return SoftPrediction(p.astype(np.float32))


@dataclass
class ExperimentReport:
    trials: list[dict] = field(default_factory=list)
    params: dict = field(default_factory=dict)

    @staticmethod
    def _mean(values: list[float]) -> float:
        return sum(values) / len(values) if values else 0.0

    @property
    def accuracy_unconstrained(self) -> float:
        return self._mean([t["accuracy_unconstrained"] for t in self.trials])

    @property
    def accuracy_constrained(self) -> float:
        return self._mean([t["accuracy_constrained"] for t in self.trials])

    @property
    def fixed(self) -> int:
        return sum(t["fixed"] for t in self.trials)

    @property
    def introduced(self) -> int:
        return sum(t["introduced"] for t in self.trials)

    def to_json(self) -> dict:
        return {
            "schema": SCHEMA,
            "params": self.params,
            "accuracy_unconstrained": self.accuracy_unconstrained,
            "accuracy_constrained": self.accuracy_constrained,
            "diff": self.accuracy_constrained - self.accuracy_unconstrained,
            "fixed": self.fixed,
            "introduced": self.introduced,
            "trials": self.trials,
        }


def _iou_list(cm: ConfusionMatrix) -> list[float | None]:
    return [cm.iou(c) for c in range(cm.num_classes)]


def run_trial(spec: SceneSpec, noise: TeacherNoise, rel: OntologyRelation, cfg: RefineConfig,
              trial: int = 0, table=None):
    """One trial; returns (stats dict, fine, unconstrained, constrained)."""
    table = table or build_constraint_table(rel)
    fine = generate_scene(spec, rng_for(spec.seed, trial, 0))
    coarse = coarsen(fine, rel)
    soft = simulate_teacher(fine, noise, len(rel.source), rng_for(noise.seed, trial, 1))
    plain = harden(soft)
    masked, rep = constraint_mask(soft, coarse, table, cfg)
    constrained = harden(masked, rep.fallback_mask, cfg)

    truth = fine.ids
    valid = truth != VOID_ID
    ok_plain = (plain.ids == truth) & valid
    ok_con = (constrained.ids == truth) & valid
    n = int(valid.sum())
    confused = np.isin(truth, [a for a, _, _ in noise.confusions]) & valid
    nc = int(confused.sum())

    cm_plain = ConfusionMatrix(len(rel.source)).update(plain, fine)
    cm_con = ConfusionMatrix(len(rel.source)).update(constrained, fine)
    stats = {
        "trial": trial,
        "pixels": n,
        "accuracy_unconstrained": int(ok_plain.sum()) / n if n else 1.0,
        "accuracy_constrained": int(ok_con.sum()) / n if n else 1.0,
        "fixed": int((ok_con & ~ok_plain).sum()),
        "introduced": int((ok_plain & ~ok_con).sum()),
        "confused_pixels": nc,
        "confused_accuracy_unconstrained": int((ok_plain & confused).sum()) / nc if nc else None,
        "confused_accuracy_constrained": int((ok_con & confused).sum()) / nc if nc else None,
        "fallback_pixels": rep.pixels_fallback,
        "iou_unconstrained": _iou_list(cm_plain),
        "iou_constrained": _iou_list(cm_con),
    }
    return stats, fine, plain, constrained


def run_experiment(spec: SceneSpec, noise: TeacherNoise, rel: OntologyRelation,
                   cfg: RefineConfig | None = None, trials: int = 1) -> ExperimentReport:
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if rel.source.name != spec.taxonomy.name:
        raise ValueError("the relation's source taxonomy must be the scene taxonomy")
    cfg = cfg or RefineConfig()
    table = build_constraint_table(rel)
    report = ExperimentReport(params={
        "height": spec.height,
        "width": spec.width,
        "cells": spec.num_cells,
        "scene_seed": spec.seed,
        "beta": noise.beta,
        "sigma": noise.sigma,
        "confusions": [
            [rel.source.classes[a].name, rel.source.classes[b].name, g] for a, b, g in noise.confusions
        ],
        "noise_seed": noise.seed,
        "trials": trials,
        "fallback": cfg.fallback.value,
        "fine_taxonomy": rel.source.name,
        "coarse_taxonomy": rel.extra.name,
        "rng": RNG_ALGORITHM,
    })
    for i in range(trials):
        stats, *_ = run_trial(spec, noise, rel, cfg, i, table)
        report.trials.append(stats)
    return report


def write_triptych(fine: LabelMap, plain: LabelMap, constrained: LabelMap, taxonomy: Taxonomy,
                   path: str | Path, gap: int = 4) -> None:
    """Fine truth | unconstrained | constrained, side by side."""
    panels = [colorize(m, taxonomy) for m in (fine, plain, constrained)]
    h, w, _ = panels[0].shape
    canvas = np.full((h, 3 * w + 2 * gap, 3), 255, dtype=np.uint8)
    for k, p in enumerate(panels):
        canvas[:, k * (w + gap): k * (w + gap) + w] = p
    Image.fromarray(canvas, mode="RGB").save(path, format="PNG")
