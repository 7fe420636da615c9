"""Ontology-constrained pseudo-label refinement for semantic segmentation."""

from .errors import FallbackError, FormatError, ParseError, TaxopriorError, ValidationError
from .manifest import (
    DatasetManifest,
    FrameEntry,
    ManifestSet,
    StatsTable,
    load_manifest,
    load_manifest_set,
    pair_frames,
    parse_manifest,
    parse_manifest_set,
    render_stats,
    stats,
    subsample,
)
from .metrics import ConfusionMatrix, EvalReport, accumulate, evaluate, iou
from .ontology import (
    ConstraintTable,
    Diagnostic,
    FallbackPolicy,
    OntologyRelation,
    build_constraint_table,
    load_ontology,
    parse_ontology,
    serialize_ontology,
    validate_ontology,
)
from .refine import (
    RefineConfig,
    RefineReport,
    constraint_mask,
    fuse_tta,
    harden,
    inverse_transform,
    refine_image,
)
from .simulator import SceneSpec, TeacherNoise, generate_scene, run_experiment, simulate_teacher
from .taxonomy import VOID_ID, ClassDef, Taxonomy, load_taxonomy, parse_taxonomy, serialize_taxonomy
from .tensorio import (
    AugDescriptor,
    LabelMap,
    SoftPrediction,
    decode_soft,
    encode_soft,
    read_labelmap,
    read_soft,
    write_labelmap,
    write_soft,
)

__all__ = [
    "AugDescriptor",
    "ClassDef",
    "ConfusionMatrix",
    "ConstraintTable",
    "DatasetManifest",
    "Diagnostic",
    "EvalReport",
    "FallbackError",
    "FallbackPolicy",
    "FormatError",
    "FrameEntry",
    "LabelMap",
    "ManifestSet",
    "OntologyRelation",
    "ParseError",
    "RefineConfig",
    "RefineReport",
    "SceneSpec",
    "SoftPrediction",
    "StatsTable",
    "Taxonomy",
    "TaxopriorError",
    "TeacherNoise",
    "VOID_ID",
    "ValidationError",
    "accumulate",
    "build_constraint_table",
    "constraint_mask",
    "decode_soft",
    "encode_soft",
    "evaluate",
    "fuse_tta",
    "generate_scene",
    "harden",
    "inverse_transform",
    "iou",
    "load_manifest",
    "load_manifest_set",
    "load_ontology",
    "load_taxonomy",
    "pair_frames",
    "parse_manifest",
    "parse_manifest_set",
    "parse_ontology",
    "parse_taxonomy",
    "read_labelmap",
    "read_soft",
    "refine_image",
    "render_stats",
    "run_experiment",
    "serialize_ontology",
    "serialize_taxonomy",
    "simulate_teacher",
    "stats",
    "subsample",
    "validate_ontology",
    "write_labelmap",
    "write_soft",
]

__version__ = "0.1.0"
