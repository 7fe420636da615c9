"""Access to the taxonomies, ontologies and manifests shipped with the package."""

from __future__ import annotations

from functools import lru_cache
from pathlib import Path

from .ontology import OntologyRelation, load_ontology
from .taxonomy import Taxonomy, load_taxonomy

DATA = Path(__file__).parent / "data"


def data_path(*parts: str) -> Path:
    return DATA.joinpath(*parts)


@lru_cache(maxsize=None)
def taxonomy(name: str) -> Taxonomy:
    return load_taxonomy(DATA / f"{name}.tax")


def bundled_taxonomies() -> dict[str, Taxonomy]:
    return {t.name: t for t in (taxonomy(p.stem) for p in sorted(DATA.glob("*.tax")))}


def ontology(name: str) -> OntologyRelation:
    """Load ``data/ontologies/<name>.ont``; taxonomies come from the header."""
    from .ontology import read_ontology_header

    path = DATA / "ontologies" / f"{name}.ont"
    extra, source = read_ontology_header(path)
    return load_ontology(path, taxonomy(extra), taxonomy(source))
