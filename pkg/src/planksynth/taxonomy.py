"""Five-rank taxonomic hierarchy and label-granularity remapping.

Source labels come with a Species..Class lineage; training labels use only
the three coarsest ranks (Family by default, Order/Class for granularity
ablations).  The table is loaded from a JSON file, validated once, and then
read-only.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import Iterable, Iterator

from .errors import BrokenTaxonomyError, ConfigError

__all__ = [
    "RANKS",
    "LABEL_RANKS",
    "Taxon",
    "TaxonomyTable",
    "load_taxonomy",
    "ancestor_at",
    "remap_annotations",
]

# Ascending: a parent must sit strictly later in this order than its child.
RANKS = ("Species", "Genus", "Family", "Order", "Class")

# Ranks ever used as PCI label granularity.
LABEL_RANKS = ("Family", "Order", "Class")


@dataclass(frozen=True)
class Taxon:
    id: int
    name: str
    rank: str
    parent_id: int | None = None


def rank_index(rank: str) -> int:
    try:
        return RANKS.index(rank)
    except ValueError:
        raise ConfigError(f"unknown taxonomic rank {rank!r}; expected one of {RANKS}")


class TaxonomyTable:
    """Immutable id -> Taxon lookup with validated parent links."""

    def __init__(self, taxa: Iterable[Taxon]):
        self._by_id: dict[int, Taxon] = {}
        for t in taxa:
            if t.id in self._by_id:
                raise ConfigError(f"duplicate taxon id {t.id}")
            rank_index(t.rank)
            self._by_id[t.id] = t
        for t in self._by_id.values():
            if t.parent_id is None:
                continue
            parent = self._by_id.get(t.parent_id)
            if parent is None:
                raise ConfigError(
                    f"taxon {t.id} ({t.name}) has missing parent id {t.parent_id}"
                )
            if rank_index(parent.rank) <= rank_index(t.rank):
                raise ConfigError(
                    f"taxon {t.id} ({t.name}, {t.rank}) has parent {parent.id} "
                    f"of rank {parent.rank}; parents must be strictly coarser"
                )
        # Strict rank ascent makes cycles impossible, so no separate check.

    def __len__(self) -> int:
        return len(self._by_id)

    def __iter__(self) -> Iterator[Taxon]:
        return iter(self._by_id.values())

    def __contains__(self, taxon_id: int) -> bool:
        return taxon_id in self._by_id

    def __getitem__(self, taxon_id: int) -> Taxon:
        try:
            return self._by_id[taxon_id]
        except KeyError:
            raise BrokenTaxonomyError(f"taxon id {taxon_id} not in table")

    def ancestor_at(self, taxon_id: int, rank: str) -> Taxon:
        """Walk parent links up to the unique ancestor at ``rank``."""
        target = rank_index(rank)
        t = self[taxon_id]
        if rank_index(t.rank) > target:
            raise BrokenTaxonomyError(
                f"taxon {t.id} ({t.name}) already sits above rank {rank}"
            )
        while rank_index(t.rank) < target:
            if t.parent_id is None:
                raise BrokenTaxonomyError(
                    f"taxon {taxon_id} has no ancestor at rank {rank}: "
                    f"chain ends at {t.id} ({t.name}, {t.rank})"
                )
            t = self[t.parent_id]
        if t.rank != rank:
            raise BrokenTaxonomyError(
                f"taxon {taxon_id} has no ancestor at rank {rank}: "
                f"chain skips from below to {t.rank}"
            )
        return t


def ancestor_at(taxon: Taxon | int, rank: str, table: TaxonomyTable) -> Taxon:
    """Functional form of :meth:`TaxonomyTable.ancestor_at`."""
    taxon_id = taxon.id if isinstance(taxon, Taxon) else taxon
    return table.ancestor_at(taxon_id, rank)


def load_taxonomy(path) -> TaxonomyTable:
    """Load a taxonomy table from a JSON array of taxon records."""
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    if not isinstance(raw, list):
        raise ConfigError(f"{path}: taxonomy file must be a JSON array")
    taxa = []
    for rec in raw:
        try:
            taxa.append(
                Taxon(
                    id=int(rec["id"]),
                    name=str(rec["name"]),
                    rank=str(rec["rank"]),
                    parent_id=None if rec.get("parent_id") is None else int(rec["parent_id"]),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"{path}: bad taxon record {rec!r}: {exc}")
    return TaxonomyTable(taxa)


def remap_annotations(aset, rank: str, table: TaxonomyTable):
    """Rewrite an annotation set's category ids to the ancestors at ``rank``.

    Masks, boxes and image records are untouched; the category table becomes
    the distinct ancestor taxa, sorted by id.  Idempotent: remapping a set
    already at ``rank`` reproduces it.
    """
    from .dataset_io import CategoryRecord  # local import avoids a cycle

    if rank not in LABEL_RANKS:
        raise ConfigError(f"label rank must be one of {LABEL_RANKS}, got {rank!r}")
    used = {c.id for c in aset.categories} | {a.category_id for a in aset.annotations}
    mapping = {cid: table.ancestor_at(cid, rank) for cid in sorted(used)}
    new_cats = {
        anc.id: CategoryRecord(id=anc.id, name=anc.name, rank=anc.rank, parent_id=anc.parent_id)
        for anc in mapping.values()
    }
    return replace(
        aset,
        categories=[new_cats[i] for i in sorted(new_cats)],
        annotations=[replace(a, category_id=mapping[a.category_id].id) for a in aset.annotations],
    )
