"""
MITRE ATT&CK Technique Catalog

Loads and queries the pinned enterprise technique/tactic snapshot used for
labeling, tactic derivation, and prompt construction.

Catalog file format (UTF-8 JSON):
    {"version": "...", "entries": [
        {"technique_id": "T1059", "name": "...", "tactics": ["TA0002"], "deprecated": false},
        ...
    ]}
"""

import json
import re
from collections.abc import Iterable, Iterator, Mapping
from functools import cached_property
from pathlib import Path
from types import MappingProxyType

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from nidslabel.core.errors import CatalogError, UnknownTechniqueError, format_validation_error
from nidslabel.core.logging import get_logger

logger = get_logger(__name__)

TECHNIQUE_ID_PATTERN = re.compile(r"^T\d{4}(?:\.\d{3})?$")
TACTIC_ID_PATTERN = re.compile(r"^TA\d{4}$")

DEFAULT_CATALOG_PATH = Path(__file__).parent / "resources" / "enterprise-attack-snapshot.json"


def is_technique_id(value: str) -> bool:
    return bool(TECHNIQUE_ID_PATTERN.match(value))


class TechniqueEntry(BaseModel):
    """A single technique or sub-technique with its tactic set."""

    model_config = ConfigDict(frozen=True, populate_by_name=True)

    id: str = Field(alias="technique_id")
    name: str = Field(min_length=1)
    tactic_ids: frozenset[str] = Field(alias="tactics")
    deprecated: bool = False

    @field_validator("id")
    @classmethod
    def _check_id(cls, value: str) -> str:
        if not is_technique_id(value):
            raise ValueError(f"invalid technique id {value!r}")
        return value

    @field_validator("tactic_ids")
    @classmethod
    def _check_tactics(cls, value: frozenset[str]) -> frozenset[str]:
        if not value:
            raise ValueError("technique must belong to at least one tactic")
        bad = sorted(t for t in value if not TACTIC_ID_PATTERN.match(t))
        if bad:
            raise ValueError(f"invalid tactic id(s) {bad}")
        return value

    @property
    def is_sub(self) -> bool:
        return "." in self.id


class _CatalogFile(BaseModel):
    version: str = Field(min_length=1)
    entries: list[TechniqueEntry]


class AttackCatalog:
    """Immutable technique registry keyed by technique id.

    Lookups of unknown ids raise UnknownTechniqueError; there are no silent
    defaults. Safe for concurrent reads.
    """

    def __init__(self, entries: Iterable[TechniqueEntry], version: str) -> None:
        by_id: dict[str, TechniqueEntry] = {}
        for entry in entries:
            if entry.id in by_id:
                raise CatalogError(f"Duplicate technique id: {entry.id}")
            by_id[entry.id] = entry

        if not by_id:
            raise CatalogError("empty catalog")

        orphans = sorted(
            tid for tid in by_id if (parent := parent_of(tid)) is not None and parent not in by_id
        )
        if orphans:
            raise CatalogError(f"Sub-technique(s) without parent entry: {', '.join(orphans)}")

        self._entries: Mapping[str, TechniqueEntry] = MappingProxyType(dict(sorted(by_id.items())))
        self._version = version

    @property
    def version(self) -> str:
        return self._version

    @property
    def entries(self) -> Mapping[str, TechniqueEntry]:
        return self._entries

    def __contains__(self, technique_id: object) -> bool:
        return technique_id in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def entry(self, technique_id: str) -> TechniqueEntry:
        try:
            return self._entries[technique_id]
        except KeyError:
            raise UnknownTechniqueError(technique_id) from None

    def sorted_entries(self, active_only: bool = False) -> list[TechniqueEntry]:
        """Entries in lexicographic id order, optionally without deprecated ones."""
        return [e for e in self._entries.values() if not (active_only and e.deprecated)]

    @cached_property
    def tactic_universe(self) -> frozenset[str]:
        return frozenset(t for e in self._entries.values() for t in e.tactic_ids)

    def techniques_for_tactics(self, tactic_ids: Iterable[str]) -> list[str]:
        """Active technique ids whose tactic set intersects the given tactics, sorted."""
        wanted = frozenset(tactic_ids)
        return [e.id for e in self.sorted_entries(active_only=True) if e.tactic_ids & wanted]


def load_catalog(source: str | Path) -> AttackCatalog:
    """
    Load and validate a catalog snapshot file.

    Deprecated entries are retained and flagged.

    Args:
        source: Path to the catalog JSON file

    Returns:
        Validated AttackCatalog

    Raises:
        CatalogError: Malformed file (with line/column or field path),
            duplicate ids, empty catalog, or sub-techniques without parent
    """
    path = Path(source)
    text = path.read_text(encoding="utf-8")
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CatalogError(
            f"{path}:{exc.lineno}:{exc.colno}: malformed catalog JSON: {exc.msg}"
        ) from exc

    try:
        parsed = _CatalogFile.model_validate(raw)
    except ValidationError as exc:
        raise CatalogError(f"{path}: {format_validation_error(exc)}") from exc

    catalog = AttackCatalog(parsed.entries, parsed.version)
    deprecated = sum(1 for e in parsed.entries if e.deprecated)
    logger.info(
        "Loaded catalog %s: %d entries (%d deprecated) from %s",
        catalog.version,
        len(catalog),
        deprecated,
        path.name,
    )
    return catalog


def tactics_of(catalog: AttackCatalog, technique_id: str) -> frozenset[str]:
    """Return the full tactic set of a technique (all tactics of multi-tactic entries)."""
    return catalog.entry(technique_id).tactic_ids


def parent_of(technique_id: str) -> str | None:
    """Return the parent id of a sub-technique, or None for a base technique."""
    base, dot, _ = technique_id.partition(".")
    return base if dot else None


def technique_batches(
    catalog: AttackCatalog, batch_count: int, active_only: bool = False
) -> list[list[TechniqueEntry]]:
    """
    Partition the catalog into batch_count contiguous chunks of the sorted entries.

    Batch sizes differ by at most one; the larger batches come first.

    Args:
        catalog: Technique catalog
        batch_count: Number of batches, 1 <= batch_count <= number of entries
        active_only: Leave deprecated entries out of the partition

    Returns:
        Ordered list of batches

    Raises:
        CatalogError: If batch_count is out of range
    """
    entries = catalog.sorted_entries(active_only=active_only)
    if not 1 <= batch_count <= len(entries):
        raise CatalogError(f"batch_count must be between 1 and {len(entries)}, got {batch_count}")

    size, extra = divmod(len(entries), batch_count)
    batches: list[list[TechniqueEntry]] = []
    start = 0
    for index in range(batch_count):
        end = start + size + (1 if index < extra else 0)
        batches.append(entries[start:end])
        start = end
    return batches
