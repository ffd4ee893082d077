"""
Tests for the ATT&CK technique catalog.
"""

import json

import pytest

from nidslabel.attack.catalog import (
    AttackCatalog,
    TechniqueEntry,
    is_technique_id,
    load_catalog,
    parent_of,
    tactics_of,
    technique_batches,
)
from nidslabel.core.errors import CatalogError, UnknownTechniqueError


def _write_catalog(tmp_path, entries, version="test-1"):
    path = tmp_path / "catalog.json"
    path.write_text(json.dumps({"version": version, "entries": entries}), encoding="utf-8")
    return path


def _entry(tid, tactics=("TA0002",), deprecated=False):
    return {
        "technique_id": tid,
        "name": f"Technique {tid}",
        "tactics": list(tactics),
        "deprecated": deprecated,
    }


# ── Loading ──────────────────────────────────────────────────────────────────


class TestLoadCatalog:
    def test_bundled_snapshot(self, catalog):
        assert len(catalog) == 30
        assert catalog.version == "enterprise-attack-15.1-network-subset"

    def test_deprecated_entries_retained_and_flagged(self, catalog):
        assert "T1043" in catalog
        assert catalog.entry("T1043").deprecated
        assert len(catalog.sorted_entries(active_only=True)) == 29

    def test_entries_sorted_by_id(self, catalog):
        ids = [e.id for e in catalog.sorted_entries()]
        assert ids == sorted(ids)

    def test_empty_entry_list(self, tmp_path):
        with pytest.raises(CatalogError, match="empty catalog"):
            load_catalog(_write_catalog(tmp_path, []))

    def test_orphan_sub_technique(self, tmp_path):
        with pytest.raises(CatalogError, match="T9999.001"):
            load_catalog(_write_catalog(tmp_path, [_entry("T1059"), _entry("T9999.001")]))

    def test_duplicate_id(self, tmp_path):
        with pytest.raises(CatalogError, match="Duplicate technique id: T1059"):
            load_catalog(_write_catalog(tmp_path, [_entry("T1059"), _entry("T1059")]))

    def test_malformed_json_reports_position(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text('{"version": "x",\n "entries": [\n}', encoding="utf-8")
        with pytest.raises(CatalogError, match=r"broken.json:3:"):
            load_catalog(path)

    def test_bad_field_names_the_field(self, tmp_path):
        path = _write_catalog(tmp_path, [_entry("T12")])
        with pytest.raises(CatalogError, match="entries -> 0 -> technique_id"):
            load_catalog(path)

    def test_technique_without_tactics(self, tmp_path):
        with pytest.raises(CatalogError, match="at least one tactic"):
            load_catalog(_write_catalog(tmp_path, [_entry("T1059", tactics=())]))


# ── Lookups ──────────────────────────────────────────────────────────────────


class TestLookups:
    def test_tactics_of_single(self, catalog):
        assert tactics_of(catalog, "T1059") == {"TA0002"}

    def test_tactics_of_multi_tactic(self, catalog):
        assert tactics_of(catalog, "T1133") == {"TA0001", "TA0003"}

    def test_unknown_id_raises(self, catalog):
        with pytest.raises(UnknownTechniqueError, match="T0000"):
            tactics_of(catalog, "T0000")

    def test_unknown_id_is_a_key_error(self, catalog):
        with pytest.raises(KeyError):
            catalog.entry("T0000")

    def test_tactics_within_universe(self, catalog):
        for entry in catalog.sorted_entries():
            assert entry.tactic_ids
            assert entry.tactic_ids <= catalog.tactic_universe

    def test_techniques_for_tactics_skips_deprecated(self, catalog):
        pool = catalog.techniques_for_tactics({"TA0011"})
        assert pool == ["T1071", "T1071.001", "T1071.004", "T1090", "T1105"]

    def test_techniques_for_tactics_union(self, catalog):
        pool = catalog.techniques_for_tactics({"TA0040", "TA0043"})
        assert pool == ["T1499", "T1595"]


class TestParentOf:
    @pytest.mark.parametrize(
        "tid, parent",
        [("T1566.001", "T1566"), ("T1566", None), ("T1059.004", "T1059")],
    )
    def test_parent(self, tid, parent):
        assert parent_of(tid) == parent

    def test_parent_of_parent_is_absent(self, catalog):
        for tid in catalog:
            parent = parent_of(tid)
            assert parent is None or parent_of(parent) is None

    def test_technique_id_pattern(self):
        assert is_technique_id("T1059")
        assert is_technique_id("T1059.004")
        assert not is_technique_id("T99")
        assert not is_technique_id("TA0002")
        assert not is_technique_id("T1059.4")


# ── Batching ─────────────────────────────────────────────────────────────────


class TestTechniqueBatches:
    def test_thirty_entries_eleven_batches(self, catalog):
        sizes = [len(b) for b in technique_batches(catalog, 11)]
        assert sizes == [3] * 8 + [2] * 3

    def test_even_split(self):
        entries = [
            TechniqueEntry(technique_id=f"T{1000 + i}", name="x", tactics={"TA0002"})
            for i in range(22)
        ]
        catalog = AttackCatalog(entries, "v")
        assert [len(b) for b in technique_batches(catalog, 2)] == [11, 11]

    def test_single_batch_is_sorted_catalog(self, catalog):
        (batch,) = technique_batches(catalog, 1)
        assert batch == catalog.sorted_entries()

    @pytest.mark.parametrize("count", [1, 2, 7, 11, 29, 30])
    def test_partition_property(self, catalog, count):
        batches = technique_batches(catalog, count)
        flat = [e for batch in batches for e in batch]
        assert flat == catalog.sorted_entries()
        sizes = [len(b) for b in batches]
        assert max(sizes) - min(sizes) <= 1

    def test_active_only_leaves_out_deprecated(self, catalog):
        batches = technique_batches(catalog, 11, active_only=True)
        ids = [e.id for batch in batches for e in batch]
        assert "T1043" not in ids
        assert len(ids) == 29

    @pytest.mark.parametrize("count", [0, 31])
    def test_out_of_range(self, catalog, count):
        with pytest.raises(CatalogError, match="batch_count must be between 1 and 30"):
            technique_batches(catalog, count)
