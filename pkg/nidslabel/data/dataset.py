"""
Labeled Rule Dataset

Builds the labeled-rule dataset from a rules file and a sid->technique label
map, filters rare techniques, splits train/test in a label-balanced way, and
persists datasets as JSONL.

Label map: CSV with header `sid,technique_id`, one row per (rule, technique).
Persistence: JSONL, one object per rule:
    {"sid": int, "rule": raw rule text, "techniques": [...], "split": "train"|"test"|"rare"}
"""

import json
from collections import Counter
from collections.abc import Iterable, Iterator, Mapping
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import pandas as pd

from nidslabel.attack.catalog import AttackCatalog, is_technique_id
from nidslabel.core.errors import DatasetError
from nidslabel.core.logging import get_logger
from nidslabel.rules.parser import SnortRule, parse_rule, parse_ruleset_file

logger = get_logger(__name__)

LABEL_MAP_COLUMNS = ["sid", "technique_id"]
SPLIT_TAGS = ("train", "test", "rare")


@dataclass(frozen=True)
class LabeledRule:
    sid: int
    rule: SnortRule
    technique_ids: frozenset[str]


@dataclass(frozen=True)
class LabeledDataset:
    """Rules paired with ground-truth technique sets. Sids are unique."""

    rules: tuple[LabeledRule, ...] = ()

    def __post_init__(self) -> None:
        seen: set[int] = set()
        for item in self.rules:
            if item.sid in seen:
                raise DatasetError(f"Duplicate sid in dataset: {item.sid}")
            seen.add(item.sid)

    @cached_property
    def label_universe(self) -> list[str]:
        return sorted({t for item in self.rules for t in item.technique_ids})

    @property
    def sids(self) -> list[int]:
        return [item.sid for item in self.rules]

    def __len__(self) -> int:
        return len(self.rules)

    def __iter__(self) -> Iterator[LabeledRule]:
        return iter(self.rules)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, LabeledDataset):
            return NotImplemented
        return self.rules == other.rules

    def __hash__(self) -> int:
        return hash(self.rules)

    def subset(self, sids: Iterable[int]) -> "LabeledDataset":
        """Rules whose sid is in `sids`, in this dataset's order."""
        wanted = set(sids)
        return LabeledDataset(tuple(item for item in self.rules if item.sid in wanted))


@dataclass(frozen=True)
class IngestReport:
    rules_parsed: int = 0
    parse_diagnostics: int = 0
    labeled_rules: int = 0
    dropped_unlabeled: int = 0
    missing_sids: list[int] = field(default_factory=list)
    rejected_ids: list[str] = field(default_factory=list)


@dataclass(frozen=True)
class DatasetSplit:
    train: LabeledDataset
    test: LabeledDataset
    rare: LabeledDataset
    min_count: int
    train_frac: float
    seed: int


# ── Ingestion ────────────────────────────────────────────────────────────────


def _read_label_map(path: Path) -> pd.DataFrame:
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError:
        return pd.DataFrame(columns=LABEL_MAP_COLUMNS)
    frame.columns = [c.strip() for c in frame.columns]
    if list(frame.columns) != LABEL_MAP_COLUMNS:
        raise DatasetError(
            f"{path}: label map header must be {','.join(LABEL_MAP_COLUMNS)}, "
            f"got {','.join(frame.columns)}"
        )
    for column in LABEL_MAP_COLUMNS:
        frame[column] = frame[column].astype(str).str.strip()
    return frame


def ingest_with_report(
    rules_file: str | Path,
    label_map_file: str | Path,
    catalog: AttackCatalog,
    strict: bool = True,
) -> tuple[LabeledDataset, IngestReport]:
    """
    Join a rules file with a label map into a LabeledDataset.

    One LabeledRule per sid with at least one mapped technique, in rules-file
    order. Rules without mappings are dropped and counted.

    Args:
        rules_file: Snort .rules file
        label_map_file: CSV label map (sid,technique_id)
        catalog: Catalog the technique ids must belong to
        strict: Fail on invalid technique ids and on mapped sids missing from
            the rules file; otherwise skip them with a warning

    Returns:
        (dataset, ingest report)

    Raises:
        DatasetError: Bad label-map header or, in strict mode, invalid ids or missing sids
    """
    rules, diagnostics = parse_ruleset_file(rules_file)
    frame = _read_label_map(Path(label_map_file))

    # parse_ruleset already drops repeated sids
    by_sid = {rule.sid: rule for rule in rules if rule.sid is not None}

    labels: dict[int, set[str]] = {}
    rejected: list[str] = []
    missing: set[int] = set()
    for row_number, (sid_text, technique_id) in enumerate(
        frame[LABEL_MAP_COLUMNS].itertuples(index=False, name=None), start=2
    ):
        if not sid_text.isdigit():
            raise DatasetError(f"{label_map_file}:{row_number}: invalid sid {sid_text!r}")
        sid = int(sid_text)

        if not is_technique_id(technique_id) or technique_id not in catalog:
            if strict:
                raise DatasetError(
                    f"{label_map_file}:{row_number}: invalid technique id {technique_id!r}"
                )
            logger.warning("Row %d: skipping invalid technique id %r", row_number, technique_id)
            rejected.append(technique_id)
            continue

        if sid not in by_sid:
            if strict:
                raise DatasetError(f"{label_map_file}:{row_number}: sid {sid} not in rules file")
            missing.add(sid)
            continue

        labels.setdefault(sid, set()).add(technique_id)

    if missing:
        logger.warning("%d mapped sid(s) absent from rules file: %s", len(missing), sorted(missing))
    if frame.empty:
        logger.warning("Label map %s is empty; dataset will be empty", label_map_file)

    items = tuple(
        LabeledRule(sid=sid, rule=rule, technique_ids=frozenset(labels[sid]))
        for sid, rule in by_sid.items()
        if sid in labels
    )
    dropped = len(by_sid) - len(items)
    if dropped:
        logger.info("Dropped %d rule(s) without technique mappings", dropped)

    report = IngestReport(
        rules_parsed=len(rules),
        parse_diagnostics=len(diagnostics),
        labeled_rules=len(items),
        dropped_unlabeled=dropped,
        missing_sids=sorted(missing),
        rejected_ids=rejected,
    )
    return LabeledDataset(items), report


def ingest(
    rules_file: str | Path,
    label_map_file: str | Path,
    catalog: AttackCatalog,
    strict: bool = True,
) -> LabeledDataset:
    """Build a LabeledDataset; see ingest_with_report for details."""
    dataset, _ = ingest_with_report(rules_file, label_map_file, catalog, strict=strict)
    return dataset


# ── Frequencies ──────────────────────────────────────────────────────────────


def label_frequencies(ds: LabeledDataset) -> dict[str, int]:
    """Number of rules carrying each technique, keyed in sorted id order."""
    counts = Counter(t for item in ds for t in item.technique_ids)
    return dict(sorted(counts.items()))


def tactic_frequencies(ds: LabeledDataset, catalog: AttackCatalog) -> dict[str, int]:
    """Number of rules whose derived tactic set contains each tactic."""
    counts: Counter[str] = Counter()
    for item in ds:
        tactics = {t for tid in item.technique_ids for t in catalog.entry(tid).tactic_ids}
        counts.update(tactics)
    return dict(sorted(counts.items()))


# ── Rare-technique filtering ─────────────────────────────────────────────────


def partition_rare(ds: LabeledDataset, min_count: int) -> tuple[LabeledDataset, LabeledDataset]:
    """
    Separate rare techniques, iterating to a fixpoint.

    Techniques occurring fewer than min_count times are stripped from
    mixed-label rules; rules left without any frequent label move to the rare
    set with their original full label set. In the returned core every
    technique occurs at least min_count times.

    Args:
        ds: Input dataset
        min_count: Minimum occurrences for a technique to stay in core

    Returns:
        (core, rare)
    """
    if min_count < 1:
        raise DatasetError(f"min_count must be >= 1, got {min_count}")

    current = {item.sid: set(item.technique_ids) for item in ds}
    rare_sids: set[int] = set()

    while True:
        counts = Counter(t for sid, ts in current.items() if sid not in rare_sids for t in ts)
        rare_labels = {t for t, n in counts.items() if n < min_count}
        if not rare_labels:
            break
        for sid, techniques in current.items():
            if sid in rare_sids:
                continue
            techniques -= rare_labels
            if not techniques:
                rare_sids.add(sid)

    core = tuple(
        LabeledRule(sid=item.sid, rule=item.rule, technique_ids=frozenset(current[item.sid]))
        for item in ds
        if item.sid not in rare_sids
    )
    rare = tuple(item for item in ds if item.sid in rare_sids)
    logger.info(
        "Rare partition (min_count=%d): core %d rules, rare %d rules",
        min_count,
        len(core),
        len(rare),
    )
    return LabeledDataset(core), LabeledDataset(rare)


# ── Stratified split ─────────────────────────────────────────────────────────

SPLIT_ATTEMPTS = 10


def _train_window(count: int, train_frac: float) -> tuple[int, int]:
    """Allowed train counts for a label: within one rule of frac*count, never all or none."""
    exact = train_frac * count
    low = max(1, int(np.ceil(exact - 1 - 1e-9)))
    high = min(count - 1, int(np.floor(exact + 1 + 1e-9)))
    return low, high


def _excess(train_count: int, window: tuple[int, int]) -> int:
    low, high = window
    return max(low - train_count, train_count - high, 0)


def _assign_greedy(
    ds: LabeledDataset, counts: Mapping[str, int], train_frac: float, rng: np.random.Generator
) -> dict[int, bool]:
    """One pass of iterative stratification over fractional per-label demands."""
    demand = {t: [train_frac * n, (1.0 - train_frac) * n] for t, n in counts.items()}
    total = [train_frac * len(ds), (1.0 - train_frac) * len(ds)]
    assignment: dict[int, bool] = {}

    for label in sorted(counts, key=lambda t: (counts[t], t)):
        candidates = [item for item in ds if label in item.technique_ids]
        for index in rng.permutation(len(candidates)):
            item = candidates[index]
            if item.sid in assignment:
                continue
            need_train, need_test = demand[label]
            if not np.isclose(need_train, need_test):
                to_train = need_train > need_test
            elif not np.isclose(total[0], total[1]):
                to_train = total[0] > total[1]
            else:
                to_train = bool(rng.integers(2) == 0)

            side = 0 if to_train else 1
            assignment[item.sid] = to_train
            for t in item.technique_ids:
                demand[t][side] -= 1
            total[side] -= 1
    return assignment


def _rebalance(
    label_sets: Mapping[int, frozenset[str]],
    assignment: dict[int, bool],
    windows: Mapping[str, tuple[int, int]],
) -> int:
    """
    Move single rules, then swap train/test pairs, while that lowers the
    total distance of label train counts from their windows.

    Returns the distance left; 0 means every label is within its window.
    """
    train_counts = Counter(t for sid, tr in assignment.items() if tr for t in label_sets[sid])
    order = list(assignment)

    def gain(changes: Counter[str]) -> int:
        return sum(
            _excess(train_counts[t] + d, windows[t]) - _excess(train_counts[t], windows[t])
            for t, d in changes.items()
            if d
        )

    def moved(sid: int) -> Counter[str]:
        step = -1 if assignment[sid] else 1
        return Counter({t: step for t in label_sets[sid]})

    while True:
        off = {t for t, w in windows.items() if _excess(train_counts[t], w)}
        if not off:
            return 0
        touched = [sid for sid in order if label_sets[sid] & off]

        best: tuple[int, tuple[int, ...]] = (0, ())
        for sid in touched:
            delta = gain(moved(sid))
            if delta < best[0]:
                best = (delta, (sid,))
        if not best[1]:
            for a in touched:
                for b in order:
                    if assignment[b] == assignment[a]:
                        continue
                    changes = moved(a)
                    changes.update(moved(b))
                    delta = gain(changes)
                    if delta < best[0]:
                        best = (delta, (a, b))
        if not best[1]:
            return sum(_excess(train_counts[t], w) for t, w in windows.items())

        for sid in best[1]:
            train_counts.update(moved(sid))
            assignment[sid] = not assignment[sid]


def stratified_split(
    ds: LabeledDataset, train_frac: float, seed: int
) -> tuple[LabeledDataset, LabeledDataset]:
    """
    Iterative multi-label stratification, rarest label first, then rebalancing.

    For each label (ascending frequency, ties by id) its unassigned rules are
    visited in a seeded order and sent to the partition with the larger
    remaining fractional demand for that label; ties go to the partition with
    the larger overall remaining demand, then to a seeded coin flip. A
    rebalancing pass then moves or swaps rules until every label's train count
    is within one rule of train_frac * count and each label appears on both
    sides. Should that fail, the pass is retried with fresh seeded orders and
    the best attempt is kept.

    Args:
        ds: Dataset where every label occurs at least twice
        train_frac: Fraction of rules for training, 0 < train_frac < 1
        seed: Random seed for visiting order and tie-breaking

    Returns:
        (train, test) preserving the input order within each partition

    Raises:
        DatasetError: train_frac out of range or a label occurring once
    """
    if not 0.0 < train_frac < 1.0:
        raise DatasetError(f"train_frac must be in (0, 1), got {train_frac}")

    counts = label_frequencies(ds)
    singletons = sorted(t for t, n in counts.items() if n < 2)
    if singletons:
        raise DatasetError(
            f"Label(s) occurring once cannot appear in both partitions: {', '.join(singletons)}"
        )

    rng = np.random.default_rng(seed)
    label_sets = {item.sid: item.technique_ids for item in ds}
    windows = {t: _train_window(n, train_frac) for t, n in counts.items()}

    best: tuple[int, dict[int, bool]] | None = None
    for attempt in range(SPLIT_ATTEMPTS):
        assignment = _assign_greedy(ds, counts, train_frac, rng)
        left = _rebalance(label_sets, assignment, windows)
        if best is None or left < best[0]:
            best = (left, assignment)
        if left == 0:
            break
        logger.debug("Split attempt %d leaves label imbalance %d", attempt + 1, left)

    assignment = best[1] if best else {}
    if best and best[0]:
        logger.warning(
            "No split found with every label within one rule of its target (imbalance %d)",
            best[0],
        )

    train = LabeledDataset(tuple(item for item in ds if assignment.get(item.sid)))
    test = LabeledDataset(tuple(item for item in ds if not assignment.get(item.sid)))
    logger.info("Stratified split (seed=%d): train %d, test %d", seed, len(train), len(test))
    return train, test


def build_split(ds: LabeledDataset, min_count: int, train_frac: float, seed: int) -> DatasetSplit:
    """Rare filtering followed by the stratified split of the core rules."""
    core, rare = partition_rare(ds, min_count)
    train, test = stratified_split(core, train_frac, seed)
    return DatasetSplit(
        train=train, test=test, rare=rare, min_count=min_count, train_frac=train_frac, seed=seed
    )


# ── Persistence ──────────────────────────────────────────────────────────────


def dataset_to_jsonl(ds: LabeledDataset, split: str | None = None) -> str:
    """Serialize to JSONL text; keys sorted so output is byte-stable."""
    if split is not None and split not in SPLIT_TAGS:
        raise DatasetError(f"Unknown split tag: {split}")
    lines = []
    for item in ds:
        record: dict[str, object] = {
            "sid": item.sid,
            "rule": item.rule.raw.strip(),
            "techniques": sorted(item.technique_ids),
        }
        if split is not None:
            record["split"] = split
        lines.append(json.dumps(record, sort_keys=True, ensure_ascii=False))
    return "".join(line + "\n" for line in lines)


def save_dataset(path: str | Path, ds: LabeledDataset, split: str | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dataset_to_jsonl(ds, split), encoding="utf-8")
    return path


def load_dataset(path: str | Path) -> LabeledDataset:
    """
    Load a JSONL dataset, re-parsing each stored rule.

    Raises:
        DatasetError: Malformed line, sid mismatch, or empty/invalid label set
    """
    items: list[LabeledRule] = []
    text = Path(path).read_text(encoding="utf-8")
    for number, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
            sid = int(record["sid"])
            rule = parse_rule(record["rule"])
            techniques = frozenset(record["techniques"])
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"{path}:{number}: malformed dataset record: {exc}") from exc

        if rule.sid is not None and rule.sid != sid:
            raise DatasetError(f"{path}:{number}: sid {sid} does not match rule sid {rule.sid}")
        bad = sorted(t for t in techniques if not is_technique_id(t))
        if not techniques or bad:
            raise DatasetError(f"{path}:{number}: invalid technique set {sorted(techniques)}")
        items.append(LabeledRule(sid=sid, rule=rule, technique_ids=techniques))
    return LabeledDataset(tuple(items))
