"""
Baseline predictors.

    top_k                 the k most frequent training techniques, for every rule
    random_within_tactic  k techniques sampled uniformly from the catalog
                          techniques sharing a tactic with the rule's gold labels

The tactic oracle assumes an analyst already knows the correct tactic(s), so
random_within_tactic is only reported at technique level.
"""

from collections.abc import Iterable
from dataclasses import dataclass, field
from enum import StrEnum

import numpy as np

from nidslabel.attack.catalog import AttackCatalog
from nidslabel.core.errors import BaselineError
from nidslabel.core.logging import get_logger
from nidslabel.data.dataset import LabeledDataset, LabeledRule, label_frequencies
from nidslabel.scoring.evaluation import derive_tactic_labels

logger = get_logger(__name__)


class BaselineKind(StrEnum):
    TOP_K = "top_k"
    RANDOM_WITHIN_TACTIC = "random_within_tactic"


@dataclass(frozen=True)
class BaselinePredictor:
    kind: BaselineKind
    k: int
    frequency_table: dict[str, int] | None = field(default=None, compare=False)
    seed: int | None = None
    catalog: AttackCatalog | None = field(default=None, compare=False, repr=False)

    def __post_init__(self) -> None:
        if self.k < 1:
            raise BaselineError(f"k must be >= 1, got {self.k}")
        if self.kind is BaselineKind.TOP_K and self.frequency_table is None:
            raise BaselineError("top_k baseline needs a fitted frequency table")
        if self.kind is BaselineKind.RANDOM_WITHIN_TACTIC and (
            self.seed is None or self.catalog is None
        ):
            raise BaselineError("random_within_tactic baseline needs a seed and a catalog")

    @property
    def name(self) -> str:
        return f"Top-{self.k}" if self.kind is BaselineKind.TOP_K else f"RT-{self.k}"

    def top_techniques(self) -> frozenset[str]:
        assert self.frequency_table is not None
        ranked = sorted(self.frequency_table, key=lambda t: (-self.frequency_table[t], t))
        return frozenset(ranked[: self.k])

    def predict(self, item: LabeledRule) -> frozenset[str]:
        if self.kind is BaselineKind.TOP_K:
            return self.top_techniques()
        assert self.catalog is not None and self.seed is not None
        gold_tactics = derive_tactic_labels(item.technique_ids, self.catalog)
        return random_within_tactic(self.catalog, gold_tactics, self.k, self.seed, item.sid)


def fit_top_k(train: LabeledDataset, k: int) -> BaselinePredictor:
    """
    Constant predictor of the k most frequent training techniques.

    Ties in frequency are broken by the lexicographically smaller id.

    Raises:
        BaselineError: k < 1, empty training set, or k larger than the number
            of distinct training techniques
    """
    if len(train) == 0:
        raise BaselineError("cannot fit a frequency baseline on an empty dataset")
    frequencies = label_frequencies(train)
    if k > len(frequencies):
        raise BaselineError(f"k={k} exceeds the {len(frequencies)} distinct training techniques")
    predictor = BaselinePredictor(kind=BaselineKind.TOP_K, k=k, frequency_table=frequencies)
    logger.info("Top-%d baseline predicts %s", k, sorted(predictor.top_techniques()))
    return predictor


def random_within_tactic(
    catalog: AttackCatalog,
    gold_tactics: Iterable[str],
    k: int,
    seed: int,
    sid: int = 0,
) -> frozenset[str]:
    """
    Sample k techniques without replacement from the active techniques whose
    tactics intersect gold_tactics.

    The RNG stream is derived from (seed, sid), so each rule's draw is fixed
    regardless of evaluation order. A pool of at most k techniques is
    returned whole.
    """
    if k < 1:
        raise BaselineError(f"k must be >= 1, got {k}")
    pool = catalog.techniques_for_tactics(gold_tactics)
    if len(pool) <= k:
        return frozenset(pool)
    rng = np.random.default_rng([seed, sid])
    picks = rng.choice(len(pool), size=k, replace=False)
    return frozenset(pool[i] for i in picks)


def rt_k(catalog: AttackCatalog, k: int, seed: int) -> BaselinePredictor:
    return BaselinePredictor(
        kind=BaselineKind.RANDOM_WITHIN_TACTIC, k=k, seed=seed, catalog=catalog
    )
