"""
Tests for the frequency (Top-k) and random-within-tactic (RT-k) baselines.
"""

from collections import Counter

import pytest

from nidslabel.core.errors import BaselineError
from nidslabel.data.dataset import LabeledDataset
from nidslabel.scoring.baselines import (
    BaselineKind,
    BaselinePredictor,
    fit_top_k,
    random_within_tactic,
    rt_k,
)
from nidslabel.scoring.evaluation import evaluate_predictor
from tests.helpers import make_dataset

# T1059 x3, T1046 x2, T1105 x1
COUNTS_DATASET = {
    1: {"T1059"},
    2: {"T1059", "T1046"},
    3: {"T1059", "T1105"},
    4: {"T1046"},
}
LATERAL_MOVEMENT = {"T1021", "T1021.001", "T1021.002", "T1210"}


# ── Top-k ────────────────────────────────────────────────────────────────────


class TestTopK:
    def test_most_frequent(self):
        predictor = fit_top_k(make_dataset(COUNTS_DATASET), 2)
        assert predictor.top_techniques() == {"T1059", "T1046"}
        assert predictor.name == "Top-2"

    def test_same_prediction_for_every_rule(self):
        ds = make_dataset(COUNTS_DATASET)
        predictor = fit_top_k(ds, 1)
        assert {predictor.predict(item) for item in ds} == {frozenset({"T1059"})}

    def test_ties_broken_by_id(self):
        ds = make_dataset({1: {"T1110"}, 2: {"T1046"}, 3: {"T1190"}})
        assert fit_top_k(ds, 2).top_techniques() == {"T1046", "T1110"}

    def test_k_too_large(self):
        with pytest.raises(BaselineError, match="k=4 exceeds the 3"):
            fit_top_k(make_dataset(COUNTS_DATASET), 4)

    def test_k_zero(self):
        with pytest.raises(BaselineError, match="k must be >= 1"):
            fit_top_k(make_dataset(COUNTS_DATASET), 0)

    def test_empty_training_set(self):
        with pytest.raises(BaselineError, match="empty"):
            fit_top_k(LabeledDataset(), 1)

    def test_needs_frequency_table(self):
        with pytest.raises(BaselineError, match="frequency table"):
            BaselinePredictor(kind=BaselineKind.TOP_K, k=1)

    def test_scores_on_training_set(self):
        ds = make_dataset(COUNTS_DATASET)
        report = evaluate_predictor(ds, fit_top_k(ds, 1).predict)
        # T1059 hits on three rules, misses one; three other gold labels missed
        assert (report.counts.tp, report.counts.fp, report.counts.fn) == (3, 1, 3)
        assert report.precision == pytest.approx(0.75)
        assert report.recall == pytest.approx(0.5)


# ── Random within tactic ─────────────────────────────────────────────────────


class TestRandomWithinTactic:
    def test_single_candidate(self, catalog):
        # T1046 is the only discovery technique
        assert random_within_tactic(catalog, {"TA0007"}, 1, seed=7) == {"T1046"}

    def test_pool_smaller_than_k_returned_whole(self, catalog):
        assert random_within_tactic(catalog, {"TA0010"}, 3, seed=7) == {"T1041", "T1048"}

    def test_exact_pool_size(self, catalog):
        assert random_within_tactic(catalog, {"TA0010"}, 2, seed=7) == {"T1041", "T1048"}

    def test_subset_of_pool(self, catalog):
        for sid in range(50):
            picks = random_within_tactic(catalog, {"TA0008"}, 2, seed=7, sid=sid)
            assert len(picks) == 2
            assert picks <= LATERAL_MOVEMENT

    def test_deprecated_never_drawn(self, catalog):
        draws = set()
        for sid in range(200):
            draws |= random_within_tactic(catalog, {"TA0011"}, 2, seed=1, sid=sid)
        assert "T1043" not in draws
        assert draws == {"T1071", "T1071.001", "T1071.004", "T1090", "T1105"}

    def test_deterministic(self, catalog):
        first = random_within_tactic(catalog, {"TA0008"}, 1, seed=11, sid=5)
        assert all(
            random_within_tactic(catalog, {"TA0008"}, 1, seed=11, sid=5) == first for _ in range(5)
        )

    def test_empty_gold_tactics(self, catalog):
        assert random_within_tactic(catalog, set(), 2, seed=7) == frozenset()

    @pytest.mark.slow
    def test_uniform_over_pool(self, catalog):
        draws = Counter()
        for sid in range(10_000):
            (pick,) = random_within_tactic(catalog, {"TA0008"}, 1, seed=7, sid=sid)
            draws[pick] += 1
        assert set(draws) == LATERAL_MOVEMENT
        for technique in LATERAL_MOVEMENT:
            assert draws[technique] / 10_000 == pytest.approx(0.25, abs=0.02)

    def test_predictor_uses_gold_tactics(self, catalog):
        ds = make_dataset({1: {"T1210"}, 2: {"T1046"}})
        predictor = rt_k(catalog, 1, seed=7)
        assert predictor.name == "RT-1"
        assert predictor.predict(ds.rules[0]) <= LATERAL_MOVEMENT
        assert predictor.predict(ds.rules[1]) == {"T1046"}

    def test_order_independent(self, catalog):
        ds = make_dataset({1: {"T1210"}, 2: {"T1071"}, 3: {"T1021"}})
        predictor = rt_k(catalog, 1, seed=7)
        forward = {item.sid: predictor.predict(item) for item in ds}
        backward = {item.sid: predictor.predict(item) for item in reversed(ds.rules)}
        assert forward == backward

    def test_needs_seed_and_catalog(self):
        with pytest.raises(BaselineError, match="seed and a catalog"):
            BaselinePredictor(kind=BaselineKind.RANDOM_WITHIN_TACTIC, k=1)

    def test_k_zero(self, catalog):
        with pytest.raises(BaselineError, match="k must be >= 1"):
            random_within_tactic(catalog, {"TA0008"}, 0, seed=7)
