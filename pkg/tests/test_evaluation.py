"""
Tests for micro-averaged scoring, prediction files, comparison tables and
prompt selection.
"""

import json
from fractions import Fraction

import numpy as np
import pytest

from nidslabel.core.errors import EvaluationError, LabelingError
from nidslabel.data.dataset import LabeledDataset, LabeledRule
from nidslabel.llm.prompting import PromptConfig
from nidslabel.scoring.evaluation import (
    ConfusionCounts,
    EvalReport,
    Level,
    comparison_table,
    derive_tactic_labels,
    evaluate_predictor,
    file_predictor,
    load_predictions,
    micro_metrics,
    predictions_to_jsonl,
    rollup_techniques,
    select_best_prompt,
)
from nidslabel.services.chat import scripted_client
from tests.helpers import make_dataset, make_rule, write_transcript


def _constant(ids):
    return lambda _item: frozenset(ids)


def _oracle(item):
    return item.technique_ids


ORACLE_POOL = "T1003 T1021 T1027 T1046 T1053 T1059 T1071.001 T1105 T1110 T1190".split()


def _as_labels(ids, level, catalog):
    if level is Level.TACTIC:
        return {t for tid in ids for t in catalog.entry(tid).tactic_ids}
    return set(ids)


# ── Metrics ──────────────────────────────────────────────────────────────────


class TestMicroMetrics:
    def test_worked_example(self):
        precision, recall, f1 = micro_metrics(ConfusionCounts(tp=3, fp=1, fn=2))
        assert precision == pytest.approx(0.75)
        assert recall == pytest.approx(0.6)
        assert f1 == pytest.approx(2 / 3)

    def test_all_zero(self):
        assert micro_metrics(ConfusionCounts()) == (0.0, 0.0, 0.0)

    def test_no_predictions(self):
        assert micro_metrics(ConfusionCounts(tp=0, fp=0, fn=4)) == (0.0, 0.0, 0.0)

    def test_counts_add(self):
        total = ConfusionCounts(tp=1, fp=2, fn=3) + ConfusionCounts(tp=4, fp=5, fn=6)
        assert total == ConfusionCounts(tp=5, fp=7, fn=9)

    def test_counts_of_sets(self):
        counts = ConfusionCounts.of(frozenset({"T1046", "T1059"}), frozenset({"T1059", "T1110"}))
        assert counts == ConfusionCounts(tp=1, fp=1, fn=1)

    def test_random_counts_against_exact_fractions(self):
        rng = np.random.default_rng(1234)
        for row in rng.integers(0, 50, size=(1000, 3)):
            tp, fp, fn = (int(v) for v in row)
            precision, recall, f1 = micro_metrics(ConfusionCounts(tp=tp, fp=fp, fn=fn))
            exact_p = Fraction(tp, tp + fp) if tp + fp else Fraction(0)
            exact_r = Fraction(tp, tp + fn) if tp + fn else Fraction(0)
            exact_f1 = (
                2 * exact_p * exact_r / (exact_p + exact_r) if exact_p + exact_r else Fraction(0)
            )
            assert precision == pytest.approx(float(exact_p), abs=1e-12)
            assert recall == pytest.approx(float(exact_r), abs=1e-12)
            assert f1 == pytest.approx(float(exact_f1), abs=1e-12)
            assert 0.0 <= f1 <= 1.0


# ── Predictor evaluation ─────────────────────────────────────────────────────


class TestEvaluatePredictor:
    def test_half_right(self):
        ds = make_dataset({1: {"T1046", "T1059"}, 2: {"T1110"}})
        predictions = {1: {"T1046"}, 2: {"T1190"}}
        report = evaluate_predictor(ds, lambda item: predictions[item.sid])
        assert report.counts == ConfusionCounts(tp=1, fp=1, fn=2)
        assert report.precision == pytest.approx(0.5)
        assert report.recall == pytest.approx(1 / 3)
        assert report.f1 == pytest.approx(0.4)

    def test_perfect_predictor(self, catalog):
        ds = make_dataset({1: {"T1046"}, 2: {"T1071.001", "T1105"}, 3: {"T1059.001"}})
        for level in Level:
            report = evaluate_predictor(ds, _oracle, level, catalog)
            assert (report.precision, report.recall, report.f1) == (1.0, 1.0, 1.0)

    def test_empty_predictions(self):
        ds = make_dataset({1: {"T1046"}, 2: {"T1059"}})
        report = evaluate_predictor(ds, _constant(()))
        assert report.f1 == 0.0
        assert report.counts.fn == 2

    def test_tactic_level_forgives_wrong_technique(self, catalog):
        # T1071.001 and T1105 share command-and-control
        ds = make_dataset({1: {"T1071.001"}})
        technique = evaluate_predictor(ds, _constant({"T1105"}), Level.TECHNIQUE, catalog)
        tactic = evaluate_predictor(ds, _constant({"T1105"}), Level.TACTIC, catalog)
        assert technique.f1 == 0.0
        assert tactic.f1 == 1.0

    def test_tactic_level_needs_catalog(self):
        ds = make_dataset({1: {"T1046"}})
        with pytest.raises(EvaluationError, match="needs a catalog"):
            evaluate_predictor(ds, _oracle, Level.TACTIC)

    def test_rollup_scores_parent(self):
        ds = make_dataset({1: {"T1059.001"}})
        plain = evaluate_predictor(ds, _constant({"T1059"}))
        rolled = evaluate_predictor(ds, _constant({"T1059"}), rollup=True)
        assert plain.f1 == 0.0
        assert rolled.f1 == 1.0
        assert rolled.rollup

    def test_per_label_counts_sum_to_total(self):
        ds = make_dataset({1: {"T1046", "T1059"}, 2: {"T1110"}, 3: {"T1059"}})
        report = evaluate_predictor(ds, _constant({"T1059", "T1190"}))
        totals = ConfusionCounts()
        for counts in report.per_label.values():
            totals = totals + counts
        assert totals == report.counts
        assert report.per_label["T1190"] == ConfusionCounts(fp=3)

    def test_counts_additive_over_partitions(self):
        ds = make_dataset({i: {"T1046"} if i % 2 else {"T1059", "T1110"} for i in range(1, 11)})
        predict = _constant({"T1059"})
        whole = evaluate_predictor(ds, predict).counts
        left = evaluate_predictor(ds.subset(ds.sids[:4]), predict).counts
        right = evaluate_predictor(ds.subset(ds.sids[4:]), predict).counts
        assert left + right == whole

    def test_random_instances_match_brute_force_count(self, catalog):
        rules = [make_rule(sid) for sid in range(1, 51)]
        rng = np.random.default_rng(31)

        def pick(low):
            size = int(rng.integers(low, 4))
            chosen = rng.choice(len(ORACLE_POOL), size, replace=False)
            return frozenset(ORACLE_POOL[int(i)] for i in chosen)

        for _ in range(1000):
            n_rules = int(rng.integers(1, 51))
            items = [LabeledRule(sid=r.sid, rule=r, technique_ids=pick(1)) for r in rules[:n_rules]]
            ds = LabeledDataset(tuple(items))
            predictions = {item.sid: pick(0) for item in ds}

            for level in Level:
                tally = {}
                for item in ds:
                    gold = _as_labels(item.technique_ids, level, catalog)
                    predicted = _as_labels(predictions[item.sid], level, catalog)
                    for label in gold | predicted:
                        row = tally.setdefault(label, [0, 0, 0])
                        row[0] += int(label in gold and label in predicted)
                        row[1] += int(label in predicted and label not in gold)
                        row[2] += int(label in gold and label not in predicted)
                tp, fp, fn = (sum(row[i] for row in tally.values()) for i in range(3))

                report = evaluate_predictor(ds, file_predictor(predictions), level, catalog)
                assert report.counts == ConfusionCounts(tp=tp, fp=fp, fn=fn)
                assert {k: [c.tp, c.fp, c.fn] for k, c in report.per_label.items()} == tally
                exact_p = Fraction(tp, tp + fp) if tp + fp else Fraction(0)
                exact_r = Fraction(tp, tp + fn) if tp + fn else Fraction(0)
                exact_f1 = 2 * exact_p * exact_r / (exact_p + exact_r) if tp else Fraction(0)
                assert report.precision == pytest.approx(float(exact_p), abs=1e-12)
                assert report.recall == pytest.approx(float(exact_r), abs=1e-12)
                assert report.f1 == pytest.approx(float(exact_f1), abs=1e-12)

    def test_empty_dataset(self):
        with pytest.raises(EvaluationError, match="empty"):
            evaluate_predictor(LabeledDataset(), _oracle)

    def test_failure_lenient_scores_empty(self):
        ds = make_dataset({1: {"T1046"}, 2: {"T1059"}})

        def flaky(item):
            if item.sid == 2:
                raise LabelingError("transport failed", sid=2, attempts=4)
            return item.technique_ids

        report = evaluate_predictor(ds, flaky)
        assert report.failures == 1
        assert report.counts == ConfusionCounts(tp=1, fn=1)

    def test_failure_strict_aborts(self):
        ds = make_dataset({1: {"T1046"}})

        def broken(item):
            raise LabelingError("transport failed", sid=item.sid)

        with pytest.raises(EvaluationError, match="sid 1"):
            evaluate_predictor(ds, broken, strict=True)

    def test_unknown_predicted_technique_at_tactic_level(self, catalog):
        ds = make_dataset({1: {"T1046"}, 2: {"T1059"}})
        report = evaluate_predictor(ds, _constant({"T9999"}), Level.TACTIC, catalog)
        assert report.failures == 2

    def test_report_table_and_json(self):
        ds = make_dataset({1: {"T1046"}, 2: {"T1059"}})
        report = evaluate_predictor(ds, _constant({"T1046"}), name="const")
        table = report.to_table(per_label=True)
        assert table.splitlines()[0] == "level=technique rules=2 failures=0"
        assert "const" in table and "T1059" in table
        restored = EvalReport.model_validate_json(report.to_json())
        assert restored == report
        assert "per_label" not in json.loads(report.to_json(per_label=False))


class TestLabelMapping:
    def test_derive_tactics(self, catalog):
        assert derive_tactic_labels({"T1053", "T1059"}, catalog) == {"TA0002", "TA0003", "TA0004"}

    def test_derive_tactics_unknown(self, catalog):
        with pytest.raises(KeyError):
            derive_tactic_labels({"T9999"}, catalog)

    def test_rollup(self):
        assert rollup_techniques({"T1059.001", "T1059.004", "T1046"}) == {"T1059", "T1046"}


# ── Prediction files ─────────────────────────────────────────────────────────


class TestPredictionFiles:
    def test_jsonl_sorted_by_sid(self):
        text = predictions_to_jsonl({9: {"T1105", "T1071"}, 2: set()})
        lines = [json.loads(line) for line in text.splitlines()]
        assert lines == [
            {"sid": 2, "techniques": []},
            {"sid": 9, "techniques": ["T1071", "T1105"]},
        ]

    def test_load_ignores_extra_keys(self, tmp_path):
        path = tmp_path / "pred.jsonl"
        path.write_text('{"sid": 3, "techniques": ["T1046"], "explanation": "scan"}\n')
        assert load_predictions(path) == {3: frozenset({"T1046"})}

    def test_duplicate_sid(self, tmp_path):
        path = tmp_path / "pred.jsonl"
        path.write_text('{"sid": 3, "techniques": []}\n{"sid": 3, "techniques": []}\n')
        with pytest.raises(EvaluationError, match="pred.jsonl:2: duplicate sid 3"):
            load_predictions(path)

    def test_invalid_technique(self, tmp_path):
        path = tmp_path / "pred.jsonl"
        path.write_text('{"sid": 3, "techniques": ["Txyz"]}\n')
        with pytest.raises(EvaluationError, match="invalid technique"):
            load_predictions(path)

    def test_malformed(self, tmp_path):
        path = tmp_path / "pred.jsonl"
        path.write_text('{"sid": "three"}\n')
        with pytest.raises(EvaluationError, match="malformed"):
            load_predictions(path)

    def test_missing_sid_counts_as_failure(self):
        ds = make_dataset({1: {"T1046"}, 2: {"T1059"}})
        report = evaluate_predictor(ds, file_predictor({1: frozenset({"T1046"})}))
        assert report.failures == 1
        assert report.precision == 1.0
        assert report.recall == 0.5


class TestComparisonTable:
    def test_missing_tactic_report(self):
        ds = make_dataset({1: {"T1046"}})
        report = evaluate_predictor(ds, _oracle)
        frame = comparison_table([("Top-1", report, report), ("RT-1", report, None)])
        assert list(frame["approach"]) == ["Top-1", "RT-1"]
        assert frame.loc[1, "tactic_f1"] == "N/A"
        assert frame.loc[0, "technique_f1"] == "1.0000"


# ── Prompt selection ─────────────────────────────────────────────────────────


class TestSelectBestPrompt:
    DEV = {1: {"T1046"}, 2: {"T1059"}}

    def test_highest_f1_wins(self, catalog, tmp_path):
        bare = PromptConfig(use_technique_guide=False)
        guided = PromptConfig(use_technique_guide=True)
        # bare answers both wrongly, guided answers both correctly
        client = scripted_client(
            write_transcript(tmp_path / "t.jsonl", ["T1110", "T1110", "T1046", "T1059"])
        )
        result = select_best_prompt([bare, guided], make_dataset(self.DEV), client, catalog, [])
        assert result.best == guided
        assert [c.f1 for c in result.ranked] == [1.0, 0.0]

    def test_tie_goes_to_shorter_prompt(self, catalog, tmp_path):
        guided = PromptConfig(use_technique_guide=True)
        bare = PromptConfig(use_technique_guide=False)
        client = scripted_client(
            write_transcript(tmp_path / "t.jsonl", ["T1046", "T1059", "T1046", "T1059"])
        )
        result = select_best_prompt([guided, bare], make_dataset(self.DEV), client, catalog, [])
        assert result.best == bare
        assert result.ranked[0].prompt_tokens < result.ranked[1].prompt_tokens

    def test_config_that_cannot_run(self, catalog, tmp_path):
        needs_examples = PromptConfig(use_technique_guide=False, icl_count=1)
        bare = PromptConfig(use_technique_guide=False)
        client = scripted_client(write_transcript(tmp_path / "t.jsonl", ["T1110", "T1110"]))
        result = select_best_prompt(
            [needs_examples, bare], make_dataset(self.DEV), client, catalog, []
        )
        assert result.best == bare
        failed = result.ranked[-1]
        assert failed.config == needs_examples
        assert "icl_count" in failed.error

    def test_no_configs(self, catalog, tmp_path):
        client = scripted_client(write_transcript(tmp_path / "t.jsonl", []))
        with pytest.raises(EvaluationError, match="no prompt configurations"):
            select_best_prompt([], make_dataset(self.DEV), client, catalog, [])
