"""
Micro-Averaged Evaluation

Scores set-valued predictions against gold technique sets:

    precision = TP / (TP + FP)
    recall    = TP / (TP + FN)
    f1        = 2 * precision * recall / (precision + recall)

Counts are summed over all rules and labels before the ratios are taken.
Any 0/0 quotient is defined as 0.

Tactic-level scoring maps both gold and predicted technique sets through
the catalog first. With rollup, sub-techniques are scored as their parent.
"""

import json
from collections import Counter
from collections.abc import Callable, Iterable, Mapping, Sequence
from enum import StrEnum
from pathlib import Path

import pandas as pd
from pydantic import BaseModel, ConfigDict, Field

from nidslabel.attack.catalog import AttackCatalog, is_technique_id, parent_of
from nidslabel.core.errors import EvaluationError, NidsLabelError
from nidslabel.core.logging import get_logger
from nidslabel.data.dataset import LabeledDataset, LabeledRule
from nidslabel.llm.prompting import IclExample, PromptConfig, label_many, prompt_tokens
from nidslabel.services.chat import ChatClient

logger = get_logger(__name__)

Predictor = Callable[[LabeledRule], Iterable[str]]


class Level(StrEnum):
    TECHNIQUE = "technique"
    TACTIC = "tactic"


class ConfusionCounts(BaseModel):
    """Additive true-positive / false-positive / false-negative counts."""

    model_config = ConfigDict(frozen=True)

    tp: int = Field(default=0, ge=0)
    fp: int = Field(default=0, ge=0)
    fn: int = Field(default=0, ge=0)

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(tp=self.tp + other.tp, fp=self.fp + other.fp, fn=self.fn + other.fn)

    @classmethod
    def of(cls, gold: frozenset[str], pred: frozenset[str]) -> "ConfusionCounts":
        return cls(tp=len(gold & pred), fp=len(pred - gold), fn=len(gold - pred))


def _ratio(numerator: int, denominator: int) -> float:
    return numerator / denominator if denominator else 0.0


def micro_metrics(counts: ConfusionCounts) -> tuple[float, float, float]:
    """
    Precision, recall and F1 from summed counts.

    Returns:
        (precision, recall, f1); each 0 when its denominator is 0
    """
    precision = _ratio(counts.tp, counts.tp + counts.fp)
    recall = _ratio(counts.tp, counts.tp + counts.fn)
    total = precision + recall
    f1 = 2 * precision * recall / total if total else 0.0
    return precision, recall, f1


def derive_tactic_labels(pred: Iterable[str], catalog: AttackCatalog) -> frozenset[str]:
    """Union of the tactic sets of the given techniques. Unknown ids raise."""
    return frozenset(t for tid in pred for t in catalog.entry(tid).tactic_ids)


def rollup_techniques(ids: Iterable[str]) -> frozenset[str]:
    """Replace sub-techniques by their parent technique."""
    return frozenset(parent_of(t) or t for t in ids)


class EvalReport(BaseModel):
    name: str | None = None
    level: Level
    precision: float = Field(ge=0, le=1)
    recall: float = Field(ge=0, le=1)
    f1: float = Field(ge=0, le=1)
    counts: ConfusionCounts
    per_label: dict[str, ConfusionCounts] = Field(default_factory=dict)
    n_rules: int
    failures: int = 0
    rollup: bool = False

    def to_json(self, per_label: bool = True) -> str:
        exclude = None if per_label else {"per_label"}
        return json.dumps(self.model_dump(mode="json", exclude=exclude), indent=2, sort_keys=True)

    def to_table(self, per_label: bool = False) -> str:
        """Aligned plain-text table; one overall row, then optionally one row per label."""
        rows = [_metric_row(self.name or "overall", self.counts)]
        if per_label:
            rows += [_metric_row(label, c) for label, c in sorted(self.per_label.items())]
        columns = ["label", "tp", "fp", "fn", "precision", "recall", "f1"]
        frame = pd.DataFrame(rows, columns=columns)
        header = f"level={self.level.value} rules={self.n_rules} failures={self.failures}"
        return header + "\n" + frame.to_string(index=False, float_format=lambda v: f"{v:.4f}")


def _metric_row(label: str, counts: ConfusionCounts) -> list[object]:
    precision, recall, f1 = micro_metrics(counts)
    return [label, counts.tp, counts.fp, counts.fn, precision, recall, f1]


def evaluate_predictor(
    ds: LabeledDataset,
    predict: Predictor,
    level: Level | str = Level.TECHNIQUE,
    catalog: AttackCatalog | None = None,
    rollup: bool = False,
    strict: bool = False,
    name: str | None = None,
) -> EvalReport:
    """
    Score a predictor over a dataset with micro-averaging.

    Args:
        ds: Gold dataset (non-empty)
        predict: Maps a labeled rule to its predicted technique ids
        level: technique or tactic
        catalog: Required for tactic level
        rollup: Score sub-techniques as their parent technique
        strict: Abort on the first predictor failure instead of scoring it as an empty prediction
        name: Label carried into the report

    Returns:
        EvalReport with overall and per-label counts

    Raises:
        EvaluationError: Empty dataset, missing catalog for tactic level, or a
            predictor failure in strict mode
    """
    level = Level(level)
    if len(ds) == 0:
        raise EvaluationError("cannot evaluate on an empty dataset")
    if level is Level.TACTIC and catalog is None:
        raise EvaluationError("tactic-level evaluation needs a catalog")

    total = ConfusionCounts()
    per_label: Counter[tuple[str, str]] = Counter()
    failures = 0
    for item in ds:
        gold = item.technique_ids
        if rollup:
            gold = rollup_techniques(gold)
        if level is Level.TACTIC:
            assert catalog is not None
            gold = derive_tactic_labels(gold, catalog)

        try:
            predicted = frozenset(predict(item))
            if rollup:
                predicted = rollup_techniques(predicted)
            if level is Level.TACTIC:
                assert catalog is not None
                predicted = derive_tactic_labels(predicted, catalog)
        except (NidsLabelError, KeyError, ValueError) as exc:
            if strict:
                raise EvaluationError(f"predictor failed on sid {item.sid}: {exc}") from exc
            logger.warning("Predictor failed on sid %d; scoring as empty: %s", item.sid, exc)
            failures += 1
            predicted = frozenset()

        total = total + ConfusionCounts.of(gold, predicted)
        for label in gold & predicted:
            per_label[(label, "tp")] += 1
        for label in predicted - gold:
            per_label[(label, "fp")] += 1
        for label in gold - predicted:
            per_label[(label, "fn")] += 1

    labels = sorted({label for label, _ in per_label})
    breakdown = {
        label: ConfusionCounts(
            tp=per_label[(label, "tp")], fp=per_label[(label, "fp")], fn=per_label[(label, "fn")]
        )
        for label in labels
    }
    precision, recall, f1 = micro_metrics(total)
    return EvalReport(
        name=name,
        level=level,
        precision=precision,
        recall=recall,
        f1=f1,
        counts=total,
        per_label=breakdown,
        n_rules=len(ds),
        failures=failures,
        rollup=rollup,
    )


# ── Prediction files ─────────────────────────────────────────────────────────


def predictions_to_jsonl(predictions: Mapping[int, Iterable[str]]) -> str:
    """JSONL {sid, techniques} in ascending sid order."""
    return "".join(
        json.dumps({"sid": sid, "techniques": sorted(predictions[sid])}, sort_keys=True) + "\n"
        for sid in sorted(predictions)
    )


def load_predictions(path: str | Path) -> dict[int, frozenset[str]]:
    """
    Read a predictions JSONL file. Extra keys (explanation, scores) are ignored.

    Raises:
        EvaluationError: Malformed line, duplicate sid, or invalid technique id
    """
    predictions: dict[int, frozenset[str]] = {}
    for number, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
            sid = int(record["sid"])
            techniques = frozenset(record["techniques"])
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise EvaluationError(f"{path}:{number}: malformed prediction record: {exc}") from exc
        if sid in predictions:
            raise EvaluationError(f"{path}:{number}: duplicate sid {sid}")
        bad = sorted(t for t in techniques if not is_technique_id(t))
        if bad:
            raise EvaluationError(f"{path}:{number}: invalid technique id(s) {bad}")
        predictions[sid] = techniques
    return predictions


def file_predictor(predictions: Mapping[int, frozenset[str]]) -> Predictor:
    """Predictor over a loaded predictions file; a missing sid counts as a failure."""

    def predict(item: LabeledRule) -> frozenset[str]:
        try:
            return predictions[item.sid]
        except KeyError:
            raise EvaluationError(f"no prediction for sid {item.sid}") from None

    return predict


# ── Prompt selection ─────────────────────────────────────────────────────────


class PromptCandidate(BaseModel):
    config: PromptConfig
    report: EvalReport | None = None
    prompt_tokens: int = 0
    error: str | None = None

    @property
    def f1(self) -> float:
        return self.report.f1 if self.report else 0.0


class PromptSearchResult(BaseModel):
    ranked: list[PromptCandidate]
    best: PromptConfig


def select_best_prompt(
    configs: Sequence[PromptConfig],
    dev: LabeledDataset,
    client: ChatClient,
    catalog: AttackCatalog,
    examples: Sequence[IclExample],
    jobs: int = 1,
) -> PromptSearchResult:
    """
    Run the labeling pipeline per prompt configuration over a dev set and
    rank by technique-level micro-F1.

    Ties go to the configuration with fewer rendered prompt tokens over the
    dev set, then to the earlier configuration. A configuration that cannot
    run at all scores 0.

    Raises:
        EvaluationError: Empty configuration list
    """
    if not configs:
        raise EvaluationError("no prompt configurations to compare")

    candidates: list[PromptCandidate] = []
    for config in configs:
        try:
            tokens = sum(prompt_tokens(config, item.rule, catalog, examples) for item in dev)
            outcomes = label_many(client, config, [i.rule for i in dev], catalog, examples, jobs)
        except NidsLabelError as exc:
            logger.warning("Prompt config %s failed: %s", config.name, exc.message)
            candidates.append(PromptCandidate(config=config, error=exc.message))
            continue

        by_sid = {item.sid: outcome for item, outcome in zip(dev, outcomes, strict=True)}

        def predict(item: LabeledRule, by_sid: Mapping = by_sid) -> frozenset[str]:
            outcome = by_sid[item.sid]
            if isinstance(outcome, NidsLabelError):
                raise outcome
            return outcome.technique_ids

        report = evaluate_predictor(dev, predict, Level.TECHNIQUE, catalog, name=config.name)
        logger.info("Prompt config %s: micro-F1 %.4f (%d tokens)", config.name, report.f1, tokens)
        candidates.append(PromptCandidate(config=config, report=report, prompt_tokens=tokens))

    # Failed configurations rank after every configuration that ran
    order = sorted(
        range(len(candidates)),
        key=lambda i: (
            candidates[i].error is not None,
            -candidates[i].f1,
            candidates[i].prompt_tokens,
            i,
        ),
    )
    ranked = [candidates[i] for i in order]
    return PromptSearchResult(ranked=ranked, best=ranked[0].config)


# ── Comparison table ─────────────────────────────────────────────────────────


def comparison_table(
    rows: Sequence[tuple[str, EvalReport | None, EvalReport | None]],
) -> pd.DataFrame:
    """
    One row per approach with technique- and tactic-level P/R/F1.

    A missing report renders as N/A (random-within-tactic baselines have no
    tactic-level score).
    """
    columns = ["approach"] + [
        f"{level}_{metric}" for level in ("technique", "tactic") for metric in ("p", "r", "f1")
    ]
    records: list[list[object]] = []
    for name, technique, tactic in rows:
        record: list[object] = [name]
        for report in (technique, tactic):
            if report is None:
                record += ["N/A"] * 3
            else:
                record += [f"{report.precision:.4f}", f"{report.recall:.4f}", f"{report.f1:.4f}"]
        records.append(record)
    return pd.DataFrame(records, columns=columns)

