"""
One-vs-Rest Technique Classifiers

Trains one binary scoring model per technique over TF-IDF features:
    svm            linear hinge-loss model, seeded SGD with iterate averaging
    random_forest  bagged gini CART trees with per-node feature subsampling
    gbm            logistic gradient boosting on shallow trees

Scores and thresholds:
    svm  decision margin,            positive when > 0
    rf   mean class-1 probability,   positive when > 0.5
    gbm  boosted logit,              positive when > 0

Model files are joblib containers described in docs/MODEL_FORMAT.md.
"""

import pickle
from collections.abc import Sequence
from dataclasses import dataclass, field
from enum import StrEnum
from pathlib import Path
from typing import Any, Literal

import joblib
import numpy as np
from joblib import Parallel, delayed
from pydantic import BaseModel, ConfigDict, Field
from sklearn.dummy import DummyClassifier
from sklearn.ensemble import GradientBoostingClassifier, RandomForestClassifier
from sklearn.linear_model import SGDClassifier

from nidslabel.core.errors import DatasetError, FeatureError, ModelFormatError
from nidslabel.core.logging import get_logger
from nidslabel.data.dataset import LabeledDataset, LabeledRule, stratified_split
from nidslabel.ml.features import (
    TfidfModel,
    TokenizerConfig,
    binarize_labels,
    fit_tfidf,
    transform_many,
)
from nidslabel.rules.parser import SnortRule, feature_text
from nidslabel.scoring.evaluation import evaluate_predictor

logger = get_logger(__name__)

MODEL_FORMAT = "nidslabel-model"
MODEL_FORMAT_VERSION = 1


class ModelType(StrEnum):
    SVM = "svm"
    RANDOM_FOREST = "random_forest"
    GBM = "gbm"


class ThresholdPolicy(StrEnum):
    POSITIVE_MARGIN = "positive_margin"
    TOP1_FALLBACK = "top1_fallback"


# ── Hyperparameters ──────────────────────────────────────────────────────────


class SvmParams(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    c: float = Field(default=1.0, gt=0)
    epochs: int = Field(default=50, ge=1)


class ForestParams(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    trees: int = Field(default=100, ge=1)
    max_depth: int | None = Field(default=16, ge=1)  # None = unlimited
    min_leaf: int = Field(default=1, ge=1)
    bootstrap: bool = True
    max_features: Literal["sqrt", "log2", "all"] = "sqrt"


class BoostingParams(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    rounds: int = Field(default=100, ge=1)
    learning_rate: float = Field(default=0.1, gt=0, le=1)
    stump_depth: int = Field(default=2, ge=1)


class Hyperparams(BaseModel):
    """Model type plus the parameters of every type; only the active type's block is used."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    model_type: ModelType = ModelType.SVM
    svm: SvmParams = SvmParams()
    rf: ForestParams = ForestParams()
    gbm: BoostingParams = BoostingParams()
    seed: int = Field(default=7, ge=0)

    def active_params(self) -> BaseModel:
        if self.model_type is ModelType.SVM:
            return self.svm
        if self.model_type is ModelType.RANDOM_FOREST:
            return self.rf
        return self.gbm

    def describe(self) -> str:
        params = ", ".join(f"{k}={v}" for k, v in self.active_params().model_dump().items())
        return f"{self.model_type.value}({params})"


def default_grid(seed: int = 7) -> list[Hyperparams]:
    """Default hyperparameters of each model type."""
    return [Hyperparams(model_type=t, seed=seed) for t in ModelType]


# ── Model ────────────────────────────────────────────────────────────────────


@dataclass(frozen=True, eq=False)
class MultiLabelClassifier:
    tfidf: TfidfModel
    label_universe: tuple[str, ...]
    estimators: tuple[Any, ...]
    threshold_policy: ThresholdPolicy
    hyperparams: Hyperparams

    def __post_init__(self) -> None:
        if len(self.estimators) != len(self.label_universe):
            raise ModelFormatError(
                f"{len(self.estimators)} estimators for {len(self.label_universe)} labels"
            )


@dataclass(frozen=True)
class LabelPrediction:
    technique_ids: frozenset[str]
    scores: dict[str, float] = field(default_factory=dict)


def label_seed(seed: int, label: str) -> int:
    """Per-label RNG seed derived from (seed, label id); independent of training order."""
    entropy = [seed, *label.encode("ascii")]
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])


def _make_estimator(hp: Hyperparams, n_samples: int, random_state: int) -> Any:
    if hp.model_type is ModelType.SVM:
        return SGDClassifier(
            loss="hinge",
            penalty="l2",
            alpha=1.0 / (hp.svm.c * n_samples),
            max_iter=hp.svm.epochs,
            tol=None,
            shuffle=True,
            average=True,
            random_state=random_state,
        )
    if hp.model_type is ModelType.RANDOM_FOREST:
        return RandomForestClassifier(
            n_estimators=hp.rf.trees,
            criterion="gini",
            max_depth=hp.rf.max_depth,
            min_samples_leaf=hp.rf.min_leaf,
            max_features=None if hp.rf.max_features == "all" else hp.rf.max_features,
            bootstrap=hp.rf.bootstrap,
            random_state=random_state,
        )
    return GradientBoostingClassifier(
        loss="log_loss",
        n_estimators=hp.gbm.rounds,
        learning_rate=hp.gbm.learning_rate,
        max_depth=hp.gbm.stump_depth,
        random_state=random_state,
    )


def _fit_label(hp: Hyperparams, features: Any, column: np.ndarray, label: str) -> Any:
    # A column with every rule positive has one class; score it as constant positive
    if column.min() == 1:
        return DummyClassifier(strategy="constant", constant=1).fit(features, column)
    estimator = _make_estimator(hp, features.shape[0], label_seed(hp.seed, label))
    return estimator.fit(features, column)


def _positive_scores(model_type: ModelType, estimator: Any, features: Any) -> np.ndarray:
    if isinstance(estimator, DummyClassifier):
        return np.ones(features.shape[0])
    if model_type is ModelType.RANDOM_FOREST:
        column = list(estimator.classes_).index(1)
        return estimator.predict_proba(features)[:, column]
    return estimator.decision_function(features)


def _threshold(model_type: ModelType) -> float:
    return 0.5 if model_type is ModelType.RANDOM_FOREST else 0.0


def train_multilabel(
    train: LabeledDataset,
    hp: Hyperparams,
    tokenizer: TokenizerConfig | None = None,
    policy: ThresholdPolicy = ThresholdPolicy.POSITIVE_MARGIN,
    label_universe: Sequence[str] | None = None,
    jobs: int = 1,
) -> MultiLabelClassifier:
    """
    Train one binary model per label on the binarized label columns.

    TF-IDF is fitted on the training rules only. Per-label fits are
    independent and may run on `jobs` threads; results are collected in
    label order, so the model does not depend on completion order.

    Args:
        train: Training rules
        hp: Hyperparameters (model type and seed)
        tokenizer: Tokenization settings for the embedded TF-IDF model
        policy: Threshold policy stored with the model
        label_universe: Labels to train; defaults to the training universe
        jobs: Parallel per-label fits

    Returns:
        Trained MultiLabelClassifier

    Raises:
        DatasetError: Empty training set or a label column without positives
    """
    if len(train) == 0:
        raise DatasetError("cannot train on an empty dataset")

    labels = binarize_labels(train, label_universe)
    empty = [lab for j, lab in enumerate(labels.label_universe) if labels.rows[:, j].sum() == 0]
    if empty:
        raise DatasetError(f"label(s) without positive training rules: {', '.join(empty)}")

    texts = [feature_text(item.rule) for item in train]
    tfidf = fit_tfidf(texts, tokenizer)
    features = transform_many(tfidf, texts)

    estimators = Parallel(n_jobs=jobs, prefer="threads")(
        delayed(_fit_label)(hp, features, labels.rows[:, j], label)
        for j, label in enumerate(labels.label_universe)
    )
    logger.info(
        "Trained %s on %d rules, %d labels",
        hp.describe(),
        len(train),
        len(labels.label_universe),
    )
    return MultiLabelClassifier(
        tfidf=tfidf,
        label_universe=tuple(labels.label_universe),
        estimators=tuple(estimators),
        threshold_policy=policy,
        hyperparams=hp,
    )


def score_rules(model: MultiLabelClassifier, rules: Sequence[SnortRule]) -> np.ndarray:
    """Raw per-label scores, shape (len(rules), len(label_universe))."""
    features = transform_many(model.tfidf, [feature_text(r) for r in rules])
    if not model.estimators:
        return np.zeros((len(rules), 0))
    model_type = model.hyperparams.model_type
    return np.column_stack(
        [_positive_scores(model_type, est, features) for est in model.estimators]
    )


def predict_many(model: MultiLabelClassifier, rules: Sequence[SnortRule]) -> list[LabelPrediction]:
    """Apply the threshold policy row by row."""
    if not rules:
        return []
    scores = score_rules(model, rules)
    threshold = _threshold(model.hyperparams.model_type)
    results: list[LabelPrediction] = []
    for row in scores:
        chosen = {model.label_universe[j] for j in np.flatnonzero(row > threshold)}
        if not chosen and model.threshold_policy is ThresholdPolicy.TOP1_FALLBACK and len(row):
            # argmax returns the first maximum; universe is sorted, so ties go lexicographic
            chosen = {model.label_universe[int(np.argmax(row))]}
        results.append(
            LabelPrediction(
                technique_ids=frozenset(chosen),
                scores={lab: float(s) for lab, s in zip(model.label_universe, row, strict=True)},
            )
        )
    return results


def predict_labels(model: MultiLabelClassifier, rule: SnortRule) -> LabelPrediction:
    return predict_many(model, [rule])[0]


# ── Tuning ───────────────────────────────────────────────────────────────────


class TuningTrial(BaseModel):
    round: int
    hyperparams: Hyperparams
    validation_f1: float


class TuningReport(BaseModel):
    trials: list[TuningTrial]
    best: Hyperparams
    best_f1: float
    validation_rules: int


def _neighbors(hp: Hyperparams) -> list[Hyperparams]:
    """Local perturbations: x2 and /2 on continuous values, +-step on integers."""
    out: list[Hyperparams] = []

    def vary(block: str, **changes: Any) -> None:
        current: BaseModel = getattr(hp, block)
        try:
            updated = type(current).model_validate({**current.model_dump(), **changes})
        except ValueError:
            return
        out.append(hp.model_copy(update={block: updated}))

    if hp.model_type is ModelType.SVM:
        vary("svm", c=hp.svm.c * 2)
        vary("svm", c=hp.svm.c / 2)
        vary("svm", epochs=hp.svm.epochs + 10)
        vary("svm", epochs=hp.svm.epochs - 10)
    elif hp.model_type is ModelType.RANDOM_FOREST:
        vary("rf", trees=hp.rf.trees + 25)
        vary("rf", trees=hp.rf.trees - 25)
        if hp.rf.max_depth is not None:
            vary("rf", max_depth=hp.rf.max_depth + 4)
            vary("rf", max_depth=hp.rf.max_depth - 4)
        vary("rf", min_leaf=hp.rf.min_leaf + 1)
        vary("rf", min_leaf=hp.rf.min_leaf - 1)
    else:
        vary("gbm", rounds=hp.gbm.rounds + 25)
        vary("gbm", rounds=hp.gbm.rounds - 25)
        vary("gbm", learning_rate=min(hp.gbm.learning_rate * 2, 1.0))
        vary("gbm", learning_rate=hp.gbm.learning_rate / 2)
        vary("gbm", stump_depth=hp.gbm.stump_depth + 1)
        vary("gbm", stump_depth=hp.gbm.stump_depth - 1)
    return out


def _validation_split(
    train: LabeledDataset, seed: int
) -> tuple[LabeledDataset, LabeledDataset]:
    try:
        return stratified_split(train, 0.8, seed)
    except DatasetError:
        logger.warning("Stratified validation split impossible; using a seeded random split")
    order = np.random.default_rng(seed).permutation(len(train))
    cut = max(1, min(len(train) - 1, int(round(0.8 * len(train)))))
    sids = [train.rules[i].sid for i in order]
    return train.subset(sids[:cut]), train.subset(sids[cut:])


def tune(
    train: LabeledDataset,
    grid: Sequence[Hyperparams],
    rounds: int,
    seed: int,
    tokenizer: TokenizerConfig | None = None,
    policy: ThresholdPolicy = ThresholdPolicy.POSITIVE_MARGIN,
    jobs: int = 1,
) -> tuple[MultiLabelClassifier, TuningReport]:
    """
    Hyperparameter search on an internal 80/20 split of the training set.

    Round 1 evaluates the grid; each later round evaluates the unseen local
    perturbations of the best configuration so far. The winner (highest
    validation micro-F1, earliest trial on ties) is retrained on all of
    `train`. The test split is never involved.

    Raises:
        FeatureError: Empty grid or rounds < 1
        DatasetError: Fewer than two training rules
    """
    if not grid:
        raise FeatureError("tuning grid is empty")
    if rounds < 1:
        raise FeatureError(f"rounds must be >= 1, got {rounds}")
    if len(train) < 2:
        raise DatasetError("tuning needs at least two training rules")

    fit_part, validation = _validation_split(train, seed)
    # Labels absent from the fit part cannot be learned there; they still count as misses
    universe = fit_part.label_universe

    def score(hp: Hyperparams) -> float:
        model = train_multilabel(fit_part, hp, tokenizer, policy, universe, jobs)

        def predict(item: LabeledRule) -> frozenset[str]:
            return predict_labels(model, item.rule).technique_ids

        return evaluate_predictor(validation, predict, level="technique").f1

    trials: list[TuningTrial] = []
    seen: set[str] = set()
    candidates = list(grid)
    for round_number in range(1, rounds + 1):
        fresh = [hp for hp in candidates if hp.model_dump_json() not in seen]
        if not fresh:
            break
        for hp in fresh:
            seen.add(hp.model_dump_json())
            f1 = score(hp)
            trials.append(TuningTrial(round=round_number, hyperparams=hp, validation_f1=f1))
            logger.info("Tuning round %d: %s -> micro-F1 %.4f", round_number, hp.describe(), f1)
        best_trial = max(trials, key=lambda t: t.validation_f1)  # first maximum wins ties
        candidates = _neighbors(best_trial.hyperparams)

    best_trial = max(trials, key=lambda t: t.validation_f1)
    model = train_multilabel(train, best_trial.hyperparams, tokenizer, policy, jobs=jobs)
    report = TuningReport(
        trials=trials,
        best=best_trial.hyperparams,
        best_f1=best_trial.validation_f1,
        validation_rules=len(validation),
    )
    return model, report


# ── Persistence ──────────────────────────────────────────────────────────────


def model_to_container(model: MultiLabelClassifier) -> dict[str, Any]:
    return {
        "format": MODEL_FORMAT,
        "format_version": MODEL_FORMAT_VERSION,
        "tfidf": model.tfidf.to_dict(),
        "label_universe": list(model.label_universe),
        "threshold_policy": model.threshold_policy.value,
        "hyperparams": model.hyperparams.model_dump(mode="json"),
        "estimators": list(model.estimators),
    }


def save_model(path: str | Path, model: MultiLabelClassifier) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    joblib.dump(model_to_container(model), path, compress=3)
    return path


def load_model(path: str | Path) -> MultiLabelClassifier:
    """
    Load and validate a model file.

    Raises:
        ModelFormatError: Unreadable file, wrong format tag or version, or
            inconsistent contents
    """
    try:
        container = joblib.load(path)
    except (
        OSError,
        EOFError,
        pickle.UnpicklingError,
        ValueError,
        KeyError,
        AttributeError,
        ImportError,
    ) as exc:
        raise ModelFormatError(f"{path}: unreadable model file: {exc}") from exc

    if not isinstance(container, dict) or container.get("format") != MODEL_FORMAT:
        raise ModelFormatError(f"{path}: not a {MODEL_FORMAT} file")
    if container.get("format_version") != MODEL_FORMAT_VERSION:
        raise ModelFormatError(
            f"{path}: unsupported format_version {container.get('format_version')!r}"
        )
    try:
        return MultiLabelClassifier(
            tfidf=TfidfModel.from_dict(container["tfidf"]),
            label_universe=tuple(container["label_universe"]),
            estimators=tuple(container["estimators"]),
            threshold_policy=ThresholdPolicy(container["threshold_policy"]),
            hyperparams=Hyperparams.model_validate(container["hyperparams"]),
        )
    except (KeyError, TypeError, ValueError, FeatureError) as exc:
        raise ModelFormatError(f"{path}: invalid model contents: {exc}") from exc
