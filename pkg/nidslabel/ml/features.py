"""
TF-IDF Features

Converts rule feature text into L2-normalized TF-IDF vectors and technique
sets into binary label matrices.

IDF uses the smoothed form
    idf(t) = ln((1 + N) / (1 + df(t))) + 1
so every weight is strictly positive. Vocabulary indices follow the
lexicographic order of the retained terms.
"""

import re
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from functools import cached_property, partial
from typing import Any

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy import sparse
from sklearn.feature_extraction.text import CountVectorizer, TfidfTransformer
from sklearn.preprocessing import MultiLabelBinarizer, normalize

from nidslabel.core.errors import FeatureError
from nidslabel.core.logging import get_logger
from nidslabel.data.dataset import LabeledDataset

logger = get_logger(__name__)

_SPLIT = re.compile(r"[^a-z0-9]+")


class TokenizerConfig(BaseModel):
    """Tokenization and vocabulary settings."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    ngram_max: int = Field(default=1, ge=1, le=2)
    max_features: int | None = Field(default=None, ge=1)


def tokenize(text: str, config: TokenizerConfig | None = None) -> list[str]:
    """
    Lowercase and split on any non-alphanumeric character.

    Single-character tokens are dropped unless they are digits, so port
    numbers like "0" or "8" survive. With ngram_max=2, adjacent-token bigrams
    ("smb probe") follow the unigrams.
    """
    config = config or TokenizerConfig()
    tokens = [t for t in _SPLIT.split(text.lower()) if len(t) >= 2 or t.isdigit()]
    if config.ngram_max >= 2:
        tokens += [f"{a} {b}" for a, b in zip(tokens, tokens[1:], strict=False)]
    return tokens


@dataclass(frozen=True)
class Vocabulary:
    terms: tuple[str, ...]
    document_count: int
    document_frequency: tuple[int, ...]

    @cached_property
    def index(self) -> dict[str, int]:
        return {term: i for i, term in enumerate(self.terms)}

    def __len__(self) -> int:
        return len(self.terms)


@dataclass(frozen=True, eq=False)
class TfidfModel:
    vocabulary: Vocabulary
    idf: np.ndarray
    config: TokenizerConfig

    @cached_property
    def _counter(self) -> CountVectorizer:
        return CountVectorizer(
            analyzer=partial(tokenize, config=self.config), vocabulary=self.vocabulary.index
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "vocabulary": list(self.vocabulary.terms),
            "document_count": self.vocabulary.document_count,
            "document_frequency": list(self.vocabulary.document_frequency),
            "idf": [float(v) for v in self.idf],
            "config": self.config.model_dump(),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "TfidfModel":
        terms = tuple(data["vocabulary"])
        idf = np.asarray(data["idf"], dtype=np.float64)
        df = tuple(int(v) for v in data["document_frequency"])
        if not (len(terms) == len(idf) == len(df)):
            raise FeatureError("vocabulary, idf and document_frequency lengths differ")
        return cls(
            vocabulary=Vocabulary(terms, int(data["document_count"]), df),
            idf=idf,
            config=TokenizerConfig.model_validate(data["config"]),
        )


@dataclass(frozen=True)
class FeatureVector:
    """Sparse vector: (index, weight) pairs sorted by index."""

    indices: tuple[int, ...]
    weights: tuple[float, ...]

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.weights)) if self.weights else 0.0

    def is_zero(self) -> bool:
        return not self.indices


@dataclass(frozen=True, eq=False)
class LabelMatrix:
    """Binary indicator rows over label_universe (sorted)."""

    rows: np.ndarray
    label_universe: list[str]

    @property
    def shape(self) -> tuple[int, int]:
        return self.rows.shape


def fit_tfidf(corpus: Sequence[str], config: TokenizerConfig | None = None) -> TfidfModel:
    """
    Fit vocabulary and IDF weights on a corpus of feature texts.

    With config.max_features set, only the K terms of highest document
    frequency are kept (ties broken lexicographically).

    Raises:
        FeatureError: Empty corpus, or a corpus without any tokens
    """
    config = config or TokenizerConfig()
    if not corpus:
        raise FeatureError("cannot fit TF-IDF on an empty corpus")

    counter = CountVectorizer(analyzer=partial(tokenize, config=config), binary=True)
    try:
        presence = counter.fit_transform(corpus)
    except ValueError as exc:
        raise FeatureError(f"corpus produced an empty vocabulary: {exc}") from exc

    names = counter.get_feature_names_out()
    df = np.asarray(presence.sum(axis=0)).ravel()

    order = sorted(range(len(names)), key=lambda i: (-df[i], names[i]))
    if config.max_features is not None:
        order = order[: config.max_features]
    keep = sorted(order, key=lambda i: names[i])

    kept = presence[:, keep]
    transformer = TfidfTransformer(smooth_idf=True).fit(kept)

    vocabulary = Vocabulary(
        terms=tuple(str(names[i]) for i in keep),
        document_count=len(corpus),
        document_frequency=tuple(int(df[i]) for i in keep),
    )
    logger.info(
        "Fitted TF-IDF: %d documents, %d terms (of %d seen)",
        len(corpus),
        len(vocabulary),
        len(names),
    )
    return TfidfModel(vocabulary=vocabulary, idf=transformer.idf_.astype(np.float64), config=config)


def transform_many(model: TfidfModel, texts: Sequence[str]) -> sparse.csr_matrix:
    """Row-wise TF-IDF matrix; raw counts times idf, each row L2-normalized."""
    counts = model._counter.transform(texts).astype(np.float64)
    weighted = counts @ sparse.diags(model.idf)
    return normalize(sparse.csr_matrix(weighted), norm="l2", copy=False)


def transform(model: TfidfModel, text: str) -> FeatureVector:
    """Vectorize one text. Out-of-vocabulary tokens are ignored."""
    row = transform_many(model, [text])
    row.sort_indices()
    return FeatureVector(
        indices=tuple(int(i) for i in row.indices),
        weights=tuple(float(w) for w in row.data),
    )


def binarize_labels(
    ds: LabeledDataset, label_universe: Sequence[str] | None = None
) -> LabelMatrix:
    """
    Binary label matrix with columns in sorted label-universe order.

    Args:
        ds: Dataset to binarize
        label_universe: Column labels; defaults to ds.label_universe.
            Labels outside the universe are ignored.
    """
    universe = sorted(label_universe) if label_universe is not None else ds.label_universe
    if len(ds) == 0:
        empty = np.zeros((0, len(universe)), dtype=np.int8)
        return LabelMatrix(rows=empty, label_universe=universe)

    known = set(universe)
    binarizer = MultiLabelBinarizer(classes=universe)
    rows = binarizer.fit_transform([sorted(item.technique_ids & known) for item in ds])
    return LabelMatrix(rows=np.asarray(rows, dtype=np.int8), label_universe=universe)
