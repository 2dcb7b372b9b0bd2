"""Automatic ML side of the reference pipeline.

Feature extraction (unigrams + bigrams), near-duplicate screening over a
bounded buffer (Jaccard on unigram sets), labeling candidate selection
(passive or lowest-confidence active), the incremental classifier lifecycle
(deterministic modulo-5 train/test split, retrain every N training labels),
and exact AUC.

The default classifier is multinomial naive Bayes with add-one smoothing;
anything honoring train/predict over sparse term counts can replace it.
"""

from __future__ import annotations

import json
import math
import re
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Iterable, Optional, Sequence

from .core import DataItem
from .errors import (
    EmptyAfterDedup,
    NonTextPayload,
    SingleClassTestSet,
    UnknownClass,
    UntrainedModel,
)

_TOKEN_SPLIT = re.compile(r"[^a-z0-9]+")


@dataclass
class FeatureVector:
    item_id: str
    terms: dict[str, int] = field(default_factory=dict)

    @property
    def empty(self) -> bool:
        return not self.terms

    def unigrams(self) -> frozenset[str]:
        return frozenset(t for t in self.terms if "_" not in t)


def tokenize(text: str) -> list[str]:
    return [t for t in _TOKEN_SPLIT.split(text.lower()) if t]


def extract_features(item: DataItem) -> FeatureVector:
    """Unigram and adjacent-bigram counts of the lowercased payload. An empty
    payload yields an empty vector; the item then bypasses classification."""
    if not isinstance(item.payload, str):
        raise NonTextPayload(f"{item.item_id}: payload is {type(item.payload).__name__}")
    tokens = tokenize(item.payload)
    terms: dict[str, int] = {}
    for tok in tokens:
        terms[tok] = terms.get(tok, 0) + 1
    for a, b in zip(tokens, tokens[1:]):
        bigram = f"{a}_{b}"
        terms[bigram] = terms.get(bigram, 0) + 1
    return FeatureVector(item_id=item.item_id, terms=terms)


def jaccard(a: frozenset[str], b: frozenset[str]) -> float:
    if not a and not b:
        return 1.0
    union = len(a | b)
    return len(a & b) / union if union else 0.0


@dataclass
class BufferEntry:
    item: DataItem
    features: FeatureVector
    signature: frozenset[str]
    confidence: Optional[float]
    seq: int
    duplicate: bool = False
    selected: bool = False


class SampleBuffer:
    """Bounded window of the latest labeling candidates; eviction is
    oldest-first. Signatures stay until evicted so re-sent duplicates keep
    being caught."""

    def __init__(self, capacity: int = 1000):
        self.capacity = int(capacity)
        self.entries: deque[BufferEntry] = deque()
        self._seq = 0

    def __len__(self) -> int:
        return len(self.entries)

    def insert(self, item: DataItem, features: FeatureVector,
               confidence: Optional[float] = None,
               duplicate: bool = False) -> BufferEntry:
        self._seq += 1
        entry = BufferEntry(item=item, features=features,
                            signature=features.unigrams(),
                            confidence=confidence, seq=self._seq,
                            duplicate=duplicate)
        self.entries.append(entry)
        while len(self.entries) > self.capacity:
            self.entries.popleft()
        return entry

    def candidates(self, dedup: bool) -> list[BufferEntry]:
        return [e for e in self.entries
                if not e.selected and not (dedup and e.duplicate)]

    def residual_lineages(self) -> list[frozenset[str]]:
        return [e.item.lineage for e in self.entries if not e.selected]


def near_duplicate(item: DataItem, buffer: SampleBuffer, threshold: float,
                   features: Optional[FeatureVector] = None) -> bool:
    """True iff the item's unigram set has Jaccard >= threshold against any
    buffered signature; the item's own signature is inserted either way."""
    feats = features if features is not None else extract_features(item)
    signature = feats.unigrams()
    hit = any(jaccard(signature, e.signature) >= threshold
              for e in buffer.entries)
    buffer.insert(item, feats, confidence=item.attributes.get("confidence"),
                  duplicate=hit)
    return hit


def select_for_labeling(buffer: SampleBuffer, mode: str, dedup: bool, n: int,
                        *, rng=None) -> list[BufferEntry]:
    """Pick the next crowd candidates and remove them from candidacy.

    passive: seeded uniform sample. active: lowest confidence first (items
    never scored sort lowest), ties to oldest.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    pool = buffer.candidates(dedup)
    if not pool:
        raise EmptyAfterDedup("no labeling candidates this round")
    if mode == "active":
        pool.sort(key=lambda e: (e.confidence if e.confidence is not None
                                 else -1.0, e.seq))
        chosen = pool[:n]
    else:
        if rng is None:
            import random
            rng = random.Random(0)
        chosen = rng.sample(pool, min(n, len(pool)))
    for entry in chosen:
        entry.selected = True
    return chosen


# --------------------------------------------------------------------------
# classifier
# --------------------------------------------------------------------------


@dataclass
class LabeledExample:
    item_id: str
    features: FeatureVector
    label: str
    split: str = "train"  # train | test


@dataclass
class ClassifierModel:
    """Multinomial naive Bayes sufficient statistics. Prediction is a pure
    function of (model, features)."""

    version: int
    classes: tuple[str, ...]
    class_counts: dict[str, int]
    term_counts: dict[str, dict[str, int]]
    term_totals: dict[str, int]
    vocabulary: frozenset[str]
    trained_on: int

    def to_json(self) -> str:
        return json.dumps({
            "format": "cspflow-nb-model/1",
            "version": self.version,
            "classes": list(self.classes),
            "trained_on": self.trained_on,
            "class_counts": self.class_counts,
            "term_totals": self.term_totals,
            "term_counts": {c: dict(sorted(t.items()))
                            for c, t in self.term_counts.items()},
        }, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ClassifierModel":
        raw = json.loads(text)
        if raw.get("format") != "cspflow-nb-model/1":
            raise ValueError(f"unsupported model format {raw.get('format')!r}")
        term_counts = {c: dict(t) for c, t in raw["term_counts"].items()}
        vocab = frozenset(t for terms in term_counts.values() for t in terms)
        return cls(
            version=raw["version"],
            classes=tuple(raw["classes"]),
            class_counts=dict(raw["class_counts"]),
            term_counts=term_counts,
            term_totals=dict(raw["term_totals"]),
            vocabulary=vocab,
            trained_on=raw["trained_on"],
        )


def train_model(examples: Sequence[LabeledExample], classes: Sequence[str],
                version: int) -> ClassifierModel:
    class_counts = {c: 0 for c in classes}
    term_counts: dict[str, dict[str, int]] = {c: {} for c in classes}
    term_totals = {c: 0 for c in classes}
    for ex in examples:
        if ex.label not in class_counts:
            raise UnknownClass(ex.label)
        class_counts[ex.label] += 1
        bucket = term_counts[ex.label]
        for term, count in ex.features.terms.items():
            bucket[term] = bucket.get(term, 0) + count
            term_totals[ex.label] += count
    vocab = frozenset(t for c in classes for t in term_counts[c])
    return ClassifierModel(
        version=version,
        classes=tuple(classes),
        class_counts=class_counts,
        term_counts=term_counts,
        term_totals=term_totals,
        vocabulary=vocab,
        trained_on=len(examples),
    )


def class_posteriors(model: ClassifierModel,
                     features: FeatureVector) -> dict[str, float]:
    """Normalized class posteriors under add-one-smoothed multinomial NB.
    Terms outside the training vocabulary are ignored."""
    if model.version < 1:
        raise UntrainedModel("model has no trained version yet")
    total_examples = sum(model.class_counts.values())
    vocab_size = len(model.vocabulary)
    log_scores: dict[str, float] = {}
    for cls in model.classes:
        prior = (model.class_counts[cls] + 1) / (total_examples + len(model.classes))
        score = math.log(prior)
        denom = model.term_totals[cls] + vocab_size
        bucket = model.term_counts[cls]
        for term, count in features.terms.items():
            if term not in model.vocabulary:
                continue
            score += count * math.log((bucket.get(term, 0) + 1) / denom)
        log_scores[cls] = score
    peak = max(log_scores.values())
    expd = {c: math.exp(s - peak) for c, s in log_scores.items()}
    norm = sum(expd.values())
    return {c: v / norm for c, v in expd.items()}


def predict(model: ClassifierModel,
            features: FeatureVector) -> tuple[str, float]:
    """Argmax class and its posterior (ties to the lowest class index)."""
    posteriors = class_posteriors(model, features)
    best = min(model.classes,
               key=lambda c: (-posteriors[c], model.classes.index(c)))
    return best, posteriors[best]


# --------------------------------------------------------------------------
# incremental learner state
# --------------------------------------------------------------------------


@dataclass
class QualityCheckpoint:
    labels_used: int
    train_count: int
    test_count: int
    auc: Optional[float]
    mode: str = ""
    dedup: bool = False

    CSV_HEADER = "labels_used,train_count,test_count,auc,mode,dedup"

    def csv_row(self) -> str:
        auc = "" if self.auc is None else f"{self.auc:.6f}"
        return (f"{self.labels_used},{self.train_count},{self.test_count},"
                f"{auc},{self.mode},{int(self.dedup)}")


@dataclass
class LearnerConfig:
    classes: tuple[str, ...] = ("informative", "not_informative")
    positive_class: str = "informative"
    retrain_every: int = 50
    test_every: int = 5
    max_train: int = 5000
    mode: str = "passive"
    dedup: bool = False
    # optional fixed evaluation set (offline-analysis style); scored at every
    # retrain in addition to the online growing test split
    holdout: Optional[list["LabeledExample"]] = None


class LearnerState:
    """Streams decided labels into a deterministic 80/20 split and retrains
    at a fixed cadence; every 5th label (positions 5, 10, ...) is test."""

    def __init__(self, cfg: LearnerConfig):
        if cfg.positive_class not in cfg.classes:
            cfg.positive_class = cfg.classes[0]
        self.cfg = cfg
        self.labels_seen = 0
        self.train_seen = 0
        self.test_seen = 0
        self.train: list[LabeledExample] = []
        self.test: list[LabeledExample] = []
        self.version = 0
        self.model: Optional[ClassifierModel] = None
        self.checkpoints: list[QualityCheckpoint] = []
        self.holdout_checkpoints: list[QualityCheckpoint] = []

    def ingest_label(self, example: LabeledExample) -> Optional[ClassifierModel]:
        """Returns the freshly trained model on retrain boundaries, else None."""
        if example.label not in self.cfg.classes:
            raise UnknownClass(example.label)
        self.labels_seen += 1
        if self.labels_seen % self.cfg.test_every == 0:
            example.split = "test"
            self.test_seen += 1
            self.test.append(example)
            if len(self.test) > self.cfg.max_train:
                self.test.pop(0)
            return None
        example.split = "train"
        self.train_seen += 1
        self.train.append(example)
        if len(self.train) > self.cfg.max_train:
            self.train.pop(0)
        if self.train_seen % self.cfg.retrain_every == 0:
            return self._retrain()
        return None

    def _retrain(self) -> ClassifierModel:
        self.version += 1
        self.model = train_model(self.train, self.cfg.classes, self.version)
        self.checkpoints.append(QualityCheckpoint(
            labels_used=self.labels_seen,
            train_count=self.train_seen,
            test_count=self.test_seen,
            auc=self.test_auc(),
            mode=self.cfg.mode,
            dedup=self.cfg.dedup,
        ))
        if self.cfg.holdout:
            self.holdout_checkpoints.append(QualityCheckpoint(
                labels_used=self.labels_seen,
                train_count=self.train_seen,
                test_count=len(self.cfg.holdout),
                auc=self._score_auc(self.cfg.holdout),
                mode=self.cfg.mode,
                dedup=self.cfg.dedup,
            ))
        return self.model

    def test_auc(self) -> Optional[float]:
        return self._score_auc(self.test)

    def _score_auc(self, examples: list["LabeledExample"]) -> Optional[float]:
        if self.model is None or not examples:
            return None
        scored = []
        for ex in examples:
            posterior = class_posteriors(self.model, ex.features)
            scored.append((posterior[self.cfg.positive_class],
                           ex.label == self.cfg.positive_class))
        try:
            return auc(scored)
        except SingleClassTestSet:
            return None


# --------------------------------------------------------------------------
# exact AUC
# --------------------------------------------------------------------------


def auc(scored: Sequence[tuple[float, bool]]) -> float:
    """Exact area under the ROC curve via tie-averaged ranks: the probability
    a positive outscores a negative, ties counted half."""
    n_pos = sum(1 for _, is_pos in scored if is_pos)
    n_neg = len(scored) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClassTestSet(f"pos={n_pos} neg={n_neg}")
    order = sorted(range(len(scored)), key=lambda i: scored[i][0])
    ranks = [0.0] * len(scored)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and \
                scored[order[j + 1]][0] == scored[order[i]][0]:
            j += 1
        # 1-based ranks i+1..j+1 averaged across the tie group; the average
        # is always an exact multiple of 0.5, so float stays exact
        avg = (i + j + 2) / 2
        for k in range(i, j + 1):
            ranks[order[k]] = avg
        i = j + 1
    rank_sum = sum(ranks[i] for i, (_, is_pos) in enumerate(scored) if is_pos)
    return (rank_sum - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg)
