"""Downstream log analysis: session construction, semantic feature
extraction, a recurrent session classifier for anomaly detection and
failure diagnosis, and the evaluation metrics for both it and the miner.

Each message contributes one feature unit per CI pair (template, concept,
and instance embeddings concatenated); messages without pairs contribute
a single unit with ⟨NIL⟩ concept and instance slots.  Messages within a
session are separated by a learned ⟨SEP⟩ vector owned by the classifier.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np

from . import neuralcore as nc
from .features import EmbeddingTable, NIL_TOKEN
from .jparser import TEMPLATE_WILDCARD, ParseResult

log = logging.getLogger(__name__)

UNKEYED = ""


class DownstreamError(ValueError):
    """Raised for invalid sessions, labels, or classifier configs."""


# ---------------------------------------------------------------------------
# Sessions
# ---------------------------------------------------------------------------

@dataclass
class Session:
    key: str
    results: list[ParseResult]
    label: int | None = None


def build_sessions(results: Iterable[ParseResult],
                   key_concept: str) -> list[Session]:
    """Group messages by the instance value of their key-concept pair.

    Messages lacking such a pair are collected into a residual session
    with an empty key, appended last and excluded from evaluation.
    """
    by_key: dict[str, Session] = {}
    residual = Session(key=UNKEYED, results=[])
    order: list[Session] = []
    for result in results:
        key = None
        for concept, instance in result.ci_pairs:
            if concept == key_concept:
                key = instance
                break
        if key is None:
            residual.results.append(result)
            continue
        session = by_key.get(key)
        if session is None:
            session = Session(key=key, results=[])
            by_key[key] = session
            order.append(session)
        session.results.append(result)
    if residual.results:
        order.append(residual)
    return order


# ---------------------------------------------------------------------------
# Feature extraction
# ---------------------------------------------------------------------------

@dataclass
class SessionFeatures:
    """Ordered feature units; None marks a ⟨SEP⟩ position, which the
    classifier replaces with its learned separator vector."""

    units: list[np.ndarray | None]
    dim: int


def _template_embedding(template: Sequence[str],
                        table: EmbeddingTable) -> np.ndarray:
    rows = np.empty((len(template), table.d_word))
    for k, token in enumerate(template):
        if token == TEMPLATE_WILDCARD:
            rows[k] = table.embed(NIL_TOKEN)
        elif token.startswith("<*") and token.endswith("*>") and len(token) > 4:
            rows[k] = table.embed(token[2:-2])
        else:
            rows[k] = table.embed(token)
    return rows.mean(axis=0)


def extract_features(session: Session,
                     table: EmbeddingTable) -> SessionFeatures:
    """Per-message units [emb_template; emb_concept; emb_instance]."""
    if not session.results:
        raise DownstreamError("session %r has no messages" % session.key)
    d = table.d_word
    nil = table.embed(NIL_TOKEN)
    units: list[np.ndarray | None] = []
    for m, result in enumerate(session.results):
        if m > 0:
            units.append(None)
        emb_template = _template_embedding(result.template, table)
        if result.ci_pairs:
            for concept, instance in result.ci_pairs:
                units.append(np.concatenate([
                    emb_template, table.embed(concept), table.embed(instance),
                ]))
        else:
            units.append(np.concatenate([emb_template, nil, nil]))
    return SessionFeatures(units=units, dim=3 * d)


def template_only(features: SessionFeatures) -> SessionFeatures:
    """Zero the concept and instance slots, keeping only template content."""
    d = features.dim // 3
    units: list[np.ndarray | None] = []
    for unit in features.units:
        if unit is None:
            units.append(None)
        else:
            reduced = unit.copy()
            reduced[d:] = 0.0
            units.append(reduced)
    return SessionFeatures(units=units, dim=features.dim)


# ---------------------------------------------------------------------------
# Session classifier
# ---------------------------------------------------------------------------

@dataclass
class ClassifierConfig:
    input_dim: int
    classes: int
    hidden: int = 64
    arch: str = "lstm"  # "lstm" or "meanpool"

    def __post_init__(self) -> None:
        if self.classes < 2:
            raise DownstreamError("need at least 2 classes")
        if self.arch not in ("lstm", "meanpool"):
            raise DownstreamError("unknown architecture %r" % self.arch)


class SessionClassifier:
    """Unidirectional LSTM (or mean-pool baseline) over feature units."""

    def __init__(self, config: ClassifierConfig, seed: int = 42):
        self.config = config
        rng = np.random.default_rng(seed)
        dim = config.input_dim
        self.sep = nc.Parameter("cls.sep", nc.uniform_init(rng, (dim,), dim, dim))
        if config.arch == "lstm":
            self.rnn = nc.LSTMDirection("cls.lstm", dim, config.hidden, rng)
            self.pool = None
        else:
            self.rnn = None
            self.pool = nc.Dense("cls.pool", dim, config.hidden, "relu", rng)
        self.out = nc.Dense("cls.out", config.hidden, config.classes, "none", rng)

    def params(self) -> list[nc.Parameter]:
        layers = [self.sep]
        if self.rnn is not None:
            layers.extend(self.rnn.params())
        else:
            layers.extend(self.pool.params())
        layers.extend(self.out.params())
        return layers

    def _assemble(self, features: SessionFeatures):
        if not features.units:
            raise DownstreamError("empty feature sequence")
        if features.dim != self.config.input_dim:
            raise DownstreamError(
                "feature width %d does not match classifier input %d"
                % (features.dim, self.config.input_dim)
            )
        x = np.empty((len(features.units), features.dim))
        sep_rows = []
        for k, unit in enumerate(features.units):
            if unit is None:
                x[k] = self.sep.values
                sep_rows.append(k)
            else:
                x[k] = unit
        return x, sep_rows

    def _forward(self, features: SessionFeatures):
        x, sep_rows = self._assemble(features)
        if self.rnn is not None:
            h_seq, rnn_cache = self.rnn.forward(x)
            pooled = h_seq[-1]
            mid_cache = (h_seq, rnn_cache)
        else:
            pooled_in = x.mean(axis=0)
            pooled, mid_cache = self.pool.forward(pooled_in)
        logits, out_cache = self.out.forward(pooled)
        return logits, (x, sep_rows, mid_cache, out_cache)

    def _backward(self, dlogits: np.ndarray, cache) -> None:
        x, sep_rows, mid_cache, out_cache = cache
        dpooled = self.out.backward(dlogits, out_cache)
        if self.rnn is not None:
            h_seq, rnn_cache = mid_cache
            dh_seq = np.zeros_like(h_seq)
            dh_seq[-1] = dpooled
            dx = self.rnn.backward(dh_seq, rnn_cache)
        else:
            dmean = self.pool.backward(dpooled, mid_cache)
            dx = np.tile(dmean / x.shape[0], (x.shape[0], 1))
        for k in sep_rows:
            self.sep.gradient += dx[k]

    def loss(self, features: SessionFeatures, label: int,
             compute_grads: bool = False) -> float:
        logits, cache = self._forward(features)
        value, dlogits = nc.softmax_cross_entropy(logits, label)
        if compute_grads:
            self._backward(dlogits, cache)
        return value

    def predict_proba(self, features: SessionFeatures) -> np.ndarray:
        logits, _ = self._forward(features)
        return nc.softmax(logits)


def train_session_classifier(
        features: Sequence[SessionFeatures], labels: Sequence[int],
        classes: int, cfg: nc.TrainConfig,
        hidden: int = 64, arch: str = "lstm",
        balance: bool = False) -> tuple[SessionClassifier, list[float]]:
    """Train on labeled sessions; returns the classifier and loss history.

    With `balance`, minority-class sessions are repeated so each class
    contributes equally many examples per epoch (rare-anomaly regimes).
    """
    if len(features) == 0:
        raise DownstreamError("no training sessions")
    if len(features) != len(labels):
        raise DownstreamError("features and labels differ in length")
    for label in labels:
        if not 0 <= label < classes:
            raise DownstreamError(
                "class index %d out of range for %d classes" % (label, classes)
            )
    config = ClassifierConfig(input_dim=features[0].dim, classes=classes,
                              hidden=hidden, arch=arch)
    model = SessionClassifier(config, seed=cfg.seed)
    params = model.params()

    indices = list(range(len(features)))
    if balance:
        by_class: dict[int, list[int]] = {}
        for k, label in enumerate(labels):
            by_class.setdefault(label, []).append(k)
        target = max(len(v) for v in by_class.values())
        for members in by_class.values():
            need = target - len(members)
            indices.extend(members[i % len(members)] for i in range(need))

    rng = np.random.default_rng(cfg.seed)
    order = np.asarray(indices)
    history: list[float] = []
    for epoch in range(cfg.epochs):
        rng.shuffle(order)
        total = 0.0
        for k in order:
            value = model.loss(features[k], labels[k], compute_grads=True)
            if not np.isfinite(value):
                raise DownstreamError("non-finite loss at session index %d" % k)
            total += value
            nc.sgd_step(params, epoch, cfg)
        history.append(total / len(order))
    return model, history


def predict_topk(model: SessionClassifier, features: SessionFeatures,
                 k: int) -> list[int]:
    """The k most probable classes, ties broken by ascending index."""
    if not 1 <= k <= model.config.classes:
        raise DownstreamError("k must be between 1 and the class count")
    probs = model.predict_proba(features)
    ranked = np.argsort(-probs, kind="stable")
    return [int(c) for c in ranked[:k]]


def save_classifier(path: str, model: SessionClassifier,
                    history: Sequence[float] = (),
                    train_cfg: nc.TrainConfig | None = None) -> None:
    header = {
        "kind": "session-classifier",
        "config": asdict(model.config),
        "loss_history": [float(x) for x in history],
    }
    if train_cfg is not None:
        header["train"] = asdict(train_cfg)
    nc.save_checkpoint(path, header, model.params())


def load_classifier(path: str) -> tuple[SessionClassifier, dict]:
    header, tensors = nc.load_checkpoint(path)
    if header.get("kind") != "session-classifier":
        raise DownstreamError("checkpoint at %s is not a classifier" % path)
    model = SessionClassifier(ClassifierConfig(**header["config"]), seed=0)
    nc.assign_params(model.params(), tensors)
    return model, header


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

@dataclass
class PRF:
    precision: float
    recall: float
    f1: float
    correct: int = 0
    predicted: int = 0
    gold: int = 0

    def __iter__(self):
        return iter((self.precision, self.recall, self.f1))


def _prf(correct: int, predicted: int, gold: int) -> PRF:
    if predicted == 0 and gold == 0:
        log.info("no predicted and no gold items; reporting perfect scores")
        return PRF(1.0, 1.0, 1.0, 0, 0, 0)
    precision = correct / predicted if predicted else 0.0
    recall = correct / gold if gold else 0.0
    f1 = (2 * precision * recall / (precision + recall)
          if precision + recall else 0.0)
    return PRF(precision, recall, f1, correct, predicted, gold)


def eval_ci_pairs(predicted: Sequence[set], gold: Sequence[set]) -> PRF:
    """Micro-averaged P/R/F1 over per-message pair sets.

    Pairs are (concept position, instance position) tuples; a predicted
    pair is correct only on an exact positional match.
    """
    if len(predicted) != len(gold):
        raise DownstreamError(
            "predicted and gold lists differ in length: %d vs %d"
            % (len(predicted), len(gold))
        )
    correct = sum(len(set(p) & set(g)) for p, g in zip(predicted, gold))
    return _prf(correct, sum(len(p) for p in predicted),
                sum(len(g) for g in gold))


def eval_binary(predictions: Sequence[int], labels: Sequence[int]) -> PRF:
    """Binary P/R/F1 with class 1 (anomalous) as the positive class."""
    if len(predictions) != len(labels):
        raise DownstreamError(
            "predictions and labels differ in length: %d vs %d"
            % (len(predictions), len(labels))
        )
    tp = sum(1 for p, y in zip(predictions, labels) if p == 1 and y == 1)
    fp = sum(1 for p, y in zip(predictions, labels) if p == 1 and y == 0)
    fn = sum(1 for p, y in zip(predictions, labels) if p == 0 and y == 1)
    return _prf(tp, tp + fp, tp + fn)


def recall_at_k(model: SessionClassifier,
                features: Sequence[SessionFeatures],
                labels: Sequence[int], ks: Sequence[int]) -> dict[int, float]:
    """Fraction of sessions whose true class is in the top-k prediction."""
    if len(features) != len(labels):
        raise DownstreamError("features and labels differ in length")
    if not features:
        raise DownstreamError("no sessions to evaluate")
    hits = {k: 0 for k in ks}
    for sf, label in zip(features, labels):
        ranked = predict_topk(model, sf, max(ks))
        for k in ks:
            if label in ranked[:k]:
                hits[k] += 1
    return {k: hits[k] / len(features) for k in ks}


def split_sessions(items: Sequence, ratio: float = 0.5,
                   seed: int = 42) -> tuple[list, list]:
    """Seeded shuffle, then a ratio split into (train, test)."""
    if not 0.0 < ratio < 1.0:
        raise DownstreamError("split ratio must be in (0, 1)")
    order = np.arange(len(items))
    np.random.default_rng(seed).shuffle(order)
    cut = int(round(len(items) * ratio))
    train = [items[i] for i in order[:cut]]
    test = [items[i] for i in order[cut:]]
    return train, test
