"""The semantic miner: a contextual encoder over word, character, and
morphological features, a pair matcher that scores each token against a
dummy ⟨TMP⟩ slot plus every preceding token, and a 3-way word scorer.

Both heads train jointly with summed cross-entropy.  Ablation switches
zero the character, local, or interval-context features or swap the
recurrent encoder for a linear input projection, without changing the
input layout.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np

from . import features as feat
from . import logio
from . import neuralcore as nc

log = logging.getLogger(__name__)

# Category order used by the word scorer logits.
CATEGORY_ORDER = (logio.CONCEPT, logio.INSTANCE, logio.NONE)
_CATEGORY_INDEX = {c: k for k, c in enumerate(CATEGORY_ORDER)}


class MinerError(ValueError):
    """Raised for invalid miner inputs or corrupted checkpoints."""


@dataclass
class MinerConfig:
    """Model dimensions and ablation switches.

    The encoder input width is d_word + char_filters + local_dim in every
    configuration; disabled feature blocks are zero-filled so ablated
    models keep the same shapes.
    """

    d_word: int = 100
    d_char: int = 30
    char_filters: int = 30
    char_window: int = 3
    hidden: int = 128
    layers: int = 2
    local_dim: int = feat.LOCAL_DIM
    max_chars: int = feat.MAX_CHARS
    pair_hidden: int = 128
    use_char: bool = True
    use_local: bool = True
    use_lstm: bool = True
    use_interval: bool = True

    @property
    def in_dim(self) -> int:
        return self.d_word + self.char_filters + self.local_dim

    @property
    def ctx_dim(self) -> int:
        return 2 * self.hidden

    @property
    def pair_in(self) -> int:
        return 2 * self.ctx_dim + self.d_word


@dataclass
class EncodedMessage:
    """Per-token contextual vectors plus what the pair matcher needs."""

    contextual: np.ndarray
    tmp_vector: np.ndarray
    word_embs: np.ndarray


@dataclass
class MinerOutput:
    tokens: tuple[str, ...]
    categories: tuple[str, ...]
    pair_targets: tuple[int, ...]
    explicit_pairs: tuple[tuple[int, int], ...]
    category_scores: np.ndarray
    pair_scores: tuple[np.ndarray, ...]


def interval_context(word_embs: Sequence[np.ndarray], i: int, j: int) -> np.ndarray:
    """Mean word embedding of the tokens strictly between a candidate pair.

    Indices are in pair-target space: slot 0 is ⟨TMP⟩ and slot k ≥ 1 is
    token k−1.  Empty intervals and the ⟨TMP⟩ slot give a zero vector.
    """
    if j >= i:
        raise MinerError("candidate %d does not precede token slot %d" % (j, i))
    word_embs = np.asarray(word_embs, dtype=np.float64)
    d = word_embs.shape[1]
    if j == 0:
        return np.zeros(d)
    segment = word_embs[j:i - 1]
    if segment.shape[0] == 0:
        return np.zeros(d)
    return segment.mean(axis=0)


class MinerModel:
    """Holds all trainable components; one instance per training run."""

    def __init__(self, config: MinerConfig, alphabet: dict[str, int],
                 seed: int = 42):
        if feat.UNKC not in alphabet:
            raise MinerError("alphabet is missing the %s entry" % feat.UNKC)
        self.config = config
        self.alphabet = dict(alphabet)
        rng = np.random.default_rng(seed)
        cfg = config
        self.char_conv = None
        if cfg.use_char:
            self.char_conv = nc.CharConv(
                "char", len(self.alphabet), cfg.d_char, cfg.char_filters,
                cfg.char_window, rng,
            )
        if cfg.use_lstm:
            self.encoder = nc.BiLSTM("enc", cfg.in_dim, cfg.hidden, cfg.layers, rng)
        else:
            self.encoder = nc.Dense("proj", cfg.in_dim, cfg.ctx_dim, "none", rng)
        self.tmp = nc.Parameter(
            "tmp", nc.uniform_init(rng, (cfg.ctx_dim,), cfg.ctx_dim, cfg.ctx_dim)
        )
        self.pair_hidden = nc.Dense("ffnn_a.hidden", cfg.pair_in,
                                    cfg.pair_hidden, "relu", rng)
        self.pair_out = nc.Dense("ffnn_a.out", cfg.pair_hidden, 1, "none", rng)
        self.word_scorer = nc.Dense("ffnn_b", cfg.ctx_dim, 3, "none", rng)
        self._char_cache: dict[str, list[int]] = {}
        self._local_cache: dict[str, np.ndarray] = {}

    def params(self) -> list[nc.Parameter]:
        out: list[nc.Parameter] = []
        if self.char_conv is not None:
            out.extend(self.char_conv.params())
        out.extend(self.encoder.params())
        out.append(self.tmp)
        out.extend(self.pair_hidden.params())
        out.extend(self.pair_out.params())
        out.extend(self.word_scorer.params())
        return out

    # -- feature assembly ---------------------------------------------------

    def _char_ids(self, token: str) -> list[int]:
        ids = self._char_cache.get(token)
        if ids is None:
            ids = feat.char_indices(token, self.alphabet, self.config.max_chars)
            self._char_cache[token] = ids
        return ids

    def _local(self, token: str) -> np.ndarray:
        vec = self._local_cache.get(token)
        if vec is None:
            vec = feat.local_features(token)
            self._local_cache[token] = vec
        return vec

    def _inputs(self, tokens: Sequence[str], table: feat.EmbeddingTable):
        cfg = self.config
        if table.d_word != cfg.d_word:
            raise MinerError(
                "embedding table width %d does not match model d_word %d"
                % (table.d_word, cfg.d_word)
            )
        n = len(tokens)
        x = np.zeros((n, cfg.in_dim))
        word_embs = np.empty((n, cfg.d_word))
        char_caches: list = [None] * n
        c0 = cfg.d_word
        c1 = c0 + cfg.char_filters
        for k, token in enumerate(tokens):
            word_embs[k] = table.embed(token)
            x[k, :c0] = word_embs[k]
            if cfg.use_char:
                out, cache = self.char_conv.forward(self._char_ids(token))
                x[k, c0:c1] = out
                char_caches[k] = cache
            if cfg.use_local:
                x[k, c1:] = self._local(token)
        return x, char_caches, word_embs

    # -- forward / backward -------------------------------------------------

    def _forward(self, tokens: Sequence[str], table: feat.EmbeddingTable):
        if not tokens:
            raise MinerError("empty message")
        cfg = self.config
        x, char_caches, word_embs = self._inputs(tokens, table)
        contextual, enc_cache = self.encoder.forward(x)
        cat_logits, cat_cache = self.word_scorer.forward(contextual)
        n = len(tokens)
        h = cfg.ctx_dim
        prefix = np.vstack([np.zeros(cfg.d_word), np.cumsum(word_embs, axis=0)])
        pair_logits: list[np.ndarray] = []
        pair_caches: list = []
        for i in range(n):
            cand = np.zeros((i + 1, cfg.pair_in))
            cand[:, :h] = contextual[i]
            cand[0, h:2 * h] = self.tmp.values
            if i > 0:
                cand[1:, h:2 * h] = contextual[:i]
            if cfg.use_interval and i >= 2:
                slots = np.arange(1, i)
                spans = (i - slots).astype(np.float64)
                cand[slots, 2 * h:] = (prefix[i] - prefix[slots]) / spans[:, None]
            hid, hc = self.pair_hidden.forward(cand)
            sc, oc = self.pair_out.forward(hid)
            pair_logits.append(sc[:, 0])
            pair_caches.append((hc, oc))
        enc = EncodedMessage(contextual=contextual, tmp_vector=self.tmp.values,
                             word_embs=word_embs)
        state = (x, char_caches, enc_cache, cat_cache, pair_caches)
        return enc, cat_logits, pair_logits, state

    def _backward(self, dcat: np.ndarray, dpair: list[np.ndarray], state) -> None:
        cfg = self.config
        x, char_caches, enc_cache, cat_cache, pair_caches = state
        n = dcat.shape[0]
        h = cfg.ctx_dim
        dctx = np.zeros((n, h))
        for i in range(n - 1, -1, -1):
            hc, oc = pair_caches[i]
            dhid = self.pair_out.backward(dpair[i][:, None], oc)
            dcand = self.pair_hidden.backward(dhid, hc)
            dctx[i] += dcand[:, :h].sum(axis=0)
            self.tmp.gradient += dcand[0, h:2 * h]
            if i > 0:
                dctx[:i] += dcand[1:, h:2 * h]
            # interval-context gradients stop here: word embeddings are frozen
        dctx += self.word_scorer.backward(dcat, cat_cache)
        dx = self.encoder.backward(dctx, enc_cache)
        if cfg.use_char:
            c0, c1 = cfg.d_word, cfg.d_word + cfg.char_filters
            for k in range(n):
                self.char_conv.backward(dx[k, c0:c1], char_caches[k])

    @staticmethod
    def _branch_signature(state) -> bytes:
        """Record which branch every non-smooth unit took.

        Finite differences are only meaningful while the network stays on
        one smooth branch, so a gradient checker compares this signature
        between perturbed evaluations and rejects steps that flip a relu
        unit or a pooling argmax.
        """
        _, char_caches, _, _, pair_caches = state
        parts: list[bytes] = []
        for cache in char_caches:
            if cache is not None:
                parts.append(cache[3].tobytes())
        for hidden_cache, _ in pair_caches:
            parts.append((hidden_cache[1] > 0.0).tobytes())
        return b"".join(parts)

    def message_loss(self, gold: logio.AnnotatedMessage,
                     table: feat.EmbeddingTable,
                     compute_grads: bool = False,
                     with_signature: bool = False):
        tokens = gold.tokens
        _, cat_logits, pair_logits, state = self._forward(tokens, table)
        cat_targets = [_CATEGORY_INDEX[c] for c in gold.categories]
        pair_targets = gold_pair_targets(gold)
        loss = 0.0
        n = len(tokens)
        dcat = np.zeros((n, 3))
        dpair: list[np.ndarray] = []
        for i in range(n):
            li, gi = nc.softmax_cross_entropy(cat_logits[i], cat_targets[i])
            loss += li
            dcat[i] = gi
            lp, gp = nc.softmax_cross_entropy(pair_logits[i], pair_targets[i])
            loss += lp
            dpair.append(gp)
        if compute_grads:
            self._backward(dcat, dpair, state)
        if with_signature:
            return loss, self._branch_signature(state)
        return loss

    # -- public inference ---------------------------------------------------

    def encode(self, tokens: Sequence[str],
               table: feat.EmbeddingTable) -> EncodedMessage:
        enc, _, _, _ = self._forward(tokens, table)
        return enc

    def infer(self, tokens: Sequence[str],
              table: feat.EmbeddingTable) -> MinerOutput:
        _, cat_logits, pair_logits, _ = self._forward(tokens, table)
        n = len(tokens)
        categories = tuple(
            CATEGORY_ORDER[int(np.argmax(cat_logits[i]))] for i in range(n)
        )
        targets = tuple(int(np.argmax(pair_logits[i])) for i in range(n))
        pairs = tuple(
            (t - 1, i) for i, t in enumerate(targets) if t > 0
        )
        cat_scores = np.vstack([nc.softmax(cat_logits[i]) for i in range(n)])
        pair_scores = tuple(nc.softmax(row) for row in pair_logits)
        return MinerOutput(
            tokens=tuple(tokens),
            categories=categories,
            pair_targets=targets,
            explicit_pairs=pairs,
            category_scores=cat_scores,
            pair_scores=pair_scores,
        )


def gold_pair_targets(gold: logio.AnnotatedMessage) -> list[int]:
    """Pair-matcher targets: 0 selects ⟨TMP⟩, k ≥ 1 selects token k−1.

    The later member of each gold pair points at the earlier one.  When
    several pairs share a later member the nearest earlier member wins.
    """
    targets = [0] * len(gold.tokens)
    seen_later: set[int] = set()
    for c, i in gold.gold_pairs:
        earlier, later = (c, i) if c < i else (i, c)
        if later in seen_later:
            log.warning(
                "token %d is the later member of several gold pairs; "
                "keeping the nearest earlier member", later,
            )
            targets[later] = max(targets[later], earlier + 1)
        else:
            targets[later] = earlier + 1
            seen_later.add(later)
    return targets


# ---------------------------------------------------------------------------
# Spec-level convenience wrappers
# ---------------------------------------------------------------------------

def encode_context(message: logio.LogMessage, table: feat.EmbeddingTable,
                   model: MinerModel) -> EncodedMessage:
    return model.encode(message.tokens, table)


def score_pairs(model: MinerModel, enc: EncodedMessage, i: int) -> np.ndarray:
    """Unnormalized pair scores for token i over ⟨TMP⟩ plus tokens 0..i−1."""
    if i < 0:
        raise MinerError("token index must be >= 0")
    cfg = model.config
    h = cfg.ctx_dim
    cand = np.zeros((i + 1, cfg.pair_in))
    cand[:, :h] = enc.contextual[i]
    cand[0, h:2 * h] = enc.tmp_vector
    if i > 0:
        cand[1:, h:2 * h] = enc.contextual[:i]
    if cfg.use_interval:
        for slot in range(1, i + 1):
            cand[slot, 2 * h:] = interval_context(enc.word_embs, i + 1, slot)
    hid, _ = model.pair_hidden.forward(cand)
    sc, _ = model.pair_out.forward(hid)
    return sc[:, 0]


def score_words(model: MinerModel, enc: EncodedMessage) -> np.ndarray:
    """Per-token unnormalized scores over (Concept, Instance, None)."""
    logits, _ = model.word_scorer.forward(enc.contextual)
    return logits


def miner_loss(model: MinerModel, enc: EncodedMessage,
               gold: logio.AnnotatedMessage) -> float:
    """Joint loss: pair-target cross-entropy plus category cross-entropy."""
    n = enc.contextual.shape[0]
    if n != len(gold.tokens):
        raise MinerError(
            "encoding has %d tokens but gold has %d" % (n, len(gold.tokens))
        )
    cat_logits = score_words(model, enc)
    cat_targets = [_CATEGORY_INDEX[c] for c in gold.categories]
    pair_targets = gold_pair_targets(gold)
    loss = 0.0
    for i in range(n):
        loss += nc.softmax_cross_entropy(cat_logits[i], cat_targets[i])[0]
        loss += nc.softmax_cross_entropy(
            score_pairs(model, enc, i), pair_targets[i]
        )[0]
    return loss


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def build_model(corpus: Iterable[logio.AnnotatedMessage],
                config: MinerConfig, seed: int = 42) -> MinerModel:
    """Create a fresh model whose character alphabet covers the corpus."""
    tokens = (t for ann in corpus for t in ann.tokens)
    alphabet = feat.build_alphabet(tokens)
    return MinerModel(config, alphabet, seed=seed)


def train_miner(corpus: Sequence[logio.AnnotatedMessage],
                table: feat.EmbeddingTable, cfg: nc.TrainConfig,
                model: MinerModel | None = None,
                config: MinerConfig | None = None) -> tuple[MinerModel, list[float]]:
    """Train (or fine-tune, when `model` is given) on annotated messages.

    Returns the model and the per-epoch mean message loss history.
    """
    corpus = list(corpus)
    if not corpus:
        raise MinerError("empty corpus")
    if model is None:
        model = build_model(corpus, config or MinerConfig(), seed=cfg.seed)
    params = model.params()
    rng = np.random.default_rng(cfg.seed)
    order = np.arange(len(corpus))
    history: list[float] = []
    for epoch in range(cfg.epochs):
        rng.shuffle(order)
        total = 0.0
        for k in order:
            loss = model.message_loss(corpus[k], table, compute_grads=True)
            if not np.isfinite(loss):
                raise MinerError("non-finite loss at message index %d" % k)
            total += loss
            nc.sgd_step(params, epoch, cfg)
        history.append(total / len(corpus))
    return model, history


def infer_message(message: logio.LogMessage, model: MinerModel,
                  table: feat.EmbeddingTable) -> MinerOutput:
    return model.infer(message.tokens, table)


def oriented_pairs(output: MinerOutput) -> set[tuple[int, int]]:
    """Predicted (concept_idx, instance_idx) pairs, oriented by category.

    Pairs whose members are not one concept and one instance are kept in
    positional order; they can never match a gold pair.
    """
    out: set[tuple[int, int]] = set()
    for a, b in output.explicit_pairs:
        ca, cb = output.categories[a], output.categories[b]
        if ca == logio.CONCEPT and cb == logio.INSTANCE:
            out.add((a, b))
        elif ca == logio.INSTANCE and cb == logio.CONCEPT:
            out.add((b, a))
        else:
            out.add((a, b))
    return out


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def save_miner(path: str, model: MinerModel, history: Sequence[float] = (),
               train_cfg: nc.TrainConfig | None = None) -> None:
    header = {
        "kind": "miner",
        "config": asdict(model.config),
        "alphabet": model.alphabet,
        "loss_history": [float(x) for x in history],
        "final_loss": float(history[-1]) if history else None,
    }
    if train_cfg is not None:
        header["train"] = asdict(train_cfg)
    nc.save_checkpoint(path, header, model.params())


def load_miner(path: str) -> tuple[MinerModel, dict]:
    header, tensors = nc.load_checkpoint(path)
    if header.get("kind") != "miner":
        raise MinerError("checkpoint at %s is not a miner checkpoint" % path)
    config = MinerConfig(**header["config"])
    model = MinerModel(config, header["alphabet"], seed=0)
    nc.assign_params(model.params(), tensors)
    return model, header


def output_record(output: MinerOutput) -> dict:
    return {
        "tokens": list(output.tokens),
        "categories": list(output.categories),
        "explicit_pairs": [[a, b] for a, b in output.explicit_pairs],
    }


def write_miner_outputs(path: str, outputs: Iterable[MinerOutput]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for output in outputs:
            fh.write(json.dumps(output_record(output)) + "\n")
