"""Per-word input features: trained word embeddings, character indices,
and a fixed 13-entry morphological feature vector.

The skip-gram trainer is a small seeded implementation with negative
sampling so embedding tables are bit-reproducible run to run.  Tables
persist to a plain text format and load back bit-exactly.
"""

from __future__ import annotations

import string
from dataclasses import dataclass

import numpy as np

UNK_TOKEN = "<UNK>"
NIL_TOKEN = "<NIL>"
UNKC = "<UNKC>"

LOCAL_DIM = 13
MAX_CHARS = 24

_HEX_CHARS = frozenset("0123456789abcdefABCDEF")
_PRINTABLE_ASCII = frozenset(c for c in string.printable if 32 <= ord(c) < 127)


class FeatureError(ValueError):
    """Raised for invalid feature inputs or malformed embedding files."""


# ---------------------------------------------------------------------------
# Local morphological features
# ---------------------------------------------------------------------------

def local_features(token: str) -> np.ndarray:
    """13 fixed-order shape features for one token.

    Order: all-alphabetic, all-digit, mixed-alphanumeric, contains-digit,
    contains-underscore, contains-hyphen, contains-dot, contains-slash,
    contains-colon, hex-like, initial-capital, all-caps, min(len,20)/20.
    """
    if not token:
        raise FeatureError("empty token has no local features")
    has_alpha = any(c.isalpha() for c in token)
    has_digit = any(c.isdigit() for c in token)
    vec = np.zeros(LOCAL_DIM, dtype=np.float64)
    vec[0] = 1.0 if all(c.isalpha() for c in token) else 0.0
    vec[1] = 1.0 if all(c.isdigit() for c in token) else 0.0
    vec[2] = 1.0 if (has_alpha and has_digit) else 0.0
    vec[3] = 1.0 if has_digit else 0.0
    vec[4] = 1.0 if "_" in token else 0.0
    vec[5] = 1.0 if "-" in token else 0.0
    vec[6] = 1.0 if "." in token else 0.0
    vec[7] = 1.0 if "/" in token else 0.0
    vec[8] = 1.0 if ":" in token else 0.0
    hex_like = (
        len(token) >= 4
        and has_digit
        and all(c in _HEX_CHARS for c in token)
    )
    vec[9] = 1.0 if hex_like else 0.0
    vec[10] = 1.0 if token[0].isupper() else 0.0
    vec[11] = 1.0 if (has_alpha and token.upper() == token) else 0.0
    vec[12] = min(len(token), 20) / 20.0
    return vec


# ---------------------------------------------------------------------------
# Character alphabet
# ---------------------------------------------------------------------------

def build_alphabet(tokens) -> dict[str, int]:
    """Map observed printable-ASCII characters to indices; UNKC is index 0."""
    observed = set()
    for token in tokens:
        for ch in token:
            if ch in _PRINTABLE_ASCII:
                observed.add(ch)
    alphabet = {UNKC: 0}
    for i, ch in enumerate(sorted(observed), start=1):
        alphabet[ch] = i
    return alphabet


def char_indices(token: str, alphabet: dict[str, int],
                 max_chars: int = MAX_CHARS) -> list[int]:
    """Encode a token as alphabet indices, truncated to max_chars."""
    if UNKC not in alphabet:
        raise FeatureError("alphabet is missing the %s entry" % UNKC)
    unkc = alphabet[UNKC]
    return [alphabet.get(ch, unkc) for ch in token[:max_chars]]


# ---------------------------------------------------------------------------
# Embedding table
# ---------------------------------------------------------------------------

@dataclass
class EmbeddingTable:
    """Token embeddings with reserved ⟨UNK⟩ (OOV) and ⟨NIL⟩ (zero) rows."""

    vocab: dict[str, int]
    vectors: np.ndarray

    def __post_init__(self) -> None:
        rows, _ = self.vectors.shape
        if rows != len(self.vocab) + 2:
            raise FeatureError(
                "vector count %d does not match vocab size %d + 2"
                % (rows, len(self.vocab))
            )
        if not np.all(np.isfinite(self.vectors)):
            raise FeatureError("embedding table contains non-finite values")

    @property
    def d_word(self) -> int:
        return self.vectors.shape[1]

    @property
    def unk_index(self) -> int:
        return len(self.vocab)

    @property
    def nil_index(self) -> int:
        return len(self.vocab) + 1

    def row_index(self, token: str) -> int:
        if token == NIL_TOKEN:
            return self.nil_index
        if token == UNK_TOKEN:
            return self.unk_index
        return self.vocab.get(token, self.unk_index)

    def embed(self, token: str) -> np.ndarray:
        return self.vectors[self.row_index(token)]


def embed_word(table: EmbeddingTable, token: str) -> np.ndarray:
    return table.embed(token)


def _build_vocab(corpus, min_count: int) -> dict[str, int]:
    counts: dict[str, int] = {}
    for sentence in corpus:
        for token in sentence:
            counts[token] = counts.get(token, 0) + 1
    kept = [t for t, c in counts.items() if c >= min_count]
    for reserved in (UNK_TOKEN, NIL_TOKEN):
        if reserved in kept:
            raise FeatureError("corpus contains reserved token %s" % reserved)
    kept.sort(key=lambda t: (-counts[t], t))
    return {t: i for i, t in enumerate(kept)}


def train_skipgram(corpus, d: int = 100, epochs: int = 10, window: int = 5,
                   negatives: int = 5, min_count: int = 1, lr: float = 0.025,
                   seed: int = 42) -> EmbeddingTable:
    """Train skip-gram embeddings with negative sampling.

    Single-threaded and fully seeded.  The returned table holds the input
    vectors plus an ⟨UNK⟩ row (mean of trained rows) and a zero ⟨NIL⟩ row.
    """
    corpus = [list(s) for s in corpus]
    if not corpus or all(len(s) == 0 for s in corpus):
        raise FeatureError("empty corpus")
    if d < 1:
        raise FeatureError("embedding dimension must be >= 1")
    vocab = _build_vocab(corpus, min_count)
    if not vocab:
        raise FeatureError("no token meets min_count=%d" % min_count)
    v = len(vocab)

    rng = np.random.default_rng(seed)
    w_in = (rng.random((v, d)) - 0.5) / d
    w_out = np.zeros((v, d), dtype=np.float64)

    counts = np.zeros(v, dtype=np.float64)
    encoded: list[np.ndarray] = []
    for sentence in corpus:
        ids = [vocab[t] for t in sentence if t in vocab]
        if ids:
            encoded.append(np.asarray(ids, dtype=np.int64))
            for i in ids:
                counts[i] += 1.0

    # Unigram^0.75 noise distribution, sampled via inverse CDF.
    noise = counts ** 0.75
    noise_cdf = np.cumsum(noise / noise.sum())

    total = sum(len(ids) for ids in encoded) * max(epochs, 0)
    done = 0
    for _ in range(epochs):
        for ids in encoded:
            n = len(ids)
            for pos in range(n):
                step_lr = lr * max(1.0 - done / max(total, 1), 1e-4)
                done += 1
                center = ids[pos]
                lo = max(0, pos - window)
                hi = min(n, pos + window + 1)
                for ctx_pos in range(lo, hi):
                    if ctx_pos == pos:
                        continue
                    _sgns_update(
                        w_in, w_out, center, ids[ctx_pos],
                        negatives, noise_cdf, rng, step_lr,
                    )

    vectors = np.empty((v + 2, d), dtype=np.float64)
    vectors[:v] = w_in
    vectors[v] = w_in.mean(axis=0)
    vectors[v + 1] = 0.0
    return EmbeddingTable(vocab=vocab, vectors=vectors)


def _sgns_update(w_in, w_out, center, context, negatives, noise_cdf, rng, lr):
    targets = np.empty(negatives + 1, dtype=np.int64)
    targets[0] = context
    targets[1:] = np.searchsorted(noise_cdf, rng.random(negatives))
    labels = np.zeros(negatives + 1)
    labels[0] = 1.0
    vec = w_in[center]
    z = w_out[targets] @ vec
    g = (_sigmoid(z) - labels) * lr
    grad_in = g @ w_out[targets]
    # np.add.at handles a negative sample drawn more than once.
    np.add.at(w_out, targets, -np.outer(g, vec))
    w_in[center] -= grad_in


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# ---------------------------------------------------------------------------
# Persistence: "d=<dim> n=<rows>" header, one "token v1 .. vd" line per row.
# The last two rows are always ⟨UNK⟩ then ⟨NIL⟩.
# ---------------------------------------------------------------------------

def save_embeddings(path: str, table: EmbeddingTable) -> None:
    rows, d = table.vectors.shape
    order = sorted(table.vocab, key=table.vocab.get)
    names = order + [UNK_TOKEN, NIL_TOKEN]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("d=%d n=%d\n" % (d, rows))
        for name, row in zip(names, table.vectors):
            fh.write(name + " " + " ".join(repr(float(x)) for x in row) + "\n")


def load_embeddings(path: str) -> EmbeddingTable:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        parts = header.split()
        if (len(parts) != 2 or not parts[0].startswith("d=")
                or not parts[1].startswith("n=")):
            raise FeatureError("malformed embedding header: %r" % header)
        d = int(parts[0][2:])
        rows = int(parts[1][2:])
        names: list[str] = []
        vectors = np.empty((rows, d), dtype=np.float64)
        for i in range(rows):
            line = fh.readline()
            if not line:
                raise FeatureError("expected %d rows, found %d" % (rows, i))
            fields = line.rstrip("\n").split(" ")
            if len(fields) != d + 1:
                raise FeatureError("row %d has %d values, expected %d"
                                   % (i + 1, len(fields) - 1, d))
            names.append(fields[0])
            vectors[i] = [float(x) for x in fields[1:]]
        if fh.readline():
            raise FeatureError("trailing content after %d rows" % rows)
    if rows < 2 or names[-2] != UNK_TOKEN or names[-1] != NIL_TOKEN:
        raise FeatureError("embedding file is missing the reserved rows")
    vocab = {name: i for i, name in enumerate(names[:-2])}
    if len(vocab) != rows - 2:
        raise FeatureError("duplicate token in embedding file")
    return EmbeddingTable(vocab=vocab, vectors=vectors)
