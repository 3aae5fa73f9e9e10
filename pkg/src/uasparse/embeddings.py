"""Subword CBOW word embeddings for UA tokens (fastText-style).

A word's vector is the mean of its whole-word row (when in the vocabulary)
and the rows of its hashed character n-grams. Out-of-vocabulary words
fall back to the n-gram rows alone, so every non-empty word has a vector.
"""

from __future__ import annotations

import logging
import struct
from collections import Counter
from dataclasses import asdict, dataclass

import numba
import numpy as np

from .preprocess import MAX_TOKENS, TokenizedUas

log = logging.getLogger(__name__)

MAGIC = b"UASEMB1"
FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1
_CONFIG_STRUCT = struct.Struct("<IIIIIdIIIq")


class EmptyCorpus(ValueError):
    pass


class EmbeddingFormatError(ValueError):
    pass


@dataclass(frozen=True)
class EmbeddingConfig:
    dim: int = 40
    ngram_min: int = 3
    ngram_max: int = 6
    window: int = 5
    epochs: int = 5
    learning_rate: float = 0.05
    negative_samples: int = 5
    bucket_count: int = 2**20
    min_word_count: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if self.ngram_min < 1 or self.ngram_min > self.ngram_max:
            raise ValueError("need 1 <= ngram_min <= ngram_max")
        if self.window < 1:
            raise ValueError("window must be >= 1")
        for name in ("epochs", "negative_samples", "bucket_count", "min_word_count"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


def fnv1a_64(text):
    h = FNV_OFFSET
    for byte in text.encode("utf-8"):
        h = ((h ^ byte) * FNV_PRIME) & _MASK64
    return h


def char_ngrams(word, ngram_min, ngram_max):
    """All n-grams of ``<word>`` with lengths in [ngram_min, ngram_max]."""
    marked = f"<{word}>"
    grams = []
    for n in range(ngram_min, ngram_max + 1):
        for start in range(len(marked) - n + 1):
            grams.append(marked[start:start + n])
    return grams


def ngram_buckets(word, config):
    return [fnv1a_64(g) % config.bucket_count
            for g in char_ngrams(word, config.ngram_min, config.ngram_max)]


@dataclass
class UasMatrix:
    values: np.ndarray
    mask: np.ndarray


class EmbeddingModel:
    def __init__(self, vocab, word_vectors, ngram_vectors, config):
        self.vocab = dict(vocab)
        self.word_vectors = np.ascontiguousarray(word_vectors, dtype=np.float32)
        self.ngram_vectors = np.ascontiguousarray(ngram_vectors, dtype=np.float32)
        self.config = config
        self._cache = {}
        if self.word_vectors.shape != (len(self.vocab), config.dim):
            raise EmbeddingFormatError("word vector matrix does not match vocabulary")
        if self.ngram_vectors.shape != (config.bucket_count, config.dim):
            raise EmbeddingFormatError("n-gram matrix does not match bucket_count")

    @property
    def dim(self):
        return self.config.dim

    def __eq__(self, other):
        return (
            isinstance(other, EmbeddingModel)
            and self.config == other.config
            and self.vocab == other.vocab
            and np.array_equal(self.word_vectors, other.word_vectors)
            and np.array_equal(self.ngram_vectors, other.ngram_vectors)
        )

    def embed_word(self, word):
        if not word:
            raise ValueError("cannot embed an empty word")
        cached = self._cache.get(word)
        if cached is not None:
            return cached
        rows = self.ngram_vectors[ngram_buckets(word, self.config)]
        total = rows.sum(axis=0)
        count = len(rows)
        idx = self.vocab.get(word)
        if idx is not None:
            total = total + self.word_vectors[idx]
            count += 1
        vec = (total / count).astype(np.float32)
        vec.setflags(write=False)
        self._cache[word] = vec
        return vec

    def embed_uas(self, uas, seq_len=MAX_TOKENS):
        tokens = uas.tokens if isinstance(uas, TokenizedUas) else tuple(uas)
        if len(tokens) > seq_len:
            raise ValueError(f"{len(tokens)} tokens exceed seq_len {seq_len}")
        values = np.zeros((seq_len, self.dim), dtype=np.float32)
        mask = np.zeros(seq_len, dtype=bool)
        for i, token in enumerate(tokens):
            values[i] = self.embed_word(token)
            mask[i] = True
        return UasMatrix(values, mask)

    def embed_batch(self, batch, seq_len=MAX_TOKENS):
        """Stack ``embed_uas`` over a sequence into (B, seq_len, dim) and (B, seq_len)."""
        values = np.zeros((len(batch), seq_len, self.dim), dtype=np.float32)
        mask = np.zeros((len(batch), seq_len), dtype=bool)
        for b, uas in enumerate(batch):
            m = self.embed_uas(uas, seq_len)
            values[b] = m.values
            mask[b] = m.mask
        return values, mask

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(to_bytes(self))

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return from_bytes(fh.read())


def embed_word(model, word):
    return model.embed_word(word)


def embed_uas(model, uas):
    return model.embed_uas(uas)


def cosine(u, v):
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        return 0.0
    return float(np.dot(u, v) / (nu * nv))


@numba.njit(cache=True)
def _cbow_epoch(inputs, outputs, sent_flat, sent_off, order, spans, negatives,
                sub_flat, sub_off, step, total_steps, lr0):
    """One pass of CBOW/negative-sampling SGD. Returns (step, loss_sum, updates)."""
    dim = inputs.shape[1]
    n_neg = negatives.shape[1]
    hidden = np.zeros(dim, dtype=np.float32)
    grad = np.zeros(dim, dtype=np.float32)
    loss_sum = 0.0
    updates = 0
    for si in order:
        lo = sent_off[si]
        hi = sent_off[si + 1]
        for pos in range(lo, hi):
            lr = np.float32(lr0 * max(0.0, 1.0 - step / total_steps))
            step += 1
            span = spans[pos]
            c_lo = max(lo, pos - span)
            c_hi = min(hi, pos + span + 1)
            n_ctx = c_hi - c_lo - 1
            if n_ctx <= 0:
                continue
            hidden[:] = 0
            for c in range(c_lo, c_hi):
                if c == pos:
                    continue
                w = sent_flat[c]
                r_lo = sub_off[w]
                r_hi = sub_off[w + 1]
                share = np.float32(1.0 / ((r_hi - r_lo) * n_ctx))
                for r in range(r_lo, r_hi):
                    hidden += share * inputs[sub_flat[r]]
            grad[:] = 0
            target = sent_flat[pos]
            for k in range(n_neg + 1):
                if k == 0:
                    cand = target
                    label = np.float32(1.0)
                else:
                    cand = negatives[pos, k - 1]
                    if cand == target:
                        continue
                    label = np.float32(0.0)
                score = np.float32(0.0)
                for d in range(dim):
                    score += outputs[cand, d] * hidden[d]
                if score > 30:
                    score = np.float32(30)
                elif score < -30:
                    score = np.float32(-30)
                prob = np.float32(1.0 / (1.0 + np.exp(-score)))
                if k == 0:
                    loss_sum -= np.log(prob + 1e-12)
                else:
                    loss_sum -= np.log(1.0 - prob + 1e-12)
                coef = lr * (label - prob)
                for d in range(dim):
                    grad[d] += coef * outputs[cand, d]
                    outputs[cand, d] += coef * hidden[d]
            updates += 1
            for c in range(c_lo, c_hi):
                if c == pos:
                    continue
                w = sent_flat[c]
                r_lo = sub_off[w]
                r_hi = sub_off[w + 1]
                share = np.float32(1.0 / ((r_hi - r_lo) * n_ctx))
                for r in range(r_lo, r_hi):
                    inputs[sub_flat[r]] += share * grad
    return step, loss_sum, updates


def train_embeddings(corpus, config=EmbeddingConfig()):
    """Train CBOW with negative sampling over tokenized UA strings.

    All randomness (init, sentence order, window spans, negatives) is drawn
    from one seeded generator; the update kernel itself is deterministic.
    """
    sentences = [u.tokens if isinstance(u, TokenizedUas) else tuple(u) for u in corpus]
    if not sentences:
        raise EmptyCorpus("corpus is empty")
    counts = Counter(tok for s in sentences for tok in s)
    words = sorted(w for w, c in counts.items() if c >= config.min_word_count)
    if not words:
        raise EmptyCorpus(f"no word occurs at least {config.min_word_count} times")
    vocab = {w: i for i, w in enumerate(words)}
    n_words = len(words)
    dim = config.dim
    rng = np.random.default_rng(config.seed)

    # input rows: [whole words | n-gram buckets]
    inputs = rng.uniform(-1.0 / dim, 1.0 / dim,
                         size=(n_words + config.bucket_count, dim)).astype(np.float32)
    outputs = np.zeros((n_words, dim), dtype=np.float32)
    subwords = [[i] + [n_words + b for b in ngram_buckets(w, config)] for i, w in enumerate(words)]
    sub_off = np.cumsum([0] + [len(r) for r in subwords]).astype(np.int64)
    sub_flat = np.array([r for rows in subwords for r in rows], dtype=np.int64)

    freq = np.array([counts[w] for w in words], dtype=np.float64) ** 0.5
    noise = freq / freq.sum()

    encoded = [[vocab[t] for t in s if t in vocab] for s in sentences]
    encoded = [s for s in encoded if len(s) > 1]
    sent_off = np.cumsum([0] + [len(s) for s in encoded]).astype(np.int64)
    sent_flat = np.array([w for s in encoded for w in s], dtype=np.int64)
    n_tokens = len(sent_flat)
    total_steps = max(1, config.epochs * n_tokens)
    step = 0

    for epoch in range(config.epochs):
        order = rng.permutation(len(encoded)).astype(np.int64)
        spans = rng.integers(1, config.window + 1, size=n_tokens).astype(np.int64)
        negatives = rng.choice(n_words, size=(n_tokens, config.negative_samples), p=noise)
        step, loss_sum, updates = _cbow_epoch(
            inputs, outputs, sent_flat, sent_off, order, spans, negatives.astype(np.int64),
            sub_flat, sub_off, step, total_steps, config.learning_rate)
        mean_loss = loss_sum / max(updates, 1)
        if not np.isfinite(mean_loss) or not np.isfinite(inputs).all():
            raise FloatingPointError(f"non-finite embedding training state in epoch {epoch + 1}")
        log.info("embedding epoch %d mean loss %.4f", epoch + 1, mean_loss)

    return EmbeddingModel(vocab, inputs[:n_words].copy(), inputs[n_words:].copy(), config)


def to_bytes(model):
    c = model.config
    parts = [MAGIC, _CONFIG_STRUCT.pack(
        c.dim, c.ngram_min, c.ngram_max, c.window, c.epochs, c.learning_rate,
        c.negative_samples, c.bucket_count, c.min_word_count, c.seed)]
    parts.append(struct.pack("<I", len(model.vocab)))
    for word, idx in sorted(model.vocab.items(), key=lambda kv: kv[1]):
        raw = word.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw + struct.pack("<I", idx))
    parts.append(model.word_vectors.astype("<f4").tobytes())
    parts.append(model.ngram_vectors.astype("<f4").tobytes())
    return b"".join(parts)


def from_bytes(blob):
    if blob[:len(MAGIC)] != MAGIC:
        raise EmbeddingFormatError("not an embedding model file (bad magic)")
    off = len(MAGIC)
    fields = _CONFIG_STRUCT.unpack_from(blob, off)
    off += _CONFIG_STRUCT.size
    names = list(asdict(EmbeddingConfig()).keys())
    config = EmbeddingConfig(**dict(zip(names, fields)))
    (n_words,) = struct.unpack_from("<I", blob, off)
    off += 4
    vocab = {}
    for _ in range(n_words):
        (length,) = struct.unpack_from("<I", blob, off)
        off += 4
        word = blob[off:off + length].decode("utf-8")
        off += length
        (idx,) = struct.unpack_from("<I", blob, off)
        off += 4
        vocab[word] = idx
    dim = config.dim
    n_word_floats = n_words * dim
    n_gram_floats = config.bucket_count * dim
    expected = off + 4 * (n_word_floats + n_gram_floats)
    if len(blob) != expected:
        raise EmbeddingFormatError(f"expected {expected} bytes, found {len(blob)}")
    word_vectors = np.frombuffer(blob, dtype="<f4", count=n_word_floats, offset=off)
    off += 4 * n_word_floats
    ngram_vectors = np.frombuffer(blob, dtype="<f4", count=n_gram_floats, offset=off)
    return EmbeddingModel(vocab, word_vectors.reshape(n_words, dim),
                          ngram_vectors.reshape(config.bucket_count, dim), config)
