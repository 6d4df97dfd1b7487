"""Vocabulary, tokenization and token embeddings."""

from __future__ import annotations

import hashlib
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import tensor_core as tc
from .exceptions import ConfigurationError, ContractError
from .tensor_core import Tensor

PAD_ID = 0
UNK_ID = 1
TOKENIZER_MODES = ("char", "word")


def tokenize(text: str, mode: str = "char") -> list[str]:
    if mode == "char":
        return list(text)
    if mode == "word":
        return text.split()
    raise ConfigurationError(f"tokenizer mode must be one of {TOKENIZER_MODES}, got {mode!r}")


class Vocabulary:
    """Token to id map with ``0 = pad`` and ``1 = unknown`` reserved."""

    def __init__(self, tokens: Sequence[str]):
        self.tokens = list(tokens)
        for tok in self.tokens:
            if "\n" in tok:
                raise ConfigurationError("vocabulary tokens may not contain newlines")
        self.token_to_id = {tok: i + 2 for i, tok in enumerate(self.tokens)}
        if len(self.token_to_id) != len(self.tokens):
            raise ConfigurationError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.tokens) + 2

    def __getitem__(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def save(self, path: str | Path) -> None:
        """One token per line; line ``i`` holds id ``i + 2``."""
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for tok in self.tokens:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        with open(path, encoding="utf-8", newline="\n") as fh:
            return cls([line[:-1] if line.endswith("\n") else line for line in fh])

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.tokens).encode("utf-8")).hexdigest()


def build_vocab(texts: Iterable[str], min_count: int = 1, mode: str = "char") -> Vocabulary:
    """Tokens seen at least ``min_count`` times, by descending count then lexically."""
    if min_count < 1:
        raise ConfigurationError(f"min_count must be >= 1, got {min_count}")
    counts: Counter[str] = Counter()
    n = 0
    for text in texts:
        counts.update(tokenize(text, mode))
        n += 1
    if n == 0:
        raise ContractError("cannot build a vocabulary from an empty corpus")
    kept = [(tok, c) for tok, c in counts.items() if c >= min_count]
    kept.sort(key=lambda tc_: (-tc_[1], tc_[0]))
    return Vocabulary([tok for tok, _ in kept])


@dataclass(frozen=True)
class TokenSequence:
    ids: np.ndarray
    true_length: int
    tokens: tuple[str, ...] = ()


def tokenize_and_pad(text: str, vocab: Vocabulary, length: int, mode: str = "char") -> TokenSequence:
    if length < 1:
        raise ConfigurationError(f"sequence length must be >= 1, got {length}")
    tokens = tokenize(text, mode)[:length]
    if not tokens:
        ids = np.zeros(length, dtype=np.int64)
        ids[0] = UNK_ID
        return TokenSequence(ids, 1, ("",))
    ids = np.zeros(length, dtype=np.int64)
    ids[:len(tokens)] = [vocab[t] for t in tokens]
    return TokenSequence(ids, len(tokens), tuple(tokens))


def encode_batch(texts: Sequence[str], vocab: Vocabulary, length: int, mode: str = "char"):
    """Stack padded ids (N, L) and true lengths (N,)."""
    seqs = [tokenize_and_pad(t, vocab, length, mode) for t in texts]
    ids = np.stack([s.ids for s in seqs]) if seqs else np.zeros((0, length), dtype=np.int64)
    lengths = np.array([s.true_length for s in seqs], dtype=np.int64)
    return ids, lengths


@dataclass
class EmbeddingTable:
    """(V, C) matrix; row 0 is the padding vector and stays zero."""

    matrix: np.ndarray
    trainable: bool = True

    def __post_init__(self):
        self.matrix = np.array(self.matrix, dtype=np.float64)
        self.matrix[PAD_ID] = 0.0

    @classmethod
    def random(cls, n_tokens: int, dim: int, rng: np.random.Generator, scale: float = 1.0) -> "EmbeddingTable":
        return cls(rng.normal(0.0, scale, size=(n_tokens, dim)))


def embed(seq: TokenSequence | np.ndarray, table: EmbeddingTable | Tensor) -> Tensor:
    """Channel-major embedding ``(C, L)`` (or ``(B, C, L)`` for a batch of ids)."""
    ids = seq.ids if isinstance(seq, TokenSequence) else np.asarray(seq)
    t = table if isinstance(table, Tensor) else Tensor(table.matrix, requires_grad=table.trainable)
    return tc.embedding_lookup(t, ids, frozen_row=PAD_ID)


def train_word2vec(texts: Sequence[str], vocab: Vocabulary, dim: int, window: int = 5,
                   negatives: int = 5, epochs: int = 5, seed: int = 0, mode: str = "char",
                   lr: float = 0.025, batch_size: int = 256) -> EmbeddingTable:
    """Skip-gram with negative sampling; returns the input-vector table."""
    if window < 1:
        raise ConfigurationError(f"window must be >= 1, got {window}")
    if negatives < 1 or dim < 1 or epochs < 0:
        raise ConfigurationError("negatives and dim must be positive, epochs non-negative")
    if not texts:
        raise ContractError("word2vec needs a non-empty corpus")
    rng = np.random.default_rng(seed)
    V = len(vocab)
    w_in = rng.uniform(-0.5 / dim, 0.5 / dim, size=(V, dim))
    w_in[PAD_ID] = 0.0
    w_out = np.zeros((V, dim))

    centers, contexts = [], []
    counts = np.zeros(V)
    for text in texts:
        ids = np.array([vocab[t] for t in tokenize(text, mode)], dtype=np.int64)
        np.add.at(counts, ids, 1)
        n = ids.size
        for off in range(1, window + 1):
            if off >= n:
                break
            centers.extend((ids[:-off], ids[off:]))
            contexts.extend((ids[off:], ids[:-off]))
    if not centers:
        return EmbeddingTable(w_in)
    centers = np.concatenate(centers)
    contexts = np.concatenate(contexts)
    noise = counts ** 0.75
    noise[PAD_ID] = 0.0
    noise /= noise.sum()

    total = epochs * centers.size
    done = 0
    for _ in range(epochs):
        order = rng.permutation(centers.size)
        for start in range(0, order.size, batch_size):
            idx = order[start:start + batch_size]
            c, o = centers[idx], contexts[idx]
            neg = rng.choice(V, size=(idx.size, negatives), p=noise)
            step = lr * max(1e-4, 1.0 - done / total)
            done += idx.size
            v = w_in[c]
            u_pos = w_out[o]
            u_neg = w_out[neg]
            g_pos = tc.sigmoid((v * u_pos).sum(axis=1)) - 1.0
            g_neg = tc.sigmoid(np.einsum("bd,bkd->bk", v, u_neg))
            grad_v = g_pos[:, None] * u_pos + np.einsum("bk,bkd->bd", g_neg, u_neg)
            np.add.at(w_out, o, -step * g_pos[:, None] * v)
            np.add.at(w_out, neg, -step * g_neg[..., None] * v[:, None, :])
            np.add.at(w_in, c, -step * grad_v)
    w_in[PAD_ID] = 0.0
    return EmbeddingTable(w_in)
