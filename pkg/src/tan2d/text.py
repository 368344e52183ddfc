"""Query side: vocabulary, tokenizer, embedding table and a 3-layer LSTM encoder."""
from __future__ import annotations

import re
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import FormatError, QueryError

PAD, UNK = "<pad>", "<unk>"
NUM_LAYERS = 3

_SPLIT = re.compile(r"[^0-9a-z]+")


class Vocabulary:
    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = [PAD, UNK]
        self.stoi: dict[str, int] = {PAD: 0, UNK: 1}
        for t in tokens:
            self.add(t)

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def index(self, token: str) -> int:
        return self.stoi.get(token, 1)

    @classmethod
    def build(cls, texts: Iterable[str]) -> "Vocabulary":
        words = sorted({w for t in texts for w in split_words(t)})
        return cls(words)

    def to_list(self) -> list[str]:
        return list(self.itos)

    @classmethod
    def from_list(cls, itos: Sequence[str]) -> "Vocabulary":
        if list(itos[:2]) != [PAD, UNK]:
            raise FormatError("vocabulary must start with <pad>, <unk>")
        return cls(itos[2:])


def split_words(text: str) -> list[str]:
    return [w for w in _SPLIT.split(text.lower()) if w]


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    return [vocab.index(w) for w in split_words(text)]


class QueryEncoder:
    """Embedding lookup followed by a stacked LSTM; the sentence feature is
    the top layer's hidden state after each sequence's last real token."""

    def __init__(self, vocab_size: int, dim: int = 512, rng: np.random.Generator | None = None,
                 train_embeddings: bool = True):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.dim = dim
        self.embedding = ag.parameter(rng.standard_normal((vocab_size, dim)), "text.embedding")
        self.embedding.requires_grad = train_embeddings
        self.layers: list[tuple[Tensor, Tensor]] = []
        for i in range(NUM_LAYERS):
            # gate order: input, forget, cell, output
            w = rng.uniform(-0.08, 0.08, (2 * dim, 4 * dim))
            b = np.zeros(4 * dim)
            b[dim:2 * dim] = 1.0
            self.layers.append((ag.parameter(w, f"text.lstm{i}.weight"), ag.parameter(b, f"text.lstm{i}.bias")))

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        if self.embedding.requires_grad:
            out[self.embedding.name] = self.embedding
        for w, b in self.layers:
            out[w.name] = w
            out[b.name] = b
        return out

    def state_tensors(self) -> dict[str, Tensor]:
        out = {self.embedding.name: self.embedding}
        for w, b in self.layers:
            out[w.name] = w
            out[b.name] = b
        return out

    def encode(self, tokens: Sequence[int]) -> Tensor:
        """Sentence feature of shape ``(dim,)``."""
        return ag.reshape(self.encode_batch([tokens]), (self.dim,))

    def encode_batch(self, batch: Sequence[Sequence[int]]) -> Tensor:
        """Encode ragged token lists to ``(B, dim)``.

        Sequences are right-padded, and a per-step gate freezes each
        sequence's state once its tokens run out, so padding never leaks in.
        """
        if not batch:
            raise QueryError("empty batch")
        lengths = np.array([len(t) for t in batch])
        if (lengths < 1).any():
            raise QueryError("query has no tokens")
        B, T, d = len(batch), int(lengths.max()), self.dim
        ids = np.zeros((B, T), dtype=np.intp)
        for i, t in enumerate(batch):
            ids[i, : len(t)] = t
        if ids.max() >= self.embedding.shape[0] or ids.min() < 0:
            raise QueryError("token index outside the embedding table")

        emb = ag.take_rows(self.embedding, ids.reshape(-1))
        emb = ag.reshape(emb, (B, T, d))
        seq = [emb[:, t, :] for t in range(T)]
        for w, b in self.layers:
            h = ag.tensor(np.zeros((B, d)))
            c = ag.tensor(np.zeros((B, d)))
            outs = []
            for t in range(T):
                live = (lengths > t).astype(np.float64)[:, None]
                gates = ag.affine(ag.concat([seq[t], h], axis=1), w, b)
                i_g = ag.sigmoid(gates[:, :d])
                f_g = ag.sigmoid(gates[:, d:2 * d])
                g_g = ag.tanh(gates[:, 2 * d:3 * d])
                o_g = ag.sigmoid(gates[:, 3 * d:])
                c_new = f_g * c + i_g * g_g
                h_new = o_g * ag.tanh(c_new)
                if live.all():
                    c, h = c_new, h_new
                else:
                    c = ag.blend(c_new, c, live)
                    h = ag.blend(h_new, h, live)
                outs.append(h)
            seq = outs
        return seq[-1]


def load_pretrained_embeddings(path: str | Path, vocab: Vocabulary, table: Tensor) -> Tensor:
    """Overwrite rows of ``table`` for tokens listed in a ``token v1 ... vd`` text file."""
    dim = table.shape[1]
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot read embedding file {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != dim + 1:
            raise FormatError(f"{path}:{lineno}: expected {dim} values, got {len(parts) - 1}")
        tok = parts[0]
        if tok not in vocab:
            continue
        try:
            row = np.array([float(v) for v in parts[1:]])
        except ValueError:
            raise FormatError(f"{path}:{lineno}: non-numeric value") from None
        table.data[vocab.index(tok)] = row
    return table
