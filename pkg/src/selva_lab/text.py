"""Toy text encoder, learned projection and supplementary-token prepending."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import rng as rngmod
from .errors import ShapeError, UsageError, VocabularyError
from .nn import ParamStore, add_linear, apply_linear
from .tensor import Tensor, concat
from .world import class_token

PAD, EOS = "[pad]", "[eos]"


class Vocabulary:
    """Token strings with ids equal to their position (line number on disk)."""

    def __init__(self, tokens: Sequence[str]):
        self.tokens = list(tokens)
        self._ids = {t: i for i, t in enumerate(self.tokens)}
        if len(self._ids) != len(self.tokens):
            raise VocabularyError("duplicate tokens in vocabulary")
        for special in (PAD, EOS):
            if special not in self._ids:
                raise VocabularyError(f"vocabulary lacks {special}")

    @classmethod
    def for_classes(cls, n_classes: int) -> "Vocabulary":
        return cls([PAD, EOS] + [class_token(k) for k in range(n_classes)])

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls([line.rstrip("\n") for line in Path(path).read_text().splitlines() if line.strip()])

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def eos_id(self) -> int:
        return self._ids[EOS]

    def ids(self, tokens: Sequence[str]) -> list[int]:
        try:
            return [self._ids[t] for t in tokens]
        except KeyError as exc:
            raise VocabularyError(f"unknown token {exc.args[0]!r}") from None


@dataclass
class TextSequence:
    ids: tuple
    embeddings: Tensor  # [L, d] or [B, L, d]
    has_sup: bool = False
    n_sup: int = 0

    @property
    def length(self) -> int:
        return self.embeddings.shape[-2]

    @property
    def eos_index(self) -> int:
        return self.n_sup + len(self.ids) - 1


class TextEncoder:
    """Frozen contextual lookup ``E`` followed by a learnable projection.

    ``E`` adds to each token the running mean of the caption so far, so the
    ``[eos]`` row summarizes the whole caption.
    """

    def __init__(self, store: ParamStore, vocab: Vocabulary, d_text: int, seed: int, prefix: str = "text"):
        self.store = store
        self.vocab = vocab
        self.d_text = d_text
        self.prefix = prefix
        gen = rngmod.stream(seed, prefix)
        store.add(f"{prefix}.table", gen.normal(0.0, 1.0, size=(len(vocab), d_text)))
        add_linear(store, gen, f"{prefix}.proj", d_text, d_text)

    def token_ids(self, caption: Sequence) -> tuple:
        ids = [t if isinstance(t, (int, np.integer)) else None for t in caption]
        if any(i is None for i in ids):
            ids = self.vocab.ids(caption)
        ids = [int(i) for i in ids]
        for i in ids:
            if not 0 <= i < len(self.vocab):
                raise VocabularyError(f"token id {i} outside vocabulary of size {len(self.vocab)}")
        if not ids or ids[-1] != self.vocab.eos_id:
            ids.append(self.vocab.eos_id)
        return tuple(ids)

    def frozen_embed(self, ids: Sequence[int]) -> np.ndarray:
        table = self.store[f"{self.prefix}.table"].data
        rows = table[np.asarray(ids)]
        running = np.cumsum(rows, axis=-2) / np.arange(1, rows.shape[-2] + 1)[:, None]
        return rows + running

    def encode(self, caption: Sequence) -> TextSequence:
        ids = self.token_ids(caption)
        emb = apply_linear(self.store, f"{self.prefix}.proj", Tensor(self.frozen_embed(ids)))
        return TextSequence(ids, emb)

    def encode_batch(self, captions: Sequence[Sequence]) -> TextSequence:
        """Encode equal-length captions into one ``[B, L, d]`` sequence."""
        all_ids = [self.token_ids(c) for c in captions]
        if len({len(i) for i in all_ids}) != 1:
            raise ShapeError("captions in a batch must have equal length")
        raw = np.stack([self.frozen_embed(i) for i in all_ids])
        emb = apply_linear(self.store, f"{self.prefix}.proj", Tensor(raw))
        return TextSequence(all_ids[0], emb)


def prepend_sup(seq: TextSequence, bank: Tensor) -> TextSequence:
    """Prepend the shared supplementary-token bank ``[n_sup, d]`` to ``seq``."""
    if seq.has_sup:
        raise UsageError("sequence already carries supplementary tokens")
    n_sup = bank.shape[0]
    if n_sup == 0:
        return TextSequence(seq.ids, seq.embeddings, True, 0)
    emb = seq.embeddings
    rows = bank
    if emb.ndim == 3:
        rows = bank.reshape(1, n_sup, bank.shape[1]) + Tensor(np.zeros((emb.shape[0], 1, 1)))
    return TextSequence(seq.ids, concat([rows, emb], axis=-2), True, n_sup)
