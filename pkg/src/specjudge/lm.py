"""Core language-model contract shared by every backend.

A model is a pure function of its token context: one abstract primitive
(`next_logits_hidden`) yields the next-token logits and the hidden state
encoding the consumed prefix.  Parallel forwards are defined as the
position-wise collection of that primitive, so batched and sequential
evaluation agree bit for bit by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DataError(Exception):
    """Malformed input data (bad tokens, bad files, bad shapes)."""


@dataclass(frozen=True)
class Vocab:
    """Closed token vocabulary with a single end-of-sequence id."""

    id_to_text: tuple[str, ...]
    eos_id: int

    def __post_init__(self):
        if len(self.id_to_text) < 2:
            raise DataError("vocab needs at least 2 tokens")
        if not 0 <= self.eos_id < len(self.id_to_text):
            raise DataError("eos_id out of range")
        if len(set(self.id_to_text)) != len(self.id_to_text):
            raise DataError("duplicate token texts in vocab")

    @property
    def size(self) -> int:
        return len(self.id_to_text)

    @property
    def token_to_id(self) -> dict[str, int]:
        mapping = self.__dict__.get("_token_to_id")
        if mapping is None:
            mapping = {t: i for i, t in enumerate(self.id_to_text)}
            object.__setattr__(self, "_token_to_id", mapping)
        return mapping

    def encode(self, text: str) -> list[int]:
        """Whitespace-tokenize `text`; unknown words are a data error."""
        ids = []
        for word in text.split():
            tid = self.token_to_id.get(word)
            if tid is None:
                raise DataError(f"unknown token {word!r}")
            ids.append(tid)
        return ids

    def decode(self, tokens) -> str:
        return " ".join(self.id_to_text[t] for t in tokens)


@dataclass(frozen=True)
class TokenSequence:
    """Token ids with a prompt/response boundary."""

    tokens: tuple[int, ...]
    prompt_len: int

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        if not 0 <= self.prompt_len <= len(self.tokens):
            raise DataError("prompt_len out of range")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def prompt(self) -> tuple[int, ...]:
        return self.tokens[: self.prompt_len]

    @property
    def response(self) -> tuple[int, ...]:
        return self.tokens[self.prompt_len :]

    def with_response(self, response) -> "TokenSequence":
        return TokenSequence(self.prompt + tuple(response), self.prompt_len)


@dataclass
class LmOutput:
    """Per-position forward results: row i conditions on tokens[0..i]."""

    logits: np.ndarray  # (len, vocab)
    hidden: np.ndarray  # (len, hidden_dim)


def softmax(logits, temperature: float = 1.0) -> np.ndarray:
    """Temperature softmax, stabilized by max subtraction.

    Temperature must be positive and finite; temperature 0 is a greedy
    sentinel handled by callers, never a valid softmax input.
    """
    logits = np.asarray(logits, dtype=float)
    if not np.all(np.isfinite(logits)):
        raise ValueError("softmax requires finite logits")
    if not (np.isfinite(temperature) and temperature > 0):
        raise ValueError("softmax requires temperature > 0")
    z = logits / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def argmax_token(logits) -> int:
    """Argmax with ties broken toward the lowest token id."""
    return int(np.argmax(logits))


class LanguageModel:
    """Base class for toy backends.

    Subclasses implement `next_logits_hidden(context)`: given a non-empty
    token prefix, return the logits over the next token and the hidden
    state encoding the prefix.  Both must be finite and deterministic.
    """

    name: str = "model"
    vocab: Vocab
    hidden_dim: int

    def next_logits_hidden(self, context: tuple[int, ...]):
        raise NotImplementedError

    def _check_tokens(self, tokens):
        if len(tokens) == 0:
            raise DataError("empty token sequence")
        for t in tokens:
            if not 0 <= t < self.vocab.size:
                raise DataError(f"token id {t} out of range for vocab size {self.vocab.size}")

    def forward_parallel(self, seq) -> LmOutput:
        """Evaluate every position of `seq` in one call.

        Row i holds the logits predicting position i+1 and the hidden
        state encoding tokens[0..i].
        """
        tokens = tuple(seq.tokens) if isinstance(seq, TokenSequence) else tuple(seq)
        self._check_tokens(tokens)
        logits = np.empty((len(tokens), self.vocab.size))
        hidden = np.empty((len(tokens), self.hidden_dim))
        for i in range(len(tokens)):
            l, h = self.next_logits_hidden(tokens[: i + 1])
            logits[i] = l
            hidden[i] = h
        return LmOutput(logits=logits, hidden=hidden)

    def greedy_next(self, context) -> int:
        """Most likely next token id after `context` (lowest id on ties)."""
        context = tuple(context)
        self._check_tokens(context)
        logits, _ = self.next_logits_hidden(context)
        return argmax_token(logits)
