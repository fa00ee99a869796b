"""Deterministic toy backends: smoothed n-gram models and perturbed drafts.

These stand in for the large models of a real system.  They are exact in
double precision, fully seeded, and expose the same contract as any other
backend, so every pipeline property can be checked bit for bit at desk
scale.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .lm import DataError, LanguageModel, TokenSequence, Vocab, argmax_token
from .sampling import TAG_PERTURB, _fnv_feed_vec, _prefix_hash, _unit_uniform_vec

EMBED_DIM = 16


class NGramModel(LanguageModel):
    """Add-k smoothed n-gram with a fixed random embedding table.

    P(t | ctx) = (count(ctx, t) + k) / (count(ctx) + k * |V|) where ctx is
    the last order-1 tokens (fewer near the sequence start).  The hidden
    state is the mean embedding of the context window plus the entropy and
    top-1 log-probability of the next-token distribution.
    """

    def __init__(self, vocab: Vocab, order: int, smoothing: float, seed: int = 0,
                 name: str = "ngram"):
        if order < 1:
            raise DataError("order must be >= 1")
        if smoothing <= 0:
            raise DataError("smoothing must be > 0")
        self.vocab = vocab
        self.order = order
        self.smoothing = smoothing
        self.seed = seed
        self.name = name
        self.hidden_dim = EMBED_DIM + 2
        self.counts: dict[tuple[int, ...], Counter] = {}
        self.embedding = np.random.default_rng(seed).standard_normal((vocab.size, EMBED_DIM))

    def _context_key(self, context: tuple[int, ...]) -> tuple[int, ...]:
        w = self.order - 1
        return context[-w:] if w > 0 else ()

    def observe(self, tokens) -> None:
        tokens = tuple(tokens)
        for i in range(1, len(tokens)):
            key = self._context_key(tokens[:i])
            self.counts.setdefault(key, Counter())[tokens[i]] += 1

    def next_probs(self, context: tuple[int, ...]) -> np.ndarray:
        key = self._context_key(tuple(context))
        k = self.smoothing
        probs = np.full(self.vocab.size, k)
        total = k * self.vocab.size
        counter = self.counts.get(key)
        if counter:
            for tok, c in counter.items():
                probs[tok] += c
            total += sum(counter.values())
        return probs / total

    def next_logits_hidden(self, context):
        context = tuple(context)
        probs = self.next_probs(context)
        logits = np.log(probs)
        w = self.order - 1
        window = context[-w:] if w > 0 else ()
        if window:
            emb = self.embedding[list(window)].mean(axis=0)
        else:
            emb = np.zeros(EMBED_DIM)
        entropy = float(-(probs * logits).sum())
        top1 = float(logits.max())
        return logits, np.concatenate([emb, [entropy, top1]])


def train_ngram(vocab: Vocab, corpus, order: int, smoothing: float, seed: int = 0,
                name: str = "ngram") -> NGramModel:
    """Count-train an NGramModel on an iterable of token sequences."""
    model = NGramModel(vocab, order, smoothing, seed=seed, name=name)
    n = 0
    for seq in corpus:
        tokens = seq.tokens if isinstance(seq, TokenSequence) else tuple(seq)
        model._check_tokens(tokens)
        model.observe(tokens)
        n += 1
    if n == 0:
        raise DataError("empty training corpus")
    return model


@dataclass(frozen=True)
class PerturbSpec:
    """How a draft model deviates from its base model.

    noise_scale adds seeded Gaussian noise to every logit; bias_tokens
    adds a fixed offset to chosen token ids in every context.
    """

    noise_scale: float = 0.0
    bias_tokens: dict[int, float] = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.noise_scale < 0:
            raise DataError("noise_scale must be >= 0")


class PerturbedModel(LanguageModel):
    """Wraps a base model with deterministic logit perturbations.

    Hidden states pass through with one appended scalar: the total logit
    offset applied at the token this model would pick, which tells a
    downstream classifier how hard the perturbation pushed its choice.
    """

    def __init__(self, base: LanguageModel, spec: PerturbSpec, name: str = "draft"):
        self.base = base
        self.spec = spec
        self.vocab = base.vocab
        self.name = name
        self.hidden_dim = base.hidden_dim + 1

    def _delta(self, context: tuple[int, ...]) -> np.ndarray:
        delta = np.zeros(self.vocab.size)
        for tok, off in self.spec.bias_tokens.items():
            delta[tok] += off
        sigma = self.spec.noise_scale
        if sigma > 0:
            h = _prefix_hash(TAG_PERTURB, self.spec.seed, context)
            hi = _fnv_feed_vec(h, np.arange(self.vocab.size))
            zero = np.zeros(self.vocab.size, dtype=np.uint64)
            u1 = _unit_uniform_vec(_fnv_feed_vec(hi, zero))
            u2 = _unit_uniform_vec(_fnv_feed_vec(hi, zero + np.uint64(1)))
            z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * math.pi * u2)
            delta += sigma * z
        return delta

    def next_logits_hidden(self, context):
        context = tuple(context)
        base_logits, base_hidden = self.base.next_logits_hidden(context)
        delta = self._delta(context)
        logits = base_logits + delta
        summary = float(delta[argmax_token(logits)])
        return logits, np.concatenate([base_hidden, [summary]])


def make_draft(target: LanguageModel, spec: PerturbSpec, name: str = "draft") -> PerturbedModel:
    """Build a draft model as a perturbation wrapper around `target`."""
    return PerturbedModel(target, spec, name=name)


class ScriptedModel(LanguageModel):
    """Lookup-table model: an explicit map from full context to next token.

    Useful for hand-built scenarios where every continuation must be
    controlled exactly.  Unlisted contexts fall back to `default_token`.
    """

    def __init__(self, vocab: Vocab, script: dict[tuple[int, ...], int],
                 default_token: int | None = None, hidden_dim: int = 3,
                 name: str = "scripted"):
        self.vocab = vocab
        self.script = {tuple(k): v for k, v in script.items()}
        self.default_token = vocab.eos_id if default_token is None else default_token
        self.hidden_dim = hidden_dim
        self.name = name

    def next_logits_hidden(self, context):
        context = tuple(context)
        choice = self.script.get(context, self.default_token)
        logits = np.full(self.vocab.size, -40.0)
        logits[choice] = 0.0
        return logits, np.zeros(self.hidden_dim)
