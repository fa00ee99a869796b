"""Seed-conditioned sampling and the lossless token verification rule.

Stochastic sampling is reparameterized with the Gumbel-max trick: the
noise vector is a pure function of (seed, context token ids, vocab index),
so a sample is deterministic given the random state and becomes a fresh
draw from the model distribution when the seed varies.  Because the noise
depends only on the context and not on the model, a draft and a target
share noise at equal prefixes, which is what makes speculative decoding
under sampling reproduce direct sampling exactly for a fixed state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .lm import argmax_token, softmax

_MASK64 = (1 << 64) - 1
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3

# Stream tags keep independent uses of the same (seed, context) apart.
TAG_GUMBEL = 0
TAG_VERIFY_U = 1
TAG_RESIDUAL = 2
TAG_PERTURB = 3


@dataclass(frozen=True)
class RandomState:
    """64-bit seed identifying one sampling universe."""

    seed: int

    def __post_init__(self):
        if not 0 <= self.seed <= _MASK64:
            raise ValueError("seed must fit in 64 bits")


def _fnv_feed(h: int, value: int) -> int:
    """Absorb one value as 8 little-endian bytes, FNV-1a style."""
    v = value & _MASK64
    for _ in range(8):
        h = ((h ^ (v & 0xFF)) * _FNV_PRIME) & _MASK64
        v >>= 8
    return h


def _prefix_hash(tag: int, seed: int, context) -> int:
    h = _fnv_feed(_FNV_OFFSET, tag)
    h = _fnv_feed(h, seed)
    for t in context:
        h = _fnv_feed(h, t)
    return h


def _splitmix64(x: int) -> int:
    z = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def _unit_uniform(key: int) -> float:
    # (0, 1) strictly: offset by half an ulp of the 53-bit grid.
    return ((_splitmix64(key) >> 11) + 0.5) / float(1 << 53)


def _fnv_feed_vec(h, values) -> np.ndarray:
    """Vectorized _fnv_feed: absorb values[i] into h (or h[i]) elementwise."""
    v = np.asarray(values, dtype=np.uint64)
    out = np.broadcast_to(np.asarray(h, dtype=np.uint64), v.shape).copy()
    prime = np.uint64(_FNV_PRIME)
    mask, eight = np.uint64(0xFF), np.uint64(8)
    for _ in range(8):
        out = (out ^ (v & mask)) * prime
        v = v >> eight
    return out


def _unit_uniform_vec(keys: np.ndarray) -> np.ndarray:
    z = keys + np.uint64(0x9E3779B97F4A7C15)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    z = z ^ (z >> np.uint64(31))
    return ((z >> np.uint64(11)).astype(np.float64) + 0.5) / float(1 << 53)


def hash_uniform(tag: int, state: RandomState, context, index: int = 0) -> float:
    """One deterministic uniform in (0,1) keyed by (tag, seed, context, index)."""
    h = _prefix_hash(tag, state.seed, context)
    return _unit_uniform(_fnv_feed(h, index))


def gumbel_noise(state: RandomState, context, n: int) -> np.ndarray:
    """Standard Gumbel noise vector over `n` vocab indices.

    Entry i is -ln(-ln(u_i)) with u_i drawn from a counter generator
    seeded by the 64-bit FNV-1a hash of (seed, context ids, i).
    """
    h = _prefix_hash(TAG_GUMBEL, state.seed, context)
    u = _unit_uniform_vec(_fnv_feed_vec(h, np.arange(n)))
    return -np.log(-np.log(u))


def seeded_choice(logits, context, state: RandomState | None, temperature: float) -> int:
    """The model's deterministic choice at this context.

    Temperature 0 means greedy argmax.  Otherwise the choice is the
    Gumbel-max sample argmax(log softmax(logits, T) + g(state, context)),
    whose marginal over seeds is softmax(logits, T).
    """
    if temperature == 0:
        return argmax_token(logits)
    if state is None:
        raise ValueError("sampled mode requires a RandomState")
    probs = softmax(logits, temperature)
    g = gumbel_noise(state, context, len(probs))
    return argmax_token(np.log(probs) + g)


def sample_next(model, context, state: RandomState | None, temperature: float) -> int:
    """Sample the next token after `context` under the model."""
    context = tuple(context)
    model._check_tokens(context)
    logits, _ = model.next_logits_hidden(context)
    return seeded_choice(logits, context, state, temperature)


def rollout(model, context, max_new: int, temperature: float = 0.0,
            state: RandomState | None = None) -> list[int]:
    """Autoregress up to `max_new` tokens, stopping after end-of-sequence."""
    tokens = list(context)
    out = []
    eos = model.vocab.eos_id
    for _ in range(max_new):
        t = sample_next(model, tokens, state, temperature)
        tokens.append(t)
        out.append(t)
        if t == eos:
            break
    return out


def positionwise_choices(model, tokens, temperature: float = 0.0,
                         state: RandomState | None = None) -> list[int]:
    """The model's choice at every position of `tokens`.

    Entry i is what the model would emit after tokens[0..i-1]; entry 0
    is undefined (there is no empty context) and set to -1.
    """
    tokens = tuple(tokens)
    model._check_tokens(tokens)
    out = model.forward_parallel(tokens)
    choices = [-1] * len(tokens)
    for i in range(1, len(tokens)):
        choices[i] = seeded_choice(out.logits[i - 1], tokens[:i], state, temperature)
    return choices


@dataclass
class VerifyDecision:
    """Outcome of the lossless acceptance test for one drafted token."""

    accepted: bool
    replacement: int | None = None  # set iff rejected
    residual: np.ndarray | None = None  # replacement law, sums to 1

    def __post_init__(self):
        if self.accepted and (self.replacement is not None or self.residual is not None):
            raise ValueError("accepted decisions carry no replacement")
        if not self.accepted and self.replacement is None:
            raise ValueError("rejected decisions need a replacement")


def verify_token(p_target, p_draft, drafted: int, u: float,
                 residual_u: float = 0.0) -> VerifyDecision:
    """Distribution-preserving accept/reject for one drafted token.

    Accept iff u < min(1, p_target[drafted] / p_draft[drafted]); on
    rejection the replacement is drawn from the normalized positive part
    of (p_target - p_draft) by inverse CDF at `residual_u`.  Marginally
    over u and the residual draw, the emitted token is distributed
    exactly as p_target.
    """
    p = np.asarray(p_target, dtype=float)
    q = np.asarray(p_draft, dtype=float)
    if p.shape != q.shape or p.ndim != 1:
        raise ValueError("distributions must be equal-length vectors")
    if not (0.0 <= u < 1.0) or not (0.0 <= residual_u < 1.0):
        raise ValueError("u and residual_u must lie in [0, 1)")
    for vec, label in ((p, "p_target"), (q, "p_draft")):
        if not np.all(np.isfinite(vec)) or np.any(vec < 0):
            raise ValueError(f"{label} must be a finite nonnegative vector")
        if abs(vec.sum() - 1.0) > 1e-9:
            raise ValueError(f"{label} must sum to 1")
    if not 0 <= drafted < len(q) or q[drafted] <= 0.0:
        raise ValueError("drafted token must have positive draft probability")

    ratio = min(1.0, p[drafted] / q[drafted])
    if u < ratio:
        return VerifyDecision(accepted=True)
    residual = np.maximum(p - q, 0.0)
    mass = residual.sum()
    if mass <= 0.0:
        # p == q (up to rounding): rejection is a measure-zero event, but
        # fall back to the target law so the decision stays well formed.
        residual = p / p.sum()
    else:
        residual = residual / mass
    cdf = np.cumsum(residual)
    replacement = int(np.searchsorted(cdf, residual_u * cdf[-1], side="right"))
    replacement = min(replacement, len(residual) - 1)
    return VerifyDecision(accepted=False, replacement=replacement, residual=residual)


def verify_token_seeded(p_target, p_draft, drafted: int, state: RandomState,
                        context) -> VerifyDecision:
    """verify_token with u and the residual draw keyed from (state, context)."""
    u = hash_uniform(TAG_VERIFY_U, state, context)
    ru = hash_uniform(TAG_RESIDUAL, state, context)
    return verify_token(p_target, p_draft, drafted, u, ru)
