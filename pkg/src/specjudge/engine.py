"""Speculative decoding loop with pluggable acceptance policies.

Each cycle drafts a window of tokens with the small model, verifies the
whole window in one target pass, and emits the accepted prefix plus the
target's own token (a correction on rejection, a bonus on full
acceptance).  The lossless policy rejects every disagreement with the
target's deterministic choice, which makes the output identical to
decoding with the target alone, greedy or seed-conditioned sampled.  The
top-K and judge policies may keep a disagreeing draft token: top-K if the
target ranks it highly enough, the judge if its predicted importance is
below the threshold.
"""

from __future__ import annotations

from dataclasses import dataclass
from types import SimpleNamespace

import numpy as np

from .lm import DataError, LanguageModel, LmOutput, TokenSequence, softmax
from .judge import JudgeModel, assemble_features, check_judge_compatible, predict_importance
from .sampling import RandomState, seeded_choice


@dataclass(frozen=True)
class LosslessPolicy:
    """Reject every draft token the target itself would not have chosen."""


@dataclass(frozen=True)
class TopKPolicy:
    """Keep a disagreeing draft token if it is in the target's top K."""

    k: int

    def __post_init__(self):
        if self.k < 1:
            raise DataError("top-K needs k >= 1")


@dataclass(eq=False)
class JudgePolicy:
    """Keep a disagreeing draft token if the judge calls it unimportant.

    The last drafted position is always handed back to the target: its
    draft-side encoding would need one extra draft pass at inference, so
    judging there is disallowed by construction.
    """

    judge: JudgeModel
    threshold: float | None = None  # defaults to the judge's calibrated value

    @property
    def tau(self) -> float:
        tau = self.judge.threshold if self.threshold is None else self.threshold
        if not 0.0 < tau < 1.0:
            raise DataError("judge threshold must lie strictly inside (0, 1)")
        return tau


Policy = LosslessPolicy | TopKPolicy | JudgePolicy


@dataclass(frozen=True)
class EngineConfig:
    window: int = 64
    max_tokens: int = 256
    temperature: float = 0.0
    state: RandomState | None = None

    def __post_init__(self):
        if self.window < 1:
            raise DataError("window must be >= 1")
        if self.max_tokens < 1:
            raise DataError("max_tokens must be >= 1")
        if self.temperature < 0:
            raise DataError("temperature must be >= 0")
        if self.temperature > 0 and self.state is None:
            raise DataError("sampled decoding needs a RandomState")


@dataclass
class CycleStats:
    """Bookkeeping for one draft/verify cycle."""

    drafted: int
    accepted_draft: int
    judge_overrides: int  # disagreements kept by a lossy policy
    correction_emitted: bool
    bonus_emitted: bool


@dataclass
class DraftWindow:
    """Drafted tokens plus the draft model's rows over context+window."""

    tokens: list[int]
    probs: list[np.ndarray]  # draft distribution at each drafted position
    output: LmOutput  # full-length rows; only the window tail is populated


@dataclass
class VerifyOutcome:
    accepted: int  # count of accepted draft tokens (window prefix)
    replacement: int | None
    bonus: int | None
    stats: CycleStats


@dataclass
class DecodeResult:
    sequence: TokenSequence
    cycles: list[CycleStats]

    @property
    def response(self) -> tuple[int, ...]:
        return self.sequence.response


def _assemble_rows(vocab_size: int, hidden_dim: int, length: int, rows) -> LmOutput:
    """LmOutput whose filled rows come from (prefix_len, logits, hidden) triples.

    Rows outside the given triples are zero: one cycle only ever reads the
    window tail, so recomputing the full prefix every cycle would turn a
    linear decode quadratic for no benefit.
    """
    logits = np.zeros((length, vocab_size))
    hidden = np.zeros((length, hidden_dim))
    for n, lg, hd in rows:
        logits[n - 1] = lg
        hidden[n - 1] = hd
    return LmOutput(logits=logits, hidden=hidden)


def draft_window(draft: LanguageModel, context, width: int,
                 config: EngineConfig) -> DraftWindow:
    """Draft up to `width` tokens autoregressively, stopping after EOS."""
    if width < 1:
        raise DataError("window width must be >= 1")
    context = tuple(context)
    draft._check_tokens(context)
    eos = draft.vocab.eos_id
    tokens: list[int] = []
    probs: list[np.ndarray] = []
    rows = []
    temp = config.temperature
    for _ in range(width):
        prefix = context + tuple(tokens)
        logits, hid = draft.next_logits_hidden(prefix)
        t = seeded_choice(logits, prefix, config.state, temp)
        probs.append(softmax(logits, temp if temp > 0 else 1.0))
        rows.append((len(prefix), logits, hid))
        tokens.append(t)
        if t == eos:
            break
    full = context + tuple(tokens)
    logits, hid = draft.next_logits_hidden(full)
    rows.append((len(full), logits, hid))
    output = _assemble_rows(draft.vocab.size, draft.hidden_dim, len(full), rows)
    return DraftWindow(tokens=tokens, probs=probs, output=output)


def _top_k_ids(logits, k: int) -> set[int]:
    order = sorted(range(len(logits)), key=lambda i: (-logits[i], i))
    return set(order[: min(k, len(logits))])


def _judge_features(cfg, window_out: LmOutput, target_out: LmOutput, pos: int):
    record = SimpleNamespace(
        draft_hidden=window_out.hidden[pos],
        target_hidden=target_out.hidden[pos],
        prev_draft_hidden=window_out.hidden[pos - 1],
        prev_target_hidden=target_out.hidden[pos - 1],
    )
    return assemble_features(record, cfg)


def verify_window(target: LanguageModel, context, window: DraftWindow,
                  policy: Policy, config: EngineConfig) -> VerifyOutcome:
    """Verify a drafted window in one target pass, left to right.

    The first upheld rejection truncates the window and emits the
    target's own choice; a fully accepted window yields a bonus token
    unless it ends the sequence.
    """
    context = tuple(context)
    if not context:
        raise DataError("verification needs a non-empty context")
    if not window.tokens:
        raise DataError("empty draft window")
    full = context + tuple(window.tokens)
    ctx_len = len(context)
    rows = [(n,) + target.next_logits_hidden(full[:n])
            for n in range(ctx_len, len(full) + 1)]
    out = _assemble_rows(target.vocab.size, target.hidden_dim, len(full), rows)
    eos = target.vocab.eos_id
    temp, state = config.temperature, config.state

    accepted = 0
    overrides = 0
    replacement = None
    for j, drafted in enumerate(window.tokens):
        row = out.logits[ctx_len + j - 1]
        choice = seeded_choice(row, full[: ctx_len + j], state, temp)
        if drafted == choice:
            accepted += 1
            continue
        keep = False
        if isinstance(policy, TopKPolicy):
            keep = drafted in _top_k_ids(row, policy.k)
        elif isinstance(policy, JudgePolicy) and j < len(window.tokens) - 1:
            feats = _judge_features(policy.judge.feature_config, window.output,
                                    out, ctx_len + j)
            keep = predict_importance(policy.judge, feats) < policy.tau
        if keep:
            overrides += 1
            accepted += 1
            continue
        replacement = choice
        break

    bonus = None
    if replacement is None and window.tokens[-1] != eos:
        bonus = seeded_choice(out.logits[-1], full, state, temp)
    stats = CycleStats(drafted=len(window.tokens), accepted_draft=accepted,
                       judge_overrides=overrides,
                       correction_emitted=replacement is not None,
                       bonus_emitted=bonus is not None)
    return VerifyOutcome(accepted=accepted, replacement=replacement, bonus=bonus,
                         stats=stats)


def spec_decode(prompt, draft: LanguageModel, target: LanguageModel,
                policy: Policy, config: EngineConfig) -> DecodeResult:
    """Full speculative decoding run for one prompt.

    Stops when an end-of-sequence token is emitted or the response
    reaches config.max_tokens.  Every cycle emits at least one token.
    """
    prompt = tuple(prompt)
    if not prompt:
        raise DataError("prompt must be non-empty")
    if draft.vocab.size != target.vocab.size or draft.vocab.eos_id != target.vocab.eos_id:
        raise DataError("draft and target vocabularies do not match")
    if isinstance(policy, JudgePolicy):
        check_judge_compatible(policy.judge, draft, target)
        policy.tau  # validate eagerly
    eos = target.vocab.eos_id
    tokens = list(prompt)
    cycles: list[CycleStats] = []
    emitted = 0
    while emitted < config.max_tokens and (emitted == 0 or tokens[-1] != eos):
        remaining = config.max_tokens - emitted
        window = draft_window(draft, tokens, min(config.window, remaining), config)
        outcome = verify_window(target, tokens, window, policy, config)
        emit = list(window.tokens[: outcome.accepted])
        stats = outcome.stats
        if outcome.replacement is not None:
            emit.append(outcome.replacement)
        elif outcome.bonus is not None and len(emit) < remaining:
            emit.append(outcome.bonus)
        else:
            stats.bonus_emitted = False
        tokens.extend(emit)
        emitted += len(emit)
        cycles.append(stats)
    return DecodeResult(sequence=TokenSequence(tuple(tokens), len(prompt)),
                        cycles=cycles)


def accepted_per_cycle(cycles) -> float:
    """Tokens emitted per target forward pass (one pass per cycle)."""
    cycles = list(cycles)
    if not cycles:
        raise DataError("no cycles to aggregate")
    total = sum(c.accepted_draft + int(c.correction_emitted) + int(c.bonus_emitted)
                for c in cycles)
    return total / len(cycles)
