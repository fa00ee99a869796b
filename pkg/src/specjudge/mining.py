"""Automatic mining of important draft tokens.

A mismatch is a response position where the draft model's prediction
differs from the token actually produced by the target.  Mining walks the
mismatches left to right: swap the draft token in, let the target finish
the sequence, and compare final answers.  If the answer survives, the
mismatch is unimportant and the swapped variant becomes the new working
sequence; if the answer changes, the token is important and the original
stays.  Labels therefore measure each disagreement in the context of all
earlier unimportant swaps, which is exactly how a lossy decoder would
encounter it.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .lm import DataError, TokenSequence
from .sampling import RandomState, positionwise_choices, rollout
from .tasks import Answer, Task, answers_equivalent, extract_answer


class MiningError(DataError):
    pass


class TaskSkippedError(MiningError):
    """The reference generation produced no parseable answer."""


class MiningBudgetError(MiningError):
    """Rollback cap exceeded; partial records attached."""

    def __init__(self, message: str, records: list):
        super().__init__(message)
        self.records = records


@dataclass(frozen=True)
class MiningConfig:
    """Mining mode and safety limits.

    Temperature 0 mines greedy generations; otherwise generation and
    draft predictions are seed-conditioned samples under `state`.
    max_rollbacks defaults to 4x the reference response length.
    """

    temperature: float = 0.0
    state: RandomState | None = None
    max_rollbacks: int | None = None

    def __post_init__(self):
        if self.temperature < 0:
            raise DataError("temperature must be >= 0")
        if self.temperature > 0 and self.state is None:
            raise DataError("sampled mining needs a RandomState")


@dataclass
class MismatchRecord:
    """One labeled draft/target disagreement.

    `position` is the absolute index into the prompt+response stream.
    The two *_hidden vectors encode the draft token itself (sequence with
    the draft token swapped in); the prev_* vectors encode the position
    just before the disagreement.
    """

    task_id: str
    position: int
    target_token: int
    draft_token: int
    important: bool
    context_hash: str
    draft_hidden: np.ndarray
    target_hidden: np.ndarray
    prev_draft_hidden: np.ndarray
    prev_target_hidden: np.ndarray

    def __post_init__(self):
        if self.target_token == self.draft_token:
            raise DataError("a mismatch record needs differing tokens")


@dataclass
class MiningResult:
    task_id: str
    records: list[MismatchRecord]
    reference_tokens: tuple[int, ...]
    final_tokens: tuple[int, ...]
    reference_answer: Answer
    prompt_len: int
    rollbacks: int = 0


def context_fingerprint(tokens) -> str:
    return hashlib.sha256(json.dumps(list(tokens)).encode()).hexdigest()[:16]


def mismatch_indices(draft, seq: TokenSequence, temperature: float = 0.0,
                     state: RandomState | None = None) -> list[int]:
    """Absolute response positions where the draft disagrees with `seq`."""
    if len(seq) <= seq.prompt_len:
        return []
    choices = positionwise_choices(draft, seq.tokens, temperature, state)
    return [p for p in range(seq.prompt_len, len(seq)) if choices[p] != seq.tokens[p]]


def _point_hidden(model, prefix) -> np.ndarray:
    _, hidden = model.next_logits_hidden(tuple(prefix))
    return hidden


def _record(task_id, tokens, t, draft_token, important, draft, target) -> MismatchRecord:
    prev = tokens[:t]
    branch = prev + (draft_token,)
    return MismatchRecord(
        task_id=task_id, position=t, target_token=tokens[t], draft_token=draft_token,
        important=important, context_hash=context_fingerprint(prev),
        draft_hidden=_point_hidden(draft, branch),
        target_hidden=_point_hidden(target, branch),
        prev_draft_hidden=_point_hidden(draft, prev),
        prev_target_hidden=_point_hidden(target, prev),
    )


def _generate(target, prefix, budget, cfg, target_generate):
    if budget <= 0:
        return []
    if target_generate is not None:
        return list(target_generate(tuple(prefix), budget))
    return rollout(target, prefix, budget, cfg.temperature, cfg.state)


def _reference(task: Task, target, cfg: MiningConfig, target_generate):
    x = task.prompt.tokens
    y = tuple(_generate(target, x, task.max_response_len, cfg, target_generate))
    if not y:
        raise TaskSkippedError(f"{task.task_id}: empty reference generation")
    alpha = extract_answer(y, target.vocab)
    if not alpha.is_number:
        raise TaskSkippedError(f"{task.task_id}: reference answer not parseable")
    return x, y, alpha


def mine_important(task: Task, draft, target, cfg: MiningConfig = MiningConfig(),
                   target_generate=None) -> MiningResult:
    """Label every mismatch by answer preservation, adopting harmless swaps.

    `target_generate`, when given, replaces local target generation (for
    remote backends); the target model is still used for hidden states.
    """
    x, y, alpha = _reference(task, target, cfg, target_generate)
    eos = target.vocab.eos_id
    tokens = x + y
    prompt_len = len(x)
    cap = cfg.max_rollbacks if cfg.max_rollbacks is not None else 4 * len(y)

    choices = positionwise_choices(draft, tokens, cfg.temperature, cfg.state)
    pending = [p for p in range(prompt_len, len(tokens)) if choices[p] != tokens[p]]
    records: list[MismatchRecord] = []
    rollbacks = 0
    while pending:
        rollbacks += 1
        if rollbacks > cap:
            raise MiningBudgetError(
                f"{task.task_id}: rollback cap {cap} exceeded", records)
        t = pending[0]
        draft_token = choices[t]
        branch = tokens[:t] + (draft_token,)
        budget = task.max_response_len - (t - prompt_len + 1)
        if draft_token == eos:
            continuation = []
        else:
            continuation = _generate(target, branch, budget, cfg, target_generate)
        candidate = branch + tuple(continuation)
        alpha_hat = extract_answer(candidate[prompt_len:], target.vocab)
        important = not answers_equivalent(alpha_hat, alpha)
        records.append(_record(task.task_id, tokens, t, draft_token, important,
                               draft, target))
        if important:
            pending = [p for p in pending if p > t]
        else:
            tokens = candidate
            if t + 1 < len(tokens):
                choices = positionwise_choices(draft, tokens, cfg.temperature, cfg.state)
                pending = [p for p in range(t + 1, len(tokens))
                           if choices[p] != tokens[p]]
            else:
                pending = []
    return MiningResult(task_id=task.task_id, records=records,
                        reference_tokens=x + y, final_tokens=tokens,
                        reference_answer=alpha, prompt_len=prompt_len,
                        rollbacks=rollbacks)


def mine_naive(task: Task, draft, target, cfg: MiningConfig = MiningConfig(),
               target_generate=None) -> MiningResult:
    """Baseline labeling: test each mismatch in isolation, never adopting."""
    x, y, alpha = _reference(task, target, cfg, target_generate)
    eos = target.vocab.eos_id
    tokens = x + y
    prompt_len = len(x)
    choices = positionwise_choices(draft, tokens, cfg.temperature, cfg.state)
    records = []
    for t in range(prompt_len, len(tokens)):
        draft_token = choices[t]
        if draft_token == tokens[t]:
            continue
        branch = tokens[:t] + (draft_token,)
        budget = task.max_response_len - (t - prompt_len + 1)
        if draft_token == eos:
            continuation = []
        else:
            continuation = _generate(target, branch, budget, cfg, target_generate)
        alpha_hat = extract_answer((branch + tuple(continuation))[prompt_len:],
                                   target.vocab)
        important = not answers_equivalent(alpha_hat, alpha)
        records.append(_record(task.task_id, tokens, t, draft_token, important,
                               draft, target))
    return MiningResult(task_id=task.task_id, records=records,
                        reference_tokens=tokens, final_tokens=tokens,
                        reference_answer=alpha, prompt_len=prompt_len)


def export_dataset(path: str, records) -> None:
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps({
                "task_id": r.task_id, "position": r.position,
                "target_token": r.target_token, "draft_token": r.draft_token,
                "important": r.important, "context_hash": r.context_hash,
                "draft_hidden": r.draft_hidden.tolist(),
                "target_hidden": r.target_hidden.tolist(),
                "prev_draft_hidden": r.prev_draft_hidden.tolist(),
                "prev_target_hidden": r.prev_target_hidden.tolist(),
            }) + "\n")


def load_dataset(path: str) -> list[MismatchRecord]:
    records = []
    try:
        with open(path) as f:
            for line in f:
                if not line.strip():
                    continue
                row = json.loads(line)
                records.append(MismatchRecord(
                    task_id=row["task_id"], position=int(row["position"]),
                    target_token=int(row["target_token"]),
                    draft_token=int(row["draft_token"]),
                    important=bool(row["important"]),
                    context_hash=row["context_hash"],
                    draft_hidden=np.array(row["draft_hidden"], dtype=float),
                    target_hidden=np.array(row["target_hidden"], dtype=float),
                    prev_draft_hidden=np.array(row["prev_draft_hidden"], dtype=float),
                    prev_target_hidden=np.array(row["prev_target_hidden"], dtype=float),
                ))
    except (KeyError, ValueError, TypeError, json.JSONDecodeError) as e:
        raise DataError(f"bad dataset file {path}: {e}") from e
    if not records:
        raise DataError(f"no records in {path}")
    return records


def dataset_fingerprint(records) -> str:
    """Stable hash of a record list, for judge provenance metadata."""
    h = hashlib.sha256()
    for r in records:
        h.update(json.dumps([r.task_id, r.position, r.target_token, r.draft_token,
                             r.important]).encode())
    return h.hexdigest()[:16]
