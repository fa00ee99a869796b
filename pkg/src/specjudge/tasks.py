"""Synthetic chain-arithmetic tasks with exact oracle answers.

A task prompt lists a start value and a chain of operations ("Start with
7 . Add 3 . Finally Multiply by 2 ."); the expected response walks the
chain one sentence at a time and closes with "The final answer is <v> .".
"Finally" marks the last operation so prompts with different step counts
never share a full-prompt prefix.  Every intermediate value stays inside a
closed numeric vocabulary, so a plain n-gram model trained on rendered
chains reproduces the oracle exactly.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass

from .lm import DataError, TokenSequence, Vocab

CONNECTIVES = ("Now", "Then", "Next")
CONNECTIVE_WEIGHTS = (0.6, 0.3, 0.1)
_WORDS = ("Start", "with", "Add", "Multiply", "by", "Finally", "plus", "times",
          "is", "The", "final", "answer", ".") + CONNECTIVES
EOS_TEXT = "</s>"


def build_vocab(max_value: int = 99) -> Vocab:
    """Closed vocabulary: task words, numerals 0..max_value, end marker."""
    texts = _WORDS + tuple(str(v) for v in range(max_value + 1)) + (EOS_TEXT,)
    return Vocab(id_to_text=texts, eos_id=len(texts) - 1)


@dataclass(frozen=True)
class Answer:
    """A parsed final answer: a number, or no answer at all."""

    value: int | None

    @classmethod
    def number(cls, value: int) -> "Answer":
        return cls(int(value))

    @classmethod
    def no_answer(cls) -> "Answer":
        return cls(None)

    @property
    def is_number(self) -> bool:
        return self.value is not None


def answers_equivalent(a: Answer, b: Answer) -> bool:
    """Numbers match iff equal; a missing answer matches nothing."""
    return a.value is not None and b.value is not None and a.value == b.value


@dataclass(frozen=True)
class Chain:
    """Start value plus (op, operand) steps; ops are 'Add' or 'Multiply'."""

    start: int
    ops: tuple[tuple[str, int], ...]

    def values(self) -> list[int]:
        vals = [self.start]
        for op, k in self.ops:
            vals.append(vals[-1] + k if op == "Add" else vals[-1] * k)
        return vals

    @property
    def answer(self) -> Answer:
        return Answer.number(self.values()[-1])


def _legal_ops(value: int, max_value: int, final: bool) -> list[tuple[str, int]]:
    # A running value of max_value would strand the chain, so only the
    # final step may land there.
    cap = max_value if final else max_value - 1
    ops = [("Add", k) for k in range(1, 10) if value + k <= cap]
    ops += [("Multiply", k) for k in range(2, 10) if value * k <= cap]
    return ops


def sample_chain(rng: random.Random, num_steps: int, max_value: int = 99) -> Chain:
    """Random feasible chain; num_steps counts the starting step."""
    if not 2 <= num_steps <= 8:
        raise DataError("num_steps must be in 2..8")
    start = rng.randint(1, 9)
    value = start
    ops = []
    for j in range(num_steps - 1):
        choices = _legal_ops(value, max_value, final=j == num_steps - 2)
        op, k = choices[rng.randrange(len(choices))]
        ops.append((op, k))
        value = value + k if op == "Add" else value * k
    return Chain(start, tuple(ops))


def enumerate_chains(num_steps: int, max_value: int = 99) -> list[Chain]:
    """All feasible chains with the given step count, in a fixed order."""
    if not 2 <= num_steps <= 8:
        raise DataError("num_steps must be in 2..8")
    partial = [(start, ()) for start in range(1, 10)]
    for j in range(num_steps - 1):
        final = j == num_steps - 2
        grown = []
        for start, ops in partial:
            value = Chain(start, ops).values()[-1]
            for op, k in _legal_ops(value, max_value, final):
                grown.append((start, ops + ((op, k),)))
        partial = grown
    return [Chain(start, ops) for start, ops in partial]


def prompt_words(chain: Chain) -> list[str]:
    words = ["Start", "with", str(chain.start), "."]
    for j, (op, k) in enumerate(chain.ops):
        step = ["Add", str(k), "."] if op == "Add" else ["Multiply", "by", str(k), "."]
        if j == len(chain.ops) - 1:
            step = ["Finally"] + step
        words += step
    return words


def response_words(chain: Chain, connectives) -> list[str]:
    """Render the worked response; `connectives` gives one word per step."""
    vals = chain.values()
    words = []
    for j, (op, k) in enumerate(chain.ops):
        opw = "plus" if op == "Add" else "times"
        words += [connectives[j], str(vals[j]), opw, str(k), "is", str(vals[j + 1]), "."]
    words += ["The", "final", "answer", "is", str(vals[-1]), ".", EOS_TEXT]
    return words


def response_budget(chain: Chain) -> int:
    return 7 * len(chain.ops) + 7 + 8  # worked sentences + closing + slack


@dataclass(frozen=True)
class Task:
    """One prompt with its oracle answer and response budget."""

    task_id: str
    prompt: TokenSequence
    oracle_answer: Answer
    max_response_len: int
    seed: int

    def __post_init__(self):
        if self.max_response_len < 1:
            raise DataError("max_response_len must be >= 1")


def task_from_chain(chain: Chain, vocab: Vocab, task_id: str, seed: int) -> Task:
    ids = tuple(vocab.encode(" ".join(prompt_words(chain))))
    return Task(task_id=task_id, prompt=TokenSequence(ids, len(ids)),
                oracle_answer=chain.answer, max_response_len=response_budget(chain),
                seed=seed)


def gen_arithmetic_task(seed: int, num_steps: int, vocab: Vocab | None = None,
                        max_value: int = 99) -> Task:
    """Deterministic task for (seed, num_steps)."""
    vocab = vocab or build_vocab(max_value)
    rng = random.Random(f"arith:{seed}:{num_steps}")
    chain = sample_chain(rng, num_steps, max_value)
    return task_from_chain(chain, vocab, f"arith-{seed}-{num_steps}", seed)


def extract_answer(tokens_or_text, vocab: Vocab | None = None) -> Answer:
    """Parse the integer after the last "final answer is" marker.

    Accepts raw text, token texts, or token ids (ids need `vocab`).
    Missing marker, missing operand, or a non-integer operand all yield
    the no-answer value.
    """
    if isinstance(tokens_or_text, str):
        words = tokens_or_text.split()
    else:
        seq = list(tokens_or_text.tokens if isinstance(tokens_or_text, TokenSequence)
                   else tokens_or_text)
        if seq and isinstance(seq[0], int):
            if vocab is None:
                raise DataError("token ids need a vocab to extract an answer")
            words = [vocab.id_to_text[t] for t in seq]
        else:
            words = [str(w) for w in seq]
    marker = ("final", "answer", "is")
    for i in range(len(words) - 3, -1, -1):
        if tuple(words[i : i + 3]) == marker:
            if i + 3 < len(words):
                try:
                    return Answer.number(int(words[i + 3]))
                except ValueError:
                    return Answer.no_answer()
            return Answer.no_answer()
    return Answer.no_answer()


def gen_corpus(vocab: Vocab, num_steps_values=(2, 3), variants: int = 3,
               seed: int = 0, max_value: int = 99) -> list[list[int]]:
    """Token sequences covering every feasible chain, with varied fillers.

    Each chain is rendered `variants` times with connectives drawn from a
    fixed weighted distribution, so filler words become genuinely
    ambiguous while all content tokens stay deterministic per chain.
    """
    rng = random.Random(f"corpus:{seed}")
    lines = []
    for num_steps in num_steps_values:
        for chain in enumerate_chains(num_steps, max_value):
            for _ in range(variants):
                conns = rng.choices(CONNECTIVES, weights=CONNECTIVE_WEIGHTS,
                                    k=len(chain.ops))
                words = prompt_words(chain) + response_words(chain, conns)
                lines.append(vocab.encode(" ".join(words)))
    return lines


def save_tasks(path: str, tasks, vocab: Vocab) -> None:
    with open(path, "w") as f:
        for t in tasks:
            f.write(json.dumps({
                "task_id": t.task_id,
                "prompt": vocab.decode(t.prompt.tokens),
                "oracle": t.oracle_answer.value,
                "seed": t.seed,
                "max_response_len": t.max_response_len,
            }) + "\n")


def load_tasks(path: str, vocab: Vocab) -> list:
    tasks = []
    with open(path) as f:
        for line in f:
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                ids = tuple(vocab.encode(row["prompt"]))
                oracle = (Answer.number(row["oracle"]) if row["oracle"] is not None
                          else Answer.no_answer())
                tasks.append(Task(task_id=row["task_id"],
                                  prompt=TokenSequence(ids, len(ids)),
                                  oracle_answer=oracle,
                                  max_response_len=int(row["max_response_len"]),
                                  seed=int(row["seed"])))
            except (KeyError, ValueError, TypeError) as e:
                raise DataError(f"bad task record in {path}: {e}") from e
    if not tasks:
        raise DataError(f"no tasks in {path}")
    return tasks
