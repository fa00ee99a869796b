"""Benchmark harness: accuracy versus tokens accepted per target pass.

Each row decodes a task set under one policy and reports final-answer
accuracy against the oracle plus the mean number of tokens emitted per
target forward pass.  Sweeping judge thresholds or top-K values maps the
accuracy/speed frontier.
"""

from __future__ import annotations

import csv
import io
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

from .engine import (EngineConfig, JudgePolicy, LosslessPolicy, TopKPolicy,
                     accepted_per_cycle, spec_decode)
from .lm import DataError
from .tasks import answers_equivalent, extract_answer

REPORT_COLUMNS = ("policy", "param", "accuracy", "accepted_per_cycle",
                  "cycles", "tokens", "seed")


@dataclass(frozen=True)
class BenchRow:
    policy: str
    param: str
    accuracy: float
    accepted_per_cycle: float
    cycles: int
    tokens: int
    seed: int
    failures: int = 0  # tasks whose decode raised; counted as incorrect


def policy_label(policy) -> tuple[str, str]:
    if isinstance(policy, LosslessPolicy):
        return "lossless", ""
    if isinstance(policy, TopKPolicy):
        return "topk", str(policy.k)
    if isinstance(policy, JudgePolicy):
        return "judge", repr(policy.tau)
    raise DataError(f"unknown policy {policy!r}")


def _decode_one(args):
    """Decode one task; a per-task failure becomes a flagged result, not a crash."""
    task, draft, target, policy, config = args
    cfg = EngineConfig(window=config.window,
                       max_tokens=min(config.max_tokens, task.max_response_len),
                       temperature=config.temperature, state=config.state)
    try:
        result = spec_decode(task.prompt.tokens, draft, target, policy, cfg)
        answer = extract_answer(result.response, target.vocab)
        correct = answers_equivalent(answer, task.oracle_answer)
    except DataError as e:
        return False, [], 0, f"task {task.task_id}: {e}"
    return correct, result.cycles, len(result.response), None


def run_policy(tasks, draft, target, policy, config: EngineConfig,
               seed: int = 0, jobs: int = 1) -> BenchRow:
    """Decode every task under one policy and aggregate a report row.

    A task whose decode fails is reported on stderr, counted as incorrect,
    and tallied in the row's failure count; the run itself continues.
    """
    tasks = list(tasks)
    if not tasks:
        raise DataError("no tasks to benchmark")
    work = [(t, draft, target, policy, config) for t in tasks]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_decode_one, work, chunksize=8))
    else:
        results = [_decode_one(w) for w in work]
    cycles = []
    correct = 0
    tokens = 0
    failures = 0
    for ok, task_cycles, n_tokens, error in results:
        if error is not None:
            failures += 1
            print(f"decode failed, {error}", file=sys.stderr)
            continue
        correct += int(ok)
        cycles.extend(task_cycles)
        tokens += n_tokens
    name, param = policy_label(policy)
    apc = accepted_per_cycle(cycles) if cycles else 0.0
    return BenchRow(policy=name, param=param, accuracy=correct / len(tasks),
                    accepted_per_cycle=apc, cycles=len(cycles), tokens=tokens,
                    seed=seed, failures=failures)


def _row_order(row: BenchRow):
    return (row.policy, float(row.param) if row.param else -1.0)


def run_benchmark(tasks, draft, target, policies, config: EngineConfig,
                  seed: int = 0, jobs: int = 1) -> list[BenchRow]:
    """One report row per policy, sorted by policy name then parameter."""
    rows = [run_policy(tasks, draft, target, p, config, seed=seed, jobs=jobs)
            for p in policies]
    return sorted(rows, key=_row_order)


def sweep_thresholds(tasks, draft, target, judge, thresholds, config: EngineConfig,
                     seed: int = 0, jobs: int = 1) -> list[BenchRow]:
    """Judge-policy frontier over a threshold grid."""
    policies = [JudgePolicy(judge, threshold=float(t)) for t in thresholds]
    return run_benchmark(tasks, draft, target, policies, config, seed=seed, jobs=jobs)


def emit_report(rows, fmt: str = "csv") -> str:
    """Render rows as CSV (default) or JSON lines; byte-stable per input."""
    if fmt == "jsonl":
        return "".join(json.dumps({c: getattr(r, c) for c in REPORT_COLUMNS}) + "\n"
                       for r in rows)
    if fmt != "csv":
        raise DataError(f"unknown report format {fmt!r}")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    for r in rows:
        writer.writerow([r.policy, r.param, repr(r.accuracy),
                         repr(r.accepted_per_cycle), r.cycles, r.tokens, r.seed])
    return buf.getvalue()


def parse_report(text: str) -> list[BenchRow]:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header != list(REPORT_COLUMNS):
        raise DataError("unexpected report header")
    rows = []
    for rec in reader:
        if not rec:
            continue
        policy, param, accuracy, apc, cycles, tokens, seed = rec
        rows.append(BenchRow(policy=policy, param=param, accuracy=float(accuracy),
                             accepted_per_cycle=float(apc), cycles=int(cycles),
                             tokens=int(tokens), seed=int(seed)))
    return rows
