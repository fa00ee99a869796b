"""Benchmark harness: aggregation, report formats, failure tolerance."""

import json

import pytest

from specjudge.bench import (REPORT_COLUMNS, BenchRow, emit_report,
                             parse_report, policy_label, run_benchmark,
                             run_policy, sweep_thresholds)
from specjudge.engine import EngineConfig, JudgePolicy, LosslessPolicy, TopKPolicy
from specjudge.lm import DataError, TokenSequence
from specjudge.sampling import rollout
from specjudge.tasks import Answer, Task, answers_equivalent, extract_answer


@pytest.fixture(scope="module")
def bench_config():
    return EngineConfig(window=8, max_tokens=64)


def test_lossless_row_matches_direct_greedy_decoding(pipeline, eval_tasks,
                                                     bench_config):
    tasks = eval_tasks[:10]
    row = run_policy(tasks, pipeline.draft, pipeline.target, LosslessPolicy(),
                     bench_config, seed=7)
    correct = 0
    tokens = 0
    for task in tasks:
        budget = min(64, task.max_response_len)
        response = rollout(pipeline.target, task.prompt.tokens, budget)
        answer = extract_answer(response, pipeline.vocab)
        correct += answers_equivalent(answer, task.oracle_answer)
        tokens += len(response)
    assert row.policy == "lossless" and row.param == ""
    assert row.accuracy == correct / len(tasks)
    assert row.tokens == tokens
    assert row.seed == 7 and row.failures == 0


def test_topk_one_row_equals_lossless_row(pipeline, eval_tasks, bench_config):
    tasks = eval_tasks[:10]
    lossless = run_policy(tasks, pipeline.draft, pipeline.target,
                          LosslessPolicy(), bench_config)
    topk = run_policy(tasks, pipeline.draft, pipeline.target, TopKPolicy(k=1),
                      bench_config)
    assert (topk.accuracy, topk.accepted_per_cycle, topk.cycles, topk.tokens) \
        == (lossless.accuracy, lossless.accepted_per_cycle, lossless.cycles,
            lossless.tokens)


def test_threshold_sweep_trades_accuracy_for_speed(pipeline, judged, eval_tasks,
                                                   bench_config):
    rows = sweep_thresholds(eval_tasks, pipeline.draft, pipeline.target,
                            judged.judge, [1e-9, 0.3, 0.9], bench_config)
    assert [float(r.param) for r in rows] == [1e-9, 0.3, 0.9]
    for tighter, looser in zip(rows[:-1], rows[1:]):
        assert looser.accuracy <= tighter.accuracy
        assert looser.accepted_per_cycle >= tighter.accepted_per_cycle
    assert rows[-1].accepted_per_cycle > rows[0].accepted_per_cycle


def test_failed_task_is_counted_and_reported(pipeline, eval_tasks, bench_config,
                                             capsys):
    bad = Task(task_id="broken", prompt=TokenSequence((), 0),
               oracle_answer=Answer.no_answer(), max_response_len=8, seed=0)
    tasks = list(eval_tasks[:4]) + [bad]
    row = run_policy(tasks, pipeline.draft, pipeline.target, LosslessPolicy(),
                     bench_config)
    assert row.failures == 1
    assert row.accuracy == 4 / 5  # the broken task counts as incorrect
    err = capsys.readouterr().err
    assert "decode failed" in err and "broken" in err


def test_parallel_jobs_agree_with_serial(pipeline, eval_tasks, bench_config):
    tasks = eval_tasks[:6]
    serial = run_policy(tasks, pipeline.draft, pipeline.target, TopKPolicy(k=2),
                        bench_config, jobs=1)
    parallel = run_policy(tasks, pipeline.draft, pipeline.target, TopKPolicy(k=2),
                          bench_config, jobs=2)
    assert serial == parallel


def test_run_benchmark_sorts_rows(pipeline, eval_tasks, bench_config):
    policies = [TopKPolicy(k=4), LosslessPolicy(), TopKPolicy(k=1)]
    rows = run_benchmark(eval_tasks[:4], pipeline.draft, pipeline.target,
                         policies, bench_config)
    assert [(r.policy, r.param) for r in rows] \
        == [("lossless", ""), ("topk", "1"), ("topk", "4")]


def test_policy_label_rejects_unknown_policies():
    assert policy_label(LosslessPolicy()) == ("lossless", "")
    assert policy_label(TopKPolicy(k=8)) == ("topk", "8")
    with pytest.raises(DataError):
        policy_label("fastest")


def test_empty_task_list_is_rejected(pipeline, bench_config):
    with pytest.raises(DataError):
        run_policy([], pipeline.draft, pipeline.target, LosslessPolicy(),
                   bench_config)


def sample_rows():
    return [
        BenchRow(policy="lossless", param="", accuracy=1.0,
                 accepted_per_cycle=5.072463768115942, cycles=69, tokens=350,
                 seed=0),
        BenchRow(policy="judge", param="0.3", accuracy=0.975,
                 accepted_per_cycle=5.5, cycles=64, tokens=352, seed=0),
    ]


def test_csv_report_round_trips_bytes_exactly():
    rows = sample_rows()
    text = emit_report(rows, fmt="csv")
    assert text.splitlines()[0] == ",".join(REPORT_COLUMNS)
    parsed = parse_report(text)
    assert parsed == rows
    assert emit_report(parsed, fmt="csv") == text


def test_jsonl_report_carries_every_column():
    rows = sample_rows()
    lines = emit_report(rows, fmt="jsonl").splitlines()
    assert len(lines) == 2
    first = json.loads(lines[0])
    assert set(first) == set(REPORT_COLUMNS)
    assert first["accepted_per_cycle"] == rows[0].accepted_per_cycle


def test_report_format_validation():
    with pytest.raises(DataError):
        emit_report(sample_rows(), fmt="xml")
    with pytest.raises(DataError):
        parse_report("not,a,report\n1,2,3\n")