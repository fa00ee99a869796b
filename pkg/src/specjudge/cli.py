"""Command-line interface for the full pipeline.

Subcommands: gen-tasks, gen-corpus, mine, train-judge, decode, bench,
record-trace.  Every command takes --seed, resolves models from spec
strings or JSON files, and writes a manifest of its resolved
configuration next to its output.  Exit codes: 0 success, 1 usage,
2 data error, 3 remote error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import bench as bench_mod
from .engine import (EngineConfig, JudgePolicy, LosslessPolicy, TopKPolicy,
                     accepted_per_cycle, spec_decode)
from .judge import (FeatureConfig, calibrate_threshold, grid_search_C,
                    build_examples, load_judge, save_judge)
from .lm import DataError, TokenSequence
from .mining import (MiningConfig, TaskSkippedError, dataset_fingerprint,
                     export_dataset, load_dataset, mine_important, mine_naive)
from .remote import RemoteEndpoint, RemoteError, remote_generator
from .sampling import RandomState, rollout
from .tasks import (build_vocab, extract_answer, answers_equivalent, gen_corpus,
                    gen_arithmetic_task, load_tasks, save_tasks)
from .toymodels import PerturbSpec, make_draft, train_ngram
from .trace import load_trace, record_trace, save_trace


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(1)


def _load_corpus_lines(path: str, vocab) -> list[list[int]]:
    try:
        with open(path) as f:
            lines = [vocab.encode(line) for line in f if line.strip()]
    except OSError as e:
        raise DataError(f"cannot read corpus {path}: {e}") from e
    if not lines:
        raise DataError(f"empty corpus {path}")
    return lines


def _parse_inline_spec(text: str) -> dict:
    kind, _, rest = text.partition(":")
    spec = {"kind": kind}
    if rest:
        for part in rest.split(","):
            key, _, value = part.partition("=")
            if not key or not value:
                raise DataError(f"bad model spec fragment {part!r}")
            spec[key] = value
    return spec


def resolve_model(spec_text: str, vocab, side: str = "target"):
    """Build a model from a JSON spec file or an inline kind:k=v,... string."""
    if os.path.exists(spec_text) and spec_text.endswith(".json"):
        try:
            with open(spec_text) as f:
                spec = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise DataError(f"cannot read model spec {spec_text}: {e}") from e
    else:
        spec = _parse_inline_spec(spec_text)
    kind = spec.get("kind")
    if kind == "ngram":
        corpus = _load_corpus_lines(spec["corpus"], vocab)
        return train_ngram(vocab, corpus, order=int(spec.get("order", 16)),
                           smoothing=float(spec.get("smoothing", 0.2)),
                           seed=int(spec.get("seed", 0)),
                           name=spec.get("name", "ngram"))
    if kind == "perturb":
        base = resolve_model(str(spec["base"]), vocab, side)
        bias_raw = spec.get("bias", spec.get("bias_tokens", {}))
        if isinstance(bias_raw, str):
            pairs = [p for p in bias_raw.split(";") if p]
            bias_raw = dict(p.split(":", 1) for p in pairs)
        bias = {}
        for token_text, off in bias_raw.items():
            tid = vocab.token_to_id.get(token_text)
            if tid is None:
                raise DataError(f"bias token {token_text!r} not in vocab")
            bias[tid] = float(off)
        pspec = PerturbSpec(noise_scale=float(spec.get("sigma",
                                                       spec.get("noise_scale", 0.0))),
                            bias_tokens=bias, seed=int(spec.get("seed", 0)))
        return make_draft(base, pspec, name=spec.get("name", "draft"))
    if kind == "trace":
        trace = load_trace(spec["path"])
        pair = trace.replay_models(vocab)
        return pair[0] if spec.get("side", side) == "draft" else pair[1]
    raise DataError(f"unknown model kind {kind!r}")


def _write_manifest(out_path: str, command: str, options: dict) -> None:
    manifest = {"command": command,
                "options": {k: v for k, v in sorted(options.items())}}
    with open(out_path + ".manifest.json", "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")


def _manifest_options(args, skip=("func", "command")) -> dict:
    return {k: v for k, v in vars(args).items()
            if k not in skip and not k.startswith("_")}


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v]


def _float_list(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v]


def _engine_config(args) -> EngineConfig:
    state = RandomState(args.seed) if args.temperature > 0 else None
    return EngineConfig(window=args.window, max_tokens=args.max_tokens,
                        temperature=args.temperature, state=state)


def _mining_config(args) -> MiningConfig:
    state = RandomState(args.seed) if args.temperature > 0 else None
    return MiningConfig(temperature=args.temperature, state=state,
                        max_rollbacks=args.max_rollbacks)


def _policies(args):
    policies = []
    for name in args.policy.split(","):
        name = name.strip()
        if name == "lossless":
            policies.append(LosslessPolicy())
        elif name == "topk":
            for k in _int_list(args.topk):
                policies.append(TopKPolicy(k))
        elif name == "judge":
            if not args.judge:
                raise DataError("judge policy needs --judge <file>")
            judge = load_judge(args.judge)
            taus = _float_list(args.threshold) if args.threshold else [judge.threshold]
            for tau in taus:
                policies.append(JudgePolicy(judge, threshold=tau))
        else:
            raise DataError(f"unknown policy {name!r}")
    if not policies:
        raise DataError("no policies selected")
    return policies


def cmd_gen_tasks(args) -> int:
    vocab = build_vocab(args.max_value)
    steps = _int_list(args.num_steps)
    tasks = [gen_arithmetic_task(args.seed + i, steps[i % len(steps)], vocab,
                                 args.max_value)
             for i in range(args.count)]
    save_tasks(args.out, tasks, vocab)
    _write_manifest(args.out, "gen-tasks", _manifest_options(args))
    print(f"wrote {len(tasks)} tasks to {args.out}")
    return 0


def cmd_gen_corpus(args) -> int:
    vocab = build_vocab(args.max_value)
    lines = gen_corpus(vocab, num_steps_values=_int_list(args.num_steps),
                       variants=args.variants, seed=args.seed,
                       max_value=args.max_value)
    with open(args.out, "w") as f:
        for ids in lines:
            f.write(vocab.decode(ids) + "\n")
    _write_manifest(args.out, "gen-corpus", _manifest_options(args))
    print(f"wrote {len(lines)} sequences to {args.out}")
    return 0


def cmd_mine(args) -> int:
    vocab = build_vocab(args.max_value)
    target = resolve_model(args.target_model, vocab, "target")
    draft = resolve_model(args.draft_model, vocab, "draft")
    tasks = load_tasks(args.tasks, vocab)
    cfg = _mining_config(args)
    generate = None
    if args.remote_url:
        if not args.remote_model:
            raise DataError("--remote-url needs --remote-model")
        endpoint = RemoteEndpoint(base_url=args.remote_url, model=args.remote_model,
                                  bearer_token=os.environ.get("SPECJUDGE_API_TOKEN"))
        generate = remote_generator(endpoint, vocab, temperature=args.temperature)
    miner = mine_naive if args.naive else mine_important
    records = []
    skipped = 0
    for task in tasks:
        try:
            records.extend(miner(task, draft, target, cfg,
                                 target_generate=generate).records)
        except TaskSkippedError as e:
            skipped += 1
            print(f"skipped: {e}", file=sys.stderr)
    if not records:
        raise DataError("mining produced no records")
    export_dataset(args.out, records)
    _write_manifest(args.out, "mine", _manifest_options(args))
    frac = sum(r.important for r in records) / len(records)
    print(f"wrote {len(records)} records to {args.out} "
          f"(important fraction {frac:.3f}, {skipped} tasks skipped)")
    return 0


def cmd_train_judge(args) -> int:
    records = load_dataset(args.dataset)
    cfg = FeatureConfig(token_source=args.token_source,
                        model_source=args.model_source)
    examples = build_examples(records, cfg)
    result = grid_search_C(examples, split_seed=args.seed, cfg=cfg,
                           max_iters=args.max_iters)
    judge = result.model
    judge.threshold = calibrate_threshold(judge, result.validation,
                                          target_recall=args.target_recall)
    judge.dataset_hash = dataset_fingerprint(records)
    judge.seed = args.seed
    save_judge(args.out, judge)
    _write_manifest(args.out, "train-judge", _manifest_options(args))
    print(f"wrote judge to {args.out} (C={judge.C:g}, "
          f"val AUC={result.val_auc:.4f}, threshold={judge.threshold:.6g})")
    return 0


def cmd_decode(args) -> int:
    vocab = build_vocab(args.max_value)
    target = resolve_model(args.target_model, vocab, "target")
    draft = resolve_model(args.draft_model, vocab, "draft")
    tasks = load_tasks(args.tasks, vocab)
    policies = _policies(args)
    if len(policies) != 1:
        raise DataError("decode runs exactly one policy")
    config = _engine_config(args)
    with open(args.out, "w") as f:
        for task in tasks:
            cfg = EngineConfig(window=config.window,
                               max_tokens=min(config.max_tokens,
                                              task.max_response_len),
                               temperature=config.temperature, state=config.state)
            result = spec_decode(task.prompt.tokens, draft, target, policies[0], cfg)
            answer = extract_answer(result.response, vocab)
            f.write(json.dumps({
                "task_id": task.task_id,
                "response": vocab.decode(result.response),
                "answer": answer.value,
                "correct": answers_equivalent(answer, task.oracle_answer),
                "cycles": len(result.cycles),
                "accepted_per_cycle": accepted_per_cycle(result.cycles),
            }) + "\n")
    _write_manifest(args.out, "decode", _manifest_options(args))
    print(f"decoded {len(tasks)} tasks to {args.out}")
    return 0


def cmd_bench(args) -> int:
    vocab = build_vocab(args.max_value)
    target = resolve_model(args.target_model, vocab, "target")
    draft = resolve_model(args.draft_model, vocab, "draft")
    tasks = load_tasks(args.tasks, vocab)
    policies = _policies(args)
    rows = bench_mod.run_benchmark(tasks, draft, target, policies,
                                   _engine_config(args), seed=args.seed,
                                   jobs=args.jobs)
    report = bench_mod.emit_report(rows, fmt=args.format)
    with open(args.out, "w") as f:
        f.write(report)
    _write_manifest(args.out, "bench", _manifest_options(args))
    print(report, end="")
    return 0


def cmd_record_trace(args) -> int:
    vocab = build_vocab(args.max_value)
    target = resolve_model(args.target_model, vocab, "target")
    draft = resolve_model(args.draft_model, vocab, "draft")
    tasks = load_tasks(args.tasks, vocab)
    if not 0 <= args.task_index < len(tasks):
        raise DataError(f"task index {args.task_index} out of range")
    task = tasks[args.task_index]
    response = rollout(target, task.prompt.tokens, task.max_response_len)
    seq = TokenSequence(task.prompt.tokens + tuple(response), len(task.prompt.tokens))
    top_m = args.top_m if args.top_m > 0 else vocab.size
    trace = record_trace(draft, target, seq, top_m)
    save_trace(args.out, trace)
    _write_manifest(args.out, "record-trace", _manifest_options(args))
    print(f"recorded {len(trace.records)} positions to {args.out}")
    return 0


def _add_common(p, model_flags=True):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-value", type=int, default=99,
                   help="largest numeral in the task vocabulary")
    if model_flags:
        p.add_argument("--draft-model", required=True,
                       help="model spec string or JSON spec file")
        p.add_argument("--target-model", required=True)
        p.add_argument("--tasks", required=True, help="task set file")
        p.add_argument("--temperature", type=float, default=0.0)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="specjudge",
                     description="lossy speculative decoding with a learned judge")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-tasks", help="generate arithmetic tasks")
    _add_common(p, model_flags=False)
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--num-steps", default="2,3")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_tasks)

    p = sub.add_parser("gen-corpus", help="generate the n-gram training corpus")
    _add_common(p, model_flags=False)
    p.add_argument("--num-steps", default="2,3")
    p.add_argument("--variants", type=int, default=3)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("mine", help="mine labeled mismatch records")
    _add_common(p)
    p.add_argument("--naive", action="store_true",
                   help="isolated per-mismatch labeling baseline")
    p.add_argument("--max-rollbacks", type=int, default=None)
    p.add_argument("--remote-url", default=None)
    p.add_argument("--remote-model", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mine)

    p = sub.add_parser("train-judge", help="train the importance classifier")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dataset", required=True)
    p.add_argument("--token-source", default="draft_token",
                   choices=["prev", "draft_token"])
    p.add_argument("--model-source", default="both",
                   choices=["draft", "target", "both"])
    p.add_argument("--target-recall", type=float, default=0.90)
    p.add_argument("--max-iters", type=int, default=500)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_judge)

    p = sub.add_parser("decode", help="speculative decoding over a task set")
    _add_common(p)
    p.add_argument("--window", type=int, default=64)
    p.add_argument("--max-tokens", type=int, default=256)
    p.add_argument("--policy", default="lossless")
    p.add_argument("--topk", default="1")
    p.add_argument("--judge", default=None)
    p.add_argument("--threshold", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("bench", help="accuracy/acceptance benchmark rows")
    _add_common(p)
    p.add_argument("--window", type=int, default=64)
    p.add_argument("--max-tokens", type=int, default=256)
    p.add_argument("--policy", default="lossless",
                   help="comma list: lossless,topk,judge")
    p.add_argument("--topk", default="1",
                   help="comma list of K values for the topk policy")
    p.add_argument("--judge", default=None)
    p.add_argument("--threshold", default=None,
                   help="comma list of judge thresholds")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--format", default="csv", choices=["csv", "jsonl"])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("record-trace", help="record both models along one task")
    _add_common(p)
    p.add_argument("--task-index", type=int, default=0)
    p.add_argument("--top-m", type=int, default=0,
                   help="logits kept per position (0 means the full vocab)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_record_trace)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except RemoteError as e:
        print(f"remote error: {e}", file=sys.stderr)
        return 3
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
