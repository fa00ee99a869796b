"""Speculative decoding engine: policies, cycle accounting, stop conditions."""

import numpy as np
import pytest

from specjudge.engine import (CycleStats, DecodeResult, EngineConfig,
                              JudgePolicy, LosslessPolicy, TopKPolicy,
                              accepted_per_cycle, draft_window, spec_decode,
                              verify_window)
from specjudge.judge import FeatureConfig, JudgeModel
from specjudge.lm import DataError, Vocab
from specjudge.sampling import RandomState, rollout
from specjudge.tasks import gen_arithmetic_task
from specjudge.toymodels import ScriptedModel


@pytest.fixture()
def chain_vocab():
    return Vocab(("a", "b", "c", "</s>"), eos_id=3)


@pytest.fixture()
def chain_model(chain_vocab):
    # deterministic continuation a -> b c b c </s>
    script = {(0,): 1, (0, 1): 2, (0, 1, 2): 1, (0, 1, 2, 1): 2,
              (0, 1, 2, 1, 2): 3}
    return ScriptedModel(chain_vocab, script)


def constant_judge(dim):
    # zero weights score exactly 0.5 everywhere
    return JudgeModel(weights=np.zeros(dim), bias=0.0,
                      feature_config=FeatureConfig(), C=1.0)


def test_identical_models_accept_whole_window(chain_model):
    config = EngineConfig(window=8, max_tokens=16)
    result = spec_decode((0,), chain_model, chain_model, LosslessPolicy(), config)
    assert result.response == (1, 2, 1, 2, 3)
    assert len(result.cycles) == 1
    stats = result.cycles[0]
    assert stats.drafted == stats.accepted_draft == 5
    assert not stats.correction_emitted
    assert not stats.bonus_emitted  # window already ended at EOS
    assert accepted_per_cycle(result.cycles) == 5.0


def test_window_one_gets_a_bonus_every_full_cycle(chain_model):
    config = EngineConfig(window=1, max_tokens=16)
    result = spec_decode((0,), chain_model, chain_model, LosslessPolicy(), config)
    assert result.response == (1, 2, 1, 2, 3)
    assert len(result.cycles) == 3  # 2 + 2 + 1 tokens
    assert [c.bonus_emitted for c in result.cycles] == [True, True, False]
    assert accepted_per_cycle(result.cycles) == pytest.approx(5 / 3)


def test_accepted_per_cycle_hand_cases():
    full = CycleStats(drafted=64, accepted_draft=64, judge_overrides=0,
                      correction_emitted=False, bonus_emitted=True)
    assert accepted_per_cycle([full]) == 65.0
    rejected = CycleStats(drafted=8, accepted_draft=0, judge_overrides=0,
                          correction_emitted=True, bonus_emitted=False)
    assert accepted_per_cycle([rejected]) == 1.0
    partial = CycleStats(drafted=8, accepted_draft=3, judge_overrides=0,
                         correction_emitted=True, bonus_emitted=False)
    assert accepted_per_cycle([full, partial]) == pytest.approx((65 + 4) / 2)
    with pytest.raises(DataError):
        accepted_per_cycle([])


def test_every_cycle_emits_at_least_one_token(pipeline, eval_tasks):
    for task in eval_tasks[:5]:
        config = EngineConfig(window=8, max_tokens=min(64, task.max_response_len))
        result = spec_decode(task.prompt.tokens, pipeline.draft, pipeline.target,
                             LosslessPolicy(), config)
        emitted = [c.accepted_draft + int(c.correction_emitted)
                   + int(c.bonus_emitted) for c in result.cycles]
        assert all(n >= 1 for n in emitted)
        assert sum(emitted) == len(result.response) <= config.max_tokens
        assert result.response[-1] == pipeline.vocab.eos_id \
            or len(result.response) == config.max_tokens


def test_window_final_mismatch_topk_keeps_judge_hands_back(chain_vocab):
    target = ScriptedModel(chain_vocab, {(0,): 1, (0, 2): 1},
                           name="target")
    draft = ScriptedModel(chain_vocab, {(0,): 2}, name="draft")
    config = EngineConfig(window=1, max_tokens=8)

    lossless = spec_decode((0,), draft, target, LosslessPolicy(), config)
    assert lossless.response == (1, 3)
    assert lossless.cycles[0].correction_emitted

    topk = spec_decode((0,), draft, target, TopKPolicy(k=4), config)
    assert topk.response == (2, 1, 3)
    assert topk.cycles[0].judge_overrides == 1
    assert topk.cycles[0].accepted_draft == 1

    # a permissive judge still cannot keep the final drafted position
    judge = JudgePolicy(constant_judge(6), threshold=0.9)
    judged = spec_decode((0,), draft, target, judge, config)
    assert judged.response == lossless.response
    assert all(c.judge_overrides == 0 for c in judged.cycles)


def test_topk_one_matches_lossless(pipeline, eval_tasks):
    for task in eval_tasks[:6]:
        config = EngineConfig(window=8, max_tokens=min(64, task.max_response_len))
        a = spec_decode(task.prompt.tokens, pipeline.draft, pipeline.target,
                        LosslessPolicy(), config)
        b = spec_decode(task.prompt.tokens, pipeline.draft, pipeline.target,
                        TopKPolicy(k=1), config)
        assert a.response == b.response
        assert [vars(c) for c in a.cycles] == [vars(c) for c in b.cycles]


def test_tiny_threshold_judge_matches_lossless(pipeline, judged, eval_tasks):
    policy = JudgePolicy(judged.judge, threshold=1e-9)
    for task in eval_tasks[:6]:
        config = EngineConfig(window=8, max_tokens=min(64, task.max_response_len))
        a = spec_decode(task.prompt.tokens, pipeline.draft, pipeline.target,
                        LosslessPolicy(), config)
        b = spec_decode(task.prompt.tokens, pipeline.draft, pipeline.target,
                        policy, config)
        assert a.response == b.response


def test_constant_judge_threshold_sides(pipeline, eval_tasks):
    judge = constant_judge(37)
    overrides = 0
    for task in eval_tasks[:10]:
        config = EngineConfig(window=8, max_tokens=min(64, task.max_response_len))
        lossless = spec_decode(task.prompt.tokens, pipeline.draft,
                               pipeline.target, LosslessPolicy(), config)
        strict = spec_decode(task.prompt.tokens, pipeline.draft, pipeline.target,
                             JudgePolicy(judge, threshold=0.1), config)
        assert strict.response == lossless.response
        assert all(c.judge_overrides == 0 for c in strict.cycles)
        loose = spec_decode(task.prompt.tokens, pipeline.draft, pipeline.target,
                            JudgePolicy(judge, threshold=0.9), config)
        overrides += sum(c.judge_overrides for c in loose.cycles)
    assert overrides >= 1  # 0.5 < 0.9 keeps every non-final mismatch


def test_engine_config_validation():
    with pytest.raises(DataError):
        EngineConfig(window=0)
    with pytest.raises(DataError):
        EngineConfig(max_tokens=0)
    with pytest.raises(DataError):
        EngineConfig(temperature=-0.1)
    with pytest.raises(DataError):
        EngineConfig(temperature=0.5)  # sampling needs a RandomState
    EngineConfig(temperature=0.5, state=RandomState(0))


def test_bad_judge_threshold_fails_before_decoding(chain_model):
    policy = JudgePolicy(constant_judge(6), threshold=1.5)
    with pytest.raises(DataError):
        spec_decode((0,), chain_model, chain_model, policy,
                    EngineConfig(window=4, max_tokens=8))


def test_structural_validation(chain_vocab, chain_model):
    other = ScriptedModel(Vocab(("x", "</s>"), eos_id=1), {})
    with pytest.raises(DataError):
        spec_decode((0,), chain_model, other, LosslessPolicy(), EngineConfig())
    with pytest.raises(DataError):
        spec_decode((), chain_model, chain_model, LosslessPolicy(), EngineConfig())
    with pytest.raises(DataError):
        draft_window(chain_model, (0,), 0, EngineConfig())
    window = draft_window(chain_model, (0,), 2, EngineConfig())
    with pytest.raises(DataError):
        verify_window(chain_model, (), window, LosslessPolicy(), EngineConfig())


def test_draft_window_stops_after_eos(chain_model):
    window = draft_window(chain_model, (0,), 8, EngineConfig())
    assert window.tokens == [1, 2, 1, 2, 3]
    assert len(window.probs) == 5


def test_max_tokens_suppresses_the_bonus(chain_model):
    config = EngineConfig(window=8, max_tokens=2)
    result = spec_decode((0,), chain_model, chain_model, LosslessPolicy(), config)
    assert result.response == (1, 2)
    assert len(result.cycles) == 1
    assert result.cycles[0].bonus_emitted is False


def test_sampled_decode_follows_the_seeded_target_path(pipeline):
    task = gen_arithmetic_task(9000, 2, pipeline.vocab)
    budget = min(64, task.max_response_len)
    for temperature, state_seed in ((0.0, None), (0.8, 11)):
        state = RandomState(state_seed) if state_seed is not None else None
        config = EngineConfig(window=8, max_tokens=budget,
                              temperature=temperature, state=state)
        result = spec_decode(task.prompt.tokens, pipeline.draft, pipeline.target,
                             LosslessPolicy(), config)
        reference = rollout(pipeline.target, task.prompt.tokens, budget,
                            temperature,
                            RandomState(state_seed) if state_seed is not None
                            else None)
        assert list(result.response) == reference


def test_decode_result_response_view(chain_model):
    result = spec_decode((0,), chain_model, chain_model, LosslessPolicy(),
                         EngineConfig(window=4, max_tokens=8))
    assert isinstance(result, DecodeResult)
    assert result.sequence.tokens == (0,) + result.response
    assert result.sequence.prompt == (0,)