import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualmode.core import AlignmentCondition, ConfigError, ModePrefix, TaskKind, Trajectory
from dualmode.synthenv import (
    EnvConfig,
    expert_answer,
    generate_dataset,
    oracle_mode,
    score,
    without_persona,
    world,
)


def _traj(answer):
    return Trajectory(ModePrefix.GENERAL, (answer,), np.zeros(2))


def test_degenerate_mix_gives_one_slice():
    data = generate_dataset(EnvConfig(seed=0, mix=(1, 0, 0)), 100)
    assert {d.slice for d in data} == {"Objective/Unaligned"}


def test_same_seed_same_dataset():
    cfg = EnvConfig(seed=4)
    a = generate_dataset(cfg, 50, seed=7)
    b = generate_dataset(cfg, 50, seed=7)
    assert [x.to_record() for x in a] == [x.to_record() for x in b]
    c = generate_dataset(cfg, 50, seed=8)
    assert [x.to_record() for x in a] != [x.to_record() for x in c]


def test_sample_streams_share_the_world():
    cfg = EnvConfig(seed=4)
    w = world(cfg)
    for inst in generate_dataset(cfg, 200, seed=1) + generate_dataset(cfg, 200, seed=2):
        content = inst.query_features[1 + cfg.n_domains:]
        assert inst.objective_answer == w.query_answer(content)


def test_linear_decoder_recovers_clean_aligned_hint():
    cfg = EnvConfig(seed=2, hint_strength=1.0, noise=0.0, mix=(0, 1, 0))
    w = world(cfg)
    data = generate_dataset(cfg, 500)
    signal = np.stack([d.persona_features[cfg.n_domains:] for d in data])
    decoded = np.argmax(signal @ w.codebook.T, axis=1)
    assert np.array_equal(decoded, [d.objective_answer for d in data])


def test_persona_answer_is_codebook_decode():
    cfg = EnvConfig(seed=3, mix=(0, 0, 1))
    w = world(cfg)
    for d in generate_dataset(cfg, 200):
        assert d.persona_answer == w.decode(d.persona_features[cfg.n_domains:])


def test_decoys_always_differ_and_domains_mismatch():
    cfg = EnvConfig(seed=5, mix=(1, 0, 0))
    D = cfg.n_domains
    for d in generate_dataset(cfg, 2000):
        assert d.decoy_answer != d.objective_answer
        assert np.argmax(d.query_features[1:1 + D]) != np.argmax(d.persona_features[:D])


def test_slice_proportions_match_mix():
    mix = (0.2, 0.3, 0.5)
    data = generate_dataset(EnvConfig(seed=1, mix=mix), 10_000)
    names = ["Objective/Unaligned", "Objective/Aligned", "PersonalizedQA/Aligned"]
    observed = np.array([sum(d.slice == n for d in data) for n in names])
    expected = np.array(mix) * len(data)
    chi2 = float(((observed - expected) ** 2 / expected).sum())
    assert chi2 < 13.8  # 99.9% quantile with 2 degrees of freedom


def test_score_definition():
    data = generate_dataset(EnvConfig(seed=0), 300)
    obj = next(d for d in data if d.kind is TaskKind.OBJECTIVE)
    pqa = next(d for d in data if d.kind is TaskKind.PERSONALIZED_QA)
    assert score(obj, _traj(obj.objective_answer)) == 1.0
    wrong = (pqa.persona_answer + 1) % 10
    assert score(pqa, _traj(wrong)) == 0.0
    assert score(pqa, _traj(pqa.persona_answer)) == score(pqa, _traj(pqa.persona_answer))


def test_random_answers_score_one_in_v():
    cfg = EnvConfig(seed=0)
    data = generate_dataset(cfg, 10_000)
    rng = np.random.default_rng(0)
    answers = rng.integers(0, cfg.vocab_answers, size=len(data))
    rewards = np.array([score(d, _traj(int(a))) for d, a in zip(data, answers)])
    p = 1 / cfg.vocab_answers
    se = np.sqrt(p * (1 - p) / len(data))
    assert abs(rewards.mean() - p) < 3 * se


def test_oracle_mode_by_slice():
    data = generate_dataset(EnvConfig(seed=0), 300)
    for d in data:
        want = ModePrefix.GENERAL if d.alignment is AlignmentCondition.UNALIGNED else ModePrefix.PERSONALIZED
        assert oracle_mode(d) is want
    bare = without_persona(next(d for d in data if d.kind is TaskKind.OBJECTIVE))
    assert bare.slice == "Objective/NoPersona"
    assert oracle_mode(bare) is ModePrefix.GENERAL


def test_expert_answers():
    data = generate_dataset(EnvConfig(seed=0), 300)
    for d in data:
        assert expert_answer(d, ModePrefix.GENERAL) == d.objective_answer
        pm = expert_answer(d, ModePrefix.PERSONALIZED)
        if d.kind is TaskKind.PERSONALIZED_QA:
            assert pm == d.persona_answer
        elif d.alignment is AlignmentCondition.UNALIGNED:
            assert pm == d.decoy_answer
        else:
            assert pm == d.objective_answer


def test_without_persona_rejects_personalized_qa():
    pqa = next(d for d in generate_dataset(EnvConfig(seed=0), 100) if d.kind is TaskKind.PERSONALIZED_QA)
    with pytest.raises(ConfigError):
        without_persona(pqa)


@pytest.mark.parametrize("kw", [
    dict(mix=(0.5, 0.5, 0.1)),
    dict(mix=(1.2, -0.2, 0.0)),
    dict(mix=(0.5, 0.5)),
    dict(hint_strength=1.5),
    dict(n_domains=1),
    dict(d_p=5, n_domains=4),
])
def test_env_config_validation(kw):
    with pytest.raises(ConfigError):
        EnvConfig(**kw)


def test_count_must_be_positive():
    with pytest.raises(ConfigError):
        generate_dataset(EnvConfig(), 0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 40))
def test_generated_instances_are_valid(seed, count):
    cfg = EnvConfig(seed=seed)
    data = generate_dataset(cfg, count, seed=seed + 1, id_offset=100)
    assert [d.id for d in data] == list(range(100, 100 + count))
    for d in data:
        assert np.all(np.abs(d.query_features) <= 1) and np.all(np.abs(d.persona_features) <= 1)
        assert 0 <= d.correct_answer < cfg.vocab_answers
        assert d.query_features[0] == (1.0 if d.kind is TaskKind.OBJECTIVE else -1.0)
