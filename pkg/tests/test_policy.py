import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_params, small_dims
from oracles import mlp_token_logprob, sequence_logprob_oracle
from dualmode.core import ConfigError, ContractError, ModePrefix, Trajectory
from dualmode.policy import (
    PolicyDims,
    PolicyParams,
    finite_difference_grad,
    grad_weighted_batch,
    grad_weighted_logprob,
    init_params,
    load_checkpoint,
    mode_distribution,
    mode_probs_batch,
    relative_error,
    sample_batch,
    sample_trajectory,
    save_checkpoint,
    sequence_logprob,
    stack_instances,
    token_logprobs_batch,
)


def _rand_tokens(rng, dims, n, length):
    pfx = rng.choice([dims.general_token, dims.personalized_token], size=n)
    ans = rng.integers(0, dims.n_answers, size=(n, length))
    return np.concatenate([pfx[:, None], ans], axis=1)


def test_init_is_seeded_and_small(env):
    dims = small_dims(env)
    a, b = init_params(3, dims), init_params(3, dims)
    assert np.array_equal(a.theta, b.theta)
    assert not np.array_equal(a.theta, init_params(4, dims).theta)
    assert np.max(np.abs(a.theta)) <= 0.05


def test_params_are_immutable(env):
    p = init_params(0, small_dims(env))
    with pytest.raises(ValueError):
        p.theta[0] = 1.0
    with pytest.raises(ContractError):
        PolicyParams(np.zeros(3), p.dims)


def test_dims_validation():
    with pytest.raises(ConfigError):
        PolicyDims(8, 8, 0, 12)
    with pytest.raises(ConfigError):
        PolicyDims(8, 8, 4, 2)


@pytest.mark.parametrize("horizon", [1, 3])
def test_logprobs_match_loop_oracle(env, instances, horizon):
    dims = small_dims(env, hidden=5, horizon=horizon)
    params = random_params(1, dims)
    rng = np.random.default_rng(0)
    batch = instances[:6]
    tokens = _rand_tokens(rng, dims, len(batch), horizon)
    Q, P, C = stack_instances(batch)
    C = rng.uniform(-1, 1, size=C.shape)
    got = token_logprobs_batch(params, Q, P, C, tokens)
    for i, inst in enumerate(batch):
        want = sequence_logprob_oracle(params.theta, dims, Q[i], P[i], C[i], tokens[i].tolist())
        np.testing.assert_allclose(got[i], want, atol=1e-12)


def test_general_mode_answers_ignore_persona(env, instances):
    dims = small_dims(env)
    params = random_params(2, dims)
    Q, P, C = stack_instances(instances[:10])
    tokens = np.column_stack([np.full(10, dims.general_token), np.arange(10) % dims.n_answers])
    P2 = np.random.default_rng(1).uniform(-1, 1, size=P.shape)
    a = token_logprobs_batch(params, Q, P, C, tokens)
    b = token_logprobs_batch(params, Q, P2, C, tokens)
    np.testing.assert_array_equal(a[:, 1], b[:, 1])
    assert np.all(a[:, 0] != b[:, 0])  # the selector itself sees the persona
    tokens[:, 0] = dims.personalized_token
    a = token_logprobs_batch(params, Q, P, C, tokens)
    b = token_logprobs_batch(params, Q, P2, C, tokens)
    assert np.all(a[:, 1] != b[:, 1])


def test_mode_distribution_sums_to_one(env, instances):
    params = random_params(3, small_dims(env), scale=3.0)
    for inst in instances[:20]:
        p_gm, p_pm = mode_distribution(params, inst)
        assert abs(p_gm + p_pm - 1.0) < 1e-12
        assert 0.0 <= p_pm <= 1.0


def test_mode_probs_greedy_and_tempered(env, instances):
    params = random_params(4, small_dims(env))
    Q, P, C = stack_instances(instances)
    p1 = mode_probs_batch(params, Q, P, C, 1.0)
    greedy = mode_probs_batch(params, Q, P, C, 0.0)
    assert set(np.unique(greedy)) <= {0.0, 1.0}
    np.testing.assert_array_equal(greedy, (p1 > 0.5).astype(float))
    cold = mode_probs_batch(params, Q, P, C, 0.5)
    assert np.all(np.abs(cold - 0.5) >= np.abs(p1 - 0.5) - 1e-15)


def test_sampling_emits_valid_tokens_and_respects_forcing(env, instances):
    dims = small_dims(env, horizon=2)
    params = random_params(5, dims, scale=2.0)
    rng = np.random.default_rng(0)
    Q, P, C = stack_instances(instances)
    n = len(instances)
    tokens, lp = sample_batch(params, Q, P, C, None, 1.0, rng.random((n, 3)))
    assert set(np.unique(tokens[:, 0])) <= {dims.general_token, dims.personalized_token}
    assert np.all(tokens[:, 1:] < dims.n_answers)
    assert np.all(lp <= 0)
    forced = np.full(n, dims.personalized_token)
    tokens, _ = sample_batch(params, Q, P, C, forced, 1.0, rng.random((n, 3)))
    assert np.all(tokens[:, 0] == dims.personalized_token)


def test_recorded_logprobs_match_recomputation_at_unit_temperature(env, instances):
    dims = small_dims(env)
    params = random_params(6, dims)
    Q, P, C = stack_instances(instances)
    tokens, lp = sample_batch(params, Q, P, C, None, 1.0, np.random.default_rng(1).random((len(instances), 2)))
    np.testing.assert_allclose(lp, token_logprobs_batch(params, Q, P, C, tokens), atol=1e-12)


def test_sample_trajectory_is_reproducible(env, instances):
    params = random_params(7, small_dims(env))
    a = sample_trajectory(params, instances[0], rng=3)
    b = sample_trajectory(params, instances[0], rng=3)
    assert a.mode is b.mode and a.answer_tokens == b.answer_tokens
    forced = sample_trajectory(params, instances[0], ModePrefix.GENERAL, rng=1)
    assert forced.mode is ModePrefix.GENERAL


def test_greedy_sampling_picks_argmax(env, instances):
    dims = small_dims(env)
    params = random_params(8, dims)
    inst = instances[0]
    traj = sample_trajectory(params, inst, temperature=1e-9, rng=0)
    Q, P, C = stack_instances([inst])
    lp0 = mlp_token_logprob(params.theta, dims, Q[0], P[0], C[0], None, [])
    assert traj.mode.token_id(dims.n_answers) == dims.n_answers + int(np.argmax(lp0[dims.n_answers:]))
    pfx = traj.mode.token_id(dims.n_answers)
    lp1 = mlp_token_logprob(params.theta, dims, Q[0], P[0], C[0], pfx, [pfx])
    assert traj.answer_tokens[0] == int(np.argmax(lp1[:dims.n_answers]))


def test_token_validation(env, instances):
    dims = small_dims(env)
    params = init_params(0, dims)
    Q, P, C = stack_instances(instances[:2])
    with pytest.raises(ContractError):
        token_logprobs_batch(params, Q, P, C, np.array([[0, 1], [0, 1]]))
    with pytest.raises(ContractError):
        token_logprobs_batch(params, Q, P, C, np.array([[10, 1, 2], [10, 1, 2]]))
    with pytest.raises(ContractError):
        sample_batch(params, Q, P, C, None, 0.6, np.zeros((2, 3)))
    traj = Trajectory(ModePrefix.GENERAL, (1,), np.zeros(2))
    with pytest.raises(ContractError):
        grad_weighted_logprob(params, instances[0], traj, [1.0, 1.0, 1.0])


def test_weighted_gradient_matches_finite_differences(env, instances):
    rng = np.random.default_rng(10)
    for trial in range(5):
        horizon = 1 + trial % 3
        dims = small_dims(env, hidden=4, horizon=horizon)
        params = random_params(trial, dims)
        batch = instances[trial * 3:trial * 3 + 3]
        Q, P, C = stack_instances(batch)
        tokens = _rand_tokens(rng, dims, len(batch), horizon)
        w = rng.normal(size=tokens.shape)

        def f(theta):
            return float((token_logprobs_batch(params.replace(theta=theta), Q, P, C, tokens) * w).sum())

        analytic = grad_weighted_batch(params, Q, P, C, tokens, w)
        numeric = finite_difference_grad(f, params.theta)
        assert relative_error(analytic, numeric) < 1e-6


def test_per_instance_gradient_is_batch_gradient(env, instances):
    dims = small_dims(env)
    params = random_params(11, dims)
    traj = sample_trajectory(params, instances[3], rng=0)
    w = np.array([2.0, -0.5])
    got = grad_weighted_logprob(params, instances[3], traj, w)
    Q, P, C = stack_instances([instances[3]])
    tokens = np.array([[traj.mode.token_id(dims.n_answers), *traj.answer_tokens]])
    np.testing.assert_array_equal(got, grad_weighted_batch(params, Q, P, C, tokens, w[None]))
    np.testing.assert_allclose(sequence_logprob(params, instances[3], traj),
                               token_logprobs_batch(params, Q, P, C, tokens)[0])


def test_checkpoint_round_trip(tmp_path, env):
    params = random_params(12, small_dims(env, horizon=2)).replace(stage="rl")
    path = tmp_path / "p.ckpt"
    save_checkpoint(path, params)
    back = load_checkpoint(path)
    assert np.array_equal(back.theta, params.theta)
    assert back.dims == params.dims and back.stage == "rl" and back.seed == params.seed
    path2 = tmp_path / "q.ckpt"
    save_checkpoint(path2, back)
    assert path.read_bytes() == path2.read_bytes()


def test_checkpoint_rejects_foreign_file(tmp_path):
    bad = tmp_path / "x.ckpt"
    bad.write_bytes(b"not a checkpoint")
    with pytest.raises(ContractError):
        load_checkpoint(bad)


def test_relative_error_floor():
    assert relative_error(np.zeros(3), np.zeros(3)) == 0.0
    assert relative_error(np.array([1.0]), np.array([1.1])) == pytest.approx(0.1 / 1.1)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.05, 5.0))
def test_token_distributions_normalize(seed, temperature):
    dims = PolicyDims(3, 3, 4, 6, 2)
    params = random_params(seed % 1000, dims, scale=2.0)
    rng = np.random.default_rng(seed)
    Q = rng.uniform(-1, 1, (4, 3))
    P = rng.uniform(-1, 1, (4, 3))
    p = mode_probs_batch(params, Q, P, None, temperature)
    assert np.all((p >= 0) & (p <= 1))
    tokens, lp = sample_batch(params, Q, P, None, None, temperature, rng.random((4, 3)))
    assert np.all(lp <= 0) and np.all(np.isfinite(lp))
    full = token_logprobs_batch(params, Q, P, None, tokens)
    assert np.all(full <= 0)
