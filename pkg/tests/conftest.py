import numpy as np
import pytest

from dualmode.dualgrpo import RolloutBatch
from dualmode.policy import PolicyDims, init_params, stack_instances
from dualmode.synthenv import EnvConfig, generate_dataset


@pytest.fixture
def env():
    return EnvConfig(seed=11)


@pytest.fixture
def instances(env):
    return generate_dataset(env, 60, seed=5)


def small_dims(env=None, hidden=6, horizon=1):
    env = env or EnvConfig()
    return PolicyDims(env.d_q, env.d_p, hidden, env.vocab_answers + 2, horizon)


def random_params(seed, dims, scale=0.5):
    """Parameters with larger weights than init so gradients are not tiny."""
    p = init_params(seed, dims)
    rng = np.random.default_rng(seed + 1000)
    return p.replace(theta=rng.normal(0.0, scale, dims.n_params))


def random_batch(rng, params, instances, group_size, answer_length=1):
    """Rollout batch with arbitrary valid tokens and binary rewards."""
    dims = params.dims
    Q, P, C = stack_instances(instances)
    Q, P, C = (np.repeat(a, group_size, axis=0) for a in (Q, P, C))
    n = Q.shape[0]
    pfx = rng.choice([dims.general_token, dims.personalized_token], size=n)
    ans = rng.integers(0, dims.n_answers, size=(n, answer_length))
    tokens = np.concatenate([pfx[:, None], ans], axis=1)
    C = rng.uniform(-1, 1, size=C.shape)
    rewards = rng.integers(0, 2, size=n).astype(np.float64)
    return RolloutBatch(Q, P, C, tokens, rewards, group_size)


def hand_batch(params, instance, general, personalized, answers=None):
    """One forced group for ``instance`` with hand-set rewards, General rows first."""
    dims = params.dims
    n = len(general)
    Q, P, C = stack_instances([instance])
    Q, P, C = (np.repeat(a, 2 * n, axis=0) for a in (Q, P, C))
    pfx = np.array([dims.general_token] * n + [dims.personalized_token] * n)
    if answers is None:
        answers = np.arange(2 * n) % dims.n_answers
    tokens = np.column_stack([pfx, answers])
    rewards = np.array(list(general) + list(personalized), dtype=np.float64)
    return RolloutBatch(Q, P, C, tokens, rewards, 2 * n)


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES = {}


def record_criterion(number: int, passed: bool, detail: str) -> bool:
    ACCEPTANCE_LINES[number] = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
