"""Dual-mode autoregressive policy.

A two-layer tanh network scores the next token from
``[query, context, persona (masked in General mode), one-hot history]``.
Position 0 emits a mode prefix token; the remaining positions emit answer
tokens. The mode selector is the network's own position-0 distribution
restricted to the two prefix tokens, so there is no separate selector head.

The per-instance functions (``mode_distribution``, ``sample_trajectory``,
``sequence_logprob``, ``grad_weighted_logprob``) are thin wrappers over the
batched array functions that the trainers use.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .core import ConfigError, ContractError, ModePrefix, TaskInstance, Trajectory

DEFAULT_TEMPERATURE = 0.6
GREEDY_BELOW = 1e-6
INIT_SCALE = 0.05
CONTEXT_DIM = 2

_MAGIC = b"DUALCKPT"


@dataclass(frozen=True)
class PolicyDims:
    d_q: int
    d_p: int
    hidden: int
    vocab_size: int
    horizon: int = 1
    context: int = CONTEXT_DIM

    def __post_init__(self):
        for name in ("d_q", "d_p", "hidden", "horizon"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.vocab_size < 3:
            raise ConfigError(f"vocab_size must leave at least one answer token, got {self.vocab_size}")
        if self.context < 0:
            raise ConfigError("context must be non-negative")

    @property
    def n_answers(self) -> int:
        return self.vocab_size - 2

    @property
    def general_token(self) -> int:
        return ModePrefix.GENERAL.token_id(self.n_answers)

    @property
    def personalized_token(self) -> int:
        return ModePrefix.PERSONALIZED.token_id(self.n_answers)

    @property
    def persona_offset(self) -> int:
        return self.d_q + self.context

    @property
    def history_offset(self) -> int:
        return self.d_q + self.context + self.d_p

    @property
    def input_dim(self) -> int:
        return self.history_offset + self.horizon * self.vocab_size

    @property
    def n_params(self) -> int:
        h, v = self.hidden, self.vocab_size
        return h * self.input_dim + h + v * h + v

    def to_dict(self) -> dict:
        return {
            "d_q": self.d_q, "d_p": self.d_p, "hidden": self.hidden,
            "vocab_size": self.vocab_size, "horizon": self.horizon, "context": self.context,
        }


@dataclass(frozen=True, eq=False)
class PolicyParams:
    """Immutable parameter snapshot. Updates produce a new snapshot."""

    theta: np.ndarray
    dims: PolicyDims
    seed: int = 0
    stage: str = "init"

    def __post_init__(self):
        theta = np.array(self.theta, dtype=np.float64)
        if theta.shape != (self.dims.n_params,):
            raise ContractError(f"theta has length {theta.size}, dims require {self.dims.n_params}")
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)

    def replace(self, theta=None, stage=None) -> "PolicyParams":
        return PolicyParams(
            self.theta if theta is None else theta, self.dims, self.seed,
            self.stage if stage is None else stage,
        )

    def unpack(self):
        return unpack(self.theta, self.dims)

    # duck-typed interface read by the evaluators
    def mode_probs(self, Q, P, C=None, temperature=1.0):
        return mode_probs_batch(self, Q, P, C, temperature)

    def sample_answers(self, Q, P, C, modes, temperature, uniforms):
        return sample_answers_batch(self, Q, P, C, modes, temperature, uniforms)


def unpack(theta: np.ndarray, dims: PolicyDims):
    """Views (W1, b1, W2, b2) into a flat parameter vector."""
    h, d, v = dims.hidden, dims.input_dim, dims.vocab_size
    i = 0
    W1 = theta[i:i + h * d].reshape(h, d); i += h * d
    b1 = theta[i:i + h]; i += h
    W2 = theta[i:i + v * h].reshape(v, h); i += v * h
    b2 = theta[i:i + v]
    return W1, b1, W2, b2


def init_params(seed: int, dims: PolicyDims) -> PolicyParams:
    rng = np.random.default_rng(seed)
    theta = rng.uniform(-INIT_SCALE, INIT_SCALE, size=dims.n_params)
    return PolicyParams(theta, dims, seed=seed, stage="init")


# ---------------------------------------------------------------------------
# batched primitives

def stack_instances(instances, context=None):
    """Feature matrices (Q, P, C) for a list of instances."""
    Q = np.stack([inst.query_features for inst in instances])
    P = np.stack([inst.persona_features for inst in instances])
    if context is None:
        C = np.zeros((len(instances), CONTEXT_DIM))
    else:
        C = np.broadcast_to(np.asarray(context, dtype=np.float64), (len(instances), CONTEXT_DIM)).copy()
    return Q, P, C


def _context(C, n, dims):
    if C is None:
        return np.zeros((n, dims.context))
    return np.asarray(C, dtype=np.float64)


def encode(dims: PolicyDims, Q, P, C, prefix_tokens, history):
    """Network input for one position.

    ``history`` holds the tokens emitted so far, shape (N, t); an empty
    history is position 0, where the persona is always visible because the
    mode has not been chosen yet. Later positions mask the persona unless
    the prefix is Personalized.
    """
    n = Q.shape[0]
    X = np.zeros((n, dims.input_dim))
    X[:, :dims.d_q] = Q
    X[:, dims.d_q:dims.persona_offset] = _context(C, n, dims)
    t = history.shape[1]
    if t == 0:
        X[:, dims.persona_offset:dims.history_offset] = P
    else:
        visible = (np.asarray(prefix_tokens) == dims.personalized_token).astype(np.float64)
        X[:, dims.persona_offset:dims.history_offset] = P * visible[:, None]
        rows = np.arange(n)
        for j in range(t):
            X[rows, dims.history_offset + j * dims.vocab_size + history[:, j]] = 1.0
    return X


def forward(theta: np.ndarray, dims: PolicyDims, X: np.ndarray):
    W1, b1, W2, b2 = unpack(theta, dims)
    H = np.tanh(X @ W1.T + b1)
    return H, H @ W2.T + b2


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _check_tokens(dims: PolicyDims, tokens: np.ndarray):
    if tokens.ndim != 2 or tokens.shape[1] < 2:
        raise ContractError("token array must be (N, L+1) with L >= 1")
    if tokens.shape[1] - 1 > dims.horizon:
        raise ContractError(f"answer length {tokens.shape[1] - 1} exceeds horizon {dims.horizon}")
    if np.any(tokens < 0) or np.any(tokens >= dims.vocab_size):
        raise ContractError("token out of vocabulary")
    pfx = tokens[:, 0]
    if np.any((pfx != dims.general_token) & (pfx != dims.personalized_token)):
        raise ContractError("position 0 must hold a prefix token")


def position_logits(params: PolicyParams, Q, P, C, tokens):
    """Logits and hidden activations for every position of every trajectory.

    Returns lists indexed by position; entry t holds (X_t, H_t, logits_t).
    """
    dims = params.dims
    out = []
    for t in range(tokens.shape[1]):
        X = encode(dims, Q, P, C, tokens[:, 0], tokens[:, :t])
        H, Z = forward(params.theta, dims, X)
        out.append((X, H, Z))
    return out


def token_logprobs_batch(params: PolicyParams, Q, P, C, tokens) -> np.ndarray:
    """Untempered log pi(token_t | ...) for each position, shape (N, L+1)."""
    tokens = np.asarray(tokens, dtype=np.int64)
    _check_tokens(params.dims, tokens)
    rows = np.arange(tokens.shape[0])
    lp = np.empty(tokens.shape, dtype=np.float64)
    for t, (_, _, Z) in enumerate(position_logits(params, Q, P, C, tokens)):
        lp[:, t] = log_softmax(Z)[rows, tokens[:, t]]
    return lp


def backprop_logits(params: PolicyParams, cache, dlogits) -> np.ndarray:
    """Gradient w.r.t. theta given d(objective)/d(logits) for each cached position.

    ``cache`` is the output of ``position_logits``; ``dlogits[t]`` has shape (N, V)
    or is None for positions that contribute nothing.
    """
    W1, b1, W2, b2 = params.unpack()
    gW1 = np.zeros_like(W1)
    gb1 = np.zeros_like(b1)
    gW2 = np.zeros_like(W2)
    gb2 = np.zeros_like(b2)
    for (X, H, _), dZ in zip(cache, dlogits):
        if dZ is None:
            continue
        gW2 += dZ.T @ H
        gb2 += dZ.sum(axis=0)
        dA = (dZ @ W2) * (1.0 - H * H)
        gW1 += dA.T @ X
        gb1 += dA.sum(axis=0)
    return np.concatenate([gW1.ravel(), gb1, gW2.ravel(), gb2])


def logprob_dlogits(Z: np.ndarray, tokens_t: np.ndarray, w: np.ndarray) -> np.ndarray:
    """d/dZ of sum_n w[n] * log_softmax(Z)[n, token[n]]."""
    dZ = -softmax(Z) * w[:, None]
    dZ[np.arange(Z.shape[0]), tokens_t] += w
    return dZ


def grad_weighted_batch(params: PolicyParams, Q, P, C, tokens, weights) -> np.ndarray:
    """Gradient of sum_n sum_t w[n, t] * log pi(token[n, t]) with respect to theta."""
    dims = params.dims
    tokens = np.asarray(tokens, dtype=np.int64)
    weights = np.asarray(weights, dtype=np.float64)
    _check_tokens(dims, tokens)
    if weights.shape != tokens.shape:
        raise ContractError(f"weights shape {weights.shape} does not match tokens {tokens.shape}")
    cache = position_logits(params, Q, P, C, tokens)
    dlogits = [
        logprob_dlogits(Z, tokens[:, t], weights[:, t]) if np.any(weights[:, t]) else None
        for t, (_, _, Z) in enumerate(cache)
    ]
    return backprop_logits(params, cache, dlogits)


def prefix_logits_batch(params: PolicyParams, Q, P, C=None) -> np.ndarray:
    """Position-0 logits of (General, Personalized), shape (N, 2)."""
    dims = params.dims
    X = encode(dims, Q, P, C, np.zeros(Q.shape[0], dtype=np.int64), np.zeros((Q.shape[0], 0), dtype=np.int64))
    _, Z = forward(params.theta, dims, X)
    return Z[:, [dims.general_token, dims.personalized_token]]


def _sigmoid(x):
    # tanh form: no overflow for large |x|
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def mode_probs_batch(params: PolicyParams, Q, P, C=None, temperature: float = 1.0) -> np.ndarray:
    """Probability of the Personalized prefix after restricting to prefix tokens."""
    z = prefix_logits_batch(params, Q, P, C)
    if temperature < GREEDY_BELOW:
        return (z[:, 1] > z[:, 0]).astype(np.float64)
    return _sigmoid((z[:, 1] - z[:, 0]) / temperature)


def _pick(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw per row; ``u`` in [0, 1)."""
    cdf = np.cumsum(probs, axis=1)
    idx = (cdf < (u * cdf[:, -1])[:, None]).sum(axis=1)
    return np.minimum(idx, probs.shape[1] - 1)


def sample_batch(params: PolicyParams, Q, P, C, forced_tokens, temperature: float,
                 uniforms: np.ndarray):
    """Sample N trajectories given pre-drawn uniforms of shape (N, L+1).

    ``forced_tokens`` is None for free prefix selection or an array of
    prefix token ids. The prefix is drawn among the two prefix tokens and
    answers among answer tokens only; the recorded log-probabilities are the
    full-vocabulary tempered ones (untempered when greedy).
    """
    dims = params.dims
    n, steps = uniforms.shape
    if steps - 1 > dims.horizon or steps < 2:
        raise ContractError(f"answer length must be in [1, {dims.horizon}]")
    if temperature <= 0:
        raise ContractError("temperature must be positive")
    greedy = temperature < GREEDY_BELOW
    scale = 1.0 if greedy else temperature
    tokens = np.zeros((n, steps), dtype=np.int64)
    logprobs = np.zeros((n, steps))
    rows = np.arange(n)
    na = dims.n_answers
    for t in range(steps):
        X = encode(dims, Q, P, C, tokens[:, 0], tokens[:, :t])
        _, Z = forward(params.theta, dims, X)
        lp = log_softmax(Z / scale)
        if t == 0:
            if forced_tokens is not None:
                choice = np.broadcast_to(np.asarray(forced_tokens, dtype=np.int64), (n,))
            else:
                sub = Z[:, na:]
                if greedy:
                    local = np.argmax(sub, axis=1)
                else:
                    local = _pick(softmax(sub / scale), uniforms[:, 0])
                choice = na + local
        else:
            sub = Z[:, :na]
            choice = np.argmax(sub, axis=1) if greedy else _pick(softmax(sub / scale), uniforms[:, t])
        tokens[:, t] = choice
        logprobs[:, t] = lp[rows, choice]
    return tokens, logprobs


def sample_answers_batch(params: PolicyParams, Q, P, C, modes, temperature, uniforms):
    """Answer tokens (N, L) under the given per-row modes (0 = General, 1 = Personalized)."""
    dims = params.dims
    forced = np.where(np.asarray(modes) == 1, dims.personalized_token, dims.general_token)
    tokens, _ = sample_batch(params, Q, P, C, forced, temperature, uniforms)
    return tokens[:, 1:]


# ---------------------------------------------------------------------------
# per-instance API

def _rng(rng):
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


def _single(instance: TaskInstance, context=None):
    return stack_instances([instance], context)


def trajectory_tokens(params: PolicyParams, trajectory: Trajectory) -> np.ndarray:
    pfx = trajectory.mode.token_id(params.dims.n_answers)
    return np.array([[pfx, *trajectory.answer_tokens]], dtype=np.int64)


def mode_distribution(params: PolicyParams, instance: TaskInstance, context=None):
    """(p_general, p_personalized) from the restricted position-0 distribution."""
    Q, P, C = _single(instance, context)
    p_pm = float(mode_probs_batch(params, Q, P, C)[0])
    z = prefix_logits_batch(params, Q, P, C)[0]
    p_gm = float(_sigmoid(z[0] - z[1]))
    return p_gm, p_pm


def sample_trajectory(params: PolicyParams, instance: TaskInstance,
                      forced_mode: Optional[ModePrefix] = None,
                      temperature: float = DEFAULT_TEMPERATURE, rng=None,
                      answer_length: int = 1, context=None) -> Trajectory:
    rng = _rng(rng)
    Q, P, C = _single(instance, context)
    uniforms = rng.random((1, answer_length + 1))
    forced = None if forced_mode is None else forced_mode.token_id(params.dims.n_answers)
    tokens, logprobs = sample_batch(params, Q, P, C, forced, temperature, uniforms)
    mode = ModePrefix.from_token(int(tokens[0, 0]), params.dims.n_answers)
    return Trajectory(mode, tuple(int(t) for t in tokens[0, 1:]), np.minimum(logprobs[0], 0.0))


def sequence_logprob(params: PolicyParams, instance: TaskInstance, trajectory: Trajectory,
                     context=None) -> np.ndarray:
    Q, P, C = _single(instance, context)
    return token_logprobs_batch(params, Q, P, C, trajectory_tokens(params, trajectory))[0]


def grad_weighted_logprob(params: PolicyParams, instance: TaskInstance, trajectory: Trajectory,
                          per_token_weights, context=None) -> np.ndarray:
    w = np.asarray(per_token_weights, dtype=np.float64)
    if w.shape != (len(trajectory.answer_tokens) + 1,):
        raise ContractError(
            f"expected {len(trajectory.answer_tokens) + 1} weights, got shape {w.shape}"
        )
    Q, P, C = _single(instance, context)
    return grad_weighted_batch(params, Q, P, C, trajectory_tokens(params, trajectory), w[None, :])


def finite_difference_grad(fn: Callable[[np.ndarray], float], theta: np.ndarray,
                           step: float = 1e-6) -> np.ndarray:
    """Central differences of a scalar function of theta."""
    theta = np.array(theta, dtype=np.float64)
    grad = np.zeros_like(theta)
    for i in range(theta.size):
        orig = theta[i]
        theta[i] = orig + step
        f_plus = fn(theta)
        theta[i] = orig - step
        f_minus = fn(theta)
        theta[i] = orig
        grad[i] = (f_plus - f_minus) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """max |a - n| / max(|a|, |n|, floor), taken over the whole vector scale."""
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric)) / scale)


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path, params: PolicyParams) -> None:
    header = json.dumps(
        {"dims": params.dims.to_dict(), "seed": params.seed, "stage": params.stage},
        sort_keys=True,
    ).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(params.theta.astype("<f8").tobytes())


def load_checkpoint(path) -> PolicyParams:
    raw = Path(path).read_bytes()
    if raw[:len(_MAGIC)] != _MAGIC:
        raise ContractError(f"{path}: not a policy checkpoint")
    i = len(_MAGIC)
    (hlen,) = struct.unpack("<I", raw[i:i + 4])
    i += 4
    header = json.loads(raw[i:i + hlen].decode("utf-8"))
    i += hlen
    dims = PolicyDims(**header["dims"])
    theta = np.frombuffer(raw[i:], dtype="<f8").astype(np.float64)
    return PolicyParams(theta, dims, seed=header["seed"], stage=header["stage"])
