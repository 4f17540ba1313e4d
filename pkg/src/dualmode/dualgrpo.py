"""Stage 2: DualGRPO and its ablations.

Rollouts for a batch are held as flat arrays: row ``b * 2n + j`` is the
j-th trajectory of instance ``b``. Under prefix-forced sampling the first
n rows of each block are General and the last n Personalized.
"""

from __future__ import annotations

import csv
import enum
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import synthenv
from .core import (
    AdvantageAssignment,
    ConfigError,
    ModePrefix,
    RolloutGroup,
    Trajectory,
)
from .policy import (
    DEFAULT_TEMPERATURE,
    GREEDY_BELOW,
    PolicyParams,
    backprop_logits,
    log_softmax,
    logprob_dlogits,
    mode_probs_batch,
    position_logits,
    sample_batch,
    save_checkpoint,
    stack_instances,
    token_logprobs_batch,
)

log = logging.getLogger(__name__)

KL_ESTIMATORS = ("exact", "k3")
METRIC_COLUMNS = ("step", "mean_reward_gm", "mean_reward_pm", "p_personalized_mean", "kl", "loss")


class Variant(enum.Enum):
    DUAL_GRPO = "DualGRPO"
    NO_DUAL_ADV = "NoDualAdv"
    NO_DUAL_ADV_NO_PFX_SMP = "NoDualAdvNoPfxSmp"
    STANDARD_GRPO = "StandardGRPO"

    @property
    def forced(self) -> bool:
        return self in (Variant.DUAL_GRPO, Variant.NO_DUAL_ADV)

    @property
    def dual_advantage(self) -> bool:
        return self is Variant.DUAL_GRPO


@dataclass(frozen=True)
class RLConfig:
    n_per_mode: int = 4
    beta_prefix: float = 2.0
    kl_coeff: float = 0.04
    clip_eps: float = 0.2
    temperature: float = DEFAULT_TEMPERATURE
    lr: float = 0.1
    steps: int = 2000
    batch_size: int = 64
    pool_size: int = 20000
    inner_epochs: int = 1
    answer_length: int = 1
    scale_by_std: bool = False
    kl_estimator: str = "k3"
    variant: Variant = Variant.DUAL_GRPO
    checkpoint_every: int = 0
    seed: Optional[int] = None

    def __post_init__(self):
        if isinstance(self.variant, str):
            object.__setattr__(self, "variant", Variant(self.variant))
        if self.n_per_mode < 1:
            raise ConfigError("rl.n_per_mode must be >= 1")
        if self.beta_prefix < 1:
            raise ConfigError("rl.beta_prefix must be >= 1")
        if self.kl_coeff < 0:
            raise ConfigError("rl.kl_coeff must be >= 0")
        if self.clip_eps <= 0:
            raise ConfigError("rl.clip_eps must be positive")
        if self.temperature <= 0:
            raise ConfigError("rl.temperature must be positive")
        if self.lr < 0:
            raise ConfigError("rl.lr must be non-negative")
        if self.kl_estimator not in KL_ESTIMATORS:
            raise ConfigError(f"rl.kl_estimator must be one of {KL_ESTIMATORS}")
        if self.batch_size < 1 or self.inner_epochs < 1 or self.answer_length < 1:
            raise ConfigError("rl.batch_size, rl.inner_epochs and rl.answer_length must be >= 1")
        if self.pool_size < 1 or self.steps < 0 or self.checkpoint_every < 0:
            raise ConfigError("rl.pool_size must be >= 1, rl.steps and rl.checkpoint_every >= 0")

    @property
    def group_size(self) -> int:
        return 2 * self.n_per_mode


@dataclass(frozen=True)
class StepMetrics:
    step: int
    mean_reward_gm: float
    mean_reward_pm: float
    p_personalized_mean: float
    mode_entropy: float
    kl: float
    loss: float

    def row(self) -> list:
        return [self.step] + [repr(float(getattr(self, c))) for c in METRIC_COLUMNS[1:]]


# ---------------------------------------------------------------------------
# advantages for a single RolloutGroup

def intra_advantage(group: RolloutGroup) -> np.ndarray:
    """r - mean of its own mode, general trajectories first."""
    gm = np.array([t.reward for t in group.general_trajectories]) - group.mu_general
    pm = np.array([t.reward for t in group.personalized_trajectories]) - group.mu_personalized
    return np.concatenate([gm, pm])


def inter_advantage(group: RolloutGroup) -> np.ndarray:
    """Zero-sum gap between mode means, broadcast to every trajectory of the mode."""
    gap = group.mu_general - group.mu_personalized
    return np.concatenate([np.full(group.n, gap), np.full(group.n, -gap)])


def _per_token(composed, beta, length):
    return tuple(np.concatenate([[beta * c], np.full(length, c)]) for c in composed)


def compose_advantages(group: RolloutGroup, beta_prefix: float = 2.0) -> AdvantageAssignment:
    if beta_prefix < 1:
        raise ConfigError("beta_prefix must be >= 1")
    intra = intra_advantage(group)
    inter = inter_advantage(group)
    composed = intra + inter
    length = len(group.general_trajectories[0].answer_tokens)
    return AdvantageAssignment(intra, inter, composed, _per_token(composed, beta_prefix, length),
                               beta_prefix=beta_prefix)


def pooled_advantage(rewards) -> np.ndarray:
    """Standard group-relative centering over all samples of one prompt."""
    r = np.asarray(rewards, dtype=np.float64)
    return r - r.mean()


# ---------------------------------------------------------------------------
# batched advantages

def dual_advantages(rewards: np.ndarray, n: int, scale_by_std: bool = False):
    """(intra, inter) for rewards laid out as (B, 2n) blocks, General first."""
    r = rewards.reshape(-1, 2, n)
    mu = r.mean(axis=2, keepdims=True)
    intra = r - mu
    if scale_by_std:
        intra = intra / (r.std(axis=2, keepdims=True) + 1e-6)
    inter = np.broadcast_to(mu - mu[:, ::-1], r.shape)
    return intra.reshape(-1), np.ascontiguousarray(inter).reshape(-1)


def pooled_advantages(rewards: np.ndarray, group_size: int, scale_by_std: bool = False):
    r = rewards.reshape(-1, group_size)
    a = r - r.mean(axis=1, keepdims=True)
    if scale_by_std:
        a = a / (r.std(axis=1, keepdims=True) + 1e-6)
    return a.reshape(-1)


def token_advantages(rewards: np.ndarray, config: RLConfig) -> np.ndarray:
    """Per-token advantage matrix (N, L+1) for the configured variant."""
    L = config.answer_length
    if config.variant.dual_advantage:
        intra, inter = dual_advantages(rewards, config.n_per_mode, config.scale_by_std)
        composed = intra + inter
        out = np.repeat(composed[:, None], L + 1, axis=1)
        out[:, 0] = config.beta_prefix * composed
        return out
    pooled = pooled_advantages(rewards, config.group_size, config.scale_by_std)
    return np.repeat(pooled[:, None], L + 1, axis=1)


# ---------------------------------------------------------------------------
# rollouts

@dataclass(frozen=True, eq=False)
class RolloutBatch:
    """Flat rollouts for B instances with ``group_size`` trajectories each."""

    Q: np.ndarray
    P: np.ndarray
    C: np.ndarray
    tokens: np.ndarray
    rewards: np.ndarray
    group_size: int

    @property
    def n_groups(self) -> int:
        return self.tokens.shape[0] // self.group_size

    def modes(self, params: PolicyParams) -> np.ndarray:
        """1 where the prefix is Personalized."""
        return (self.tokens[:, 0] == params.dims.personalized_token).astype(np.int64)


def collect_rollouts(params: PolicyParams, instances, config: RLConfig,
                     rng: np.random.Generator, forced: Optional[bool] = None) -> RolloutBatch:
    forced = config.variant.forced if forced is None else forced
    n, g = config.n_per_mode, config.group_size
    Q, P, C = stack_instances(instances)
    Q, P, C = (np.repeat(a, g, axis=0) for a in (Q, P, C))
    rows = Q.shape[0]
    uniforms = rng.random((rows, config.answer_length + 1))
    forced_tokens = None
    if forced:
        block = np.array([params.dims.general_token] * n + [params.dims.personalized_token] * n)
        forced_tokens = np.tile(block, len(instances))
    tokens, _ = sample_batch(params, Q, P, C, forced_tokens, config.temperature, uniforms)
    correct = np.repeat(synthenv.correct_answers(instances), g)
    rewards = (tokens[:, 1] == correct).astype(np.float64)
    return RolloutBatch(Q, P, C, tokens, rewards, g)


def prefix_forced_rollout(params: PolicyParams, instance, n: int,
                          temperature: float = DEFAULT_TEMPERATURE, rng=None,
                          answer_length: int = 1) -> RolloutGroup:
    """Exactly n General and n Personalized trajectories for one instance, scored."""
    if n < 1:
        raise ConfigError("n must be >= 1")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    cfg = RLConfig(n_per_mode=n, temperature=temperature, answer_length=answer_length,
                   variant=Variant.DUAL_GRPO)
    batch = collect_rollouts(params, [instance], cfg, rng, forced=True)
    _, logprobs = _tempered_logprobs(params, batch, temperature)
    trajs = _to_trajectories(params, batch, logprobs)
    return RolloutGroup(instance.id, tuple(trajs[:n]), tuple(trajs[n:]))


def _tempered_logprobs(params, batch, temperature):
    # recompute the sampler's recorded log-probabilities for the sampled tokens
    scale = 1.0 if temperature < GREEDY_BELOW else temperature
    rows = np.arange(batch.tokens.shape[0])
    lp = np.empty(batch.tokens.shape)
    for t, (_, _, Z) in enumerate(position_logits(params, batch.Q, batch.P, batch.C, batch.tokens)):
        lp[:, t] = log_softmax(Z / scale)[rows, batch.tokens[:, t]]
    return batch.tokens, np.minimum(lp, 0.0)


def _to_trajectories(params, batch, logprobs):
    na = params.dims.n_answers
    return [
        Trajectory(ModePrefix.from_token(int(tok[0]), na), tuple(int(t) for t in tok[1:]), lp, float(r))
        for tok, lp, r in zip(batch.tokens, logprobs, batch.rewards)
    ]


def variant_rollout_and_advantage(params: PolicyParams, instance, config: RLConfig, rng=None):
    """Trajectories and per-token advantages for one instance under ``config.variant``."""
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    batch = collect_rollouts(params, [instance], config, rng)
    _, logprobs = _tempered_logprobs(params, batch, config.temperature)
    return _to_trajectories(params, batch, logprobs), token_advantages(batch.rewards, config)


# ---------------------------------------------------------------------------
# surrogate objective

def _k3_terms(logp, ref_logp):
    # sampled-token k3 estimate of KL(pi || ref) and its derivative in logp
    d = ref_logp - logp
    e = np.exp(d)
    return e - d - 1.0, 1.0 - e


def _reference_logprobs(ref_params: PolicyParams, batch: RolloutBatch):
    """Full-vocabulary reference log-probabilities at every position."""
    cache = position_logits(ref_params, batch.Q, batch.P, batch.C, batch.tokens)
    return [log_softmax(Z) for _, _, Z in cache]


def surrogate(params: PolicyParams, batch: RolloutBatch, advantages: np.ndarray,
              old_logp: np.ndarray, ref_logprobs, config: RLConfig):
    """Clipped surrogate minus KL penalty, averaged over every token of every rollout.

    ``ref_logprobs`` is the per-position list from ``_reference_logprobs``.
    With ``kl_estimator="exact"`` the penalty at each position is the full
    KL(pi || ref) over the vocabulary; ``"k3"`` uses the sampled-token
    estimator instead. Returns ``(value, gradient, mean_kl)``.
    """
    tokens = batch.tokens
    N, T = tokens.shape
    rows = np.arange(N)
    cache = position_logits(params, batch.Q, batch.P, batch.C, tokens)
    logp_full = [log_softmax(Z) for _, _, Z in cache]
    logp = np.stack([lp[rows, tokens[:, t]] for t, lp in enumerate(logp_full)], axis=1)

    ratio = np.exp(logp - old_logp)
    eps = config.clip_eps
    clipped = np.clip(ratio, 1.0 - eps, 1.0 + eps)
    unclipped_obj = ratio * advantages
    clipped_obj = clipped * advantages
    use_unclipped = unclipped_obj <= clipped_obj
    pg = np.where(use_unclipped, unclipped_obj, clipped_obj)
    # the clipped branch is flat in logp; inside the clip range both branches coincide
    dlogp = np.where(use_unclipped, ratio * advantages, 0.0)

    scale = 1.0 / (N * T)
    beta = config.kl_coeff
    dlogits = []
    if config.kl_estimator == "k3":
        ref_tok = np.stack([lr[rows, tokens[:, t]] for t, lr in enumerate(ref_logprobs)], axis=1)
        kl, dkl = _k3_terms(logp, ref_tok)
        dlogp = dlogp - beta * dkl
        for t, (_, _, Z) in enumerate(cache):
            dlogits.append(logprob_dlogits(Z, tokens[:, t], dlogp[:, t] * scale))
    else:
        kl = np.empty((N, T))
        for t, (_, _, Z) in enumerate(cache):
            lp, lr = logp_full[t], ref_logprobs[t]
            pi = np.exp(lp)
            diff = lp - lr
            kl[:, t] = (pi * diff).sum(axis=1)
            dkl = pi * (diff - kl[:, t][:, None])
            dlogits.append(logprob_dlogits(Z, tokens[:, t], dlogp[:, t] * scale) - beta * scale * dkl)
    value = float((pg - beta * kl).sum() * scale)
    grad = backprop_logits(params, cache, dlogits)
    return value, grad, float(kl.mean())


def update_from_rollouts(params: PolicyParams, batch: RolloutBatch, advantages: np.ndarray,
                         ref_params: PolicyParams, config: RLConfig):
    """Gradient ascent on the surrogate for ``config.inner_epochs`` passes.

    Returns (new_params, surrogate value at the rollout snapshot, KL at the snapshot).
    """
    old_logp = token_logprobs_batch(params, batch.Q, batch.P, batch.C, batch.tokens)
    ref_logprobs = _reference_logprobs(ref_params, batch)
    current = params
    first_value = first_kl = None
    for _ in range(config.inner_epochs):
        value, grad, kl = surrogate(current, batch, advantages, old_logp, ref_logprobs, config)
        if first_value is None:
            first_value, first_kl = value, kl
        current = current.replace(theta=current.theta + config.lr * grad)
    return current.replace(stage="rl"), first_value, first_kl


def rl_step(params: PolicyParams, batch, ref_params: PolicyParams, config: RLConfig,
            rng=None, step: int = 0):
    """Roll out, compute advantages for the variant, and update once."""
    if not batch:
        raise ConfigError("rl_step needs a non-empty batch")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    rollouts = collect_rollouts(params, batch, config, rng)
    advantages = token_advantages(rollouts.rewards, config)
    Q, P, C = stack_instances(batch)
    p_pm = mode_probs_batch(params, Q, P, C)
    new_params, value, kl = update_from_rollouts(params, rollouts, advantages, ref_params, config)
    modes = rollouts.modes(params)
    r = rollouts.rewards

    def _mean(mask):
        return float(r[mask].mean()) if np.any(mask) else math.nan

    with np.errstate(divide="ignore", invalid="ignore"):
        ent = -(p_pm * np.log(p_pm) + (1 - p_pm) * np.log(1 - p_pm))
    metrics = StepMetrics(
        step=step,
        mean_reward_gm=_mean(modes == 0),
        mean_reward_pm=_mean(modes == 1),
        p_personalized_mean=float(p_pm.mean()),
        mode_entropy=float(np.nan_to_num(ent).mean()),
        kl=kl,
        loss=-value,
    )
    return new_params, metrics


def train(params: PolicyParams, ref_params: PolicyParams, pool, config: RLConfig,
          metrics_path=None, checkpoint_dir=None, progress=None):
    """Run ``config.steps`` RL steps on batches drawn from ``pool``.

    Metrics rows are appended to ``metrics_path`` as they are produced.
    """
    pool = list(pool)
    if not pool:
        raise ConfigError("RL pool is empty")
    seed = 0 if config.seed is None else int(config.seed)
    rng = np.random.default_rng([seed, 0x5EED])
    fh = writer = None
    if metrics_path is not None:
        fh = Path(metrics_path).open("w", encoding="utf-8", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)
    history = []
    try:
        for step in range(config.steps):
            idx = rng.choice(len(pool), size=min(config.batch_size, len(pool)), replace=False)
            batch = [pool[i] for i in np.sort(idx)]
            params, metrics = rl_step(params, batch, ref_params, config, rng, step)
            history.append(metrics)
            if writer is not None:
                writer.writerow(metrics.row())
            if checkpoint_dir is not None and config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
                save_checkpoint(Path(checkpoint_dir) / f"rl_step{step + 1:06d}.ckpt", params)
            if progress is not None:
                progress(step, metrics)
    finally:
        if fh is not None:
            fh.close()
    return params.replace(stage=f"rl-{config.variant.value}"), history
