"""Synthetic dual-mode task environment.

Feature layout::

    query   = [task cue | domain code (n_domains) | content]
    persona = [domain code (n_domains) | signal]

The task cue is +1 for objective questions and -1 for personalized ones.
Objective answers are the argmax bucket of a fixed random projection of the
query content. Persona signals are noisy codewords from a fixed +/-1
codebook: an aligned persona shares the query's domain and carries the
codeword of the objective answer, an unaligned persona comes from another
domain and carries the codeword of a decoy. PersonalizedQA personas carry a
uniform signal and their answer is the codebook argmax of that signal.

The projection and codebook (the "world") depend only on ``EnvConfig.seed``
so that training and evaluation splits drawn with different sample seeds
share the same answer keys.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import lru_cache
from typing import Optional

import numpy as np

from .core import (
    AlignmentCondition,
    ConfigError,
    ModePrefix,
    TaskInstance,
    TaskKind,
    Trajectory,
)

MIX_SLOTS = ("Objective/Unaligned", "Objective/Aligned", "PersonalizedQA/Aligned")


@dataclass(frozen=True)
class EnvConfig:
    d_q: int = 8
    d_p: int = 8
    vocab_answers: int = 10
    mix: tuple = (1 / 3, 1 / 3, 1 / 3)
    hint_strength: float = 0.8
    noise: float = 0.2
    n_domains: int = 4
    seed: Optional[int] = None

    def __post_init__(self):
        mix = tuple(float(m) for m in self.mix)
        object.__setattr__(self, "mix", mix)
        if len(mix) != 3:
            raise ConfigError("env.mix must have three entries (unaligned, aligned, personalized)")
        if any(m < 0 for m in mix) or abs(sum(mix) - 1.0) > 1e-12:
            raise ConfigError(f"env.mix must be non-negative and sum to 1, got {mix}")
        if not 0.0 <= self.hint_strength <= 1.0:
            raise ConfigError("env.hint_strength must lie in [0, 1]")
        if self.noise < 0:
            raise ConfigError("env.noise must be non-negative")
        if self.n_domains < 2:
            raise ConfigError("env.n_domains must be at least 2 so unaligned personas exist")
        if self.d_q - 1 - self.n_domains < 1:
            raise ConfigError("env.d_q leaves no query content dimensions")
        if 2 ** (self.d_p - self.n_domains) < self.vocab_answers:
            raise ConfigError("env.d_p leaves too few signal dimensions for a distinct codebook")
        if self.vocab_answers < 2:
            raise ConfigError("env.vocab_answers must be at least 2")

    @property
    def content_dim(self) -> int:
        return self.d_q - 1 - self.n_domains

    @property
    def signal_dim(self) -> int:
        return self.d_p - self.n_domains

    def with_mix(self, mix) -> "EnvConfig":
        return replace(self, mix=tuple(mix))


@dataclass(frozen=True, eq=False)
class World:
    projection: np.ndarray  # (vocab_answers, content_dim)
    codebook: np.ndarray  # (vocab_answers, signal_dim), entries +/-1

    def query_answer(self, content: np.ndarray) -> int:
        return int(np.argmax(self.projection @ content))

    def decode(self, signal: np.ndarray) -> int:
        return int(np.argmax(self.codebook @ signal))


@lru_cache(maxsize=32)
def _world(seed: int, vocab: int, content_dim: int, signal_dim: int) -> World:
    rng = np.random.default_rng([seed, 0xC0DE])
    projection = rng.normal(size=(vocab, content_dim))
    patterns = rng.choice(2 ** signal_dim, size=vocab, replace=False)
    bits = (patterns[:, None] >> np.arange(signal_dim)) & 1
    codebook = np.where(bits == 1, 1.0, -1.0)
    projection.setflags(write=False)
    codebook.setflags(write=False)
    return World(projection, codebook)


def world(config: EnvConfig) -> World:
    seed = 0 if config.seed is None else int(config.seed)
    return _world(seed, config.vocab_answers, config.content_dim, config.signal_dim)


def _domain_code(domain: int, n_domains: int) -> np.ndarray:
    code = -np.ones(n_domains)
    code[domain] = 1.0
    return code


def generate_dataset(config: EnvConfig, count: int, seed: Optional[int] = None,
                     id_offset: int = 0) -> list:
    """Draw ``count`` instances; ``seed`` picks the sample stream (defaults to the world seed)."""
    if count < 1:
        raise ConfigError("count must be >= 1")
    w = world(config)
    base = 0 if config.seed is None else int(config.seed)
    rng = np.random.default_rng([base, 1 if seed is None else 2, 0 if seed is None else int(seed)])
    D, hs, noise = config.n_domains, config.hint_strength, config.noise
    slots = rng.choice(3, size=count, p=np.asarray(config.mix))
    out = []
    for i, slot in enumerate(slots):
        domain = int(rng.integers(D))
        content = rng.uniform(-1.0, 1.0, size=config.content_dim)
        objective = w.query_answer(content)
        cue = 1.0 if slot < 2 else -1.0
        q = np.concatenate([[cue], _domain_code(domain, D), content])
        jitter = rng.uniform(-1.0, 1.0, size=config.signal_dim)
        decoy = persona_answer = None
        if slot == 2:
            kind, alignment = TaskKind.PERSONALIZED_QA, AlignmentCondition.ALIGNED
            p_domain = int(rng.integers(D))
            signal = jitter
            persona_answer = w.decode(signal)
        elif slot == 1:
            kind, alignment = TaskKind.OBJECTIVE, AlignmentCondition.ALIGNED
            p_domain = domain
            signal = np.clip(hs * w.codebook[objective] + noise * jitter, -1.0, 1.0)
        else:
            kind, alignment = TaskKind.OBJECTIVE, AlignmentCondition.UNALIGNED
            p_domain = int((domain + rng.integers(1, D)) % D)
            decoy = int((objective + rng.integers(1, config.vocab_answers)) % config.vocab_answers)
            signal = np.clip(hs * w.codebook[decoy] + noise * jitter, -1.0, 1.0)
        p = np.concatenate([_domain_code(p_domain, D), signal])
        out.append(TaskInstance(
            id=id_offset + i,
            query_features=q,
            persona_features=p,
            kind=kind,
            alignment=alignment,
            objective_answer=objective,
            persona_answer=persona_answer,
            decoy_answer=decoy,
        ))
    return out


def without_persona(instance: TaskInstance) -> TaskInstance:
    """The NoPersona variant of an objective instance."""
    if instance.kind is not TaskKind.OBJECTIVE:
        raise ConfigError("only objective instances have a NoPersona variant")
    return TaskInstance(
        id=instance.id,
        query_features=instance.query_features,
        persona_features=np.zeros_like(instance.persona_features),
        kind=TaskKind.OBJECTIVE,
        alignment=AlignmentCondition.NO_PERSONA,
        objective_answer=instance.objective_answer,
    )


def score(instance: TaskInstance, trajectory: Trajectory) -> float:
    return 1.0 if trajectory.answer_tokens[0] == instance.correct_answer else 0.0


def correct_answers(instances) -> np.ndarray:
    return np.array([inst.correct_answer for inst in instances], dtype=np.int64)


def oracle_mode(instance: TaskInstance) -> ModePrefix:
    if instance.kind is TaskKind.PERSONALIZED_QA:
        return ModePrefix.PERSONALIZED
    if instance.alignment is AlignmentCondition.ALIGNED:
        return ModePrefix.PERSONALIZED
    return ModePrefix.GENERAL


def expert_answer(instance: TaskInstance, mode: ModePrefix) -> int:
    """The answer an expert restricted to ``mode``'s information would give.

    The general expert sees only the query. The personalized expert follows
    the persona signal, which is the objective answer on aligned personas
    and the decoy on unaligned ones.
    """
    if mode is ModePrefix.GENERAL:
        return instance.objective_answer
    if instance.kind is TaskKind.PERSONALIZED_QA:
        return instance.persona_answer
    if instance.alignment is AlignmentCondition.UNALIGNED:
        return instance.decoy_answer
    return instance.objective_answer
