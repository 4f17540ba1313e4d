"""Domain types shared by every stage of the pipeline.

Everything here is plain data: frozen dataclasses whose constructors check
their invariants. No training or sampling logic lives in this module.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np


class ContractError(ValueError):
    """A value violates a documented invariant."""


class ConfigError(ValueError):
    """Invalid configuration or arguments."""


class ModePrefix(enum.Enum):
    GENERAL = "General"
    PERSONALIZED = "Personalized"

    @property
    def other(self) -> "ModePrefix":
        return ModePrefix.PERSONALIZED if self is ModePrefix.GENERAL else ModePrefix.GENERAL

    def token_id(self, n_answers: int) -> int:
        """Reserved vocabulary id; the two prefix tokens follow the answer tokens."""
        return n_answers + (0 if self is ModePrefix.GENERAL else 1)

    @classmethod
    def from_token(cls, token: int, n_answers: int) -> "ModePrefix":
        if token == n_answers:
            return cls.GENERAL
        if token == n_answers + 1:
            return cls.PERSONALIZED
        raise ContractError(f"token {token} is not a prefix token")


MODES = (ModePrefix.GENERAL, ModePrefix.PERSONALIZED)


class TaskKind(enum.Enum):
    OBJECTIVE = "Objective"
    PERSONALIZED_QA = "PersonalizedQA"


class AlignmentCondition(enum.Enum):
    NO_PERSONA = "NoPersona"
    UNALIGNED = "Unaligned"
    ALIGNED = "Aligned"


def slice_name(kind: TaskKind, alignment: AlignmentCondition) -> str:
    return f"{kind.value}/{alignment.value}"


def _as_vector(values, name: str) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    if arr.ndim != 1:
        raise ContractError(f"{name} must be a 1-d vector")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class TaskInstance:
    """One synthetic (query, persona) item with its answer key.

    ``alignment`` is latent: the environment and evaluators read it, the
    policy never does. ``objective_answer`` is the bucket of the query
    projection; on PersonalizedQA items it is the depersonalized answer and
    is not what gets scored.
    """

    id: int
    query_features: np.ndarray
    persona_features: np.ndarray
    kind: TaskKind
    alignment: AlignmentCondition
    objective_answer: Optional[int] = None
    persona_answer: Optional[int] = None
    decoy_answer: Optional[int] = None

    def __post_init__(self):
        q = _as_vector(self.query_features, "query_features")
        p = _as_vector(self.persona_features, "persona_features")
        object.__setattr__(self, "query_features", q)
        object.__setattr__(self, "persona_features", p)
        if np.any(np.abs(q) > 1.0) or np.any(np.abs(p) > 1.0):
            raise ContractError("feature components must lie in [-1, 1]")
        if self.alignment is AlignmentCondition.NO_PERSONA and np.any(p != 0.0):
            raise ContractError("NoPersona instances need an all-zero persona vector")
        if self.kind is TaskKind.PERSONALIZED_QA:
            if self.alignment is not AlignmentCondition.ALIGNED:
                raise ContractError("PersonalizedQA instances are always Aligned")
            if self.persona_answer is None:
                raise ContractError("PersonalizedQA instances need persona_answer")
        elif self.objective_answer is None:
            raise ContractError("Objective instances need objective_answer")
        if self.decoy_answer is not None and self.decoy_answer == self.objective_answer:
            raise ContractError("decoy_answer must differ from objective_answer")
        if (
            self.kind is TaskKind.OBJECTIVE
            and self.alignment is AlignmentCondition.UNALIGNED
            and self.decoy_answer is None
        ):
            raise ContractError("Objective+Unaligned instances need decoy_answer")

    @property
    def slice(self) -> str:
        return slice_name(self.kind, self.alignment)

    @property
    def correct_answer(self) -> int:
        if self.kind is TaskKind.PERSONALIZED_QA:
            return self.persona_answer
        return self.objective_answer

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "query_features": self.query_features.tolist(),
            "persona_features": self.persona_features.tolist(),
            "kind": self.kind.value,
            "alignment": self.alignment.value,
            "objective_answer": self.objective_answer,
            "persona_answer": self.persona_answer,
            "decoy_answer": self.decoy_answer,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "TaskInstance":
        return cls(
            id=int(rec["id"]),
            query_features=rec["query_features"],
            persona_features=rec["persona_features"],
            kind=TaskKind(rec["kind"]),
            alignment=AlignmentCondition(rec["alignment"]),
            objective_answer=rec.get("objective_answer"),
            persona_answer=rec.get("persona_answer"),
            decoy_answer=rec.get("decoy_answer"),
        )


@dataclass(frozen=True, eq=False)
class Trajectory:
    """A sampled generation: prefix token at position 0, then answer tokens."""

    mode: ModePrefix
    answer_tokens: tuple
    token_logprobs: np.ndarray
    reward: float = 0.0

    def __post_init__(self):
        tokens = tuple(int(t) for t in self.answer_tokens)
        if len(tokens) < 1:
            raise ContractError("a trajectory needs at least one answer token")
        object.__setattr__(self, "answer_tokens", tokens)
        lp = _as_vector(self.token_logprobs, "token_logprobs")
        if lp.shape[0] != len(tokens) + 1:
            raise ContractError("token_logprobs needs one entry per token including the prefix")
        if np.any(lp > 0.0):
            raise ContractError("log-probabilities must be <= 0")
        object.__setattr__(self, "token_logprobs", lp)
        if not 0.0 <= self.reward <= 1.0:
            raise ContractError("reward must lie in [0, 1]")

    def with_reward(self, reward: float) -> "Trajectory":
        return Trajectory(self.mode, self.answer_tokens, self.token_logprobs, float(reward))


@dataclass(frozen=True, eq=False)
class RolloutGroup:
    """The 2n prefix-forced trajectories for one instance, split by mode."""

    instance_id: int
    general_trajectories: tuple
    personalized_trajectories: tuple
    mu_general: float = field(init=False)
    mu_personalized: float = field(init=False)

    def __post_init__(self):
        gm = tuple(self.general_trajectories)
        pm = tuple(self.personalized_trajectories)
        if len(gm) != len(pm):
            raise ContractError(
                f"unbalanced group: {len(gm)} general vs {len(pm)} personalized trajectories"
            )
        if len(gm) < 1:
            raise ContractError("a group needs n >= 1 trajectories per mode")
        if any(t.mode is not ModePrefix.GENERAL for t in gm):
            raise ContractError("general_trajectories must all carry the General prefix")
        if any(t.mode is not ModePrefix.PERSONALIZED for t in pm):
            raise ContractError("personalized_trajectories must all carry the Personalized prefix")
        object.__setattr__(self, "general_trajectories", gm)
        object.__setattr__(self, "personalized_trajectories", pm)
        object.__setattr__(self, "mu_general", float(np.mean([t.reward for t in gm])))
        object.__setattr__(self, "mu_personalized", float(np.mean([t.reward for t in pm])))

    @property
    def n(self) -> int:
        return len(self.general_trajectories)

    @property
    def trajectories(self) -> tuple:
        """General trajectories first, then personalized."""
        return self.general_trajectories + self.personalized_trajectories

    def mean(self, mode: ModePrefix) -> float:
        return self.mu_general if mode is ModePrefix.GENERAL else self.mu_personalized

    @classmethod
    def from_rewards(cls, general: Sequence[float], personalized: Sequence[float],
                     instance_id: int = 0, answer_length: int = 1) -> "RolloutGroup":
        """Build a group with placeholder tokens; handy for advantage arithmetic."""
        lp = np.zeros(answer_length + 1)
        toks = (0,) * answer_length
        return cls(
            instance_id,
            tuple(Trajectory(ModePrefix.GENERAL, toks, lp, float(r)) for r in general),
            tuple(Trajectory(ModePrefix.PERSONALIZED, toks, lp, float(r)) for r in personalized),
        )


@dataclass(frozen=True, eq=False)
class AdvantageAssignment:
    """Per-trajectory advantages, ordered like ``RolloutGroup.trajectories``."""

    intra: np.ndarray
    inter: np.ndarray
    composed: np.ndarray
    per_token: tuple
    beta_prefix: float = 1.0

    def __post_init__(self):
        intra = _as_vector(self.intra, "intra")
        inter = _as_vector(self.inter, "inter")
        composed = _as_vector(self.composed, "composed")
        if not (intra.shape == inter.shape == composed.shape):
            raise ContractError("intra, inter and composed must have equal length")
        if np.any(np.abs(composed - (intra + inter)) > 1e-12):
            raise ContractError("composed must equal intra + inter")
        per_token = tuple(_as_vector(v, "per_token") for v in self.per_token)
        if len(per_token) != composed.shape[0]:
            raise ContractError("per_token needs one vector per trajectory")
        for c, w in zip(composed, per_token):
            if w[0] != self.beta_prefix * c or np.any(w[1:] != c):
                raise ContractError("per_token must be beta*composed at the prefix, composed elsewhere")
        object.__setattr__(self, "intra", intra)
        object.__setattr__(self, "inter", inter)
        object.__setattr__(self, "composed", composed)
        object.__setattr__(self, "per_token", per_token)


def write_records(path, records: Iterable[dict]) -> None:
    """Write one JSON object per line."""
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True))
            fh.write("\n")


def read_records(path) -> list:
    with Path(path).open("r", encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def save_dataset(path, instances: Iterable[TaskInstance]) -> None:
    write_records(path, (inst.to_record() for inst in instances))


def load_dataset(path) -> list:
    instances = [TaskInstance.from_record(rec) for rec in read_records(path)]
    if instances:
        dq = {inst.query_features.shape[0] for inst in instances}
        dp = {inst.persona_features.shape[0] for inst in instances}
        if len(dq) != 1 or len(dp) != 1:
            raise ContractError(f"{path}: feature lengths differ across records")
    return instances
