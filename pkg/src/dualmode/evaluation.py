"""Analysis instruments: sliced accuracy, mode proportions, upper bound,
mixed-ratio sweeps, two-turn consistency and mode attribution.

Evaluators accept any policy object exposing

* ``mode_probs(Q, P, C, temperature) -> p_personalized``
* ``sample_answers(Q, P, C, modes, temperature, uniforms) -> answer tokens``

``PolicyParams`` provides both.
"""

from __future__ import annotations

import csv
import enum
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import synthenv
from .core import ConfigError, ModePrefix, TaskKind
from .policy import CONTEXT_DIM, DEFAULT_TEMPERATURE, PolicyParams, stack_instances, unpack

class DegenerateFitError(ValueError):
    """Only one class present in the regression labels."""


class TurnOrder(enum.Enum):
    GENERAL_FIRST = "GeneralFirst"
    PERSONALIZED_FIRST = "PersonalizedFirst"


@dataclass
class EvalReport:
    accuracy_by_slice: dict
    mode_proportion_by_slice: dict
    oracle_agreement: float
    upper_bound_by_slice: dict
    count_by_slice: dict = field(default_factory=dict)
    accuracy: float = 0.0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "EvalReport":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def _uniforms_by_id(instances, seed: int, width: int, salt: int) -> np.ndarray:
    """Per-instance uniforms keyed by instance id, so results ignore dataset order."""
    return np.stack([
        np.random.default_rng([seed, salt, inst.id]).random(width) for inst in instances
    ])


def _choose_modes(p_pm: np.ndarray, u: np.ndarray) -> np.ndarray:
    # same rule as policy.sample_batch: Personalized iff u lands past p_general
    return (u > 1.0 - p_pm).astype(np.int64)


def evaluate(policy, dataset, samples_per_instance: int = 1,
             temperature: float = DEFAULT_TEMPERATURE, seed: int = 0,
             forced_mode: Optional[ModePrefix] = None, answer_length: int = 1) -> EvalReport:
    """Free-sampling evaluation with an either-mode upper bound.

    For each repeat both modes' answers are drawn from shared uniforms and
    the selected mode picks one of them, which has the same distribution as
    sampling the prefix first. The upper bound counts a repeat as correct if
    either mode's answer is.
    """
    dataset = list(dataset)
    if not dataset:
        raise ConfigError("evaluate needs a non-empty dataset")
    if samples_per_instance < 1:
        raise ConfigError("samples_per_instance must be >= 1")
    s = samples_per_instance
    Q, P, C = stack_instances(dataset)
    n = len(dataset)
    U = _uniforms_by_id(dataset, seed, s * (answer_length + 1), salt=0xE7A1)
    U = U.reshape(n * s, answer_length + 1)
    Qr, Pr, Cr = (np.repeat(a, s, axis=0) for a in (Q, P, C))
    p_pm = np.repeat(policy.mode_probs(Q, P, C, temperature), s)
    if forced_mode is None:
        modes = _choose_modes(p_pm, U[:, 0])
    else:
        modes = np.full(n * s, 1 if forced_mode is ModePrefix.PERSONALIZED else 0)
    ans_gm = policy.sample_answers(Qr, Pr, Cr, np.zeros(n * s, dtype=np.int64), temperature, U)[:, 0]
    ans_pm = policy.sample_answers(Qr, Pr, Cr, np.ones(n * s, dtype=np.int64), temperature, U)[:, 0]
    correct = np.repeat(synthenv.correct_answers(dataset), s)
    hit_gm = ans_gm == correct
    hit_pm = ans_pm == correct
    hit = np.where(modes == 1, hit_pm, hit_gm)
    upper = hit_gm | hit_pm
    oracle = np.repeat(
        [1 if synthenv.oracle_mode(inst) is ModePrefix.PERSONALIZED else 0 for inst in dataset], s
    )
    slices = np.repeat([inst.slice for inst in dataset], s)
    acc, prop, ub, counts = {}, {}, {}, {}
    for name in sorted(set(slices)):
        mask = slices == name
        acc[name] = float(hit[mask].mean())
        prop[name] = float(modes[mask].mean())
        ub[name] = float(upper[mask].mean())
        counts[name] = int(mask.sum() // s)
    return EvalReport(
        accuracy_by_slice=acc,
        mode_proportion_by_slice=prop,
        oracle_agreement=float(np.mean(modes == oracle)),
        upper_bound_by_slice=ub,
        count_by_slice=counts,
        accuracy=float(hit.mean()),
    )


def mixed_ratio_sweep(policy, env_config: synthenv.EnvConfig, ratios, count: int,
                      samples_per_instance: int = 1, temperature: float = DEFAULT_TEMPERATURE,
                      seed: int = 0, forced_mode: Optional[ModePrefix] = None) -> list:
    """Overall accuracy on eval sets whose PersonalizedQA share is each ratio.

    The objective remainder splits evenly between aligned and unaligned
    personas. Every ratio uses the same sample seed, so two policies swept
    with the same arguments see identical data.
    """
    out = []
    for rho in ratios:
        rho = float(rho)
        if not 0.0 <= rho <= 1.0:
            raise ConfigError(f"ratio {rho} outside [0, 1]")
        half = (1.0 - rho) / 2.0
        cfg = env_config.with_mix((half, 1.0 - rho - half, rho))
        data = synthenv.generate_dataset(cfg, count, seed=seed)
        report = evaluate(policy, data, samples_per_instance, temperature, seed, forced_mode)
        out.append((rho, report.accuracy))
    return out


# ---------------------------------------------------------------------------
# two-turn episodes

def zero_context_weights(params: PolicyParams) -> PolicyParams:
    """Copy of ``params`` whose previous-turn input weights are exactly zero."""
    theta = params.theta.copy()
    W1, _, _, _ = unpack(theta, params.dims)
    W1[:, params.dims.d_q:params.dims.persona_offset] = 0.0
    return params.replace(theta=theta)


@dataclass(frozen=True)
class TwoTurnEpisodes:
    """Single-turn vs second-turn mode choices for every instance of the dataset."""

    ids: np.ndarray
    slices: np.ndarray
    kinds: np.ndarray
    single_mode: np.ndarray
    first_turn_mode: np.ndarray
    second_mode: np.ndarray

    @property
    def deviated(self) -> np.ndarray:
        return self.single_mode != self.second_mode


def two_turn_episodes(policy, dataset, temperature: float = DEFAULT_TEMPERATURE,
                      seed: int = 0) -> TwoTurnEpisodes:
    """Pair each instance with a preceding turn of the opposite task type.

    A personalized question follows an objective one and vice versa. The
    second turn sees a one-hot of the mode chosen in the first turn as its
    context feature. Mode choices reuse one uniform per instance in both
    settings, so any disagreement comes from the context feature alone.
    """
    dataset = sorted(dataset, key=lambda inst: inst.id)
    kinds = np.array([inst.kind is TaskKind.OBJECTIVE for inst in dataset])
    if kinds.all() or not kinds.any():
        raise ConfigError("two-turn episodes need both objective and personalized instances")
    Q, P, C = stack_instances(dataset)
    u = _uniforms_by_id(dataset, seed, 1, salt=0x2707)[:, 0]
    single = _choose_modes(policy.mode_probs(Q, P, C, temperature), u)
    objective_idx = np.flatnonzero(kinds)
    personal_idx = np.flatnonzero(~kinds)
    partner = np.empty(len(dataset), dtype=np.int64)
    for i, inst in enumerate(dataset):
        pool = personal_idx if kinds[i] else objective_idx
        partner[i] = pool[np.random.default_rng([seed, 0x9A17, inst.id]).integers(len(pool))]
    first_mode = single[partner]
    context = np.zeros((len(dataset), CONTEXT_DIM))
    context[np.arange(len(dataset)), first_mode] = 1.0
    second = _choose_modes(policy.mode_probs(Q, P, context, temperature), u)
    return TwoTurnEpisodes(
        ids=np.array([inst.id for inst in dataset]),
        slices=np.array([inst.slice for inst in dataset]),
        kinds=np.where(kinds, TaskKind.OBJECTIVE.value, TaskKind.PERSONALIZED_QA.value),
        single_mode=single,
        first_turn_mode=first_mode,
        second_mode=second,
    )


def two_turn_consistency(policy, dataset, order: TurnOrder,
                         temperature: float = DEFAULT_TEMPERATURE, seed: int = 0) -> float:
    """Mode-alignment rate of second turns for one dialogue order.

    ``GeneralFirst`` means an objective question precedes a personalized
    one; ``PersonalizedFirst`` the reverse.
    """
    ep = two_turn_episodes(policy, dataset, temperature, seed)
    second_kind = (TaskKind.PERSONALIZED_QA if order is TurnOrder.GENERAL_FIRST
                   else TaskKind.OBJECTIVE).value
    mask = ep.kinds == second_kind
    return float(np.mean(~ep.deviated[mask]))


def deviation_ratio(policy, dataset, temperature: float = DEFAULT_TEMPERATURE,
                    seed: int = 0) -> dict:
    """Per-slice percentage of second turns whose mode differs from the single-turn choice.

    Returns ``{slice: (percentage, deviations, total)}``.
    """
    ep = two_turn_episodes(policy, dataset, temperature, seed)
    out = {}
    for name in sorted(set(ep.slices)):
        mask = ep.slices == name
        dev = int(ep.deviated[mask].sum())
        out[name] = (100.0 * dev / int(mask.sum()), dev, int(mask.sum()))
    return out


def deviation_by_kind(policy, dataset, temperature: float = DEFAULT_TEMPERATURE,
                      seed: int = 0) -> dict:
    ep = two_turn_episodes(policy, dataset, temperature, seed)
    return {k: int(ep.deviated[ep.kinds == k].sum()) for k in sorted(set(ep.kinds))}


# ---------------------------------------------------------------------------
# mode attribution

@dataclass
class ModeRegression:
    feature_names: list
    weights: np.ndarray
    intercept: float
    losses: list
    ranked: list

    def top(self, k: int) -> list:
        return self.ranked[:k]


def _logistic_loss(X, y, w, b, l2):
    z = X @ w + b
    # log(1 + e^z) - y z, stable
    loss = np.mean(np.logaddexp(0.0, z) - y * z) + 0.5 * l2 * float(w @ w)
    return float(loss)


def fit_logistic(X: np.ndarray, y: np.ndarray, l2: float = 1e-3, max_iter: int = 2000,
                 lr: float = 4.0, tol: float = 1e-10):
    """L2-regularised logistic regression by gradient descent with step halving.

    Returns (weights, intercept, per-iteration losses). The intercept is not
    penalised.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(set(y.tolist())) < 2:
        raise DegenerateFitError("labels contain a single class")
    n, d = X.shape
    w = np.zeros(d)
    b = 0.0
    loss = _logistic_loss(X, y, w, b, l2)
    losses = [loss]
    step = lr
    for _ in range(max_iter):
        p = 0.5 * (1.0 + np.tanh(0.5 * (X @ w + b)))
        err = p - y
        gw = X.T @ err / n + l2 * w
        gb = float(err.mean())
        while step > 1e-12:
            w_new, b_new = w - step * gw, b - step * gb
            new_loss = _logistic_loss(X, y, w_new, b_new, l2)
            if new_loss <= loss:
                break
            step *= 0.5
        else:
            break
        improvement = loss - new_loss
        w, b, loss = w_new, b_new, new_loss
        losses.append(loss)
        if improvement < tol:
            break
    return w, b, losses


def mode_regression(policy, dataset, top_k: int = 10, l2: float = 1e-3,
                    temperature: float = DEFAULT_TEMPERATURE, seed: int = 0,
                    max_iter: int = 2000) -> ModeRegression:
    """Regress the sampled mode on concatenated query and persona features."""
    dataset = list(dataset)
    if len(dataset) < 2:
        raise ConfigError("mode_regression needs at least two instances")
    Q, P, C = stack_instances(dataset)
    u = _uniforms_by_id(dataset, seed, 1, salt=0x4E61)[:, 0]
    y = _choose_modes(policy.mode_probs(Q, P, C, temperature), u)
    X = np.hstack([Q, P])
    names = [f"q{i}" for i in range(Q.shape[1])] + [f"p{i}" for i in range(P.shape[1])]
    w, b, losses = fit_logistic(X, y, l2=l2, max_iter=max_iter)
    order = np.argsort(-np.abs(w), kind="stable")
    ranked = [(names[i], float(w[i])) for i in order[:top_k]]
    return ModeRegression(names, w, b, losses, ranked)


# ---------------------------------------------------------------------------
# tables

def _write_csv(path, header, rows) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def write_sweep_csv(path, sweeps: dict) -> None:
    """``sweeps`` maps a column label to a list of (ratio, accuracy)."""
    labels = list(sweeps)
    ratios = [r for r, _ in sweeps[labels[0]]]
    rows = []
    for i, rho in enumerate(ratios):
        rows.append([repr(rho)] + [repr(float(sweeps[k][i][1])) for k in labels])
    _write_csv(path, ["ratio"] + labels, rows)


def write_deviation_csv(path, table: dict) -> None:
    rows = []
    for name, (pct, dev, total) in table.items():
        kind, alignment = name.split("/")
        rows.append([kind, alignment, repr(float(pct)), dev, total])
    _write_csv(path, ["task_type", "setting", "deviation_ratio_pct", "deviations", "total"], rows)


def write_regression_csv(path, result: ModeRegression) -> None:
    _write_csv(path, ["rank", "feature", "weight"],
               [[i + 1, name, repr(w)] for i, (name, w) in enumerate(result.ranked)])
