"""Stage 1: mode-labelled demonstrations and supervised warm-up."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import synthenv
from .core import ConfigError, ContractError, ModePrefix, TaskKind, read_records, write_records
from .policy import (
    PolicyParams,
    grad_weighted_batch,
    mode_probs_batch,
    sample_answers_batch,
    stack_instances,
    token_logprobs_batch,
)

log = logging.getLogger(__name__)

MAX_BACKOFFS = 40


@dataclass(frozen=True)
class Demonstration:
    instance_id: int
    mode: ModePrefix
    target_answer: int

    def to_record(self) -> dict:
        return {"instance_id": self.instance_id, "mode": self.mode.value,
                "target_answer": self.target_answer}

    @classmethod
    def from_record(cls, rec: dict) -> "Demonstration":
        return cls(int(rec["instance_id"]), ModePrefix(rec["mode"]), int(rec["target_answer"]))


def save_demonstrations(path, demos) -> None:
    write_records(path, (d.to_record() for d in demos))


def load_demonstrations(path) -> list:
    return [Demonstration.from_record(r) for r in read_records(path)]


def labelled_demonstrations(instances, labels) -> list:
    """One demonstration per instance in its labelled mode, targeting the scored answer."""
    return [Demonstration(inst.id, mode, inst.correct_answer) for inst, mode in zip(instances, labels)]


def expert_demonstrations(instances, mode: ModePrefix) -> list:
    """Demonstrations of a single-mode expert, which may be misled by the persona."""
    return [Demonstration(inst.id, mode, synthenv.expert_answer(inst, mode)) for inst in instances]


def gain_based_labels(instances, probe: PolicyParams, k: int = 8, seed: int = 0,
                      temperature: float = 1.0) -> list:
    """Label each instance with the mode whose probe correctness rate is higher.

    PersonalizedQA items are always Personalized. Objective items become
    Personalized only if the probe's Personalized-mode rate over ``k``
    samples strictly beats its General-mode rate; ties go to General.
    """
    if k < 1:
        raise ConfigError("k must be >= 1")
    instances = list(instances)
    rng = np.random.default_rng([seed, 0x1AB])
    Q, P, C = stack_instances(instances)
    correct = synthenv.correct_answers(instances)
    n = len(instances)
    rates = {}
    for m, mode in enumerate((ModePrefix.GENERAL, ModePrefix.PERSONALIZED)):
        hits = np.zeros(n)
        for _ in range(k):
            u = rng.random((n, 2))
            answers = sample_answers_batch(probe, Q, P, C, np.full(n, m), temperature, u)
            hits += answers[:, 0] == correct
        rates[mode] = hits / k
    labels = []
    for i, inst in enumerate(instances):
        if inst.kind is TaskKind.PERSONALIZED_QA:
            labels.append(ModePrefix.PERSONALIZED)
        elif rates[ModePrefix.PERSONALIZED][i] > rates[ModePrefix.GENERAL][i]:
            labels.append(ModePrefix.PERSONALIZED)
        else:
            labels.append(ModePrefix.GENERAL)
    return labels


def gain_based_label(instance, probe_policy: PolicyParams, k: int = 8, seed: int = 0,
                     temperature: float = 1.0) -> ModePrefix:
    return gain_based_labels([instance], probe_policy, k, seed, temperature)[0]


def _demo_arrays(params: PolicyParams, demos, instances):
    by_id = {inst.id: inst for inst in instances}
    try:
        chosen = [by_id[d.instance_id] for d in demos]
    except KeyError as exc:
        raise ContractError(f"demonstration refers to unknown instance {exc.args[0]}") from None
    Q, P, C = stack_instances(chosen)
    na = params.dims.n_answers
    tokens = np.array([[d.mode.token_id(na), d.target_answer] for d in demos], dtype=np.int64)
    return Q, P, C, tokens


def sft_loss(params: PolicyParams, arrays) -> float:
    Q, P, C, tokens = arrays
    return float(-token_logprobs_batch(params, Q, P, C, tokens).sum(axis=1).mean())


def sft_fit(params: PolicyParams, demos, instances, epochs: int, lr: float):
    """Full-batch gradient descent on the mean demonstration NLL.

    A step that raises the loss is rejected and retried at half the step
    size, so the recorded losses never increase. Returns ``(params, losses)``
    where ``losses[e]`` is the loss entering epoch ``e`` and the final entry
    is the loss of the returned parameters.
    """
    if not demos:
        raise ConfigError("sft_fit needs at least one demonstration")
    if lr < 0:
        raise ConfigError("lr must be non-negative")
    arrays = _demo_arrays(params, demos, instances)
    Q, P, C, tokens = arrays
    n = tokens.shape[0]
    weights = np.full(tokens.shape, 1.0 / n)
    theta = params.theta
    current = params
    loss = sft_loss(current, arrays)
    losses = [loss]
    step = float(lr)
    for epoch in range(epochs):
        if step == 0.0:
            losses.append(loss)
            continue
        # ascent direction of the mean log-likelihood
        grad = grad_weighted_batch(current, Q, P, C, tokens, weights)
        for _ in range(MAX_BACKOFFS):
            candidate = current.replace(theta=theta + step * grad)
            new_loss = sft_loss(candidate, arrays)
            if new_loss <= loss:
                break
            step *= 0.5
        else:
            log.debug("sft_fit: no descent step found at epoch %d", epoch)
            losses.append(loss)
            continue
        current, theta, loss = candidate, candidate.theta, new_loss
        losses.append(loss)
    return current.replace(stage="warmup"), losses


def fit_probe(instances, params: PolicyParams, epochs: int = 60, lr: float = 1.0):
    """Probe for gain-based labelling: both modes briefly fitted on expert answers."""
    demos = (expert_demonstrations(instances, ModePrefix.GENERAL)
             + expert_demonstrations(instances, ModePrefix.PERSONALIZED))
    probe, _ = sft_fit(params, demos, instances, epochs, lr)
    return probe.replace(stage="probe")


def fit_fixed_mode(params: PolicyParams, instances, mode: ModePrefix, epochs: int, lr: float):
    """A single-mode baseline trained on that mode's expert demonstrations."""
    demos = expert_demonstrations(instances, mode)
    fitted, losses = sft_fit(params, demos, instances, epochs, lr)
    return fitted.replace(stage=f"fixed-{mode.value}"), losses


def mode_fidelity(params: PolicyParams, demos, instances) -> float:
    """Fraction of demonstrations whose argmax prefix matches the label."""
    Q, P, C, tokens = _demo_arrays(params, demos, instances)
    chosen_pm = mode_probs_batch(params, Q, P, C) > 0.5
    labelled_pm = tokens[:, 0] == params.dims.personalized_token
    return float(np.mean(chosen_pm == labelled_pm))


def labelled_prefix_probability(params: PolicyParams, demos, instances) -> float:
    """Mean selector probability assigned to the labelled mode."""
    Q, P, C, tokens = _demo_arrays(params, demos, instances)
    p_pm = mode_probs_batch(params, Q, P, C)
    labelled_pm = tokens[:, 0] == params.dims.personalized_token
    return float(np.mean(np.where(labelled_pm, p_pm, 1.0 - p_pm)))


def write_loss_csv(path, losses) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "loss"])
        for epoch, loss in enumerate(losses):
            writer.writerow([epoch, repr(float(loss))])


def run_warmup(instances, params: PolicyParams, *, probe_epochs: int, probe_lr: float, k: int,
               epochs: int, lr: float, seed: int, probe: Optional[PolicyParams] = None):
    """Probe, label, fit. Returns (params, demos, losses)."""
    if probe is None:
        probe = fit_probe(instances, params, probe_epochs, probe_lr)
    labels = gain_based_labels(instances, probe, k=k, seed=seed)
    demos = labelled_demonstrations(instances, labels)
    fitted, losses = sft_fit(params, demos, instances, epochs, lr)
    log.info("warm-up: %d demos, loss %.4f -> %.4f", len(demos), losses[0], losses[-1])
    return fitted, demos, losses
