"""Backdoor attack strategies used by malicious clients.

All attacks train on a locally poisoned shard and return a full model
parameter vector; the caller turns that into a client update.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .data import Dataset, TriggerSpec, poison_partition
from .model import MlpArchitecture, TrainConfig, local_train
from .params import EPS_ZERO, ParameterVector, cosine_distance


@dataclass(frozen=True)
class AttackConfig:
    poison_rate: float = 0.3
    malicious_epochs: int = 5
    neurotoxin_ratio: float = 0.75
    csa_lambda: float = 1.0
    cla_top_k: int = 2
    boost: float = 5.0

    def __post_init__(self):
        if not 0.0 < self.poison_rate <= 1.0:
            raise ValueError("poison_rate must be in (0, 1]")
        if self.malicious_epochs < 1:
            raise ValueError("malicious_epochs must be >= 1")
        if not 0.0 < self.neurotoxin_ratio < 1.0:
            raise ValueError("neurotoxin_ratio must be in (0, 1)")
        if self.csa_lambda < 0:
            raise ValueError("csa_lambda must be >= 0")
        if self.cla_top_k < 1:
            raise ValueError("cla_top_k must be >= 1")
        if self.boost < 1.0:
            raise ValueError("boost must be >= 1")


def _boost(
    global_model: ParameterVector, trained: ParameterVector, factor: float
) -> ParameterVector:
    """Model-replacement scaling: amplify the local delta so the attack
    survives averaging against a majority of honest updates."""
    if factor == 1.0:
        return trained
    values = global_model.values + factor * (trained.values - global_model.values)
    return ParameterVector(values, trained.schema)


def _malicious_cfg(cfg: TrainConfig, attack: AttackConfig) -> TrainConfig:
    return TrainConfig(
        epochs=attack.malicious_epochs,
        learning_rate=cfg.learning_rate,
        batch_size=cfg.batch_size,
        seed=cfg.seed,
    )


def cba_train(
    arch: MlpArchitecture,
    global_model: ParameterVector,
    shard: Dataset,
    trigger: TriggerSpec,
    cfg: TrainConfig,
    attack: AttackConfig,
) -> ParameterVector:
    """Centralised backdoor: every attacker poisons with the full trigger."""
    poisoned = poison_partition(shard, attack.poison_rate, trigger,
                                fragment_index=None, seed=cfg.seed)
    trained = local_train(arch, global_model, poisoned,
                          _malicious_cfg(cfg, attack))
    return _boost(global_model, trained, attack.boost)


def dba_train(
    arch: MlpArchitecture,
    global_model: ParameterVector,
    shard: Dataset,
    trigger: TriggerSpec,
    cfg: TrainConfig,
    attack: AttackConfig,
    attacker_index: int,
) -> ParameterVector:
    """Distributed backdoor: attacker i poisons only its trigger fragment."""
    fragment = attacker_index % trigger.fragments
    poisoned = poison_partition(shard, attack.poison_rate, trigger,
                                fragment_index=fragment, seed=cfg.seed)
    trained = local_train(arch, global_model, poisoned,
                          _malicious_cfg(cfg, attack))
    return _boost(global_model, trained, attack.boost)


def neurotoxin_mask(reference: np.ndarray | None, ratio: float) -> np.ndarray:
    """Boolean mask of the coordinates the attack is allowed to touch: the
    floor(ratio * P) coordinates where the previous global delta was
    smallest in magnitude (ties by lower index). Callers that have no
    reference delta yet allow every coordinate instead."""
    if reference is None:
        raise ValueError("mask needs a size; callers handle the no-reference case")
    p = reference.size
    k = int(np.floor(ratio * p + 1e-9))
    mask = np.zeros(p, dtype=bool)
    if k == 0:
        return mask
    order = np.argsort(np.abs(reference), kind="stable")
    mask[order[:k]] = True
    return mask


def neurotoxin_train(
    arch: MlpArchitecture,
    global_model: ParameterVector,
    shard: Dataset,
    trigger: TriggerSpec,
    cfg: TrainConfig,
    attack: AttackConfig,
    previous_global_delta: np.ndarray | None,
) -> ParameterVector:
    """Constrained backdoor: after every SGD step the accumulated deviation
    from the round's starting point is projected onto the low-magnitude
    coordinates of the previous global update."""
    if previous_global_delta is None:
        mask = np.ones(global_model.values.size, dtype=bool)
    else:
        mask = neurotoxin_mask(previous_global_delta, attack.neurotoxin_ratio)
    poisoned = poison_partition(shard, attack.poison_rate, trigger,
                                fragment_index=None, seed=cfg.seed)
    start = global_model.values

    def project(params: np.ndarray) -> np.ndarray:
        delta = params - start
        return start + np.where(mask, delta, 0.0)

    trained = local_train(arch, global_model, poisoned,
                          _malicious_cfg(cfg, attack),
                          post_step=None if mask.all() else project)
    # Scaling the delta keeps its support inside the allowed mask.
    return _boost(global_model, trained, attack.boost)


def csa_train(
    arch: MlpArchitecture,
    global_model: ParameterVector,
    shard: Dataset,
    trigger: TriggerSpec,
    cfg: TrainConfig,
    attack: AttackConfig,
) -> ParameterVector:
    """Critical-similarity adaptive attack: first trains a benign reference
    on the clean shard, then trains on the poisoned shard with a layer-wise
    cosine-similarity penalty pulling each layer towards the reference,
    and finally scales the constrained delta (constrain-and-scale)."""
    reference = local_train(arch, global_model, shard, cfg)
    poisoned = poison_partition(shard, attack.poison_rate, trigger,
                                fragment_index=None, seed=cfg.seed)
    schema = arch.schema()
    lam = attack.csa_lambda

    def penalty_grad(params: np.ndarray) -> np.ndarray:
        grad = np.zeros_like(params)
        for name in schema.names:
            lo, hi = schema.bounds(name)
            w = params[lo:hi]
            r = reference.values[lo:hi]
            wn = float(np.linalg.norm(w))
            rn = float(np.linalg.norm(r))
            if wn < EPS_ZERO or rn < EPS_ZERO:
                continue
            cos = float(np.dot(w, r)) / (wn * rn)
            # d/dw of (1 - cos(w, r))
            grad[lo:hi] = lam * (cos * w / wn**2 - r / (wn * rn))
        return grad

    trained = local_train(arch, global_model, poisoned,
                          _malicious_cfg(cfg, attack), extra_grad=penalty_grad)
    return _boost(global_model, trained, attack.boost)


def cla_compose(
    benign_model: ParameterVector,
    backdoored_model: ParameterVector,
    top_k: int,
) -> ParameterVector:
    """Critical-layer adaptive attack: start from the benign model and
    splice in the backdoored parameters only on the top_k layers where the
    two models are MOST similar (highest cosine similarity, i.e. lowest
    cosine distance; ties by schema order)."""
    schema = benign_model.schema
    if schema != backdoored_model.schema:
        raise ValueError("schemas differ")
    dist = [
        (cosine_distance(benign_model.layer(n), backdoored_model.layer(n)), i)
        for i, n in enumerate(schema.names)
    ]
    dist.sort()
    chosen = {schema.names[i] for _, i in dist[: min(top_k, len(dist))]}
    values = benign_model.values.copy()
    for name in chosen:
        lo, hi = schema.bounds(name)
        values[lo:hi] = backdoored_model.values[lo:hi]
    return ParameterVector(values, schema)


def cla_train(
    arch: MlpArchitecture,
    global_model: ParameterVector,
    shard: Dataset,
    trigger: TriggerSpec,
    cfg: TrainConfig,
    attack: AttackConfig,
) -> ParameterVector:
    """Train the benign and backdoored halves of the CLA attack, compose
    them, then scale the composed delta so it survives averaging."""
    benign = local_train(arch, global_model, shard, cfg)
    poisoned = poison_partition(shard, attack.poison_rate, trigger,
                                fragment_index=None, seed=cfg.seed)
    backdoored = local_train(arch, global_model, poisoned,
                             _malicious_cfg(cfg, attack))
    composed = cla_compose(benign, backdoored, attack.cla_top_k)
    return _boost(global_model, composed, attack.boost)
