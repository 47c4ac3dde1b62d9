"""Centralized reference training with no enclaves, masks or network.

Per-owner gradients are encoded exactly as the training enclaves encode
them, then summed lane by lane with Python integers modulo 2**64.  That sum
never touches numpy wraparound, so agreement with the simulated protocol is
a check of the masking and tree pipelines rather than of shared arithmetic.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import JobConfig
from .models import ModelKind, ModelSpec, ModelState, accuracy, apply_update, compute_gradients, init_state, make_toy_task
from .tensors import Domain, GradVector, serialize

MOD = 1 << 64


def bigint_sum(vectors) -> GradVector:
    """Sum Fixed64 vectors with unbounded integers, reduced mod 2**64 at the end."""
    vectors = list(vectors)
    first = vectors[0]
    lanes = [0] * len(first)
    for v in vectors:
        for j, x in enumerate(v.lanes_as_ints()):
            lanes[j] += x
    out = np.array([x % MOD for x in lanes], dtype=np.uint64)
    return GradVector(Domain.FIXED64, out, first.shape, first.frac_bits)


def float_sum(vectors) -> GradVector:
    vectors = list(vectors)
    acc = np.zeros(len(vectors[0]), dtype=np.float64)
    for v in vectors:
        acc += v.values.astype(np.float64)
    return GradVector(Domain.FLOAT32, acc.astype(np.float32), vectors[0].shape)


@dataclass
class OracleRun:
    spec: ModelSpec
    states: list[ModelState]
    sums: list[GradVector]
    eval_accuracy: float

    @property
    def final_state(self) -> ModelState:
        return self.states[-1]

    @property
    def final_weights(self) -> bytes:
        return serialize(self.final_state.weights)


def local_gradients(cfg: JobConfig, spec: ModelSpec, state: ModelState, task, batch_index: int, owners):
    return [
        compute_gradients(spec, state, task.shards[i][batch_index], cfg.domain_enum, cfg.fixed_point)
        for i in owners
    ]


def run_oracle(cfg: JobConfig, participants_at=None) -> OracleRun:
    """Plain SGD over the same shards; ``participants_at(step)`` narrows who contributes."""
    m = cfg.model
    task = make_toy_task(
        cfg.seed, n_owners=cfg.n_training, batches_per_epoch=cfg.batches_per_epoch,
        n_samples=m.n_samples, n_features=m.n_features, margin=m.margin,
        kind=ModelKind(m.kind), hidden=m.hidden, hyperparams=cfg.hyperparams,
    )
    spec = task.spec
    state = init_state(spec)
    states, sums = [state], []
    for step in range(cfg.total_iterations):
        owners = list(range(cfg.n_training)) if participants_at is None else list(participants_at(step))
        grads = local_gradients(cfg, spec, state, task, state.batch_index, owners)
        total = bigint_sum(grads) if cfg.domain_enum is Domain.FIXED64 else float_sum(grads)
        sums.append(total)
        state = apply_update(spec, state, total, len(owners), cfg.batches_per_epoch)
        states.append(state)
    return OracleRun(spec, states, sums, accuracy(spec, state.weights, task.eval_set))
