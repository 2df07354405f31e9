"""Finite-difference verification of every gradient path in the objective.

Each check rebuilds the loss from raw parameter arrays so central
differences probe exactly what the tape claims to differentiate; Sinkhorn
codes are frozen at the base point because code estimation is a constant
for the gradient (stop-gradient by design).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import EncoderConfig, embed, init_model, prototype_scores
from .numerics import (GradientTape, Tensor, backward, finite_difference,
                       relative_gradient_error)
from .objective import (FeatureQueue, LossConfig, compute_batch_codes,
                        enqueue, swapped_loss)
from .sinkhorn import converged_config

FD_STEP = 1e-5  # small enough that sharp-softmax curvature (tau = 0.1)
# keeps the central-difference truncation error well under TOLERANCE
TOLERANCE = 1e-4


@dataclass
class CheckResult:
    op: str
    max_relative_error: float

    @property
    def passed(self) -> bool:
        return self.max_relative_error < TOLERANCE


def _check(name, build_loss, params, perturb=None) -> CheckResult:
    """Compare tape gradients of build_loss against central differences."""
    tape = GradientTape()
    tensors = {k: tape.parameter(k, v) for k, v in params.items()}
    loss = build_loss({k: t for k, t in tensors.items()})
    analytic = backward(tape, loss)
    if perturb == name:
        first = next(iter(analytic))
        analytic[first] = analytic[first] + 0.5  # fault injection hook

    def scalar(raw):
        return float(
            build_loss({k: Tensor(v) for k, v in raw.items()}).data[0, 0])

    numeric = finite_difference(scalar, params, step=FD_STEP)
    return CheckResult(name, relative_gradient_error(analytic, numeric))


def run_suite(seed: int = 0, perturb: str | None = None) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []

    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((4, 5))
    results.append(_check(
        "matmul", lambda p: (p["a"] @ p["b"]).log_softmax_rows().sum() * 0.1,
        {"a": a, "b": b}, perturb))

    m = rng.standard_normal((4, 6))
    weight = rng.standard_normal((4, 6))
    results.append(_check(
        "softmax", lambda p: (p["m"].softmax_rows(0.5) * Tensor(weight)).sum(),
        {"m": m.copy()}, perturb))

    pos = np.abs(rng.standard_normal((3, 3))) + 0.5
    results.append(_check(
        "log", lambda p: (p["m"].log() * 0.3).sum(), {"m": pos}, perturb))

    results.append(_check(
        "l2_normalize",
        lambda p: (p["m"].l2_normalize_rows() *
                   Tensor(np.ones((4, 6)))).sum(),
        {"m": m.copy() + 0.1}, perturb))

    q_rows = np.abs(rng.standard_normal((4, 6)))
    q_rows /= q_rows.sum(axis=1, keepdims=True)
    results.append(_check(
        "cross_entropy",
        lambda p: -(Tensor(q_rows) * p["s"].log_softmax_rows(0.1)).sum()
        * 0.25,
        {"s": rng.standard_normal((4, 6))}, perturb))

    results.append(_full_loss_check("swapped_loss", seed, use_queue=False,
                                    perturb=perturb))
    results.append(_full_loss_check("swapped_loss_queue", seed,
                                    use_queue=True, perturb=perturb))
    return results


def _full_loss_check(name: str, seed: int, use_queue: bool,
                     perturb: str | None) -> CheckResult:
    """End-to-end swapped loss (B=4, K=8, D=5) against finite differences."""
    cfg = EncoderConfig(input_dims=(6, 6), hidden_dims=(7,), embed_dim=5)
    encoder, bank = init_model(cfg, 8, seed + 1)
    rng = np.random.default_rng(seed + 2)
    x1 = rng.standard_normal((4, 6))
    x2 = rng.standard_normal((4, 6))
    loss_cfg = LossConfig(temperature=0.1, sinkhorn=converged_config(0.05),
                          queue_length=8 if use_queue else 0,
                          queue_start_iteration=0)

    queue = FeatureQueue(loss_cfg.queue_length, cfg.embed_dim)
    if use_queue:
        past = rng.standard_normal((6, 5))
        past /= np.sqrt((past * past).sum(axis=1, keepdims=True))
        enqueue(queue, past, past[::-1].copy())

    params = {k: t.data.copy() for k, t in encoder.parameters().items()}
    params["prototypes"] = bank.c.data.copy()
    param_tensors = dict(encoder.parameters())
    param_tensors["prototypes"] = bank.c

    # freeze codes at the base point: the gradient treats them as constants
    z1_base = embed(encoder, x1, 0).data
    z2_base = embed(encoder, x2, 1).data
    q_rows = queue.rows(0) if use_queue and queue.fill else None
    q_rows2 = queue.rows(1) if use_queue and queue.fill else None
    q1 = compute_batch_codes(z1_base, bank, q_rows, loss_cfg.sinkhorn)
    q2 = compute_batch_codes(z2_base, bank, q_rows2, loss_cfg.sinkhorn)

    def loss_from(raw: dict) -> float:
        for key, t in param_tensors.items():
            t.data[...] = raw[key]
        z1 = embed(encoder, x1, 0)
        z2 = embed(encoder, x2, 1)
        loss = swapped_loss(z1, z2, bank, None, loss_cfg, codes=(q1, q2))
        return float(loss.data[0, 0])

    tape = GradientTape()
    for key, t in param_tensors.items():
        t.data[...] = params[key]
        tape.watch(key, t)
    z1 = embed(encoder, x1, 0)
    z2 = embed(encoder, x2, 1)
    loss = swapped_loss(z1, z2, bank, None, loss_cfg, codes=(q1, q2))
    analytic = backward(tape, loss)
    if perturb == name:
        analytic["prototypes"] = analytic["prototypes"] + 0.5

    numeric = finite_difference(loss_from, params, step=FD_STEP)
    for key, t in param_tensors.items():  # restore base values
        t.data[...] = params[key]
    return CheckResult(name, relative_gradient_error(analytic, numeric))
