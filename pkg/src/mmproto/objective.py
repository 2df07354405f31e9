"""Swapped-prediction loss: each view predicts the other view's cluster code.

Codes come from the Sinkhorn solver and are treated as constants (no
gradient flows through code estimation); the differentiable part is the
temperature-scaled softmax over prototype scores. A per-modality feature
queue can widen the sample pool that code estimation sees, since the batch
is usually much smaller than the number of prototypes.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .model import PrototypeBank, prototype_scores
from .numerics import DimensionError, Tensor
from .sinkhorn import SinkhornConfig, compute_codes


class InputError(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    temperature: float = 0.1
    sinkhorn: SinkhornConfig = field(default_factory=SinkhornConfig)
    queue_length: int = 1920
    queue_start_iteration: int = -1  # -1: resolved to one epoch by the trainer

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError(
                f"temperature must be > 0, got {self.temperature}")
        if self.queue_length < 0:
            raise ValueError("queue_length must be >= 0")


@dataclass
class AssignmentDistribution:
    """Softmax prototype-assignment probabilities, one row per sample."""

    p: np.ndarray


class FeatureQueue:
    """Ring buffer of past embeddings, one buffer per modality.

    Stored rows are detached copies; they never carry gradients back to the
    iterations that produced them.
    """

    def __init__(self, capacity: int, dim: int):
        self.capacity = capacity
        self.dim = dim
        self.buffers = [np.zeros((capacity, dim)), np.zeros((capacity, dim))]
        self.fill = 0
        self.cursor = 0

    def rows(self, modality: int) -> np.ndarray:
        """Currently stored rows for one modality (oldest order irrelevant)."""
        return self.buffers[modality][:self.fill]

    def push(self, z1: np.ndarray, z2: np.ndarray):
        if self.capacity == 0:
            return
        for row1, row2 in zip(z1, z2):
            self.buffers[0][self.cursor] = row1
            self.buffers[1][self.cursor] = row2
            self.cursor = (self.cursor + 1) % self.capacity
            self.fill = min(self.fill + 1, self.capacity)


def enqueue(queue: FeatureQueue, z1, z2) -> FeatureQueue:
    """Insert detached copies of both modality batches, oldest evicted first."""
    a = z1.data if isinstance(z1, Tensor) else np.asarray(z1, dtype=np.float64)
    b = z2.data if isinstance(z2, Tensor) else np.asarray(z2, dtype=np.float64)
    queue.push(a.copy(), b.copy())
    return queue


def predict_assignments(z, bank: PrototypeBank,
                        temperature: float) -> AssignmentDistribution:
    """p[b, k] = softmax_k(z_b . c_k / temperature)."""
    scores = prototype_scores(z, bank)  # K x B
    p = scores.T.softmax_rows(temperature)
    return AssignmentDistribution(p.data)


def cross_entropy_term(p: AssignmentDistribution | np.ndarray,
                       q_rows: np.ndarray) -> float:
    """Mean over the batch of -sum_k q[b,k] log p[b,k].

    `q_rows` holds the Sinkhorn code columns rescaled to probability rows
    (each row sums to 1). Log is clamped at 1e-12.
    """
    probs = p.p if isinstance(p, AssignmentDistribution) else np.asarray(p)
    q = np.asarray(q_rows, dtype=np.float64)
    if probs.shape != q.shape:
        raise DimensionError(f"p {probs.shape} vs q {q.shape}")
    if (q < 0).any():
        raise InputError("code rows must be non-negative")
    logp = np.log(np.maximum(probs, 1e-12))
    return float(-(q * logp).sum(axis=1).mean())


def compute_batch_codes(z: np.ndarray, bank: PrototypeBank,
                        queue_rows: np.ndarray | None,
                        config: SinkhornConfig) -> np.ndarray:
    """Sinkhorn codes for the current batch, as B x K probability rows.

    Queue rows are appended as extra columns for code estimation only; just
    the batch columns are kept, each rescaled to sum 1.
    """
    cols = z
    if queue_rows is not None and len(queue_rows):
        cols = np.vstack([z, queue_rows])
    scores = bank.c.data @ cols.T  # K x (B + queue)
    q = compute_codes(scores, config).q[:, :z.shape[0]]
    q = q / q.sum(axis=0, keepdims=True)
    return q.T


def swapped_loss(z1: Tensor, z2: Tensor, bank: PrototypeBank,
                 queue: FeatureQueue | None, config: LossConfig,
                 use_queue: bool = False,
                 codes: tuple[np.ndarray, np.ndarray] | None = None) -> Tensor:
    """Cross-entropy of each view's assignment against the other view's code.

    Returns a scalar Tensor (mean over the batch of both swapped terms).
    Codes are constants for the gradient; `codes` overrides their
    computation, which finite-difference checks use to freeze the targets.
    Detached copies of both batches are enqueued afterwards.
    """
    if z1.shape != z2.shape:
        raise DimensionError(f"view shapes differ: {z1.shape} vs {z2.shape}")
    b = z1.shape[0]
    if b == 0:
        raise InputError("batch is empty")

    queue_rows1 = queue_rows2 = None
    if use_queue and queue is not None and queue.fill > 0:
        queue_rows1 = queue.rows(0)
        queue_rows2 = queue.rows(1)
    elif b == 1:
        warnings.warn("batch of 1 with no queue: codes are uninformative",
                      stacklevel=2)

    if codes is None:
        q1 = compute_batch_codes(z1.data, bank, queue_rows1, config.sinkhorn)
        q2 = compute_batch_codes(z2.data, bank, queue_rows2, config.sinkhorn)
    else:
        q1, q2 = codes

    logp1 = prototype_scores(z1, bank).T.log_softmax_rows(config.temperature)
    logp2 = prototype_scores(z2, bank).T.log_softmax_rows(config.temperature)
    loss = -((Tensor(q2) * logp1).sum() + (Tensor(q1) * logp2).sum()) * (1.0 / b)

    if queue is not None:
        enqueue(queue, z1, z2)
    return loss
