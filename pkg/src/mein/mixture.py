"""Gated combination of expert and imitator logits."""

from __future__ import annotations

import hashlib
from typing import Sequence

import numpy as np

from .autodiff import Tensor, ops
from .expert import expert_prob
from .imitator import StageIsolationError

DISABLED = -np.inf


def disabled_gates(n: int) -> Tensor:
    """Gates whose sigmoid is exactly 0; their imitators are skipped entirely."""
    return Tensor(np.full(n, DISABLED, dtype=np.float32))


def trainable_gates(n: int, init: float = 0.0) -> Tensor:
    return Tensor(np.full(n, init, dtype=np.float32), requires_grad=True, name="gates")


def gate_weights(gates: Tensor) -> np.ndarray:
    """sigma(lambda_i), with disabled gates mapped to exactly 0."""
    lam = gates.data.astype(np.float64)
    out = np.zeros_like(lam)
    live = np.isfinite(lam)
    out[live] = 1.0 / (1.0 + np.exp(-lam[live]))
    return out


def mixture_logit(z: Tensor, alphas: Sequence, gates: Tensor) -> Tensor:
    """``z + sum_i sigmoid(lambda_i) * alpha_i``.

    Terms with a disabled gate are left out, so with every gate disabled the
    result is ``z`` itself.
    """
    if len(alphas) != gates.shape[0]:
        raise ValueError(f"{len(alphas)} imitator logits but {gates.shape[0]} gates")
    out = z
    sig = None
    for i, alpha in enumerate(alphas):
        if alpha.shape[-1] != z.shape[-1]:
            raise ValueError(f"imitator logit {i} has {alpha.shape[-1]} classes, expert has {z.shape[-1]}")
        if gates.data[i] == DISABLED:
            continue
        if sig is None:
            sig = ops.sigmoid(gates)
        alpha = alpha if isinstance(alpha, Tensor) else Tensor(np.asarray(alpha, dtype=z.dtype))
        out = ops.add(out, ops.mul(sig[i], alpha))
    return out


def mixture_prob(z_mixed) -> np.ndarray:
    return expert_prob(z_mixed)


def fine_tune_loss(z: Tensor, alphas: Sequence, gates: Tensor, labels: np.ndarray) -> Tensor:
    """Mean NLL of the mixed prediction. Imitator logits must be constants."""
    for i, alpha in enumerate(alphas):
        if isinstance(alpha, Tensor) and alpha.requires_grad:
            raise StageIsolationError(f"imitator logit {i} is attached to a trainable graph; "
                                      "imitators must be frozen during fine-tuning")
    labels = np.asarray(labels)
    num_classes = z.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels outside the {num_classes} classes")
    return ops.nll(ops.log_softmax(mixture_logit(z, alphas, gates)), labels)


def random_feature_logits(num_classes: int, num_imitators: int, seed: int, key) -> np.ndarray:
    """Stand-in imitator logits for the random control, ``(I, Y)``.

    Deterministic in ``(seed, key)``, where ``key`` identifies the input
    (its token ids). Each row is a log-distribution.
    """
    key_bytes = np.ascontiguousarray(np.asarray(key, dtype=np.int64)).tobytes()
    digest = int.from_bytes(hashlib.blake2b(key_bytes, digest_size=8).digest(), "little")
    rng = np.random.default_rng([seed, digest])
    raw = rng.standard_normal((num_imitators, num_classes))
    shifted = raw - raw.max(axis=1, keepdims=True)
    log_norm = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return log_norm.astype(np.float32)
