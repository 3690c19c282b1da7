"""Windowed CNN imitators.

Each imitator sees the subword sequence through windows of ``2c + 1``
tokens, one window centred on every position, and predicts a class
distribution per window. Its sequence-level logit is the log of the mean of
those distributions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .autodiff import Tensor, ops
from .expert import xavier
from .tokenization import BpeVocabulary

PAD_ID = BpeVocabulary.PAD_ID


class StageIsolationError(RuntimeError):
    """A frozen stage's parameters would receive (or did receive) an update."""


class ImitatorNet:
    PARAM_NAMES = ("embedding", "conv.w", "conv.b", "out.w", "out.b")

    def __init__(self, vocab_size: int, num_classes: int, window: int, emb_dim: int, kernel_dim: int,
                 rng: np.random.Generator | None = None):
        if window < 1:
            raise ValueError("window half-width c must be >= 1")
        if min(vocab_size, num_classes, emb_dim, kernel_dim) < 1:
            raise ValueError("all imitator dimensions must be positive")
        rng = rng if rng is not None else np.random.default_rng(window)
        self.window, self.num_classes = window, num_classes
        self.vocab_size, self.emb_dim, self.kernel_dim = vocab_size, emb_dim, kernel_dim
        span = 2 * window + 1
        emb = rng.uniform(-0.1, 0.1, size=(vocab_size, emb_dim)).astype(np.float32)
        emb[PAD_ID] = 0.0
        arrays = {
            "embedding": emb,
            "conv.w": xavier(rng, span * emb_dim, kernel_dim, (span, emb_dim, kernel_dim)),
            "conv.b": np.zeros(kernel_dim, dtype=np.float32),
            "out.w": xavier(rng, kernel_dim, num_classes, (kernel_dim, num_classes)),
            "out.b": np.zeros(num_classes, dtype=np.float32),
        }
        self.params = {n: Tensor(arrays[n], requires_grad=True, name=f"imitator{window}.{n}")
                       for n in self.PARAM_NAMES}

    @property
    def span(self) -> int:
        return 2 * self.window + 1

    def parameters(self) -> list[Tensor]:
        return [self.params[n] for n in self.PARAM_NAMES]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: self.params[n].data.copy() for n in self.PARAM_NAMES}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        for name in self.PARAM_NAMES:
            if name not in state:
                raise KeyError(f"missing imitator parameter {name!r}")
            arr = np.asarray(state[name])
            if arr.shape != self.params[name].shape:
                raise ValueError(f"{name}: expected shape {self.params[name].shape}, got {arr.shape}")
            self.params[name].data = arr.astype(np.float32, copy=True)

    def hidden(self, ids: np.ndarray) -> Tensor:
        return pad_and_convolve(ids, self)

    def window_log_probs(self, ids: np.ndarray) -> Tensor:
        """Per-window log class distributions, ``(B, L, Y)``."""
        return window_distribution(self.hidden(ids), self, log=True)

    def logit(self, ids: np.ndarray, lengths: np.ndarray | None = None) -> Tensor:
        ids = np.atleast_2d(np.asarray(ids))
        return imitator_logit(self.window_log_probs(ids), _lengths(ids, lengths))


def _lengths(ids: np.ndarray, lengths) -> np.ndarray:
    return np.full(ids.shape[0], ids.shape[1]) if lengths is None else np.asarray(lengths)


def pad_and_convolve(ids: np.ndarray, net: ImitatorNet) -> Tensor:
    """Hidden states ``o_j``, one per input position: ``(B, L, N)``.

    ``c`` pad tokens (zero embedding) go on each side, so every position gets
    a full window and the output length equals the input length.
    """
    ids = np.atleast_2d(np.asarray(ids))
    if ids.shape[1] == 0:
        raise ValueError("imitator input sequences must be nonempty")
    c = net.window
    padded = np.pad(ids, ((0, 0), (c, c)), constant_values=PAD_ID)
    emb = ops.embedding(net.params["embedding"], padded, padding_idx=PAD_ID)
    return ops.leaky_relu(ops.conv1d(emb, net.params["conv.w"], net.params["conv.b"]))


def window_distribution(o: Tensor, net: ImitatorNet, log: bool = False) -> Tensor:
    """Softmax over classes of ``w'_y . o_j + b'_y`` for every window."""
    scores = ops.add(ops.matmul(o, net.params["out.w"]), net.params["out.b"])
    return ops.log_softmax(scores) if log else ops.softmax(scores)


def _valid_mask(lengths: np.ndarray, width: int) -> np.ndarray:
    return np.arange(width)[None, :] < np.asarray(lengths)[:, None]


def imitator_logit(log_p: Tensor, lengths: np.ndarray) -> Tensor:
    """``log(mean_j p_j)`` over each row's valid windows, as ``logsumexp - log J``."""
    lengths = np.asarray(lengths)
    mask = _valid_mask(lengths, log_p.shape[1])[:, :, None]
    lse = ops.logsumexp(log_p, axis=1, mask=np.broadcast_to(mask, log_p.shape))
    return ops.sub(lse, np.log(lengths.astype(log_p.dtype))[:, None])


def _check_targets(targets) -> np.ndarray:
    if isinstance(targets, Tensor):
        if targets.requires_grad:
            raise StageIsolationError("imitation targets are attached to a trainable graph; "
                                      "the expert must be frozen while imitators train")
        targets = targets.data
    return np.asarray(targets)


def imitation_loss(window_log_probs: Sequence[Tensor], targets, lengths: np.ndarray) -> Tensor:
    """Sum over imitators and windows of the cross-entropy to the expert, averaged over the batch.

    Equals the summed KL up to the expert's entropy, which does not depend on
    the imitators. ``targets`` must be constants: ``(B, Y)`` expert
    distributions.
    """
    p = _check_targets(targets)
    lengths = np.asarray(lengths)
    total = None
    for log_q in window_log_probs:
        if log_q.shape[0] != p.shape[0] or log_q.shape[2] != p.shape[1]:
            raise ValueError(f"window log-probs {log_q.shape} do not match targets {p.shape}")
        mask = _valid_mask(lengths, log_q.shape[1]).astype(log_q.dtype)
        weights = (p[:, None, :] * mask[:, :, None]).astype(log_q.dtype) / -p.shape[0]
        term = ops.sum(ops.mul(log_q, weights))
        total = term if total is None else ops.add(total, term)
    if total is None:
        raise ValueError("imitation_loss needs at least one imitator")
    return total


def entropy(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        return -np.where(p > 0, p * np.log(p), 0.0).sum(axis=-1)


def kl_divergence(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """KL(p || q) along the last axis, in nats."""
    p, q = np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(q)), 0.0)
    return terms.sum(axis=-1)


def window_kl(log_q: np.ndarray, p: np.ndarray, lengths: np.ndarray) -> tuple[float, int]:
    """Total KL(p_b || q_bj) over valid windows, and the number of windows."""
    log_q = np.asarray(log_q, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    mask = _valid_mask(lengths, log_q.shape[1])
    cross = -(p[:, None, :] * log_q).sum(axis=-1)             # (B, L)
    kl = cross - entropy(p)[:, None]
    return float(kl[mask].sum()), int(mask.sum())


@dataclass
class ImitatorOutput:
    hidden: Tensor       # (B, L, N)
    log_p: Tensor        # (B, L, Y)
    alpha: Tensor        # (B, Y)


def imitator_forward(net: ImitatorNet, ids: np.ndarray, lengths: np.ndarray | None = None) -> ImitatorOutput:
    ids = np.atleast_2d(np.asarray(ids))
    o = pad_and_convolve(ids, net)
    log_p = window_distribution(o, net, log=True)
    return ImitatorOutput(o, log_p, imitator_logit(log_p, _lengths(ids, lengths)))
