"""The supervised classifier: embedding, LSTM, one ReLU layer, linear softmax head."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .autodiff import Tensor, ops


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)


def lstm_step(x: Tensor, h_prev: Tensor, c_prev: Tensor, params: Mapping[str, Tensor]) -> tuple[Tensor, Tensor]:
    """One LSTM transition.

    ``x`` is ``(..., D)``, the states ``(..., H)``. ``params`` holds
    ``lstm.w_x`` (D, 4H), ``lstm.w_h`` (H, 4H) and ``lstm.b`` (4H,), with the
    gate blocks ordered input, forget, output, candidate.
    """
    gates = ops.add(ops.add(ops.matmul(x, params["lstm.w_x"]), ops.matmul(h_prev, params["lstm.w_h"])),
                    params["lstm.b"])
    return _lstm_gates(gates, c_prev)


def _lstm_gates(gates: Tensor, c_prev: Tensor) -> tuple[Tensor, Tensor]:
    hidden = c_prev.shape[-1]
    ifo = ops.sigmoid(gates[..., :3 * hidden])
    cand = ops.tanh(gates[..., 3 * hidden:])
    i, f, o = ifo[..., :hidden], ifo[..., hidden:2 * hidden], ifo[..., 2 * hidden:]
    c = ops.add(ops.mul(f, c_prev), ops.mul(i, cand))
    h = ops.mul(o, ops.tanh(c))
    return h, c


@dataclass
class ExpertOutput:
    hidden: list[Tensor]   # h_1..h_T, each (B, H); rows past a sequence's end hold its last state
    s: Tensor              # (B, M)
    logits: Tensor         # (B, Y)


class ExpertNet:
    """LSTM classifier over word ids.

    Sequences in a batch are right-padded; each row's state stops updating
    after its own last token, so ``h_T`` is taken at the true end.
    """

    PARAM_NAMES = ("embedding", "lstm.w_x", "lstm.w_h", "lstm.b", "mlp.w", "mlp.b", "out.w", "out.b")

    def __init__(self, vocab_size: int, num_classes: int, emb_dim: int, hidden_dim: int, mlp_dim: int,
                 dropout: float = 0.5, rng: np.random.Generator | None = None):
        if min(vocab_size, num_classes, emb_dim, hidden_dim, mlp_dim) < 1:
            raise ValueError("all expert dimensions must be positive")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.vocab_size, self.num_classes = vocab_size, num_classes
        self.emb_dim, self.hidden_dim, self.mlp_dim = emb_dim, hidden_dim, mlp_dim
        self.dropout = dropout
        H = hidden_dim
        w_x = np.concatenate([xavier(rng, emb_dim, H, (emb_dim, H)) for _ in range(4)], axis=1)
        w_h = np.concatenate([xavier(rng, H, H, (H, H)) for _ in range(4)], axis=1)
        bias = np.zeros(4 * H, dtype=np.float32)
        bias[H:2 * H] = 1.0  # forget gate starts open
        arrays = {
            "embedding": rng.uniform(-0.1, 0.1, size=(vocab_size, emb_dim)).astype(np.float32),
            "lstm.w_x": w_x,
            "lstm.w_h": w_h,
            "lstm.b": bias,
            "mlp.w": xavier(rng, H, mlp_dim, (H, mlp_dim)),
            "mlp.b": np.zeros(mlp_dim, dtype=np.float32),
            "out.w": xavier(rng, mlp_dim, num_classes, (mlp_dim, num_classes)),
            "out.b": np.zeros(num_classes, dtype=np.float32),
        }
        self.params = {name: Tensor(arrays[name], requires_grad=True, name=name) for name in self.PARAM_NAMES}

    def parameters(self) -> list[Tensor]:
        return [self.params[n] for n in self.PARAM_NAMES]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: self.params[n].data.copy() for n in self.PARAM_NAMES}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        for name in self.PARAM_NAMES:
            if name not in state:
                raise KeyError(f"missing expert parameter {name!r}")
            arr = np.asarray(state[name])
            if arr.shape != self.params[name].shape:
                raise ValueError(f"{name}: expected shape {self.params[name].shape}, got {arr.shape}")
            self.params[name].data = arr.astype(np.float32, copy=True)

    def forward(self, ids: np.ndarray, lengths: np.ndarray | None = None, train: bool = False,
                rng: np.random.Generator | None = None) -> ExpertOutput:
        ids = np.atleast_2d(np.asarray(ids))
        batch, steps = ids.shape
        lengths = np.full(batch, steps) if lengths is None else np.asarray(lengths)
        if steps == 0 or lengths.min() < 1:
            raise ValueError("expert input sequences must be nonempty")
        p = self.params
        x = ops.embedding(p["embedding"], ids)
        if train and self.dropout > 0:
            if rng is None:
                raise ValueError("training-mode forward needs an rng for dropout")
            x = ops.dropout(x, self.dropout, rng)
        # input projection for all steps at once; the recurrence adds h @ w_h
        xw = ops.add(ops.matmul(x, p["lstm.w_x"]), p["lstm.b"])

        H = self.hidden_dim
        h = Tensor(np.zeros((batch, H), dtype=np.float32))
        c = Tensor(np.zeros((batch, H), dtype=np.float32))
        hidden = []
        for t, xw_t in enumerate(ops.unstack(xw, axis=1)):
            gates = ops.add(xw_t, ops.matmul(h, p["lstm.w_h"]))
            h_new, c_new = _lstm_gates(gates, c)
            live = lengths > t
            if live.all():
                h, c = h_new, c_new
            else:
                keep = live.astype(np.float32)[:, None]
                h = ops.add(ops.mul(h_new, keep), ops.mul(h, 1.0 - keep))
                c = ops.add(ops.mul(c_new, keep), ops.mul(c, 1.0 - keep))
            hidden.append(h)

        s = ops.relu(ops.add(ops.matmul(h, p["mlp.w"]), p["mlp.b"]))
        logits = ops.add(ops.matmul(s, p["out.w"]), p["out.b"])
        return ExpertOutput(hidden=hidden, s=s, logits=logits)


def expert_prob(z) -> np.ndarray:
    """Class distribution from logits (last axis)."""
    z = z.data if isinstance(z, Tensor) else np.asarray(z)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def supervised_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of the gold labels."""
    labels = np.asarray(labels)
    num_classes = logits.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        bad = labels[(labels < 0) | (labels >= num_classes)][0]
        raise ValueError(f"label {bad} outside the {num_classes} classes")
    return ops.nll(ops.log_softmax(logits), labels)
