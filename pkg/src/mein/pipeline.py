"""Three-stage training, evaluation, and the analysis experiments.

Stage 1 fits the expert on labeled data with every gate disabled. Stage 2
fits the imitators to the frozen expert's predictions on unlabeled text.
Stage 3 fine-tunes the expert and the gates on labeled data with the
imitators frozen. Every stage keeps the epoch with the lowest dev error
(earliest on ties).
"""

from __future__ import annotations

import csv
import hashlib
import io
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .autodiff import Adam, Tensor, backward, no_grad
from .checkpoint import Checkpoint
from .config import TrainConfig
from .data import EncodedSplit, PreparedData, batch_iter, make_batch
from .expert import ExpertNet, expert_prob, supervised_loss
from .imitator import ImitatorNet, StageIsolationError, imitation_loss, window_kl
from .mixture import fine_tune_loss, mixture_logit, random_feature_logits, trainable_gates

log = logging.getLogger("mein")

CSV_COLUMNS = ("experiment", "seed", "stage", "epoch", "dev_error", "test_error", "tokens_per_sec", "wall_ms")

# independent random streams: (seed, stage, purpose)
_STAGE = {"expert": 1, "imitators": 2, "finetune": 3, "bench": 4}
_PURPOSE = {"init": 1, "shuffle": 2, "dropout": 3, "targets": 4}


def stage_rng(seed: int, stage: str, purpose: str, *extra: int) -> np.random.Generator:
    return np.random.default_rng([seed, _STAGE[stage], _PURPOSE[purpose], *extra])


class TrainingDivergedError(RuntimeError):
    pass


class StageOrderError(RuntimeError):
    pass


def digest(state: Mapping[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name])
        h.update(name.encode())
        h.update(str(arr.dtype).encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def select_epoch(dev_errors: Sequence[float]) -> int:
    """1-based index of the lowest dev error; the earliest wins ties."""
    if len(dev_errors) == 0:
        raise ValueError("no epochs to select from")
    return int(np.argmin(np.asarray(dev_errors, dtype=np.float64))) + 1


def error_rate(predictions: np.ndarray, labels: np.ndarray) -> float:
    """Percentage of misclassified examples."""
    predictions, labels = np.asarray(predictions), np.asarray(labels)
    if labels.size == 0:
        raise ValueError("cannot compute an error rate on an empty dataset")
    if predictions.shape != labels.shape:
        raise ValueError(f"predictions {predictions.shape} and labels {labels.shape} differ in shape")
    return 100.0 * float(np.mean(predictions != labels))


def _check_finite(loss: Tensor, stage: str, epoch: int, step: int) -> None:
    if not np.isfinite(loss.data).all():
        raise TrainingDivergedError(f"{stage}: non-finite loss {loss.item()} at epoch {epoch}, batch {step}")


# --------------------------------------------------------------- records

@dataclass
class EpochRecord:
    epoch: int
    dev_error: float           # dev error (%) for classifiers, mean dev KL (nats) for imitators
    train_loss: float
    wall_ms: float
    tokens: int


@dataclass
class StageResult:
    stage: str
    seed: int
    history: list[EpochRecord]
    selected_epoch: int
    state: dict[str, np.ndarray]
    test_error: float | None = None
    gates: np.ndarray | None = None

    @property
    def dev_errors(self) -> list[float]:
        return [r.dev_error for r in self.history]

    @property
    def selected_dev_error(self) -> float | None:
        return self.history[self.selected_epoch - 1].dev_error if self.history else None

    @property
    def wall_ms(self) -> float:
        return float(sum(r.wall_ms for r in self.history))

    @property
    def tokens_per_sec(self) -> float:
        ms = self.wall_ms
        return 1000.0 * sum(r.tokens for r in self.history) / ms if ms > 0 else 0.0


@dataclass
class ImitatorResult:
    seed: int
    results: dict[int, StageResult]  # keyed by window half-width c

    @property
    def windows(self) -> tuple[int, ...]:
        return tuple(sorted(self.results))

    def states(self, windows: Iterable[int] | None = None) -> dict[int, dict[str, np.ndarray]]:
        windows = self.windows if windows is None else tuple(windows)
        missing = [c for c in windows if c not in self.results]
        if missing:
            raise KeyError(f"no trained imitator for window(s) {missing}")
        return {c: self.results[c].state for c in windows}


@dataclass
class RunRecord:
    experiment: str
    seed: int | str
    stage: str
    epoch: int | str
    dev_error: float | str = ""
    test_error: float | str = ""
    tokens_per_sec: float | str = ""
    wall_ms: float | str = ""

    def row(self) -> list[str]:
        return [_fmt(getattr(self, c)) for c in CSV_COLUMNS]


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def stage_records(experiment: str, result: StageResult, stage: str | None = None,
                  timing: bool = False) -> list[RunRecord]:
    """One row per epoch plus a ``<stage>.selected`` row carrying the test error."""
    stage = stage or result.stage
    rows = []
    for r in result.history:
        rows.append(RunRecord(experiment, result.seed, stage, r.epoch, r.dev_error, "",
                              1000.0 * r.tokens / r.wall_ms if timing and r.wall_ms > 0 else "",
                              r.wall_ms if timing else ""))
    rows.append(RunRecord(experiment, result.seed, f"{stage}.selected", result.selected_epoch,
                          "" if result.selected_dev_error is None else result.selected_dev_error,
                          "" if result.test_error is None else result.test_error,
                          result.tokens_per_sec if timing else "", result.wall_ms if timing else ""))
    return rows


def write_csv(path: str | Path, records: Iterable[RunRecord], columns: Sequence[str] = CSV_COLUMNS,
              append: bool = False) -> None:
    """Write rows under a fixed header; appending never repeats the header."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fresh = not (append and path.exists() and path.stat().st_size > 0)
    with path.open("a" if append else "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if fresh:
            writer.writerow(columns)
        for rec in records:
            writer.writerow(rec.row() if isinstance(rec, RunRecord) else [_fmt(v) for v in rec])


def records_to_csv(records: Iterable[RunRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for rec in records:
        writer.writerow(rec.row())
    return buf.getvalue()


# --------------------------------------------------------------- model construction

def build_expert(data: PreparedData, config: TrainConfig, seed: int) -> ExpertNet:
    m = config.model
    return ExpertNet(len(data.word_vocab), data.num_classes, m.emb_dim, m.hidden_dim, m.mlp_dim,
                     dropout=m.dropout, rng=stage_rng(seed, "expert", "init"))


def build_imitator(data: PreparedData, config: TrainConfig, seed: int, window: int) -> ImitatorNet:
    m = config.model
    return ImitatorNet(len(data.bpe_vocab), data.num_classes, window, m.imitator_emb_dim, m.kernel_dim,
                       rng=stage_rng(seed, "imitators", "init", window))


def load_expert(data: PreparedData, config: TrainConfig, state: Mapping[str, np.ndarray]) -> ExpertNet:
    net = build_expert(data, config, seed=0)
    net.load_state_dict(state)
    return net


def load_imitators(data: PreparedData, config: TrainConfig,
                   states: Mapping[int, Mapping[str, np.ndarray]]) -> list[ImitatorNet]:
    nets = []
    for c in sorted(states):
        net = build_imitator(data, config, seed=0, window=c)
        net.load_state_dict(states[c])
        nets.append(net)
    return nets


# --------------------------------------------------------------- inference

def _length_order(split: EncodedSplit, stream: str) -> np.ndarray:
    seqs = split.word_ids if stream == "word" else split.bpe_ids
    return np.argsort(np.array([len(s) for s in seqs]), kind="stable")


def expert_logits(expert: ExpertNet, split: EncodedSplit, batch_size: int = 256,
                  max_len: int | None = None) -> np.ndarray:
    """Eval-mode logits for every example, ``(n, Y)``, in split order."""
    out = np.zeros((len(split), expert.num_classes), dtype=np.float32)
    order = _length_order(split, "word")
    with no_grad():
        for start in range(0, len(split), batch_size):
            batch = make_batch(split, order[start:start + batch_size], max_len)
            out[batch.indices] = expert.forward(batch.word_ids, batch.word_lengths).logits.data
    return out


def imitator_features(imitators: Sequence[ImitatorNet], split: EncodedSplit, batch_size: int = 256,
                      max_len: int | None = None) -> np.ndarray:
    """Frozen imitator logits for every example, ``(n, I, Y)``."""
    n_classes = imitators[0].num_classes if imitators else 0
    out = np.zeros((len(split), len(imitators), n_classes), dtype=np.float32)
    order = _length_order(split, "bpe")
    with no_grad():
        for start in range(0, len(split), batch_size):
            batch = make_batch(split, order[start:start + batch_size], max_len)
            for i, net in enumerate(imitators):
                out[batch.indices, i] = net.logit(batch.bpe_ids, batch.bpe_lengths).data
    return out


def random_features(split: EncodedSplit, num_classes: int, num_imitators: int, seed: int) -> np.ndarray:
    return np.stack([random_feature_logits(num_classes, num_imitators, seed, ids) for ids in split.word_ids]) \
        if len(split) else np.zeros((0, num_imitators, num_classes), dtype=np.float32)


def mixed_logits(z: np.ndarray, features: np.ndarray | None, gates: np.ndarray) -> np.ndarray:
    gates = np.asarray(gates, dtype=np.float32)
    if features is None or gates.size == 0:
        return z
    alphas = [features[:, i] for i in range(features.shape[1])]
    with no_grad():
        return mixture_logit(Tensor(z), alphas, Tensor(gates)).data


@dataclass
class MeinModel:
    """A finished classifier: expert, optional frozen imitator features, gates."""

    expert: ExpertNet
    imitators: list[ImitatorNet] = field(default_factory=list)
    gates: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.float32))
    random_seed: int | None = None   # set for the random-feature control

    def features(self, split: EncodedSplit, batch_size: int = 256) -> np.ndarray | None:
        if self.random_seed is not None:
            return random_features(split, self.expert.num_classes, len(self.gates), self.random_seed)
        if not self.imitators:
            return None
        return imitator_features(self.imitators, split, batch_size)

    def logits(self, split: EncodedSplit, batch_size: int = 256) -> np.ndarray:
        z = expert_logits(self.expert, split, batch_size)
        return mixed_logits(z, self.features(split, batch_size), self.gates)

    def prob(self, split: EncodedSplit, batch_size: int = 256) -> np.ndarray:
        return expert_prob(self.logits(split, batch_size))


def evaluate(model: MeinModel, split: EncodedSplit, batch_size: int = 256) -> float:
    if split.labels is None:
        raise ValueError("evaluation needs a labeled split")
    if len(split) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    return error_rate(model.logits(split, batch_size).argmax(axis=1), split.labels)


# --------------------------------------------------------------- stage 1

def train_expert(data: PreparedData, config: TrainConfig, seed: int,
                 epoch_callback=None) -> StageResult:
    """Fit the expert by supervised NLL; gates stay disabled throughout."""
    if len(data.train) == 0:
        raise ValueError("stage 1 needs a nonempty labeled training set")
    t = config.train
    expert = build_expert(data, config, seed)
    opt = Adam(expert.parameters(), lr=t.lr, decay=t.decay, clip_norm=t.clip_norm)
    shuffle, drop = stage_rng(seed, "expert", "shuffle"), stage_rng(seed, "expert", "dropout")
    history, best, best_err = [], None, np.inf
    for epoch in range(1, t.expert_epochs + 1):
        start, tokens, losses = time.perf_counter(), 0, []
        for step, batch in enumerate(batch_iter(data.train, t.batch_size, shuffle, config.vocab.max_len)):
            out = expert.forward(batch.word_ids, batch.word_lengths, train=True, rng=drop)
            loss = supervised_loss(out.logits, batch.labels)
            _check_finite(loss, "expert", epoch, step)
            backward(loss)
            opt.step()
            tokens += int(batch.word_lengths.sum())
            losses.append(loss.item() * len(batch))
        wall = 1000.0 * (time.perf_counter() - start)
        dev_err = error_rate(expert_logits(expert, data.dev, t.eval_batch_size).argmax(1), data.dev.labels)
        history.append(EpochRecord(epoch, dev_err, float(np.sum(losses) / len(data.train)), wall, tokens))
        if dev_err < best_err:
            best_err, best = dev_err, expert.state_dict()
        if epoch_callback is not None:
            epoch_callback("expert", epoch, expert.state_dict())
        log.debug("seed %d expert epoch %d: loss %.4f dev %.2f%%", seed, epoch, history[-1].train_loss, dev_err)
    if best is None:
        best = expert.state_dict()
    result = StageResult("expert", seed, history, select_epoch([r.dev_error for r in history]) if history else 0,
                         best, gates=np.full(len(config.model.windows), -np.inf, dtype=np.float32))
    expert.load_state_dict(best)
    result.test_error = evaluate(MeinModel(expert), data.test, t.eval_batch_size) if len(data.test) else None
    return result


# --------------------------------------------------------------- stage 2

def expert_targets(expert: ExpertNet, split: EncodedSplit, batch_size: int = 256) -> np.ndarray:
    """The frozen expert's class distributions (dropout off), cached for stage 2."""
    return expert_prob(expert_logits(expert, split, batch_size)).astype(np.float32)


def _dev_kl(net: ImitatorNet, split: EncodedSplit, targets: np.ndarray, batch_size: int) -> float:
    total, count = 0.0, 0
    order = _length_order(split, "bpe")
    with no_grad():
        for start in range(0, len(split), batch_size):
            batch = make_batch(split, order[start:start + batch_size])
            kl, n = window_kl(net.window_log_probs(batch.bpe_ids).data, targets[batch.indices], batch.bpe_lengths)
            total, count = total + kl, count + n
    return total / max(count, 1)


def _train_imitator_group(nets: list[ImitatorNet], unlabeled: EncodedSplit, targets: np.ndarray,
                          dev: EncodedSplit, dev_targets: np.ndarray, config: TrainConfig,
                          seed: int) -> dict[int, StageResult]:
    """Minimise the summed imitation loss of ``nets`` with one optimizer.

    The loss separates per imitator and Adam acts elementwise, so training a
    group jointly gives the same parameters as training each member alone
    (given the same shuffle stream and no global-norm clipping).
    """
    t = config.train
    params = [p for net in nets for p in net.parameters()]
    opt = Adam(params, lr=t.lr, decay=t.decay, clip_norm=t.clip_norm)
    shuffle = stage_rng(seed, "imitators", "shuffle")
    histories = {net.window: [] for net in nets}
    best = {net.window: (np.inf, net.state_dict()) for net in nets}
    epochs = t.imitator_epochs if len(unlabeled) else 0
    for epoch in range(1, epochs + 1):
        start, tokens = time.perf_counter(), 0
        kl_sum = {net.window: 0.0 for net in nets}
        n_windows = 0
        for step, batch in enumerate(batch_iter(unlabeled, t.batch_size, shuffle, config.vocab.max_len)):
            p = targets[batch.indices]
            log_qs = [net.window_log_probs(batch.bpe_ids) for net in nets]
            loss = imitation_loss(log_qs, p, batch.bpe_lengths)
            _check_finite(loss, "imitators", epoch, step)
            for net, log_q in zip(nets, log_qs):
                kl_sum[net.window] += window_kl(log_q.data, p, batch.bpe_lengths)[0]
            n_windows += int(batch.bpe_lengths.sum())
            backward(loss)
            opt.step()
            tokens += int(batch.bpe_lengths.sum())
        wall = 1000.0 * (time.perf_counter() - start)
        for net in nets:
            dev_kl = _dev_kl(net, dev, dev_targets, t.eval_batch_size)
            histories[net.window].append(EpochRecord(epoch, dev_kl, kl_sum[net.window] / n_windows, wall, tokens))
            if dev_kl < best[net.window][0]:
                best[net.window] = (dev_kl, net.state_dict())
    out = {}
    for net in nets:
        hist = histories[net.window]
        selected = select_epoch([r.dev_error for r in hist]) if hist else 0
        out[net.window] = StageResult(f"imitator.c{net.window}", seed, hist, selected, best[net.window][1])
    return out


def _train_one_imitator(args) -> dict[int, StageResult]:
    data, config, seed, window, unlabeled, targets, dev_targets = args
    net = build_imitator(data, config, seed, window)
    return _train_imitator_group([net], unlabeled, targets, data.dev, dev_targets, config, seed)


def train_imitators(data: PreparedData, expert_state: Mapping[str, np.ndarray], config: TrainConfig, seed: int,
                    windows: Sequence[int] | None = None, unlabeled: EncodedSplit | None = None,
                    mode: str = "joint", jobs: int = 1) -> ImitatorResult:
    """Fit one imitator per window to the frozen expert on unlabeled text.

    ``mode="independent"`` trains each imitator with its own optimizer,
    optionally in ``jobs`` worker processes.
    """
    if expert_state is None:
        raise StageOrderError("stage 2 needs a trained expert (stage 1)")
    windows = tuple(config.model.windows if windows is None else windows)
    unlabeled = data.unlabeled if unlabeled is None else unlabeled
    bs = config.train.eval_batch_size
    expert = load_expert(data, config, expert_state)
    before = digest(expert.state_dict())
    targets = expert_targets(expert, unlabeled, bs) if len(unlabeled) else np.zeros((0, data.num_classes))
    dev_targets = expert_targets(expert, data.dev, bs)

    if mode == "joint":
        nets = [build_imitator(data, config, seed, c) for c in windows]
        results = _train_imitator_group(nets, unlabeled, targets, data.dev, dev_targets, config, seed)
    elif mode == "independent":
        tasks = [(data, config, seed, c, unlabeled, targets, dev_targets) for c in windows]
        results = {}
        if jobs > 1 and len(tasks) > 1:
            with ProcessPoolExecutor(max_workers=min(jobs, len(tasks))) as pool:
                for part in pool.map(_train_one_imitator, tasks):
                    results.update(part)
        else:
            for task in tasks:
                results.update(_train_one_imitator(task))
    else:
        raise ValueError(f"unknown imitator training mode {mode!r}")

    if digest(expert.state_dict()) != before or digest(expert_state) != before:
        raise StageIsolationError("expert parameters changed during imitator training")
    return ImitatorResult(seed, {c: results[c] for c in windows})


# --------------------------------------------------------------- stage 3

def _split_features(data: PreparedData, config: TrainConfig, imitator_states, random_seed: int | None,
                    num_gates: int) -> dict[str, np.ndarray]:
    bs = config.train.eval_batch_size
    if random_seed is not None:
        return {s: random_features(getattr(data, s), data.num_classes, num_gates, random_seed)
                for s in ("train", "dev", "test")}
    nets = load_imitators(data, config, imitator_states)
    return {s: imitator_features(nets, getattr(data, s), bs) for s in ("train", "dev", "test")}


def fine_tune(data: PreparedData, expert_state: Mapping[str, np.ndarray],
              imitator_states: Mapping[int, Mapping[str, np.ndarray]] | None, config: TrainConfig, seed: int,
              random_control: bool = False, num_gates: int | None = None) -> StageResult:
    """Fine-tune the expert and the gates (initialised at 0) with frozen imitators.

    With ``random_control`` the imitator logits are replaced by fixed
    per-input random log-distributions, one per gate.
    """
    if expert_state is None:
        raise StageOrderError("stage 3 needs a trained expert (stage 1)")
    if not random_control and imitator_states is None:
        raise StageOrderError("stage 3 needs trained imitators (stage 2)")
    t = config.train
    if random_control:
        n_gates = num_gates or (len(imitator_states) if imitator_states else len(config.model.windows))
        feats = _split_features(data, config, None, seed, n_gates)
        frozen_before = None
    else:
        n_gates = len(imitator_states)
        frozen_before = {c: digest(s) for c, s in imitator_states.items()}
        feats = _split_features(data, config, imitator_states, None, n_gates)

    expert = load_expert(data, config, expert_state)
    gates = trainable_gates(n_gates)
    opt = Adam(expert.parameters() + [gates], lr=t.finetune_lr, decay=t.decay, clip_norm=t.clip_norm)
    shuffle, drop = stage_rng(seed, "finetune", "shuffle"), stage_rng(seed, "finetune", "dropout")
    stage = "random" if random_control else "mixture"

    def dev_error() -> float:
        z = expert_logits(expert, data.dev, t.eval_batch_size)
        return error_rate(mixed_logits(z, feats["dev"], gates.data).argmax(1), data.dev.labels)

    history, best, best_err = [], None, np.inf
    for epoch in range(1, t.finetune_epochs + 1):
        start, tokens, losses = time.perf_counter(), 0, []
        for step, batch in enumerate(batch_iter(data.train, t.batch_size, shuffle, config.vocab.max_len)):
            out = expert.forward(batch.word_ids, batch.word_lengths, train=True, rng=drop)
            alphas = [Tensor(feats["train"][batch.indices, i]) for i in range(n_gates)]
            loss = fine_tune_loss(out.logits, alphas, gates, batch.labels)
            _check_finite(loss, stage, epoch, step)
            backward(loss)
            opt.step()
            tokens += int(batch.word_lengths.sum())
            losses.append(loss.item() * len(batch))
        wall = 1000.0 * (time.perf_counter() - start)
        err = dev_error()
        history.append(EpochRecord(epoch, err, float(np.sum(losses) / len(data.train)), wall, tokens))
        if err < best_err:
            best_err, best = err, (expert.state_dict(), gates.data.copy())
    if best is None:
        best = (expert.state_dict(), gates.data.copy())

    if frozen_before is not None and {c: digest(s) for c, s in imitator_states.items()} != frozen_before:
        raise StageIsolationError("imitator parameters changed during fine-tuning")

    expert.load_state_dict(best[0])
    z = expert_logits(expert, data.test, t.eval_batch_size)
    test_err = error_rate(mixed_logits(z, feats["test"], best[1]).argmax(1), data.test.labels) \
        if len(data.test) else None
    selected = select_epoch([r.dev_error for r in history]) if history else 0
    return StageResult(stage, seed, history, selected, best[0], test_error=test_err, gates=best[1])


# --------------------------------------------------------------- checkpoints

def model_checkpoint(stage: str, config: TrainConfig, expert_state=None, imitator_states=None,
                     gates=None, meta: Mapping | None = None) -> Checkpoint:
    tensors = {}
    for name, arr in (expert_state or {}).items():
        tensors[f"expert.{name}"] = arr
    for c, state in (imitator_states or {}).items():
        for name, arr in state.items():
            tensors[f"imitator.{c}.{name}"] = arr
    if gates is not None:
        tensors["gates"] = np.asarray(gates, dtype=np.float32)
    return Checkpoint(stage=stage, tensors=tensors, config=config.flat(), meta=dict(meta or {}))


ARCH_KEYS = ("model.emb_dim", "model.hidden_dim", "model.mlp_dim", "model.imitator_emb_dim", "model.kernel_dim")


def checkpoint_imitator_states(ckpt: Checkpoint) -> dict[int, dict[str, np.ndarray]]:
    states: dict[int, dict[str, np.ndarray]] = {}
    for key, arr in ckpt.group("imitator.").items():
        c, name = key.split(".", 1)
        states.setdefault(int(c), {})[name] = arr
    return states


def model_from_checkpoint(ckpt: Checkpoint, data: PreparedData, config: TrainConfig) -> MeinModel:
    """Rebuild a classifier from any stage's checkpoint."""
    ckpt.require_config(config.flat(), ARCH_KEYS)
    expert = build_expert(data, config, seed=0)
    ckpt.require_shapes({n: p.shape for n, p in expert.params.items()}, prefix="expert.")
    expert.load_state_dict(ckpt.group("expert."))
    gates = ckpt.tensors.get("gates", np.zeros(0, dtype=np.float32))
    random_seed = ckpt.meta.get("random_seed")
    imitators = [] if random_seed is not None else load_imitators(data, config, checkpoint_imitator_states(ckpt))
    if ckpt.stage == "imitators":
        gates = np.full(len(imitators), -np.inf, dtype=np.float32)
    return MeinModel(expert, imitators, np.asarray(gates, dtype=np.float32), random_seed)


# --------------------------------------------------------------- experiments

@dataclass
class SeedRun:
    seed: int
    expert: StageResult
    imitators: ImitatorResult
    mixture: StageResult
    random: StageResult | None = None

    def records(self, experiment: str, timing: bool = False) -> list[RunRecord]:
        rows = stage_records(experiment, self.expert, timing=timing)
        for c, res in self.imitators.results.items():
            rows += stage_records(experiment, res, timing=timing)
        rows += stage_records(experiment, self.mixture, timing=timing)
        if self.random is not None:
            rows += stage_records(experiment, self.random, timing=timing)
        return rows


def summary_records(experiment: str, stage: str, errors: Sequence[float]) -> list[RunRecord]:
    errors = np.asarray(errors, dtype=np.float64)
    return [RunRecord(experiment, "mean", stage, "", "", float(errors.mean())),
            RunRecord(experiment, "std", stage, "", "", float(errors.std()))]


@dataclass
class ProtocolResult:
    runs: list[SeedRun]

    def errors(self, which: str) -> np.ndarray:
        return np.array([getattr(r, which).test_error for r in self.runs], dtype=np.float64)

    def mean(self, which: str) -> float:
        return float(self.errors(which).mean())

    def std(self, which: str) -> float:
        return float(self.errors(which).std())

    def records(self, timing: bool = False) -> list[RunRecord]:
        rows = [rec for run in self.runs for rec in run.records("protocol", timing)]
        for which in ("expert", "mixture", "random"):
            if all(getattr(r, which) is not None for r in self.runs):
                rows += summary_records("protocol", f"{which}.selected", self.errors(which))
        return rows


def _protocol_seed(args) -> SeedRun:
    data, config, seed, random_control, expert = args
    expert = expert or train_expert(data, config, seed)
    imitators = train_imitators(data, expert.state, config, seed)
    mixture = fine_tune(data, expert.state, imitators.states(), config, seed)
    random = fine_tune(data, expert.state, imitators.states(), config, seed, random_control=True) \
        if random_control else None
    return SeedRun(seed, expert, imitators, mixture, random)


def _map(fn, tasks: list, jobs: int) -> list:
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(tasks))) as pool:
            return list(pool.map(fn, tasks))
    return [fn(task) for task in tasks]


def run_protocol(data: PreparedData, config: TrainConfig, seeds: Sequence[int] | None = None,
                 random_control: bool = True, jobs: int = 1,
                 experts: Mapping[int, StageResult] | None = None) -> ProtocolResult:
    """All three stages per seed, plus the random-feature control."""
    seeds = tuple(config.run.seeds if seeds is None else seeds)
    if not seeds:
        raise ValueError("need at least one seed")
    experts = experts or {}
    tasks = [(data, config, s, random_control, experts.get(s)) for s in seeds]
    return ProtocolResult(_map(_protocol_seed, tasks, jobs))


def train_experts(data: PreparedData, config: TrainConfig, seeds: Sequence[int], jobs: int = 1,
                  ) -> dict[int, StageResult]:
    results = _map(_expert_task, [(data, config, s) for s in seeds], jobs)
    return dict(zip(seeds, results))


def _expert_task(args) -> StageResult:
    return train_expert(*args)


def subsample(split: EncodedSplit, size: int, seed: int) -> EncodedSplit:
    """A fixed random subset of ``size`` items, kept in their original order.

    Subsets are prefixes of one permutation, so smaller sizes are nested in
    larger ones, and the full size gives back the split unchanged.
    """
    if size > len(split):
        raise ValueError(f"requested {size} unlabeled examples but only {len(split)} are available")
    if size < 0:
        raise ValueError("size must be >= 0")
    order = np.random.default_rng(seed).permutation(len(split))
    return split.subset(np.sort(order[:size]))


@dataclass
class CurveResult:
    experiment: str
    keys: list[str]                         # one label per point (size or window subset)
    errors: dict[str, list[float]]          # key -> per-seed test errors
    records: list[RunRecord]

    def mean(self, key: str) -> float:
        return float(np.mean(self.errors[key]))

    def std(self, key: str) -> float:
        return float(np.std(self.errors[key]))


def _sweep_seed(args):
    data, config, seed, sizes, expert = args
    expert = expert or train_expert(data, config, seed)
    rows, errs = stage_records("sweep", expert), {}
    for size in sizes:
        pool = subsample(data.unlabeled, size, config.data.subsample_seed)
        imitators = train_imitators(data, expert.state, config, seed, unlabeled=pool)
        tuned = fine_tune(data, expert.state, imitators.states(), config, seed)
        for c, res in imitators.results.items():
            rows += stage_records("sweep", res, stage=f"unlabeled={size}/imitator.c{c}")
        rows += stage_records("sweep", tuned, stage=f"unlabeled={size}/mixture")
        errs[str(size)] = tuned.test_error
    return rows, errs


def sweep_unlabeled(data: PreparedData, config: TrainConfig, sizes: Sequence[int],
                    seeds: Sequence[int] | None = None, jobs: int = 1,
                    experts: Mapping[int, StageResult] | None = None) -> CurveResult:
    """Stages 2-3 at several unlabeled-set sizes, each from the same stage-1 expert per seed."""
    sizes = [int(s) for s in sizes]
    if sizes != sorted(sizes):
        raise ValueError("sizes must be ascending")
    for s in sizes:
        if s > len(data.unlabeled):
            raise ValueError(f"size {s} exceeds the {len(data.unlabeled)} available unlabeled examples")
    seeds = tuple(config.run.seeds if seeds is None else seeds)
    experts = experts or {}
    outs = _map(_sweep_seed, [(data, config, s, sizes, experts.get(s)) for s in seeds], jobs)
    keys = [str(s) for s in sizes]
    records = [r for rows, _ in outs for r in rows]
    errors = {k: [errs[k] for _, errs in outs] for k in keys}
    for k in keys:
        records += summary_records("sweep", f"unlabeled={k}/mixture.selected", errors[k])
    return CurveResult("sweep", keys, errors, records)


def subset_label(subset: Sequence[int]) -> str:
    return ",".join(str(c) for c in subset)


def _ablate_seed(args):
    data, config, seed, subsets, expert = args
    expert = expert or train_expert(data, config, seed)
    rows, errs = stage_records("ablate", expert), {}
    if config.train.clip_norm is None:
        # imitators do not interact, so each window is trained once and shared
        needed = sorted({c for s in subsets for c in s})
        shared = train_imitators(data, expert.state, config, seed, windows=needed)
        for c, res in shared.results.items():
            rows += stage_records("ablate", res)
        trained = {subset_label(s): shared for s in subsets}
    else:
        trained = {}
        for s in subsets:
            trained[subset_label(s)] = train_imitators(data, expert.state, config, seed, windows=s)
            for c, res in trained[subset_label(s)].results.items():
                rows += stage_records("ablate", res, stage=f"windows={subset_label(s)}/imitator.c{c}")
    for s in subsets:
        key = subset_label(s)
        tuned = fine_tune(data, expert.state, trained[key].states(s), config, seed)
        rows += stage_records("ablate", tuned, stage=f"windows={key}/mixture")
        errs[key] = tuned.test_error
    return rows, errs


def ablate_windows(data: PreparedData, config: TrainConfig, subsets: Sequence[Sequence[int]],
                   seeds: Sequence[int] | None = None, jobs: int = 1,
                   experts: Mapping[int, StageResult] | None = None) -> CurveResult:
    """Fine-tuned error for each subset of imitator windows, from a shared stage-1 expert."""
    subsets = [tuple(s) for s in subsets]
    for s in subsets:
        if not s or len(set(s)) != len(s) or min(s) < 1:
            raise ValueError(f"window subset {s} must be nonempty, distinct, positive")
    seeds = tuple(config.run.seeds if seeds is None else seeds)
    experts = experts or {}
    outs = _map(_ablate_seed, [(data, config, s, subsets, experts.get(s)) for s in seeds], jobs)
    keys = [subset_label(s) for s in subsets]
    records = [r for rows, _ in outs for r in rows]
    errors = {k: [errs[k] for _, errs in outs] for k in keys}
    for k in keys:
        records += summary_records("ablate", f"windows={k}/mixture.selected", errors[k])
    return CurveResult("ablate", keys, errors, records)


@dataclass
class ThroughputRow:
    network: str
    tokens_per_sec: float
    relative_speed: float


def _time_steps(step_fn, batches, warmup: int) -> float:
    for batch in batches[:warmup]:
        step_fn(batch)
    start, tokens = time.perf_counter(), 0
    for batch in batches[warmup:]:
        tokens += step_fn(batch)
    return tokens / (time.perf_counter() - start)


def bench_throughput(data: PreparedData, config: TrainConfig,
                     window_sets: Sequence[Sequence[int]] = ((1,), (1, 2), (1, 2, 3), (1, 2, 3, 4)),
                     n_batches: int = 20, warmup: int = 2, seed: int = 0) -> list[ThroughputRow]:
    """Training tokens/sec (forward, backward, update) of the expert and of imitator groups."""
    t = config.train
    source = data.unlabeled if len(data.unlabeled) else data.train
    rng = stage_rng(seed, "bench", "shuffle")
    idx = rng.choice(len(source), size=(n_batches + warmup) * t.batch_size, replace=len(source) < (n_batches + warmup) * t.batch_size)
    batches = [make_batch(source, idx[k:k + t.batch_size], config.vocab.max_len)
               for k in range(0, len(idx), t.batch_size)]
    labels = stage_rng(seed, "bench", "targets").integers(0, data.num_classes, size=len(source))

    expert = build_expert(data, config, seed)
    opt = Adam(expert.parameters(), lr=t.lr, decay=t.decay)
    drop = stage_rng(seed, "bench", "dropout")

    def expert_step(batch) -> int:
        out = expert.forward(batch.word_ids, batch.word_lengths, train=True, rng=drop)
        backward(supervised_loss(out.logits, labels[batch.indices]))
        opt.step()
        return int(batch.word_lengths.sum())

    expert_tps = _time_steps(expert_step, batches, warmup)
    rows = [ThroughputRow("expert", expert_tps, 1.0)]
    targets = expert_targets(expert, source, t.eval_batch_size)
    for windows in window_sets:
        nets = [build_imitator(data, config, seed, c) for c in windows]
        iopt = Adam([p for n in nets for p in n.parameters()], lr=t.lr, decay=t.decay)

        def imitator_step(batch, nets=nets, iopt=iopt) -> int:
            log_qs = [n.window_log_probs(batch.bpe_ids) for n in nets]
            backward(imitation_loss(log_qs, targets[batch.indices], batch.bpe_lengths))
            iopt.step()
            return int(batch.bpe_lengths.sum())

        tps = _time_steps(imitator_step, batches, warmup)
        rows.append(ThroughputRow(f"imitators c={subset_label(windows)}", tps, tps / expert_tps))
    return rows
