"""Command-line entry point.

A run directory holds everything one training run produces::

    RUN/config.txt                 config snapshot (section.key = value)
    RUN/words.vocab                expert vocabulary, one token per line
    RUN/bpe.merges, RUN/bpe.symbols
    RUN/seed-<s>/expert.ckpt       stage 1
    RUN/seed-<s>/imitators.ckpt    stage 2
    RUN/seed-<s>/mixture.ckpt      stage 3 (random.ckpt for the control)
    RUN/train.csv, RUN/eval.csv    per-epoch and evaluation rows
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import pipeline as P
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, TrainConfig, load_config, parse_config_text, parse_override
from .data import Corpus, CorpusFormatError, PreparedData, generate_synthetic, load_corpus, prepare
from .imitator import StageIsolationError
from .tokenization import BpeVocabulary, WordVocabulary

log = logging.getLogger("mein")

STAGE_FILES = {"expert": "expert.ckpt", "imitators": "imitators.ckpt", "finetune": "mixture.ckpt"}
RANDOM_FILE = "random.ckpt"


class CliError(RuntimeError):
    pass


# --------------------------------------------------------------- argument helpers

def parse_seeds(text: str) -> tuple[int, ...]:
    """``"5"`` means seeds 0..4; ``"3,7"`` lists seeds explicitly."""
    text = text.strip()
    if "," not in text:
        n = int(text)
        if n < 1:
            raise argparse.ArgumentTypeError("--seeds needs a positive count or a comma list")
        return tuple(range(n))
    return tuple(int(s) for s in text.split(",") if s.strip())


def parse_sizes(text: str) -> list[int]:
    return [int(s) for s in text.split(",") if s.strip()]


def parse_subsets(text: str) -> list[tuple[int, ...]]:
    return [tuple(int(c) for c in part.split(",") if c.strip()) for part in text.split(";") if part.strip()]


def resolve_jobs(flag: int | None, config: TrainConfig) -> int:
    if flag is not None:
        return flag
    env = os.environ.get("MEIN_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise CliError(f"MEIN_THREADS must be an integer, got {env!r}") from None
    return config.run.jobs


def _common(parser: argparse.ArgumentParser, out_required: bool = True) -> None:
    parser.add_argument("--config", type=Path, help="config file (section.key = value lines)")
    parser.add_argument("--out", type=Path, required=out_required, help="output / run directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mein", description="Expert/imitator mixture text classification",
        epilog="Any subcommand also accepts trailing section.key=value config overrides.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="run one training stage")
    train.add_argument("stage", choices=sorted(STAGE_FILES))
    _common(train)
    seeds = train.add_mutually_exclusive_group()
    seeds.add_argument("--seed", type=int)
    seeds.add_argument("--seeds", type=parse_seeds)
    train.add_argument("--jobs", type=int)
    train.add_argument("--random-imn", action="store_true", help="fine-tune with random vectors in place of imitators")

    ev = sub.add_parser("eval", help="error rate of a trained model")
    _common(ev)
    ev.add_argument("--checkpoint", type=Path, help="checkpoint file (default: RUN/seed-<s>/<stage>.ckpt)")
    ev.add_argument("--stage", choices=["expert", "imitators", "finetune", "random"], default="finetune")
    ev.add_argument("--split", default="test", help="train, dev or test")
    seeds = ev.add_mutually_exclusive_group()
    seeds.add_argument("--seed", type=int)
    seeds.add_argument("--seeds", type=parse_seeds)

    exp = sub.add_parser("experiment", help="protocol, unlabeled sweep, window ablation or throughput")
    exp.add_argument("kind", choices=["protocol", "sweep", "ablate", "bench"])
    _common(exp)
    exp.add_argument("--seeds", type=parse_seeds)
    exp.add_argument("--jobs", type=int)
    exp.add_argument("--sizes", type=parse_sizes, default=None, help="e.g. 500,2000,10000")
    exp.add_argument("--subsets", type=parse_subsets, default=None, help="e.g. '1;1,2;1,2,3;1,2,3,4'")

    synth = sub.add_parser("synth", help="write a synthetic corpus directory")
    _common(synth)
    return parser


# --------------------------------------------------------------- config and data

def _config_for(args, run_dir: Path | None = None) -> TrainConfig:
    overrides = dict(parse_override(o) for o in args.overrides)
    base = TrainConfig.desk()
    snapshot = run_dir / "config.txt" if run_dir is not None else None
    if snapshot is not None and snapshot.exists():
        base = base.with_overrides(parse_config_text(snapshot.read_text(encoding="utf-8"), str(snapshot)))
    return load_config(args.config, overrides, base=base)


def corpus_for(config: TrainConfig) -> Corpus:
    if config.data.corpus:
        return load_corpus(config.data.corpus)
    return generate_synthetic(config.synth)


def data_for(config: TrainConfig, run_dir: Path | None = None) -> PreparedData:
    """Encode the corpus, reusing vocabularies saved in ``run_dir`` when present."""
    corpus = corpus_for(config)
    v = config.vocab
    words = bpe = None
    if run_dir is not None and (run_dir / "words.vocab").exists():
        words = WordVocabulary.load(run_dir / "words.vocab")
        bpe = BpeVocabulary.load(run_dir / "bpe.merges", run_dir / "bpe.symbols")
    data = prepare(corpus, v.min_count, v.bpe_merges, v.max_len, word_vocab=words, bpe_vocab=bpe)
    if run_dir is not None and words is None:
        run_dir.mkdir(parents=True, exist_ok=True)
        data.word_vocab.save(run_dir / "words.vocab")
        data.bpe_vocab.save(run_dir / "bpe.merges", run_dir / "bpe.symbols")
    return data


def _seeds(args, config: TrainConfig) -> tuple[int, ...]:
    if getattr(args, "seed", None) is not None:
        return (args.seed,)
    if getattr(args, "seeds", None):
        return tuple(args.seeds)
    return tuple(config.run.seeds)


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise P.StageOrderError(f"missing {path}: run `mein train {stage}` first")
    return path


# --------------------------------------------------------------- commands

def cmd_train(args) -> int:
    run = args.out
    config = _config_for(args, run)
    run.mkdir(parents=True, exist_ok=True)
    config.save(run / "config.txt")
    data = data_for(config, run)
    records = []
    for seed in _seeds(args, config):
        seed_dir = run / f"seed-{seed}"
        meta = {"seed": seed, "num_classes": data.num_classes}
        if args.stage == "expert":
            res = P.train_expert(data, config, seed)
            ckpt = P.model_checkpoint("expert", config, res.state, gates=res.gates, meta=meta)
            save_checkpoint(ckpt, seed_dir / STAGE_FILES["expert"])
            records += P.stage_records("train", res, timing=True)
            print(f"seed {seed}: expert selected epoch {res.selected_epoch}, test error {res.test_error:.2f}%")
        elif args.stage == "imitators":
            expert = load_checkpoint(_require(seed_dir / STAGE_FILES["expert"], "expert")).require_stage("expert")
            expert.require_config(config.flat(), P.ARCH_KEYS)
            jobs = resolve_jobs(args.jobs, config)
            res = P.train_imitators(data, expert.group("expert."), config, seed,
                                    mode="independent" if jobs > 1 else "joint", jobs=jobs)
            ckpt = P.model_checkpoint("imitators", config, expert.group("expert."), res.states(),
                                      gates=np.full(len(res.windows), -np.inf, dtype=np.float32), meta=meta)
            save_checkpoint(ckpt, seed_dir / STAGE_FILES["imitators"])
            for r in res.results.values():
                records += P.stage_records("train", r, timing=True)
            kls = ", ".join(f"c={c}: {r.selected_dev_error:.4f}" for c, r in res.results.items()
                            if r.selected_dev_error is not None)
            print(f"seed {seed}: imitators trained (dev KL {kls or 'n/a'})")
        else:
            expert = load_checkpoint(_require(seed_dir / STAGE_FILES["expert"], "expert")).require_stage("expert")
            expert.require_config(config.flat(), P.ARCH_KEYS)
            imitator_path = seed_dir / STAGE_FILES["imitators"]
            if args.random_imn:
                states = None
                if imitator_path.exists():
                    states = P.checkpoint_imitator_states(load_checkpoint(imitator_path).require_stage("imitators"))
                res = P.fine_tune(data, expert.group("expert."), states, config, seed, random_control=True)
                meta["random_seed"] = seed
                ckpt = P.model_checkpoint("mixture", config, res.state, gates=res.gates, meta=meta)
                save_checkpoint(ckpt, seed_dir / RANDOM_FILE)
            else:
                imitators = load_checkpoint(_require(imitator_path, "imitators")).require_stage("imitators")
                states = P.checkpoint_imitator_states(imitators)
                res = P.fine_tune(data, expert.group("expert."), states, config, seed)
                ckpt = P.model_checkpoint("mixture", config, res.state, states, gates=res.gates, meta=meta)
                save_checkpoint(ckpt, seed_dir / STAGE_FILES["finetune"])
            records += P.stage_records("train", res, timing=True)
            print(f"seed {seed}: {res.stage} selected epoch {res.selected_epoch}, test error {res.test_error:.2f}%")
    P.write_csv(run / "train.csv", records, append=True)
    return 0


def cmd_eval(args) -> int:
    run = args.out
    config = _config_for(args, run)
    data = data_for(config, run)
    if args.split not in ("train", "dev", "test"):
        raise CliError(f"unknown split {args.split!r}; expected train, dev or test")
    split = getattr(data, args.split)
    if len(split) == 0:
        raise CliError(f"split {args.split!r} is empty")
    if args.checkpoint is not None:
        targets = [("-", args.checkpoint)]
    else:
        name = RANDOM_FILE if args.stage == "random" else STAGE_FILES[args.stage]
        stage = "finetune" if args.stage == "random" else args.stage
        targets = [(s, _require(run / f"seed-{s}" / name, stage)) for s in _seeds(args, config)]
    errors, records = [], []
    for seed, path in targets:
        ckpt = load_checkpoint(path)
        model = P.model_from_checkpoint(ckpt, data, config)
        err = P.evaluate(model, split, config.train.eval_batch_size)
        errors.append(err)
        records.append(P.RunRecord("eval", seed, f"{ckpt.stage}:{args.split}", "", "", err))
        print(f"{path}: {args.split} error {err:.2f}%")
    if len(errors) > 1:
        print(f"mean {np.mean(errors):.2f} ± {np.std(errors):.2f} over {len(errors)} runs")
    P.write_csv(run / "eval.csv", records, append=True)
    return 0


def _write_summary(path: Path, header: Sequence[str], rows: list[Sequence]) -> None:
    P.write_csv(path, rows, columns=header)


def plot_sweep(path: Path, sizes: Sequence[int], means: Sequence[float], stds: Sequence[float]) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "mein"  # stable element ids
    fig, ax = plt.subplots(figsize=(5, 3.5))
    xs = [max(s, 1) for s in sizes]
    ax.errorbar(xs, means, yerr=stds, marker="o", capsize=3)
    ax.set_xscale("log")
    ax.set_xlabel("unlabeled examples")
    ax.set_ylabel("test error (%)")
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def cmd_experiment(args) -> int:
    out = args.out
    config = _config_for(args)
    out.mkdir(parents=True, exist_ok=True)
    config.save(out / "config.txt")
    data = data_for(config)
    seeds = _seeds(args, config)
    jobs = resolve_jobs(args.jobs, config)

    if args.kind == "protocol":
        res = P.run_protocol(data, config, seeds, jobs=jobs)
        P.write_csv(out / "protocol.csv", res.records())
        P.write_csv(out / "protocol_timing.csv", res.records(timing=True))
        for which, label in (("expert", "expert"), ("mixture", "+imitators"), ("random", "+random")):
            print(f"{label:>12}: {res.mean(which):.2f} ± {res.std(which):.2f}")
    elif args.kind == "sweep":
        sizes = args.sizes or [500, 2000, 10000]
        res = P.sweep_unlabeled(data, config, sizes, seeds, jobs=jobs)
        P.write_csv(out / "sweep.csv", res.records)
        rows = [(int(k), res.mean(k), res.std(k)) for k in res.keys]
        _write_summary(out / "sweep_summary.csv", ("unlabeled", "mean_error", "std_error"), rows)
        plot_sweep(out / "sweep.svg", [r[0] for r in rows], [r[1] for r in rows], [r[2] for r in rows])
        for size, mean, std in rows:
            print(f"{size:>8}: {mean:.2f} ± {std:.2f}")
    elif args.kind == "ablate":
        subsets = args.subsets or [(1,), (1, 2), (1, 2, 3), (1, 2, 3, 4)]
        res = P.ablate_windows(data, config, subsets, seeds, jobs=jobs)
        P.write_csv(out / "ablate.csv", res.records)
        rows = [(chr(ord("A") + i) if i < 26 else str(i), k, res.mean(k), res.std(k)) for i, k in enumerate(res.keys)]
        _write_summary(out / "ablate_summary.csv", ("label", "windows", "mean_error", "std_error"), rows)
        for label, key, mean, std in rows:
            print(f"{label} (c={key}): {mean:.2f} ± {std:.2f}")
    else:
        rows = P.bench_throughput(data, config, seed=seeds[0])
        _write_summary(out / "bench.csv", ("network", "tokens_per_sec", "relative_speed"),
                       [(r.network, r.tokens_per_sec, r.relative_speed) for r in rows])
        for r in rows:
            print(f"{r.network:>22}: {r.tokens_per_sec:12.0f} tok/s  {r.relative_speed:6.2f}x")
    return 0


def cmd_synth(args) -> int:
    config = _config_for(args)
    corpus = generate_synthetic(config.synth)
    corpus.save(args.out)
    print(f"wrote {len(corpus.train)}/{len(corpus.dev)}/{len(corpus.test)} labeled and "
          f"{len(corpus.unlabeled)} unlabeled examples to {args.out}")
    return 0


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "experiment": cmd_experiment, "synth": cmd_synth}
EXPECTED_ERRORS = (CliError, ConfigError, CheckpointError, CorpusFormatError, P.StageOrderError,
                   P.TrainingDivergedError, StageIsolationError, FileNotFoundError, ValueError, KeyError)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    bad = [item for item in extra if item.startswith("-") or "=" not in item]
    if bad:
        parser.error(f"unrecognized arguments: {' '.join(bad)}")
    args.overrides = extra
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 130
    except EXPECTED_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
