"""Walk through the three training stages on a small synthetic corpus.

Run with ``python3 demos/three_stages.py``; takes about a minute on one core.
"""

import numpy as np

import mein.pipeline as P
from mein.config import TrainConfig
from mein.data import generate_synthetic, prepare


def main():
    config = TrainConfig.desk().with_overrides({
        "train.expert_epochs": 10, "train.imitator_epochs": 3, "train.finetune_epochs": 10,
        "synth.n_unlabeled": 2000,
    })
    corpus = generate_synthetic(config.synth)
    v = config.vocab
    data = prepare(corpus, v.min_count, v.bpe_merges, v.max_len)
    print(f"corpus: {len(data.train)} labeled, {len(data.unlabeled)} unlabeled, "
          f"{len(data.word_vocab)} words, {len(data.bpe_vocab)} BPE symbols")

    expert = P.train_expert(data, config, seed=0)
    print(f"stage 1  expert          test error {expert.test_error:.2f}%")

    imitators = P.train_imitators(data, expert.state, config, seed=0)
    for c, res in imitators.results.items():
        print(f"stage 2  imitator c={c}    dev KL {res.selected_dev_error:.4f} nats/window")

    mixture = P.fine_tune(data, expert.state, imitators.states(), config, seed=0)
    gates = 1.0 / (1.0 + np.exp(-mixture.gates.astype(np.float64)))
    print(f"stage 3  expert+imitators test error {mixture.test_error:.2f}%  gates {np.round(gates, 3)}")

    control = P.fine_tune(data, expert.state, imitators.states(), config, seed=0, random_control=True)
    print(f"control  random features  test error {control.test_error:.2f}%")

    # with every gate disabled the mixture is exactly the expert
    net = P.load_expert(data, config, expert.state)
    off = P.MeinModel(net, P.load_imitators(data, config, imitators.states()),
                      np.full(len(imitators.results), -np.inf, dtype=np.float32))
    same = np.array_equal(off.logits(data.test), P.MeinModel(net).logits(data.test))
    print(f"gates disabled reproduces the expert bitwise: {same}")


if __name__ == "__main__":
    main()
