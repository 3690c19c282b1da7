import dataclasses
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mein.data import (
    Corpus,
    CorpusFormatError,
    EncodedSplit,
    SynthSpec,
    batch_iter,
    generate_synthetic,
    load_corpus,
    pad_sequences,
    prepare,
)
from mein.tokenization import tokenize

CHI2_1DOF_P001 = 10.828  # upper 0.1% point of chi-square with one degree of freedom


def write_corpus(root, train, dev=None, test=None, unlabeled=None):
    root.mkdir(exist_ok=True)
    (root / "train.tsv").write_text(train)
    (root / "dev.tsv").write_text(dev if dev is not None else train)
    (root / "test.tsv").write_text(test if test is not None else train)
    if unlabeled is not None:
        (root / "unlabeled.txt").write_text(unlabeled)
    return root


class TestLoadCorpus:
    def test_single_line(self, tmp_path):
        corpus = load_corpus(write_corpus(tmp_path / "c", "1\tgreat movie\n", unlabeled="fine film\n"))
        assert corpus.train == [("great movie", 0)]
        assert corpus.class_names == ["1"] and corpus.unlabeled == ["fine film"]

    def test_numeric_labels_sort_numerically(self, tmp_path):
        corpus = load_corpus(write_corpus(tmp_path / "c", "10\ta\n2\tb\n1\tc\n", unlabeled=""))
        assert corpus.class_names == ["1", "2", "10"]
        assert [y for _, y in corpus.train] == [2, 1, 0]

    def test_classes_file_fixes_order(self, tmp_path):
        root = write_corpus(tmp_path / "c", "pos\ta\nneg\tb\n", unlabeled="")
        (root / "classes.txt").write_text("pos\nneg\n")
        assert [y for _, y in load_corpus(root).train] == [0, 1]

    def test_malformed_line_names_the_line(self, tmp_path):
        root = write_corpus(tmp_path / "c", "1\tok\nno tab here\n", unlabeled="")
        with pytest.raises(CorpusFormatError, match=r"train\.tsv:2"):
            load_corpus(root)

    def test_unknown_label_in_test(self, tmp_path):
        root = write_corpus(tmp_path / "c", "0\ta\n1\tb\n", test="0\ta\n7\tc\n", unlabeled="")
        with pytest.raises(CorpusFormatError, match=r"test\.tsv:2.*'7'"):
            load_corpus(root)

    def test_missing_unlabeled_warns(self, tmp_path):
        with pytest.warns(UserWarning, match="unlabeled"):
            corpus = load_corpus(write_corpus(tmp_path / "c", "0\ta\n"))
        assert corpus.unlabeled == []

    def test_missing_split(self, tmp_path):
        root = write_corpus(tmp_path / "c", "0\ta\n", unlabeled="")
        (root / "dev.tsv").unlink()
        with pytest.raises(FileNotFoundError, match="dev"):
            load_corpus(root)

    def test_save_load_roundtrip_is_idempotent(self, tmp_path):
        corpus = generate_synthetic(SynthSpec(n_train=20, n_dev=10, n_test=10, n_unlabeled=15, seed=3))
        corpus.save(tmp_path / "a")
        first = load_corpus(tmp_path / "a")
        first.save(tmp_path / "b")
        second = load_corpus(tmp_path / "b")
        for split in ("train", "dev", "test", "unlabeled", "class_names"):
            assert getattr(first, split) == getattr(corpus, split) == getattr(second, split)


class TestGenerator:
    def test_deterministic(self):
        spec = SynthSpec(n_train=30, n_dev=5, n_test=5, n_unlabeled=30, seed=5)
        a, b = generate_synthetic(spec), generate_synthetic(spec)
        assert a.train == b.train and a.unlabeled == b.unlabeled

    def test_sentence_lengths_and_vocab(self):
        spec = SynthSpec(n_train=200, n_dev=0, n_test=0, n_unlabeled=100)
        corpus = generate_synthetic(spec)
        texts = [t for t, _ in corpus.train] + corpus.unlabeled
        lengths = [len(tokenize(t)) for t in texts]
        assert min(lengths) >= spec.min_len and max(lengths) <= spec.max_len
        assert len({w for t in texts for w in tokenize(t)}) <= spec.vocab_size

    def test_cue_spans_cover_one_to_four(self):
        lex = generate_synthetic(SynthSpec(n_train=0, n_dev=0, n_test=0, n_unlabeled=0)).lexicon
        assert sorted({len(c) for cues in lex.cues for c in cues}) == [1, 2, 3, 4]

    def test_rule_agrees_with_labels_at_rate_one_minus_noise(self):
        spec = SynthSpec(n_train=10_000, n_dev=0, n_test=0, n_unlabeled=0, noise=0.1, seed=11)
        corpus = generate_synthetic(spec)
        n = len(corpus.train)
        agree = sum(corpus.lexicon.rule(t) == y for t, y in corpus.train)
        expected = n * (1 - spec.noise)
        stat = (agree - expected) ** 2 / expected + (agree - expected) ** 2 / (n - expected)
        assert stat < CHI2_1DOF_P001

    def test_default_spec_oracle_error_is_near_noise(self):
        corpus = generate_synthetic(SynthSpec())
        err = np.mean([corpus.lexicon.rule(t) != y for t, y in corpus.test])
        assert abs(err - 0.10) < 0.03

    def test_noise_free_unigram_corpus_is_rule_consistent(self):
        spec = SynthSpec(lexicon_size=1, noise=0.0, n_train=100, n_dev=0, n_test=0, n_unlabeled=50)
        corpus = generate_synthetic(spec)
        assert all(len(cues) == 1 and len(cues[0]) == 1 for cues in corpus.lexicon.cues)
        assert all(corpus.lexicon.rule(t) == y for t, y in corpus.train)
        assert all(corpus.lexicon.rule(t) is not None for t in corpus.unlabeled)

    @pytest.mark.parametrize("noise", [-0.1, 0.5, 0.7])
    def test_noise_out_of_range(self, noise):
        with pytest.raises(ValueError, match="noise"):
            generate_synthetic(dataclasses.replace(SynthSpec(), noise=noise))


@pytest.fixture(scope="module")
def prepared():
    corpus = generate_synthetic(SynthSpec(n_train=10, n_dev=5, n_test=5, n_unlabeled=40, seed=1))
    return prepare(corpus, bpe_merges=50, max_len=12)


class TestBatching:
    def test_remainder_batch(self, prepared):
        batches = list(batch_iter(prepared.train, 32, seed=0))
        assert len(batches) == 1 and len(batches[0]) == 10
        assert sorted(batches[0].indices.tolist()) == list(range(10))

    def test_same_seed_same_order(self, prepared):
        a = [b.indices.tolist() for b in batch_iter(prepared.unlabeled, 8, seed=4)]
        b = [b.indices.tolist() for b in batch_iter(prepared.unlabeled, 8, seed=4)]
        c = [b.indices.tolist() for b in batch_iter(prepared.unlabeled, 8, seed=5)]
        assert a == b and a != c

    def test_unshuffled_order(self, prepared):
        assert [b.indices.tolist() for b in batch_iter(prepared.dev, 2)] == [[0, 1], [2, 3], [4]]

    def test_streams_padded_by_their_own_lengths(self, prepared):
        batch = next(batch_iter(prepared.train, 4, seed=0))
        assert batch.word_ids.shape == (4, batch.word_lengths.max())
        assert batch.bpe_ids.shape == (4, batch.bpe_lengths.max())
        for row, i in enumerate(batch.indices):
            n = batch.bpe_lengths[row]
            np.testing.assert_array_equal(batch.bpe_ids[row, :n], prepared.train.bpe_ids[i])
            assert (batch.bpe_ids[row, n:] == 0).all()
        np.testing.assert_array_equal(batch.labels, prepared.train.labels[batch.indices])

    def test_truncation(self, prepared):
        assert max(len(w) for w in prepared.unlabeled.word_ids) <= 12
        batch = next(batch_iter(prepared.unlabeled, 40, max_len=5))
        assert batch.word_ids.shape[1] <= 5 and batch.bpe_lengths.max() <= 5

    def test_bad_batch_size(self, prepared):
        with pytest.raises(ValueError):
            next(batch_iter(prepared.train, 0))

    @given(st.lists(st.integers(1, 9), min_size=1, max_size=6))
    @settings(max_examples=50, deadline=None)
    def test_pad_sequences(self, lengths):
        seqs = [np.arange(1, n + 1) for n in lengths]
        out, got = pad_sequences(seqs)
        np.testing.assert_array_equal(got, lengths)
        assert (out > 0).sum() == sum(lengths)

    def test_subset_and_token_counts(self, prepared):
        sub = prepared.train.subset([3, 1])
        assert isinstance(sub, EncodedSplit) and len(sub) == 2
        np.testing.assert_array_equal(sub.labels, prepared.train.labels[[3, 1]])
        assert sub.num_word_tokens == len(prepared.train.word_ids[3]) + len(prepared.train.word_ids[1])


def test_prepare_rejects_texts_that_encode_to_nothing():
    corpus = Corpus(train=[("a", 0)], dev=[("   ", 0)], test=[("a", 0)], unlabeled=[], class_names=["0"])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        with pytest.raises(ValueError, match="empty"):
            prepare(corpus, bpe_merges=0)
