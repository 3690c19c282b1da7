import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mein.autodiff import Tensor, check_gradients, ops
from mein.expert import ExpertNet
from mein.imitator import (
    PAD_ID,
    ImitatorNet,
    StageIsolationError,
    entropy,
    imitation_loss,
    imitator_forward,
    imitator_logit,
    kl_divergence,
    pad_and_convolve,
    window_distribution,
    window_kl,
)


def tiny_net(window=1, seed=0, vocab_size=9, num_classes=3, emb_dim=3, kernel_dim=4):
    return ImitatorNet(vocab_size, num_classes, window, emb_dim, kernel_dim, rng=np.random.default_rng(seed))


def leaky(x):
    return np.where(x > 0, x, 0.01 * x)


def reference_hidden(net, ids):
    """Explicit sliding-window dot products over the padded sequence."""
    p = {k: v.astype(np.float64) for k, v in net.state_dict().items()}
    c = net.window
    padded = [PAD_ID] * c + list(ids) + [PAD_ID] * c
    out = []
    for j in range(len(ids)):
        acc = p["conv.b"].copy()
        for k in range(2 * c + 1):
            acc += p["embedding"][padded[j + k]] @ p["conv.w"][k]
        out.append(leaky(acc))
    return np.array(out)


class TestPadAndConvolve:
    def test_windows_are_padded_with_the_pad_token(self):
        # embedding row t holds the scalar t; kernel slot k copies window position k
        net = tiny_net(window=1, vocab_size=6, emb_dim=1, kernel_dim=3)
        net.params["embedding"].data[:, 0] = np.arange(6)
        w = np.zeros((3, 1, 3), dtype=np.float32)
        for k in range(3):
            w[k, 0, k] = 1.0
        net.params["conv.w"].data = w
        o = pad_and_convolve(np.array([[2, 3, 4, 5]]), net).data[0]
        assert o.shape == (4, 3)
        np.testing.assert_array_equal(o, [[PAD_ID, 2, 3], [2, 3, 4], [3, 4, 5], [4, 5, PAD_ID]])

    def test_zero_kernel_gives_activated_bias(self):
        net = tiny_net()
        net.params["conv.w"].data[:] = 0.0
        net.params["conv.b"].data = np.array([-2.0, -0.5, 0.0, 1.5], dtype=np.float32)
        o = pad_and_convolve(np.array([[1, 2, 3]]), net).data[0]
        np.testing.assert_allclose(o, np.tile([-0.02, -0.005, 0.0, 1.5], (3, 1)), rtol=1e-6)

    @pytest.mark.parametrize("window", [1, 2, 3])
    def test_matches_sliding_window_oracle(self, window):
        net = tiny_net(window=window, seed=window)
        net.params["conv.b"].data = np.random.default_rng(1).normal(size=4).astype(np.float32) * 0.1
        ids = np.array([3, 1, 4, 1, 5, 8, 2])
        np.testing.assert_allclose(pad_and_convolve(ids[None], net).data[0], reference_hidden(net, ids),
                                   rtol=1e-5, atol=1e-6)

    @given(st.integers(1, 4), st.integers(1, 12))
    @settings(max_examples=30, deadline=None)
    def test_one_window_per_position(self, window, length):
        net = tiny_net(window=window)
        ids = np.arange(length)[None] % 8 + 1
        out = imitator_forward(net, ids)
        assert out.hidden.shape[1] == length and out.log_p.shape[1] == length

    def test_empty_sequence_rejected(self):
        with pytest.raises(ValueError, match="nonempty"):
            pad_and_convolve(np.zeros((1, 0), dtype=np.int64), tiny_net())

    def test_pad_embedding_is_zero_and_stays_frozen(self):
        net = tiny_net()
        np.testing.assert_array_equal(net.params["embedding"].data[PAD_ID], 0.0)
        ops.sum(net.window_log_probs(np.array([[1, 2, PAD_ID]]))).backward()
        np.testing.assert_array_equal(net.params["embedding"].grad[PAD_ID], 0.0)


class TestWindowDistribution:
    def test_zero_head_is_uniform(self):
        net = tiny_net()
        net.params["out.w"].data[:] = 0.0
        p = window_distribution(Tensor(np.ones((1, 2, 4))), net).data
        np.testing.assert_allclose(p, 1.0 / 3.0, rtol=1e-6)

    def test_hand_value(self):
        net = tiny_net(num_classes=2)
        net.params["out.w"].data[:] = 0.0
        net.params["out.b"].data = np.array([np.log(9.0), 0.0], dtype=np.float32)
        p = window_distribution(Tensor(np.ones((1, 1, 4))), net).data
        np.testing.assert_allclose(p[0, 0], [0.9, 0.1], rtol=1e-6)

    def test_rows_are_distributions(self):
        net = tiny_net(seed=4)
        p = window_distribution(pad_and_convolve(np.array([[1, 5, 2, 7]]), net), net).data
        np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-6)


class TestImitatorLogit:
    def test_identical_windows(self):
        p = np.array([0.2, 0.3, 0.5])
        log_p = Tensor(np.log(np.tile(p, (1, 4, 1))))
        np.testing.assert_allclose(imitator_logit(log_p, np.array([4])).data[0], np.log(p), rtol=1e-12)

    def test_two_window_mean(self):
        log_p = Tensor(np.log(np.array([[[0.8, 0.2], [0.4, 0.6]]])))
        np.testing.assert_allclose(imitator_logit(log_p, np.array([2])).data[0], np.log([0.6, 0.4]), rtol=1e-12)

    def test_padded_windows_are_ignored(self):
        log_p = Tensor(np.log(np.array([[[0.8, 0.2], [0.4, 0.6], [0.01, 0.99]]])))
        np.testing.assert_allclose(imitator_logit(log_p, np.array([2])).data[0], np.log([0.6, 0.4]), rtol=1e-12)

    @given(st.integers(0, 10_000), st.integers(1, 4), st.integers(1, 10))
    @settings(max_examples=40, deadline=None)
    def test_exp_alpha_is_a_distribution(self, seed, window, length):
        net = tiny_net(window=window, seed=seed % 7)
        ids = np.random.default_rng(seed).integers(1, 9, size=(2, length))
        alpha = net.logit(ids, np.array([length, max(1, length - 1)])).data
        q = np.exp(alpha.astype(np.float64))
        assert (q > 0).all()
        np.testing.assert_allclose(q.sum(axis=-1), 1.0, atol=1e-6)


class TestKl:
    def test_hand_value(self):
        expected = 0.5 * np.log(0.5 / 0.9) + 0.5 * np.log(0.5 / 0.1)
        assert kl_divergence([0.5, 0.5], [0.9, 0.1]) == pytest.approx(expected, rel=1e-12)
        assert expected == pytest.approx(0.5108, abs=1e-4)

    @given(st.integers(0, 2**31))
    @settings(max_examples=100, deadline=None)
    def test_gibbs_inequality(self, seed):
        r = np.random.default_rng(seed)
        p, q = r.dirichlet(np.ones(4)), r.dirichlet(np.ones(4))
        assert kl_divergence(p, q) >= -1e-12
        assert kl_divergence(p, p) == pytest.approx(0.0, abs=1e-12)

    def test_loss_at_exact_imitation_is_the_entropy(self):
        p = np.array([[0.7, 0.2, 0.1], [0.3, 0.3, 0.4]])
        log_q = Tensor(np.log(np.repeat(p[:, None, :], 5, axis=1)))
        lengths = np.array([5, 3])
        loss = imitation_loss([log_q], p, lengths).item()
        expected_ce = (5 * entropy(p[0]) + 3 * entropy(p[1])) / 2
        assert loss == pytest.approx(expected_ce, rel=1e-12)
        total, count = window_kl(log_q.data, p, lengths)
        assert count == 8 and total == pytest.approx(0.0, abs=1e-12)

    def test_loss_sums_over_imitators_and_windows(self):
        r = np.random.default_rng(0)
        p = r.dirichlet(np.ones(2), size=3)
        log_qs = [np.log(r.dirichlet(np.ones(2), size=(3, 4))) for _ in range(2)]
        lengths = np.array([4, 2, 1])
        loss = imitation_loss([Tensor(q) for q in log_qs], p, lengths).item()
        manual = sum(-(p[b] * q[b, j]).sum() for q in log_qs for b in range(3) for j in range(lengths[b])) / 3
        assert loss == pytest.approx(manual, rel=1e-12)
        kl_total = sum(window_kl(q, p, lengths)[0] for q in log_qs)
        assert loss - kl_total / 3 == pytest.approx(2 * (entropy(p) * lengths).sum() / 3, rel=1e-9)

    def test_composite_gradient(self):
        net = tiny_net(window=1, vocab_size=5, num_classes=2, emb_dim=2, kernel_dim=3)
        ids = np.array([[1, 2, 3, 4], [4, 3, 0, 0]])
        lengths = np.array([4, 2])
        names = ImitatorNet.PARAM_NAMES

        target = np.array([[0.3, 0.7], [0.8, 0.2]])

        def fn(a):
            # the pad row is a constant; rebuild the table so it takes no part in the check
            table = ops.concat([Tensor(np.zeros((1, 2))), a[0][1:]], axis=0)
            net.params = dict(zip(names, [table] + a[1:]))
            return imitation_loss([net.window_log_probs(ids)], target, lengths)

        def sample(r):
            return [r.normal(size=net.params[n].shape) * 0.5 for n in names]

        result = check_gradients(fn, sample, instances=10, seed=3)
        assert result.worst_error < 1e-4


class TestStageIsolation:
    def _expert(self):
        return ExpertNet(9, 3, 4, 3, 2, dropout=0.0, rng=np.random.default_rng(0))

    def test_live_expert_targets_are_rejected(self):
        expert = self._expert()
        z = expert.forward(np.array([[1, 2]])).logits
        net = tiny_net()
        with pytest.raises(StageIsolationError):
            imitation_loss([net.window_log_probs(np.array([[1, 2]]))], ops.softmax(z), np.array([2]))

    def test_backward_leaves_expert_untouched(self):
        expert = self._expert()
        before = expert.state_dict()
        p = ops.softmax(expert.forward(np.array([[1, 2, 3]])).logits).data
        net = tiny_net()
        imitation_loss([net.window_log_probs(np.array([[4, 5, 6]]))], p, np.array([3])).backward()
        assert all(t.grad is None for t in expert.parameters())
        assert all(net.params[n].grad is not None for n in ImitatorNet.PARAM_NAMES)
        for name, arr in expert.state_dict().items():
            np.testing.assert_array_equal(arr, before[name])

    def test_mismatched_targets(self):
        with pytest.raises(ValueError, match="match"):
            imitation_loss([Tensor(np.zeros((1, 2, 3)))], np.ones((1, 2)) / 2, np.array([2]))
