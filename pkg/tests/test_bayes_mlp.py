"""Masked MLP: forward pass, mask sampling, training and checkpoints."""
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bayesal import bayes_mlp as bm
from conftest import MASK_A, MASK_C, OUT_A, OUT_C, OUT_ONES, X_HAND, W1, W2, gradient_check


def _ones(params):
    return [np.ones_like(w) for w in params.weights]


class TestForward:
    def test_zero_weights_give_uniform(self):
        p = bm.init_params((5, 7, 4), seed=0)
        zero = bm.ModelParams(tuple(np.zeros_like(w) for w in p.weights),
                              tuple(np.zeros_like(b) for b in p.biases))
        mask = bm.sample_masks(zero, 1, seed=3)[0]
        x = np.random.default_rng(1).normal(size=5)
        np.testing.assert_array_equal(bm.forward(zero, mask, x), np.full(4, 0.25))

    def test_all_ones_mask_is_unmasked_pass(self):
        p = bm.init_params((6, 8, 8, 3), seed=2)
        x = np.random.default_rng(0).normal(size=(4, 6))
        h = x
        for w, b in zip(p.weights[:-1], p.biases[:-1]):
            h = np.tanh(h @ w + b)
        ref = bm.softmax(h @ p.weights[-1] + p.biases[-1])
        np.testing.assert_array_equal(bm.forward(p, _ones(p), x), ref)

    @pytest.mark.parametrize("mask, expected", [
        (MASK_A, OUT_A),
        ((np.ones_like(W1), np.ones_like(W2)), OUT_ONES),
        (MASK_C, OUT_C),
    ])
    def test_hand_network(self, hand_net, mask, expected):
        np.testing.assert_allclose(bm.forward(hand_net, mask, X_HAND), expected, rtol=0, atol=1e-15)

    def test_batch_matches_rows(self, hand_net):
        X = np.array([X_HAND, [0.2, 0.3], [-1.0, 2.0]])
        batch = bm.forward(hand_net, MASK_A, X)
        for i, x in enumerate(X):
            np.testing.assert_allclose(batch[i], bm.forward(hand_net, MASK_A, x), atol=1e-15)

    def test_dimension_mismatch(self, hand_net):
        with pytest.raises(bm.ShapeError):
            bm.forward(hand_net, MASK_A, np.zeros(3))

    def test_mask_shape_mismatch(self, hand_net):
        with pytest.raises(bm.ShapeError):
            bm.forward(hand_net, (np.ones((2, 4)), np.ones((3, 4))), X_HAND)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.floats(-50, 50))
    def test_row_stochastic(self, seed, shift):
        p = bm.init_params((4, 6, 5), seed=seed, scale=3.0)
        mask = bm.sample_masks(p, 1, seed)[0]
        x = np.random.default_rng(seed).normal(size=(3, 4)) + shift
        out = bm.forward(p, mask, x)
        assert np.all(out >= 0)
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-6)


class TestSampleMasks:
    def test_deterministic(self):
        p = bm.init_params((5, 4, 3), seed=0)
        a = bm.sample_masks(p, 3, seed=7)
        b = bm.sample_masks(p, 3, seed=7)
        for ma, mb in zip(a, b):
            for ea, eb in zip(ma.masks, mb.masks):
                np.testing.assert_array_equal(ea, eb)

    def test_empirical_keep_rate(self):
        p = bm.init_params((3, 2, 2), seed=0)
        draws = bm.sample_masks(p, 10_000, seed=11)
        for layer in range(2):
            mean = np.mean([d.masks[layer] for d in draws], axis=0)
            assert np.all((mean >= 0.45) & (mean <= 0.55))

    def test_single_draw(self):
        p = bm.init_params((3, 2, 2), seed=0)
        assert len(bm.sample_masks(p, 1, seed=0)) == 1

    def test_zero_draws_rejected(self):
        p = bm.init_params((3, 2, 2), seed=0)
        with pytest.raises(ValueError):
            bm.sample_masks(p, 0, seed=0)

    def test_masked_weights(self):
        p = bm.init_params((3, 2, 2), seed=0)
        d = bm.sample_masks(p, 1, seed=4)[0]
        for w, e, wm in zip(p.weights, d.masks, d.weights):
            np.testing.assert_array_equal(wm, w * e)
            assert set(np.unique(e)) <= {0.0, 1.0}


class TestGradient:
    @pytest.mark.parametrize("seed", range(20))
    def test_finite_differences(self, seed):
        assert gradient_check(seed) < 1e-4

    def test_masked_entries_have_zero_gradient(self):
        p = bm.init_params((4, 5, 3), seed=0)
        mask = bm.sample_masks(p, 1, seed=9)[0]
        X = np.random.default_rng(0).normal(size=(6, 4))
        _, dW, _ = bm.loss_and_grad(p, mask, X, np.array([0, 1, 2, 0, 1, 2]))
        for g, e in zip(dW, mask.masks):
            assert np.all(g[e == 0] == 0)


def _separable(seed, n=200):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, size=n)
    X = rng.normal(size=(n, 4)) + np.where(y[:, None] == 1, 1.5, -1.5) * np.array([1, 1, 0, 0])
    return X, y


class TestTraining:
    def test_zero_epochs_identity(self):
        p = bm.init_params((4, 8, 2), seed=0)
        X, y = _separable(0, 20)
        assert bm.train_epochs(p, X, y, epochs=0, lr=0.1, batch_size=8, seed=0) is p

    def test_empty_set_rejected(self):
        p = bm.init_params((4, 8, 2), seed=0)
        with pytest.raises(ValueError):
            bm.train_epochs(p, np.zeros((0, 4)), np.zeros(0, int), epochs=1, lr=0.1,
                            batch_size=8, seed=0)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_aborts(self):
        p = bm.init_params((4, 8, 2), seed=0)
        X, y = _separable(0, 20)
        with pytest.raises(bm.TrainingDivergence, match="non-finite loss"):
            bm.train_epochs(p, X * np.inf, y, epochs=1, lr=0.1, batch_size=8, seed=0)

    def test_separable_toy(self):
        from sklearn.linear_model import LogisticRegression

        X, y = _separable(3)
        # sanity oracle: the set really is (nearly) linearly separable
        assert LogisticRegression().fit(X, y).score(X, y) >= 0.95
        p = bm.init_params((4, 16, 16, 2), seed=1)
        p = bm.train_epochs(p, X, y, epochs=200, lr=0.05, batch_size=16, seed=2)
        masks = bm.sample_masks(p, 30, seed=5)
        mean = bm.predictive_batch(p, masks, np.arange(len(X)), X).probs.mean(axis=1)
        assert np.mean(mean.argmax(axis=1) == y) >= 0.95

    def test_loss_trend(self):
        X, y = _separable(4)
        p = bm.init_params((4, 16, 16, 2), seed=0)
        eval_masks = bm.sample_masks(p, 20, seed=99)
        losses = []
        for epoch in range(50):
            p = bm.train_epochs(p, X, y, epochs=1, lr=0.02, batch_size=16, seed=epoch)
            losses.append(np.mean([bm.loss_and_grad(p, m, X, y)[0] for m in eval_masks]))
        assert np.median(losses[-5:]) < np.median(losses[:5])

    def test_deterministic(self):
        X, y = _separable(5, 50)
        p = bm.init_params((4, 8, 2), seed=0)
        a = bm.train_epochs(p, X, y, epochs=3, lr=0.1, batch_size=8, seed=4)
        b = bm.train_epochs(p, X, y, epochs=3, lr=0.1, batch_size=8, seed=4)
        assert a.equals(b)
        assert not a.equals(p)


class TestPredictive:
    def test_rows_are_forward_outputs(self, hand_net):
        masks = [bm.MaskedParameters(hand_net, tuple(m), 0, i)
                 for i, m in enumerate((MASK_A, (np.ones_like(W1), np.ones_like(W2)), MASK_C))]
        pm = bm.predictive_matrix(hand_net, masks, 7, X_HAND)
        assert (pm.item_id, pm.M, pm.J) == (7, 3, 3)
        np.testing.assert_allclose(pm.probs, [OUT_A, OUT_ONES, OUT_C], atol=1e-15)

    def test_single_draw(self, hand_net):
        masks = bm.sample_masks(hand_net, 1, seed=3)
        pm = bm.predictive_matrix(hand_net, masks, 0, X_HAND)
        np.testing.assert_array_equal(pm.probs[0], bm.forward(hand_net, masks[0], X_HAND))

    def test_all_ones_rows_identical(self, hand_net):
        masks = [bm.MaskedParameters(hand_net, (np.ones_like(W1), np.ones_like(W2)), 0, i)
                 for i in range(4)]
        pm = bm.predictive_matrix(hand_net, masks, 0, X_HAND)
        assert np.all(pm.probs == pm.probs[0])

    def test_batch_matches_single(self):
        p = bm.init_params((5, 6, 4), seed=0)
        masks = bm.sample_masks(p, 5, seed=1)
        X = np.random.default_rng(2).normal(size=(3, 5))
        batch = bm.predictive_batch(p, masks, [10, 11, 12], X)
        for pm, x, i in zip(batch.matrices(), X, [10, 11, 12]):
            ref = bm.predictive_matrix(p, masks, i, x)
            # batched and single-row matmuls may differ in the last ulp
            np.testing.assert_allclose(pm.probs, ref.probs, rtol=0, atol=1e-15)
            assert pm.item_id == i

    def test_mask_determinism_bit_exact(self):
        p = bm.init_params((5, 6, 4), seed=0)
        X = np.random.default_rng(2).normal(size=(3, 5))
        a = bm.predictive_batch(p, bm.sample_masks(p, 4, 8), [0, 1, 2], X)
        b = bm.predictive_batch(p, bm.sample_masks(p, 4, 8), [0, 1, 2], X)
        assert a.probs.tobytes() == b.probs.tobytes()

    @pytest.mark.parametrize("rows, expected", [
        ([[1, 0], [0, 1]], [0.5, 0.5]),
        ([[0.3, 0.7]], [0.3, 0.7]),
        ([[0.8, 0.2], [0.6, 0.4], [0.1, 0.9]], [0.5, 0.5]),
    ])
    def test_posterior_mean(self, rows, expected):
        pm = bm.PredictiveMatrix(0, np.array(rows, float), 0)
        np.testing.assert_allclose(bm.posterior_mean(pm), expected, atol=1e-15)

    def test_invalid_rows_rejected(self):
        with pytest.raises(ValueError):
            bm.PredictiveMatrix(0, np.array([[0.5, 0.6]]), 0)
        with pytest.raises(ValueError):
            bm.PredictiveMatrix(0, np.array([[1.2, -0.2]]), 0)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        p = bm.init_params((7, 5, 5, 3), seed=12)
        path = tmp_path / "model.txt"
        bm.save_params(p, path)
        q = bm.load_params(path)
        assert p.equals(q)
        assert q.sizes == (7, 5, 5, 3)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("something else\n")
        with pytest.raises(ValueError):
            bm.load_params(path)

    def test_truncated(self, tmp_path):
        p = bm.init_params((3, 2, 2), seed=0)
        path = tmp_path / "model.txt"
        bm.save_params(p, path)
        lines = path.read_text().splitlines()
        path.write_text("\n".join(lines[:-1]) + "\n")
        with pytest.raises(ValueError):
            bm.load_params(path)
