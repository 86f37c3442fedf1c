import numpy as np
import pytest

from vqtimbre import tensor as T
from vqtimbre.tensor import Tensor, parameter
from vqtimbre.vq import (Codebook, NonFiniteLatent, codebook_loss, commitment_loss, latent_loss,
                         straight_through)


def exhaustive_nearest(z, emb):
    out = []
    for v in z:
        best, best_j = np.inf, -1
        for j, row in enumerate(emb):
            d = np.sqrt(np.sum((v - row) ** 2))
            if d < best:
                best, best_j = d, j
        out.append(best_j)
    return np.array(out)


def grad_of(t):
    return np.zeros_like(t.data) if t.grad is None else t.grad


def make_codebook(rows):
    cb = Codebook(len(rows), len(rows[0]))
    cb.embeddings.data[:] = rows
    return cb


class TestQuantize:
    def test_nearer_by_inspection(self):
        cb = make_codebook([[0.0, 0.0], [1.0, 1.0]])
        q, idx = cb.quantize(np.array([0.1, 0.1]))
        assert idx == 0
        np.testing.assert_array_equal(q.data, [0.0, 0.0])

    def test_exact_row(self):
        cb = make_codebook([[0.0, 0.0], [1.0, 1.0], [3.0, -1.0]])
        q, idx = cb.quantize(np.array([3.0, -1.0]))
        assert idx == 2 and np.all(q.data == [3.0, -1.0])

    def test_tie_goes_to_lowest_index(self):
        cb = make_codebook([[1.0, 0.0], [-1.0, 0.0], [1.0, 0.0]])
        assert cb.quantize(np.zeros(2))[1] == 0
        assert cb.quantize(np.array([1.0, 0.0]))[1] == 0

    def test_matches_exhaustive_oracle(self):
        rng = np.random.default_rng(0)
        cb = Codebook(64, 8, rng, init_scale=1.0)
        z = rng.normal(size=(1000, 8))
        np.testing.assert_array_equal(cb.nearest(z), exhaustive_nearest(z, cb.embeddings.data))

    def test_batch_shape_and_usage(self):
        rng = np.random.default_rng(1)
        cb = Codebook(16, 4, rng, init_scale=1.0)
        z = rng.normal(size=(3, 7, 4))
        q, idx = cb.quantize(z)
        assert q.shape == (3, 7, 4) and idx.shape == (3, 7)
        assert np.all((idx >= 0) & (idx < 16))
        assert cb.usage_counts.sum() == 21
        cb.quantize(z[0])
        assert cb.usage_counts.sum() == 28

    def test_non_finite(self):
        cb = Codebook(4, 2)
        with pytest.raises(NonFiniteLatent, match="frame 2"):
            cb.nearest(np.array([[0, 0], [1, 1], [np.nan, 0]]))

    def test_dim_mismatch(self):
        with pytest.raises(T.DimensionError):
            Codebook(4, 2).nearest(np.zeros(3))

    def test_default_init_range(self):
        cb = Codebook(32, 16, np.random.default_rng(2))
        assert np.all(np.abs(cb.embeddings.data) <= 1 / 32)


class TestStraightThrough:
    def test_forward_is_q(self):
        rng = np.random.default_rng(3)
        z, q = rng.normal(size=(2, 5, 4))
        np.testing.assert_array_equal(straight_through(Tensor(z), Tensor(q)).data, q)

    def test_gradient_copied_to_z(self):
        rng = np.random.default_rng(4)
        cb = Codebook(8, 4, rng, init_scale=1.0)
        z = parameter(rng.normal(size=(6, 4)))
        W = rng.normal(size=(3, 4))
        q, _ = cb.quantize(z)
        st = straight_through(z, q)
        out = T.tsum(T.tanh(T.linear(st, Tensor(W))))  # decoder stub
        out.backward()
        # decoder gradient w.r.t. its input, evaluated at q*
        decoder_grad = (1 - np.tanh(q.data @ W.T) ** 2) @ W
        np.testing.assert_allclose(z.grad, decoder_grad, atol=1e-12)
        assert np.all(grad_of(cb.embeddings) == 0)


class TestLosses:
    def test_zero_when_matched(self):
        v = np.array([0.3, -0.2, 1.0])
        assert codebook_loss(Tensor(v), Tensor(v)).item() == 0.0
        assert commitment_loss(Tensor(v), Tensor(v)).item() == 0.0
        assert latent_loss(Tensor(v), Tensor(v), 0.25)[0].item() == 0.0

    def test_closed_form_gradients(self):
        rng = np.random.default_rng(5)
        z = parameter(rng.normal(size=4))
        q = parameter(rng.normal(size=4))
        codebook_loss(z, q).backward()
        assert np.all(grad_of(z) == 0)
        np.testing.assert_allclose(q.grad, 2 * (q.data - z.data), atol=1e-14)
        z.grad = q.grad = None
        commitment_loss(z, q).backward()
        assert np.all(grad_of(q) == 0)
        np.testing.assert_allclose(z.grad, 2 * (z.data - q.data), atol=1e-14)

    def test_codebook_update_through_lookup(self):
        rng = np.random.default_rng(6)
        cb = Codebook(5, 3, rng, init_scale=1.0)
        z = parameter(rng.normal(size=(4, 3)))
        q, idx = cb.quantize(z)
        total, _, _ = latent_loss(z, q, beta=0.25)
        total.backward()
        expected = np.zeros((5, 3))
        for i, j in enumerate(idx):
            expected[j] += 2 * (cb.embeddings.data[j] - z.data[i]) / 4
        np.testing.assert_allclose(cb.embeddings.grad, expected, atol=1e-12)
        np.testing.assert_allclose(z.grad, 0.25 * 2 * (z.data - q.data) / 4, atol=1e-12)
