import numpy as np
import pytest

import tabbin.autodiff as ad
from tabbin.autodiff import Tensor


def rand(shape, seed=0, dtype=np.float64):
    return np.random.default_rng(seed).normal(size=shape).astype(dtype)


def check(loss_fn, tensors, tol=1e-6, samples=60):
    err = ad.grad_check(loss_fn, tensors, samples=samples)
    assert err < tol, f"max relative gradient error {err:.3e}"


class TestBasicOps:
    def test_add_mul_matmul_grads(self):
        a = Tensor(rand((3, 4), 1), requires_grad=True)
        b = Tensor(rand((4, 5), 2), requires_grad=True)
        c = Tensor(rand((3, 5), 3), requires_grad=True)
        check(lambda: ad.sum_((a @ b + c) * c), {"a": a, "b": b, "c": c})

    def test_scalar_ops_preserve_dtype(self):
        a = Tensor(rand((2, 2), dtype=np.float32))
        assert (a * 0.5).data.dtype == np.float32
        assert (a + 1.0).data.dtype == np.float32
        assert (a * np.float64(2.0)).data.dtype == np.float32

    def test_broadcast_bias_grad(self):
        x = Tensor(rand((4, 6), 1), requires_grad=True)
        b = Tensor(rand((6,), 2), requires_grad=True)
        check(lambda: ad.sum_((x + b) * (x + b)), {"x": x, "b": b})

    def test_repeated_operand(self):
        x = Tensor(rand((3, 3), 5), requires_grad=True)
        check(lambda: ad.sum_(x * x), {"x": x})
        x.zero_grad()
        loss = ad.sum_(x + x)
        loss.backward()
        np.testing.assert_array_equal(x.grad, 2 * np.ones_like(x.data))

    def test_transpose_reshape_concat(self):
        a = Tensor(rand((2, 3, 4), 1), requires_grad=True)
        b = Tensor(rand((2, 3, 4), 2), requires_grad=True)

        def loss():
            t = ad.transpose(a, (0, 2, 1))
            t = ad.reshape(t, (2, 12))
            u = ad.reshape(ad.concat([a, b], axis=-1), (2, 24))
            return ad.sum_(t * t) + ad.sum_(u * u)

        check(loss, {"a": a, "b": b})

    def test_embedding_scatter_accumulates(self):
        w = Tensor(rand((5, 3), 1), requires_grad=True)
        idx = np.array([1, 1, 4])
        out = ad.embedding(w, idx)
        ad.sum_(out).backward()
        np.testing.assert_array_equal(w.grad[1], 2 * np.ones(3))
        np.testing.assert_array_equal(w.grad[4], np.ones(3))
        np.testing.assert_array_equal(w.grad[0], np.zeros(3))

    def test_gather_positions(self):
        a = Tensor(rand((2, 4, 3), 1), requires_grad=True)
        out = ad.gather_positions(a, np.array([0, 1]), np.array([2, 0]))
        np.testing.assert_array_equal(out.data, np.stack([a.data[0, 2], a.data[1, 0]]))
        check(lambda: ad.sum_(ad.gather_positions(a, np.array([0, 1]), np.array([2, 0]))), {"a": a})

    def test_mean_and_sum_axis(self):
        a = Tensor(rand((3, 5), 7), requires_grad=True)
        check(lambda: ad.sum_(ad.mean(a, axis=1) * ad.mean(a, axis=1)), {"a": a})


class TestActivations:
    def test_gelu_grad(self):
        x = Tensor(rand((4, 7), 3), requires_grad=True)
        check(lambda: ad.sum_(ad.gelu(x) * ad.gelu(x)), {"x": x})

    def test_gelu_values(self):
        # tanh approximation agrees with the exact Gaussian CDF form closely
        from math import erf, sqrt

        x = np.linspace(-4, 4, 9)
        exact = np.array([0.5 * v * (1 + erf(v / sqrt(2))) for v in x])
        got = ad.gelu(Tensor(x)).data
        np.testing.assert_allclose(got, exact, atol=2e-3)

    def test_layer_norm_grad_and_values(self):
        x = Tensor(rand((3, 8), 1), requires_grad=True)
        scale = Tensor(rand((8,), 2) + 1.0, requires_grad=True)
        shift = Tensor(rand((8,), 3), requires_grad=True)
        check(lambda: ad.sum_(ad.layer_norm(x, scale, shift) * ad.layer_norm(x, scale, shift)),
              {"x": x, "scale": scale, "shift": shift})
        out = ad.layer_norm(x, Tensor(np.ones(8)), Tensor(np.zeros(8)), eps=0.0).data
        np.testing.assert_allclose(out.mean(axis=-1), 0, atol=1e-12)
        np.testing.assert_allclose(out.var(axis=-1), 1, atol=1e-9)


class TestMaskedSoftmax:
    def test_rows_are_distributions_over_visible(self):
        scores = Tensor(rand((5, 5), 1))
        mask = np.triu(np.ones((5, 5)))
        p = ad.masked_softmax(scores, mask).data
        np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-9)
        assert (p[mask == 0] == 0.0).all()
        assert (p >= 0).all()

    def test_matches_visible_only_oracle(self):
        rng = np.random.default_rng(4)
        scores = rng.normal(size=(4, 4))
        mask = (rng.random((4, 4)) > 0.4).astype(float)
        np.fill_diagonal(mask, 1)
        p = ad.masked_softmax(Tensor(scores), mask).data
        for i in range(4):
            vis = np.nonzero(mask[i])[0]
            e = np.exp(scores[i, vis] - scores[i, vis].max())
            np.testing.assert_allclose(p[i, vis], e / e.sum(), atol=1e-12)

    def test_masked_scores_get_exactly_zero_grad(self):
        scores = Tensor(rand((3, 3), 2), requires_grad=True)
        mask = np.ones((3, 3)); mask[0, 2] = 0
        out = ad.masked_softmax(scores, mask)
        ad.sum_(out * rand((3, 3), 9)).backward()
        assert scores.grad[0, 2] == 0.0

    def test_multiplicative_renorm_matches_formula(self):
        rng = np.random.default_rng(5)
        scores = rng.normal(size=(4, 4))
        mask = np.ones((4, 4)); mask[1, 3] = 0; mask[3, 0] = 0
        q = ad.masked_softmax(Tensor(scores), mask, mode="multiplicative_renorm").data
        e = np.exp(scores - scores.max(-1, keepdims=True))
        p0 = e / e.sum(-1, keepdims=True)
        want = p0 * mask / (p0 * mask).sum(-1, keepdims=True)
        np.testing.assert_allclose(q, want, atol=1e-12)

    def test_multiplicative_grad(self):
        scores = Tensor(rand((3, 3), 8), requires_grad=True)
        mask = np.ones((3, 3)); mask[2, 0] = 0
        check(
            lambda: ad.sum_(
                ad.masked_softmax(scores, mask, mode="multiplicative_renorm") * rand((3, 3), 11)
            ),
            {"s": scores},
        )

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            ad.masked_softmax(Tensor(np.ones((2, 2))), np.ones((2, 2)), mode="bogus")


class TestLosses:
    def test_cross_entropy_matches_log_softmax_oracle(self):
        rng = np.random.default_rng(3)
        logits = rng.normal(size=(6, 9))
        targets = rng.integers(0, 9, size=6)
        loss = ad.softmax_cross_entropy(Tensor(logits), targets).data
        probs = np.exp(logits) / np.exp(logits).sum(-1, keepdims=True)
        want = -np.log(probs[np.arange(6), targets]).mean()
        np.testing.assert_allclose(loss, want, rtol=1e-12)

    def test_cross_entropy_grad(self):
        logits = Tensor(rand((5, 7), 6), requires_grad=True)
        targets = np.array([1, 0, 6, 3, 3])
        check(lambda: ad.softmax_cross_entropy(logits, targets), {"logits": logits})

    def test_cosine_rows_matches_numpy(self):
        a = rand((4, 6), 1)
        b = rand((4, 6), 2)
        got = ad.cosine_rows(Tensor(a), Tensor(b)).data
        want = (a * b).sum(-1) / (np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1))
        np.testing.assert_allclose(got, want, atol=1e-9)

    def test_cosine_rows_grad_with_broadcast(self):
        a = Tensor(rand((3, 1, 6), 1), requires_grad=True)
        b = Tensor(rand((3, 5, 6), 2), requires_grad=True)
        check(lambda: ad.sum_(ad.cosine_rows(a, b) * rand((3, 5), 4)), {"a": a, "b": b})


class TestMachinery:
    def test_no_grad_blocks_graph(self):
        x = Tensor(rand((2, 2)), requires_grad=True)
        with ad.no_grad():
            y = ad.sum_(x * x)
        assert not y.requires_grad and y._parents == ()

    def test_backward_requires_scalar(self):
        x = Tensor(rand((2, 2)), requires_grad=True)
        with pytest.raises(ValueError):
            (x * x).backward()

    def test_quadratic_grad_check_is_tight(self):
        w = Tensor(rand((8, 8), 2), requires_grad=True)
        err = ad.grad_check(lambda: ad.sum_(w * w) * 0.5, {"w": w})
        assert err < 1e-8

    def test_dropout(self):
        x = Tensor(np.ones((400,)), requires_grad=True)
        assert ad.dropout(x, 0.0, np.random.default_rng(0)) is x
        out = ad.dropout(x, 0.5, np.random.default_rng(0))
        kept = out.data != 0
        assert 120 < kept.sum() < 280  # roughly half
        np.testing.assert_allclose(out.data[kept], 2.0)  # inverted scaling
        ad.sum_(out).backward()
        np.testing.assert_array_equal(x.grad[~kept], 0)

    def test_mask_bias_values(self):
        m = np.array([[1, 0], [1, 1]], dtype=np.uint8)
        bias = ad.mask_bias(m)
        np.testing.assert_array_equal(bias, [[0.0, -1e9], [0.0, 0.0]])
        assert bias.dtype == np.float32
