import numpy as np
import pytest

from melssl import autodiff as ad
from melssl.autodiff import Value, backward, grad_check

rng = np.random.default_rng(42)


def randv(*shape):
    return ad.param(rng.normal(size=shape))


class TestBackwardBasics:
    def test_identity(self):
        x = ad.param(np.array(3.0))
        y = ad.scale(x, 1.0)
        backward(y)
        assert x.grad == pytest.approx(1.0)

    def test_matmul_hand_pattern(self):
        # y = sum(A @ B): dA = 1 * B^T, dB = A^T * 1
        a = ad.param(np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]))
        b = ad.param(np.array([[1.0, 0.0], [2.0, 1.0], [0.0, 3.0]]))
        backward(ad.vsum(ad.matmul(a, b)))
        np.testing.assert_allclose(a.grad, np.ones((2, 2)) @ b.data.T)
        np.testing.assert_allclose(b.grad, a.data.T @ np.ones((2, 2)))

    def test_shared_input_grads_add(self):
        x = ad.param(np.array([1.0, 2.0]))
        y = ad.vsum(ad.mul(x, x)) + ad.vsum(ad.scale(x, 3.0))
        backward(y)
        np.testing.assert_allclose(x.grad, 2 * x.data + 3.0)

    def test_backward_non_scalar_errors(self):
        x = ad.param(np.zeros(3))
        with pytest.raises(ValueError):
            backward(ad.scale(x, 2.0))

    def test_grad_accumulates_across_calls(self):
        x = ad.param(np.array(2.0))
        backward(ad.mul(x, x))
        backward(ad.mul(x, x))
        assert x.grad == pytest.approx(8.0)


class TestGradCheckHarness:
    def test_quadratic_near_exact(self):
        x = ad.param(np.array([1.0, 2.0]))
        err = grad_check(lambda v: ad.vsum(ad.mul(v, v)), [x])
        assert err < 1e-9

    def test_nonfinite_rejected(self):
        x = ad.param(np.array([1.0]))
        with pytest.raises(ValueError):
            grad_check(lambda v: ad.vlog(ad.scale(v, -1.0)), [x])


class TestPrimitiveGradients:
    """Every primitive passes central-difference checking in 64-bit mode."""

    C25 = ad.const(rng.normal(size=(2, 5)).astype(np.float64))
    C45 = ad.const(rng.normal(size=(4, 5)).astype(np.float64))

    def test_add_sub_mul_div(self):
        a, b = randv(4, 5), randv(4, 5)
        b.data = b.data + 3.0  # keep divisor away from zero
        assert grad_check(lambda x, y: ad.vsum(ad.mul(ad.add(x, y), self.C45)), [a, b]) < 1e-4
        assert grad_check(lambda x, y: ad.vsum(ad.mul(ad.sub(x, y), self.C45)), [a, b]) < 1e-4
        assert grad_check(lambda x, y: ad.vsum(ad.mul(ad.div(x, y), self.C45)), [a, b]) < 1e-4

    def test_broadcast_add(self):
        a, b = randv(4, 5), randv(5)
        assert grad_check(lambda x, y: ad.vsum(ad.mul(ad.add(x, y), self.C45)), [a, b]) < 1e-4

    def test_scale(self):
        a = randv(3, 3)
        assert grad_check(lambda x: ad.vsum(ad.scale(x, -2.5)), [a]) < 1e-4

    def test_matmul(self):
        a, b = randv(4, 3), randv(3, 5)
        assert grad_check(lambda x, y: ad.vsum(ad.mul(ad.matmul(x, y), self.C45)), [a, b]) < 1e-4

    def test_batched_matmul(self):
        a, b = randv(2, 3, 4), randv(2, 4, 5)
        c = ad.const(rng.normal(size=(2, 3, 5)))
        assert grad_check(lambda x, y: ad.vsum(ad.mul(ad.matmul(x, y), c)), [a, b]) < 1e-4

    def test_sum_mean_axes(self):
        a = randv(3, 4)
        c4 = ad.const(rng.normal(size=4))
        c3 = ad.const(rng.normal(size=3))
        assert grad_check(lambda x: ad.vsum(ad.mul(ad.vsum(x, axis=0), c4)), [a]) < 1e-4
        assert grad_check(lambda x: ad.vsum(ad.mul(ad.vmean(x, axis=1), c3)), [a]) < 1e-4

    def test_exp_log_sqrt(self):
        a = randv(3, 3)
        pos = ad.param(np.abs(rng.normal(size=(3, 3))) + 0.5)
        c = ad.const(rng.normal(size=(3, 3)))
        assert grad_check(lambda x: ad.vsum(ad.mul(ad.vexp(x), c)), [a]) < 1e-4
        assert grad_check(lambda x: ad.vsum(ad.mul(ad.vlog(x), c)), [pos]) < 1e-4
        assert grad_check(lambda x: ad.vsum(ad.mul(ad.vsqrt(x), c)), [pos]) < 1e-4

    def test_reshape_transpose_concat_stack(self):
        a, b = randv(2, 6), randv(2, 6)
        c = ad.const(rng.normal(size=(4, 6)))
        c34 = ad.const(rng.normal(size=(3, 4)))
        c62 = ad.const(rng.normal(size=(6, 2)))
        c226 = ad.const(rng.normal(size=(2, 2, 6)))
        assert grad_check(lambda x: ad.vsum(ad.mul(ad.reshape(x, (3, 4)), c34)), [a]) < 1e-4
        assert grad_check(lambda x: ad.vsum(ad.mul(ad.transpose(x, (1, 0)), c62)), [a]) < 1e-4
        assert grad_check(lambda x, y: ad.vsum(ad.mul(ad.concat([x, y], axis=0), c)),
                          [a, b]) < 1e-4
        assert grad_check(lambda x, y: ad.vsum(ad.mul(ad.stack([x, y], axis=0), c226)),
                          [a, b]) < 1e-4

    def test_gather_and_mask_rows(self):
        a = randv(6, 3)
        row = randv(3)
        idx = np.array([0, 2, 2, 5])
        c = ad.const(rng.normal(size=(4, 3)))
        assert grad_check(lambda x: ad.vsum(ad.mul(ad.gather_rows(x, idx), c)), [a]) < 1e-4
        c2 = ad.const(rng.normal(size=(6, 3)))
        assert grad_check(lambda x, r: ad.vsum(ad.mul(ad.mask_rows(x, np.array([1, 4]), r), c2)),
                          [a, row]) < 1e-4

    def test_softmax(self):
        a = randv(2, 5)
        assert grad_check(lambda x: ad.vsum(ad.mul(ad.softmax(x), self.C25)), [a]) < 1e-4

    def test_log_softmax(self):
        a = randv(2, 5)
        assert grad_check(lambda x: ad.vsum(ad.mul(ad.log_softmax(x), self.C25)), [a]) < 1e-4

    def test_layer_norm(self):
        a, g, b = randv(4, 5), randv(5), randv(5)
        assert grad_check(lambda x, gg, bb: ad.vsum(ad.mul(ad.layer_norm(x, gg, bb), self.C45)),
                          [a, g, b]) < 1e-4

    def test_gelu(self):
        a = randv(4, 5)
        assert grad_check(lambda x: ad.vsum(ad.mul(ad.gelu(x), self.C45)), [a]) < 1e-4

    def test_cosine(self):
        a, b = randv(4, 5), randv(4, 5)
        c = ad.const(rng.normal(size=4))
        assert grad_check(lambda x, y: ad.vsum(ad.mul(ad.cosine(x, y), c)), [a, b]) < 1e-4

    def test_cosine_pairs(self):
        a, b = randv(4, 5), randv(3, 5)
        c = ad.const(rng.normal(size=(4, 3)))
        assert grad_check(lambda x, y: ad.vsum(ad.mul(ad.cosine_pairs(x, y), c)), [a, b]) < 1e-4

    def test_cross_entropy(self):
        logits = randv(5, 7)
        targets = rng.integers(0, 7, 5)
        assert grad_check(lambda l: ad.vmean(ad.cross_entropy(l, targets)), [logits]) < 1e-4


class TestNumericalProperties:
    def test_softmax_rows_sum_to_one(self):
        x = ad.const(rng.normal(size=(10, 8)) * 5)
        s = ad.softmax(x)
        np.testing.assert_allclose(s.data.sum(axis=-1), 1.0, atol=1e-6)

    def test_log_softmax_matches_log_of_softmax(self):
        x = ad.const(rng.normal(size=(10, 8)) * 3)
        np.testing.assert_allclose(ad.log_softmax(x).data,
                                   np.log(ad.softmax(x).data), atol=1e-6)

    def test_layer_norm_standardizes(self):
        x = ad.const(rng.normal(size=(20, 16)).astype(np.float64) * 2 + 1)
        out = ad.layer_norm(x, ad.const(np.ones(16)), ad.const(np.zeros(16)))
        assert np.abs(out.data.mean(axis=-1)).max() < 1e-6
        assert np.abs(out.data.var(axis=-1) - 1.0).max() < 1e-5

    def test_dropout_eval_identity(self):
        x = ad.const(rng.normal(size=(5, 5)))
        out = ad.dropout(x, 0.5, None, train=False)
        assert out is x

    def test_dropout_preserves_expectation(self):
        # Monte Carlo: inverted scaling keeps the mean within 1%
        g = np.random.default_rng(0)
        x = ad.const(np.full(100000, 2.0))
        out = ad.dropout(x, 0.1, g, train=True)
        assert out.data.mean() == pytest.approx(2.0, rel=0.01)

    def test_dropout_grad_uses_same_mask(self):
        g = np.random.default_rng(1)
        x = ad.param(np.ones(1000))
        out = ad.dropout(x, 0.3, g, train=True)
        backward(ad.vsum(out))
        np.testing.assert_allclose(x.grad * x.data, out.data)

    def test_cross_entropy_target_out_of_range(self):
        logits = ad.const(np.zeros((2, 3)))
        with pytest.raises(ValueError):
            ad.cross_entropy(logits, np.array([0, 3]))

    def test_frozen_leaves_get_no_graph(self):
        a = ad.const(np.ones((3, 3)))
        b = ad.const(np.ones((3, 3)))
        out = ad.matmul(a, b)
        assert not out.requires_grad
        assert out._parents == ()
