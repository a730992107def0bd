import numpy as np
import pytest

from peftner import autodiff as ad
from peftner.autodiff import (
    DoubleBackward,
    NonScalarLoss,
    ShapeMismatch,
    Tensor,
    backward,
    grad_check,
    make_rng,
)


def rand_tensor(rng, shape, requires_grad=True):
    return Tensor(rng.standard_normal(shape), requires_grad=requires_grad)


class TestClosedForms:
    def test_softmax_symmetry(self):
        out = ad.softmax(Tensor([0.0, 0.0, 0.0]))
        np.testing.assert_allclose(out.data, [1 / 3, 1 / 3, 1 / 3])

    def test_softmax_rows_sum_to_one(self):
        rng = make_rng(0)
        out = ad.softmax(rand_tensor(rng, (8, 5), requires_grad=False))
        np.testing.assert_allclose(out.data.sum(axis=-1), np.ones(8), atol=1e-12)

    def test_product_rule(self):
        x = Tensor([3.0], requires_grad=True)
        backward(ad.tsum(ad.mul(x, x)))
        assert x.grad[0] == pytest.approx(6.0)

    def test_sum_grad_is_ones(self):
        w = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        backward(ad.tsum(w))
        np.testing.assert_array_equal(w.grad, np.ones(3))

    def test_detached_leaf_grad_stays_zero(self):
        w = Tensor([1.0, 2.0], requires_grad=True)
        x = Tensor([1.0], requires_grad=True)
        backward(ad.tsum(ad.mul(x, x)))
        np.testing.assert_array_equal(w.grad, np.zeros(2))

    def test_softmax_ce_composite_gradient(self):
        # d/dlogits of mean-row NLL equals (softmax - onehot) / batch
        rng = make_rng(1)
        logits = rand_tensor(rng, (4, 3))
        targets = np.array([0, 2, 1, 1])
        logp = ad.log_softmax(logits)
        picked = ad.take_per_row(logp, targets[:, None])
        loss = ad.scale(ad.tsum(picked), -1.0 / 4)
        backward(loss)
        p = np.exp(ad.log_softmax(Tensor(logits.data)).data)
        onehot = np.zeros((4, 3))
        onehot[np.arange(4), targets] = 1.0
        np.testing.assert_allclose(logits.grad, (p - onehot) / 4, atol=1e-12)

    def test_layer_norm_statistics(self):
        rng = make_rng(2)
        x = rand_tensor(rng, (20, 16), requires_grad=False)
        out = ad.layer_norm(x, Tensor(np.ones(16)), Tensor(np.zeros(16)))
        assert np.abs(out.data.mean(axis=-1)).max() <= 1e-10
        assert np.abs(out.data.var(axis=-1) - 1.0).max() <= 1e-8

    def test_dropout_rate_zero_is_identity(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        assert ad.dropout(x, 0.0, make_rng(0)) is x

    def test_dropout_preserves_expectation(self):
        rng = make_rng(3)
        x = Tensor(np.ones(100_000))
        out = ad.dropout(x, 0.3, rng)
        assert abs(out.data.mean() - 1.0) < 0.01

    def test_dropout_deterministic_given_seed(self):
        x = Tensor(np.ones(100))
        a = ad.dropout(x, 0.5, make_rng(7)).data
        b = ad.dropout(x, 0.5, make_rng(7)).data
        np.testing.assert_array_equal(a, b)

    def test_masked_fill(self):
        x = Tensor(np.arange(4.0), requires_grad=True)
        mask = np.array([True, False, True, False])
        out = ad.masked_fill(x, mask, -9.0)
        np.testing.assert_array_equal(out.data, [-9.0, 1.0, -9.0, 3.0])
        backward(ad.tsum(out))
        np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0, 1.0])

    def test_embedding_lookup_accumulates_repeats(self):
        table = Tensor(np.eye(3), requires_grad=True)
        out = ad.embedding_lookup(table, np.array([1, 1, 2]))
        backward(ad.tsum(out))
        expected = np.stack([np.zeros(3), np.full(3, 2.0), np.ones(3)])
        np.testing.assert_array_equal(table.grad, expected)


class TestErrors:
    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeMismatch) as exc:
            ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))
        assert "(2, 3)" in str(exc.value) and "(4, 5)" in str(exc.value)

    def test_non_scalar_loss(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(NonScalarLoss):
            backward(ad.mul(x, x))

    def test_double_backward(self):
        x = Tensor([2.0], requires_grad=True)
        loss = ad.tsum(ad.mul(x, x))
        backward(loss)
        with pytest.raises(DoubleBackward):
            backward(loss)

    def test_add_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            ad.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


class TestGradCheckInstrument:
    def test_quadratic_tight(self):
        rng = make_rng(4)
        x = rand_tensor(rng, (6,))
        assert grad_check(lambda: ad.tsum(ad.mul(x, x)), x) <= 1e-7

    def test_constant_function_exact_zero(self):
        x = rand_tensor(make_rng(5), (4,))
        c = Tensor(np.ones(4))
        assert grad_check(lambda: ad.tsum(ad.mul(c, c)) + ad.scale(ad.tsum(x), 0.0), x) == 0.0


PRIMITIVE_CASES = {
    "matmul": lambda x, rng: ad.tsum(ad.matmul(x, Tensor(rng.standard_normal((x.shape[-1], 3))))),
    "matmul_batched": lambda x, rng: ad.tsum(
        ad.matmul(x, Tensor(rng.standard_normal(x.shape[:-2] + (x.shape[-1], 2))))),
    "add": lambda x, rng: ad.tsum(ad.mul(ad.add(x, Tensor(rng.standard_normal(x.shape))),
                                         Tensor(rng.standard_normal(x.shape)))),
    "add_broadcast_bias": lambda x, rng: ad.tsum(
        ad.mul(ad.add(x, Tensor(rng.standard_normal(x.shape[-1]))),
               Tensor(rng.standard_normal(x.shape)))),
    "mul": lambda x, rng: ad.tsum(ad.mul(x, Tensor(rng.standard_normal(x.shape)))),
    "scale": lambda x, rng: ad.tsum(ad.scale(x, 1.7)),
    "softmax": lambda x, rng: ad.tsum(ad.mul(ad.softmax(x), Tensor(rng.standard_normal(x.shape)))),
    "log_softmax": lambda x, rng: ad.tsum(
        ad.mul(ad.log_softmax(x), Tensor(rng.standard_normal(x.shape)))),
    "gelu": lambda x, rng: ad.tsum(ad.mul(ad.gelu(x), Tensor(rng.standard_normal(x.shape)))),
    "dropout": lambda x, rng: ad.tsum(ad.mul(ad.dropout(x, 0.4, make_rng(99)),
                                             Tensor(rng.standard_normal(x.shape)))),
    "transpose": lambda x, rng: ad.tsum(
        ad.mul(ad.transpose(x), Tensor(rng.standard_normal(x.shape[::-1])))),
    "reshape": lambda x, rng: ad.tsum(
        ad.mul(ad.reshape(x, (-1,)), Tensor(rng.standard_normal(x.size)))),
    "masked_fill": lambda x, rng: ad.tsum(
        ad.mul(ad.masked_fill(x, rng.random(x.shape) < 0.3, 0.5),
               Tensor(rng.standard_normal(x.shape)))),
    "sum_axis": lambda x, rng: ad.tsum(
        ad.mul(ad.tsum(x, axis=0), Tensor(rng.standard_normal(x.shape[1:])))),
    "mean": lambda x, rng: ad.tmean(ad.mul(x, Tensor(rng.standard_normal(x.shape)))),
    "take_rows": lambda x, rng: ad.tsum(
        ad.mul(ad.take_rows(x, np.array([0, 2, 2, 1])),
               Tensor(rng.standard_normal((4,) + x.shape[1:])))),
    "row_slice": lambda x, rng: ad.tsum(
        ad.mul(ad.row_slice(x, 1, 4), Tensor(rng.standard_normal((3,) + x.shape[1:])))),
    "concat_rows": lambda x, rng: ad.tsum(
        ad.mul(ad.concat_rows([x, x]), Tensor(rng.standard_normal((2 * x.shape[0],) + x.shape[1:])))),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
def test_primitive_gradients_ten_seeds(name):
    fn = PRIMITIVE_CASES[name]
    for seed in range(10):
        rng = make_rng(seed, 11)
        shape = (2, 3, 4) if name == "matmul_batched" else (5, 4)
        x = rand_tensor(rng, shape)
        err = grad_check(lambda: fn(x, make_rng(seed, 12)), x)
        assert err <= 1e-4, f"{name} seed {seed}: {err}"


def test_layer_norm_gradients_all_inputs():
    for seed in range(10):
        rng = make_rng(seed, 13)
        x = rand_tensor(rng, (4, 6))
        gamma = Tensor(rng.standard_normal(6), requires_grad=True)
        beta = Tensor(rng.standard_normal(6), requires_grad=True)
        coeff = Tensor(rng.standard_normal((4, 6)))
        err = grad_check(
            lambda: ad.tsum(ad.mul(ad.layer_norm(x, gamma, beta), coeff)), [x, gamma, beta]
        )
        assert err <= 1e-4


def test_embedding_lookup_gradient():
    for seed in range(10):
        rng = make_rng(seed, 14)
        table = rand_tensor(rng, (7, 4))
        ids = rng.integers(0, 7, size=9)
        coeff = Tensor(rng.standard_normal((9, 4)))
        err = grad_check(lambda: ad.tsum(ad.mul(ad.embedding_lookup(table, ids), coeff)), table)
        assert err <= 1e-4


def test_take_per_row_gradient():
    for seed in range(10):
        rng = make_rng(seed, 15)
        x = rand_tensor(rng, (2, 4, 6))  # (heads, rows, buckets)
        idx = rng.integers(0, 6, size=(4, 4))
        coeff = Tensor(rng.standard_normal((2, 4, 4)))
        err = grad_check(lambda: ad.tsum(ad.mul(ad.take_per_row(x, idx), coeff)), x)
        assert err <= 1e-4


def test_two_layer_mlp_against_finite_differences():
    rng = make_rng(20)
    x = Tensor(rng.standard_normal((6, 5)))
    w1 = rand_tensor(rng, (8, 5))
    b1 = rand_tensor(rng, (8,))
    w2 = rand_tensor(rng, (3, 8))
    b2 = rand_tensor(rng, (3,))
    target = Tensor(rng.standard_normal((6, 3)))

    def loss():
        h = ad.gelu(ad.add(ad.matmul(x, ad.transpose(w1)), b1))
        y = ad.add(ad.matmul(h, ad.transpose(w2)), b2)
        d = ad.add(y, ad.scale(target, -1.0))
        return ad.tmean(ad.mul(d, d))

    assert grad_check(loss, [w1, b1, w2, b2]) <= 1e-4


def test_fanout_accumulates_gradient():
    x = Tensor([2.0], requires_grad=True)
    y = ad.add(ad.mul(x, x), ad.scale(x, 3.0))  # x^2 + 3x -> grad 2x + 3 = 7
    backward(ad.tsum(y))
    assert x.grad[0] == pytest.approx(7.0)


def test_zero_grad_resets_accumulator():
    x = Tensor([1.0], requires_grad=True)
    backward(ad.tsum(ad.mul(x, x)))
    x.zero_grad()
    np.testing.assert_array_equal(x.grad, [0.0])
