import numpy as np
import pytest

from duet import autodiff as ad
from duet.autodiff import Tape, Tensor
from duet.errors import ContractError, DomainError, NonFiniteError, ShapeError
from duet.gradcheck import check_loss_gradients, fd_gradient, max_rel_err, run_op_suite


def test_row_softmax_uniform_logits():
    out = ad.row_softmax(Tensor([[0.0, 0.0, 0.0]]))
    np.testing.assert_allclose(out.values, [[1 / 3, 1 / 3, 1 / 3]], atol=1e-15)


def test_sigmoid_at_zero():
    assert ad.sigmoid(Tensor([[0.0]])).item() == 0.5


def test_quadratic_gradient_matches_finite_differences():
    x = ad.parameter([[1.0, 2.0, 3.0]])
    with Tape():
        loss = ad.reduce_sum(ad.mul(x, x))
        ad.backward(loss)
    np.testing.assert_allclose(x.grad, [[2.0, 4.0, 6.0]], rtol=1e-12)
    fd = fd_gradient(lambda: ad.reduce_sum(ad.mul(x, x)).item(), x)
    assert max_rel_err(x.grad, fd, floor=1e-2) < 1e-7


def test_op_suite_200_randomized_cases():
    results = run_op_suite(cases=200, seed=11)
    worst = max(r.max_rel_err for r in results)
    assert worst < 1e-7, f"worst op gradient mismatch {worst}"


class TestRowSoftmax:
    def test_rows_sum_to_one_with_bias(self):
        rng = np.random.default_rng(0)
        for _ in range(25):
            x = Tensor(rng.normal(size=(4, 6)) * 3)
            b = Tensor(rng.normal(size=(4, 6)) * 5)
            out = ad.row_softmax(x, bias=b)
            np.testing.assert_allclose(out.values.sum(axis=1), np.ones(4), atol=1e-12)

    def test_masked_entries_exactly_zero_with_zero_grad(self):
        x = ad.parameter(np.random.default_rng(1).normal(size=(3, 4)))
        mask = np.zeros((3, 4), dtype=bool)
        mask[0, 1] = mask[2, 3] = True
        with Tape():
            out = ad.row_softmax(x, mask=mask)
            loss = ad.reduce_sum(ad.mul(out, ad.constant(np.random.default_rng(2).normal(size=(3, 4)))))
            ad.backward(loss)
        assert out.values[0, 1] == 0.0
        assert out.values[2, 3] == 0.0
        np.testing.assert_allclose(out.values.sum(axis=1), np.ones(3), atol=1e-12)
        # Fully masked logits cannot influence the loss.
        assert x.grad[0, 1] == 0.0
        assert x.grad[2, 3] == 0.0

    def test_fully_masked_row_rejected(self):
        with pytest.raises(ContractError):
            ad.row_softmax(Tensor(np.zeros((2, 2))), mask=np.array([[True, True], [False, False]]))


def test_layer_norm_moments():
    rng = np.random.default_rng(5)
    x = Tensor(rng.normal(size=(6, 9)) * 4 + 2)
    out = ad.layer_norm(x, Tensor(np.ones((1, 9))), Tensor(np.zeros((1, 9))), eps=1e-12)
    np.testing.assert_allclose(out.values.mean(axis=1), np.zeros(6), atol=1e-6)
    np.testing.assert_allclose(out.values.var(axis=1), np.ones(6), atol=1e-6)


class TestBackwardContracts:
    def test_non_scalar_loss_rejected(self):
        x = ad.parameter([[1.0, 2.0]])
        with Tape():
            y = ad.mul(x, x)
            with pytest.raises(ContractError):
                ad.backward(y)

    def test_double_backward_rejected(self):
        x = ad.parameter([[1.0, 2.0]])
        with Tape():
            loss = ad.reduce_sum(ad.mul(x, x))
            ad.backward(loss)
            with pytest.raises(ContractError):
                ad.backward(loss)

    def test_constant_loss_has_no_tape(self):
        with pytest.raises(ContractError):
            ad.backward(Tensor(3.0))

    def test_zero_scaled_loss_gives_zero_gradients(self):
        x = ad.parameter([[1.0, -2.0, 3.0]])
        with Tape():
            loss = ad.scalar_mul(ad.reduce_sum(x), 0.0)
            ad.backward(loss)
        np.testing.assert_array_equal(x.grad, np.zeros((1, 3)))

    def test_linear_loss_gradient(self):
        w = ad.parameter(np.arange(6.0).reshape(2, 3))
        x = np.array([[1.0, -1.0], [2.0, 0.5]])
        with Tape():
            loss = ad.reduce_sum(ad.matmul(ad.constant(x), w))
            ad.backward(loss)
        np.testing.assert_allclose(w.grad, np.tile(x.sum(axis=0)[:, None], (1, 3)))

    def test_fanout_accumulation(self):
        x = ad.parameter([[2.0]])
        with Tape():
            y = ad.add(x, x)
            loss = ad.reduce_sum(ad.mul(y, y))
            ad.backward(loss)
        # d/dx (2x)^2 = 8x
        np.testing.assert_allclose(x.grad, [[16.0]])

    def test_grad_present_for_intermediates(self):
        x = ad.parameter([[1.0, 2.0]])
        with Tape():
            mid = ad.mul(x, x)
            loss = ad.reduce_sum(mid)
            ad.backward(loss)
        assert mid.grad is not None and mid.grad.shape == mid.values.shape

    def test_untouched_parameter_keeps_absent_grad(self):
        x = ad.parameter([[1.0]])
        other = ad.parameter([[5.0]])
        with Tape():
            loss = ad.reduce_sum(ad.mul(x, x))
            ad.backward(loss)
        assert other.grad is None


class TestGuards:
    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))
        with pytest.raises(ShapeError):
            ad.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))

    def test_log_domain(self):
        with pytest.raises(DomainError):
            ad.natural_log(Tensor([[0.0]]))
        with pytest.raises(DomainError):
            ad.natural_log(Tensor([[-1.0]]))

    @pytest.mark.filterwarnings("ignore:overflow encountered")
    def test_nan_guard(self):
        big = Tensor([[1e308]])
        with pytest.raises(NonFiniteError):
            ad.mul(big, big)

    def test_clamp_bounds_for_log(self):
        eps = 1e-7
        squashed = ad.clamp(Tensor([[0.0, 1.0, 0.5]]), eps, 1 - eps)
        out = ad.natural_log(squashed)
        assert np.isfinite(out.values).all()


class TestPrecisionModes:
    def test_context_switches_dtype(self):
        with ad.precision(np.float32):
            t = Tensor([[1.0]])
            assert t.values.dtype == np.float32
        assert Tensor([[1.0]]).values.dtype == np.float64

    def test_nested_ops_keep_dtype(self):
        with ad.precision(np.float32):
            a = Tensor(np.ones((2, 2)))
            out = ad.scalar_mul(ad.add(a, a), 0.5)
            assert out.values.dtype == np.float32


def test_single_tape_per_thread():
    with Tape():
        with pytest.raises(ContractError):
            Tape().__enter__()


def test_composite_expression_gradcheck():
    rng = np.random.default_rng(9)
    w1 = ad.parameter(rng.normal(size=(4, 5)))
    b1 = ad.parameter(rng.normal(size=(1, 5)))
    w2 = ad.parameter(rng.normal(size=(5, 2)))
    b2 = ad.parameter(rng.normal(size=(1, 2)))
    x = ad.constant(rng.normal(size=(3, 4)))

    def make_loss():
        h = ad.relu(ad.affine(x, w1, b1))
        out = ad.row_softmax(ad.affine(h, w2, b2))
        picked = ad.gather_rows(out, [0, 1, 0])
        return ad.scalar_mul(ad.reduce_mean(ad.natural_log(ad.clamp(picked, 1e-7, 1 - 1e-7))), -1.0)

    errs = check_loss_gradients(make_loss, {"w1": w1, "b1": b1, "w2": w2, "b2": b2})
    assert max(errs.values()) < 1e-6
