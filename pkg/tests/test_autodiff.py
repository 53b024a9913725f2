import numpy as np
import pytest

from asdgat import autodiff as ad
from asdgat.autodiff import Tensor
from asdgat.gradcheck import NonDeterministicError, finite_difference_check, primitive_cases, primitive_suite


def test_square_derivative():
    x = Tensor(3.0, requires_grad=True)
    (x * x).backward()
    assert x.grad == pytest.approx(6.0)


def test_uniform_segment_softmax_and_jacobian_rows():
    v = Tensor([2.0, 2.0, 2.0], requires_grad=True)
    out = ad.segment_softmax(v, [0, 0, 0])
    np.testing.assert_allclose(out.data, [1 / 3] * 3)
    # Jacobian column k = d out / d v_k; each output row's derivatives sum to 0
    jac = np.zeros((3, 3))
    for i in range(3):
        v.grad = None
        w = np.zeros(3)
        w[i] = 1.0
        ad.sum(ad.multiply(ad.segment_softmax(v, [0, 0, 0]), Tensor(w))).backward()
        jac[i] = v.grad
    np.testing.assert_allclose(jac.sum(axis=1), 0.0, atol=1e-15)


def test_matmul_sum_gradient_is_ones_times_bT():
    rng = np.random.default_rng(0)
    a = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    ad.sum(ad.matmul(a, b)).backward()
    np.testing.assert_allclose(a.grad, np.ones((2, 2)) @ b.data.T)
    np.testing.assert_allclose(b.grad, a.data.T @ np.ones((2, 2)))


def test_sum_of_leaf_gives_ones():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    ad.sum(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_two_paths_accumulate():
    x = Tensor(1.5, requires_grad=True)
    (x + x).backward()
    assert x.grad == 2.0


def test_unreached_leaf_reads_zero():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = Tensor([3.0, 4.0], requires_grad=True)
    ad.sum(x).backward()
    np.testing.assert_array_equal(ad.grad_of(y), [0.0, 0.0])


def test_backward_needs_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ad.ShapeError):
        (x * 2.0).backward()


@pytest.mark.parametrize("a,b", [((2, 3), (3, 3)), ((2, 3), (2, 2)), ((2, 3), (1, 2))])
def test_shape_mismatch_rejected(a, b):
    with pytest.raises(ad.ShapeError):
        ad.add(Tensor(np.zeros(a)), Tensor(np.zeros(b)))


def test_row_and_column_broadcasting():
    m = Tensor(np.ones((3, 2)))
    assert ad.add(m, Tensor(np.ones((1, 2)))).shape == (3, 2)
    assert ad.multiply(Tensor(np.ones((3, 1))), m).shape == (3, 2)


def test_empty_segment_rejected():
    with pytest.raises(ValueError, match="empty segment"):
        ad.segment_softmax(Tensor([1.0, 2.0]), [0, 2], 3)


def test_segment_softmax_normalises_within_segments():
    rng = np.random.default_rng(4)
    seg = rng.integers(0, 7, size=50)
    seg[:7] = np.arange(7)
    out = ad.segment_softmax(Tensor(rng.normal(scale=5, size=(50, 3))), seg, 7).data
    assert (out >= 0).all()
    sums = np.zeros((7, 3))
    np.add.at(sums, seg, out)
    np.testing.assert_allclose(sums, 1.0, atol=1e-9)


def test_mlp_matches_finite_differences():
    rng = np.random.default_rng(1)
    x = Tensor(rng.normal(size=(4, 3)))
    weights = [Tensor(rng.normal(scale=0.7, size=(3 if k == 0 else 5, 5)), requires_grad=True) for k in range(7)]

    def f(*ws):
        h = x
        for w in ws:
            h = ad.elu(ad.matmul(h, w))
        return ad.sum(ad.multiply(h, h))

    assert finite_difference_check(f, weights) <= 1e-5


def test_fd_of_linear_sum_is_exact():
    x = Tensor(np.random.default_rng(0).normal(size=(3, 3)))
    assert finite_difference_check(lambda t: ad.sum(t), x) <= 1e-10


def test_fd_of_elu_away_from_zero():
    rng = np.random.default_rng(2)
    raw = rng.uniform(-2, 2, size=20)
    raw[np.abs(raw) < 0.1] += 0.5
    assert finite_difference_check(lambda t: ad.sum(ad.elu(t)), Tensor(raw)) <= 1e-6


def test_fd_detects_nondeterminism():
    rng = np.random.default_rng(0)
    with pytest.raises(NonDeterministicError):
        finite_difference_check(lambda t: ad.sum(ad.scale(t, rng.normal())), Tensor([1.0]))


def test_every_primitive_passes_fd_over_ten_seeds():
    worst = primitive_suite(range(10))
    assert set(worst) >= {"matmul", "add", "multiply", "scale", "concat", "exp", "log", "sum", "mean", "max",
                          "transpose", "gather_rows", "scatter_add_rows", "relu", "elu", "leaky_relu",
                          "segment_softmax", "log_softmax"}
    assert max(worst.values()) <= 1e-4, worst


def test_backward_does_not_touch_forward_values():
    f, inputs = primitive_cases(3)["segment_softmax"]
    before = f(*inputs).data.copy()
    f(*inputs).backward()
    np.testing.assert_array_equal(f(*inputs).data, before)


def test_log_softmax_rows_normalise():
    out = ad.log_softmax(Tensor([[1000.0, 0.0], [-3.0, 2.0]]), axis=1)
    np.testing.assert_allclose(np.exp(out.data).sum(axis=1), 1.0, atol=1e-12)


def test_max_splits_gradient_on_ties():
    x = Tensor([[1.0, 1.0, 0.0]], requires_grad=True)
    ad.sum(ad.max(x, axis=1)).backward()
    np.testing.assert_allclose(x.grad, [[0.5, 0.5, 0.0]])
