"""Unit tests for the autodiff engine: hand-computed values first, then
finite-difference oracles over seeded random graphs."""
import numpy as np
import pytest

from voteseg import autodiff as ad
from voteseg.autodiff import (
    GradCheckReport,
    MlpParams,
    SgdMomentum,
    Tensor,
    backward,
    grad_check,
)


def leaf(x, dtype=np.float64):
    return Tensor(np.asarray(x, dtype=dtype), requires_grad=True)


class TestHandValues:
    def test_single_affine_layer(self):
        """1-in 1-out layer with w=2, b=1 maps x=3 to 7."""
        p = MlpParams(widths=(1, 1),
                      weights=[leaf([[2.0]])], biases=[leaf([1.0])])
        y = ad.mlp_forward(p, Tensor(np.array([[3.0]])))
        assert y.data.item() == 7.0

    def test_maxpool_channelwise(self):
        """Identity MLP over rows [1,5] and [3,2] pools to [3,5]."""
        p = MlpParams(widths=(2, 2),
                      weights=[leaf(np.eye(2))], biases=[leaf(np.zeros(2))])
        pooled, per_point = ad.shared_mlp_maxpool(p, Tensor(np.array([[1.0, 5.0], [3.0, 2.0]])))
        np.testing.assert_array_equal(pooled.data, [3.0, 5.0])
        assert per_point.data.shape == (2, 2)

    def test_maxpool_empty_group_raises(self):
        p = MlpParams(widths=(2, 2),
                      weights=[leaf(np.eye(2))], biases=[leaf(np.zeros(2))])
        with pytest.raises(ad.EmptyGroupError):
            ad.shared_mlp_maxpool(p, Tensor(np.zeros((0, 2))))

    def test_cross_entropy_uniform_logits(self):
        logits = leaf(np.zeros((3, 4)))
        loss = ad.cross_entropy(logits, np.array([0, 1, 3]))
        assert loss.data == pytest.approx(np.log(4.0), abs=1e-12)

    def test_huber_values(self):
        x = Tensor(np.array([0.5, 2.0]))
        h = ad.huber(x).data
        assert h[0] == 0.125
        assert h[1] == 1.5

    def test_huber_norm_matches_huber_of_norm(self):
        v = leaf(np.array([[0.3, 0.4], [3.0, 4.0]]))
        out = ad.huber_norm(v).data
        assert out[0] == pytest.approx(0.5 * 0.25, abs=1e-15)
        assert out[1] == pytest.approx(1.0 * (5.0 - 0.5), abs=1e-15)

    def test_focal_gamma0_no_alpha_is_cross_entropy(self):
        rng = np.random.default_rng(3)
        z = rng.normal(size=(6, 2))
        t = rng.integers(0, 2, size=6)
        f = ad.focal_loss(Tensor(z), t, gamma=0.0, alpha=None)
        ce = ad.cross_entropy(Tensor(z), t)
        assert f.data == pytest.approx(ce.data, abs=1e-12)

    def test_focal_downweights_easy_examples(self):
        easy = Tensor(np.array([[0.0, 8.0]]))
        hard = Tensor(np.array([[0.0, -8.0]]))
        t = np.array([1])
        assert ad.focal_loss(easy, t).data < 1e-4
        assert ad.focal_loss(hard, t).data > 1.0

    def test_matmul_grad_by_hand(self):
        a = leaf([[1.0, 2.0]])
        b = leaf([[3.0], [4.0]])
        loss = ad.sum_all(ad.matmul(a, b))
        backward(loss)
        np.testing.assert_array_equal(a.grad, [[3.0, 4.0]])
        np.testing.assert_array_equal(b.grad, [[1.0], [2.0]])

    def test_bias_broadcast_grad_sums_rows(self):
        x = Tensor(np.ones((4, 3)))
        b = leaf(np.zeros(3))
        loss = ad.sum_all(ad.add(x, b))
        backward(loss)
        np.testing.assert_array_equal(b.grad, [4.0, 4.0, 4.0])


class TestGraphMechanics:
    def test_backward_twice_raises(self):
        x = leaf([[1.0]])
        loss = ad.sum_all(ad.square(x))
        backward(loss)
        with pytest.raises(ad.GraphReusedError):
            backward(loss)

    def test_backward_requires_scalar(self):
        x = leaf([[1.0, 2.0]])
        with pytest.raises(ad.DiffError):
            backward(ad.square(x))

    def test_grad_accumulates_across_shared_subgraph(self):
        x = leaf([[2.0]])
        y = ad.square(x)
        loss = ad.sum_all(ad.add(y, y))
        backward(loss)
        assert x.grad.item() == pytest.approx(8.0)

    def test_constants_get_no_grad(self):
        c = Tensor(np.ones((2, 2)))
        x = leaf(np.ones((2, 2)))
        loss = ad.sum_all(ad.mul(c, x))
        backward(loss)
        assert c.grad is None
        assert x.grad is not None

    def test_gather_rows_scatter_adds(self):
        x = leaf(np.arange(6.0).reshape(3, 2))
        g = ad.gather_rows(x, np.array([0, 0, 2]))
        backward(ad.sum_all(g))
        np.testing.assert_array_equal(x.grad, [[2.0, 2.0], [0.0, 0.0], [1.0, 1.0]])

    def test_segment_max_first_index_tie(self):
        x = leaf(np.array([[1.0], [1.0], [0.0]]))
        out = ad.segment_max(x, np.array([0]))
        backward(ad.sum_all(out))
        np.testing.assert_array_equal(x.grad, [[1.0], [0.0], [0.0]])

    def test_segment_mean_values(self):
        x = Tensor(np.array([[1.0], [3.0], [5.0]]))
        out = ad.segment_mean(x, np.array([0, 2]))
        np.testing.assert_array_equal(out.data, [[2.0], [5.0]])

    def test_segment_empty_raises(self):
        x = Tensor(np.zeros((2, 1)))
        with pytest.raises(ad.DiffError):
            ad.segment_max(x, np.array([0, 1, 2]))

    def test_indexed_mean_roundtrip(self):
        x = Tensor(np.array([[2.0], [0.0], [4.0], [6.0]]))
        out = ad.indexed_mean(x, np.array([1, 0, 1, 0]), 2)
        np.testing.assert_array_equal(out.data, [[3.0], [3.0], [3.0], [3.0]])

    def test_dtype_preserved_float32(self):
        x = leaf(np.ones((2, 2)), dtype=np.float32)
        w = leaf(np.ones((2, 2)), dtype=np.float32)
        y = ad.relu(ad.matmul(x, w))
        loss = ad.mean_all(y)
        assert y.data.dtype == np.float32
        backward(loss)
        assert w.grad.dtype == np.float32


class TestFiniteDifferences:
    """Independent oracle: central differences over seeded random graphs."""

    def _mlp_loss(self, seed, widths=(3, 5, 2)):
        rng = np.random.default_rng(seed)
        p = MlpParams.create(widths, rng)
        x = Tensor(rng.normal(size=(4, widths[0])))
        t = rng.integers(0, widths[-1], size=4)

        def fn():
            return ad.cross_entropy(ad.mlp_forward(p, x), t)

        return fn, p.parameters()

    @pytest.mark.parametrize("seed", range(10))
    def test_mlp_cross_entropy_grads(self, seed):
        fn, params = self._mlp_loss(seed)
        report = grad_check(fn, params)
        assert report.passed, report.message

    @pytest.mark.parametrize("seed", range(5))
    def test_maxpool_and_gather_grads(self, seed):
        rng = np.random.default_rng(100 + seed)
        p = MlpParams.create((4, 6, 3), rng)
        x = Tensor(rng.normal(size=(7, 4)))
        idx = rng.integers(0, 7, size=5)

        def fn():
            rows = ad.gather_rows(ad.mlp_forward(p, x), idx)
            pooled = ad.max_rows(rows)
            return ad.sum_all(ad.square(pooled))

        report = grad_check(fn, p.parameters())
        assert report.passed, report.message

    @pytest.mark.parametrize("seed", range(5))
    def test_huber_norm_grads(self, seed):
        rng = np.random.default_rng(200 + seed)
        w = Tensor(rng.normal(size=(5, 3)), requires_grad=True)

        def fn():
            return ad.mean_all(ad.huber_norm(w))

        report = grad_check(fn, [w])
        assert report.passed, report.message

    @pytest.mark.parametrize("gamma,alpha", [(2.0, 0.25), (0.0, None), (1.0, 0.5)])
    def test_focal_grads(self, gamma, alpha):
        rng = np.random.default_rng(7)
        z = Tensor(rng.normal(size=(6, 2)), requires_grad=True)
        t = rng.integers(0, 2, size=6)

        def fn():
            return ad.focal_loss(z, t, gamma=gamma, alpha=alpha)

        report = grad_check(fn, [z])
        assert report.passed, report.message

    @pytest.mark.parametrize("seed", range(3))
    def test_segment_reductions_grads(self, seed):
        rng = np.random.default_rng(300 + seed)
        x = Tensor(rng.normal(size=(9, 4)), requires_grad=True)
        starts = np.array([0, 3, 4])
        inverse = rng.integers(0, 3, size=9)
        inverse[:3] = [0, 1, 2]  # every segment occupied

        def fn():
            a = ad.segment_max(x, starts)
            b = ad.segment_mean(x, starts)
            c = ad.indexed_mean(x, inverse, 3)
            return ad.sum_all(ad.square(a)) + ad.sum_all(ad.square(b)) + ad.mean_all(ad.square(c))

        report = grad_check(fn, [x])
        assert report.passed, report.message

    def test_grad_check_catches_wrong_gradient(self):
        """Negative control: a deliberately broken op must fail the check."""
        x = Tensor(np.array([[1.3, -0.7]]), requires_grad=True)

        def bad_square(a):
            out_data = a.data * a.data

            def backward_fn():
                ad._acc(a, out.grad * a.data)  # missing factor of 2

            out = ad._node(out_data, (a,), backward_fn)
            return out

        def fn():
            return ad.sum_all(bad_square(x))

        report = grad_check(fn, [x])
        assert not report.passed

    def test_grad_check_reports_nonfinite(self):
        x = Tensor(np.array([[1.0]]), requires_grad=True)

        def fn():
            t = ad.square(x)
            return ad.sum_all(ad.scale(t, np.inf))

        report = grad_check(fn, [x])
        assert not report.passed
        assert "non-finite" in report.message


class TestOptimizer:
    def test_momentum_update_by_hand(self):
        p = leaf([[1.0]])
        opt = SgdMomentum([p], lr=0.1, momentum=0.9)
        p.grad = np.array([[2.0]])
        opt.step()  # v=2, p=1-0.2=0.8
        assert p.data.item() == pytest.approx(0.8)
        p.grad = np.array([[1.0]])
        opt.step()  # v=0.9*2+1=2.8, p=0.8-0.28=0.52
        assert p.data.item() == pytest.approx(0.52)

    def test_zero_grad_clears(self):
        p = leaf([[1.0]])
        p.grad = np.array([[5.0]])
        opt = SgdMomentum([p], lr=0.1)
        opt.zero_grad()
        assert p.grad is None

    def test_quadratic_descent_converges(self):
        p = leaf([[4.0]])
        opt = SgdMomentum([p], lr=0.05, momentum=0.9)
        for _ in range(200):
            opt.zero_grad()
            loss = ad.sum_all(ad.square(p))
            backward(loss)
            opt.step()
        assert abs(p.data.item()) < 1e-3


class TestMlpParams:
    def test_create_shapes_and_init(self):
        rng = np.random.default_rng(0)
        p = MlpParams.create((9, 32, 64), rng)
        assert [w.data.shape for w in p.weights] == [(9, 32), (32, 64)]
        assert all(np.all(b.data == 0) for b in p.biases)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ad.DiffError):
            MlpParams(widths=(2, 3),
                      weights=[leaf(np.zeros((2, 4)))], biases=[leaf(np.zeros(4))])

    def test_nonfinite_rejected(self):
        w = np.zeros((2, 3))
        w[0, 0] = np.nan
        with pytest.raises(ad.DiffError):
            MlpParams(widths=(2, 3), weights=[leaf(w)], biases=[leaf(np.zeros(3))])

    def test_input_width_enforced(self):
        rng = np.random.default_rng(0)
        p = MlpParams.create((3, 2), rng)
        with pytest.raises(ad.DiffError):
            ad.mlp_forward(p, Tensor(np.zeros((1, 4))))

    def test_named_parameters(self):
        rng = np.random.default_rng(0)
        p = MlpParams.create((2, 3, 1), rng)
        names = set(p.named("enc"))
        assert names == {"enc.w0", "enc.b0", "enc.w1", "enc.b1"}
