import numpy as np
import pytest

from fieldseg import autograd as ag
from fieldseg.model import LossWeights
from fieldseg.optim import adam_step, grad_check, zero_grad


def reference_conv3d(x, w, b, stride):
    """Direct six-loop cross-correlation with zero padding 1 (float64)."""
    c_in, d, h, wd = x.shape
    c_out = w.shape[0]
    od, oh, ow = (-(-d // stride), -(-h // stride), -(-wd // stride))
    out = np.zeros((c_out, od, oh, ow))
    for co in range(c_out):
        for zo in range(od):
            for yo in range(oh):
                for xo in range(ow):
                    acc = float(b[co])
                    for kd in range(3):
                        for kh in range(3):
                            for kw in range(3):
                                zi = stride * zo + kd - 1
                                yi = stride * yo + kh - 1
                                xi = stride * xo + kw - 1
                                if 0 <= zi < d and 0 <= yi < h and 0 <= xi < wd:
                                    acc += float(
                                        (w[co, :, kd, kh, kw] * x[:, zi, yi, xi]).sum())
                    out[co, zo, yo, xo] = acc
    return out


class TestConv3d:
    def test_identity_kernel_passthrough(self):
        x = ag.Tensor(np.full((1, 1, 1, 1), 5.0))
        w = np.zeros((1, 1, 3, 3, 3))
        w[0, 0, 1, 1, 1] = 1.0
        out = ag.conv3d(x, ag.Tensor(w), ag.Tensor(np.zeros(1)), stride=1)
        assert out.data[0, 0, 0, 0] == 5.0

    @pytest.mark.parametrize("stride", [1, 2])
    def test_matches_reference_on_random(self, stride):
        rng = np.random.default_rng(stride)
        x = rng.standard_normal((2, 5, 4, 6))
        w = rng.standard_normal((3, 2, 3, 3, 3))
        b = rng.standard_normal(3)
        got = ag.conv3d(ag.Tensor(x), ag.Tensor(w), ag.Tensor(b), stride).data
        assert np.allclose(got, reference_conv3d(x, w, b, stride), atol=1e-10)

    def test_delta_input_recovers_kernel(self):
        x = np.zeros((1, 5, 5, 5))
        x[0, 2, 2, 2] = 1.0
        rng = np.random.default_rng(3)
        w = rng.standard_normal((1, 1, 3, 3, 3))
        out = ag.conv3d(ag.Tensor(x), ag.Tensor(w), ag.Tensor(np.zeros(1)), 1).data
        # cross-correlation of a delta: out[2+i] = w[1-i] (flipped copy)
        patch = out[0, 1:4, 1:4, 1:4]
        assert np.allclose(patch, w[0, 0, ::-1, ::-1, ::-1], atol=1e-12)

    def test_stride2_shape(self):
        x = ag.Tensor(np.random.default_rng(0).standard_normal((2, 8, 8, 8)))
        w = ag.Tensor(np.zeros((4, 2, 3, 3, 3)))
        out = ag.conv3d(x, w, ag.Tensor(np.zeros(4)), stride=2)
        assert out.shape == (4, 4, 4, 4)

    def test_float32_matches_reference(self):
        rng = np.random.default_rng(9)
        x = rng.standard_normal((2, 16, 16, 16)).astype(np.float32)
        w = (rng.standard_normal((4, 2, 3, 3, 3)) * 0.2).astype(np.float32)
        b = rng.standard_normal(4).astype(np.float32)
        got = ag.conv3d(ag.Tensor(x), ag.Tensor(w), ag.Tensor(b), 1).data
        ref = reference_conv3d(x.astype(np.float64), w.astype(np.float64),
                               b.astype(np.float64), 1)
        assert np.max(np.abs(got - ref)) < 1e-5

    def test_shape_mismatch_rejected(self):
        x = ag.Tensor(np.zeros((2, 4, 4, 4)))
        w = ag.Tensor(np.zeros((3, 5, 3, 3, 3)))
        with pytest.raises(ValueError, match="channels"):
            ag.conv3d(x, w, ag.Tensor(np.zeros(3)), 1)

    def test_bad_stride_rejected(self):
        x = ag.Tensor(np.zeros((1, 4, 4, 4)))
        w = ag.Tensor(np.zeros((1, 1, 3, 3, 3)))
        with pytest.raises(ValueError, match="stride"):
            ag.conv3d(x, w, ag.Tensor(np.zeros(1)), 3)


class TestLinear:
    def test_identity(self):
        x = np.random.default_rng(0).standard_normal((4, 5))
        out = ag.linear(ag.Tensor(x), ag.Tensor(np.eye(5)), ag.Tensor(np.zeros(5)))
        assert np.allclose(out.data, x)

    def test_zero_weights_bias_rows(self):
        b = np.array([1.0, 2.0, 3.0])
        out = ag.linear(ag.Tensor(np.zeros((4, 5))), ag.Tensor(np.zeros((5, 3))),
                        ag.Tensor(b))
        assert np.allclose(out.data, np.tile(b, (4, 1)))

    def test_matches_triple_loop_oracle(self):
        rng = np.random.default_rng(4)
        x, w, b = rng.standard_normal((6, 5)), rng.standard_normal((5, 3)), rng.standard_normal(3)
        got = ag.linear(ag.Tensor(x), ag.Tensor(w), ag.Tensor(b)).data
        expected = np.zeros((6, 3))
        for i in range(6):
            for j in range(3):
                expected[i, j] = b[j]
                for k in range(5):
                    expected[i, j] += x[i, k] * w[k, j]
        assert np.max(np.abs(got - expected)) < 1e-6

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape mismatch"):
            ag.linear(ag.Tensor(np.zeros((2, 3))), ag.Tensor(np.zeros((4, 5))),
                      ag.Tensor(np.zeros(5)))


class TestSoftmax:
    def test_uniform_rows(self):
        out = ag.softmax_rows(ag.Tensor(np.zeros((3, 19))))
        assert np.allclose(out.data, 1.0 / 19)

    def test_extreme_logits_stable(self):
        out = ag.softmax_rows(ag.Tensor(np.array([[1000.0, 0.0]])))
        assert np.isfinite(out.data).all()
        assert np.allclose(out.data, [[1.0, 0.0]])

    def test_matches_extended_precision(self):
        rng = np.random.default_rng(5)
        z = rng.standard_normal((8, 7))
        got = ag.softmax_rows(ag.Tensor(z)).data
        zl = z.astype(np.longdouble)
        expected = np.exp(zl) / np.exp(zl).sum(axis=1, keepdims=True)
        assert np.max(np.abs(got - expected.astype(np.float64))) < 1e-6

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(6)
        out = ag.softmax_rows(ag.Tensor(rng.standard_normal((50, 19)) * 30))
        assert np.allclose(out.data.sum(axis=1), 1.0, atol=1e-6)


class TestCrossEntropy:
    def test_uniform_gives_log_k(self):
        loss = ag.cross_entropy(ag.Tensor(np.zeros((5, 19))), np.zeros(5, dtype=int))
        assert loss.item() == pytest.approx(np.log(19), abs=1e-9)

    def test_confident_correct_near_zero(self):
        logits = np.full((4, 3), -50.0)
        logits[np.arange(4), [0, 1, 2, 0]] = 50.0
        loss = ag.cross_entropy(ag.Tensor(logits), np.array([0, 1, 2, 0]))
        assert loss.item() < 1e-6

    def test_nonnegative(self):
        rng = np.random.default_rng(7)
        loss = ag.cross_entropy(ag.Tensor(rng.standard_normal((30, 5))),
                                rng.integers(0, 5, 30))
        assert loss.item() >= 0.0

    def test_empty_batch_rejected(self):
        with pytest.raises(ValueError):
            ag.cross_entropy(ag.Tensor(np.zeros((0, 4))), np.zeros(0, dtype=int))

    def test_gradient_against_finite_differences(self):
        rng = np.random.default_rng(8)
        w = ag.Parameter(rng.standard_normal((6, 4)), "w")
        x = ag.Tensor(rng.standard_normal((10, 6)))
        t = rng.integers(0, 4, 10)
        err = grad_check(lambda: ag.cross_entropy(ag.linear(x, w, ag.Tensor(np.zeros(4))), t),
                         [w], rng=np.random.default_rng(0))
        assert err < 1e-4


class TestDiceLoss:
    def test_perfect_one_hot_zero_loss(self):
        # every class present once, exact one-hot: each term is 1
        k = 4
        probs = np.eye(k)
        loss = ag.dice_loss(ag.Tensor(probs), np.arange(k), smooth=0.0)
        assert loss.item() == pytest.approx(0.0, abs=1e-12)

    def test_uniform_prediction_closed_form(self):
        # n=4, K=3, uniform probs 1/3: term_k = (2 c_k/3 + 1)/(c_k + 4/3 + 1)
        targets = np.array([0, 0, 1, 2])
        probs = np.full((4, 3), 1.0 / 3.0)
        counts = np.bincount(targets, minlength=3)
        expected = 1.0 - np.mean([(2 * c / 3 + 1) / (c + 4 / 3 + 1) for c in counts])
        loss = ag.dice_loss(ag.Tensor(probs), targets, smooth=1.0)
        assert loss.item() == pytest.approx(expected, abs=1e-12)

    def test_absent_class_not_penalized(self):
        # class 1 and 2 absent from targets and probability mass: term = 1
        probs = np.zeros((5, 3))
        probs[:, 0] = 1.0
        loss = ag.dice_loss(ag.Tensor(probs), np.zeros(5, dtype=int), smooth=1.0)
        assert loss.item() == pytest.approx(0.0, abs=1e-12)

    def test_in_unit_interval(self):
        rng = np.random.default_rng(9)
        probs = ag.softmax_rows(ag.Tensor(rng.standard_normal((40, 6)))).data
        loss = ag.dice_loss(ag.Tensor(probs), rng.integers(0, 6, 40))
        assert 0.0 <= loss.item() <= 1.0

    def test_empty_batch_rejected(self):
        with pytest.raises(ValueError):
            ag.dice_loss(ag.Tensor(np.zeros((0, 3))), np.zeros(0, dtype=int))


class TestLossWeights:
    def test_rejects_both_zero(self):
        with pytest.raises(ValueError):
            LossWeights(0.0, 0.0)

    def test_rejects_negative(self):
        with pytest.raises(ValueError):
            LossWeights(-1.0, 1.0)


class TestAdam:
    def test_zero_gradient_no_change(self):
        p = ag.Parameter(np.array([1.0, -2.0]), "p")
        p.grad = np.zeros(2)
        adam_step([p], lr=0.1)
        assert np.array_equal(p.data, [1.0, -2.0])

    def test_first_step_is_signed_lr(self):
        g = np.array([0.3, -40.0, 1e-3])
        p = ag.Parameter(np.zeros(3), "p")
        p.grad = g.copy()
        adam_step([p], lr=0.05)
        assert np.allclose(p.data, -0.05 * np.sign(g), atol=1e-6)

    def test_quadratic_descent_monotone(self):
        p = ag.Parameter(np.array([1.0]), "p")
        values = [abs(p.data[0])]
        for _ in range(10):
            p.grad = 2.0 * p.data
            adam_step([p], lr=0.1)
            values.append(abs(p.data[0]))
        assert all(b < a for a, b in zip(values, values[1:]))

    def test_missing_grad_skipped(self):
        p = ag.Parameter(np.ones(2), "p")
        adam_step([p])
        assert np.array_equal(p.data, np.ones(2))
        assert p.step == 0


class TestGradCheck:
    def test_linear_closure_tiny_error(self):
        w = ag.Parameter(np.array([[0.5, -1.0], [2.0, 0.25]]), "w")
        x = ag.Tensor(np.array([[1.0, 2.0]]))
        proj = np.array([[1.0], [-2.0]])

        def closure():
            out = ag.linear(x, w, ag.Tensor(np.zeros(2)))
            return ag.Tensor((out.data @ proj).sum(), (out,),
                             lambda g: out.accumulate(np.broadcast_to(g * proj.T, out.shape)))

        assert grad_check(closure, [w]) < 1e-9

    def test_conv_only_closure(self):
        rng = np.random.default_rng(10)
        xi = ag.Parameter(rng.standard_normal((1, 4, 4, 4)), "xi")
        w = ag.Parameter(rng.standard_normal((2, 1, 3, 3, 3)) * 0.4, "w")
        b = ag.Parameter(rng.standard_normal(2) * 0.1, "b")
        proj = rng.standard_normal((2, 3))

        def closure():
            out = ag.conv3d(xi, w, b, stride=1)
            rows = ag.Tensor(out.data.reshape(2, -1).T @ proj, (out,),
                             lambda g: out.accumulate((g @ proj.T).T.reshape(out.shape)))
            return ag.cross_entropy(rows, np.arange(64) % 3)

        err = grad_check(closure, [xi, w, b], max_entries=40,
                         rng=np.random.default_rng(1))
        assert err < 1e-5

    def test_sample_volume_grad(self):
        rng = np.random.default_rng(11)
        vt = ag.Parameter(rng.standard_normal((2, 3, 4, 5)), "vt")
        coords = rng.uniform(-1, 1, (30, 3))
        err = grad_check(
            lambda: ag.cross_entropy(ag.sample_volume(vt, coords), np.arange(30) % 2),
            [vt], max_entries=120, rng=np.random.default_rng(2))
        assert err < 1e-5


class TestTensorBasics:
    def test_concat_backward_splits(self):
        a = ag.Parameter(np.ones((2, 2)), "a")
        b = ag.Parameter(np.ones((2, 3)), "b")
        out = ag.concat([a, b], axis=1)
        out2 = out * 3.0
        loss = ag.Tensor(out2.data.sum(), (out2,),
                         lambda g: out2.accumulate(np.full(out2.shape, g)))
        loss.backward()
        assert np.allclose(a.grad, 3.0) and np.allclose(b.grad, 3.0)
        assert a.grad.shape == (2, 2) and b.grad.shape == (2, 3)

    def test_backward_requires_scalar(self):
        t = ag.Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError):
            t.backward()

    def test_add_shape_mismatch(self):
        with pytest.raises(ValueError):
            ag.Tensor(np.ones(2)) + ag.Tensor(np.ones(3))

    def test_reused_node_accumulates(self):
        p = ag.Parameter(np.array([2.0]), "p")
        y = p * 3.0 + p * 4.0
        y.backward()
        assert np.allclose(p.grad, [7.0])

    def test_zero_grad_resets(self):
        p = ag.Parameter(np.array([2.0]), "p")
        (p * 1.0).backward()
        zero_grad([p])
        assert p.grad is None
