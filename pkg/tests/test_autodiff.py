"""Forward/backward correctness of the tensor core, Adam, and the schedule."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rose import autodiff as ad
from rose.autodiff import AdamState, CosineSchedule, DTensor, adam_step, cosine_lr
from rose.errors import DomainError, RoseError, ShapeError

from oracles import adam_by_hand, finite_diff, matmul_loops, rel_err

RNG = np.random.default_rng(1234)


def check_grad(build, x0, h=1e-6, tol=1e-4):
    """Compare backward() against central differences for scalar build(x)."""
    p = ad.parameter(x0.copy())
    build(p).backward()
    fd = finite_diff(lambda x: float(build(DTensor(x)).data), x0.copy(), h=h)
    assert rel_err(p.grad, fd) < tol


class TestForward:
    def test_softmax_uniform_logits(self):
        out = ad.softmax(DTensor([[0.0, 0.0, 0.0]]))
        np.testing.assert_allclose(out.data, [[1 / 3, 1 / 3, 1 / 3]], atol=1e-15)

    def test_identity_cases(self):
        assert ad.exp(DTensor(0.0)).item() == 1.0
        assert ad.sin(DTensor(0.0)).item() == 0.0

    def test_matmul_against_loop_oracle(self):
        a = np.array([[1.0, 2.0, -1.5], [0.25, -3.0, 4.0]])
        b = np.array([[2.0, 0.5], [-1.0, 1.5], [3.0, -2.0]])
        out = ad.matmul(DTensor(a), DTensor(b))
        np.testing.assert_array_equal(out.data, matmul_loops(a, b))

    def test_linear_matches_matmul_plus_bias(self):
        x = RNG.normal(size=(5, 4))
        w = RNG.normal(size=(4, 3))
        b = RNG.normal(size=3)
        fused = ad.linear(DTensor(x), DTensor(w), DTensor(b))
        np.testing.assert_array_equal(fused.data, x @ w + b)

    def test_matmul_shape_error_names_both(self):
        with pytest.raises(ShapeError) as ei:
            ad.matmul(DTensor(np.zeros((2, 3))), DTensor(np.zeros((4, 2))))
        assert "(2, 3)" in str(ei.value) and "(4, 2)" in str(ei.value)

    def test_elementwise_shape_error(self):
        with pytest.raises(ShapeError):
            ad.add(DTensor(np.zeros((2, 3))), DTensor(np.zeros((4,))))

    def test_asin_domain_error(self):
        with pytest.raises(DomainError):
            ad.asin(DTensor([1.5]))

    def test_repeated_forward_bit_identical(self):
        x = RNG.normal(size=(7, 5))
        a = ad.sigmoid(ad.mul(DTensor(x), 1.7))
        b = ad.sigmoid(ad.mul(DTensor(x), 1.7))
        np.testing.assert_array_equal(a.data, b.data)

    def test_cumsum_exclusive(self):
        out = ad.cumsum_exclusive(DTensor([[1.0, 2.0, 3.0]]), axis=1)
        np.testing.assert_array_equal(out.data, [[0.0, 1.0, 3.0]])

    @given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 1000))
    @settings(max_examples=30, deadline=None)
    def test_broadcast_mul_matches_loops(self, n, m, seed):
        rng = np.random.default_rng(seed)
        a = rng.normal(size=(n, m))
        b = rng.normal(size=(m,))
        out = ad.mul(DTensor(a), DTensor(b))
        expect = np.empty((n, m))
        for i in range(n):
            for j in range(m):
                expect[i, j] = a[i, j] * b[j]
        np.testing.assert_array_equal(out.data, expect)


class TestBackward:
    def test_quadratic_gradient(self):
        w = ad.parameter([1.0, 2.0, 3.0])
        ad.tsum(ad.mul(w, w)).backward()
        np.testing.assert_array_equal(w.grad, [2.0, 4.0, 6.0])

    def test_non_scalar_loss_rejected(self):
        with pytest.raises(ShapeError):
            ad.parameter([1.0, 2.0]).backward()

    def test_accumulation_without_zeroing(self):
        w = ad.parameter([3.0])
        ad.tsum(ad.square(w)).backward()
        ad.tsum(ad.square(w)).backward()
        np.testing.assert_array_equal(w.grad, [12.0])

    def test_softmax_cross_composition_fd(self):
        """Softmax composed with a quadratic readout, random 4x4."""
        x0 = RNG.normal(size=(4, 4))
        t = RNG.random((4, 4))

        def build(p):
            return ad.tsum(ad.square(ad.sub(ad.softmax(p), t)))

        p = ad.parameter(x0.copy())
        build(p).backward()
        fd = finite_diff(lambda x: float(build(DTensor(x)).data), x0.copy(), h=1e-6)
        assert rel_err(p.grad, fd) < 1e-6

    def test_diamond_graph_gradient(self):
        # y = (x + c) + 2x must give dy/dx = 3 even though x is reused.
        x = ad.parameter([5.0])
        y = ad.tsum(ad.add(ad.add(x, 1.0), ad.mul(x, 2.0)))
        y.backward()
        np.testing.assert_array_equal(x.grad, [3.0])

    @pytest.mark.parametrize(
        "name,build,sampler",
        [
            ("exp", lambda p: ad.tsum(ad.exp(p)), lambda r: r.normal(size=(3, 4))),
            ("sin", lambda p: ad.tsum(ad.square(ad.sin(p))), lambda r: r.normal(size=(3, 4))),
            ("asin", lambda p: ad.tsum(ad.asin(p)), lambda r: r.uniform(-0.9, 0.9, size=(3, 4))),
            ("relu", lambda p: ad.tsum(ad.square(ad.relu(p))), lambda r: r.normal(size=(3, 4)) + 0.2),
            ("sigmoid", lambda p: ad.tsum(ad.sigmoid(p)), lambda r: r.normal(size=(3, 4))),
            ("softplus", lambda p: ad.tsum(ad.square(ad.softplus(p))), lambda r: r.normal(size=(3, 4))),
            ("square", lambda p: ad.tsum(ad.square(p)), lambda r: r.normal(size=(3, 4))),
            ("abs", lambda p: ad.tsum(ad.tabs(p)), lambda r: r.normal(size=(3, 4)) + 3.0),
            ("div", lambda p: ad.tsum(ad.div(1.0, p)), lambda r: r.uniform(0.5, 2.0, size=(3, 4))),
            ("mean", lambda p: ad.square(ad.tmean(p)), lambda r: r.normal(size=(3, 4))),
            ("sum_axis", lambda p: ad.tsum(ad.square(ad.tsum(p, axis=1))), lambda r: r.normal(size=(3, 4))),
            ("cumsum", lambda p: ad.tsum(ad.square(ad.cumsum_exclusive(p, axis=1))), lambda r: r.normal(size=(3, 4))),
            ("softmax", lambda p: ad.tsum(ad.square(ad.softmax(p))), lambda r: r.normal(size=(3, 4))),
            ("reshape", lambda p: ad.tsum(ad.square(ad.reshape(p, (4, 3)))), lambda r: r.normal(size=(3, 4))),
            ("broadcast", lambda p: ad.tsum(ad.square(ad.broadcast_to(p, (5, 3, 4)))), lambda r: r.normal(size=(3, 4))),
            ("concat", lambda p: ad.tsum(ad.square(ad.concat([p, ad.mul(p, 2.0)], axis=1))), lambda r: r.normal(size=(3, 4))),
        ],
    )
    def test_unary_and_shape_op_gradients(self, name, build, sampler):
        check_grad(build, sampler(np.random.default_rng(hash(name) % 2**32)))

    def test_matmul_gradients_both_sides(self):
        a0 = RNG.normal(size=(3, 4))
        b0 = RNG.normal(size=(4, 2))
        a, b = ad.parameter(a0.copy()), ad.parameter(b0.copy())
        ad.tsum(ad.square(ad.matmul(a, b))).backward()
        fd_a = finite_diff(lambda x: float(np.sum((x @ b0) ** 2)), a0.copy())
        fd_b = finite_diff(lambda x: float(np.sum((a0 @ x) ** 2)), b0.copy())
        assert rel_err(a.grad, fd_a) < 1e-4
        assert rel_err(b.grad, fd_b) < 1e-4

    def test_linear_gradients(self):
        x0 = RNG.normal(size=(5, 3))
        w0 = RNG.normal(size=(3, 2))
        b0 = RNG.normal(size=2)
        x, w, b = ad.parameter(x0.copy()), ad.parameter(w0.copy()), ad.parameter(b0.copy())
        ad.tsum(ad.square(ad.linear(x, w, b))).backward()
        assert rel_err(w.grad, finite_diff(lambda v: float(np.sum((x0 @ v + b0) ** 2)), w0.copy())) < 1e-4
        assert rel_err(b.grad, finite_diff(lambda v: float(np.sum((x0 @ w0 + v) ** 2)), b0.copy())) < 1e-4
        assert rel_err(x.grad, finite_diff(lambda v: float(np.sum((v @ w0 + b0) ** 2)), x0.copy())) < 1e-4

    def test_no_grad_suppresses_tape(self):
        p = ad.parameter([1.0, 2.0])
        with ad.no_grad():
            out = ad.tsum(ad.square(p))
        assert not out.requires_grad and out._backward is None


class TestAdam:
    def test_first_step_moves_by_lr(self):
        p = ad.parameter([1.0], name="p")
        p.grad = np.array([1.0])
        adam_step({"p": p}, AdamState(), lr=0.1)
        assert abs(p.data[0] - 0.9) < 1e-8

    def test_matches_hand_recurrence(self):
        grads = [0.5, -0.2, 1.0, 0.3, -0.7]
        p = ad.parameter([2.0], name="p")
        state = AdamState()
        for g in grads:
            p.grad = np.array([g])
            adam_step({"p": p}, state, lr=0.05)
        expect = adam_by_hand(2.0, grads, lr=0.05)
        assert abs(p.data[0] - expect) < 1e-12

    def test_zero_grad_leaves_parameter_unchanged(self):
        p = ad.parameter([1.5], name="p")
        p.grad = np.array([0.0])
        adam_step({"p": p}, AdamState(), lr=0.1)
        assert p.data[0] == 1.5

    def test_missing_grad_names_parameter(self):
        p = ad.parameter([1.0], name="theta")
        with pytest.raises(RoseError) as ei:
            adam_step({"theta": p}, AdamState(), lr=0.1)
        assert "theta" in str(ei.value)

    def test_quadratic_descent_decreases_loss(self):
        p = ad.parameter([4.0, -3.0], name="p")
        state = AdamState()
        losses = []
        for _ in range(10):
            loss = ad.tsum(ad.square(p))
            losses.append(float(loss.data))
            loss.backward()
            adam_step({"p": p}, state, lr=0.05)
            p.zero_grad()
        assert all(b < a for a, b in zip(losses, losses[1:]))


class TestCosineSchedule:
    def test_base_at_step_zero(self):
        assert cosine_lr(CosineSchedule(), 0) == 5e-4

    def test_midpoint_is_half_base(self):
        sch = CosineSchedule(base_lr=5e-4, period=2500, floor_lr=0.0)
        assert abs(cosine_lr(sch, 1250) - 2.5e-4) < 1e-19

    def test_cycle_restart(self):
        sch = CosineSchedule(base_lr=5e-4, period=2500, floor_lr=0.0)
        assert cosine_lr(sch, 2500) == 5e-4

    def test_zero_period_rejected(self):
        with pytest.raises(DomainError):
            cosine_lr(CosineSchedule(period=0), 1)

    @given(st.integers(0, 10**6))
    @settings(max_examples=50, deadline=None)
    def test_lr_stays_in_band(self, step):
        sch = CosineSchedule(base_lr=3e-4, period=777, floor_lr=1e-5)
        lr = cosine_lr(sch, step)
        assert sch.floor_lr <= lr <= sch.base_lr


class TestDeterminism:
    def test_training_steps_bit_identical(self):
        def run():
            rng = np.random.default_rng(7)
            w = ad.parameter(rng.normal(size=(4, 4)), name="w")
            state = AdamState()
            for _ in range(20):
                x = DTensor(rng.normal(size=(8, 4)))
                loss = ad.tmean(ad.square(ad.matmul(x, w)))
                loss.backward()
                adam_step({"w": w}, state, lr=1e-2)
                w.zero_grad()
            return w.data

        np.testing.assert_array_equal(run(), run())
