import math

import numpy as np
import pytest

from mtrec.errors import NumericError, ShapeError
from mtrec.ndcore import Node, ParamStore, Tape, grad_check


def leaf(values):
    n = Node(values)
    n.grad = np.zeros_like(n.value)
    return n


class TestAffine:
    def test_unit_vector_selects_column(self):
        t = Tape()
        y = t.affine(Node([1.0, 0.0]), Node([[2.0, 3.0], [4.0, 5.0]]), Node([0.0, 0.0]))
        np.testing.assert_array_equal(y.value, [2.0, 4.0])

    def test_zero_input_returns_bias(self):
        t = Tape()
        y = t.affine(Node([0.0, 0.0]), Node([[1.0, 2.0], [3.0, 4.0]]), Node([7.0, -1.0]))
        np.testing.assert_array_equal(y.value, [7.0, -1.0])

    def test_hand_dot_product(self):
        t = Tape()
        y = t.affine(Node([1.0, 2.0]), Node([[1.0, 1.0]]), Node([1.0]))
        np.testing.assert_allclose(y.value, [4.0])

    def test_shape_error_names_both_shapes(self):
        t = Tape()
        with pytest.raises(ShapeError, match=r"\(3,\).*\(2, 2\)"):
            t.affine(Node([1.0, 2.0, 3.0]), Node([[1.0, 0.0], [0.0, 1.0]]), None)

    def test_batched_matches_per_row(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(5, 3))
        w = rng.normal(size=(4, 3))
        b = rng.normal(size=4)
        t = Tape()
        y = t.affine(Node(x), Node(w), Node(b))
        for i in range(5):
            ti = Tape()
            yi = ti.affine(Node(x[i]), Node(w), Node(b))
            np.testing.assert_allclose(y.value[i], yi.value, rtol=1e-14)

    def test_backward_rules(self):
        x, w, b = leaf([1.0, 2.0]), leaf([[3.0, 4.0], [5.0, 6.0]]), leaf([0.5, 0.5])
        t = Tape()
        y = t.affine(x, w, b)
        t.backward(y, seed=np.array([1.0, 2.0]))
        np.testing.assert_array_equal(w.grad, np.outer([1.0, 2.0], [1.0, 2.0]))
        np.testing.assert_array_equal(x.grad, np.array([1.0, 2.0]) @ w.value)
        np.testing.assert_array_equal(b.grad, [1.0, 2.0])


class TestRelu:
    def test_forward(self):
        t = Tape()
        np.testing.assert_array_equal(t.relu(Node([-1.0, 0.0, 2.0])).value, [0.0, 0.0, 2.0])
        np.testing.assert_array_equal(t.relu(Node([0.0, 0.0])).value, [0.0, 0.0])

    def test_subgradient_at_zero_passes_zero(self):
        x = leaf([-1.0, 0.0, 2.0])
        t = Tape()
        y = t.relu(x)
        t.backward(y, seed=np.array([1.0, 1.0, 1.0]))
        np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])


class TestSoftmax:
    def test_uniform_logits(self):
        t = Tape()
        p = t.softmax(Node(np.zeros(6)))
        np.testing.assert_allclose(p.value, np.full(6, 1 / 6), atol=1e-15)

    def test_singleton(self):
        t = Tape()
        np.testing.assert_array_equal(t.softmax(Node([12.3])).value, [1.0])

    def test_closed_form_ratio(self):
        t = Tape()
        p = t.softmax(Node([math.log(1.0), math.log(3.0)]))
        np.testing.assert_allclose(p.value, [0.25, 0.75], atol=1e-15)

    def test_sums_to_one_for_random_logits(self):
        rng = np.random.default_rng(42)
        for size in (1, 2, 17, 1000, 10_000):
            t = Tape()
            p = t.softmax(Node(rng.normal(scale=50.0, size=size)))
            assert abs(p.value.sum() - 1.0) <= 1e-12
            assert p.value.min() > 0.0 and p.value.max() <= 1.0

    def test_extreme_logits_stay_finite(self):
        t = Tape()
        p = t.softmax(Node([1e300, -1e300, 0.0]))
        assert np.all(np.isfinite(p.value))

    def test_empty_input(self):
        with pytest.raises(ShapeError):
            Tape().softmax(Node(np.zeros(0)))


class TestSigmoid:
    def test_zero(self):
        assert Tape().sigmoid(Node(0.0)).value == 0.5

    def test_symmetry_identity(self):
        t = Tape()
        for z in (-5.0, 1.0, 17.0):
            lhs = t.sigmoid(Node(z)).value
            rhs = 1.0 - t.sigmoid(Node(-z)).value
            assert abs(lhs - rhs) < 1e-15

    def test_closed_form(self):
        assert abs(Tape().sigmoid(Node(math.log(3.0))).value - 0.75) < 1e-15

    def test_large_magnitudes_stable(self):
        t = Tape()
        assert t.sigmoid(Node(800.0)).value == 1.0
        assert t.sigmoid(Node(-800.0)).value == 0.0


class TestWeightedSum:
    def test_identity_combine(self):
        t = Tape()
        y = t.weighted_sum([Node([1.0, 0.0])], Node([1.0]))
        np.testing.assert_array_equal(y.value, [1.0, 0.0])

    def test_hand_arithmetic(self):
        t = Tape()
        y = t.weighted_sum([Node([1.0, 0.0]), Node([0.0, 1.0])], Node([0.25, 0.75]))
        np.testing.assert_allclose(y.value, [0.25, 0.75])

    def test_zero_weights(self):
        t = Tape()
        y = t.weighted_sum([Node([3.0, 4.0]), Node([5.0, 6.0])], Node([0.0, 0.0]))
        np.testing.assert_array_equal(y.value, [0.0, 0.0])

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            Tape().weighted_sum([Node([1.0]), Node([2.0])], Node([1.0]))

    def test_backward_reaches_weights_and_vectors(self):
        v0, v1, w = leaf([1.0, 2.0]), leaf([3.0, 4.0]), leaf([0.5, 0.5])
        t = Tape()
        y = t.weighted_sum([v0, v1], w)
        t.backward(y, seed=np.array([1.0, 1.0]))
        np.testing.assert_array_equal(v0.grad, [0.5, 0.5])
        np.testing.assert_array_equal(v1.grad, [0.5, 0.5])
        np.testing.assert_array_equal(w.grad, [3.0, 7.0])


class TestStopGradient:
    def test_forward_is_bitwise_identity(self):
        x = Node([3.14, -2.0])
        y = Tape().stop_gradient(x)
        assert y.value is x.value  # shares storage: exact identity

    def test_backward_contributes_exact_zero(self):
        x = leaf([1.5, -2.5])
        t = Tape()
        y = t.stop_gradient(x)
        t.backward(y, seed=np.array([10.0, 10.0]))
        np.testing.assert_array_equal(x.grad, [0.0, 0.0])
        assert x.grad[0] == 0.0 and x.grad[1] == 0.0

    def test_composite_gradient_flows_through_unblocked_factor(self):
        # L = sum(SG(x) * x) at x=[2,3] has dL/dx = value of x itself
        x = leaf([2.0, 3.0])
        t = Tape()
        loss = t.sum_all(t.mul(t.stop_gradient(x), x))
        t.backward(loss)
        np.testing.assert_array_equal(x.grad, [2.0, 3.0])
        assert float(loss.value) == 13.0


class TestTapeMechanics:
    def test_backward_is_deterministic_bitwise(self):
        rng = np.random.default_rng(7)
        store = ParamStore()
        w = store.add("w", rng.normal(size=(4, 3)))
        b = store.add("b", rng.normal(size=4))
        x = rng.normal(size=(5, 3))

        def run():
            store.zero_grads()
            t = Tape()
            y = t.relu(t.affine(Node(x), w, b))
            loss = t.sum_all(t.mul(y, y))
            t.backward(loss)
            return w.grad.copy(), b.grad.copy()

        g1w, g1b = run()
        g2w, g2b = run()
        assert np.array_equal(g1w, g2w) and np.array_equal(g1b, g2b)

    def test_grad_accumulates_across_tapes(self):
        x = leaf([1.0])
        for _ in range(2):  # no zero_grads in between: leaf grads add up
            t = Tape()
            t.backward(t.scale(x, 3.0))
        np.testing.assert_array_equal(x.grad, [6.0])

    def test_diamond_graph_accumulates_both_paths(self):
        x = leaf([2.0])
        t = Tape()
        y = t.add(t.scale(x, 3.0), t.scale(x, 4.0))
        t.backward(y)
        np.testing.assert_array_equal(x.grad, [7.0])


class TestParamStore:
    def test_duplicate_name_rejected(self):
        store = ParamStore()
        store.add("w", np.zeros(2))
        with pytest.raises(ValueError):
            store.add("w", np.zeros(2))

    def test_zero_grads_is_exact(self):
        store = ParamStore()
        p = store.add("w", np.ones((2, 2)))
        p.grad += 5.0
        store.zero_grads()
        assert np.all(p.grad == 0.0)

    def test_load_values_shape_check(self):
        store = ParamStore()
        store.add("w", np.zeros((2, 2)))
        with pytest.raises(ShapeError):
            store.load_values({"w": np.zeros(3)})


class TestGradCheck:
    def test_quadratic_loss_passes(self):
        rng = np.random.default_rng(3)
        store = ParamStore()
        w = store.add("w", rng.normal(size=(3, 4)))
        x = rng.normal(size=4)

        def loss_fn():
            t = Tape()
            y = t.affine(Node(x), w, None)
            return t, t.sum_all(t.mul(y, y))

        report = grad_check(loss_fn, store)
        assert report.passed and not report.sg_excluded()

    def test_blocked_parameter_is_sg_excluded(self):
        rng = np.random.default_rng(4)
        store = ParamStore()
        w_open = store.add("w_open", rng.normal(size=(2, 3)))
        w_blocked = store.add("w_blocked", rng.normal(size=(2, 3)))
        x = rng.normal(size=3)

        def loss_fn():
            t = Tape()
            a = t.affine(Node(x), w_open, None)
            b = t.stop_gradient(t.affine(Node(x), w_blocked, None))
            y = t.add(a, b)
            return t, t.sum_all(t.mul(y, y))

        report = grad_check(loss_fn, store)
        assert report.passed
        assert report.sg_excluded() == ["w_blocked"]
        assert np.all(store["w_blocked"].grad == 0.0)

    def test_random_small_networks_match_fd(self):
        # no blocked edges: tape must match central differences at 1e-4
        for seed in range(3):
            rng = np.random.default_rng(seed)
            store = ParamStore()
            w1 = store.add("w1", rng.normal(scale=0.5, size=(6, 5)))
            b1 = store.add("b1", rng.normal(scale=0.1, size=6))
            w2 = store.add("w2", rng.normal(scale=0.5, size=(1, 6)))
            x = rng.normal(size=(3, 5))
            y = rng.integers(0, 2, size=(3, 1)).astype(float)

            def loss_fn():
                t = Tape()
                h = t.relu(t.affine(Node(x), w1, b1))
                p = t.sigmoid(t.affine(h, w2, None))
                return t, t.bce(p, y)

            report = grad_check(loss_fn, store)
            assert report.passed, [(e.name, e.max_rel_err) for e in report.failed()]

    def test_nonfinite_loss_raises(self):
        store = ParamStore()
        store.add("w", np.zeros((1, 1)))

        def loss_fn():
            t = Tape()
            return t, Node(float("nan"))

        with pytest.raises(NumericError):
            grad_check(loss_fn, store)


class TestBce:
    def test_out_of_range_prediction_raises(self):
        with pytest.raises(NumericError):
            Tape().bce(Node([1.5]), np.array([1.0]))

    def test_value_ln2(self):
        loss = Tape().bce(Node([0.5]), np.array([1.0]))
        assert abs(float(loss.value) - math.log(2.0)) < 1e-12
