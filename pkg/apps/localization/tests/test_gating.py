import numpy as np
from django.test import SimpleTestCase
from scipy.special import expit

from apps.localization.exceptions import ShapeError
from apps.localization.services.gating import (
    GateParams,
    gate_backward,
    gate_forward,
    gate_values,
    init_gate_params,
)
from apps.localization.services.losses import finite_difference_check


def unpack(theta, dim):
    x1, x2 = theta[:dim], theta[dim:2 * dim]
    weight = theta[2 * dim:6 * dim].reshape(2, 2 * dim)
    bias = theta[6 * dim:]
    return x1, x2, GateParams(weight=weight, bias=bias)


class GateForwardTests(SimpleTestCase):

    def test_neutral_gate_averages_inputs(self):
        x1, x2 = np.array([1.0, -2.0, 4.0]), np.array([3.0, 0.0, 1.0])
        params = init_gate_params(3)
        np.testing.assert_array_equal(gate_values(x1, x2, params), [0.5, 0.5])
        np.testing.assert_allclose(gate_forward(x1, x2, params), (x1 + x2) / 2, atol=1e-15)

    def test_saturated_gate_selects_the_first_input(self):
        x1, x2 = np.array([1.0, 2.0]), np.array([-5.0, 7.0])
        params = GateParams(weight=np.zeros((2, 4)), bias=np.array([50.0, -50.0]))
        np.testing.assert_allclose(gate_forward(x1, x2, params), x1, atol=1e-12)

    def test_hand_computed_example(self):
        params = GateParams(weight=np.array([[1.0, 0, 0, 0], [0, 0, 0, 1.0]]), bias=np.zeros(2))
        out = gate_forward(np.array([1.0, 0.0]), np.array([0.0, 1.0]), params)
        np.testing.assert_allclose(out, [expit(1.0), expit(1.0)], atol=1e-15)
        np.testing.assert_allclose(out, [0.7311, 0.7311], atol=1e-4)

    def test_output_follows_the_gate_contract(self):
        rng = np.random.default_rng(0)
        params = GateParams(weight=rng.normal(size=(2, 10)), bias=rng.normal(size=2))
        x1, x2 = rng.normal(size=5), rng.normal(size=5)
        g = gate_values(x1, x2, params)
        self.assertTrue(np.all((g > 0) & (g < 1)))
        np.testing.assert_allclose(gate_forward(x1, x2, params), g[0] * x1 + g[1] * x2, atol=1e-15)

    def test_swapping_inputs_and_parameters(self):
        rng = np.random.default_rng(1)
        dim = 4
        weight, bias = rng.normal(size=(2, 2 * dim)), rng.normal(size=2)
        x1, x2 = rng.normal(size=dim), rng.normal(size=dim)
        swapped = GateParams(
            weight=np.stack([
                np.concatenate([weight[1, dim:], weight[1, :dim]]),
                np.concatenate([weight[0, dim:], weight[0, :dim]]),
            ]),
            bias=bias[::-1].copy(),
        )
        params = GateParams(weight=weight, bias=bias)
        np.testing.assert_allclose(gate_values(x2, x1, swapped), gate_values(x1, x2, params)[::-1], atol=1e-12)
        np.testing.assert_allclose(gate_forward(x2, x1, swapped), gate_forward(x1, x2, params), atol=1e-12)

    def test_shape_errors(self):
        params = init_gate_params(2)
        with self.assertRaises(ShapeError):
            gate_forward(np.ones(3), np.ones(3), params)
        with self.assertRaises(ShapeError):
            gate_forward(np.ones(2), np.ones(3), params)
        with self.assertRaises(ShapeError):
            GateParams(weight=np.zeros((3, 4)), bias=np.zeros(2))
        with self.assertRaises(ShapeError):
            GateParams(weight=np.zeros((2, 4)), bias=np.zeros(3))
        with self.assertRaises(ShapeError):
            gate_backward(np.ones(2), np.ones(2), params, np.ones(3))


class GateBackwardTests(SimpleTestCase):

    def test_zero_upstream_gives_zero_gradients(self):
        rng = np.random.default_rng(2)
        params = GateParams(weight=rng.normal(size=(2, 6)), bias=rng.normal(size=2))
        grads = gate_backward(rng.normal(size=3), rng.normal(size=3), params, np.zeros(3))
        for grad in (grads.x1, grads.x2, grads.weight, grads.bias):
            self.assertFalse(np.any(grad))

    def test_saturated_gates_have_vanishing_parameter_gradients(self):
        rng = np.random.default_rng(3)
        params = GateParams(weight=np.zeros((2, 6)), bias=np.array([60.0, -60.0]))
        grads = gate_backward(rng.normal(size=3), rng.normal(size=3), params, rng.normal(size=3))
        self.assertLess(np.max(np.abs(grads.weight)), 1e-15)
        self.assertLess(np.max(np.abs(grads.bias)), 1e-15)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            dim = int(rng.integers(1, 17))
            upstream = rng.normal(size=dim)

            def loss_fn(theta, dim=dim, upstream=upstream):
                x1, x2, params = unpack(theta, dim)
                value = float(np.dot(upstream, gate_forward(x1, x2, params)))
                grads = gate_backward(x1, x2, params, upstream)
                return value, np.concatenate([grads.x1, grads.x2, grads.weight.reshape(-1), grads.bias])

            theta = np.concatenate([
                rng.normal(size=2 * dim),
                rng.normal(0, 0.5, size=4 * dim),
                rng.normal(size=2),
            ])
            self.assertLess(finite_difference_check(loss_fn, theta), 1e-5)

    def test_batched_gradients_sum_per_sample_gradients(self):
        rng = np.random.default_rng(5)
        params = GateParams(weight=rng.normal(size=(2, 4)), bias=rng.normal(size=2))
        x1, x2, upstream = rng.normal(size=(3, 2)), rng.normal(size=(3, 2)), rng.normal(size=(3, 2))

        batched = gate_backward(x1, x2, params, upstream)
        singles = [gate_backward(x1[i], x2[i], params, upstream[i]) for i in range(3)]
        np.testing.assert_allclose(batched.weight, sum(s.weight for s in singles), atol=1e-12)
        np.testing.assert_allclose(batched.bias, sum(s.bias for s in singles), atol=1e-12)
        np.testing.assert_allclose(batched.x1[1], singles[1].x1, atol=1e-12)
        np.testing.assert_allclose(gate_forward(x1, x2, params)[2], gate_forward(x1[2], x2[2], params), atol=1e-12)

        nested = gate_backward(x1.reshape(3, 1, 2), x2.reshape(3, 1, 2), params, upstream.reshape(3, 1, 2))
        self.assertEqual(nested.weight.shape, (2, 4))
        np.testing.assert_allclose(nested.weight, batched.weight, atol=1e-12)
        np.testing.assert_allclose(nested.bias, batched.bias, atol=1e-12)
