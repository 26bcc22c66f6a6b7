import numpy as np
import pytest

from rsds.errors import ContractViolation
from rsds.flow import CouplingLayer, FlowStack, LuMixing, build_flow

from helpers import finite_diff_params, finite_diff_array, max_rel_err


def perturbed_stack(m, d, depth, seed, scale=0.3):
    """A seeded stack with non-identity couplings (tests need real maps)."""
    rng = np.random.default_rng(seed)
    stack = build_flow(m, d, depth=depth, hidden=8, seed=seed)
    for layer in stack.layers:
        if isinstance(layer, CouplingLayer):
            layer.net.weights[-1][:] = scale * rng.normal(
                size=layer.net.weights[-1].shape)
            layer.net.biases[-1][:] = scale * rng.normal(
                size=layer.net.biases[-1].shape)
    return stack


# ------------------------------------------------------------------- forward


def test_empty_stack_is_identity():
    stack = FlowStack([], 2, 3)
    z = np.array([1.0, -2.0])
    eps = np.array([0.5, 0.0, 3.0])
    x, logdet = stack.forward(z, eps)
    assert np.array_equal(x, np.concatenate([z, eps]))
    assert logdet == 0.0
    z2, eps2, ldi = stack.inverse(x)
    assert np.array_equal(z2, z) and np.array_equal(eps2, eps) and ldi == 0.0


def test_scalar_matrix_mixing():
    n = 3
    layer = LuMixing.from_matrix(2.0 * np.eye(n))
    stack = FlowStack([layer], 2, 1)
    v = np.array([1.0, -1.0, 0.5])
    x, logdet = stack.forward(v[:2], v[2:])
    assert np.allclose(x, 2.0 * v)
    assert abs(logdet - n * np.log(2.0)) < 1e-14


def test_logdet_matches_numerical_jacobian():
    for seed, (m, d) in enumerate([(2, 1), (3, 3), (2, 4), (1, 0)]):
        stack = perturbed_stack(m, d, depth=5, seed=seed)
        rng = np.random.default_rng(seed)
        z, eps = rng.normal(size=m), rng.normal(size=d)
        x, logdet = stack.forward(z, eps)
        n = m + d

        def fwd(v):
            return stack.forward(v[:m], v[m:])[0]

        v0 = np.concatenate([z, eps])
        h = 1e-6
        jac = np.empty((n, n))
        for i in range(n):
            vp, vm = v0.copy(), v0.copy()
            vp[i] += h
            vm[i] -= h
            jac[:, i] = (fwd(vp) - fwd(vm)) / (2 * h)
        _, num = np.linalg.slogdet(jac)
        assert abs(logdet - num) <= 1e-5


def test_non_finite_input_rejected():
    stack = perturbed_stack(2, 1, depth=3, seed=0)
    with pytest.raises(ContractViolation):
        stack.forward(np.array([np.nan, 0.0]), np.zeros(1))


# ------------------------------------------------------------------- inverse


def test_round_trip_large():
    rng = np.random.default_rng(0)
    for m, d, depth in [(3, 5, 8), (2, 0, 6), (32, 32, 8)]:
        stack = perturbed_stack(m, d, depth=depth, seed=m + d)
        z = rng.normal(size=(1000, m))
        eps = rng.normal(size=(1000, d))
        x, logdet = stack.forward(z, eps)
        z2, eps2, ldi = stack.inverse(x)
        assert np.abs(z2 - z).max() <= 1e-8
        if d:
            assert np.abs(eps2 - eps).max() <= 1e-8
        assert np.abs(logdet + ldi).max() < 1e-10
        x2, _ = stack.forward(z2, eps2)
        assert np.abs(x2 - x).max() <= 1e-8


def test_identity_stack_inverse_split():
    stack = FlowStack([], 2, 2)
    x = np.array([1.0, 2.0, 3.0, 4.0])
    z, eps, ldi = stack.inverse(x)
    assert np.array_equal(z, x[:2]) and np.array_equal(eps, x[2:])
    assert ldi == 0.0


def test_logdet_antisymmetry_many_points():
    stack = perturbed_stack(3, 3, depth=6, seed=9)
    rng = np.random.default_rng(9)
    z, eps = rng.normal(size=(100, 3)), rng.normal(size=(100, 3))
    x, logdet = stack.forward(z, eps)
    _, _, ldi = stack.inverse(x)
    assert np.abs(logdet + ldi).max() < 1e-10


def test_stack_logdet_is_sum_of_layers():
    stack = perturbed_stack(2, 2, depth=5, seed=4)
    rng = np.random.default_rng(4)
    rows = rng.normal(size=(7, 4))
    total = np.zeros(7)
    h = rows
    for layer in stack.layers:
        h, ld = layer.forward(h)
        total = total + ld
    _, logdet = stack.forward(rows[:, :2], rows[:, 2:])
    assert np.array_equal(total, logdet)


# ------------------------------------------------------------------ backward


def test_zero_upstream_grads_give_zero_param_grads():
    stack = perturbed_stack(2, 2, depth=4, seed=5)
    x = np.random.default_rng(5).normal(size=(3, 4))
    grads, gx = stack.backward(x, np.zeros((3, 2)), np.zeros((3, 2)), 0.0)
    masks = stack.grad_masks("")
    for name, g in grads.items():
        assert np.allclose(g, 0.0), name
    assert np.allclose(gx, 0.0)


def test_lu_logdet_gradient_is_minus_one():
    layer = LuMixing.from_matrix(np.diag([2.0, 3.0]))
    stack = FlowStack([layer], 1, 1)
    x = np.array([[1.0, 1.0]])
    grads, _ = stack.backward(x, np.zeros((1, 1)), np.zeros((1, 1)), 1.0)
    assert np.allclose(grads["layer0.log_diag"], -1.0)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_backward_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    stack = perturbed_stack(2, 2, depth=4, seed=20 + seed)
    x = rng.normal(size=(3, 4))
    gz = rng.normal(size=(3, 2))
    ge = rng.normal(size=(3, 2))
    gl = rng.normal(size=3)

    def objective():
        z, eps, ldi = stack.inverse(x)
        return float((gz * z).sum() + (ge * eps).sum() + (gl * ldi).sum())

    grads, gx = stack.backward(x, gz, ge, gl)
    fd = finite_diff_params(objective, stack.parameters(""),
                            stack.grad_masks(""), eps=1e-6)
    for name in fd:
        assert max_rel_err(grads[name], fd[name]) <= 1e-4, name
    fd_x = finite_diff_array(objective, x, eps=1e-6)
    assert max_rel_err(gx, fd_x) <= 1e-4


def test_frozen_mixing_has_zero_grads_but_transforms():
    stack = build_flow(2, 2, depth=4, hidden=8, mixing="permutation", seed=3)
    x = np.random.default_rng(3).normal(size=(5, 4))
    z, eps, _ = stack.inverse(x)
    grads, _ = stack.backward(x, np.ones((5, 2)), np.ones((5, 2)), 1.0)
    for name, g in grads.items():
        if ".lower" in name or ".upper" in name or ".log_diag" in name:
            assert np.allclose(g, 0.0), name
    # still a real rotation, not the identity
    assert not np.allclose(z, x[:, :2])


def test_change_of_variables_sanity_monte_carlo():
    # identity stack, standard-normal inputs: E[log p(x)] = -n/2 log(2 pi e)
    stack = FlowStack([], 2, 2)
    rng = np.random.default_rng(12)
    n = 4
    samples = rng.standard_normal((100_000, n))
    logp = -0.5 * n * np.log(2 * np.pi) - 0.5 * (samples ** 2).sum(axis=1)
    _, logdet = stack.forward(samples[:, :2], samples[:, 2:])
    vals = logp + logdet
    expect = -0.5 * n * np.log(2 * np.pi * np.e)
    band = 3 * vals.std() / np.sqrt(len(vals))
    assert abs(vals.mean() - expect) < band


def test_dimension_checks():
    with pytest.raises(ContractViolation):
        FlowStack([LuMixing.from_matrix(np.eye(3))], 2, 2)
    stack = perturbed_stack(2, 1, depth=3, seed=6)
    with pytest.raises(ContractViolation):
        stack.forward(np.zeros(2), np.zeros(2))
    with pytest.raises(ContractViolation):
        CouplingLayer.create(1, 4, seed=0)
