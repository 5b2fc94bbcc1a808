import numpy as np
import pytest

from ale_minihydro.exceptions import DimensionMismatchError
from ale_minihydro.tensor_basis import (
    contract_dim,
    contraction_flops,
    count_flops,
    eval_basis,
    gauss_legendre,
    gauss_lobatto,
    gauss_lobatto_nodes,
    interp,
    interp_grad,
    interp_grad_t,
    interp_t,
    kron_grad,
    kron_interp,
    lobatto_basis,
)


def test_gauss_legendre_small_rules():
    one = gauss_legendre(1)
    np.testing.assert_allclose(one.points, [0.0], atol=1e-15)
    np.testing.assert_allclose(one.weights, [2.0])

    two = gauss_legendre(2)
    np.testing.assert_allclose(two.points, [-1 / np.sqrt(3), 1 / np.sqrt(3)], rtol=1e-14)
    np.testing.assert_allclose(two.weights, [1.0, 1.0], rtol=1e-14)
    assert two.weights @ two.points**2 == pytest.approx(2 / 3, rel=1e-14)
    assert two.weights @ two.points**3 == pytest.approx(0.0, abs=1e-15)


@pytest.mark.parametrize("n", range(1, 11))
def test_gauss_legendre_exactness(n):
    rule = gauss_legendre(n)
    assert rule.weights.sum() == pytest.approx(2.0, abs=1e-14)
    assert np.all(rule.weights > 0)
    for k in range(2 * n):
        exact = 0.0 if k % 2 else 2.0 / (k + 1)
        assert rule.weights @ rule.points**k == pytest.approx(exact, abs=1e-13)


def test_gauss_legendre_x8():
    rule = gauss_legendre(5)
    assert rule.weights @ rule.points**8 == pytest.approx(2 / 9, abs=1e-13)


def test_lobatto_nodes():
    np.testing.assert_allclose(gauss_lobatto_nodes(1), [-1.0, 1.0])
    np.testing.assert_allclose(gauss_lobatto_nodes(2), [-1.0, 0.0, 1.0], atol=1e-15)
    s = 1 / np.sqrt(5)
    np.testing.assert_allclose(gauss_lobatto_nodes(3), [-1.0, -s, s, 1.0], atol=1e-14)
    for p in range(1, 9):
        nodes = gauss_lobatto_nodes(p)
        assert nodes[0] == -1.0 and nodes[-1] == 1.0
        assert np.all(np.diff(nodes) > 0)


def test_lobatto_rule_weights():
    rule = gauss_lobatto(4)
    assert rule.weights.sum() == pytest.approx(2.0, abs=1e-14)
    assert rule.weights @ rule.points**4 == pytest.approx(2 / 5, abs=1e-14)


def test_rules_reject_empty():
    with pytest.raises(ValueError):
        gauss_legendre(0)
    with pytest.raises(ValueError):
        gauss_lobatto_nodes(0)


def test_linear_basis_at_center():
    basis = eval_basis(gauss_lobatto_nodes(1), gauss_legendre(1))
    np.testing.assert_allclose(basis.B, [[0.5, 0.5]])
    np.testing.assert_allclose(basis.G, [[-0.5, 0.5]])


@pytest.mark.parametrize("p", range(1, 7))
def test_partition_of_unity(p):
    basis = lobatto_basis(p, p + 2)
    assert basis.d1d == p + 1
    assert basis.q1d == p + 2
    np.testing.assert_allclose(basis.B.sum(axis=1), 1.0, atol=1e-13)
    np.testing.assert_allclose(basis.G.sum(axis=1), 0.0, atol=1e-12)


def test_quadratic_middle_derivative_vanishes_at_center():
    basis = eval_basis(gauss_lobatto_nodes(2), gauss_legendre(1))
    assert basis.G[0, 1] == pytest.approx(0.0, abs=1e-15)


def test_basis_interpolates_polynomials():
    p = 4
    basis = lobatto_basis(p, 6)
    nodes, x = basis.nodes, basis.quad.points
    coeffs = np.array([0.3, -1.0, 2.0, 0.5, -0.25])
    np.testing.assert_allclose(basis.B @ np.polyval(coeffs, nodes), np.polyval(coeffs, x), atol=1e-13)
    np.testing.assert_allclose(
        basis.G @ np.polyval(coeffs, nodes), np.polyval(np.polyder(coeffs), x), atol=1e-12
    )


def test_contract_identity_and_mismatch(rng):
    t = rng.standard_normal((2, 3, 4))
    np.testing.assert_array_equal(contract_dim(np.eye(4), t, -1), t)
    with pytest.raises(DimensionMismatchError):
        contract_dim(np.eye(3), t, -1)


def test_contract_constant_field():
    basis = lobatto_basis(3, 5)
    ones = np.ones((4, 4, 4))
    np.testing.assert_allclose(interp(basis, ones, 3), 1.0, atol=1e-13)


@pytest.mark.parametrize("dim", [2, 3])
@pytest.mark.parametrize("p", [1, 2, 3, 4])
def test_sum_factorization_matches_kronecker(dim, p, rng):
    basis = lobatto_basis(p, p + 2)
    u = rng.standard_normal((2,) + (p + 1,) * dim)
    flat = u.reshape(2, -1)
    scale = np.abs(flat).max()

    B = kron_interp(basis, dim)
    np.testing.assert_allclose(interp(basis, u, dim).reshape(2, -1), flat @ B.T, atol=1e-12 * scale * B.size)

    grads = interp_grad(basis, u, dim).reshape(2, -1, dim)
    for b in range(dim):
        np.testing.assert_allclose(grads[..., b], flat @ kron_grad(basis, dim, b).T, atol=1e-11 * scale)


@pytest.mark.parametrize("dim", [2, 3])
def test_transposes_are_adjoint(dim, rng):
    basis = lobatto_basis(3, 5)
    u = rng.standard_normal((4,) * dim)
    vq = rng.standard_normal((5,) * dim)
    assert np.sum(interp(basis, u, dim) * vq) == pytest.approx(np.sum(u * interp_t(basis, vq, dim)), rel=1e-12)
    gq = rng.standard_normal((5,) * dim + (dim,))
    lhs = np.sum(interp_grad(basis, u, dim) * gq)
    assert lhs == pytest.approx(np.sum(u * interp_grad_t(basis, gq, dim)), rel=1e-12)


@pytest.mark.parametrize("dim", [2, 3])
@pytest.mark.parametrize("p", [1, 2, 3, 4])
def test_flop_count_matches_closed_form(dim, p):
    basis = lobatto_basis(p, p + 2)
    u = np.ones((p + 1,) * dim)
    with count_flops() as counter:
        interp(basis, u, dim)
    assert counter.count == contraction_flops(dim, p + 1, p + 2)
    assert contraction_flops(dim, p + 1, p + 1) == dim * (p + 1) ** (dim + 1)


def test_flops_are_not_counted_outside_context():
    basis = lobatto_basis(2, 4)
    with count_flops() as counter:
        pass
    interp(basis, np.ones((3, 3)), 2)
    assert counter.count == 0
