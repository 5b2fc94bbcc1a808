"""1D quadrature rules, nodal Lagrange bases and sum-factorized contractions.

Element tensors are numpy arrays whose trailing ``d`` axes are the tensor
axes, ordered ``(..., z, y, x)``: in C order the x index runs fastest, so the
local node ``(i, j, k)`` has flat index ``i + n*j + n*n*k``. Reference
direction ``b`` (0 = x) lives on axis ``-(b + 1)``.
"""

import logging
import threading
from collections.abc import Iterator
from contextlib import contextmanager
from dataclasses import dataclass
from functools import cache, reduce

import numpy as np

from ale_minihydro.exceptions import DimensionMismatchError

logger = logging.getLogger(__name__)

NEWTON_TOL = 1e-15
NEWTON_MAX_ITER = 100


@dataclass(frozen=True)
class QuadratureRule1D:
    points: np.ndarray
    weights: np.ndarray

    @property
    def n(self) -> int:
        return self.points.size


@dataclass(frozen=True)
class Basis1D:
    """Lagrange basis on ``nodes`` sampled at the points of ``quad``.

    ``B[q, i]`` is the value and ``G[q, i]`` the derivative of basis function
    ``i`` at quadrature point ``q``.
    """

    nodes: np.ndarray
    quad: QuadratureRule1D
    B: np.ndarray
    G: np.ndarray

    @property
    def order(self) -> int:
        return self.nodes.size - 1

    @property
    def d1d(self) -> int:
        return self.nodes.size

    @property
    def q1d(self) -> int:
        return self.quad.n


def _legendre(n: int, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """P_n(x) and P_n'(x) by the three-term recurrence"""
    p_prev, p = np.ones_like(x), x.copy()
    if n == 0:
        return p_prev, np.zeros_like(x)
    for k in range(1, n):
        p_prev, p = p, ((2 * k + 1) * x * p - k * p_prev) / (k + 1)
    dp = n * (x * p - p_prev) / (x * x - 1.0)
    return p, dp


@cache
def gauss_legendre(n: int) -> QuadratureRule1D:
    """n-point Gauss-Legendre rule, exact for polynomials of degree 2n-1"""
    if n < 1:
        raise ValueError(f"a quadrature rule needs at least one point, got {n}")
    # Chebyshev initial guesses, refined by Newton on P_n
    x = np.cos(np.pi * (np.arange(n) + 0.75) / (n + 0.5))
    for _ in range(NEWTON_MAX_ITER):
        p, dp = _legendre(n, x)
        step = p / dp
        x = x - step
        if np.max(np.abs(step)) <= NEWTON_TOL:
            break
    _, dp = _legendre(n, x)
    weights = 2.0 / ((1.0 - x * x) * dp * dp)
    order = np.argsort(x)
    x, weights = x[order], weights[order]
    # enforce symmetry
    x = 0.5 * (x - x[::-1])
    weights = 0.5 * (weights + weights[::-1])
    return QuadratureRule1D(points=x, weights=weights)


def _lobatto(p: int) -> tuple[np.ndarray, np.ndarray]:
    n = p + 1
    # Chebyshev-Gauss-Lobatto guesses; Newton on (1 - x^2) P_p'(x)
    x = -np.cos(np.pi * np.arange(n) / p)
    vand = np.zeros((n, n))
    for _ in range(NEWTON_MAX_ITER):
        vand[:, 0] = 1.0
        vand[:, 1] = x
        for k in range(1, p):
            vand[:, k + 1] = ((2 * k + 1) * x * vand[:, k] - k * vand[:, k - 1]) / (k + 1)
        step = (x * vand[:, p] - vand[:, p - 1]) / (n * vand[:, p])
        x = x - step
        if np.max(np.abs(step)) <= NEWTON_TOL:
            break
    x[0], x[-1] = -1.0, 1.0
    x = 0.5 * (x - x[::-1])
    weights = 2.0 / (p * n * vand[:, p] ** 2)
    return x, weights


@cache
def gauss_lobatto_nodes(p: int) -> np.ndarray:
    """p+1 Gauss-Lobatto nodes, endpoints included, strictly increasing"""
    if p < 1:
        raise ValueError(f"Lobatto nodes need order >= 1, got {p}")
    nodes, _ = _lobatto(p)
    nodes.setflags(write=False)
    return nodes


@cache
def gauss_lobatto(n: int) -> QuadratureRule1D:
    """n-point Gauss-Lobatto rule (exact to degree 2n-3)"""
    if n < 2:
        raise ValueError(f"a Lobatto rule needs at least two points, got {n}")
    nodes, weights = _lobatto(n - 1)
    return QuadratureRule1D(points=nodes, weights=weights)


def lagrange_matrices(nodes: np.ndarray, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Values and derivatives of the Lagrange polynomials on ``nodes`` at ``points``"""
    nodes = np.asarray(nodes, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64)
    n = nodes.size
    if np.unique(nodes).size != n:
        raise ValueError("basis nodes must be distinct")
    diff = nodes[:, None] - nodes[None, :]
    np.fill_diagonal(diff, 1.0)
    denom = np.prod(diff, axis=1)
    B = np.empty((points.size, n))
    G = np.zeros((points.size, n))
    for i in range(n):
        others = np.delete(np.arange(n), i)
        factors = points[:, None] - nodes[None, others]
        B[:, i] = np.prod(factors, axis=1) / denom[i]
        for k in range(others.size):
            G[:, i] += np.prod(np.delete(factors, k, axis=1), axis=1)
        G[:, i] /= denom[i]
    return B, G


def eval_basis(nodes: np.ndarray, quad: QuadratureRule1D) -> Basis1D:
    B, G = lagrange_matrices(nodes, quad.points)
    return Basis1D(nodes=np.asarray(nodes, dtype=np.float64), quad=quad, B=B, G=G)


@cache
def lobatto_basis(p: int, q1d: int) -> Basis1D:
    """Nodal basis of order p on Lobatto nodes at ``q1d`` Gauss-Legendre points"""
    return eval_basis(gauss_lobatto_nodes(p), gauss_legendre(q1d))


class FlopCounter:
    """Multiply-add counter fed by the contraction primitives"""

    def __init__(self) -> None:
        self.count = 0
        self._lock = threading.Lock()

    def add(self, n: int) -> None:
        with self._lock:
            self.count += int(n)


_active_counter: FlopCounter | None = None


@contextmanager
def count_flops() -> Iterator[FlopCounter]:
    global _active_counter
    previous, counter = _active_counter, FlopCounter()
    _active_counter = counter
    try:
        yield counter
    finally:
        _active_counter = previous


def add_flops(n: int) -> None:
    if _active_counter is not None:
        _active_counter.add(n)


def contract_dim(matrix: np.ndarray, t: np.ndarray, axis: int) -> np.ndarray:
    """Apply ``matrix`` along one axis of ``t``"""
    if t.shape[axis] != matrix.shape[1]:
        raise DimensionMismatchError(f"contraction along axis {axis}", matrix.shape[1], t.shape[axis])
    out = np.moveaxis(np.tensordot(matrix, t, axes=([1], [axis])), 0, axis)
    if _active_counter is not None:
        _active_counter.add(matrix.shape[0] * t.size)
    return out


def apply_factors(t: np.ndarray, factors: list[np.ndarray]) -> np.ndarray:
    # factors[b] acts on reference direction b, x first
    for b, matrix in enumerate(factors):
        t = contract_dim(matrix, t, -(b + 1))
    return t


def interp(basis: Basis1D, u: np.ndarray, dim: int) -> np.ndarray:
    """Values at quadrature points: (..., D^dim) -> (..., Q^dim)"""
    return apply_factors(u, [basis.B] * dim)


def interp_t(basis: Basis1D, uq: np.ndarray, dim: int) -> np.ndarray:
    return apply_factors(uq, [basis.B.T] * dim)


def interp_grad(basis: Basis1D, u: np.ndarray, dim: int) -> np.ndarray:
    """Reference gradient at quadrature points: (..., D^dim) -> (..., Q^dim, dim)"""
    return np.stack(
        [apply_factors(u, [basis.G if c == b else basis.B for c in range(dim)]) for b in range(dim)],
        axis=-1,
    )


def interp_grad_t(basis: Basis1D, gq: np.ndarray, dim: int) -> np.ndarray:
    """Transpose of ``interp_grad``: (..., Q^dim, dim) -> (..., D^dim)"""
    total = None
    for b in range(dim):
        part = apply_factors(gq[..., b], [basis.G.T if c == b else basis.B.T for c in range(dim)])
        total = part if total is None else total + part
    return total


def contraction_flops(dim: int, n_in: int, n_out: int) -> int:
    """Multiply-adds of one full interp (x axis first) on a single element"""
    return sum(n_out**k * n_in ** (dim - k + 1) for k in range(1, dim + 1))


def kron_factors(factors: list[np.ndarray]) -> np.ndarray:
    """Dense operator of per-direction factors in the (z, y, x) flattening"""
    return reduce(np.kron, factors[::-1])


def kron_interp(basis: Basis1D, dim: int) -> np.ndarray:
    return kron_factors([basis.B] * dim)


def kron_grad(basis: Basis1D, dim: int, direction: int) -> np.ndarray:
    return kron_factors([basis.G if c == direction else basis.B for c in range(dim)])
