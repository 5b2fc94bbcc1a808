import numpy as np
import pytest

from ale_minihydro.exceptions import ConfigError, PseudoCflError
from ale_minihydro.mesh_fespace import (
    cartesian_mesh,
    element_centroids,
    element_jacobians,
    element_volumes,
    min_det_jacobian,
    perturb_interior,
)
from ale_minihydro.models import TmopControls
from ale_minihydro.parameters import TargetMode
from ale_minihydro.tensor_basis import gauss_legendre, lobatto_basis
from ale_minihydro.tmop_mesh_opt import (
    AdaptivityField,
    QualityMetric,
    ShapeMetric2D,
    ShapeMetric3D,
    ShapeSizeMetric,
    advect_adaptivity,
    build_targets,
    gradient,
    hessian_action,
    hessian_diagonal,
    limiting_weight,
    make_objective,
    newton_solve,
    objective,
    summarize,
)

METRICS = [
    pytest.param(ShapeMetric2D(), 2, id="shape-2d"),
    pytest.param(ShapeMetric3D(), 3, id="shape-3d"),
    pytest.param(ShapeSizeMetric(ShapeMetric2D()), 2, id="shape-size-2d"),
    pytest.param(ShapeSizeMetric(ShapeMetric3D()), 3, id="shape-size-3d"),
]


class LimitingOnly(QualityMetric):
    def evaluate(self, T):
        return np.zeros(T.shape[:-2])

    def first(self, T):
        return np.zeros(T.shape)

    def second(self, T):
        return np.zeros(T.shape + T.shape[-2:])


def _near_identity(rng, dim, n=6):
    return np.eye(dim) + 0.2 * rng.standard_normal((n, dim, dim))


def _close(a, b, rtol):
    scale = max(np.abs(b).max(), 1e-12)
    np.testing.assert_allclose(a, b, atol=rtol * scale)


@pytest.mark.parametrize("metric,dim", METRICS)
def test_identity_is_critical_point(metric, dim):
    eye = np.eye(dim)[None]
    np.testing.assert_allclose(metric.evaluate(eye), 0.0, atol=1e-15)
    np.testing.assert_allclose(metric.first(eye), 0.0, atol=1e-14)


@pytest.mark.parametrize("metric,dim", METRICS)
def test_metric_derivatives_match_finite_differences(metric, dim, rng):
    T = _near_identity(rng, dim)
    assert np.all(np.linalg.det(T) > 0)
    eps = 1e-6
    P = metric.first(T)
    H = metric.second(T)
    for k in range(dim):
        for m in range(dim):
            E = np.zeros((dim, dim))
            E[k, m] = eps
            fd = (metric.evaluate(T + E) - metric.evaluate(T - E)) / (2 * eps)
            _close(P[..., k, m], fd, 1e-6)
            fd2 = (metric.first(T + E) - metric.first(T - E)) / (2 * eps)
            _close(H[..., k, m], fd2, 1e-5)


def test_ideal_targets_reproduce_uniform_mesh(square_mesh):
    targets = build_targets(square_mesh)
    A = element_jacobians(square_mesh, lobatto_basis(2, 4))
    np.testing.assert_allclose(A @ targets.Winv, np.broadcast_to(np.eye(2), A.shape), atol=1e-13)


def test_size_adapted_targets_scale_with_cube_root(cube_mesh):
    ones = build_targets(cube_mesh, TargetMode.SIZE_ADAPTED, AdaptivityField(np.ones(cube_mesh.nnodes)))
    eights = build_targets(cube_mesh, "size-adapted", AdaptivityField(np.full(cube_mesh.nnodes, 8.0)))
    np.testing.assert_allclose(eights.W, 2.0 * ones.W, rtol=1e-12)


def test_size_adapted_targets_reject_bad_fields(square_mesh):
    with pytest.raises(ConfigError):
        build_targets(square_mesh, TargetMode.SIZE_ADAPTED)
    with pytest.raises(ConfigError):
        build_targets(square_mesh, TargetMode.SIZE_ADAPTED, AdaptivityField(np.zeros(square_mesh.nnodes)))


@pytest.fixture
def ideal_objective(square_mesh):
    return make_objective(square_mesh, build_targets(square_mesh))


def test_objective_vanishes_on_ideal_mesh(ideal_objective):
    x0 = ideal_objective.x0
    assert objective(ideal_objective, x0) == pytest.approx(0.0, abs=1e-13)
    assert ideal_objective.limiting_term(x0) == 0.0
    assert np.abs(gradient(ideal_objective, x0)).max() <= 1e-12


def test_objective_is_positive_off_ideal(ideal_objective, wavy_mesh):
    x = wavy_mesh.x.reshape(-1)
    assert objective(ideal_objective, x) > 0
    assert ideal_objective.gamma > 0


def test_inverted_mesh_gives_infinite_objective(ideal_objective, square_mesh):
    x = square_mesh.x.copy()
    x[0] *= -1.0
    assert objective(ideal_objective, x.reshape(-1)) == np.inf


def test_shape_term_is_translation_invariant(ideal_objective, wavy_mesh):
    x = wavy_mesh.x
    shifted = (x + np.array([[0.37], [-1.2]])).reshape(-1)
    assert ideal_objective.shape_term(shifted) == pytest.approx(
        ideal_objective.shape_term(x.reshape(-1)), rel=1e-12
    )


def test_limiting_weight_balances_terms(ideal_objective):
    perturbed = perturb_interior(ideal_objective.mesh0, 0.1, seed=0).x.reshape(-1)
    gamma = limiting_weight(ideal_objective)
    ratio = ideal_objective.shape_term(perturbed) / (gamma * ideal_objective.limiting_term(perturbed))
    assert 0.1 <= ratio <= 10.0
    assert ratio == pytest.approx(1.0, rel=1e-12)


def test_gradient_matches_finite_differences(ideal_objective, wavy_mesh, rng):
    x = wavy_mesh.x.reshape(-1)
    g = gradient(ideal_objective, x)
    eps = 1e-6
    for i in rng.choice(x.size, size=12, replace=False):
        dx = np.zeros_like(x)
        dx[i] = eps
        fd = (objective(ideal_objective, x + dx) - objective(ideal_objective, x - dx)) / (2 * eps)
        assert fd == pytest.approx(g[i], abs=1e-6 * np.abs(g).max() + 1e-9)


def test_limiting_only_gradient(square_mesh, wavy_mesh, rng):
    obj = make_objective(square_mesh, build_targets(square_mesh), metric=LimitingOnly(), gamma=2.5)
    x = wavy_mesh.x.reshape(-1)
    g = gradient(obj, x)
    eps = 1e-6
    for i in rng.choice(x.size, size=8, replace=False):
        dx = np.zeros_like(x)
        dx[i] = eps
        fd = (objective(obj, x + dx) - objective(obj, x - dx)) / (2 * eps)
        assert fd == pytest.approx(g[i], abs=1e-7 * np.abs(g).max() + 1e-10)
    # quadratic: gradient is the Hessian applied to the displacement
    _close(g, hessian_action(obj, x, x - obj.x0), 1e-12)


def test_hessian_action_matches_gradient_differences(ideal_objective, wavy_mesh, rng):
    x = wavy_mesh.x.reshape(-1)
    dx = rng.standard_normal(x.size)
    eps = 1e-6 / np.abs(dx).max()
    fd = (gradient(ideal_objective, x + eps * dx) - gradient(ideal_objective, x - eps * dx)) / (2 * eps)
    _close(hessian_action(ideal_objective, x, dx), fd, 1e-5)
    np.testing.assert_array_equal(hessian_action(ideal_objective, x, np.zeros_like(x)), 0.0)


def test_hessian_action_is_symmetric(ideal_objective, wavy_mesh, rng):
    x = wavy_mesh.x.reshape(-1)
    u, w = rng.standard_normal((2, x.size))
    Hu, Hw = hessian_action(ideal_objective, x, u), hessian_action(ideal_objective, x, w)
    scale = np.linalg.norm(Hu) * np.linalg.norm(w)
    assert w @ Hu == pytest.approx(u @ Hw, rel=1e-11, abs=1e-11 * scale)


def test_hessian_diagonal_matches_unit_vector_actions():
    mesh = cartesian_mesh(2, (1.0, 1.0), (2, 2), 2)
    obj = make_objective(mesh, build_targets(mesh))
    x = perturb_interior(mesh, 0.1, seed=5).x.reshape(-1)
    diag = hessian_diagonal(obj, x)
    columns = np.array([hessian_action(obj, x, e)[i] for i, e in enumerate(np.eye(x.size))])
    _close(diag, columns, 1e-9)
    assert np.all(diag > 0)


def test_newton_recovers_uniform_mesh(square_mesh):
    obj = make_objective(square_mesh, build_targets(square_mesh), gamma=1.0)
    start_mesh = perturb_interior(square_mesh, 0.3, seed=3)
    assert min_det_jacobian(start_mesh, obj.basis.quad) > 0
    start = start_mesh.x.reshape(-1)
    controls = TmopControls(newton_rel_tol=1e-12, max_newton=50)
    result = newton_solve(obj, start, controls)
    assert result.converged
    assert np.abs(result.x - obj.x0).max() <= 1e-8
    history = np.array(result.objective_history)
    assert np.all(np.diff(history) < 0)

    summary = summarize(obj, start, result)
    assert summary.f_after < summary.f_before
    assert summary.min_det_after > 0


def test_newton_keeps_boundary_fixed(square_mesh):
    obj = make_objective(square_mesh, build_targets(square_mesh))
    start = perturb_interior(square_mesh, 0.2, seed=2).x.reshape(-1)
    result = newton_solve(obj, start, TmopControls(max_newton=5))
    np.testing.assert_array_equal(result.x[obj.fixed], start[obj.fixed])
    assert min_det_jacobian(square_mesh.with_coords(result.x.reshape(2, -1)), gauss_legendre(4)) > 0


def test_newton_on_optimal_mesh_takes_no_steps(ideal_objective):
    result = newton_solve(ideal_objective, ideal_objective.x0)
    assert result.iterations == 0
    assert result.converged


def test_size_adapted_optimization_shrinks_small_target_region():
    mesh = cartesian_mesh(2, (1.0, 1.0), (6, 6), 1)
    xi = AdaptivityField(np.where(mesh.x[0] < 0.5, 2.0, 1.0))
    obj = make_objective(
        mesh,
        build_targets(mesh, TargetMode.SIZE_ADAPTED, xi),
        metric=ShapeSizeMetric(ShapeMetric2D()),
        gamma=0.0,
    )
    result = newton_solve(obj, obj.x0, TmopControls(max_newton=30))
    optimized = mesh.with_coords(result.x.reshape(2, -1))
    volumes = element_volumes(optimized)
    left = element_centroids(mesh)[:, 0] < 0.5
    assert volumes[left].mean() > 1.2 * volumes[~left].mean()


def test_advect_adaptivity_zero_displacement(square_mesh, rng):
    xi = AdaptivityField(rng.uniform(1.0, 2.0, square_mesh.nnodes))
    out = advect_adaptivity(xi, square_mesh, np.zeros(2 * square_mesh.nnodes))
    np.testing.assert_array_equal(out.values, xi.values)


def test_advect_adaptivity_constant_and_linear_fields(wavy_mesh):
    shift = np.repeat([0.05, -0.02], wavy_mesh.nnodes)
    constant = advect_adaptivity(AdaptivityField(np.full(wavy_mesh.nnodes, 3.0)), wavy_mesh, shift)
    np.testing.assert_allclose(constant.values, 3.0, atol=1e-12)

    # a linear field sampled at the moved nodes
    linear = 2.0 * wavy_mesh.x[0] + wavy_mesh.x[1]
    moved = advect_adaptivity(AdaptivityField(linear), wavy_mesh, shift)
    np.testing.assert_allclose(moved.values, linear + 2.0 * 0.05 - 0.02, atol=1e-9)


def test_advect_adaptivity_refuses_too_few_steps(square_mesh):
    shift = np.repeat([0.3, 0.0], square_mesh.nnodes)
    with pytest.raises(PseudoCflError):
        advect_adaptivity(AdaptivityField(np.ones(square_mesh.nnodes)), square_mesh, shift, n_pseudo_steps=1)


def test_advected_bump_converges_with_pseudo_steps(square_mesh):
    x, y = square_mesh.x
    bump = AdaptivityField(1.0 + np.exp(-20.0 * ((x - 0.5) ** 2 + (y - 0.5) ** 2)))
    shift = np.repeat([0.05, 0.03], square_mesh.nnodes)

    reference = advect_adaptivity(bump, square_mesh, shift, n_pseudo_steps=64).values
    errors = [
        np.linalg.norm(advect_adaptivity(bump, square_mesh, shift, n_pseudo_steps=steps).values - reference)
        for steps in (2, 4, 8)
    ]
    assert errors[0] > errors[1] > errors[2]
    assert errors[2] < 0.5 * errors[0]
