"""
Problem presets
"""

from collections.abc import Callable
from dataclasses import dataclass

import numpy as np

from ale_minihydro.exceptions import DimensionMismatchError, UnknownPresetError
from ale_minihydro.lagrange_hydro import HydroState
from ale_minihydro.mesh_fespace import (
    HighOrderMesh,
    cartesian_mesh,
    compute_geometric_factors,
    element_centroids,
    nodal_coordinates,
    point_coordinates,
)
from ale_minihydro.parameters import ALL_PRESETS, PresetName
from ale_minihydro.tensor_basis import lobatto_basis

# point fields take coordinates shaped (..., d)
PointField = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class Preset:
    """Initial data on an axis-aligned box"""

    name: PresetName
    description: str
    dim: int
    extents: tuple[float, ...]
    elements: tuple[int, ...]
    gamma: float
    density: PointField
    pressure: PointField
    velocity: PointField | None = None
    # piecewise-constant data is sampled at element centroids
    piecewise: bool = False


@dataclass
class PresetState:
    preset: Preset
    mesh: HighOrderMesh
    state: HydroState


def _constant(value: float) -> PointField:
    return lambda x: np.full(x.shape[:-1], value)


def _sod_density(x: np.ndarray) -> np.ndarray:
    return np.where(x[..., 0] < 0.5, 1.0, 0.125)


def _sod_pressure(x: np.ndarray) -> np.ndarray:
    return np.where(x[..., 0] < 0.5, 1.0, 0.1)


def _triple_heavy(x: np.ndarray) -> np.ndarray:
    """Region right of x = 1 holding the dense low-pressure material"""
    below = x[..., 1] < 1.5
    if x.shape[-1] == 3:
        return below == (x[..., 2] < 1.5)
    return below


def _triple_density(x: np.ndarray) -> np.ndarray:
    return np.where(x[..., 0] < 1.0, 1.0, np.where(_triple_heavy(x), 1.0, 0.125))


def _triple_pressure(x: np.ndarray) -> np.ndarray:
    return np.where(x[..., 0] < 1.0, 1.0, 0.1)


def _taylor_green_velocity(x: np.ndarray) -> np.ndarray:
    px, py = np.pi * x[..., 0], np.pi * x[..., 1]
    return np.stack([np.sin(px) * np.cos(py), -np.cos(px) * np.sin(py)], axis=-1)


def _taylor_green_pressure(x: np.ndarray) -> np.ndarray:
    return 100.0 + 0.25 * (np.cos(2 * np.pi * x[..., 0]) + np.cos(2 * np.pi * x[..., 1]))


PRESETS: dict[PresetName, Preset] = {
    p.name: p
    for p in [
        Preset(
            name=PresetName.TRIPLE_PT_2D,
            description="Three-state shock interaction on [0,7]x[0,3] (classical triple-point data, single gamma)",
            dim=2,
            extents=(7.0, 3.0),
            elements=(14, 6),
            gamma=1.5,
            density=_triple_density,
            pressure=_triple_pressure,
            piecewise=True,
        ),
        Preset(
            name=PresetName.TRIPLE_PT_3D,
            description="Three-dimensional triple-point extrusion on [0,7]x[0,3]x[0,3]",
            dim=3,
            extents=(7.0, 3.0, 3.0),
            elements=(7, 3, 3),
            gamma=1.5,
            density=_triple_density,
            pressure=_triple_pressure,
            piecewise=True,
        ),
        Preset(
            name=PresetName.SOD_1DX,
            description="Sod shock tube along x, extruded in y",
            dim=2,
            extents=(1.0, 0.1),
            elements=(20, 2),
            gamma=1.4,
            density=_sod_density,
            pressure=_sod_pressure,
            piecewise=True,
        ),
        Preset(
            name=PresetName.TAYLOR_GREEN,
            description="Smooth Taylor-Green vortex on the unit square",
            dim=2,
            extents=(1.0, 1.0),
            elements=(8, 8),
            gamma=5.0 / 3.0,
            density=_constant(1.0),
            pressure=_taylor_green_pressure,
            velocity=_taylor_green_velocity,
        ),
        Preset(
            name=PresetName.UNIFORM,
            description="Gas at rest with constant density and pressure",
            dim=2,
            extents=(1.0, 1.0),
            elements=(4, 4),
            gamma=1.4,
            density=_constant(1.0),
            pressure=_constant(1.0),
        ),
    ]
}


def get_preset(name: str) -> Preset:
    try:
        return PRESETS[PresetName(name)]
    except ValueError as exc:
        raise UnknownPresetError(name, ALL_PRESETS) from exc


def _sample(preset: Preset, field: PointField, mesh: HighOrderMesh, points: np.ndarray) -> np.ndarray:
    if preset.piecewise:
        centroids = element_centroids(mesh)
        values = field(centroids)
        return np.broadcast_to(values.reshape((-1,) + (1,) * (points.ndim - 2)), points.shape[:-1])
    return field(points)


def problem_preset(
    name: str,
    order: int = 2,
    elements: tuple[int, ...] | None = None,
    thermo_order: int | None = None,
    q1d: int | None = None,
    mesh: HighOrderMesh | None = None,
) -> PresetState:
    """Mesh and initial hydro state of a named preset.

    A supplied ``mesh`` (for instance one read from a mesh file) replaces the
    preset box; its order overrides ``order``.
    """
    preset = get_preset(name)
    if mesh is None:
        counts = tuple(elements) if elements else preset.elements
        mesh = cartesian_mesh(preset.dim, preset.extents, counts, order)
    elif mesh.dim != preset.dim:
        raise DimensionMismatchError(f"mesh for preset {preset.name}", preset.dim, mesh.dim)
    order = mesh.order
    thermo_order = thermo_order or order
    basis = lobatto_basis(order, q1d or order + 2)

    geom = compute_geometric_factors(mesh, basis.quad)
    rho_q = _sample(preset, preset.density, mesh, point_coordinates(mesh, basis))
    qdata0 = np.ascontiguousarray(rho_q * geom.detJ)

    nodes = nodal_coordinates(mesh, thermo_order)
    rho_n = _sample(preset, preset.density, mesh, nodes)
    p_n = _sample(preset, preset.pressure, mesh, nodes)
    e = (p_n / ((preset.gamma - 1.0) * rho_n)).reshape(-1)

    if preset.velocity is None:
        v = np.zeros(mesh.dim * mesh.nnodes)
    else:
        v = np.moveaxis(preset.velocity(mesh.x.T), -1, 0).reshape(-1)
    state = HydroState(x=mesh.x.reshape(-1).copy(), v=v, e=e, qdata0=qdata0)
    return PresetState(preset=preset, mesh=mesh, state=state)
