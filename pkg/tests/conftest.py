import os

import numpy as np
import pytest

from ale_minihydro.kernel_exec import ExecPlace
from ale_minihydro.memory_pool import MemoryManager
from ale_minihydro.mesh_fespace import HighOrderMesh, cartesian_mesh, perturb_interior


def pytest_collection_modifyitems(config, items):
    if os.environ.get("ALE_RUN_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="set ALE_RUN_SLOW=1 to run timing and refinement studies")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def memory() -> MemoryManager:
    return MemoryManager()


@pytest.fixture(params=["seq", "threads:4"])
def place(request) -> ExecPlace:
    return ExecPlace.parse(request.param)


@pytest.fixture
def square_mesh() -> HighOrderMesh:
    return cartesian_mesh(2, (1.0, 1.0), (3, 3), 2)


@pytest.fixture
def cube_mesh() -> HighOrderMesh:
    return cartesian_mesh(3, (1.0, 1.0, 1.0), (2, 2, 2), 2)


@pytest.fixture
def wavy_mesh(square_mesh) -> HighOrderMesh:
    """Curved interior with a valid Jacobian everywhere"""
    return perturb_interior(square_mesh, 0.08, seed=3)
