import numpy as np
import pytest

from retarget.mesh import Mesh


@pytest.fixture(scope="session")
def tetra() -> Mesh:
    verts = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    faces = np.array([[0, 1, 2], [0, 1, 3], [0, 2, 3], [1, 2, 3]])
    return Mesh(verts, faces, name="tetra")


@pytest.fixture(scope="session")
def parallel_rigs():
    from retarget.rig import make_parallel_rigs

    return make_parallel_rigs(0)


def random_mesh(rng: np.random.Generator, n_extra: int = 5) -> Mesh:
    """Small random mesh: a fan of triangles around a random point cloud."""
    n = 4 + int(rng.integers(0, n_extra + 1))
    verts = rng.normal(size=(n, 3))
    faces = [[0, 1, 2], [0, 1, 3], [0, 2, 3], [1, 2, 3]]
    for k in range(4, n):
        faces.append([k, k - 1, k - 2])
    return Mesh(verts, np.array(faces))
