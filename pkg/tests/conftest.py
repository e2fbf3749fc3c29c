import numpy as np
import pytest

from splatmesh.mesh import Mesh, icosphere
from splatmesh.synth import make_fd_scene


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def icosphere_mesh():
    v, f = icosphere(2)
    uvs = trivial_uvs(v, f)
    return Mesh(v, f, uvs, np.zeros(len(f), dtype=np.int64),
                {"all": list(range(len(f)))})


@pytest.fixture
def fd_scene():
    # seed 3: eyes loss active, no degenerate boundary points
    return make_fd_scene(seed=3)


def trivial_uvs(verts, faces):
    """Valid (not necessarily injective) per-corner UVs for test meshes."""
    uvs = np.zeros((len(faces), 3, 2))
    uvs[:, 1, 0] = 1.0
    uvs[:, 2, 1] = 1.0
    return uvs
