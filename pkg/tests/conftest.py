import numpy as np
import pytest

from protfit.corpus import random_coil
from protfit.io import Protein


def random_rotation(seed):
    """Proper rotation matrix from a QR decomposition."""
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def make_coil_protein(n_res, seed, name=None, plddt=None):
    rng = np.random.default_rng(seed)
    coords = random_coil(n_res, rng)
    return Protein(id=name or f"coil{seed}", sequence=rng.integers(0, 20, n_res),
                   ca_coords=coords, plddt=plddt)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def coil30():
    return make_coil_protein(30, seed=7)
