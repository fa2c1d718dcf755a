import numpy as np
import pytest

from segens.phantom import PhantomSpec, generate_phantom


@pytest.fixture(scope="session")
def tiny_phantoms():
    """Three small-grid phantom patients shared across fast tests."""
    spec = PhantomSpec(n_patients=3, slices_per_patient=6, grid=192, rng_seed=11)
    return spec, generate_phantom(spec)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
