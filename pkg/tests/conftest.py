import numpy as np
import pytest

from flowlab.fields import make_field_set
from flowlab.noise import make_path


@pytest.fixture(scope="session")
def demo_set():
    """The bundled demo configuration: 2-torus, three driving fields,
    divergence-free, amplitude tuned so dt = 1e-3 integration is accurate."""
    return make_field_set(2, 3, bandwidth=1, seed=42, divergence_free=True,
                          amplitude=0.14)


@pytest.fixture(scope="session")
def generic_set():
    """Unconstrained random set (nonzero divergence)."""
    return make_field_set(2, 2, bandwidth=2, seed=5, amplitude=0.3)


@pytest.fixture()
def short_path():
    return make_path(seed=11, stream_id=0, d=3, dt=1e-3, index_range=(0, 4096))


def assert_allclose(a, b, tol=1e-12):
    a, b = np.asarray(a), np.asarray(b)
    assert np.max(np.abs(a - b)) <= tol, f"max dev {np.max(np.abs(a - b))}"
