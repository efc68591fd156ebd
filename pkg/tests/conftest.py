import numpy as np
import pytest

from wcl_lab.davies import compute_upsilon
from wcl_lab.modelfile import load_model
from wcl_lab.system_model import (Channel, FormFactor, ReservoirModel, decompose_coupling,
                                  discretize_reservoir, flat_profile, spectral_decompose)

SX = np.array([[0, 1], [1, 0]], dtype=complex)
SZ = np.diag([1.0, -1.0]).astype(complex)


def flat_model(d_K, intervals, coupling, c=0.2, tails=()):
    """Reservoir with flat channels; intervals maps omega -> (a, b)."""
    sys = spectral_decompose(d_K)
    d = sys.dim
    ff = FormFactor((d, d), profile=flat_profile(c), coupling=coupling)
    chans = tuple(Channel(w, iv, 1, ff) for w, iv in sorted(intervals.items()))
    return ReservoirModel(sys, chans, tuple(tails))


@pytest.fixture(scope="session")
def two_level():
    return load_model("two_level").model


@pytest.fixture(scope="session")
def two_level_davies(two_level):
    return compute_upsilon(two_level, warn=False)


@pytest.fixture(scope="session")
def two_level_small(two_level):
    disc = discretize_reservoir(two_level, 4, "midpoint", 4)
    return disc, decompose_coupling(two_level, disc)


@pytest.fixture(scope="session")
def decay_model():
    return load_model("two_level_decay").model


@pytest.fixture(scope="session")
def friedrichs():
    return load_model("friedrichs").model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
