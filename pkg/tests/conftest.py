import numpy as np
import pytest

from jumpbsde.lattice import build_lattice

JUMP_CLAIM = "0.5*(jumps>=1)"


def lattice(**kw):
    base = dict(horizon=1.0, steps=2, sigma=0.2, phi=0.4, marks=[[1.0]], weights=[0.4], recombine=False)
    base.update(kw)
    return build_lattice(base)


@pytest.fixture
def two_step():
    """Two steps, one mark, jump probability 0.2 per step."""
    return lattice()


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)
