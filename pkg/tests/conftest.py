"""Shared fixtures: the expensive envelope/oracle runs are built once per session."""

import pytest

import lsmlab as L
from lsmlab.envelope import iterate_envelopes, unbranched_envelope
from lsmlab.oracle import psor_obstacle_solve, radial_value_oracle


@pytest.fixture(scope="session")
def spiked():
    return L.mollify(L.spiked_gain(0.05), 0.01)


@pytest.fixture(scope="session")
def radii():
    return L.radial_grid(2048)


@pytest.fixture(scope="session")
def spiked_run(spiked, radii):
    return unbranched_envelope(spiked, radii)


@pytest.fixture(scope="session")
def spiked_seq(spiked, spiked_run):
    seq = iterate_envelopes(spiked, spiked_run, max_iter=32)
    assert seq.converged
    return seq


@pytest.fixture(scope="session")
def spiked_oracle(spiked, radii):
    return radial_value_oracle(spiked, 2, radii)


@pytest.fixture(scope="session")
def annulus_gain():
    return L.radial_bump_gain(0.3, 0.15)


@pytest.fixture(scope="session")
def annulus_cart_seq(annulus_gain):
    run = unbranched_envelope(annulus_gain, 257)
    seq = iterate_envelopes(annulus_gain, run, max_iter=16)
    assert seq.converged
    return seq


@pytest.fixture(scope="session")
def annulus_psor(annulus_gain):
    return psor_obstacle_solve(annulus_gain, n=257, omega=1.9)


@pytest.fixture(scope="session")
def cap_gain():
    return L.offset_bump_gain((0.4, 0.0), 0.15)


@pytest.fixture(scope="session")
def cap_cart_seq(cap_gain):
    run = unbranched_envelope(cap_gain, 257)
    seq = iterate_envelopes(cap_gain, run, max_iter=16)
    assert seq.converged
    return seq


@pytest.fixture(scope="session")
def cap_psor(cap_gain):
    return psor_obstacle_solve(cap_gain, n=257, omega=1.9)
