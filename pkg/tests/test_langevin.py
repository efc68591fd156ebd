from dataclasses import replace

import numpy as np
import pytest
import scipy.linalg as sla
from hypothesis import given, settings
from hypothesis import strategies as st

from wcl_lab.davies import build_lindblad, compute_upsilon, evolve_semigroup
from wcl_lab.fock_sim import FullFockSimulator, reduced_dynamics
from wcl_lab.langevin import (ThetaMap, TimeBinLattice, annihilator_gap, annihilator_limit,
                              build_dilation, collision_map, dilation_contraction,
                              dilation_markov, extended_wcl_matrix_element, free_dynamics_limit,
                              rhs_matrix_element, scaling_isometry, theta_apply,
                              theta_one_particle_gap, vacuum_derivatives, zren_conservation,
                              zren_for)
from wcl_lab.modelfile import load_model
from wcl_lab.system_model import aligned_reservoir, decompose_coupling, discretize_reservoir

from conftest import SZ


def gaussian(center=0.0, width=1.0):
    return lambda u: np.exp(-((u - center) / width) ** 2 / 2) / (np.pi * width**2) ** 0.25


@pytest.fixture(scope="module")
def dd(two_level_davies):
    return two_level_davies


@pytest.fixture(scope="module")
def decoupled(dd):
    """Davies data with nu = 0 and a Hermitian Upsilon."""
    return replace(dd, upsilon=dd.re_upsilon, nu=np.zeros_like(dd.nu), nu_blocks={},
                   dissipativity_residual=0.0)


# --- lattice and bin unitary --------------------------------------------------

def test_lattice_rejects_misaligned_horizon():
    with pytest.raises(ValueError, match="multiple"):
        TimeBinLattice(0.3, 1.0, 1)
    lat = TimeBinLattice(0.25, 1.0, 1)
    assert lat.bins == 4 and lat.steps(0.5) == 2
    with pytest.raises(ValueError, match="exceeds"):
        lat.steps(1.25)


@pytest.mark.parametrize("dt", [1e-2, 1e-3])
def test_bin_unitary(dd, dt):
    assert build_dilation(dd, dt, 10 * dt).unitarity_defect() <= 1e-12


def test_dt_too_large_rejected(dd):
    with pytest.raises(ValueError, match="lower dt"):
        build_dilation(dd, 0.5, 1.0)


def test_decoupled_bins(decoupled):
    dp = build_dilation(decoupled, 1e-2, 1.0)
    B = dp.bin_dim
    assert np.allclose(dp.per_bin_unitary,
                       np.kron(sla.expm(-1j * 1e-2 * decoupled.re_upsilon), np.eye(B)),
                       atol=1e-14)
    assert np.allclose(dilation_contraction(dp, 1.0), sla.expm(-1j * decoupled.re_upsilon),
                       atol=1e-12)
    S = np.array([[0.2, 1j], [0.5, -1.0]])
    U = sla.expm(-1j * 0.5 * decoupled.re_upsilon)
    assert np.allclose(dilation_markov(dp, 0.5, S), U @ S @ U.conj().T, atol=1e-12)


def test_one_bin_taylor(dd):
    # I* M I = 1 - i dt Y + O(dt^2): the remainder shrinks fourfold per halving
    rem = []
    for dt in (4e-3, 2e-3, 1e-3):
        M00 = build_dilation(dd, dt, dt).block(0, 0)
        rem.append(np.linalg.norm(M00 - np.eye(2) + 1j * dt * dd.upsilon, 2))
    assert 3.6 < rem[0] / rem[1] < 4.4 and 3.6 < rem[1] / rem[2] < 4.4


def test_contraction_t_zero_and_negative(dd):
    dp = build_dilation(dd, 1e-2, 1.0)
    assert np.array_equal(dilation_contraction(dp, 0.0), np.eye(2))
    assert np.allclose(dilation_contraction(dp, -0.5),
                       dilation_contraction(dp, 0.5).conj().T)


def test_contraction_first_order(dd):
    errs = []
    for dt in (2e-3, 1e-3):
        dp = build_dilation(dd, dt, 1.0)
        errs.append(np.linalg.norm(dilation_contraction(dp, 1.0) -
                                   sla.expm(-1j * dd.upsilon), 2))
    assert errs[1] <= 5e-3
    assert 1.7 <= errs[0] / errs[1] <= 2.3


def test_markov_matches_semigroup(dd):
    dp = build_dilation(dd, 1e-3, 1.0)
    L = build_lindblad(dd)
    assert np.linalg.norm(dilation_markov(dp, 1.0, SZ) - evolve_semigroup(L, 1.0, SZ), 2) <= 5e-3
    assert np.array_equal(dilation_markov(dp, 0.0, SZ), SZ)


@settings(max_examples=20, deadline=None)
@given(st.floats(1e-5, 1e-2))
def test_collision_map_exactly_unital(dt):
    dd = compute_upsilon(load_model("two_level").model, warn=False)
    dp = build_dilation(dd, dt, dt)
    assert np.abs(collision_map(dp, np.eye(2)) - np.eye(2)).max() <= 1e-12


def test_left_right_derivatives(dd):
    dp = build_dilation(dd, 1e-4, 1e-4)
    right, left = vacuum_derivatives(dp)
    assert np.linalg.norm(right + 1j * dd.upsilon, 2) <= 1e-3
    assert np.linalg.norm(left + 1j * dd.upsilon.conj().T, 2) <= 1e-3
    # the asymmetry is the nu* nu term: -iY - (-iY*) = -nu* nu
    assert np.linalg.norm((right - left) + dd.nu_dag_nu, 2) <= 2e-3


# --- Z_ren ------------------------------------------------------------------------

def _one_quantum(dp, n):
    v = np.zeros(dp.bin_dim, dtype=complex)
    v[dp.bin_basis.one_particle(n)] = 1.0
    return v


def test_zren_vacuum(dd, two_level):
    dp = build_dilation(dd, 1e-2, 1.0)
    zr = zren_for(two_level.system.hamiltonian, dd)
    assert zren_conservation(dp, zr, 1.0, [(np.array([1, 0]), {})]) <= 1e-14


def test_zren_decoupled(decoupled, two_level):
    dp = build_dilation(decoupled, 1e-2, 1.0)
    zr = zren_for(two_level.system.hamiltonian, decoupled)
    phi = np.array([0.6, 0.8])
    assert zren_conservation(dp, zr, 1.0, [(phi, {3: _one_quantum(dp, 2)})]) <= 1e-12


def test_zren_one_quantum(dd, two_level):
    dp = build_dilation(dd, 1e-3, 1.0)
    zr = zren_for(two_level.system.hamiltonian, dd)
    states = [(np.array([0, 1.0]), {}),
              (np.array([1.0, 0]), {10: _one_quantum(dp, 2)}),
              (np.array([1, 1j]) / np.sqrt(2), {0: _one_quantum(dp, 0), 500: _one_quantum(dp, 1)})]
    assert zren_conservation(dp, zr, 1.0, states) <= 1e-10


# --- scaling isometry ----------------------------------------------------------------

@pytest.fixture(scope="module")
def iso(two_level, dd):
    disc = aligned_reservoir(two_level, 0.5, 0.25)
    return scaling_isometry(two_level, disc, 0.5, 0.25, list(dd.noise_layout))


def test_isometry_identities(iso):
    J = iso.matrix()
    g = iso.grid.sample(gaussian(0.0, 0.5), 2)
    # g lives well inside lam^-2 (I_1 - 1) = (-2, 2)
    assert np.linalg.norm(iso.apply(g)) == pytest.approx(np.linalg.norm(g), rel=1e-6)
    assert np.allclose(J @ J.T, np.diag(iso.range_indicator()))
    P = J.T @ J
    assert np.allclose(P @ P, P)
    rng = np.random.default_rng(0)
    f = rng.normal(size=iso.disc.size)
    h = rng.normal(size=iso.grid.size)
    assert np.vdot(f, iso.apply(h)) == pytest.approx(np.vdot(iso.adjoint(f), h))


def test_misaligned_grid_rejected(two_level, dd):
    disc = discretize_reservoir(two_level, 24)
    with pytest.raises(ValueError, match="aligned"):
        scaling_isometry(two_level, disc, 0.5, 0.25, list(dd.noise_layout))


# --- free dynamics limit ---------------------------------------------------------------

def test_free_vacuum_element(iso):
    r = free_dynamics_limit(iso, 1.0, [()])
    assert r["rows"][0][3] == 1 and r["rows"][0][4] == 1


def test_free_t_zero_is_projection_loss(iso):
    g = iso.grid.sample(gaussian(1.5, 1.0), 2)
    g /= np.linalg.norm(g)
    r = free_dynamics_limit(iso, 0.0, [(g,)])
    kept = np.linalg.norm(iso.apply(g)) ** 2
    assert r["max_deviation"] == pytest.approx(1 - kept, abs=1e-14)


def test_free_deviation_decreasing(two_level, dd):
    devs = []
    for lam in (0.5, 0.25):
        disc = aligned_reservoir(two_level, lam, 0.25)
        iso_ = scaling_isometry(two_level, disc, lam, 0.25, list(dd.noise_layout))
        g = iso_.grid.sample(gaussian(0.5, 1.5), 2)
        devs.append(free_dynamics_limit(iso_, 1.0, [(g,)])["max_deviation"])
    assert devs[0] > devs[1]


# --- annihilator limit -----------------------------------------------------------------

@pytest.fixture(scope="module")
def terms(two_level):
    disc = discretize_reservoir(two_level, 24)
    return decompose_coupling(two_level, disc).terms


def test_annihilator_window_collapses_to_value(terms):
    term = next(t for t in terms if t.omega == 1.0)
    box = lambda u: (np.abs(u) <= 1.0) / np.sqrt(2.0)
    first, second = annihilator_limit(term, 0.0, 0.05, box)
    val = term.profile(np.array([1.0]))[0]
    assert second == pytest.approx(np.sqrt(2.0) * val, rel=1e-3)
    assert first == pytest.approx(second, rel=1e-3)


def test_annihilator_off_resonant(terms):
    term = next(t for t in terms if t.omega is None)
    with pytest.raises(ValueError, match="off-resonant"):
        annihilator_limit(term, 0.0, 0.5, gaussian())
    for w in (-1.0, 0.0, 1.0):
        first, second = annihilator_limit(term, 1.0, 0.125, gaussian(), omega=w)
        assert second == 0
        assert abs(first) < 1e-12


@pytest.mark.parametrize("t", [0.0, 1.0, 10.0])
def test_annihilator_gap_decreasing(terms, t):
    term = next(t_ for t_ in terms if t_.omega == 1.0)
    gaps = [annihilator_gap(term, t, lam, gaussian(0.5, 1.0)) for lam in (0.5, 0.25, 0.125)]
    assert gaps[0] > gaps[1] > gaps[2]


# --- extended limit pieces ---------------------------------------------------------------

def test_rhs_vacuum_is_contraction(dd, iso):
    dp = build_dilation(dd, 1e-2, 1.0)
    rhs = rhs_matrix_element(dp, iso.grid, 1.0, 0.0, [], [])
    assert np.allclose(rhs, dilation_contraction(dp, 1.0), atol=1e-14)


def test_rhs_equal_times_is_overlap(dd, iso):
    dp = build_dilation(dd, 1e-2, 1.0)
    g = iso.grid.sample(gaussian(0.0, 1.0), 2)
    h = iso.grid.sample(gaussian(0.3, 1.0), 2)
    rhs = rhs_matrix_element(dp, iso.grid, 0.5, 0.5, [g], [h])
    assert np.allclose(rhs, np.vdot(h, g) * np.eye(2), atol=1e-14)


def test_vacuum_sector_reduces_to_davies_comparison(two_level, dd):
    lam = 0.5
    disc = aligned_reservoir(two_level, lam, 0.5, tail_modes=4)
    iso_ = scaling_isometry(two_level, disc, lam, 0.5, list(dd.noise_layout))
    sim = FullFockSimulator(two_level.system, disc, lam, 1)
    dp = build_dilation(dd, 1e-2, 0.5)
    r = extended_wcl_matrix_element(sim, iso_, dp, 0.5, 0.0, [], [])
    assert np.allclose(r.lhs, reduced_dynamics(two_level.system, disc, lam, 0.5, sim=sim),
                       atol=1e-12)
    assert np.allclose(r.rhs, dilation_contraction(dp, 0.5), atol=1e-14)
    assert r.baseline == pytest.approx(0.0, abs=1e-14)


def test_rhs_particle_limit(dd, iso):
    dp = build_dilation(dd, 1e-2, 1.0)
    g = iso.grid.sample(gaussian(), 2)
    with pytest.raises(ValueError, match="two particles"):
        rhs_matrix_element(dp, iso.grid, 1.0, 0.0, [g, g, g], [])


# --- Theta ----------------------------------------------------------------------------------

def test_theta_zero_is_vacuum_projector(dd):
    dp = build_dilation(dd, 1e-2, 1e-2)
    S = np.array([[1, 2], [3, 4]], dtype=complex)
    out = theta_apply(ThetaMap(S, lambda x: np.zeros(np.shape(x))), dp)
    vac = np.zeros(dp.bin_dim)
    vac[0] = 1
    assert np.allclose(out, np.kron(S, np.diag(vac)))


def test_theta_scalar_powers(dd):
    dp = build_dilation(dd, 1e-2, 1e-2, cutoff=2)
    c = 0.6
    out = theta_apply(ThetaMap(np.eye(2), lambda x: np.full(np.shape(x), c)), dp)
    n = dp.bin_basis.states.sum(axis=1)
    assert np.allclose(np.diag(out)[: dp.bin_dim], c ** n)


def test_theta_rejects_non_contraction(dd):
    dp = build_dilation(dd, 1e-2, 1e-2)
    with pytest.raises(ValueError, match="contraction"):
        theta_apply(ThetaMap(np.eye(2), lambda x: np.ones(np.shape(x))), dp)


@settings(max_examples=25, deadline=None)
@given(st.floats(-0.9, 0.9), st.floats(-0.9, 0.9), st.floats(-2, 2), st.floats(-2, 2))
def test_theta_multiplicative(a, b, p, q):
    dd_ = compute_upsilon(load_model("two_level").model, warn=False)
    dp = build_dilation(dd_, 1e-2, 1e-2, cutoff=2)
    f = ThetaMap(np.array([[1, p], [0, 1]], dtype=complex), lambda x: a * np.cos(np.asarray(x)))
    h = ThetaMap(np.array([[q, 0], [1j, 1]], dtype=complex), lambda x: b * np.sin(np.asarray(x) + 1))
    lhs = theta_apply(f.compose(h), dp)
    rhs = theta_apply(f, dp) @ theta_apply(h, dp)
    assert np.abs(lhs - rhs).max() <= 1e-10


def test_theta_one_particle_compression(two_level, dd):
    th = ThetaMap(np.eye(2), lambda y: 0.5 + 0.3 * np.tanh(np.asarray(y, dtype=float) - 1.0))
    gaps = []
    for lam in (0.5, 0.25):
        disc = aligned_reservoir(two_level, lam, 0.25)
        iso_ = scaling_isometry(two_level, disc, lam, 0.25, list(dd.noise_layout))
        g = iso_.grid.sample(gaussian(0.5, 1.0), 2)
        gaps.append(theta_one_particle_gap(iso_, th, g))
    assert gaps[0] > gaps[1]
