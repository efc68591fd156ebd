
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from wcl_lab.davies import compute_upsilon
from wcl_lab.fock_sim import (BudgetError, FockBasis, FullFockSimulator, PropagationError,
                              build_hamiltonian, correlation_chain, dyson_wick_sum,
                              factorization_defect, friedrichs_reduced, interaction_propagator,
                              propagate, reduced_dynamics, resummation_check, semigroup_gap,
                              spectral_propagator)
from wcl_lab.system_model import (DiscretizedReservoir, decompose_coupling,
                                  discretize_reservoir)

from conftest import SZ


def _random_hermitian(rng, n):
    A = rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n))
    return (A + A.conj().T) / 2


# --- Fock basis and Hamiltonian ---------------------------------------------

@settings(max_examples=30, deadline=None)
@given(st.integers(0, 6), st.integers(0, 3))
def test_basis_size_and_index(N, n_max):
    b = FockBasis(N, n_max)
    assert len(b) == FockBasis.expected_size(N, n_max)
    assert all(b.index(s) == i for i, s in enumerate(b.states))
    assert b.states.sum(axis=1).max(initial=0) <= n_max


def test_creation_matrix_elements():
    b = FockBasis(2, 3)
    a0 = b.creation(0).toarray()
    src, dst = b.index((1, 1)), b.index((2, 1))
    assert a0[dst, src] == pytest.approx(np.sqrt(2))
    # truncation: nothing leaves the n_max shell
    assert not a0[:, b.index((2, 1))].any()


def test_lambda_zero_is_free(two_level_small):
    disc, _ = two_level_small
    op = build_hamiltonian(disc.model.system, disc, FockBasis(disc.size, 2), 0.0)
    assert np.array_equal(op.dense(), op.h0)


def test_single_mode_block(friedrichs):
    c, x1, w = 0.2, 0.7, 0.3
    disc = DiscretizedReservoir(np.array([x1]), np.array([w]), np.array([0.0]),
                                np.array([0]), np.array([0]),
                                np.array([[[c * np.sqrt(w)]]], dtype=complex), w, friedrichs)
    lam = 0.4
    H = build_hamiltonian(friedrichs.system, disc, FockBasis(1, 1), lam).dense()
    oracle = np.array([[0, lam * c * np.sqrt(w)], [lam * c * np.sqrt(w), x1]])
    assert np.allclose(H, oracle, atol=1e-15)


def _brute_force_H(K, x, V, lam, n_max):
    """Dense H from explicit occupation-vector transitions."""
    N, d = len(x), K.shape[0]
    occs = [(a, b) for tot in range(n_max + 1) for a in range(tot + 1) for b in [tot - a]]
    where = {o: i for i, o in enumerate(occs)}
    F = len(occs)
    H = np.zeros((d * F, d * F), dtype=complex)
    for f, o in enumerate(occs):
        for a in range(d):
            for b in range(d):
                H[a * F + f, b * F + f] += K[a, b]
            H[a * F + f, a * F + f] += o[0] * x[0] + o[1] * x[1]
        for i in range(N):
            up = list(o)
            up[i] += 1
            if sum(up) > n_max:
                continue
            g = where[tuple(up)]
            amp = lam * np.sqrt(up[i])
            for a in range(d):
                for b in range(d):
                    H[a * F + g, b * F + f] += amp * V[i][a, b]
                    H[b * F + f, a * F + g] += amp * np.conj(V[i][a, b])
    return H, occs


def test_two_mode_against_brute_force(two_level, rng):
    K = two_level.system.hamiltonian
    x = np.array([0.8, 1.3])
    V = [rng.normal(size=(2, 2)) + 1j * rng.normal(size=(2, 2)) for _ in range(2)]
    disc = DiscretizedReservoir(x, np.full(2, 0.5), np.ones(2), np.zeros(2, int),
                                np.zeros(2, int), np.array(V), 0.5, two_level)
    basis = FockBasis(2, 2)
    H = build_hamiltonian(two_level.system, disc, basis, 0.3).dense()
    Hb, occs = _brute_force_H(K, x, V, 0.3, 2)
    # permutation from brute-force ordering to the library's Fock ordering
    F = len(basis)
    perm = np.array([a * F + basis.index(o) for a in range(2) for o in occs])
    for _ in range(10):
        psi = rng.normal(size=2 * F) + 1j * rng.normal(size=2 * F)
        lib = np.vdot(psi[perm], H @ psi[perm])
        ref = np.vdot(psi, Hb @ psi)
        assert lib == pytest.approx(ref, rel=1e-12)


def test_n_max_zero_warns(two_level_small):
    disc, _ = two_level_small
    with pytest.warns(RuntimeWarning, match="n_max = 0"):
        build_hamiltonian(disc.model.system, disc, FockBasis(disc.size, 0), 0.5)


def test_dense_sparse_same_matrix(two_level_small):
    disc, _ = two_level_small
    b = FockBasis(disc.size, 2)
    a = build_hamiltonian(disc.model.system, disc, b, 0.5, dense=True)
    s = build_hamiltonian(disc.model.system, disc, b, 0.5, dense=False)
    assert not s.is_dense and a.is_dense
    assert np.allclose(a.dense(), s.dense(), atol=0)


# --- propagation ---------------------------------------------------------------

def test_propagate_t_zero(rng):
    psi = rng.normal(size=5) + 0j
    assert np.array_equal(propagate(np.eye(5), 0.0, psi), psi)


def test_propagate_diagonal_phases():
    E = np.array([0.3, -1.2, 2.0])
    psi = np.array([1, 1j, 0.5]) / np.sqrt(2.25)
    out = propagate(np.diag(E), 1.7, psi)
    assert np.allclose(out, np.exp(-1.7j * E) * psi, atol=1e-12)


def test_propagate_matches_eigendecomposition(rng):
    H = _random_hermitian(rng, 50)
    psi = rng.normal(size=50) + 1j * rng.normal(size=50)
    psi /= np.linalg.norm(psi)
    assert np.allclose(propagate(H, 1.0, psi), spectral_propagator(H, 1.0) @ psi, atol=1e-9)


def test_norm_drift_raises():
    H = np.diag([0.0, -1j])        # not Hermitian: loses norm
    with pytest.raises(PropagationError):
        propagate(H, 1.0, np.array([0, 1.0 + 0j]))


@settings(max_examples=15, deadline=None)
@given(st.floats(0.05, 0.8), st.floats(-8, 8))
def test_unitarity(lam, t):
    from wcl_lab.modelfile import load_model
    m = load_model("two_level").model
    disc = discretize_reservoir(m, 2, "midpoint", 2)
    op = build_hamiltonian(m.system, disc, FockBasis(disc.size, 2), lam)
    psi = np.zeros(op.dimension, dtype=complex)
    psi[[0, 7]] = [0.6, 0.8j]
    assert abs(np.linalg.norm(propagate(op, t, psi)) - 1) <= 1e-9


@settings(max_examples=15, deadline=None)
@given(st.lists(st.floats(-15, 15), min_size=3, max_size=3))
def test_interaction_cocycle(times):
    from wcl_lab.modelfile import load_model
    m = load_model("two_level").model
    disc = discretize_reservoir(m, 2, "midpoint", 2)
    op = build_hamiltonian(m.system, disc, FockBasis(disc.size, 2), 0.4)
    t, s, r = times
    lhs = interaction_propagator(op, t, s) @ interaction_propagator(op, s, r)
    assert np.abs(lhs - interaction_propagator(op, t, r)).max() <= 1e-9


# --- reduced dynamics -------------------------------------------------------------

def test_reduced_lambda_zero_identity(two_level_small):
    disc, _ = two_level_small
    R = reduced_dynamics(disc.model.system, disc, 0.0, 3.0)
    assert np.allclose(R, np.eye(2), atol=1e-12)


def test_reduced_equal_times_identity(two_level_small):
    disc, _ = two_level_small
    assert np.array_equal(reduced_dynamics(disc.model.system, disc, 0.5, 0.7, 0.7), np.eye(2))


def test_one_excitation_truncation_equals_friedrichs(two_level_small):
    disc, _ = two_level_small
    s = disc.model.system
    R = reduced_dynamics(s, disc, 0.5, 0.5, n_max=1)
    G = friedrichs_reduced(s, disc, 0.5, 0.5)
    assert np.linalg.norm(R - G, 2) <= 1e-12


def test_full_vs_friedrichs_within_truncation_estimate(two_level_small):
    disc, _ = two_level_small
    s = disc.model.system
    lam, t = 0.3, 1.0
    R = reduced_dynamics(s, disc, lam, t)
    G = friedrichs_reduced(s, disc, lam, t)
    # every Wick term of order >= 2 is bounded by y^n/n!, y = (lam s ||V||)^2 / 2
    Vnorm = np.sqrt(sum(np.linalg.norm(v, 2) ** 2 for v in disc.coupling))
    y = (lam * (t / lam**2) * Vnorm) ** 2 / 2
    estimate = np.exp(y) - 1 - y
    assert np.linalg.norm(R - G, 2) <= estimate
    # frozen measured difference: two-excitation paths are a small effect here
    assert np.linalg.norm(R - G, 2) == pytest.approx(6.178e-4, rel=1e-3)


def test_budget_and_recurrence_guards(two_level_small):
    disc, _ = two_level_small
    s = disc.model.system
    with pytest.raises(BudgetError, match="friedrichs_reduced"):
        reduced_dynamics(s, disc, 0.1, 5.0, max_horizon=100)
    with pytest.raises(ValueError, match="recurrence"):
        reduced_dynamics(s, disc, 0.1, 0.2, max_horizon=None)


# --- Friedrichs sector ---------------------------------------------------------------

def test_friedrichs_lambda_zero_identity(two_level_small):
    disc, _ = two_level_small
    assert np.array_equal(friedrichs_reduced(disc.model.system, disc, 0.0, 1.0), np.eye(2))


def test_scalar_survival_amplitude_approaches_davies(friedrichs):
    dd = compute_upsilon(friedrichs)
    # flat symmetric coupling: pure decay at rate pi c^2, no shift
    assert dd.upsilon[0, 0] == pytest.approx(-1j * np.pi * 0.04, rel=1e-12)
    disc = discretize_reservoir(friedrichs, 48)
    ts = np.array([0.5, 1.0, 2.0])
    sups = []
    for lam in (0.5, 0.35, 0.25):
        G = friedrichs_reduced(friedrichs.system, disc, lam, ts)
        sups.append(semigroup_gap(G, dd.upsilon, ts).max())
    assert sups[0] > sups[1] > sups[2]
    assert sups[2] < 6e-3


# --- Dyson / Wick --------------------------------------------------------------------

def test_dyson_order_zero_identity(two_level_small):
    disc, dec = two_level_small
    r = dyson_wick_sum(disc.model.system, dec, 0.5, 0.5, max_order=0)
    assert np.array_equal(r.partial_sum, np.eye(2))


def test_dyson_zero_coupling_identity():
    from wcl_lab.modelfile import load_model
    m = load_model("zero_coupling").model
    disc = discretize_reservoir(m, 4)
    dec = decompose_coupling(m, disc)
    r = dyson_wick_sum(m.system, dec, 0.5, 0.5, max_order=2)
    assert np.array_equal(r.partial_sum, np.eye(2))


def test_dyson_first_order_against_quadrature(friedrichs):
    disc = discretize_reservoir(friedrichs, 8)
    dec = decompose_coupling(friedrichs, disc)
    lam, t = 0.5, 0.5
    S = t / lam**2
    r = dyson_wick_sum(friedrichs.system, dec, lam, t, max_order=1)
    # oracle: C_1 = -lam^2 sum_i |V_i|^2 int_0^S (S - u) e^{-i x_i u} du
    oracle = 0.0
    for xi, vi in zip(disc.x, disc.coupling[:, 0, 0]):
        re = quad(lambda u: (S - u) * np.cos(xi * u), 0, S, epsabs=1e-13)[0]
        im = quad(lambda u: -(S - u) * np.sin(xi * u), 0, S, epsabs=1e-13)[0]
        oracle += abs(vi) ** 2 * (re + 1j * im)
    assert r.terms[1][0, 0] == pytest.approx(-lam**2 * oracle, abs=1e-10)


def test_dyson_resolution_failure(two_level_small):
    disc, dec = two_level_small
    with pytest.raises(ValueError, match="phase resolution"):
        dyson_wick_sum(disc.model.system, dec, 0.5, 0.5, max_order=2, points_per_axis=2)


def test_dyson_wick_bound_small(two_level_small):
    disc, dec = two_level_small
    r = dyson_wick_sum(disc.model.system, dec, 0.5, 0.25, max_order=2)
    assert np.all(r.norms <= r.bounds * (1 + 1e-12))
    x = dec.d_norm**2 * 0.25 * r.h_l1 / 2
    assert r.bounds[2] == pytest.approx(x**2 / 2, rel=1e-12)


# --- correlations ----------------------------------------------------------------------

def test_chain_with_identities_is_reduced(two_level_small):
    disc, _ = two_level_small
    s = disc.model.system
    sim = FullFockSimulator(s, disc, 0.5)
    C = correlation_chain(s, disc, 0.5, [np.eye(2)], [0.0, 0.2, 0.5], sim=sim)
    R = reduced_dynamics(s, disc, 0.5, 0.5, sim=sim)
    assert np.allclose(C, R, atol=1e-12)


def test_chain_equal_times(two_level_small):
    disc, _ = two_level_small
    S = np.array([[0.3, 1j], [2, -1]])
    C = correlation_chain(disc.model.system, disc, 0.5, [S], [0.4, 0.4, 0.4])
    assert np.allclose(C, S, atol=1e-12)


def test_chain_rejects_unordered_times(two_level_small):
    disc, _ = two_level_small
    with pytest.raises(ValueError, match="ordered"):
        correlation_chain(disc.model.system, disc, 0.5, [SZ], [0.0, 0.5, 0.2])


def test_factorization_defect_decreases(two_level_small):
    disc, _ = two_level_small
    vals = [factorization_defect(disc.model.system, disc, lam, SZ, 0.0, 0.25, 0.5)
            for lam in (0.5, 0.35, 0.25)]
    assert vals[0] > vals[1] > vals[2]


# --- resummation ----------------------------------------------------------------------------

@pytest.fixture(scope="module")
def decay_small():
    from wcl_lab.modelfile import load_model
    m = load_model("two_level_decay").model
    disc = discretize_reservoir(m, 3)
    return m, decompose_coupling(m, disc)


def test_resummation_lambda_zero(decay_small):
    m, dec = decay_small
    r = resummation_check(m.system, dec, 0.0, 0.3, max_m=2)
    assert r.residual <= 1e-14


def test_resummation_vacuum_m0(decay_small):
    m, dec = decay_small
    r = resummation_check(m.system, dec, 0.5, 0.025, max_m=0, states=[(None, None)])
    assert r.residual <= 1e-14
    R = reduced_dynamics(m.system, dec.disc, 0.5, 0.025)
    assert np.allclose(r.lhs[0], R, atol=1e-12)


def test_resummation_one_particle_m2(decay_small):
    m, dec = decay_small
    lam = 0.5
    t = 0.1 * lam        # lam * tau = 0.1 with tau = t / lam^2
    r = resummation_check(m.system, dec, lam, t, max_m=2)
    assert r.residual <= r.tail_bound
    assert r.labels == (("vac", "vac"), ("1p", "vac"), ("vac", "1p"), ("1p", "1p"))


def test_resummation_limits(two_level):
    disc = discretize_reservoir(two_level, 4)
    with pytest.raises(ValueError, match="N <= 3"):
        resummation_check(two_level.system, decompose_coupling(two_level, disc), 0.5, 0.1)
