"""Collision-model dilation of the Davies semigroup and extended-limit checks.

The asymptotic field lives on L^2(R, h) with h = sum_omega h_omega. In the
time representation ghat(s) = (2 pi)^{-1/2} int g(u) e^{-isu} du the
interaction-picture Langevin cocycle couples the system at time s to the
field at the single point s. Chopping [t0, t] into bins of width dt and
keeping one bosonic mode per bin and noise component (the bin average
1_bin / sqrt(dt)) turns the white-noise coupling (2 pi)^{-1/2} a*(|1> (x) nu)
into sqrt(dt) nu (x) b^dagger per bin, so

    M = exp(-i (dt Re Y (x) 1 + sqrt(dt) sum_n (nu_n (x) b_n^dagger + h.c.)))

and U is the ordered product of fresh-bin unitaries. The vacuum compression
of M is 1 - i dt Y + O(dt^2) with Y = Re Y - (i/2) nu^* nu, so no separate
(2 pi)^{-1/2} constant appears.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations, permutations

import numpy as np
import scipy.linalg as sla

from .davies import DaviesData
from .fock_sim import FockBasis, FullFockSimulator, _evolve, _guard
from .system_model import DiscretizedReservoir, ReservoirModel, dag

UNITARY_TOL = 1e-12


# ---------------------------------------------------------------------------
# bins and the per-bin unitary
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TimeBinLattice:
    dt: float
    horizon: float
    noise_dim: int
    per_bin_cutoff: int = 1

    def __post_init__(self):
        if self.dt <= 0 or self.horizon < 0:
            raise ValueError("dt must be positive and horizon non-negative")
        if self.per_bin_cutoff < 1:
            raise ValueError("per_bin_cutoff must be >= 1")
        n = self.horizon / self.dt
        if abs(n - round(n)) > 1e-9 * max(1.0, n):
            raise ValueError(f"horizon {self.horizon} is not a multiple of dt {self.dt}")

    @property
    def bins(self) -> int:
        return int(round(self.horizon / self.dt))

    def steps(self, t: float) -> int:
        n = abs(t) / self.dt
        if abs(n - round(n)) > 1e-9 * max(1.0, n):
            raise ValueError(f"t = {t} is not a multiple of dt = {self.dt}")
        if round(n) > self.bins:
            raise ValueError(f"|t| = {abs(t)} exceeds lattice horizon {self.horizon}")
        return int(round(n))


@dataclass
class DilationPropagator:
    davies: DaviesData
    lattice: TimeBinLattice
    per_bin_unitary: np.ndarray
    bin_basis: FockBasis = field(repr=False)

    @property
    def d(self) -> int:
        return self.davies.dim

    @property
    def bin_dim(self) -> int:
        return len(self.bin_basis)

    def block(self, o: int, i: int) -> np.ndarray:
        """<o| M |i> as a d x d matrix for bin basis states o, i."""
        B = self.bin_dim
        return self.per_bin_unitary.reshape(self.d, B, self.d, B)[:, o, :, i]

    def blocks(self) -> np.ndarray:
        """All blocks, shape (B, B, d, d)."""
        B = self.bin_dim
        return self.per_bin_unitary.reshape(self.d, B, self.d, B).transpose(1, 3, 0, 2)

    def unitarity_defect(self) -> float:
        M = self.per_bin_unitary
        return float(np.abs(M.conj().T @ M - np.eye(len(M))).max())

    def creation(self, n: int) -> np.ndarray:
        return self.bin_basis.creation(n).toarray()


def _bin_generator(dd: DaviesData, dt: float, basis: FockBasis) -> np.ndarray:
    d, B = dd.dim, len(basis)
    G = dt * np.kron(dd.re_upsilon, np.eye(B))
    for n, nu_n in enumerate(dd.nu_ops):
        bdag = basis.creation(n).toarray()
        X = np.kron(nu_n, bdag)
        G = G + np.sqrt(dt) * (X + dag(X))
    return G


def build_dilation(dd: DaviesData, dt: float, horizon: float,
                   cutoff: int = 1) -> DilationPropagator:
    nu_norm2 = float(np.linalg.norm(dd.nu_dag_nu, 2)) if dd.noise_dim else 0.0
    if dt * nu_norm2 > 0.1:
        raise ValueError(f"dt * ||nu||^2 = {dt * nu_norm2:.3g} > 0.1; lower dt")
    lattice = TimeBinLattice(dt, horizon, dd.noise_dim, cutoff)
    basis = FockBasis(dd.noise_dim, cutoff)
    G = _bin_generator(dd, dt, basis)
    G = 0.5 * (G + dag(G))
    E, W = np.linalg.eigh(G)
    M = (W * np.exp(-1j * E)) @ dag(W)
    dp = DilationPropagator(dd, lattice, M, basis)
    if dp.unitarity_defect() > UNITARY_TOL:
        raise RuntimeError(f"bin unitary off by {dp.unitarity_defect():.2e}")
    return dp


def dilation_contraction(dp: DilationPropagator, t: float) -> np.ndarray:
    """I* U_t I as the power of the vacuum block; U_{-t} = U_t^*."""
    n = dp.lattice.steps(t)
    out = np.linalg.matrix_power(dp.block(0, 0), n)
    return dag(out) if t < 0 else out


def collision_map(dp: DilationPropagator, S: np.ndarray) -> np.ndarray:
    """Phi(S) = <0_bin| M (S (x) 1) M^* |0_bin> = sum_o M_0o S M_0o^*."""
    blocks = dp.blocks()[0]          # (B, d, d): <0|M|o>
    return np.einsum("oab,bc,odc->ad", blocks, S, blocks.conj())


def dilation_markov(dp: DilationPropagator, t: float, S: np.ndarray) -> np.ndarray:
    """I* U_t (S (x) 1) U_t^* I = Phi^n(S), n = t / dt."""
    n = dp.lattice.steps(t)
    out = np.array(S, dtype=complex)
    for _ in range(n):
        out = collision_map(dp, out)
    return out


def vacuum_derivatives(dp: DilationPropagator) -> tuple:
    """One-bin right and left difference quotients of I* U_t I at t = 0.

    Right: (M_00 - 1)/dt -> -i Y. Left: (U_{-dt} - 1)/(-dt) = (1 - M_00^*)/dt
    -> -i Y^*.
    """
    dt = dp.lattice.dt
    M00 = dp.block(0, 0)
    one = np.eye(dp.d)
    return (M00 - one) / dt, (one - dag(M00)) / dt


# ---------------------------------------------------------------------------
# Z_ren
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RenormalizerZren:
    """Z_ren = K + dGamma(sum_omega omega 1_{R_omega}) on the bin lattice."""

    K: np.ndarray
    omegas: np.ndarray               # Bohr frequency per noise component

    def bin_operator(self, basis: FockBasis) -> np.ndarray:
        """Per-bin part: number-weighted frequencies on one bin."""
        return np.diag(basis.states @ self.omegas).astype(complex)

    def local(self, basis: FockBasis) -> np.ndarray:
        """K (x) 1 + 1 (x) bin part, the one-bin restriction."""
        B = len(basis)
        return np.kron(self.K, np.eye(B)) + np.kron(np.eye(len(self.K)),
                                                   self.bin_operator(basis))


def zren_for(sys_K: np.ndarray, dd: DaviesData) -> RenormalizerZren:
    return RenormalizerZren(np.asarray(sys_K, dtype=complex), np.asarray(dd.noise_omegas))


def zren_conservation(dp: DilationPropagator, zr: RenormalizerZren, t: float,
                      states: list) -> float:
    """max |<U_t psi| Z_ren U_t psi> - <psi| Z_ren psi>| over product test states.

    A test state is (phi, bins) with phi in K and bins a dict mapping bin
    index to a normalized bin Fock vector (other bins in vacuum). Bins meet
    the system once, in order, so the evolution is tracked as a system
    density matrix while each processed bin's Z_ren share is accumulated.
    """
    n = dp.lattice.steps(t)
    d, B = dp.d, dp.bin_dim
    M = dp.per_bin_unitary
    zb = np.real(np.diag(zr.bin_operator(dp.bin_basis)))
    vac = np.zeros(B, dtype=complex)
    vac[0] = 1.0
    worst = 0.0
    for phi, bins in states:
        phi = np.asarray(phi, dtype=complex)
        rho = np.outer(phi, phi.conj())
        before = float(np.real(np.trace(rho @ zr.K)))
        for v in bins.values():
            before += float(np.real(np.vdot(v, zb * v)))
        after = 0.0
        for k in range(n):
            v = bins.get(k, vac)
            R = np.kron(rho, np.outer(v, v.conj()))
            R = M @ R @ dag(M)
            R4 = R.reshape(d, B, d, B)
            after += float(np.real(np.einsum("aoao,o->", R4, zb)))
            rho = np.einsum("aobo->ab", R4)
        for k, v in bins.items():     # bins beyond t are untouched
            if k >= n:
                after += float(np.real(np.vdot(v, zb * v)))
        after += float(np.real(np.trace(rho @ zr.K)))
        worst = max(worst, abs(after - before))
    return worst


# ---------------------------------------------------------------------------
# scaling isometry on aligned grids
# ---------------------------------------------------------------------------

@dataclass
class AsymptoticGrid:
    """Nodes u_a = du (a + 1/2) per noise component (omega, mu)."""

    du: float
    layout: list                     # [(omega, mu)]
    index: list                      # per component: integer array a
    window: float

    @property
    def sizes(self) -> list:
        return [len(a) for a in self.index]

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.sizes)])

    @property
    def size(self) -> int:
        return int(sum(self.sizes))

    def nodes(self, n: int) -> np.ndarray:
        return self.du * (self.index[n] + 0.5)

    def sample(self, func, n: int) -> np.ndarray:
        """Grid vector sqrt(du) g(u_a) supported on component n."""
        out = np.zeros(self.size, dtype=complex)
        o = self.offsets
        out[o[n]:o[n + 1]] = np.sqrt(self.du) * func(self.nodes(n))
        return out

    def component(self, vec: np.ndarray, n: int) -> np.ndarray:
        o = self.offsets
        return vec[o[n]:o[n + 1]]


@dataclass
class ScalingIsometry:
    """(J g)(y) = lam^-1 g((y - omega)/lam^2) on I_omega, 0 outside.

    On aligned grids this is a 0/1 selection matrix between asymptotic nodes
    and physical channel modes (both vectors carry square-root weights).
    """

    lam: float
    grid: AsymptoticGrid
    disc: DiscretizedReservoir = field(repr=False)
    rows: np.ndarray = field(repr=False)      # physical mode index
    cols: np.ndarray = field(repr=False)      # asymptotic index

    def apply(self, g: np.ndarray) -> np.ndarray:
        out = np.zeros(self.disc.size, dtype=complex)
        out[self.rows] = g[self.cols]
        return out

    def adjoint(self, f: np.ndarray) -> np.ndarray:
        out = np.zeros(self.grid.size, dtype=complex)
        out[self.cols] = f[self.rows]
        return out

    def matrix(self) -> np.ndarray:
        J = np.zeros((self.disc.size, self.grid.size))
        J[self.rows, self.cols] = 1.0
        return J

    def range_indicator(self) -> np.ndarray:
        """Physical modes hit by J (channel modes): J J^* is this projection."""
        out = np.zeros(self.disc.size)
        out[self.rows] = 1.0
        return out


def scaling_isometry(model: ReservoirModel, disc: DiscretizedReservoir, lam: float,
                     du: float, layout: list, window: float = 8.0) -> ScalingIsometry:
    """Build J_lam for an aligned reservoir (see aligned_reservoir)."""
    h = lam**2 * du
    index, rows, cols = [], [], []
    off = 0
    for omega, mu in layout:
        sel = np.where((np.abs(disc.omega - omega) <= 1e-12) & (disc.mu == mu))[0]
        a_phys = np.rint((disc.x[sel] - omega) / h - 0.5).astype(int)
        if np.any(np.abs(omega + h * (a_phys + 0.5) - disc.x[sel]) > 1e-9 * max(1, h)):
            raise ValueError("reservoir grid is not aligned with lam^2 du")
        lo = int(np.floor(-window / du)) - 1
        a_all = np.arange(min(lo, a_phys.min(initial=lo)),
                          max(-lo, a_phys.max(initial=-lo)) + 1)
        index.append(a_all)
        pos = {a: k for k, a in enumerate(a_all)}
        for i, a in zip(sel, a_phys):
            rows.append(i)
            cols.append(off + pos[a])
        off += len(a_all)
    grid = AsymptoticGrid(du, list(layout), index, window)
    return ScalingIsometry(lam, grid, disc, np.array(rows, dtype=int),
                           np.array(cols, dtype=int))


def _permanent(A: np.ndarray) -> complex:
    n = A.shape[0]
    if n == 0:
        return 1.0
    return sum(np.prod([A[i, p[i]] for i in range(n)]) for p in permutations(range(n)))


def free_dynamics_limit(iso: ScalingIsometry, t: float, tests: list) -> dict:
    """Matrix elements of e^{i s Z_ren} Gamma(J^*) e^{-i s H0} Gamma(J) vs e^{-it dGamma(Z_R)}.

    s = lam^-2 t. tests are tuples of asymptotic grid vectors (0, 1 or 2
    particles, symmetric product states). The system factor cancels between
    K in H0 and in Z_ren. Returns the table and the max deviation.
    """
    lam, grid, disc = iso.lam, iso.grid, iso.disc
    s = t / lam**2
    omega_of = np.full(grid.size, np.nan)
    u = np.empty(grid.size)
    for n, (om, _) in enumerate(grid.layout):
        o = grid.offsets
        omega_of[o[n]:o[n + 1]] = om
        u[o[n]:o[n + 1]] = grid.nodes(n)
    phys_phase = np.exp(-1j * s * disc.x)

    def lhs1(g):
        f = iso.apply(g) * phys_phase
        return np.exp(1j * s * omega_of) * iso.adjoint(f)

    def rhs1(g):
        return np.exp(-1j * t * u) * g

    rows = []
    worst = 0.0
    for i, gin in enumerate(tests):
        for j, gout in enumerate(tests):
            if len(gin) != len(gout):
                continue
            A = np.array([[np.vdot(b, lhs1(a)) for a in gin] for b in gout]).reshape(len(gout), len(gin))
            B = np.array([[np.vdot(b, rhs1(a)) for a in gin] for b in gout]).reshape(len(gout), len(gin))
            lv, rv = complex(_permanent(A)), complex(_permanent(B))
            rows.append((i, j, len(gin), lv, rv, abs(lv - rv)))
            worst = max(worst, abs(lv - rv))
    return {"rows": rows, "max_deviation": worst}


def annihilator_limit(term, t: float, lam: float, g, window: float = 12.0,
                      npts: int = 20001, mu: int = 0, omega: float | None = None) -> tuple:
    """(<g, lam^-1 J^* e^{i s (H_R - omega)} phi_j>, <g, e^{itZ_R}|1> phi_j(omega)>).

    Both are quadratures on a fine asymptotic grid:
        first  = int conj(g(u)) e^{itu} phi_j(omega + lam^2 u) 1_I du
        second = int conj(g(u)) e^{itu} du * phi_j(omega)
    omega defaults to the term's own Bohr frequency; an off-resonant term
    needs it given explicitly.
    """
    omega = term.omega if omega is None else omega
    if omega is None:
        raise ValueError("off-resonant term: pass the Bohr frequency to zoom into")
    u = np.linspace(-window, window, npts)
    gu = np.conj(g(u)) * np.exp(1j * t * u)
    y = omega + lam**2 * u
    first = complex(np.trapezoid(gu * term.profile(y, mu), u))
    second = complex(np.trapezoid(gu, u) * term.profile(np.array([omega]), mu)[0])
    return first, second


def annihilator_gap(term, t: float, lam: float, g, **kw) -> float:
    a, b = annihilator_limit(term, t, lam, g, **kw)
    return abs(a - b)


# ---------------------------------------------------------------------------
# extended weak coupling limit
# ---------------------------------------------------------------------------

def time_profile(grid: AsymptoticGrid, g: np.ndarray, s: np.ndarray) -> np.ndarray:
    """ghat_n(s) = (2 pi)^{-1/2} sum_a sqrt(du) G_a e^{-i s u_a}, shape (len(s), noise)."""
    out = np.zeros((len(s), len(grid.layout)), dtype=complex)
    for n in range(len(grid.layout)):
        c = grid.component(g, n)
        if np.any(c):
            out[:, n] = np.exp(-1j * np.outer(s, grid.nodes(n))) @ c * \
                np.sqrt(grid.du) / np.sqrt(2 * np.pi)
    return out


def _bin_amplitudes(dp, grid, g, t0, t):
    dt = dp.lattice.dt
    nb = int(round((t - t0) / dt))
    mids = t0 + dt * (np.arange(nb) + 0.5)
    return np.sqrt(dt) * time_profile(grid, g, mids)      # (nb, noise)


def _automaton(dp: DilationPropagator, beta_in: list, beta_out: list) -> np.ndarray:
    """sum over bin placements of <out| M_nb ... M_1 |in> on the bin sector.

    beta_in / beta_out: per photon, an (nb, noise) array of bin amplitudes.
    Photons sharing a bin enter through repeated bin creation operators, so
    the sqrt(n!) normalizations come out of the Fock matrices.
    """
    d, B = dp.d, dp.bin_dim
    nin, nout = len(beta_in), len(beta_out)
    nb = (beta_in or beta_out)[0].shape[0] if (nin or nout) else 0
    cre = [dp.creation(n) for n in range(dp.lattice.noise_dim)]
    vac = np.zeros(B, dtype=complex)
    vac[0] = 1.0
    M = dp.per_bin_unitary.reshape(d, B, d, B)
    state = {(frozenset(), frozenset()): np.eye(d, dtype=complex)}
    if nb == 0:
        nb = dp.lattice.bins
    subsets_in = [frozenset(c) for k in range(nin + 1) for c in combinations(range(nin), k)]
    subsets_out = [frozenset(c) for k in range(nout + 1) for c in combinations(range(nout), k)]
    cutoff = dp.lattice.per_bin_cutoff
    for b in range(nb):
        vin = {}
        for S in subsets_in:
            if len(S) > cutoff:
                continue
            v = vac.copy()
            for p in S:
                v = sum(beta_in[p][b, n] * (cre[n] @ v) for n in range(len(cre)))
            vin[S] = v
        vout = {}
        for S in subsets_out:
            if len(S) > cutoff:
                continue
            v = vac.copy()
            for p in S:
                v = sum(beta_out[p][b, n] * (cre[n] @ v) for n in range(len(cre)))
            vout[S] = v
        blocks = {}
        new = {}
        for (ci, co), X in state.items():
            for Si, v_i in vin.items():
                if Si & ci:
                    continue
                for So, v_o in vout.items():
                    if So & co:
                        continue
                    key = (Si, So)
                    if key not in blocks:
                        blocks[key] = np.einsum("o,aobi,i->ab", v_o.conj(), M, v_i)
                    k2 = (ci | Si, co | So)
                    new[k2] = new.get(k2, 0) + blocks[key] @ X
        state = new
    full = (frozenset(range(nin)), frozenset(range(nout)))
    return state.get(full, np.zeros((d, d), dtype=complex))


def rhs_matrix_element(dp: DilationPropagator, grid: AsymptoticGrid, t: float,
                       t0: float, g_in: list, g_out: list) -> np.ndarray:
    """d x d block of <g_out| e^{itdG} U_{t-t0} e^{-it0 dG} |g_in> on the bin lattice.

    Bins cover [t0, t]; the parts of the photon wavefunctions orthogonal to
    the bin modes evolve freely and pair up through their overlaps.
    """
    if max(len(g_in), len(g_out)) > 2:
        raise ValueError("at most two particles per side")
    d = dp.d
    nb = int(round((t - t0) / dp.lattice.dt))
    if nb > dp.lattice.bins:
        raise ValueError("t - t0 exceeds the lattice horizon")
    b_in = [_bin_amplitudes(dp, grid, g, t0, t) for g in g_in]
    b_out = [_bin_amplitudes(dp, grid, g, t0, t) for g in g_out]
    perp = np.array([[np.vdot(go, gi) - np.sum(bo.conj() * bi)
                      for gi, bi in zip(g_in, b_in)]
                     for go, bo in zip(g_out, b_out)], dtype=complex).reshape(len(g_out), len(g_in))
    total = np.zeros((d, d), dtype=complex)
    # sum over partial matchings between free (orthogonal) in and out photons
    for k in range(min(len(g_in), len(g_out)) + 1):
        for ins in combinations(range(len(g_in)), k):
            for outs in permutations(range(len(g_out)), k):
                w = np.prod([perp[o, i] for i, o in zip(ins, outs)]) if k else 1.0
                if w == 0:
                    continue
                ri = [b_in[i] for i in range(len(g_in)) if i not in ins]
                ro = [b_out[o] for o in range(len(g_out)) if o not in outs]
                if nb == 0:
                    blk = np.eye(d, dtype=complex) if not ri and not ro else 0.0
                else:
                    blk = _automaton_n(dp, ri, ro, nb)
                total = total + w * blk
    return total


def _automaton_n(dp, ri, ro, nb):
    if ri or ro:
        return _automaton(dp, ri, ro)
    return np.linalg.matrix_power(dp.block(0, 0), nb)


def _fock_vector(sim: FullFockSimulator, photons: list) -> np.ndarray:
    """a*(f_1) ... a*(f_k) Omega in the truncated physical Fock space."""
    F = len(sim.basis)
    v = np.zeros(F, dtype=complex)
    v[0] = 1.0
    cre = [sim.basis.creation(i) for i in range(sim.basis.mode_count)] if photons else []
    for f in photons:
        v = sum(f[i] * (cre[i] @ v) for i in range(len(cre)) if f[i] != 0)
    return v


def lhs_matrix_element(sim: FullFockSimulator, iso: ScalingIsometry, t: float, t0: float,
                       g_in: list, g_out: list) -> np.ndarray:
    """d x d block of <Gamma(J) g_out| T_lam(lam^-2 t, lam^-2 t0) |Gamma(J) g_in>."""
    d = sim.sys.dim
    if max(len(g_in), len(g_out)) > sim.basis.n_max:
        raise ValueError("Fock truncation too small for the requested particle number")
    fin = _fock_vector(sim, [iso.apply(g) for g in g_in])
    fout = _fock_vector(sim, [iso.apply(g) for g in g_out])
    s0, s1 = sim.micro(t0), sim.micro(t)
    cols = np.stack([np.kron(np.eye(d)[a], fin) for a in range(d)], axis=1)
    psi = sim.op.free_phase(s0, cols)
    if s1 != s0:
        _guard(sim.disc, s1 - s0, sim.max_horizon)
        psi = _evolve(sim.op, s1 - s0, psi)
    psi = sim.op.free_phase(-s1, psi)
    return np.einsum("f,afk->ak", fout.conj(), psi.reshape(d, -1, d))


@dataclass(frozen=True)
class ExtendedWCLResult:
    lam: float
    t: float
    t0: float
    lhs: np.ndarray
    rhs: np.ndarray
    gap: float
    baseline: float

    @property
    def corrected_gap(self) -> float:
        return max(self.gap - self.baseline, 0.0)


def extended_wcl_matrix_element(sim: FullFockSimulator, iso: ScalingIsometry,
                                dp: DilationPropagator, t: float, t0: float,
                                g_in: list, g_out: list) -> ExtendedWCLResult:
    """Compare both sides of the extended limit on a low-particle matrix element.

    The baseline is the same gap at t = t0, where only the J truncation and
    the bin projection differ.
    """
    lhs = lhs_matrix_element(sim, iso, t, t0, g_in, g_out)
    rhs = rhs_matrix_element(dp, iso.grid, t, t0, g_in, g_out)
    lb = lhs_matrix_element(sim, iso, t0, t0, g_in, g_out)
    rb = rhs_matrix_element(dp, iso.grid, t0, t0, g_in, g_out)
    return ExtendedWCLResult(sim.lam, t, t0, lhs, rhs,
                             float(np.linalg.norm(lhs - rhs, 2)),
                             float(np.linalg.norm(lb - rb, 2)))


# ---------------------------------------------------------------------------
# Theta
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ThetaMap:
    """A = S (x) Gamma(G), G multiplication by g(x); Theta(A) = S (x) Gamma(+_omega g(omega))."""

    S: np.ndarray
    g: object                        # callable x -> scalar, |g| < 1

    def check(self, x: np.ndarray):
        sup = float(np.max(np.abs(self.g(x))))
        if sup >= 1.0:
            raise ValueError(f"sup |g| = {sup:.3g} >= 1: Gamma(G) must be a strict contraction")

    def compose(self, other: "ThetaMap") -> "ThetaMap":
        f, h = self.g, other.g
        return ThetaMap(self.S @ other.S, lambda x: f(x) * h(x))


def theta_apply(theta: ThetaMap, dp: DilationPropagator, omegas=None,
                probe: np.ndarray | None = None) -> np.ndarray:
    """S (x) Gamma(diag g(omega_n)) on K (x) one bin of the asymptotic lattice."""
    omegas = dp.davies.noise_omegas if omegas is None else np.asarray(omegas)
    theta.check(omegas if probe is None else probe)
    gw = np.array([theta.g(np.array([w]))[0] for w in omegas], dtype=complex)
    occ = dp.bin_basis.states
    diag = np.prod(np.where(occ > 0, gw[None, :] ** occ, 1.0), axis=1) if len(gw) else \
        np.ones(len(occ))
    return np.kron(theta.S, np.diag(diag))


def theta_one_particle_gap(iso: ScalingIsometry, theta: ThetaMap, g: np.ndarray) -> float:
    """||J^* G J g - (+_omega g(omega)) g|| for an asymptotic grid vector g."""
    grid, disc = iso.grid, iso.disc
    theta.check(disc.x)
    Gf = theta.g(disc.x) * iso.apply(g)
    lhs = iso.adjoint(Gf)
    rhs = np.zeros_like(g)
    o = grid.offsets
    for n, (om, _) in enumerate(grid.layout):
        rhs[o[n]:o[n + 1]] = theta.g(np.array([om]))[0] * g[o[n]:o[n + 1]]
    return float(np.linalg.norm(lhs - rhs))
