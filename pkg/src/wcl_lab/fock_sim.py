"""Truncated Fock-space simulation of the Pauli-Fierz model.

State vectors on K (x) Fock are stored system-major: index a * F + f, where F
is the number of occupation states. Grid vectors follow the convention of
DiscretizedReservoir (entries carry sqrt(w_i)), so the interaction is

    a*(V) = sum_i V_i (x) a_i^dagger,     a(V) = a*(V)^dagger.

Times passed to reduced_dynamics, friedrichs_reduced, dyson_wick_sum and
correlation_chain are macroscopic: the microscopic horizon is lam^-2 (t - t0).
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from itertools import combinations_with_replacement
from math import comb, factorial

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.sparse.linalg import expm_multiply

from .combinatorics import enumerate_pairings, simplex_quadrature
from .system_model import HERMITIAN_TOL, DiscretizedReservoir, SmallSystem, dag

DENSE_LIMIT = 2000
NORM_TOL = 1e-9


class PropagationError(RuntimeError):
    pass


class BudgetError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Fock basis and Hamiltonian
# ---------------------------------------------------------------------------

class FockBasis:
    """Occupation vectors (n_1..n_N) with total occupation <= n_max."""

    def __init__(self, mode_count: int, n_max: int):
        if mode_count < 0 or n_max < 0:
            raise ValueError("mode_count and n_max must be non-negative")
        self.mode_count = mode_count
        self.n_max = n_max
        rows = []
        for k in range(n_max + 1):
            for modes in combinations_with_replacement(range(mode_count), k):
                occ = np.zeros(mode_count, dtype=np.int64)
                np.add.at(occ, list(modes), 1)
                rows.append(occ)
        self.states = np.array(rows, dtype=np.int64).reshape(len(rows), mode_count)
        self._index = {tuple(s): i for i, s in enumerate(self.states)}
        self.total = self.states.sum(axis=1)

    @staticmethod
    def expected_size(mode_count: int, n_max: int) -> int:
        if mode_count == 0:
            return 1
        return sum(comb(mode_count + k - 1, k) for k in range(n_max + 1))

    def __len__(self) -> int:
        return len(self.states)

    def index(self, occ) -> int:
        return self._index[tuple(int(n) for n in occ)]

    @property
    def vacuum(self) -> int:
        return 0

    def one_particle(self, i: int) -> int:
        occ = np.zeros(self.mode_count, dtype=np.int64)
        occ[i] = 1
        return self.index(occ)

    def creation(self, i: int) -> sp.csr_matrix:
        """a_i^dagger restricted to the truncated space."""
        src, dst, val = [], [], []
        for col, occ in enumerate(self.states):
            if self.total[col] >= self.n_max:
                continue
            up = occ.copy()
            up[i] += 1
            src.append(col)
            dst.append(self.index(up))
            val.append(np.sqrt(occ[i] + 1.0))
        F = len(self)
        return sp.csr_matrix((val, (dst, src)), shape=(F, F), dtype=complex)

    def energies(self, x: np.ndarray) -> np.ndarray:
        """dGamma(H_R) eigenvalues: sum_i n_i x_i."""
        return self.states @ np.asarray(x, dtype=float)

    def number_projector(self, n: int) -> np.ndarray:
        return (self.total == n).astype(float)


@dataclass
class FockOperator:
    """H_lam = H0 + lam (a(V) + a*(V)) on K (x) truncated Fock space."""

    matrix: object                  # dense ndarray or scipy csr
    h0: object
    interaction: object             # a(V) + a*(V)
    lam: float
    kind: str
    system: SmallSystem = field(repr=False)
    disc: DiscretizedReservoir = field(repr=False)
    basis: FockBasis = field(repr=False)
    field_energies: np.ndarray = field(repr=False, default=None)
    _eig: tuple = field(default=None, repr=False)

    @property
    def dimension(self) -> int:
        return self.matrix.shape[0]

    @property
    def is_dense(self) -> bool:
        return isinstance(self.matrix, np.ndarray)

    @property
    def d(self) -> int:
        return self.system.dim

    def dense(self) -> np.ndarray:
        return self.matrix if self.is_dense else self.matrix.toarray()

    def hermiticity_defect(self) -> float:
        A = self.matrix
        diff = A - A.conj().T
        if self.is_dense:
            return float(np.abs(diff).max(initial=0.0))
        return float(abs(diff).max()) if diff.nnz else 0.0

    def eig(self):
        if self._eig is None:
            self._eig = np.linalg.eigh(self.dense())
        return self._eig

    def free_phase(self, s: float, psi: np.ndarray) -> np.ndarray:
        """e^{-i s H0} psi for psi of shape (dim,) or (dim, k)."""
        d, F = self.d, len(self.basis)
        k = psi.reshape(d, F, -1)
        U = sla.expm(-1j * s * self.system.hamiltonian)
        out = np.einsum("ab,bfk->afk", U, k) * np.exp(-1j * s * self.field_energies)[None, :, None]
        return out.reshape(psi.shape)

    def embed(self, phi: np.ndarray, f: np.ndarray | None = None) -> np.ndarray:
        """phi (x) f, with f a Fock vector (default: vacuum)."""
        if f is None:
            f = np.zeros(len(self.basis), dtype=complex)
            f[0] = 1.0
        return np.kron(phi, f)

    def one_particle_vector(self, g: np.ndarray) -> np.ndarray:
        """Fock vector a*(g) Omega for a grid vector g."""
        f = np.zeros(len(self.basis), dtype=complex)
        for i in range(self.basis.mode_count):
            f[self.basis.one_particle(i)] = g[i]
        return f


def build_hamiltonian(sys: SmallSystem, disc: DiscretizedReservoir,
                      basis: FockBasis, lam: float,
                      dense: bool | None = None) -> FockOperator:
    if basis.mode_count != disc.size:
        raise ValueError(f"basis has {basis.mode_count} modes, reservoir has {disc.size}")
    if basis.n_max == 0 and lam != 0:
        warnings.warn("n_max = 0 truncates the interaction to zero: the vacuum "
                      "cannot couple up", RuntimeWarning, stacklevel=2)
    d, F = sys.dim, len(basis)
    dim = d * F
    E = basis.energies(disc.x)
    H0 = sp.kron(sp.csr_matrix(sys.hamiltonian), sp.identity(F)) + \
        sp.kron(sp.identity(d), sp.diags(E))
    A = sp.csr_matrix((dim, dim), dtype=complex)
    for i in range(disc.size):
        A = A + sp.kron(sp.csr_matrix(disc.coupling[i]), basis.creation(i))
    X = (A + A.conj().T).tocsr()
    H = (H0 + lam * X).tocsr()
    if dense is None:
        dense = dim < DENSE_LIMIT
    if dense:
        H, H0, X = H.toarray(), H0.toarray(), X.toarray()
    op = FockOperator(H, H0, X, lam, "H_lambda" if lam else "H0", sys, disc, basis, E)
    if op.hermiticity_defect() > HERMITIAN_TOL * max(1.0, _scale(H)):
        raise ValueError("assembled Hamiltonian is not Hermitian")
    return op


def _scale(H) -> float:
    if isinstance(H, np.ndarray):
        return float(np.abs(H).max(initial=0.0))
    return float(abs(H).max()) if H.nnz else 0.0


# ---------------------------------------------------------------------------
# propagation
# ---------------------------------------------------------------------------

def _max_step(H) -> float:
    diag = np.abs(H.diagonal()) if not isinstance(H, np.ndarray) else np.abs(np.diag(H))
    return 0.1 / max(float(diag.max(initial=0.0)), 1.0)


def propagate(H, t: float, psi: np.ndarray, step: float | None = None,
              renormalize: bool = True) -> np.ndarray:
    """psi(t) = e^{-itH} psi by stepped expm_multiply.

    H may be a FockOperator, a dense array or a sparse matrix. psi may hold
    several columns. Each step is checked for norm drift; drift above 1e-9
    raises PropagationError.
    """
    M = H.matrix if isinstance(H, FockOperator) else H
    psi = np.asarray(psi, dtype=complex)
    norms0 = np.linalg.norm(psi, axis=0)
    if t == 0:
        return psi.copy()
    if step is None:
        step = _max_step(M)
    n = max(1, int(np.ceil(abs(t) / step)))
    dt = t / n
    A = -1j * dt * (sp.csr_matrix(M) if isinstance(M, np.ndarray) else M)
    out = psi
    for _ in range(n):
        out = expm_multiply(A, out)
        norms = np.linalg.norm(out, axis=0)
        drift = float(np.max(np.abs(norms - norms0)))
        if drift > NORM_TOL * max(1.0, float(np.max(norms0))):
            raise PropagationError(f"norm drift {drift:.3e} after step of {dt:.3g}")
        if renormalize:
            scale = np.where(norms > 0, norms0 / np.where(norms > 0, norms, 1), 1.0)
            out = out * scale
    return out


def spectral_propagator(H: np.ndarray, t: float) -> np.ndarray:
    E, W = np.linalg.eigh(H)
    return (W * np.exp(-1j * t * E)) @ W.conj().T


def _evolve(op: FockOperator, tau: float, psi: np.ndarray) -> np.ndarray:
    if op.is_dense:
        E, W = op.eig()
        cols = psi.reshape(len(E), -1)
        return (W @ (np.exp(-1j * tau * E)[:, None] * (W.conj().T @ cols))).reshape(psi.shape)
    return propagate(op, tau, psi)


def interaction_propagator(op: FockOperator, s: float, s0: float) -> np.ndarray:
    """Dense T(s, s0) = e^{isH0} e^{-i(s-s0)H} e^{-is0 H0} (microscopic times)."""
    I = np.eye(op.dimension, dtype=complex)
    psi = op.free_phase(s0, I)
    psi = _evolve(op, s - s0, psi)
    return op.free_phase(-s, psi)


# ---------------------------------------------------------------------------
# reduced dynamics on the full truncated space
# ---------------------------------------------------------------------------

def _guard(disc: DiscretizedReservoir, horizon: float, max_horizon: float | None,
           alt: str = "friedrichs_reduced"):
    if max_horizon is not None and horizon > max_horizon:
        raise BudgetError(f"horizon {horizon:.3g} over budget {max_horizon:.3g}; "
                          f"use {alt} for long one-excitation runs")
    disc.check_horizon(horizon)


class FullFockSimulator:
    """Cached H_lam on K (x) Fock for repeated compressed evolutions."""

    def __init__(self, sys: SmallSystem, disc: DiscretizedReservoir, lam: float,
                 n_max: int = 2, max_horizon: float | None = 400.0):
        self.sys, self.disc, self.lam = sys, disc, lam
        self.basis = FockBasis(disc.size, n_max)
        self.op = build_hamiltonian(sys, disc, self.basis, lam)
        self.max_horizon = max_horizon

    def micro(self, t: float) -> float:
        return t / self.lam**2 if self.lam else t

    def columns(self) -> np.ndarray:
        d = self.sys.dim
        return np.stack([self.op.embed(np.eye(d)[a]) for a in range(d)], axis=1)

    def compress(self, psi: np.ndarray) -> np.ndarray:
        """I* psi for columns psi: read the vacuum component of each system index."""
        d, F = self.sys.dim, len(self.basis)
        return psi.reshape(d, F, -1)[:, 0, :]

    def chain(self, ops: list, times: list) -> np.ndarray:
        """I* T(s, s_l) S_l ... S_1 T(s_1, s_0) I for microscopic ordered times."""
        if any(b < a for a, b in zip(times, times[1:])):
            raise ValueError("times must be ordered t0 <= t1 <= ... <= t")
        if len(ops) != len(times) - 2:
            raise ValueError("need one operator per intermediate time")
        _guard(self.disc, times[-1] - times[0], self.max_horizon)
        K = self.sys.hamiltonian
        psi = self.op.free_phase(times[0], self.columns())
        for k in range(1, len(times)):
            psi = _evolve(self.op, times[k] - times[k - 1], psi)
            if k < len(times) - 1:
                s = times[k]
                S = sla.expm(-1j * s * K) @ ops[k - 1] @ sla.expm(1j * s * K)
                psi = _apply_system(S, psi, self.sys.dim)
        return sla.expm(1j * times[-1] * K) @ self.compress(psi)


def _apply_system(S: np.ndarray, psi: np.ndarray, d: int) -> np.ndarray:
    sh = psi.shape
    return np.einsum("ab,bfk->afk", S, psi.reshape(d, -1, sh[-1] if psi.ndim > 1 else 1)) \
        .reshape(sh)


def reduced_dynamics(sys: SmallSystem, disc: DiscretizedReservoir, lam: float,
                     t: float, t0: float = 0.0, n_max: int = 2,
                     max_horizon: float | None = 400.0,
                     sim: FullFockSimulator | None = None) -> np.ndarray:
    """I* T_lam(lam^-2 t, lam^-2 t0) I on the truncated Fock space."""
    if t == t0:
        return np.eye(sys.dim, dtype=complex)
    sim = sim or FullFockSimulator(sys, disc, lam, n_max, max_horizon)
    return sim.chain([], [sim.micro(t0), sim.micro(t)])


def correlation_chain(sys: SmallSystem, disc: DiscretizedReservoir, lam: float,
                      S_list: list, times: list, n_max: int = 2,
                      max_horizon: float | None = 400.0,
                      sim: FullFockSimulator | None = None) -> np.ndarray:
    """I* T(t, t_l) S_l ... S_1 T(t_1, t_0) I with macroscopic ordered times."""
    times = list(times)
    if any(b < a for a, b in zip(times, times[1:])):
        raise ValueError("times must be ordered t0 <= t1 <= ... <= t")
    sim = sim or FullFockSimulator(sys, disc, lam, n_max, max_horizon)
    return sim.chain(list(S_list), [sim.micro(s) for s in times])


def correlation_limit(upsilon: np.ndarray, S_list: list, times: list) -> np.ndarray:
    """e^{-i(t - t_l) Y} S_l ... S_1 e^{-i(t_1 - t_0) Y}."""
    times = list(times)
    out = sla.expm(-1j * (times[1] - times[0]) * upsilon)
    for k, S in enumerate(S_list, start=1):
        out = sla.expm(-1j * (times[k + 1] - times[k]) * upsilon) @ S @ out
    return out


def factorization_defect(sys: SmallSystem, disc: DiscretizedReservoir, lam: float,
                         S: np.ndarray, t0: float, t1: float, t: float,
                         n_max: int = 2) -> float:
    """||I*T S T I - (I*T I) S (I*T I)|| at macroscopic times t0 <= t1 <= t."""
    sim = FullFockSimulator(sys, disc, lam, n_max)
    full = correlation_chain(sys, disc, lam, [S], [t0, t1, t], sim=sim)
    left = reduced_dynamics(sys, disc, lam, t, t1, sim=sim)
    right = reduced_dynamics(sys, disc, lam, t1, t0, sim=sim)
    return float(np.linalg.norm(full - left @ S @ right, 2))


# ---------------------------------------------------------------------------
# Friedrichs sector
# ---------------------------------------------------------------------------

@dataclass
class FriedrichsSector:
    """K (+) (K (x) grid) with off-diagonal lam V blocks."""

    matrix: np.ndarray
    d: int
    modes: int
    lam: float
    system: SmallSystem = field(repr=False)
    _eig: tuple = field(default=None, repr=False)

    @property
    def dimension(self) -> int:
        return self.matrix.shape[0]

    def eig(self):
        if self._eig is None:
            self._eig = np.linalg.eigh(self.matrix)
        return self._eig

    def compressed(self, tau) -> np.ndarray:
        """I* e^{-i tau H~} I for an array of microscopic durations."""
        E, W = self.eig()
        top = W[: self.d]
        tau = np.atleast_1d(np.asarray(tau, dtype=float))
        return np.einsum("ak,nk,bk->nab", top, np.exp(-1j * np.outer(tau, E)), top.conj())


def friedrichs_sector(sys: SmallSystem, disc: DiscretizedReservoir,
                      lam: float) -> FriedrichsSector:
    d, M = sys.dim, disc.size
    H = np.zeros((d * (1 + M), d * (1 + M)), dtype=complex)
    H[:d, :d] = sys.hamiltonian
    # one-excitation block, index d + a*M + i (system-major)
    H[d:, d:] = np.kron(sys.hamiltonian, np.eye(M)) + np.kron(np.eye(d), np.diag(disc.x))
    Vcol = np.einsum("iab->aib", disc.coupling).reshape(d * M, d)
    H[d:, :d] = lam * Vcol
    H[:d, d:] = lam * dag(Vcol)
    return FriedrichsSector(H, d, M, lam, sys)


def friedrichs_reduced(sys: SmallSystem, disc: DiscretizedReservoir, lam: float,
                       t, t0: float = 0.0, sector: FriedrichsSector | None = None,
                       guard: bool = True) -> np.ndarray:
    """G_lam(t, t0) = e^{i s K} I* e^{-i (s - s0) H~} I e^{-i s0 K}, s = lam^-2 t.

    t may be an array (returns shape (n, d, d)); with lam = 0 this is 1.
    """
    scalar = np.ndim(t) == 0
    tt = np.atleast_1d(np.asarray(t, dtype=float))
    d = sys.dim
    if lam == 0:
        out = np.broadcast_to(np.eye(d, dtype=complex), (len(tt), d, d)).copy()
        return out[0] if scalar else out
    s, s0 = tt / lam**2, t0 / lam**2
    if guard:
        disc.check_horizon(float(np.max(np.abs(s - s0))))
    sector = sector or friedrichs_sector(sys, disc, lam)
    C = sector.compressed(s - s0)
    E, W = np.linalg.eigh(sys.hamiltonian)
    left = np.einsum("ak,nk,bk->nab", W, np.exp(1j * np.outer(s, E)), W.conj())
    right = (W * np.exp(-1j * s0 * E)) @ W.conj().T
    out = left @ C @ right
    return out[0] if scalar else out


def semigroup_gap(G: np.ndarray, upsilon: np.ndarray, t) -> np.ndarray:
    """||G(t) - e^{-itY}|| for each t."""
    tt = np.atleast_1d(t)
    G = G.reshape(len(tt), *upsilon.shape)
    return np.array([np.linalg.norm(G[k] - sla.expm(-1j * tt[k] * upsilon), 2)
                     for k in range(len(tt))])


# ---------------------------------------------------------------------------
# Dyson / Wick expansion
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DysonResult:
    terms: tuple            # C_0 .. C_max as d x d arrays
    norms: np.ndarray
    bounds: np.ndarray      # ||D||^{2n} (t - t0)^n ||h||_1^n / (2^n n!)
    h_l1: float
    tail_bound: float       # bound on sum_{n > max_order} ||C_n||
    points_per_axis: tuple

    @property
    def partial_sum(self) -> np.ndarray:
        return sum(self.terms)


def _correlation_matrix(decomp, u: np.ndarray, chunk: int = 8192) -> np.ndarray:
    """c[k, j', j] = <phi_j'| e^{-i u_k H_R} phi_j>, in chunks."""
    Phi = decomp.phi_matrix
    x = decomp.disc.x
    J = Phi.shape[1]
    pairs = (Phi.conj()[:, :, None] * Phi[:, None, :]).reshape(len(x), J * J)
    out = np.empty((len(u), J, J), dtype=complex)
    for s in range(0, len(u), chunk):
        ph = np.exp(-1j * np.outer(u[s:s + chunk], x))
        out[s:s + chunk] = (ph @ pairs).reshape(-1, J, J)
    return out


def required_points(horizon: float, fmax: float) -> int:
    """Gauss points per axis resolving a phase of horizon * fmax."""
    return int(np.ceil(0.5 * horizon * fmax)) + 6


def dyson_wick_sum(sys: SmallSystem, decomp, lam: float, t: float, t0: float = 0.0,
                   max_order: int = 2, points_per_axis=None,
                   max_nodes: int = 3_000_000) -> DysonResult:
    """Partial sum C_0 + ... + C_max of the paired Dyson series for I* T I.

    C_n = (-1)^n lam^{2n} int_{s0 < s_1 < ... < s_2n < s} sum_sigma
          X_{2n} ... X_1 prod_p c_{j'_p j_p}(s_{sigma(2p)} - s_{sigma(2p-1)})
    with X = D_j(s) at creator slots and D_j'(s)^* at annihilator slots.
    """
    if max_order < 0 or max_order > 3:
        raise ValueError("max_order must be in 0..3")
    d = sys.dim
    s0, s1 = (t0 / lam**2, t / lam**2) if lam else (t0, t)
    horizon = s1 - s0
    terms = [np.eye(d, dtype=complex)]
    decomp.disc.check_horizon(horizon) if lam and horizon > 0 else None
    h1 = decomp.h_l1(horizon) if lam and horizon > 0 else 0.0
    Dn = decomp.d_norm
    T = t - t0
    bounds = [1.0] + [Dn ** (2 * n) * T**n * h1**n / (2**n * factorial(n))
                      for n in range(1, max_order + 1)]
    xarg = Dn**2 * T * h1 / 2
    tail = float(np.exp(xarg) - sum(xarg**n / factorial(n) for n in range(max_order + 1)))
    used = []
    if lam == 0 or not decomp.terms or horizon <= 0:
        terms += [np.zeros((d, d), dtype=complex)] * max_order
        return DysonResult(tuple(terms), np.array([np.linalg.norm(c, 2) for c in terms]),
                           np.array(bounds), h1, tail, tuple(used))

    D = np.stack([tm.D for tm in decomp.terms])
    nu = np.array([tm.nu for tm in decomp.terms])
    fmax = float(np.abs(decomp.disc.x).max() + np.abs(nu).max())
    for n in range(1, max_order + 1):
        k = 2 * n
        p = points_per_axis if points_per_axis is not None else required_points(horizon, fmax)
        if isinstance(p, (list, tuple)):
            p = p[n - 1]
        need = required_points(horizon, fmax)
        if p < need - 6 or p**k > max_nodes:
            raise ValueError(
                f"phase resolution failure at order {n}: horizon {horizon:.3g} needs "
                f"{need} points per axis ({need**k:.3g} nodes, budget {max_nodes:.3g})")
        used.append(p)
        rule = simplex_quadrature(k, s0, s1, p)
        terms.append((-1) ** n * lam ** (2 * n) * _wick_order(decomp, D, nu, rule, n))
    norms = np.array([np.linalg.norm(c, 2) for c in terms])
    return DysonResult(tuple(terms), norms, np.array(bounds), h1, tail, tuple(used))


_LETTERS = "abcdefghijklmnopqrstuvwxyzABCDEFGHIJ"


def _wick_order(decomp, D, nu, rule, n, chunk: int = 20000) -> np.ndarray:
    d = D.shape[1]
    total = np.zeros((d, d), dtype=complex)
    pairings = enumerate_pairings(n)
    idx = _LETTERS[: 2 * n + 1]                  # boundary indices i_0 .. i_2n
    for st in range(0, len(rule.weights), chunk):
        S = rule.nodes[st:st + chunk]
        wt = rule.weights[st:st + chunk]
        # slot operators per node: creators D_j(s), annihilators D_j(s)^*
        cre = np.exp(1j * S[:, :, None] * nu[None, None, :])[..., None, None] * D[None, None]
        ann = np.exp(-1j * S[:, :, None] * nu[None, None, :])[..., None, None] * \
            np.conj(np.swapaxes(D, 1, 2))[None, None]
        for sig in pairings:
            operands, subs = [], []
            for a, b in sig.pairs:
                G = _correlation_matrix(decomp, S[:, b - 1] - S[:, a - 1])
                W = np.einsum("kuv,kuab,kvcd->kabcd", G, ann[:, b - 1], cre[:, a - 1],
                              optimize=True)
                operands.append(W)
                subs.append("z" + idx[b] + idx[b - 1] + idx[a] + idx[a - 1])
            expr = ",".join(subs) + ",z->" + idx[2 * n] + idx[0]
            total += np.einsum(expr, *operands, wt, optimize=True)
    return total


# ---------------------------------------------------------------------------
# resummation identity
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ResummationResult:
    residual: float
    tail_bound: float
    lhs: np.ndarray
    rhs: np.ndarray
    labels: tuple


def _fock_state(op: FockOperator, g) -> np.ndarray:
    if g is None:
        f = np.zeros(len(op.basis), dtype=complex)
        f[0] = 1.0
        return f
    return op.one_particle_vector(g)


def resummation_check(sys: SmallSystem, decomp, lam: float, t: float, t0: float = 0.0,
                      max_m: int = 2, n_max: int = 2, states=None,
                      points: int = 24) -> ResummationResult:
    """Compare direct <b, f_o| T |a, f_i> with the resummed m-sum.

    states is a list of (f_in, f_out) pairs, each None (vacuum) or a grid vector
    (one-particle state). Times are macroscopic. The resummed side uses
    compressed chains I* T D^eps T ... T I built on the same truncated space.
    """
    if max_m > 2:
        raise ValueError("max_m must be <= 2")
    if decomp.disc.size > 3 or n_max > 2:
        raise ValueError("resummation check is limited to N <= 3 modes, n_max <= 2")
    if not decomp.terms and lam != 0:
        raise ValueError("coupling decomposition is empty: no tail bound available")
    disc = decomp.disc
    d = sys.dim
    s0, s1 = (t0 / lam**2, t / lam**2) if lam else (t0, t)
    tau = s1 - s0
    if states is None:
        g = np.zeros(disc.size, dtype=complex)
        g[0] = 1.0
        states = [(None, None), (g, None), (None, g), (g, g)]
    basis = FockBasis(disc.size, n_max)
    op = build_hamiltonian(sys, disc, basis, lam, dense=True)
    E, W = op.eig()
    K = sys.hamiltonian

    def Tfull(a, b):
        """Full interaction-picture T(a, b) as a dense matrix."""
        U = (W * np.exp(-1j * (a - b) * E)) @ W.conj().T
        return _conj_free(op, a, U, b)

    lhs, rhs, labels = [], [], []
    Phi = np.array([np.linalg.norm(tm.phi) for tm in decomp.terms]).sum() \
        if decomp.terms else 0.0
    x = lam * tau * Phi * np.sqrt(n_max + 1)
    tail = float(sum(x**m / factorial(m) for m in range(max_m + 1, 60)))

    D = [tm.D for tm in decomp.terms]
    nu = [tm.nu for tm in decomp.terms]
    phis = [tm.phi for tm in decomp.terms]
    g1, gw = np.polynomial.legendre.leggauss(points)
    u1 = s0 + 0.5 * (g1 + 1) * tau
    w1 = 0.5 * gw * tau
    rule2 = simplex_quadrature(2, s0, s1, points) if tau > 0 else None

    def Iop(M):
        return np.kron(M, np.eye(len(basis)))

    def compress(M):
        R = M.reshape(d, len(basis), d, len(basis))
        return R[:, 0, :, 0]

    cache = {}

    def T(a, b):
        key = (a, b)
        if key not in cache:
            cache[key] = Tfull(a, b)
        return cache[key]

    def field(g, s):
        return np.exp(1j * s * disc.x) * g

    for f_in, f_out in states:
        vin, vout = _fock_state(op, f_in), _fock_state(op, f_out)
        direct = np.kron(np.eye(d), vout.conj()[None, :]) @ T(s1, s0) @ \
            np.kron(np.eye(d), vin[:, None])
        lhs.append(direct)
        total = complex(np.vdot(vout, vin)) * compress(T(s1, s0))
        if max_m >= 1 and tau > 0 and lam:
            acc = np.zeros((d, d), dtype=complex)
            for s, w in zip(u1, w1):
                X = np.zeros((d, d), dtype=complex)
                for j in range(len(D)):
                    gj = field(phis[j], s)
                    if f_out is not None and f_in is None:
                        X += np.vdot(f_out, gj) * np.exp(1j * nu[j] * s) * D[j]
                    if f_in is not None and f_out is None:
                        X += np.vdot(gj, f_in) * np.exp(-1j * nu[j] * s) * dag(D[j])
                if np.any(X):
                    acc += w * compress(T(s1, s) @ Iop(X) @ T(s, s0))
            total = total + (-1j * lam) * acc
        if max_m >= 2 and tau > 0 and lam and f_in is not None and f_out is not None:
            acc = np.zeros((d, d), dtype=complex)
            for (sa, sb), w in zip(rule2.nodes, rule2.weights):
                Xp = [sum(np.vdot(f_out, field(phis[j], s)) * np.exp(1j * nu[j] * s) * D[j]
                          for j in range(len(D))) for s in (sa, sb)]
                Xm = [sum(np.vdot(field(phis[j], s), f_in) * np.exp(-1j * nu[j] * s) *
                          dag(D[j]) for j in range(len(D))) for s in (sa, sb)]
                mid = T(sb, sa)
                acc += w * compress(T(s1, sb) @ Iop(Xm[1]) @ mid @ Iop(Xp[0]) @ T(sa, s0))
                acc += w * compress(T(s1, sb) @ Iop(Xp[1]) @ mid @ Iop(Xm[0]) @ T(sa, s0))
            total = total + (-1j * lam) ** 2 * acc
        rhs.append(total)
        labels.append(("vac" if f_in is None else "1p", "vac" if f_out is None else "1p"))
    res = max(float(np.linalg.norm(a - b, 2)) for a, b in zip(lhs, rhs))
    return ResummationResult(res, tail, np.array(lhs), np.array(rhs), tuple(labels))


def _conj_free(op: FockOperator, a: float, U: np.ndarray, b: float) -> np.ndarray:
    """e^{i a H0} U e^{-i b H0} for dense U."""
    d, F = op.d, len(op.basis)
    Ka = sla.expm(1j * a * op.system.hamiltonian)
    Kb = sla.expm(-1j * b * op.system.hamiltonian)
    La = np.kron(Ka, np.diag(np.exp(1j * a * op.field_energies)))
    Rb = np.kron(Kb, np.diag(np.exp(-1j * b * op.field_energies)))
    return La @ U @ Rb
