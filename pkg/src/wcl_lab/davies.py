"""Davies data (Upsilon, nu), the Lindblad generator and its semigroup.

Conventions used throughout:

* Upsilon = -i sum_k int_0^inf P_k V* e^{-it(K + H_R - k)} V P_k dt, so
  -i Upsilon generates a contraction semigroup.
* nu_omega = sqrt(2 pi) sum_{k - k' = omega} (P_k' (x) 1) v(omega) P_k; it
  lowers the system energy by omega while emitting a quantum of frequency
  omega, which makes -i Upsilon + i Upsilon* = -nu* nu hold exactly.
* L(S) = -i (Upsilon S - S Upsilon*) + nu* (S (x) 1) nu acts on observables.
* Superoperators act on column-stacked vectors: vec(A X B) = (B^T (x) A) vec(X).
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as la
from scipy.integrate import simpson

from .system_model import (DiscretizedReservoir, ReservoirModel, dag,
                           discretize_reservoir)


class DaviesWarning(UserWarning):
    pass


def vec(a: np.ndarray) -> np.ndarray:
    return np.asarray(a).reshape(-1, order="F")


def unvec(v: np.ndarray, d: int | None = None) -> np.ndarray:
    d = int(round(np.sqrt(len(v)))) if d is None else d
    return np.asarray(v).reshape((d, d), order="F")


# ---------------------------------------------------------------------------
# Davies data
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DaviesData:
    upsilon: np.ndarray
    nu_blocks: dict                 # omega -> (d*m_omega, d)
    nu: np.ndarray                  # (d*m_tot, d), kron(system, h) row order
    noise_layout: tuple             # (omega, mu) per component of h
    dissipativity_residual: float
    method: str = "plemelj"
    model: ReservoirModel | None = field(default=None, repr=False, compare=False)

    @property
    def dim(self) -> int:
        return self.upsilon.shape[0]

    @property
    def noise_dim(self) -> int:
        return len(self.noise_layout)

    @property
    def noise_omegas(self) -> np.ndarray:
        return np.array([w for w, _ in self.noise_layout], dtype=float)

    @property
    def nu_ops(self) -> np.ndarray:
        """(m_tot, d, d) slices with nu* (S (x) 1) nu = sum_n nu_n* S nu_n."""
        d, n = self.dim, self.noise_dim
        return np.stack([self.nu[np.arange(d) * n + k, :] for k in range(n)]) \
            if n else np.zeros((0, d, d), dtype=complex)

    @property
    def nu_dag_nu(self) -> np.ndarray:
        return dag(self.nu) @ self.nu

    @property
    def re_upsilon(self) -> np.ndarray:
        return 0.5 * (self.upsilon + dag(self.upsilon))

    @property
    def im_upsilon(self) -> np.ndarray:
        return (self.upsilon - dag(self.upsilon)) / 2j


def dissipativity_residual(upsilon, nu) -> float:
    return float(np.linalg.norm(-1j * upsilon + 1j * dag(upsilon) + dag(nu) @ nu, 2))


def _gl_panels(a: float, b: float, breaks, panels: int, points: int):
    """Composite Gauss-Legendre nodes on [a, b] split at the given breaks."""
    cuts = np.unique(np.concatenate([[a, b], [c for c in breaks if a < c < b]]))
    t, w = np.polynomial.legendre.leggauss(points)
    xs, ws = [], []
    for lo, hi in zip(cuts[:-1], cuts[1:]):
        edges = np.linspace(lo, hi, panels + 1)
        for p, q in zip(edges[:-1], edges[1:]):
            xs.append(0.5 * (q - p) * t + 0.5 * (p + q))
            ws.append(0.5 * (q - p) * w)
    return np.concatenate(xs), np.concatenate(ws)


def _level_blocks(model: ReservoirModel, ch, x):
    """B[a, c, b](x) = P_a v(x)* (P_c (x) 1) v(x) P_b for all level triples."""
    sys = model.system
    m = ch.multiplicity
    v = ch.form_factor(x)                                   # (n, d m, d)
    P = np.array(sys.projectors)                            # (L, d, d)
    Pm = np.array([np.kron(p, np.eye(m)) for p in sys.projectors])
    vb = np.einsum("nij,bjk->bnik", v, P)                   # v P_b
    mid = np.einsum("cij,bnjk->cbnik", Pm, vb)              # (P_c x 1) v P_b
    left = np.einsum("aij,nkj->anik", P, v.conj())          # P_a v*
    return np.einsum("anij,cbnjk->acbnik", left, mid, optimize=True)


def kernel_limit(model: ReservoirModel, panels: int = 64, points: int = 16,
                 diagonal_only: bool = False, warn: bool = True) -> np.ndarray:
    """Q = int_0^inf e^{iuK} V* e^{-iu(K + H_R)} V du by the Plemelj formula.

    Each level triple (a, c, b) contributes pi B(x_res) - i PV int B/(x - x_res)
    with x_res = k_a - k_c, the delta term coming only from the piece that
    contains x_res. The principal value is taken by subtracting B(x_res).
    """
    sys = model.system
    ev = sys.eigenvalues
    L, d = len(ev), sys.dim
    Q = np.zeros((d, d), dtype=complex)
    covered = np.zeros((L, L), dtype=bool)
    nonzero = np.zeros((L, L), dtype=bool)
    for ch in model.pieces:
        a_i, b_i = ch.interval
        for a in range(L):
            for c in range(L):
                xr = ev[a] - ev[c]
                inside = ch.contains(xr)
                breaks = list(ch.form_factor.breakpoints()) + ([xr] if inside else [])
                x, w = _gl_panels(a_i, b_i, breaks, panels, points)
                B = _level_blocks(model, ch, x)[a, c]       # (L_b, n, d, d)
                if diagonal_only:
                    B = B[[a]]
                    bs = [a]
                else:
                    bs = range(L)
                nonzero[a, c] |= bool(np.abs(B).max(initial=0.0) > 0)
                for bi, b in enumerate(bs):
                    Bb = B[bi]
                    if inside:
                        Br = _level_blocks(model, ch, np.array([xr]))[a, c, b, 0]
                        pv = np.einsum("n,nij->ij", w / (x - xr), Bb - Br[None])
                        pv = pv + Br * np.log((b_i - xr) / (xr - a_i))
                        Q += np.pi * Br - 1j * pv
                        covered[a, c] = True
                    else:
                        if xr == a_i or xr == b_i:
                            raise ValueError(
                                f"resonance {xr} sits on the edge of {ch.interval}")
                        Q += -1j * np.einsum("n,nij->ij", w / (x - xr), Bb)
    if warn:
        for a in range(L):
            for c in range(L):
                if nonzero[a, c] and not covered[a, c]:
                    warnings.warn(
                        f"resonance x = {ev[a] - ev[c]:.6g} (k={ev[a]:.6g}, "
                        f"k'={ev[c]:.6g}) lies in no channel or tail; its delta "
                        "term is taken as 0", DaviesWarning, stacklevel=2)
    return Q


def _upsilon_from_kernel(model, Q) -> np.ndarray:
    return -1j * sum(P @ Q @ P for P in model.system.projectors)


def upsilon_resolvent(disc: DiscretizedReservoir, eta: float) -> np.ndarray:
    """Upsilon_eta = sum_{k,k'} sum_i P_k V_i* P_k' V_i P_k (-i)/(i(k' + x_i - k) + eta)."""
    sys = disc.model.system
    ev = sys.eigenvalues
    P = sys.projectors
    Y = np.zeros((sys.dim, sys.dim), dtype=complex)
    V = disc.coupling
    for a, Pa in enumerate(P):
        VPa = V @ Pa
        for c, Pc in enumerate(P):
            f = -1j / (1j * (ev[c] + disc.x - ev[a]) + eta)
            Y += np.einsum("i,ikj,kl,ilm->jm", f, VPa.conj(), Pc, VPa, optimize=True)
    return Y


def compute_nu(model: ReservoirModel, warn: bool = True):
    """Blocks nu_omega and the stacked nu over h = (+)_omega h_omega."""
    sys = model.system
    d = sys.dim
    ev = sys.eigenvalues
    blocks = {}
    layout = model.noise_layout
    n_tot = len(layout)
    nu = np.zeros((d * n_tot, d), dtype=complex)
    offset = 0
    for n_w, omega in enumerate(model.bohr.frequencies):
        ch = model.channel_for(omega)
        if ch is None:
            if warn:
                warnings.warn(f"no channel for Bohr frequency {omega:.6g}; "
                              "nu_omega = 0", DaviesWarning, stacklevel=2)
            continue
        m = ch.multiplicity
        v = ch.form_factor(np.array([ch.omega]))[0]
        blk = np.zeros((d * m, d), dtype=complex)
        for (i, ip) in model.bohr.pair_map[n_w]:
            blk += np.kron(sys.projectors[ip], np.eye(m)) @ v @ sys.projectors[i]
        blk *= np.sqrt(2 * np.pi)
        blocks[float(ch.omega)] = blk
        for a in range(d):
            nu[a * n_tot + offset: a * n_tot + offset + m, :] = blk[a * m:(a + 1) * m, :]
        offset += m
    return blocks, nu, tuple(layout)


def compute_upsilon(model: ReservoirModel, method: str = "plemelj",
                    modes: int = 4000, eta0: float | None = None,
                    panels: int = 64, points: int = 16,
                    warn: bool = True) -> DaviesData:
    """Davies data by the Plemelj formula or by a regularized resolvent.

    resolvent_eta sums (i(K + H_R - k) + eta)^{-1} over a dense midpoint grid
    with `modes` nodes per piece and extrapolates 2 Y(eta0/2) - Y(eta0).
    """
    if method == "plemelj":
        Q = kernel_limit(model, panels, points, diagonal_only=True, warn=warn)
        Y = _upsilon_from_kernel(model, Q)
    elif method == "resolvent_eta":
        disc = discretize_reservoir(model, modes, "midpoint")
        eta0 = 10 * disc.spacing if eta0 is None else eta0
        if eta0 < disc.spacing:
            raise ValueError(f"eta0 = {eta0:.3g} below grid spacing "
                             f"{disc.spacing:.3g}: resolvent undersampled")
        Y = 2 * upsilon_resolvent(disc, eta0 / 2) - upsilon_resolvent(disc, eta0)
    else:
        raise ValueError(f"unknown method {method!r}")
    blocks, nu, layout = compute_nu(model, warn=warn)
    return DaviesData(Y, blocks, nu, layout, dissipativity_residual(Y, nu),
                      method, model)


def zero_davies(d: int) -> DaviesData:
    z = np.zeros((d, d), dtype=complex)
    return DaviesData(z, {}, np.zeros((0, d), dtype=complex), (), 0.0, "zero")


# ---------------------------------------------------------------------------
# Lindblad generator and semigroup
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LindbladGenerator:
    superoperator: np.ndarray
    davies: DaviesData = field(repr=False)

    @property
    def dim(self) -> int:
        return self.davies.dim

    def apply(self, S: np.ndarray) -> np.ndarray:
        return unvec(self.superoperator @ vec(S), self.dim)

    @property
    def predual(self) -> np.ndarray:
        """Generator of the Schroedinger picture (Hilbert-Schmidt adjoint)."""
        return dag(self.superoperator)


def lindblad_action(dd: DaviesData, S: np.ndarray) -> np.ndarray:
    Y = dd.upsilon
    out = -1j * (Y @ S - S @ dag(Y))
    for n in dd.nu_ops:
        out = out + dag(n) @ S @ n
    return out


def build_lindblad(dd: DaviesData, tol: float = 1e-8) -> LindbladGenerator:
    if dd.dissipativity_residual > tol:
        raise ValueError(f"dissipativity residual {dd.dissipativity_residual:.3e} "
                         f"exceeds {tol:.1e}; semigroup would not be unital")
    d = dd.dim
    I = np.eye(d)
    Y = dd.upsilon
    sup = -1j * np.kron(I, Y) + 1j * np.kron(Y.conj(), I)
    for n in dd.nu_ops:
        sup = sup + np.kron(n.T, dag(n))
    return LindbladGenerator(sup, dd)


def semigroup(L: LindbladGenerator, t: float) -> np.ndarray:
    """Superoperator matrix of e^{tL}."""
    return la.expm(t * L.superoperator)


def evolve_semigroup(L: LindbladGenerator, t: float, S: np.ndarray) -> np.ndarray:
    if not np.isfinite(t):
        raise ValueError("t must be finite")
    return unvec(semigroup(L, t) @ vec(S), L.dim)


def choi_matrix(superop: np.ndarray, d: int) -> np.ndarray:
    """sum_{ab} |a><b| (x) Phi(|a><b|) for a column-stacked superoperator."""
    C = np.zeros((d * d, d * d), dtype=complex)
    for a in range(d):
        for b in range(d):
            E = np.zeros((d, d))
            E[a, b] = 1.0
            C += np.kron(E, unvec(superop[:, a + b * d], d))
    return C


def choi_min_eigenvalue(superop: np.ndarray, d: int) -> float:
    C = choi_matrix(superop, d)
    return float(np.linalg.eigvalsh(0.5 * (C + dag(C))).min())


def stationary_state(L: LindbladGenerator) -> np.ndarray:
    """Density matrix rho with L_*(rho) = 0 and tr rho = 1 (least squares)."""
    d = L.dim
    A = np.vstack([L.predual, vec(np.eye(d))[None, :]])
    b = np.zeros(d * d + 1, dtype=complex)
    b[-1] = 1.0
    rho = unvec(np.linalg.lstsq(A, b, rcond=None)[0], d)
    return 0.5 * (rho + dag(rho))


def commutator_superop(K: np.ndarray) -> np.ndarray:
    """Superoperator of S -> i[K, S]."""
    I = np.eye(K.shape[0])
    return 1j * (np.kron(I, K) - np.kron(K.T, I))


# ---------------------------------------------------------------------------
# Q integral
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QIntegral:
    lam: float
    s: float
    value: np.ndarray
    limit: np.ndarray

    @property
    def distance(self) -> float:
        return float(np.linalg.norm(self.value - self.limit, 2))


def q_integral(disc: DiscretizedReservoir, lam: float, s: float,
               step: float | None = None, limit: np.ndarray | None = None,
               max_phase_step: float = 0.5) -> QIntegral:
    """Q_{lam,s} = int_0^{s/lam^2} e^{iuK} V* e^{-iu(K + H_R)} V du by Simpson's rule."""
    sys = disc.model.system
    fmax = float(np.abs(disc.x).max(initial=0.0)) + sys.diameter + 1e-300
    if step is None:
        step = 0.1 / fmax
    if step * fmax > max_phase_step:
        raise ValueError(f"step {step:.3g} too coarse; need step <= "
                         f"{max_phase_step / fmax:.3g}")
    if limit is None:
        limit = kernel_limit(disc.model, warn=False)
    d = sys.dim
    U = s / lam**2
    if U == 0 or disc.size == 0:
        return QIntegral(lam, s, np.zeros((d, d), dtype=complex), limit)
    n = int(np.ceil(U / step))
    n += n % 2
    u = np.linspace(0.0, U, n + 1)
    W = sys.eigenvectors
    e = sys.basis_energies
    Vt = np.einsum("am,iab,bp->imp", W.conj(), disc.coupling, W)
    vals = np.empty((len(u), d, d), dtype=complex)
    for s0 in range(0, len(u), 1024):
        uu = u[s0:s0 + 1024]
        ph = np.exp(-1j * uu[:, None, None] * (e[None, None, :] + disc.x[None, :, None]))
        inner = np.einsum("ica,nic,icb->nab", Vt.conj(), ph, Vt, optimize=True)
        vals[s0:s0 + 1024] = np.exp(1j * np.outer(uu, e))[:, :, None] * inner
    val = simpson(vals, x=u, axis=0)
    return QIntegral(lam, s, W @ val @ dag(W), limit)
