"""Physical data of a Pauli-Fierz model: small system, reservoir channels, grids.

The small system is a Hermitian matrix K. The reservoir one-particle space is
split into channels, one per Bohr frequency omega, each an open interval
I_omega carrying a form factor v(x): C^d -> C^d (x) h_omega. Optional tail
pieces carry off-resonant coupling outside every I_omega.

Row ordering of a form-factor matrix follows kron(system, multiplicity), i.e.
row a*m + mu belongs to system index a and multiplicity index mu.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


HERMITIAN_TOL = 1e-12


def dag(a: np.ndarray) -> np.ndarray:
    return a.conj().T


# ---------------------------------------------------------------------------
# small system
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SmallSystem:
    """Hermitian K with clustered spectral decomposition."""

    hamiltonian: np.ndarray
    eigenvalues: np.ndarray          # distinct clustered eigenvalues, ascending
    projectors: tuple                # spectral projectors, same order
    eigenvectors: np.ndarray         # orthonormal eigenbasis (columns)
    level_of: np.ndarray             # eigenvector column -> index into eigenvalues
    cluster_tol: float

    @property
    def dim(self) -> int:
        return self.hamiltonian.shape[0]

    @property
    def spectrum(self):
        return list(zip(self.eigenvalues, self.projectors))

    @property
    def basis_energies(self) -> np.ndarray:
        """Clustered energy of each eigenbasis vector."""
        return self.eigenvalues[self.level_of]

    @property
    def diameter(self) -> float:
        return float(self.eigenvalues[-1] - self.eigenvalues[0])

    @property
    def abs_tol(self) -> float:
        return _absolute_tol(self.cluster_tol, self.diameter)


def _absolute_tol(cluster_tol: float, diameter: float) -> float:
    return cluster_tol * diameter if diameter > 0 else cluster_tol


def spectral_decompose(K, cluster_tol: float = 1e-9) -> SmallSystem:
    """Diagonalize K and merge eigenvalues closer than cluster_tol * diameter."""
    K = np.atleast_2d(np.asarray(K, dtype=complex))
    if K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise ValueError(f"K must be square, got shape {K.shape}")
    scale = max(np.linalg.norm(K), 1.0)
    asym = np.linalg.norm(K - dag(K)) / scale
    if asym > HERMITIAN_TOL:
        raise ValueError(f"K is not Hermitian: relative asymmetry {asym:.3e}")
    K = 0.5 * (K + dag(K))
    evals, evecs = np.linalg.eigh(K)
    tol = _absolute_tol(cluster_tol, float(evals[-1] - evals[0]))

    groups = [[0]]
    for i in range(1, len(evals)):
        if evals[i] - evals[groups[-1][-1]] <= tol:
            groups[-1].append(i)
        else:
            groups.append([i])

    levels, projectors = [], []
    level_of = np.empty(len(evals), dtype=int)
    for g_idx, g in enumerate(groups):
        levels.append(float(np.mean(evals[g])))
        U = evecs[:, g]
        projectors.append(U @ dag(U))
        level_of[g] = g_idx
    return SmallSystem(K, np.array(levels), tuple(projectors), evecs, level_of,
                       cluster_tol)


@dataclass(frozen=True)
class BohrFrequencySet:
    frequencies: np.ndarray
    pair_map: dict                   # omega index -> list of (level i, level i')
    tol: float

    def index(self, omega: float) -> int | None:
        hits = np.nonzero(np.abs(self.frequencies - omega) <= self.tol)[0]
        return int(hits[0]) if len(hits) else None

    def pairs(self, omega: float):
        i = self.index(omega)
        return [] if i is None else self.pair_map[i]


def bohr_frequencies(sys: SmallSystem) -> BohrFrequencySet:
    """All differences k - k' of clustered eigenvalues, deduplicated."""
    ev = sys.eigenvalues
    tol = sys.abs_tol
    diffs = sorted(((ev[i] - ev[j], (i, j)) for i in range(len(ev))
                    for j in range(len(ev))), key=lambda p: p[0])
    groups = [[diffs[0]]]
    for item in diffs[1:]:
        if item[0] - groups[-1][-1][0] <= tol:
            groups[-1].append(item)
        else:
            groups.append([item])
    # midrange keeps the set exactly symmetric under negation
    freqs = np.array([0.5 * (g[0][0] + g[-1][0]) for g in groups])
    pair_map = {n: [p for _, p in g] for n, g in enumerate(groups)}
    return BohrFrequencySet(freqs, pair_map, tol)


# ---------------------------------------------------------------------------
# form factors
# ---------------------------------------------------------------------------

def flat_profile(c: float) -> Callable:
    return lambda x: np.full(np.shape(x), float(c))


def lorentzian_profile(c: float, center: float, width: float) -> Callable:
    return lambda x: c * width**2 / ((np.asarray(x) - center) ** 2 + width**2)


def gaussian_profile(c: float, center: float, sigma: float) -> Callable:
    return lambda x: c * np.exp(-((np.asarray(x) - center) ** 2) / (2 * sigma**2))


PROFILES = {
    "flat": (flat_profile, ("c",)),
    "lorentzian": (lorentzian_profile, ("c", "center", "width")),
    "gaussian": (gaussian_profile, ("c", "center", "sigma")),
}


class FormFactor:
    """x -> complex matrix of shape (d*m, d).

    Either a scalar profile times a fixed coupling matrix, or a table of
    matrices at nodes with linear interpolation (constant beyond the ends).
    """

    def __init__(self, shape, profile=None, coupling=None, nodes=None,
                 table=None, label=""):
        self.shape = tuple(shape)
        self.label = label
        if profile is not None:
            self.profile = profile
            self.coupling = np.asarray(coupling, dtype=complex).reshape(self.shape)
            self.nodes = None
        else:
            self.profile = None
            self.nodes = np.asarray(nodes, dtype=float)
            self.table = np.asarray(table, dtype=complex).reshape(
                (len(self.nodes),) + self.shape)
            if np.any(np.diff(self.nodes) <= 0):
                raise ValueError("form-factor table nodes must be increasing")

    def __call__(self, x) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if self.profile is not None:
            return self.profile(x)[:, None, None] * self.coupling[None]
        flat = self.table.reshape(len(self.nodes), -1)
        out = np.empty((len(x), flat.shape[1]), dtype=complex)
        for k in range(flat.shape[1]):
            out[:, k] = (np.interp(x, self.nodes, flat[:, k].real)
                         + 1j * np.interp(x, self.nodes, flat[:, k].imag))
        return out.reshape((len(x),) + self.shape)

    def breakpoints(self) -> np.ndarray:
        return np.array([]) if self.nodes is None else self.nodes


def zero_form_factor(d: int, m: int = 1) -> FormFactor:
    return FormFactor((d * m, d), profile=flat_profile(0.0),
                      coupling=np.zeros((d * m, d)), label="zero")


# ---------------------------------------------------------------------------
# reservoir
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Channel:
    """One reservoir piece: an open interval with a form factor.

    omega is the Bohr frequency it is attached to, or None for a tail piece.
    """

    omega: float | None
    interval: tuple
    multiplicity: int
    form_factor: FormFactor

    @property
    def width(self) -> float:
        return self.interval[1] - self.interval[0]

    def contains(self, x: float) -> bool:
        return self.interval[0] < x < self.interval[1]

    def block(self, x, mu: int) -> np.ndarray:
        """d x d coupling slice for multiplicity index mu at points x."""
        v = self.form_factor(x)
        m = self.multiplicity
        return v[:, mu::m, :]


@dataclass(frozen=True)
class ReservoirModel:
    system: SmallSystem
    channels: tuple
    tails: tuple = ()
    name: str = ""
    bohr: BohrFrequencySet = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "bohr", bohr_frequencies(self.system))
        self.validate()

    def validate(self, continuity_tol: float = 1e-6):
        d = self.system.dim
        pieces = list(self.channels) + list(self.tails)
        for ch in pieces:
            a, b = ch.interval
            if not b > a:
                raise ValueError(f"empty interval {ch.interval}")
            if ch.form_factor.shape != (d * ch.multiplicity, d):
                raise ValueError(
                    f"form factor on {ch.interval} has shape {ch.form_factor.shape},"
                    f" expected {(d * ch.multiplicity, d)}")
        for i, p in enumerate(pieces):
            for q in pieces[i + 1:]:
                if p.interval[0] < q.interval[1] and q.interval[0] < p.interval[1]:
                    raise ValueError(
                        f"intervals {p.interval} and {q.interval} overlap")
        seen = set()
        for ch in self.channels:
            idx = self.bohr.index(ch.omega)
            if idx is None:
                raise ValueError(f"channel omega={ch.omega} is not a Bohr frequency")
            if idx in seen:
                raise ValueError(f"two channels for omega={ch.omega}")
            seen.add(idx)
            if not ch.contains(ch.omega):
                raise ValueError(
                    f"channel interval {ch.interval} does not contain {ch.omega}")
            check_continuity(ch, continuity_tol)
        for t in self.tails:
            for w in self.bohr.frequencies:
                if t.contains(w):
                    raise ValueError(
                        f"tail interval {t.interval} contains Bohr frequency {w}")

    @property
    def pieces(self) -> list:
        return list(self.channels) + list(self.tails)

    def channel_for(self, omega: float):
        for ch in self.channels:
            if abs(ch.omega - omega) <= self.bohr.tol:
                return ch
        return None

    @property
    def noise_layout(self):
        """(omega, multiplicity index) of each component of h = (+) h_omega."""
        out = []
        for ch in sorted(self.channels, key=lambda c: c.omega):
            out += [(ch.omega, mu) for mu in range(ch.multiplicity)]
        return out


def check_continuity(ch: Channel, tol: float = 1e-6):
    """Left and right samples next to omega must agree with v(omega)."""
    eps = 1e-7 * ch.width
    v = ch.form_factor(np.array([ch.omega - eps, ch.omega, ch.omega + eps]))
    scale = max(np.abs(v).max(), 1.0)
    jump = max(np.abs(v[0] - v[1]).max(), np.abs(v[2] - v[1]).max()) / scale
    if jump > tol:
        raise ValueError(
            f"form factor discontinuous at omega={ch.omega}: jump {jump:.3e}")


# ---------------------------------------------------------------------------
# discretization
# ---------------------------------------------------------------------------

def quadrature_rule(a: float, b: float, n: int, rule: str = "midpoint"):
    if not b > a:
        raise ValueError(f"empty interval ({a}, {b})")
    if n < 1:
        raise ValueError("need at least one node")
    if rule == "midpoint":
        h = (b - a) / n
        return a + h * (np.arange(n) + 0.5), np.full(n, h)
    if rule == "gauss":
        t, w = np.polynomial.legendre.leggauss(n)
        return 0.5 * (b - a) * t + 0.5 * (a + b), 0.5 * (b - a) * w
    raise ValueError(f"unknown quadrature rule {rule!r}")


@dataclass(frozen=True)
class DiscretizedReservoir:
    """Finite set of bosonic modes standing in for the one-particle space.

    Grid vectors store sqrt(w_i) f(x_i), so the Euclidean inner product
    approximates the L^2 one. coupling[i] is the d x d matrix V_i with
    V = sum_i V_i (x) |e_i>.
    """

    x: np.ndarray
    w: np.ndarray
    omega: np.ndarray          # Bohr frequency of the mode's channel, nan for tails
    piece: np.ndarray          # index into model.pieces
    mu: np.ndarray             # multiplicity index
    coupling: np.ndarray       # (M, d, d)
    spacing: float             # largest node gap, drives the recurrence guard
    model: ReservoirModel = field(repr=False, compare=False)

    @property
    def size(self) -> int:
        return len(self.x)

    @property
    def recurrence_time(self) -> float:
        return 2 * np.pi / self.spacing

    def check_horizon(self, horizon: float):
        """Horizon must stay below half the grid recurrence time."""
        limit = 0.5 * self.recurrence_time
        if horizon >= limit:
            need = int(np.ceil(self.model_width() * horizon / np.pi)) + 1
            raise ValueError(
                f"horizon {horizon:.3g} exceeds recurrence guard {limit:.3g}; "
                f"use at least {need} modes per channel")

    def model_width(self) -> float:
        return max(p.width for p in self.model.pieces)

    def inner(self, f: np.ndarray, g: np.ndarray) -> complex:
        return complex(np.vdot(f, g))

    def sample(self, func, omega: float | None = None, mu: int = 0) -> np.ndarray:
        """Grid vector sqrt(w) func(x) on modes of one channel (or all modes)."""
        mask = (self.mu == mu)
        if omega is not None:
            mask &= np.abs(self.omega - omega) <= 1e-12
        out = np.zeros(self.size, dtype=complex)
        out[mask] = np.sqrt(self.w[mask]) * func(self.x[mask])
        return out

    @property
    def coupling_norm(self) -> float:
        """Operator norm of V: K -> K (x) grid."""
        stacked = self.coupling.reshape(-1, self.coupling.shape[-1])
        return float(np.linalg.norm(stacked, 2)) if stacked.size else 0.0


def _build_discretization(model, xs, ws, pieces_idx, spacing):
    d = model.system.dim
    x_all, w_all, om_all, pc_all, mu_all, cp_all = [], [], [], [], [], []
    for p_idx, x, w in zip(pieces_idx, xs, ws):
        ch = model.pieces[p_idx]
        v = ch.form_factor(x)
        m = ch.multiplicity
        for i in range(len(x)):
            for mu in range(m):
                x_all.append(x[i])
                w_all.append(w[i])
                om_all.append(np.nan if ch.omega is None else ch.omega)
                pc_all.append(p_idx)
                mu_all.append(mu)
                cp_all.append(np.sqrt(w[i]) * v[i, mu::m, :])
    cp = np.array(cp_all, dtype=complex).reshape(-1, d, d)
    return DiscretizedReservoir(np.array(x_all, dtype=float), np.array(w_all),
                                np.array(om_all, dtype=float),
                                np.array(pc_all, dtype=int),
                                np.array(mu_all, dtype=int), cp, spacing, model)


def discretize_reservoir(model: ReservoirModel, modes_per_channel: int,
                         rule: str = "midpoint",
                         tail_modes: int | None = None) -> DiscretizedReservoir:
    """Per-piece quadrature grid; tails get tail_modes nodes (default: same)."""
    if modes_per_channel < 2:
        raise ValueError("modes_per_channel must be >= 2")
    tail_modes = modes_per_channel if tail_modes is None else tail_modes
    xs, ws, idx = [], [], []
    spacing = 0.0
    for p_idx, ch in enumerate(model.pieces):
        n = modes_per_channel if ch.omega is not None else tail_modes
        x, w = quadrature_rule(*ch.interval, n, rule)
        xs.append(x)
        ws.append(w)
        idx.append(p_idx)
        gaps = np.diff(np.concatenate([[ch.interval[0]], x, [ch.interval[1]]]))
        spacing = max(spacing, float(w.max()) if rule == "midpoint" else
                      float(gaps.max()))
    return _build_discretization(model, xs, ws, idx, spacing)


def aligned_reservoir(model: ReservoirModel, lam: float, du: float,
                      tail_modes: int = 8) -> DiscretizedReservoir:
    """Grid whose channel nodes are omega + lam^2 du (a + 1/2).

    Each node is the image of an asymptotic node u_a = du (a + 1/2) under the
    frequency rescaling y = omega + lam^2 u, so the scaling isometry becomes
    an exact selection matrix. Tails use a plain midpoint grid.
    """
    h = lam**2 * du
    xs, ws, idx = [], [], []
    spacing = h
    for p_idx, ch in enumerate(model.pieces):
        a, b = ch.interval
        if ch.omega is not None:
            lo = int(np.ceil((a - ch.omega) / h - 0.5))
            hi = int(np.floor((b - ch.omega) / h - 0.5))
            k = np.arange(lo, hi + 1)
            x = ch.omega + h * (k + 0.5)
            x = x[(x > a) & (x < b)]
            w = np.full(len(x), h)
        else:
            x, w = quadrature_rule(a, b, tail_modes, "midpoint")
            spacing = max(spacing, float(w[0]))
        xs.append(x)
        ws.append(w)
        idx.append(p_idx)
    return _build_discretization(model, xs, ws, idx, spacing)


# ---------------------------------------------------------------------------
# coupling decomposition
# ---------------------------------------------------------------------------

def smootherstep(u):
    """C^2 polynomial step: 1 at u <= 0, 0 at u >= 1."""
    u = np.clip(u, 0.0, 1.0)
    return 1.0 - u**3 * (10 - 15 * u + 6 * u**2)


def bump(x, center: float, radius: float):
    """C^2 bump: 1 within radius/2 of center, 0 beyond radius."""
    r = np.abs(np.asarray(x, dtype=float) - center)
    return smootherstep((r - 0.5 * radius) / (0.5 * radius))


@dataclass(frozen=True)
class CouplingTerm:
    D: np.ndarray              # |w_m><w_p| in the original basis
    phi: np.ndarray            # grid vector
    omega: float | None        # assigned Bohr frequency, None for the off-resonant piece
    m: int                     # eigenbasis indices of D
    p: int
    nu: float                  # k_m - k_p, so D(t) = e^{itK} D e^{-itK} = e^{i nu t} D
    chi: Callable = field(repr=False)
    piece_func: Callable = field(repr=False)

    def profile(self, x, mu: int = 0):
        """Continuum phi_j(x) for multiplicity component mu."""
        return self.chi(x) * self.piece_func(x, mu)


@dataclass(frozen=True)
class CouplingDecomposition:
    terms: tuple
    disc: DiscretizedReservoir = field(repr=False)
    radii: dict = field(default_factory=dict)
    h_times: np.ndarray = field(default=None, repr=False)
    h_samples: np.ndarray = field(default=None, repr=False)

    @property
    def phi_matrix(self) -> np.ndarray:
        if not self.terms:
            return np.zeros((self.disc.size, 0), dtype=complex)
        return np.stack([t.phi for t in self.terms], axis=1)

    def reassemble(self) -> np.ndarray:
        d = self.disc.coupling.shape[1]
        out = np.zeros((self.disc.size, d, d), dtype=complex)
        for t in self.terms:
            out += t.phi[:, None, None] * t.D[None]
        return out

    def reassembly_error(self) -> float:
        return float(np.abs(self.reassemble() - self.disc.coupling).max(initial=0.0))

    @property
    def d_norm(self) -> float:
        return max((np.linalg.norm(t.D, 2) for t in self.terms), default=0.0)

    def correlations(self, u) -> np.ndarray:
        """c[n, j', j] = <phi_j'| e^{-i u_n H_R} phi_j>."""
        u = np.atleast_1d(np.asarray(u, dtype=float))
        Phi = self.phi_matrix
        ph = np.exp(-1j * np.outer(u, self.disc.x))
        return np.einsum("ij,ni,ik->njk", Phi.conj(), ph, Phi, optimize=True)

    def h(self, u) -> np.ndarray:
        """h(u) = sum_{j,j'} |<phi_j'| e^{-iuH_R} phi_j>|."""
        u = np.atleast_1d(np.asarray(u, dtype=float))
        out = np.empty(len(u))
        for s in range(0, len(u), 2048):
            out[s:s + 2048] = np.abs(self.correlations(u[s:s + 2048])).sum(axis=(1, 2))
        return out

    def h_l1(self, horizon: float, step: float | None = None) -> float:
        """Finite-horizon ||h||_1 = int_{-T}^{T} h(|u|) du (h is even)."""
        if horizon <= 0 or not self.terms:
            return 0.0
        if step is None:
            xmax = max(np.abs(self.disc.x).max(), 1.0)
            step = 0.02 / xmax
        n = max(int(np.ceil(horizon / step)), 2)
        u = np.linspace(0.0, horizon, n + 1)
        return float(2 * np.trapezoid(self.h(u), u))

    def tabulate_h(self, horizon: float, n: int = 2001) -> "CouplingDecomposition":
        t = np.linspace(0.0, horizon, n)
        return CouplingDecomposition(self.terms, self.disc, self.radii, t, self.h(t))


def default_radii(model: ReservoirModel, fraction: float = 0.9) -> dict:
    return {ch.omega: fraction * min(ch.omega - ch.interval[0],
                                     ch.interval[1] - ch.omega)
            for ch in model.channels}


def decompose_coupling(model: ReservoirModel, disc: DiscretizedReservoir,
                       partition_widths: dict | None = None,
                       zero_tol: float = 0.0) -> CouplingDecomposition:
    """Split V = sum_j D_j (x) |phi_j> with rank-one D_j in the K eigenbasis.

    partition_widths maps omega to the support radius of chi_omega; chi_inf is
    the complement 1 - sum chi_omega. Each (piece of unity, matrix entry) pair
    with a nonzero grid vector gives one term.
    """
    sys = model.system
    radii = default_radii(model) if partition_widths is None else dict(partition_widths)
    centers = sorted(radii)
    for i, w1 in enumerate(centers):
        ch = model.channel_for(w1)
        if ch is None:
            raise ValueError(f"no channel for partition center {w1}")
        r = radii[w1]
        if r <= 0:
            raise ValueError(f"partition width for omega={w1} must be positive")
        if not (ch.interval[0] <= w1 - r and w1 + r <= ch.interval[1]):
            raise ValueError(
                f"partition support around omega={w1} leaves {ch.interval}")
        for w2 in centers[i + 1:]:
            if w1 + r > w2 - radii[w2]:
                raise ValueError(
                    f"partition supports of omega={w1} and omega={w2} overlap")

    chis = {w: (lambda x, w=w: bump(x, w, radii[w])) for w in centers}

    def chi_inf(x):
        return 1.0 - sum(c(x) for c in chis.values())

    W = sys.eigenvectors
    energies = sys.basis_energies
    Vt = np.einsum("am,iab,bp->imp", W.conj(), disc.coupling, W)

    def piece_func_for(m, p):
        def f(x, mu=0):
            x = np.atleast_1d(np.asarray(x, dtype=float))
            out = np.zeros(len(x), dtype=complex)
            for ch in model.pieces:
                if mu >= ch.multiplicity:
                    continue
                inside = (x > ch.interval[0]) & (x < ch.interval[1])
                if inside.any():
                    blk = ch.block(x[inside], mu)
                    out[inside] = np.einsum("a,nab,b->n", W[:, m].conj(), blk, W[:, p])
            return out
        return f

    terms = []
    labels = [(w, chis[w]) for w in centers] + [(None, chi_inf)]
    d = sys.dim
    for m in range(d):
        for p in range(d):
            entry = Vt[:, m, p]
            for w, chi in labels:
                phi = chi(disc.x) * entry
                if np.abs(phi).max(initial=0.0) <= zero_tol:
                    continue
                D = np.outer(W[:, m], W[:, p].conj())
                terms.append(CouplingTerm(D, phi, w, m, p,
                                          float(energies[m] - energies[p]),
                                          chi, piece_func_for(m, p)))
    return CouplingDecomposition(tuple(terms), disc, radii)
