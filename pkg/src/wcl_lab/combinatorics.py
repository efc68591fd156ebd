"""Wick pairings, partial pairings and quadrature on ordered simplices.

A pairing of {1..2n} is stored as sigma = (sigma(1), ..., sigma(2n)) with
sigma(2p-1) < sigma(2p) and sigma(2p-1) < sigma(2p+1): slot sigma(2p-1) is the
p-th creator in time order and sigma(2p) the annihilator it contracts with.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from itertools import combinations, product
from math import factorial

import numpy as np
from scipy.special import roots_jacobi

MAX_PAIRING_N = 7
MAX_PARTIAL_N = 10
MAX_SIMPLEX_DIM = 6


def double_factorial(k: int) -> int:
    out = 1
    while k > 1:
        out *= k
        k -= 2
    return out


@lru_cache(maxsize=None)
def involution_number(n: int) -> int:
    """I(n) = I(n-1) + (n-1) I(n-2), I(0) = I(1) = 1."""
    if n < 2:
        return 1
    return involution_number(n - 1) + (n - 1) * involution_number(n - 2)


def _valid(sigma, n_slots) -> bool:
    k = len(sigma)
    if k % 2 or len(set(sigma)) != k:
        return False
    if any(s < 1 or s > n_slots for s in sigma):
        return False
    for p in range(0, k, 2):
        if not sigma[p] < sigma[p + 1]:
            return False
        if p + 2 < k and not sigma[p] < sigma[p + 2]:
            return False
    return True


@dataclass(frozen=True)
class Pairing:
    n: int
    sigma: tuple

    def __post_init__(self):
        if len(self.sigma) != 2 * self.n or not _valid(self.sigma, 2 * self.n):
            raise ValueError(f"not a pairing of 1..{2 * self.n}: {self.sigma}")

    @property
    def pairs(self) -> list:
        """(creator slot, annihilator slot) in order of creation."""
        return [(self.sigma[2 * p], self.sigma[2 * p + 1]) for p in range(self.n)]

    def signs(self) -> tuple:
        """epsilon per slot 1..2n: '+' for creators, '-' for annihilators."""
        out = [""] * (2 * self.n)
        for a, b in self.pairs:
            out[a - 1], out[b - 1] = "+", "-"
        return tuple(out)

    def brackets(self) -> str:
        return "".join(f"({a},{b})" for a, b in self.pairs)


def is_time_consecutive(p: Pairing) -> bool:
    return p.sigma == tuple(range(1, 2 * p.n + 1))


def _matchings(items: tuple):
    if not items:
        yield ()
        return
    first, rest = items[0], items[1:]
    for i, partner in enumerate(rest):
        for tail in _matchings(rest[:i] + rest[i + 1:]):
            yield (first, partner) + tail


def enumerate_pairings(n: int) -> list:
    """All of Pair(2n) in lexicographic order of sigma; (2n-1)!! of them."""
    if n < 0 or n > MAX_PAIRING_N:
        raise ValueError(f"n = {n} outside 0..{MAX_PAIRING_N}")
    out = [Pairing(n, m) for m in _matchings(tuple(range(1, 2 * n + 1)))]
    return sorted(out, key=lambda p: p.sigma)


@dataclass(frozen=True)
class PartialPairing:
    n: int
    sigma: tuple

    def __post_init__(self):
        if not _valid(self.sigma, self.n):
            raise ValueError(f"not a partial pairing inside 1..{self.n}: {self.sigma}")

    @property
    def p(self) -> int:
        return len(self.sigma) // 2

    @property
    def range(self) -> frozenset:
        return frozenset(self.sigma)

    @property
    def unpaired(self) -> tuple:
        return tuple(i for i in range(1, self.n + 1) if i not in self.range)

    @property
    def pairs(self) -> list:
        return [(self.sigma[2 * i], self.sigma[2 * i + 1]) for i in range(self.p)]

    def compatible_signs(self) -> dict:
        """Signs on paired slots for which the contraction is nonzero.

        With the later operator standing to the left, a pair contributes only
        when the earlier slot sigma(2i-1) is a creator (+) and the later slot
        sigma(2i) an annihilator (-).
        """
        out = {}
        for a, b in self.pairs:
            out[a], out[b] = "+", "-"
        return out

    def is_compatible(self, eps) -> bool:
        return all(eps[k - 1] == s for k, s in self.compatible_signs().items())


def enumerate_partial_pairings(n: int) -> list:
    """All pairings inside {1..n}; their number is the involution number I(n)."""
    if n < 0 or n > MAX_PARTIAL_N:
        raise ValueError(f"n = {n} outside 0..{MAX_PARTIAL_N}")
    out = []
    for k in range(0, n // 2 + 1):
        for subset in combinations(range(1, n + 1), 2 * k):
            for m in _matchings(subset):
                out.append(PartialPairing(n, m))
    return sorted(out, key=lambda p: (p.p, p.sigma))


def brute_force_partial_count(n: int) -> int:
    """Count injections {1..2p} -> {1..n} meeting the constraints by direct scan."""
    total = 0
    for p in range(0, n // 2 + 1):
        for sigma in product(range(1, n + 1), repeat=2 * p):
            total += _valid(sigma, n)
    return total


# ---------------------------------------------------------------------------
# simplex quadrature
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SimplexRule:
    n: int
    a: float
    b: float
    nodes: np.ndarray       # (K, n), each row a < t_1 < ... < t_n < b
    weights: np.ndarray     # (K,)

    def integrate(self, f) -> complex:
        return np.tensordot(self.weights, f(self.nodes), axes=(0, 0))

    @property
    def volume(self) -> float:
        return (self.b - self.a) ** self.n / factorial(self.n)


def simplex_quadrature(n: int, a: float, b: float, points_per_axis: int) -> SimplexRule:
    """Conical product rule on {a < t_1 < ... < t_n < b}.

    Collapsed coordinates t_n = a + (b - a) u_n, t_k = a + (t_{k+1} - a) u_k
    leave a Jacobian (b - a)^n prod_k u_k^(k-1); axis k uses the Gauss-Jacobi
    rule for the weight u^(k-1) on [0, 1], so constants are exact at any size.
    """
    if not b > a:
        raise ValueError(f"degenerate interval [{a}, {b}]")
    if n < 0 or n > MAX_SIMPLEX_DIM:
        raise ValueError(f"simplex dimension {n} outside 0..{MAX_SIMPLEX_DIM}")
    if n == 0:
        return SimplexRule(0, a, b, np.zeros((1, 0)), np.ones(1))
    axes = []
    for k in range(n):
        x, w = roots_jacobi(points_per_axis, 0.0, float(k))
        axes.append((0.5 * (x + 1), w / 2.0 ** (k + 1)))
    U = np.stack([x.ravel() for x in np.meshgrid(*[u for u, _ in axes], indexing="ij")],
                 axis=1)
    W = np.prod(np.stack([x.ravel() for x in np.meshgrid(*[w for _, w in axes],
                                                         indexing="ij")], axis=1), axis=1)
    T = np.empty_like(U)
    T[:, n - 1] = a + (b - a) * U[:, n - 1]
    for k in range(n - 2, -1, -1):
        T[:, k] = a + (T[:, k + 1] - a) * U[:, k]
    return SimplexRule(n, a, b, T, W * (b - a) ** n)
