"""Spin-1/2 algebra for small registers (N <= 4 qubits).

Site 1 is the most significant bit of the computational-basis index, so
``|q1 q2 ... qN>`` sits at index ``q1*2**(N-1) + ... + qN``.  All frequencies
are angular frequencies in rad/us.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import reduce
from typing import Sequence

import numpy as np

SIGMA = {
    "x": np.array([[0, 1], [1, 0]], dtype=complex),
    "y": np.array([[0, -1j], [1j, 0]], dtype=complex),
    "z": np.array([[1, 0], [0, -1]], dtype=complex),
}
SIGMA_YY = np.kron(SIGMA["y"], SIGMA["y"])

MAX_SPINS = 4


@dataclass(frozen=True)
class TwoSpinParams:
    omega1: float
    omega2: float
    gx: float
    gy: float

    def __post_init__(self):
        if not np.all(np.isfinite([self.omega1, self.omega2, self.gx, self.gy])):
            raise ValueError("two-spin parameters must be finite")

    @property
    def g_max(self) -> float:
        return max(abs(self.gx), abs(self.gy))

    def as_chain(self) -> "ChainParams":
        return ChainParams((self.omega1, self.omega2), (self.gx,), (self.gy,))


@dataclass(frozen=True)
class ChainParams:
    """Nearest-neighbour xx/yy chain with z splittings."""

    omegas: tuple[float, ...]
    gx: tuple[float, ...]
    gy: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "omegas", tuple(float(w) for w in self.omegas))
        object.__setattr__(self, "gx", tuple(float(g) for g in self.gx))
        object.__setattr__(self, "gy", tuple(float(g) for g in self.gy))
        n = len(self.omegas)
        if n < 2:
            raise ValueError("a chain needs at least two spins")
        if len(self.gx) != n - 1 or len(self.gy) != n - 1:
            raise ValueError(
                f"chain of {n} spins needs {n - 1} couplings per axis, "
                f"got gx={len(self.gx)}, gy={len(self.gy)}"
            )
        if not np.all(np.isfinite(self.omegas + self.gx + self.gy)):
            raise ValueError("chain parameters must be finite")

    @property
    def n_spins(self) -> int:
        return len(self.omegas)

    @property
    def g_max(self) -> float:
        return max(abs(g) for g in self.gx + self.gy)

    def scaled_couplings(self, fx: Sequence[float], fy: Sequence[float]) -> "ChainParams":
        """Copy with couplings multiplied elementwise by ``fx`` and ``fy``."""
        return ChainParams(
            self.omegas,
            tuple(g * f for g, f in zip(self.gx, fx)),
            tuple(g * f for g, f in zip(self.gy, fy)),
        )


@dataclass(frozen=True)
class BlochProductState:
    thetas: tuple[float, ...]
    phis: tuple[float, ...] = field(default=())

    def __post_init__(self):
        thetas = tuple(float(t) for t in self.thetas)
        phis = tuple(float(p) for p in self.phis) or (0.0,) * len(thetas)
        if len(thetas) != len(phis):
            raise ValueError("thetas and phis must have equal length")
        object.__setattr__(self, "thetas", thetas)
        object.__setattr__(self, "phis", phis)

    @property
    def n_spins(self) -> int:
        return len(self.thetas)


def pauli(axis: str, site: int, n: int) -> np.ndarray:
    """Pauli matrix ``axis`` acting on ``site`` (1-based) of an ``n``-spin register."""
    if axis not in SIGMA:
        raise ValueError(f"unknown Pauli axis {axis!r}")
    if not 1 <= site <= n:
        raise ValueError(f"site {site} out of range for {n} spins")
    factors = [np.eye(2, dtype=complex)] * n
    factors[site - 1] = SIGMA[axis]
    return reduce(np.kron, factors)


def chain_hamiltonian(p: ChainParams, max_spins: int = MAX_SPINS) -> np.ndarray:
    n = p.n_spins
    if n > max_spins:
        raise ValueError(f"{n} spins exceeds the configured limit of {max_spins}")
    dim = 2**n
    h = np.zeros((dim, dim), dtype=complex)
    for k, w in enumerate(p.omegas, start=1):
        h += 0.5 * w * pauli("z", k, n)
    for k in range(1, n):
        h += p.gx[k - 1] * pauli("x", k, n) @ pauli("x", k + 1, n)
        h += p.gy[k - 1] * pauli("y", k, n) @ pauli("y", k + 1, n)
    return h


def two_spin_hamiltonian(p: TwoSpinParams) -> np.ndarray:
    return chain_hamiltonian(p.as_chain())


def canonical_gate(alpha: Sequence[float]) -> np.ndarray:
    """exp(-i sum_k alpha_k sigma_k x sigma_k) for k in (x, y, z).

    The three generators commute and each squares to the identity, so the
    exponential is a product of cos/sin factors.
    """
    u = np.eye(4, dtype=complex)
    for a, axis in zip(alpha, "xyz"):
        g = np.kron(SIGMA[axis], SIGMA[axis])
        u = u @ (np.cos(a) * np.eye(4) - 1j * np.sin(a) * g)
    return u


def bloch_product_state(s: BlochProductState) -> np.ndarray:
    kets = [
        np.array([np.cos(t / 2), np.exp(1j * ph) * np.sin(t / 2)])
        for t, ph in zip(s.thetas, s.phis)
    ]
    return reduce(np.kron, kets)


def _check_norm(psi: np.ndarray, tol: float = 1e-8) -> None:
    norm = np.linalg.norm(psi)
    if abs(norm - 1.0) > tol:
        raise ValueError(f"state norm {norm:.3g} deviates from 1")


def tangle_pure(psi: np.ndarray) -> float:
    """Squared concurrence |<psi| sy x sy |psi*>|^2 of a two-qubit pure state."""
    psi = np.asarray(psi, dtype=complex)
    if psi.shape != (4,):
        raise ValueError("tangle_pure needs a 4-component state")
    _check_norm(psi)
    return float(abs(psi @ SIGMA_YY @ psi) ** 2)


def _site_set(keep, n: int) -> list[int]:
    sites = sorted(set(int(s) for s in keep))
    if not sites or sites[0] < 1 or sites[-1] > n:
        raise ValueError(f"invalid site subset {keep!r} for {n} spins")
    return sites


def partial_trace_outer(a: np.ndarray, b: np.ndarray, keep, n: int) -> np.ndarray:
    """Tr_rest |a><b| restricted to sites ``keep`` (1-based)."""
    sites = _site_set(keep, n)
    axes = [s - 1 for s in sites]
    rest = [i for i in range(n) if i not in axes]
    ta = np.transpose(a.reshape((2,) * n), axes + rest).reshape(2 ** len(axes), -1)
    tb = np.transpose(b.reshape((2,) * n), axes + rest).reshape(2 ** len(axes), -1)
    return ta @ tb.conj().T


def reduced_density(psi: np.ndarray, keep) -> np.ndarray:
    psi = np.asarray(psi, dtype=complex)
    n = int(round(np.log2(psi.size)))
    if 2**n != psi.size:
        raise ValueError("state dimension is not a power of two")
    _check_norm(psi)
    return partial_trace_outer(psi, psi, keep, n)


def purity(rho: np.ndarray) -> float:
    return float(np.real(np.vdot(rho.conj().T, rho)))


def tangle_lower_bound(psi: np.ndarray, endpair: tuple[int, int] | None = None) -> float:
    """2 Tr(rho_1N^2) - Tr(rho_1^2) - Tr(rho_N^2) for the end spins of a chain."""
    psi = np.asarray(psi, dtype=complex)
    n = int(round(np.log2(psi.size)))
    first, last = endpair if endpair is not None else (1, n)
    return (
        2 * purity(reduced_density(psi, (first, last)))
        - purity(reduced_density(psi, (first,)))
        - purity(reduced_density(psi, (last,)))
    )


def concurrence(rho: np.ndarray, clip: float = 1e-9) -> float:
    """Wootters concurrence of a two-qubit density matrix."""
    rho = np.asarray(rho, dtype=complex)
    if rho.shape != (4, 4):
        raise ValueError("concurrence needs a 4x4 density matrix")
    r = rho @ SIGMA_YY @ rho.conj() @ SIGMA_YY
    lam = np.linalg.eigvals(r).real
    if lam.min() < -clip:
        raise ValueError(f"negative eigenvalue {lam.min():.3g} in Wootters product")
    lam = np.sort(np.sqrt(np.clip(lam, 0.0, None)))[::-1]
    return float(max(0.0, lam[0] - lam[1] - lam[2] - lam[3]))


def _binary_entropy(x: float) -> float:
    if x <= 0.0 or x >= 1.0:
        return 0.0
    return float(-x * np.log2(x) - (1 - x) * np.log2(1 - x))


def eof_wootters(rho: np.ndarray) -> float:
    """Entanglement of formation from the Wootters concurrence."""
    c = concurrence(rho)
    return _binary_entropy(0.5 * (1 + np.sqrt(max(0.0, 1 - c * c))))
