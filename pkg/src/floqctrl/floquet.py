"""Truncated Floquet operator for sine-series controls.

Floquet-space vectors are stored with the Fourier index as the slow index:
entry ``(nu + nu_max) * d + s`` holds system component ``s`` of harmonic
``nu``.  Reshaping to ``(2*nu_max + 1, d)`` gives the Fourier blocks.

The control of channel ``i`` is ``f_i(t) = sum_n a[i, n-1] sin(n Omega t)``, so
every pulse vanishes at ``t = 0`` and ``t = pi/Omega``.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import scipy.linalg
from scipy.integrate import solve_ivp

log = logging.getLogger(__name__)

COMPLETENESS_WARN = 1e-8
TRUNCATION_CAP = 512


class BrillouinZoneMiscount(RuntimeError):
    """The selected quasi-energy zone does not hold one mode per system state."""


class TruncationError(RuntimeError):
    pass


class IntegrationError(RuntimeError):
    pass


def default_nu_max(n_max: int) -> int:
    return max(32, 4 * n_max)


@dataclass(frozen=True)
class ControlModel:
    """Drift plus sine-series controls with fundamental frequency ``omega``.

    ``amplitudes[i, n-1]`` multiplies ``sin(n * omega * t) * controls[i]``.
    """

    drift: np.ndarray
    controls: tuple[np.ndarray, ...]
    amplitudes: np.ndarray
    omega: float

    def __post_init__(self):
        drift = np.asarray(self.drift, dtype=complex)
        controls = tuple(np.asarray(h, dtype=complex) for h in self.controls)
        amps = np.array(self.amplitudes, dtype=float, ndmin=2)
        if not controls:
            amps = amps.reshape(0, amps.shape[-1] if amps.size else 0)
        if drift.ndim != 2 or drift.shape[0] != drift.shape[1]:
            raise ValueError("drift must be a square matrix")
        if not np.allclose(drift, drift.conj().T, atol=1e-12, rtol=0):
            raise ValueError("drift is not Hermitian")
        for h in controls:
            if h.shape != drift.shape:
                raise ValueError("control operator shape differs from drift")
            if not np.allclose(h, h.conj().T, atol=1e-12, rtol=0):
                raise ValueError("control operator is not Hermitian")
        if amps.shape[0] != len(controls):
            raise ValueError(
                f"amplitude table has {amps.shape[0]} rows for {len(controls)} channels"
            )
        if not self.omega > 0:
            raise ValueError("fundamental frequency must be positive")
        object.__setattr__(self, "drift", drift)
        object.__setattr__(self, "controls", controls)
        object.__setattr__(self, "amplitudes", amps)
        object.__setattr__(self, "omega", float(self.omega))

    @classmethod
    def zero(cls, drift, controls: Sequence[np.ndarray], n_max: int, omega: float):
        return cls(drift, tuple(controls), np.zeros((len(controls), n_max)), omega)

    @property
    def dim(self) -> int:
        return self.drift.shape[0]

    @property
    def n_channels(self) -> int:
        return len(self.controls)

    @property
    def n_max(self) -> int:
        return self.amplitudes.shape[1]

    @property
    def t_final(self) -> float:
        """Pulse duration pi/Omega, where every sine component returns to zero."""
        return np.pi / self.omega

    def with_amplitudes(self, amplitudes) -> "ControlModel":
        return replace(self, amplitudes=np.asarray(amplitudes, dtype=float))

    def with_omega(self, omega: float) -> "ControlModel":
        return replace(self, omega=omega)

    def with_drift(self, drift) -> "ControlModel":
        return replace(self, drift=drift)

    def pulses(self, t) -> np.ndarray:
        """Control amplitudes f_i(t), shape ``(n_channels, len(t))``."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        n = np.arange(1, self.n_max + 1)
        return self.amplitudes @ np.sin(np.outer(n, self.omega * t))

    def hamiltonian(self, t: float) -> np.ndarray:
        f = self.pulses(t)[:, 0]
        h = self.drift.copy()
        for fi, hi in zip(f, self.controls):
            h += fi * hi
        return h


@dataclass(frozen=True)
class FloquetOperator:
    matrix: np.ndarray
    nu_max: int
    dim_sys: int
    omega: float

    @property
    def n_blocks(self) -> int:
        return 2 * self.nu_max + 1

    def block(self, nu: int, mu: int) -> np.ndarray:
        d = self.dim_sys
        i, j = nu + self.nu_max, mu + self.nu_max
        return self.matrix[i * d:(i + 1) * d, j * d:(j + 1) * d]


def _shift_matrix(n_blocks: int, m: int) -> np.ndarray:
    """Truncated raising operator pi_m: |mu> -> |mu + m>."""
    return np.eye(n_blocks, k=-m)


def fourier_block(h: np.ndarray, amplitude: float, n: int, nu_max: int) -> np.ndarray:
    """Floquet-space matrix of ``amplitude * sin(n Omega t) * h``.

    sin(x) = (e^{ix} - e^{-ix}) / 2i, so block (nu+n, nu) carries h/2i and
    block (nu-n, nu) carries -h/2i.
    """
    if n < 1:
        raise ValueError("harmonic index must be >= 1")
    if n > nu_max:
        raise TruncationError(f"harmonic {n} exceeds Fourier truncation {nu_max}")
    nb = 2 * nu_max + 1
    coupling = _shift_matrix(nb, n) - _shift_matrix(nb, -n)
    return np.kron(coupling, (amplitude / 2j) * np.asarray(h, dtype=complex))


def assemble(model: ControlModel, nu_max: int | None = None) -> FloquetOperator:
    if nu_max is None:
        nu_max = default_nu_max(model.n_max)
    if nu_max < model.n_max:
        raise TruncationError(f"nu_max={nu_max} is below n_max={model.n_max}")
    nb = 2 * nu_max + 1
    d = model.dim
    k = np.zeros((nb * d, nb * d), dtype=complex)
    for n in range(1, model.n_max + 1):
        hn = np.zeros((d, d), dtype=complex)
        for amp, h in zip(model.amplitudes[:, n - 1], model.controls):
            hn += amp * h
        if not hn.any():
            continue
        blk = hn / 2j
        for nu in range(nb - n):
            k[(nu + n) * d:(nu + n + 1) * d, nu * d:(nu + 1) * d] += blk
            k[nu * d:(nu + 1) * d, (nu + n) * d:(nu + n + 1) * d] -= blk
    for i, nu in enumerate(range(-nu_max, nu_max + 1)):
        sl = slice(i * d, (i + 1) * d)
        k[sl, sl] += model.drift + nu * model.omega * np.eye(d)
    return FloquetOperator(k, nu_max, d, model.omega)


def _fix_gauge(vecs: np.ndarray) -> np.ndarray:
    """Rotate each column so its largest-magnitude entry is real positive."""
    idx = np.argmax(np.abs(vecs), axis=0)
    lead = vecs[idx, np.arange(vecs.shape[1])]
    return vecs * (np.abs(lead) / lead)


@dataclass(frozen=True)
class FloquetEigensystem:
    """Full spectrum of a truncated Floquet operator plus the selected zone.

    ``selected[k]`` indexes the full spectrum; ``quasi_energies`` and
    ``vectors`` are the chosen representatives, one per system state.
    """

    full_energies: np.ndarray
    full_vectors: np.ndarray
    selected: np.ndarray
    nu_max: int
    dim_sys: int
    omega: float
    fallback_used: bool = field(default=False)

    @property
    def n_blocks(self) -> int:
        return 2 * self.nu_max + 1

    @property
    def nus(self) -> np.ndarray:
        return np.arange(-self.nu_max, self.nu_max + 1)

    @property
    def quasi_energies(self) -> np.ndarray:
        return self.full_energies[self.selected]

    @property
    def vectors(self) -> np.ndarray:
        return self.full_vectors[:, self.selected]

    def blocks(self, vectors: np.ndarray | None = None) -> np.ndarray:
        """Reshape Floquet vectors (columns) to ``(n_blocks, d, n_vectors)``."""
        v = self.vectors if vectors is None else vectors
        return v.reshape(self.n_blocks, self.dim_sys, -1)

    def modes(self, t: float) -> np.ndarray:
        """Periodic Floquet modes Phi_k(t) as columns of a ``d x d`` matrix."""
        phase = np.exp(1j * self.nus * self.omega * t)
        return np.einsum("n,nsk->sk", phase, self.blocks())

    def completeness_defect(self) -> float:
        phi0 = self.modes(0.0)
        return float(np.abs(phi0 @ phi0.conj().T - np.eye(self.dim_sys)).max())

    def regauged(self, phases: np.ndarray) -> "FloquetEigensystem":
        """Copy with selected eigenvectors multiplied by ``exp(i*phases)``."""
        v = self.full_vectors.copy()
        v[:, self.selected] *= np.exp(1j * np.asarray(phases))
        return replace(self, full_vectors=v)


def fourier_centroid(vectors: np.ndarray, nu_max: int, dim_sys: int) -> np.ndarray:
    w = np.abs(vectors.reshape(2 * nu_max + 1, dim_sys, -1)) ** 2
    return np.einsum("n,nk->k", np.arange(-nu_max, nu_max + 1), w.sum(axis=1))


def eigensystem(k: FloquetOperator) -> FloquetEigensystem:
    """Diagonalise ``k`` and pick one quasi-energy per state in (-Omega/2, Omega/2]."""
    energies, vectors = scipy.linalg.eigh(k.matrix, driver="evr")
    vectors = _fix_gauge(vectors)
    d, half = k.dim_sys, 0.5 * k.omega
    in_zone = np.flatnonzero((energies > -half) & (energies <= half))
    fallback = False
    if in_zone.size != d:
        # leakage from the truncation edge: take the d most central modes
        centroid = fourier_centroid(vectors, k.nu_max, d)
        in_zone = np.sort(np.argsort(np.abs(centroid), kind="stable")[:d])
        fallback = True
        log.debug("Brillouin-zone fallback selection used (nu_max=%d)", k.nu_max)
        shifts = np.round(energies[in_zone] / k.omega)
        folded = energies[in_zone] - shifts * k.omega
        if np.unique(np.round(folded / (1e-6 * k.omega))).size != d:
            raise BrillouinZoneMiscount(
                f"centroid selection does not give {d} distinct quasi-energies; "
                f"increase nu_max (currently {k.nu_max})"
            )
    return FloquetEigensystem(
        energies, vectors, in_zone, k.nu_max, d, k.omega, fallback_used=fallback
    )


def solve(model: ControlModel, nu_max: int | None = None, *, check: bool = False) -> FloquetEigensystem:
    es = eigensystem(assemble(model, nu_max))
    if check:
        defect = es.completeness_defect()
        if defect > COMPLETENESS_WARN:
            warnings.warn(
                f"Floquet completeness defect {defect:.2e} at nu_max={es.nu_max}; "
                "consider a larger truncation",
                RuntimeWarning,
                stacklevel=2,
            )
    return es


def mode_factors(es: FloquetEigensystem, t: float, order: int = 0) -> np.ndarray:
    """(i w)^order e^{i w t} with w = nu*Omega - eps_k, shape ``(d, n_blocks)``."""
    w = es.nus[None, :] * es.omega - es.quasi_energies[:, None]
    return (1j * w) ** order * np.exp(1j * w * t)


def time_derivative(es: FloquetEigensystem, t: float, order: int) -> np.ndarray:
    """d^n U / dt^n from the Floquet expansion, n >= 0."""
    if order < 0:
        raise ValueError("derivative order must be non-negative")
    f = mode_factors(es, t, order)
    psi_t = np.einsum("kn,nsk->sk", f, es.blocks())
    return psi_t @ es.modes(0.0).conj().T


def propagator(es: FloquetEigensystem, t: float) -> np.ndarray:
    """U(t) = sum_k e^{-i eps_k t} |Phi_k(t)><Phi_k(0)|."""
    return time_derivative(es, t, 0)


def ode_oracle(
    model: ControlModel,
    t: float,
    *,
    rtol: float = 1e-12,
    atol: float = 1e-13,
    t0: float = 0.0,
) -> np.ndarray:
    """Time-ordered propagator from adaptive Runge-Kutta integration."""
    d = model.dim
    if t == t0:
        return np.eye(d, dtype=complex)
    harmonics = np.arange(1, model.n_max + 1)
    amps = model.amplitudes
    stack = np.array(model.controls) if model.controls else np.zeros((0, d, d))

    def rhs(time, y):
        f = amps @ np.sin(harmonics * model.omega * time)
        h = model.drift + np.tensordot(f, stack, axes=1)
        return (-1j * h @ y.reshape(d, d)).ravel()

    sol = solve_ivp(
        rhs, (t0, t), np.eye(d, dtype=complex).ravel(), method="RK45", rtol=rtol, atol=atol
    )
    if not sol.success:
        raise IntegrationError(sol.message)
    return sol.y[:, -1].reshape(d, d)


def adaptive_truncation(
    model: ControlModel,
    tol: float = 1e-10,
    *,
    t: float | None = None,
    cap: int = TRUNCATION_CAP,
) -> int:
    """Smallest nu_max (doubling from 2*n_max) whose propagator agrees with 2*nu_max."""
    if tol <= 0:
        raise ValueError("tolerance must be positive")
    t = model.t_final if t is None else t
    nu = max(2 * model.n_max, 1)
    u = propagator(eigensystem(assemble(model, nu)), t)
    while True:
        if 2 * nu > cap:
            raise TruncationError(f"no convergence to {tol:g} below nu_max cap {cap}")
        u2 = propagator(eigensystem(assemble(model, 2 * nu)), t)
        defect = float(np.abs(u - u2).max())
        log.info("truncation nu_max=%d defect=%.3e", nu, defect)
        if defect < tol:
            return nu
        nu, u = 2 * nu, u2
