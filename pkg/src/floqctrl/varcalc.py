"""Parameter derivatives of quasi-energies, Floquet vectors and the propagator.

The Floquet operator is linear in every amplitude and in Omega, so each
parameter direction has a fixed generator ``K' = dK/dtheta`` and the
derivatives follow from non-degenerate perturbation theory around the current
operator.  First-order eigenvector corrections use intermediate normalisation
(``<chi_k|dchi_k> = 0``); the second-order correction carries the
``-1/2 <dchi|dchi> chi`` normalisation term.

Propagator derivatives are taken at fixed time.  With
``w_{k,nu} = nu*Omega - eps_k`` the n-th time derivative reads

    d^n U/dt^n (t) = sum_k Psi^(n)_k(t) Psi_k(0)^dagger,
    Psi^(n)_k(t)   = sum_nu (i w)^n e^{i w t} chi_{k,nu},

and every parameter derivative is obtained by differentiating ``w`` (through
``eps_k`` and Omega) and ``chi_k`` inside this sum.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import comb, factorial
from typing import Callable, Sequence

import numpy as np

from .floquet import ControlModel, FloquetEigensystem

DEGENERACY_REL = 1e-8


class DegenerateMode(RuntimeError):
    """A selected quasi-energy is (nearly) degenerate with another eigenvalue."""


@dataclass(frozen=True)
class Direction:
    """Floquet-space generator ``sum_m B_m (x) pi_m + omega * 1 (x) N``.

    ``fourier`` maps a Fourier shift ``m`` to the system operator placed on
    blocks ``(nu + m, nu)``.
    """

    fourier: tuple[tuple[int, np.ndarray], ...] = ()
    omega: float = 0.0
    label: str = ""

    def __add__(self, other: "Direction") -> "Direction":
        return Direction(self.fourier + other.fourier, self.omega + other.omega, "")

    def scaled(self, c: float) -> "Direction":
        return Direction(tuple((m, c * b) for m, b in self.fourier), c * self.omega, self.label)

    def apply(self, x: np.ndarray, nu_max: int, dim: int) -> np.ndarray:
        """Action on Floquet vectors stored as columns of ``x``."""
        nb = 2 * nu_max + 1
        xb = x.reshape(nb, dim, -1)
        out = np.zeros_like(xb)
        for m, b in self.fourier:
            if m >= 0:
                out[m:] += np.einsum("st,ntk->nsk", b, xb[:nb - m])
            else:
                out[:nb + m] += np.einsum("st,ntk->nsk", b, xb[-m:])
        if self.omega:
            nus = np.arange(-nu_max, nu_max + 1)
            out += self.omega * nus[:, None, None] * xb
        return out.reshape(x.shape)

    def matrix(self, nu_max: int, dim: int) -> np.ndarray:
        nb = 2 * nu_max + 1
        k = np.zeros((nb * dim, nb * dim), dtype=complex)
        for m, b in self.fourier:
            k += np.kron(np.eye(nb, k=-m), b)
        if self.omega:
            k += self.omega * np.kron(np.diag(np.arange(-nu_max, nu_max + 1)), np.eye(dim))
        return k


def amplitude_direction(model: ControlModel, channel: int, harmonic: int) -> Direction:
    h = model.controls[channel]
    return Direction(
        ((harmonic, h / 2j), (-harmonic, -h / 2j)), 0.0, f"a[{channel},{harmonic}]"
    )


def omega_direction() -> Direction:
    return Direction((), 1.0, "omega")


def parameter_directions(model: ControlModel, include_omega: bool = False) -> list[Direction]:
    """Amplitude generators in row-major ``(channel, harmonic)`` order, then Omega."""
    dirs = [
        amplitude_direction(model, i, n)
        for i in range(model.n_channels)
        for n in range(1, model.n_max + 1)
    ]
    if include_omega:
        dirs.append(omega_direction())
    return dirs


def combine(directions: Sequence[Direction], b: Sequence[float]) -> Direction:
    out = Direction()
    for d, c in zip(directions, b):
        if c:
            out = out + d.scaled(float(c))
    return out


def degeneracy_threshold(es: FloquetEigensystem) -> float:
    return DEGENERACY_REL * es.omega


def _inverse_weights(es: FloquetEigensystem, delta: float, power: int = 1) -> np.ndarray:
    """1/(eps_l - eps_k)^power over the full spectrum, zero where |gap| < delta."""
    gaps = es.full_energies[:, None] - es.quasi_energies[None, :]
    w = np.zeros_like(gaps)
    keep = np.abs(gaps) >= delta
    w[keep] = 1.0 / gaps[keep] ** power
    return w


def check_gaps(es: FloquetEigensystem, delta: float | None = None) -> None:
    delta = degeneracy_threshold(es) if delta is None else delta
    gaps = np.abs(es.full_energies[:, None] - es.quasi_energies[None, :])
    gaps[es.selected, np.arange(es.dim_sys)] = np.inf
    k = int(np.argmin(gaps.min(axis=0)))
    if gaps[:, k].min() < delta:
        raise DegenerateMode(
            f"mode {k} (eps={es.quasi_energies[k]:.6g}) has a partner within "
            f"{gaps[:, k].min():.2e} < {delta:.2e}"
        )


@dataclass(frozen=True)
class FirstOrder:
    """First-order data for a list of directions.

    ``coeff[p, l, k]`` expands the eigenvector derivative in the full
    eigenbasis: ``dchi_k/dtheta_p = sum_l V[:, l] coeff[p, l, k]``.
    """

    directions: tuple[Direction, ...]
    matrix_elements: np.ndarray  # (P, D, d): <chi_l|K'_p|chi_k>
    d_eps: np.ndarray  # (P, d)
    coeff: np.ndarray  # (P, D, d)
    weights: np.ndarray  # (D, d): 1/(eps_l - eps_k), masked

    def d_chi(self, es: FloquetEigensystem, p: int) -> np.ndarray:
        return es.full_vectors @ self.coeff[p]


def first_order(
    es: FloquetEigensystem,
    directions: Sequence[Direction],
    *,
    delta: float | None = None,
    check: bool = True,
) -> FirstOrder:
    delta = degeneracy_threshold(es) if delta is None else delta
    if check:
        check_gaps(es, delta)
    chi = es.vectors
    kchi = np.stack([d.apply(chi, es.nu_max, es.dim_sys) for d in directions])
    mel = np.einsum("al,pak->plk", es.full_vectors.conj(), kchi, optimize=True)
    d_eps = np.einsum("pkk->pk", mel[:, es.selected, :]).real
    w = _inverse_weights(es, delta)
    return FirstOrder(tuple(directions), mel, d_eps, -mel * w[None], w)


def quasi_energy_gradient(es: FloquetEigensystem, direction: Direction) -> np.ndarray:
    """d eps_k / d theta = <chi_k|K'|chi_k> for every selected mode."""
    kchi = direction.apply(es.vectors, es.nu_max, es.dim_sys)
    return np.einsum("ak,ak->k", es.vectors.conj(), kchi).real


def pseudo_inverse_apply(
    es: FloquetEigensystem,
    k: int,
    v: np.ndarray,
    power: int = 1,
    *,
    delta: float | None = None,
) -> np.ndarray:
    """Apply (K0 - eps_k)^{-power} restricted to eigenvalues further than delta."""
    if power not in (1, 2):
        raise ValueError("power must be 1 or 2")
    delta = degeneracy_threshold(es) if delta is None else delta
    gaps = es.full_energies - es.quasi_energies[k]
    w = np.zeros_like(gaps)
    keep = np.abs(gaps) >= delta
    w[keep] = 1.0 / gaps[keep] ** power
    return es.full_vectors @ (w * (es.full_vectors.conj().T @ v))


def eigvec_gradient(es: FloquetEigensystem, direction: Direction, k: int) -> np.ndarray:
    """d chi_k = -I_k T_k chi_k in intermediate normalisation."""
    fo = first_order(es, [direction])
    return fo.d_chi(es, 0)[:, k]


def _second_order(
    es: FloquetEigensystem,
    fo: FirstOrder,
    p: int,
    q: int,
    chi_p: np.ndarray,
    chi_q: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Mixed second derivatives (eps_pq, chi_pq) for all selected modes."""
    nu, d = es.nu_max, es.dim_sys
    dir_p, dir_q = fo.directions[p], fo.directions[q]
    chi = es.vectors
    # T_p chi_q = (K'_p - eps_p) chi_q, and its mirror
    t_p_chi_q = dir_p.apply(chi_q, nu, d) - chi_q * fo.d_eps[p][None, :]
    t_q_chi_p = dir_q.apply(chi_p, nu, d) - chi_p * fo.d_eps[q][None, :]
    eps_pq = np.real(
        np.einsum("ak,ak->k", chi.conj(), t_p_chi_q) + np.einsum("ak,ak->k", chi.conj(), t_q_chi_p)
    )
    proj = es.full_vectors.conj().T @ (t_p_chi_q + t_q_chi_p)
    overlap = np.real(np.einsum("ak,ak->k", chi_p.conj(), chi_q))
    chi_pq = -es.full_vectors @ (fo.weights * proj) - overlap[None, :] * chi
    return eps_pq, chi_pq


def second_derivatives(
    es: FloquetEigensystem, dir1: Direction, dir2: Direction, k: int
) -> tuple[float, np.ndarray]:
    """(d^2 eps_k, d^2 chi_k) along the pair ``dir1, dir2``."""
    fo = first_order(es, [dir1, dir2])
    eps, chi = _second_order(es, fo, 0, 1, fo.d_chi(es, 0), fo.d_chi(es, 1))
    return float(eps[k]), chi[:, k]


def _omega_derivative_factors(
    es: FloquetEigensystem, t: float, order: int, m: int
) -> np.ndarray:
    """m-th derivative of (i w)^order e^{i w t} with respect to w, shape (d, n_blocks)."""
    w = es.nus[None, :] * es.omega - es.quasi_energies[:, None]
    iw = 1j * w
    acc = np.zeros_like(iw)
    for j in range(min(m, order) + 1):
        acc = acc + comb(m, j) * (factorial(order) // factorial(order - j)) * iw ** (order - j) * t ** (m - j)
    return (1j) ** m * acc * np.exp(1j * w * t)


@dataclass
class DerivativeBundle:
    """Propagator jets at requested ``(order, time)`` points.

    ``values[(n, t)]`` is d^nU/dt^n, ``grads[(n, t)][p]`` its derivative along
    direction ``p`` at fixed time.
    """

    labels: list[str]
    values: dict = field(default_factory=dict)
    grads: dict = field(default_factory=dict)

    @property
    def dU(self) -> dict:
        return {key: g for key, g in self.grads.items() if key[0] == 0}


def propagator_gradient(
    es: FloquetEigensystem,
    fo: FirstOrder,
    requests: Sequence[tuple[int, float]],
) -> DerivativeBundle:
    blocks = es.blocks()  # (nb, d, d)
    vfull = es.blocks(es.full_vectors)  # (nb, d, D)
    psi0 = blocks.sum(axis=0)
    g0 = vfull.sum(axis=0)
    d_psi0 = np.einsum("sl,plk->psk", g0, fo.coeff, optimize=True)
    omega_coef = np.array([d.omega for d in fo.directions])
    bundle = DerivativeBundle([d.label for d in fo.directions])
    for order, t in requests:
        f = _omega_derivative_factors(es, t, order, 0)
        f1 = _omega_derivative_factors(es, t, order, 1)
        psi = np.einsum("kn,nsk->sk", f, blocks)
        gk = np.einsum("kn,nsl->ksl", f, vfull, optimize=True)
        d_psi = np.einsum("ksl,plk->psk", gk, fo.coeff, optimize=True)
        # explicit dependence of w = nu*Omega - eps_k
        dw = omega_coef[:, None, None] * es.nus[None, None, :] - fo.d_eps[:, :, None]
        d_psi += np.einsum("pkn,kn,nsk->psk", dw, f1, blocks, optimize=True)
        bundle.values[(order, t)] = psi @ psi0.conj().T
        bundle.grads[(order, t)] = d_psi @ psi0.conj().T + psi[None] @ np.conj(
            np.transpose(d_psi0, (0, 2, 1))
        )
    return bundle


def directional_second(
    es: FloquetEigensystem,
    direction: Direction,
    requests: Sequence[tuple[int, float]],
) -> dict:
    """(U^(n), dU^(n), d^2U^(n)) along one direction for each request."""
    fo = first_order(es, [direction])
    chi_b = fo.d_chi(es, 0)
    eps_bb, chi_bb = _second_order(es, fo, 0, 0, chi_b, chi_b)
    return _second_jets(es, fo, requests, (0, chi_b), (0, chi_b), eps_bb, chi_bb)


def mixed_second(
    es: FloquetEigensystem,
    fo: FirstOrder,
    p: int,
    q: int,
    requests: Sequence[tuple[int, float]],
) -> dict:
    chi_p, chi_q = fo.d_chi(es, p), fo.d_chi(es, q)
    eps_pq, chi_pq = _second_order(es, fo, p, q, chi_p, chi_q)
    return _second_jets(es, fo, requests, (p, chi_p), (q, chi_q), eps_pq, chi_pq)


def _second_jets(es, fo, requests, first, second, eps_pq, chi_pq) -> dict:
    (p, chi_p), (q, chi_q) = first, second
    nb, d = es.n_blocks, es.dim_sys
    blocks = es.blocks()
    bp, bq, bpq = (x.reshape(nb, d, d) for x in (chi_p, chi_q, chi_pq))
    nus = es.nus[None, :]
    w_p = fo.directions[p].omega * nus - fo.d_eps[p][:, None]
    w_q = fo.directions[q].omega * nus - fo.d_eps[q][:, None]
    w_pq = -np.broadcast_to(eps_pq[:, None], w_p.shape)

    def psi(f, b):
        return np.einsum("kn,nsk->sk", f, b)

    s0 = blocks.sum(axis=0)
    s0p, s0q, s0pq = bp.sum(axis=0), bq.sum(axis=0), bpq.sum(axis=0)
    out = {}
    for order, t in requests:
        f0, f1, f2 = (_omega_derivative_factors(es, t, order, m) for m in range(3))
        st = psi(f0, blocks)
        stp = psi(f1 * w_p, blocks) + psi(f0, bp)
        stq = psi(f1 * w_q, blocks) + psi(f0, bq)
        stpq = (
            psi(f2 * w_p * w_q + f1 * w_pq, blocks)
            + psi(f1 * w_p, bq)
            + psi(f1 * w_q, bp)
            + psi(f0, bpq)
        )
        h = lambda x: x.conj().T  # noqa: E731
        u = st @ h(s0)
        up = stp @ h(s0) + st @ h(s0p)
        uq = stq @ h(s0) + st @ h(s0q)
        upq = stpq @ h(s0) + stp @ h(s0q) + stq @ h(s0p) + st @ h(s0pq)
        out[(order, t)] = (u, up, uq, upq)
    return out


def total_omega_derivative(es: FloquetEigensystem) -> np.ndarray:
    """dU(pi/Omega)/dOmega with the pulse duration locked to pi/Omega."""
    t_f = np.pi / es.omega
    fo = first_order(es, [omega_direction()])
    b = propagator_gradient(es, fo, [(0, t_f), (1, t_f)])
    return b.grads[(0, t_f)][0] + b.values[(1, t_f)] * (-np.pi / es.omega**2)


def directional_curvature(
    es: FloquetEigensystem,
    direction: Direction,
    requests: Sequence[tuple[int, float]],
    second_order: Callable[[dict], float],
) -> float:
    """Second derivative of a downstream scalar along ``direction``.

    ``second_order`` receives ``{request: (U, dU, dU, d2U)}`` and returns the
    objective's second directional derivative.
    """
    return float(second_order(directional_second(es, direction, requests)))
