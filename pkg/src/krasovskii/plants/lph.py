"""Linear port-Hamiltonian systems and their closed-loop one-step maps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..dynamics import ContinuousDynamics, SampledSystem, Scheme
from ..numerics import DimensionMismatch, condition_number, spectral_radius
from .base import InvariantViolation

ILL_POSED_COND = 1e12


@dataclass(frozen=True)
class LinearPHS:
    """``xdot = (J - R) H x + B u + d`` with output ``y = B^T H x``."""

    J: np.ndarray
    R: np.ndarray
    H: np.ndarray
    B: np.ndarray
    d: np.ndarray | None = None

    def __post_init__(self):
        J = np.atleast_2d(np.asarray(self.J, dtype=float))
        R = np.atleast_2d(np.asarray(self.R, dtype=float))
        H = np.atleast_2d(np.asarray(self.H, dtype=float))
        B = np.asarray(self.B, dtype=float)
        n = J.shape[0]
        B = B.reshape(n, -1)
        d = np.zeros(n) if self.d is None else np.asarray(self.d, dtype=float).reshape(n)
        for name, mat in (("J", J), ("R", R), ("H", H)):
            if mat.shape != (n, n):
                raise InvariantViolation(f"{name} must be {n}x{n}")
        if np.max(np.abs(J + J.T)) > 1e-12:
            raise InvariantViolation("J must be skew-symmetric")
        for name, mat in (("R", R), ("H", H)):
            if np.max(np.abs(mat - mat.T)) > 1e-12 * max(1.0, np.max(np.abs(mat))):
                raise InvariantViolation(f"{name} must be symmetric")
            if np.min(np.linalg.eigvalsh(mat)) < -1e-12:
                raise InvariantViolation(f"{name} must be positive semidefinite")
        if np.linalg.matrix_rank(B) < B.shape[1]:
            raise InvariantViolation("B must have full column rank")
        for name, val in (("J", J), ("R", R), ("H", H), ("B", B), ("d", d)):
            object.__setattr__(self, name, val)

    @property
    def n(self) -> int:
        return self.J.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def A(self) -> np.ndarray:
        return (self.J - self.R) @ self.H

    def with_disturbance(self, d) -> "LinearPHS":
        return LinearPHS(self.J, self.R, self.H, self.B, d)


def lph_dynamics(plant: LinearPHS) -> ContinuousDynamics:
    a, b, d = plant.A, plant.B, plant.d
    c = b.T @ plant.H
    return ContinuousDynamics(
        plant.n, plant.m,
        f=lambda x, u: a @ x + b @ np.atleast_1d(u) + d,
        jac_x=lambda x, u: a,
        jac_u=lambda x, u: b,
        output=lambda x: c @ x,
        output_jac=lambda x: c,
    )


def lph_sampled(plant: LinearPHS, delta: float, scheme: Scheme = Scheme.IMPLICIT_MIDPOINT) -> SampledSystem:
    return SampledSystem(lph_dynamics(plant), delta, scheme)


def lph_step_map(plant: LinearPHS, delta: float):
    """Explicit midpoint step ``x_{k+1} = F(x_k, u_k)`` by a direct linear solve."""
    eye = np.eye(plant.n)
    lhs = eye / delta - 0.5 * plant.A
    rhs = eye / delta + 0.5 * plant.A

    def step_map(x, u):
        return np.linalg.solve(lhs, rhs @ x + plant.B @ np.atleast_1d(u) + plant.d)

    return step_map


def lph_equilibrium(plant: LinearPHS, u_star) -> np.ndarray:
    """``x*`` solving ``(J - R) H x* + B u* + d = 0``."""
    u_star = np.atleast_1d(np.asarray(u_star, dtype=float))
    return np.linalg.solve(plant.A, -(plant.B @ u_star + plant.d))


def _flag(mat: np.ndarray) -> bool:
    return condition_number(mat) < ILL_POSED_COND


def _check_gain(name, k, m):
    k = np.atleast_2d(np.asarray(k, dtype=float))
    if k.shape != (m, m):
        raise DimensionMismatch(f"{name} must be {m}x{m}, got {k.shape}")
    return k


def build_As(plant: LinearPHS, k1, k2, delta: float) -> tuple[np.ndarray, bool]:
    """Well-posedness matrix of the stabilizer loop and whether it is invertible."""
    n, m = plant.n, plant.m
    k1 = _check_gain("K1", k1, m)
    k2 = _check_gain("K2", k2, m)
    a_s = np.block([
        [np.eye(n) / delta - 0.5 * plant.A, -plant.B],
        [plant.B.T @ plant.H / (2 * delta), k1 / delta + 0.5 * k2],
    ])
    return a_s, _flag(a_s) and _flag(np.eye(n) / delta - 0.5 * plant.A)


def _consensus_blocks(plant: LinearPHS, spec, delta: float):
    n, m = plant.n, plant.m
    e, mw, k = np.asarray(spec.E), _check_gain("M", spec.M, m), _check_gain("K", spec.K, m)
    if e.shape[0] != m:
        raise DimensionMismatch("incidence matrix rows must equal the input dimension")
    bh = plant.B.T @ plant.H
    lap = mw.T @ e @ e.T @ mw
    a12 = lap @ bh / 4 + k @ bh / (2 * delta)
    return n, m, bh, lap, k, a12


def build_Ac(plant: LinearPHS, spec, delta: float) -> tuple[np.ndarray, bool]:
    """Consensus well-posedness matrix as tabulated, and its invertibility flag.

    The tabulated matrix carries ``+K/delta`` in the ``(u, rho)`` block; the
    Jacobian actually solved by the simulator is :func:`consensus_step_matrix`.
    """
    n, m, bh, _, k, a12 = _consensus_blocks(plant, spec, delta)
    eye = np.eye(m)
    a_c = np.block([
        [np.eye(n) / delta - 0.5 * plant.A, -plant.B, np.zeros((n, m))],
        [a12, eye / delta, k / delta],
        [-bh / 4, np.zeros((m, m)), eye / delta + eye / 2],
    ])
    return a_c, _flag(a_c)


def consensus_step_matrix(plant: LinearPHS, spec, delta: float) -> np.ndarray:
    """Coefficient matrix of ``(x_{k+2}, u_{k+1}, rho_{k+1})`` in the joint consensus step."""
    a_c, _ = build_Ac(plant, spec, delta)
    n, m = plant.n, plant.m
    a_c[n:n + m, n + m:] *= -1.0
    return a_c


def stabilizer_closed_loop_map(plant: LinearPHS, k1, k2, u_star, delta: float):
    """Affine one-step map ``zeta_{k+1} = Phi zeta_k + c`` on ``zeta_k = (x_k, x_{k+1}, u_k)``."""
    n, m = plant.n, plant.m
    a_s, _ = build_As(plant, k1, k2, delta)
    k1 = _check_gain("K1", k1, m)
    k2 = _check_gain("K2", k2, m)
    u_star = np.atleast_1d(np.asarray(u_star, dtype=float))
    bh = plant.B.T @ plant.H
    # rhs of A_s [x2; u1] = N zeta + c0
    N = np.zeros((n + m, 2 * n + m))
    N[:n, n:2 * n] = np.eye(n) / delta + 0.5 * plant.A
    N[n:, :n] = bh / (2 * delta)
    N[n:, 2 * n:] = k1 / delta - 0.5 * k2
    c0 = np.concatenate([plant.d, k2 @ u_star])
    sol_n = np.linalg.solve(a_s, N)
    sol_c = np.linalg.solve(a_s, c0)
    phi = np.zeros((2 * n + m, 2 * n + m))
    phi[:n, n:2 * n] = np.eye(n)
    phi[n:, :] = sol_n
    c = np.concatenate([np.zeros(n), sol_c])
    return phi, c


def consensus_closed_loop_map(plant: LinearPHS, spec, delta: float):
    """Affine one-step map on ``zeta_k = (x_k, x_{k+1}, u_k, rho_k)`` for the consensus loop."""
    n, m, bh, lap, k, _ = _consensus_blocks(plant, spec, delta)
    a = consensus_step_matrix(plant, spec, delta)
    dim = 2 * n + 2 * m
    eye = np.eye(m)
    N = np.zeros((n + 2 * m, dim))
    N[:n, n:2 * n] = np.eye(n) / delta + 0.5 * plant.A
    # u row: u1/delta + L (x0 + 2 x1 + x2)/4 + K (x2 - x0)/(2 delta) - K (rho1 - rho0)/delta = u0/delta
    N[n:n + m, :n] = -lap @ bh / 4 + k @ bh / (2 * delta)
    N[n:n + m, n:2 * n] = -lap @ bh / 2
    N[n:n + m, 2 * n:2 * n + m] = eye / delta
    N[n:n + m, 2 * n + m:] = -k / delta
    # rho row: (rho1 - rho0)/delta - (x0 + 2 x1 + x2) B^T H / 4 + (rho0 + rho1)/2 = 0
    N[n + m:, :n] = bh / 4
    N[n + m:, n:2 * n] = bh / 2
    N[n + m:, 2 * n + m:] = eye / delta - eye / 2
    c0 = np.concatenate([plant.d, np.zeros(2 * m)])
    phi = np.zeros((dim, dim))
    phi[:n, n:2 * n] = np.eye(n)
    phi[n:, :] = np.linalg.solve(a, N)
    c = np.concatenate([np.zeros(n), np.linalg.solve(a, c0)])
    return phi, c


def affine_fixed_point(phi: np.ndarray, c: np.ndarray) -> np.ndarray:
    return np.linalg.solve(np.eye(len(c)) - phi, c)


def random_lph(rng: np.random.Generator, n: int, m: int, r_floor: float = 0.5,
               h_floor: float = 0.5) -> LinearPHS:
    """Well-conditioned random instance with ``H, R`` positive definite."""
    if m > n:
        raise ValueError("need m <= n")
    a = rng.standard_normal((n, n))
    J = 0.5 * (a - a.T)
    q = rng.standard_normal((n, n)) / np.sqrt(n)
    R = q @ q.T + r_floor * np.eye(n)
    g = rng.standard_normal((n, n)) / np.sqrt(n)
    H = g @ g.T + h_floor * np.eye(n)
    H = H / np.max(np.linalg.eigvalsh(H))
    H = H + (h_floor - min(h_floor, np.min(np.linalg.eigvalsh(H)))) * np.eye(n)
    B, _ = np.linalg.qr(rng.standard_normal((n, m)))
    return LinearPHS(J, 0.5 * (R + R.T), 0.5 * (H + H.T), B)


def consensus_invariant(plant: LinearPHS, spec) -> np.ndarray:
    """Row vector ``l`` with ``l zeta_{k+1} = l zeta_k`` for the consensus loop.

    ``l zeta = w^T (u_k + K (y_k - rho_k))`` with ``w = M^{-1} 1`` and
    ``y_k = B^T H (x_k + x_{k+1}) / 2``; the consensus value is fixed by it.
    """
    n, m = plant.n, plant.m
    w = np.linalg.solve(np.asarray(spec.M, dtype=float), np.ones(m))
    bh = plant.B.T @ plant.H
    wk = w @ np.asarray(spec.K, dtype=float)
    return np.concatenate([0.5 * wk @ bh, 0.5 * wk @ bh, w, -wk])


def consensus_spectral_radius(plant: LinearPHS, spec, delta: float) -> float:
    """Spectral radius of the consensus map restricted to the kernel of :func:`consensus_invariant`."""
    phi, _ = consensus_closed_loop_map(plant, spec, delta)
    ell = consensus_invariant(plant, spec)
    q = np.linalg.svd(ell[None, :])[2][1:].T  # orthonormal basis of ker l, which phi leaves invariant
    return spectral_radius(q.T @ phi @ q)


def consensus_equilibrium(plant: LinearPHS, spec, delta: float, zeta0) -> np.ndarray:
    """Fixed point of the consensus map on the level set of the invariant through ``zeta0``."""
    phi, c = consensus_closed_loop_map(plant, spec, delta)
    ell = consensus_invariant(plant, spec)
    lhs = np.vstack([np.eye(len(c)) - phi, ell[None, :]])
    rhs = np.concatenate([c, [ell @ zeta0]])
    return np.linalg.lstsq(lhs, rhs, rcond=None)[0]


def lph_shifted_gradient(plant: LinearPHS, delta: float, u_star):
    """Analytic ``u``-gradient of ``S_hat(F(x, u), u*)`` for ``S_hat(x, u) = |F(x, u) - x|^2_H / (2 delta^2)``."""
    n = plant.n
    eye = np.eye(n)
    p = np.linalg.inv(eye / delta - 0.5 * plant.A)
    rhs = eye / delta + 0.5 * plant.A
    u_star = np.atleast_1d(np.asarray(u_star, dtype=float))
    dg = (p @ rhs - eye) @ p @ plant.B

    def grad(x, u):
        x1 = p @ (rhs @ x + plant.B @ np.atleast_1d(u) + plant.d)
        x2 = p @ (rhs @ x1 + plant.B @ u_star + plant.d)
        return dg.T @ plant.H @ (x2 - x1) / delta**2

    return grad


def lph_instances(seed: int, count: int, n_max: int = 8, m_max: int = 3, m_min: int = 1):
    """Deterministic batch of random instances with ``m_min <= m <= n <= n_max``."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        m = int(rng.integers(m_min, m_max + 1))
        n = int(rng.integers(max(m, 1), n_max + 1))
        out.append(random_lph(rng, n, m))
    return out
