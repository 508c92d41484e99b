"""Dense numerical kernels shared by the simulators and the audits.

Everything here is a pure function of its arguments.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np

__all__ = [
    "NewtonSettings",
    "NonConvergence",
    "SingularJacobian",
    "NotSquare",
    "NotSymmetric",
    "DimensionMismatch",
    "solve_newton",
    "finite_difference_jacobian",
    "spectral_radius",
    "is_positive_definite",
    "weighted_norm_sq",
    "gauss_legendre_integrate",
    "condition_number",
]

SYMMETRY_TOL = 1e-12
PD_FLOOR = 1e-12


class NonConvergence(RuntimeError):
    """Newton iteration budget exhausted before the residual met tolerance."""

    def __init__(self, iterations: int, last_residual_norm: float):
        self.iterations = iterations
        self.last_residual_norm = last_residual_norm
        super().__init__(
            f"Newton did not converge after {iterations} iterations "
            f"(residual sup-norm {last_residual_norm:.3e})"
        )


class SingularJacobian(NonConvergence):
    """Newton stopped early on a singular Jacobian; a special case of non-convergence."""

    def __init__(self, iteration: int, last_residual_norm: float = float("nan")):
        self.iteration = iteration
        self.iterations = iteration
        self.last_residual_norm = last_residual_norm
        RuntimeError.__init__(self, f"singular Jacobian at Newton iteration {iteration}")


class NotSquare(ValueError):
    pass


class NotSymmetric(ValueError):
    pass


class DimensionMismatch(ValueError):
    pass


@dataclass(frozen=True)
class NewtonSettings:
    """Stopping rule for :func:`solve_newton`.

    Parameters
    ----------
    tolerance : float
        Sup-norm bound on the residual at the returned point.
    max_iterations : int
        Number of linear solves allowed.
    damping : float
        Step length multiplier in (0, 1].
    """

    tolerance: float = 1e-12
    max_iterations: int = 50
    damping: float = 1.0

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if not 0.0 < self.damping <= 1.0:
            raise ValueError("damping must lie in (0, 1]")


def finite_difference_jacobian(fun: Callable[[np.ndarray], np.ndarray], z: np.ndarray,
                               rel_step: float = 1e-7) -> np.ndarray:
    """Central-difference Jacobian with step ``rel_step * (1 + |z_j|)``."""
    z = np.asarray(z, dtype=float)
    f0 = np.atleast_1d(fun(z))
    jac = np.empty((f0.size, z.size))
    for j in range(z.size):
        h = rel_step * (1.0 + abs(z[j]))
        zp = z.copy()
        zm = z.copy()
        zp[j] += h
        zm[j] -= h
        jac[:, j] = (np.atleast_1d(fun(zp)) - np.atleast_1d(fun(zm))) / (2.0 * h)
    return jac


def solve_newton(residual: Callable[[np.ndarray], np.ndarray],
                 jacobian: Callable[[np.ndarray], np.ndarray] | None,
                 guess,
                 settings: NewtonSettings = NewtonSettings()) -> np.ndarray:
    """Find a root of ``residual`` by Newton's method.

    ``jacobian=None`` falls back to central finite differences. The returned
    point satisfies ``max|residual(z)| <= settings.tolerance``; otherwise
    :class:`NonConvergence` is raised.
    """
    z = np.array(guess, dtype=float, copy=True).reshape(-1)
    r = np.atleast_1d(residual(z))
    norm = float(np.max(np.abs(r))) if r.size else 0.0
    if norm <= settings.tolerance:
        return z
    for it in range(1, settings.max_iterations + 1):
        jac = finite_difference_jacobian(residual, z) if jacobian is None else jacobian(z)
        jac = np.atleast_2d(jac)
        try:
            step = np.linalg.solve(jac, r)
        except np.linalg.LinAlgError as exc:
            raise SingularJacobian(it, norm) from exc
        if not np.all(np.isfinite(step)):
            raise SingularJacobian(it, norm)
        z = z - settings.damping * step
        r = np.atleast_1d(residual(z))
        norm = float(np.max(np.abs(r)))
        if not np.isfinite(norm):
            break
        if norm <= settings.tolerance:
            return z
    raise NonConvergence(settings.max_iterations, norm)


def _square(a) -> np.ndarray:
    a = np.atleast_2d(np.asarray(a, dtype=float))
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise NotSquare(f"expected a square matrix, got shape {a.shape}")
    return a


def spectral_radius(a) -> float:
    """Largest eigenvalue modulus of a square matrix."""
    a = _square(a)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(np.linalg.eigvals(a))))


def condition_number(a) -> float:
    a = _square(a)
    try:
        return float(np.linalg.cond(a))
    except np.linalg.LinAlgError:
        return float("inf")


def is_positive_definite(p) -> bool:
    """True iff ``p`` is symmetric with every eigenvalue above ``1e-12``."""
    p = _square(p)
    if np.max(np.abs(p - p.T), initial=0.0) > SYMMETRY_TOL * max(1.0, np.max(np.abs(p), initial=0.0)):
        raise NotSymmetric("matrix is not symmetric")
    eig = np.linalg.eigvalsh(0.5 * (p + p.T))
    return bool(np.all(eig > PD_FLOOR))


def weighted_norm_sq(x, p) -> float:
    """Return ``x^T P x``."""
    x = np.asarray(x, dtype=float).reshape(-1)
    p = np.atleast_2d(np.asarray(p, dtype=float))
    if p.shape != (x.size, x.size):
        raise DimensionMismatch(f"vector of size {x.size} against matrix {p.shape}")
    return float(x @ p @ x)


@lru_cache(maxsize=None)
def _leggauss01(order: int) -> tuple[np.ndarray, np.ndarray]:
    nodes, weights = np.polynomial.legendre.leggauss(order)
    return 0.5 * (nodes + 1.0), 0.5 * weights


def gauss_legendre_integrate(f: Callable[[float], float | np.ndarray], order: int = 8):
    """Integrate ``f`` over [0, 1] with an ``order``-point Gauss-Legendre rule.

    Exact for polynomials up to degree ``2*order - 1``. ``f`` may be
    vector-valued; the result then has the shape of ``f(s)``.
    """
    if not 1 <= order <= 16:
        raise ValueError("quadrature order must lie in 1..16")
    nodes, weights = _leggauss01(order)
    total = None
    for s, w in zip(nodes, weights):
        val = np.asarray(f(float(s)), dtype=float)
        if not np.all(np.isfinite(val)):
            raise FloatingPointError(f"non-finite integrand at s={s}")
        total = w * val if total is None else total + w * val
    return float(total) if total.ndim == 0 else total
