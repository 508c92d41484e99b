"""Storage functions and trajectory-wise dissipation audits.

Every audit walks a simulated trajectory and evaluates, step by step, the
left-hand side minus the right-hand side of a dissipation inequality. A
step is violated when that residual exceeds ``tolerance * (1 + scale)``,
``scale`` being the largest magnitude among the terms involved.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .dynamics import Scheme, Trajectory
from .numerics import finite_difference_jacobian, gauss_legendre_integrate, is_positive_definite

AUDIT_TOL = 1e-9


class WindowTooShort(ValueError):
    pass


class MismatchedSystems(ValueError):
    pass


class NonpositiveCharge(ValueError):
    pass


class Window:
    """Read-only view of a trajectory around step ``k``.

    Gives ``x_k, x_{k+1}, x_{k+2}``, ``u_k, u_{k+1}``, ``y_k, y_{k+1}`` and the
    difference/shift combinations used in the dissipation inequalities.
    Entries beyond the end of the trajectory are ``None``.
    """

    __slots__ = ("traj", "k")

    def __init__(self, traj: Trajectory, k: int):
        self.traj = traj
        self.k = k

    def _x(self, j):
        i = self.k + j
        return self.traj.states[i] if i < len(self.traj.states) else None

    def _u(self, j):
        i = self.k + j
        return self.traj.inputs[i] if i < self.traj.n_steps else None

    def _y(self, j):
        i = self.k + j
        if self.traj.outputs is None or i >= self.traj.n_steps:
            return None
        return self.traj.outputs[i]

    delta = property(lambda self: self.traj.delta)
    x0 = property(lambda self: self._x(0))
    x1 = property(lambda self: self._x(1))
    x2 = property(lambda self: self._x(2))
    u0 = property(lambda self: self._u(0))
    u1 = property(lambda self: self._u(1))
    y0 = property(lambda self: self._y(0))
    y1 = property(lambda self: self._y(1))

    @property
    def dx(self):
        return (self.x1 - self.x0) / self.delta

    @property
    def sx(self):
        if self.traj.scheme is Scheme.FORWARD_EULER:
            return self.x0
        return 0.5 * (self.x0 + self.x1)

    @property
    def dsx(self):
        if self.traj.scheme is Scheme.FORWARD_EULER:
            return self.dx
        return (self.x2 - self.x0) / (2.0 * self.delta)

    @property
    def du(self):
        return (self.u1 - self.u0) / self.delta

    @property
    def dy(self):
        return (self.y1 - self.y0) / self.delta


@dataclass(frozen=True)
class StorageFunction:
    """Scalar storage evaluated on a trajectory window (uses ``x_k, x_{k+1}, u_k``)."""

    fn: Callable[[Window], float]
    name: str = "custom"

    def __call__(self, win: Window) -> float:
        return float(self.fn(win))


def krasovskii_quadratic(weight) -> StorageFunction:
    """``S_K = |Delta x_k|^2_W / 2``."""
    w = np.atleast_2d(np.asarray(weight, dtype=float))
    return StorageFunction(lambda win: 0.5 * win.dx @ w @ win.dx, "krasovskii_quadratic")


def shifted_quadratic(u_star, k2) -> Callable[[np.ndarray], float]:
    """``S_u(u) = |u - u*|^2_{K2} / 2``."""
    u_star = np.atleast_1d(np.asarray(u_star, dtype=float))
    k2 = np.atleast_2d(np.asarray(k2, dtype=float))

    def s_u(u):
        e = np.asarray(u, dtype=float) - u_star
        return 0.5 * float(e @ k2 @ e)

    return s_u


def consensus_quadratic(e, m, k) -> Callable[[np.ndarray, np.ndarray], float]:
    """``S_y(y, rho) = (|E^T M y|^2 + |y - rho|^2_K) / 2``."""
    e = np.atleast_2d(np.asarray(e, dtype=float))
    m = np.atleast_2d(np.asarray(m, dtype=float))
    k = np.atleast_2d(np.asarray(k, dtype=float))

    def s_y(y, rho):
        a = e.T @ m @ y
        b = y - rho
        return 0.5 * float(a @ a + b @ k @ b)

    return s_y


@dataclass(frozen=True)
class SupplyRate:
    """Passive output ``z_k`` and dissipation ``W_K`` as functions of a window."""

    z: Callable[[Window], np.ndarray]
    w: Callable[[Window], float] = lambda win: 0.0


@dataclass
class DissipationReport:
    residuals: np.ndarray
    scales: np.ndarray
    tolerance: float = AUDIT_TOL
    indices: np.ndarray | None = None
    skipped: list = field(default_factory=list)
    checks_ok: bool = True
    equality: bool = False

    def __post_init__(self):
        self.residuals = np.asarray(self.residuals, dtype=float)
        self.scales = np.abs(np.asarray(self.scales, dtype=float))
        if self.indices is None:
            self.indices = np.arange(len(self.residuals))

    @property
    def normalized(self) -> np.ndarray:
        return self.residuals / (1.0 + self.scales)

    @property
    def max_violation(self) -> float:
        """Largest normalized residual (positive means the inequality is violated)."""
        return float(np.max(self.normalized)) if len(self.residuals) else 0.0

    @property
    def max_deviation(self) -> float:
        """Largest normalized ``|residual|``; small when the balance holds with equality."""
        return float(np.max(np.abs(self.normalized))) if len(self.residuals) else 0.0

    @property
    def satisfied(self) -> bool:
        """Inequality reports pass on ``max_violation``, equality reports on ``max_deviation``."""
        worst = self.max_deviation if self.equality else self.max_violation
        return self.checks_ok and worst <= self.tolerance

    @property
    def equality_holds(self) -> bool:
        return self.checks_ok and self.max_deviation <= self.tolerance

    def summary(self) -> str:
        return f"{self.max_violation:.6e},{self.tolerance:.6e},{self.satisfied}"

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["k", "residual"])
            for k, r in zip(self.indices, self.residuals):
                w.writerow([int(k), repr(float(r))])
            w.writerow(["max_violation", "tolerance", "satisfied"])
            w.writerow([repr(self.max_violation), repr(self.tolerance), self.satisfied])


def _check_solver_tolerance(traj: Trajectory, tolerance: float):
    tol = traj.solver_tolerance
    if tol is not None and 10.0 * tol > tolerance:
        raise ValueError(f"solver tolerance {tol:g} is not 10x tighter than audit tolerance {tolerance:g}")


def audit_krasovskii(traj: Trajectory, storage: StorageFunction, supply: SupplyRate,
                     tolerance: float = AUDIT_TOL) -> DissipationReport:
    """Check ``Delta S_K <= -W_K + v_k^T z_k`` with ``v_k = Delta u_k`` at every interior step."""
    _check_solver_tolerance(traj, tolerance)
    n_audit = traj.n_steps - 1
    if n_audit < 1:
        raise WindowTooShort("need at least two inputs and three states")
    res = np.empty(n_audit)
    scale = np.empty(n_audit)
    s_next = storage(Window(traj, 0))
    d = traj.delta
    for k in range(n_audit):
        win = Window(traj, k)
        s_k = s_next
        s_next = storage(Window(traj, k + 1))
        ds = (s_next - s_k) / d
        w_k = float(supply.w(win))
        vz = float(win.du @ np.atleast_1d(supply.z(win)))
        res[k] = ds + w_k - vz
        scale[k] = max(abs(ds), abs(w_k), abs(vz), abs(s_k) / d, abs(s_next) / d)
    return DissipationReport(res, scale, tolerance)


class Certificate(enum.Enum):
    STRICTLY_KRASOVSKII_PASSIVE = "strictly_krasovskii_passive"
    KRASOVSKII_PASSIVE = "krasovskii_passive"
    INCONCLUSIVE = "inconclusive"


def _is_psd(p) -> bool:
    p = np.atleast_2d(np.asarray(p, dtype=float))
    is_positive_definite(p + 0.0 * np.eye(len(p)))  # symmetry check only
    return bool(np.min(np.linalg.eigvalsh(0.5 * (p + p.T))) >= -1e-12)


def lph_krasovskii_certificate(h, r) -> Certificate:
    """Classify a midpoint-discretized linear port-Hamiltonian system."""
    pd_h, pd_r = is_positive_definite(h), is_positive_definite(r)
    if pd_h and pd_r:
        return Certificate.STRICTLY_KRASOVSKII_PASSIVE
    if _is_psd(h) and _is_psd(r):
        return Certificate.KRASOVSKII_PASSIVE
    return Certificate.INCONCLUSIVE


def audit_incremental(traj_a: Trajectory, traj_b: Trajectory,
                      s_i: Callable[[np.ndarray, np.ndarray], float],
                      tolerance: float = AUDIT_TOL) -> DissipationReport:
    """Check ``Delta S_I(x_k, x'_k) <= (u_k - u'_k)^T (y_k - y'_k)`` along two runs."""
    if (traj_a.delta != traj_b.delta or traj_a.states.shape != traj_b.states.shape
            or traj_a.inputs.shape != traj_b.inputs.shape or traj_a.scheme is not traj_b.scheme):
        raise MismatchedSystems("trajectories differ in sampling period, scheme or dimensions")
    if traj_a.outputs is None or traj_b.outputs is None:
        raise MismatchedSystems("both trajectories need outputs")
    _check_solver_tolerance(traj_a, tolerance)
    d = traj_a.delta
    s_vals = np.array([s_i(xa, xb) for xa, xb in zip(traj_a.states, traj_b.states)])
    ds = np.diff(s_vals) / d
    supply = np.einsum("ij,ij->i", traj_a.inputs - traj_b.inputs, traj_a.outputs - traj_b.outputs)
    scale = np.maximum.reduce([np.abs(ds), np.abs(supply), np.abs(s_vals[:-1]) / d, np.abs(s_vals[1:]) / d])
    zero_ok = all(abs(s_i(x, x)) <= 1e-14 for x in (traj_a.states[0], traj_b.states[-1]))
    return DissipationReport(ds - supply, scale, tolerance, checks_ok=zero_ok)


def construct_kp_from_ip(s_i: Callable[[np.ndarray, np.ndarray], float],
                         step_map: Callable[[np.ndarray, np.ndarray], np.ndarray],
                         delta: float) -> Callable[[np.ndarray, np.ndarray], float]:
    """Krasovskii storage ``S_I(x, F(x, u)) / delta^2`` from an incremental one."""
    def s_hat(x, u):
        return float(s_i(x, step_map(x, u))) / delta**2

    return s_hat


def explicit_storage(s_hat: Callable[[np.ndarray, np.ndarray], float]) -> StorageFunction:
    """Wrap ``S_hat(x_k, u_k)`` as a window storage."""
    return StorageFunction(lambda win: s_hat(win.x0, win.u0), "explicit")


def output_increment_supply() -> SupplyRate:
    """``z_k = Delta y_k`` with no dissipation term."""
    return SupplyRate(lambda win: win.dy)


def shifted_output(step_map: Callable[[np.ndarray, np.ndarray], np.ndarray],
                   s_hat: Callable[[np.ndarray, np.ndarray], float],
                   x_k, u_k, u_star, delta: float, order: int = 8,
                   grad: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None) -> np.ndarray:
    """Output making a Krasovskii passive system shifted passive.

    Integrates, over the segment from ``u*`` to ``u_k``, the gradient in ``u``
    of ``S_hat(F(x_k, u), u*)`` and scales by ``delta``. ``grad(x_k, u)`` may
    supply that gradient; otherwise central differences with step
    ``1e-6 (1 + |u|)`` are used.
    """
    x_k = np.asarray(x_k, dtype=float)
    u_k = np.atleast_1d(np.asarray(u_k, dtype=float))
    u_star = np.atleast_1d(np.asarray(u_star, dtype=float))

    if grad is None:
        def grad(x, u):
            return finite_difference_jacobian(lambda v: np.atleast_1d(s_hat(step_map(x, v), u_star)),
                                              u, rel_step=1e-6)[0]

    return delta * np.atleast_1d(gauss_legendre_integrate(
        lambda s: grad(x_k, s * u_k + (1.0 - s) * u_star), order))


def audit_shifted(traj: Trajectory, step_map, s_hat, u_star, order: int = 8, grad=None,
                  tolerance: float = AUDIT_TOL) -> DissipationReport:
    """Check ``Delta S_S(x_k) <= (u_k - u*)^T y_k`` with ``S_S = delta^2 S_hat(x, u*)``."""
    _check_solver_tolerance(traj, tolerance)
    d = traj.delta
    u_star = np.atleast_1d(np.asarray(u_star, dtype=float))
    s_vals = np.array([d**2 * s_hat(x, u_star) for x in traj.states])
    ds = np.diff(s_vals) / d
    supply = np.array([(u - u_star) @ shifted_output(step_map, s_hat, x, u, u_star, d, order, grad)
                       for x, u in zip(traj.states[:-1], traj.inputs)])
    scale = np.maximum.reduce([np.abs(ds), np.abs(supply), np.abs(s_vals[:-1]) / d, np.abs(s_vals[1:]) / d])
    return DissipationReport(ds - supply, scale, tolerance)


def buck_strict_kp_condition(q_k, q_k2, net) -> bool:
    """Whether ``G_L - C^2 diag(P_L) diag(q_k * q_{k+2})^{-1}`` is positive definite."""
    q_k = np.asarray(q_k, dtype=float)
    q_k2 = np.asarray(q_k2, dtype=float)
    if np.any(q_k <= 0) or np.any(q_k2 <= 0):
        raise NonpositiveCharge("node charges must be positive")
    c = np.asarray(net.C, dtype=float)
    mat = np.asarray(net.G_L, dtype=float) - np.diag(c**2 * np.asarray(net.P_L, dtype=float) / (q_k * q_k2))
    mat = 0.5 * (mat + mat.T)
    return bool(np.min(np.linalg.eigvalsh(mat)) > 1e-12)
