"""Krasovskii-passivity-based controllers and their passivity identities.

Two families are provided:

* the stabilizer ``K1 Delta u_k = K2 (u* - sigma u_k) - z_k`` driven by a
  Krasovskii passive output ``z``, both as an implicit relation for joint
  closed-loop solves and as the explicit two-step-delayed boost update;
* the weighted output-consensus controller
  ``Delta u_k = -M^T E E^T M sigma y_k - K (Delta y_k - Delta rho_k)``,
  ``Delta rho_k = sigma y_k - sigma rho_k``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .dynamics import SampledSystem
from .numerics import DimensionMismatch, is_positive_definite
from .passivity import AUDIT_TOL, DissipationReport, WindowTooShort, consensus_quadratic, shifted_quadratic

log = logging.getLogger(__name__)

DUTY_MAX = 1.0 - 1e-6


class HistoryIncomplete(ValueError):
    pass


class DisconnectedGraph(ValueError):
    pass


class InvalidSpec(ValueError):
    pass


def _mat(a, m, name):
    a = np.atleast_2d(np.asarray(a, dtype=float))
    if a.shape == (1, 1) and m > 1:
        a = a[0, 0] * np.eye(m)
    if a.shape != (m, m):
        raise DimensionMismatch(f"{name} must be {m}x{m}, got {a.shape}")
    return a


def _vec(a, m, name):
    a = np.atleast_1d(np.asarray(a, dtype=float))
    if a.shape != (m,):
        raise DimensionMismatch(f"{name} must have length {m}, got shape {a.shape}")
    return a


@dataclass(frozen=True)
class StabilizerSpec:
    K1: np.ndarray
    K2: np.ndarray
    u_star: np.ndarray

    def __post_init__(self):
        u = np.atleast_1d(np.asarray(self.u_star, dtype=float))
        m = u.size
        k1, k2 = _mat(self.K1, m, "K1"), _mat(self.K2, m, "K2")
        if not (is_positive_definite(k1) and is_positive_definite(k2)):
            raise InvalidSpec("K1 and K2 must be positive definite")
        object.__setattr__(self, "K1", k1)
        object.__setattr__(self, "K2", k2)
        object.__setattr__(self, "u_star", u)

    @property
    def m(self) -> int:
        return self.u_star.size


def stabilizer_residual(spec: StabilizerSpec, u_k, u_k1, z_k, delta: float) -> np.ndarray:
    """``K1 (u_{k+1} - u_k)/delta - K2 (u* - (u_k + u_{k+1})/2) + z_k``."""
    m = spec.m
    u_k, u_k1, z_k = _vec(u_k, m, "u_k"), _vec(u_k1, m, "u_k1"), _vec(z_k, m, "z_k")
    return spec.K1 @ (u_k1 - u_k) / delta - spec.K2 @ (spec.u_star - 0.5 * (u_k + u_k1)) + z_k


def stabilizer_step(spec: StabilizerSpec, u_k, z_k, delta: float) -> np.ndarray:
    """Solve the stabilizer relation for ``u_{k+1}`` given ``z_k``."""
    lhs = spec.K1 / delta + 0.5 * spec.K2
    rhs = (spec.K1 / delta - 0.5 * spec.K2) @ u_k + spec.K2 @ spec.u_star - z_k
    return np.linalg.solve(lhs, rhs)


def check_assumption_stab(spec: StabilizerSpec, u_sequence, z_sequence, delta: float,
                          tolerance: float = AUDIT_TOL) -> DissipationReport:
    """Residual of ``Delta S_u + |Delta u|^2_{K1} + (Delta u)^T z = 0`` along a controller run.

    ``u_sequence`` holds ``u_0..u_N`` and ``z_sequence`` at least ``z_0..z_{N-1}``.
    """
    us = np.asarray(u_sequence, dtype=float).reshape(-1, spec.m)
    zs = np.asarray(z_sequence, dtype=float).reshape(-1, spec.m)
    n = len(us) - 1
    if n < 1 or len(zs) < n:
        raise WindowTooShort("need u_0..u_N and z_0..z_{N-1} with N >= 1")
    s_u = shifted_quadratic(spec.u_star, spec.K2)
    s = np.array([s_u(u) for u in us])
    ds = np.diff(s) / delta
    du = np.diff(us, axis=0) / delta
    diss = np.einsum("ij,jk,ik->i", du, spec.K1, du)
    supply = np.einsum("ij,ij->i", du, zs[:n])
    scale = np.maximum.reduce([np.abs(ds), diss, np.abs(supply), s[:-1] / delta, s[1:] / delta])
    return DissipationReport(ds + diss + supply, scale, tolerance, equality=True)


class StabilizerController:
    """Implicit stabilizer for joint closed-loop solves.

    ``output`` provides ``z(delta, x_k, x_{k+1}, x_{k+2})`` and its Jacobian in
    ``x_{k+2}`` as ``z_jac``. The controller state is the input itself.
    The residual is the stabilizer relation premultiplied by ``delta K1^{-1}``
    so that it is measured in input units.
    """

    def __init__(self, spec: StabilizerSpec, output, a_s: Callable[[SampledSystem], np.ndarray] | None = None):
        self.spec = spec
        self.output = output
        self.dim = spec.m
        self._k1inv = np.linalg.inv(spec.K1)
        self._a_s = a_s

    def plant_input(self, c, x):
        return c

    def plant_input_jac(self, c, x):
        return np.eye(self.dim)

    def residual(self, sys, x0, x1, x2, c0, c1):
        z = self.output.z(sys.delta, x0, x1, x2)
        return sys.delta * self._k1inv @ stabilizer_residual(self.spec, c0, c1, z, sys.delta)

    def residual_jac(self, sys, x0, x1, x2, c0, c1):
        d = sys.delta
        d_x2 = d * self._k1inv @ self.output.z_jac(d, x0, x1, x2)
        d_c1 = np.eye(self.dim) + 0.5 * d * self._k1inv @ self.spec.K2
        return d_x2, d_c1

    def well_posedness_matrix(self, sys):
        return None if self._a_s is None else self._a_s(sys)


class LinearKrasovskiiOutput:
    """``z_k = C Delta sigma x_k`` for a constant matrix ``C`` (``B^T H`` for a linear PHS)."""

    def __init__(self, c):
        self.c = np.atleast_2d(np.asarray(c, dtype=float))

    def z(self, delta, x0, x1, x2):
        return self.c @ (x2 - x0) / (2 * delta)

    def z_jac(self, delta, x0, x1, x2):
        return self.c / (2 * delta)


@dataclass
class BoostControllerHistory:
    """Inputs to one delayed update.

    ``u_prev`` is the controller value the update starts from (the most
    recently applied input); ``i_s`` and ``v`` are 3-row arrays with the
    samples at ``k-2, k-1, k``.
    """

    u_prev: np.ndarray
    i_s: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        self.u_prev = np.atleast_1d(np.asarray(self.u_prev, dtype=float))
        self.i_s = np.atleast_2d(np.asarray(self.i_s, dtype=float))
        self.v = np.atleast_2d(np.asarray(self.v, dtype=float))
        if self.i_s.shape[0] != 3 or self.v.shape[0] != 3:
            raise HistoryIncomplete("need samples at k-2, k-1 and k")


def delayed_boost_output(i_s, v, delta: float) -> np.ndarray:
    """``z_{k-2}`` from current and voltage samples at ``k-2, k-1, k``."""
    i_s = np.asarray(i_s, dtype=float)
    v = np.asarray(v, dtype=float)
    return ((i_s[2] - i_s[0]) * (v[1] + v[0]) - (i_s[1] + i_s[0]) * (v[2] - v[0])) / (4 * delta)


def boost_controller_update(hist: BoostControllerHistory, spec: StabilizerSpec, delta: float,
                            z: np.ndarray | None = None) -> np.ndarray:
    """Explicit update ``(2K1 + dK2)^{-1}((2K1 - dK2) u_prev - 2d z_{k-2} + 2d K2 u*)``, clamped."""
    if z is None:
        z = delayed_boost_output(hist.i_s, hist.v, delta)
    k1, k2 = spec.K1, spec.K2
    u = np.linalg.solve(2 * k1 + delta * k2,
                        (2 * k1 - delta * k2) @ hist.u_prev - 2 * delta * z + 2 * delta * k2 @ spec.u_star)
    clipped = np.clip(u, 0.0, DUTY_MAX)
    if np.any(clipped != u):
        log.debug("duty ratio clamped to [0, %g]", DUTY_MAX)
    return clipped


class DelayedBoostPolicy:
    """Feedback policy applying the explicit delayed update.

    For ``k < 2`` the initial input is held. Afterwards
    ``u_k = update(u_{k-1}, z_{k-2})``. The pairs used are recorded in
    ``self.z_log`` for the controller identity audit.
    """

    def __init__(self, spec: StabilizerSpec, net, u_init, delta: float):
        self.spec = spec
        self.net = net
        self.delta = delta
        self.u_init = np.atleast_1d(np.asarray(u_init, dtype=float))
        self.applied: list[np.ndarray] = []
        self.z_log: list[np.ndarray] = []
        self.clamped_steps = 0

    def __call__(self, k: int, states: np.ndarray) -> np.ndarray:
        if k < 2:
            u = self.u_init.copy()
        else:
            window = states[k - 2:k + 1]
            i_s = window[:, :self.net.nu]
            v = window[:, self.net.nu:2 * self.net.nu]
            z = delayed_boost_output(i_s, v, self.delta)
            self.z_log.append(z)
            u = boost_controller_update(BoostControllerHistory(self.applied[-1], i_s, v), self.spec, self.delta, z)
            if np.any(u <= 0.0) or np.any(u >= DUTY_MAX):
                if not self.clamped_steps:
                    log.warning("duty ratio clamped to [0, %g] at step %d", DUTY_MAX, k)
                self.clamped_steps += 1
        self.applied.append(u)
        return u

    def identity_report(self, tolerance: float = AUDIT_TOL) -> DissipationReport:
        """Stabilizer identity over ``u_1, u_2, ...`` paired with ``z_0, z_1, ...``."""
        us = np.asarray(self.applied)[1:]
        return check_assumption_stab(self.spec, us, np.asarray(self.z_log), self.delta, tolerance)


@dataclass(frozen=True)
class ConsensusSpec:
    E: np.ndarray
    M: np.ndarray
    K: np.ndarray

    def __post_init__(self):
        e = np.atleast_2d(np.asarray(self.E, dtype=float))
        m = e.shape[0]
        if np.max(np.abs(e.T @ np.ones(m)), initial=0.0) > 1e-12:
            raise InvalidSpec("incidence columns must sum to zero")
        if m > 1 and np.linalg.matrix_rank(e) != m - 1:
            raise InvalidSpec("communication graph must be connected")
        mw, k = _mat(self.M, m, "M"), _mat(self.K, m, "K")
        if abs(np.linalg.det(mw)) < 1e-12 or np.linalg.cond(mw) > 1e12:
            raise InvalidSpec("M must be nonsingular")
        if np.max(np.abs(k - k.T)) > 1e-12 or np.min(np.linalg.eigvalsh(k)) < -1e-12:
            raise InvalidSpec("K must be symmetric positive semidefinite")
        object.__setattr__(self, "E", e)
        object.__setattr__(self, "M", mw)
        object.__setattr__(self, "K", k)

    @property
    def m(self) -> int:
        return self.E.shape[0]

    @property
    def laplacian(self) -> np.ndarray:
        """``M^T E E^T M``."""
        return self.M.T @ self.E @ self.E.T @ self.M


def consensus_residual(spec: ConsensusSpec, u_k, u_k1, y_k, y_k1, rho_k, rho_k1, delta: float) -> np.ndarray:
    """Stacked residual of the ``u`` and ``rho`` updates."""
    m = spec.m
    u_k, u_k1 = _vec(u_k, m, "u_k"), _vec(u_k1, m, "u_k1")
    y_k, y_k1 = _vec(y_k, m, "y_k"), _vec(y_k1, m, "y_k1")
    rho_k, rho_k1 = _vec(rho_k, m, "rho_k"), _vec(rho_k1, m, "rho_k1")
    sy = 0.5 * (y_k + y_k1)
    dy = (y_k1 - y_k) / delta
    drho = (rho_k1 - rho_k) / delta
    r_u = (u_k1 - u_k) / delta + spec.laplacian @ sy + spec.K @ (dy - drho)
    r_rho = drho - sy + 0.5 * (rho_k + rho_k1)
    return np.concatenate([r_u, r_rho])


def xi_form_step(spec: ConsensusSpec, xi_k, y_k, y_k1, delta: float) -> np.ndarray:
    """Integrator state update ``Delta xi_k = -E^T M sigma y_k``."""
    sy = 0.5 * (np.asarray(y_k, dtype=float) + np.asarray(y_k1, dtype=float))
    return np.asarray(xi_k, dtype=float) - delta * spec.E.T @ spec.M @ sy


def xi_form_input(spec: ConsensusSpec, xi_k, y_k, rho_k) -> np.ndarray:
    """Input ``u_k = M^T E xi_k - K (y_k - rho_k)`` of the integrator-state realization."""
    return spec.M.T @ spec.E @ xi_k - spec.K @ (np.asarray(y_k, dtype=float) - rho_k)


def check_assumption_oc(spec: ConsensusSpec, y_seq, rho_seq, u_seq, delta: float,
                        tolerance: float = AUDIT_TOL) -> DissipationReport:
    """Residual of ``Delta S_y + (Delta y)^T Delta u + |Delta y - Delta rho|^2_K = 0``."""
    m = spec.m
    ys = np.asarray(y_seq, dtype=float).reshape(-1, m)
    rhos = np.asarray(rho_seq, dtype=float).reshape(-1, m)
    us = np.asarray(u_seq, dtype=float).reshape(-1, m)
    n = min(len(ys), len(rhos), len(us)) - 1
    if n < 1:
        raise WindowTooShort("need at least two samples")
    ys, rhos, us = ys[:n + 1], rhos[:n + 1], us[:n + 1]
    s_y = consensus_quadratic(spec.E, spec.M, spec.K)
    s = np.array([s_y(y, r) for y, r in zip(ys, rhos)])
    ds = np.diff(s) / delta
    dy = np.diff(ys, axis=0) / delta
    du = np.diff(us, axis=0) / delta
    e = dy - np.diff(rhos, axis=0) / delta
    supply = np.einsum("ij,ij->i", dy, du)
    diss = np.einsum("ij,jk,ik->i", e, spec.K, e)
    scale = np.maximum.reduce([np.abs(ds), np.abs(supply), np.abs(diss), s[:-1] / delta, s[1:] / delta])
    return DissipationReport(ds + supply + diss, scale, tolerance, equality=True)


class ConsensusController:
    """Joint-solve realization with controller state ``c = (u_c, rho)``.

    The applied input is ``u_c + feedforward(x)``. The plant output is the
    sampled output of the system, ``y_k = h(sigma x_k)``. The residual is the
    consensus relation multiplied by ``delta``.
    """

    def __init__(self, spec: ConsensusSpec, feedforward: Callable[[np.ndarray], np.ndarray] | None = None,
                 feedforward_jac: Callable[[np.ndarray], np.ndarray] | None = None,
                 well_posedness: Callable[[SampledSystem], np.ndarray] | None = None):
        self.spec = spec
        self.m = spec.m
        self.dim = 2 * spec.m
        self.feedforward = feedforward
        self._wp = well_posedness

    def plant_input(self, c, x):
        u = c[:self.m]
        return u if self.feedforward is None else u + self.feedforward(x)

    def plant_input_jac(self, c, x):
        return np.hstack([np.eye(self.m), np.zeros((self.m, self.m))])

    def residual(self, sys, x0, x1, x2, c0, c1):
        m = self.m
        y0 = sys.output(x0, x1)
        y1 = sys.output(x1, x2)
        r = consensus_residual(self.spec, c0[:m], c1[:m], y0, y1, c0[m:], c1[m:], sys.delta)
        return sys.delta * r

    def residual_jac(self, sys, x0, x1, x2, c0, c1):
        m, d = self.m, sys.delta
        dy1 = sys.output_jac_next(x1, x2)
        spec = self.spec
        eye = np.eye(m)
        d_x2 = np.vstack([(0.5 * d * spec.laplacian + spec.K) @ dy1, -0.5 * d * dy1])
        d_c1 = np.block([[eye, -spec.K], [np.zeros((m, m)), (1 + 0.5 * d) * eye]])
        return d_x2, d_c1

    def well_posedness_matrix(self, sys):
        return None if self._wp is None else self._wp(sys)


def incidence_matrix(edges: Sequence[tuple[int, int]], m: int) -> np.ndarray:
    """Incidence matrix with ``+1`` at the first and ``-1`` at the second node of each edge.

    Nodes are numbered from 0.
    """
    E = np.zeros((m, len(edges)))
    parent = list(range(m))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for j, (a, b) in enumerate(edges):
        if a == b:
            raise ValueError("self-loops are not allowed")
        if not (0 <= a < m and 0 <= b < m):
            raise ValueError(f"edge ({a}, {b}) references a missing node")
        E[a, j] = 1.0
        E[b, j] = -1.0
        parent[find(a)] = find(b)
    if len({find(i) for i in range(m)}) > 1:
        raise DisconnectedGraph("communication graph is not connected")
    return E
