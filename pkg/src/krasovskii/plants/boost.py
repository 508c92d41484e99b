"""Averaged model of a DC microgrid of boost converters.

State ``x = (I_s, V, I)``: converter currents and node voltages (``nu`` each)
followed by line currents (``mu``). The input is the duty ratio ``u``.

    L_s dI_s/dt = -(1 - u) * V + V_s
    C   dV/dt   =  (1 - u) * I_s - G_l V - I_l + D I
    L   dI/dt   = -D^T V - R I
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from ..dynamics import ContinuousDynamics, SampledSystem, Trajectory
from ..passivity import DissipationReport
from .base import InfeasibleReference, InvariantViolation, positive_vector, vector


@dataclass(frozen=True)
class BoostNetwork:
    """Node parameters are length-``nu`` vectors, line parameters length ``mu``."""

    L_s: np.ndarray
    C: np.ndarray
    G_l: np.ndarray
    V_s: np.ndarray
    I_l: np.ndarray
    L: np.ndarray
    R: np.ndarray
    D: np.ndarray

    def __post_init__(self):
        L_s = positive_vector("L_s", self.L_s)
        nu = L_s.size
        D = np.asarray(self.D, dtype=float).reshape(nu, -1)
        mu = D.shape[1]
        object.__setattr__(self, "L_s", L_s)
        object.__setattr__(self, "C", positive_vector("C", self.C, nu))
        object.__setattr__(self, "G_l", positive_vector("G_l", self.G_l, nu))
        object.__setattr__(self, "V_s", positive_vector("V_s", self.V_s, nu))
        object.__setattr__(self, "I_l", vector("I_l", self.I_l, nu))
        object.__setattr__(self, "L", positive_vector("L", self.L, mu) if mu else np.zeros(0))
        object.__setattr__(self, "R", positive_vector("R", self.R, mu) if mu else np.zeros(0))
        if mu and not np.all(np.isin(D, (-1.0, 0.0, 1.0))):
            raise InvariantViolation("D must be an incidence matrix")
        object.__setattr__(self, "D", D)

    @property
    def nu(self) -> int:
        return self.L_s.size

    @property
    def mu(self) -> int:
        return self.D.shape[1]

    @property
    def n(self) -> int:
        return 2 * self.nu + self.mu

    @property
    def energy_weight(self) -> np.ndarray:
        """Diagonal of ``diag(L_s, C, L)``."""
        return np.concatenate([self.L_s, self.C, self.L])

    def split(self, x):
        nu = self.nu
        return x[:nu], x[nu:2 * nu], x[2 * nu:]

    def scaled_load(self, factor: float) -> "BoostNetwork":
        return replace(self, I_l=factor * self.I_l)


def boost_dynamics(net: BoostNetwork) -> ContinuousDynamics:
    nu, n = net.nu, net.n
    w = net.energy_weight
    D = net.D

    def f(x, u):
        i_s, v, i = net.split(x)
        a = 1.0 - np.asarray(u, dtype=float)
        return np.concatenate([
            (-a * v + net.V_s) / net.L_s,
            (a * i_s - net.G_l * v - net.I_l + D @ i) / net.C,
            (-D.T @ v - net.R * i) / net.L,
        ])

    def jac_x(x, u):
        a = 1.0 - np.asarray(u, dtype=float)
        m = np.zeros((n, n))
        m[:nu, nu:2 * nu] = -np.diag(a)
        m[nu:2 * nu, :nu] = np.diag(a)
        m[nu:2 * nu, nu:2 * nu] = -np.diag(net.G_l)
        m[nu:2 * nu, 2 * nu:] = D
        m[2 * nu:, nu:2 * nu] = -D.T
        m[2 * nu:, 2 * nu:] = -np.diag(net.R)
        return m / w[:, None]

    def jac_u(x, u):
        i_s, v, _ = net.split(x)
        m = np.zeros((n, nu))
        m[:nu] = np.diag(v / net.L_s)
        m[nu:2 * nu] = -np.diag(i_s / net.C)
        return m

    return ContinuousDynamics(n, nu, f, jac_x, jac_u)


def boost_sampled(net: BoostNetwork, delta: float) -> SampledSystem:
    """Midpoint model with row weights ``min(1, w / delta)``, ``w = (L_s, C, L)``.

    Line-current rows are thereby expressed in volts; with microhenry line
    inductances the state-unit rows would amplify voltage roundoff by
    ``delta / L``. The weighted Jacobian is a row scaling of
    :func:`boost_pi_matrix`.
    """
    return SampledSystem(boost_dynamics(net), delta,
                         residual_weight=np.minimum(1.0, net.energy_weight / delta))


def boost_pi_matrix(net: BoostNetwork, u_k, delta: float) -> np.ndarray:
    """Jacobian of the energy-weighted midpoint residual with respect to ``x_{k+1}``.

    Equals ``diag(L_s, C, L) / delta`` times the Jacobian of the state-unit residual.
    """
    nu, mu = net.nu, net.mu
    a = np.diag(1.0 - np.asarray(u_k, dtype=float))
    z = np.zeros
    return np.block([
        [np.diag(net.L_s) / delta, a / 2, z((nu, mu))],
        [-a / 2, np.diag(net.C / delta + net.G_l / 2), -net.D / 2],
        [z((mu, nu)), net.D.T / 2, np.diag(net.L / delta + net.R / 2)],
    ])


def boost_equilibrium(net: BoostNetwork, v_star):
    """``(I_s*, V*, I*, u*)`` for a voltage reference ``V* >= V_s``."""
    v_star = vector("V*", np.broadcast_to(v_star, (net.nu,)), net.nu)
    if np.any(v_star < net.V_s):
        raise InfeasibleReference("voltage reference below source voltage gives a duty ratio outside [0, 1)")
    u_star = 1.0 - net.V_s / v_star
    i_star = -(net.D.T @ v_star) / net.R if net.mu else np.zeros(0)
    i_s_star = (net.G_l * v_star + net.I_l - net.D @ i_star) / (1.0 - u_star)
    return i_s_star, v_star, i_star, u_star


class BoostKrasovskiiOutput:
    """``z_k = Delta sigma I_s * sigma V - sigma I_s * Delta sigma V`` and its ``x_{k+2}`` Jacobian."""

    def __init__(self, net: BoostNetwork):
        self.net = net

    def z(self, delta, x0, x1, x2):
        net = self.net
        i0, v0, _ = net.split(x0)
        i1, v1, _ = net.split(x1)
        i2, v2, _ = net.split(x2)
        dsi = (i2 - i0) / (2 * delta)
        dsv = (v2 - v0) / (2 * delta)
        return dsi * 0.5 * (v0 + v1) - 0.5 * (i0 + i1) * dsv

    def z_jac(self, delta, x0, x1, x2):
        net = self.net
        nu = net.nu
        i0, v0, _ = net.split(x0)
        i1, v1, _ = net.split(x1)
        jac = np.zeros((nu, net.n))
        jac[:, :nu] = np.diag(0.5 * (v0 + v1) / (2 * delta))
        jac[:, nu:2 * nu] = -np.diag(0.5 * (i0 + i1) / (2 * delta))
        return jac


def boost_energy_balance(traj: Trajectory, nets, tolerance: float = 1e-9) -> DissipationReport:
    """Per-step residual of the boost Krasovskii energy balance.

    ``nets(k)`` gives the network active at step ``k``; a change of the load
    current between steps ``k`` and ``k+1`` enters as the supply term
    ``-(Delta sigma V)^T Delta I_l``.
    """
    net0 = nets(0)
    w = net0.energy_weight
    d = traj.delta
    kout = BoostKrasovskiiOutput(net0)
    xs, us = traj.states, traj.inputs
    n_audit = traj.n_steps - 1
    res = np.empty(n_audit)
    scale = np.empty(n_audit)
    dx = np.diff(xs, axis=0) / d
    s = 0.5 * np.einsum("ij,j,ij->i", dx, w, dx)
    for k in range(n_audit):
        net_k, net_k1 = nets(k), nets(k + 1)
        dsx = (xs[k + 2] - xs[k]) / (2 * d)
        _, dsv, dsi = net0.split(dsx)
        ds = (s[k + 1] - s[k]) / d
        diss = float(net0.R @ dsi**2 + net_k.G_l @ dsv**2)
        z = kout.z(d, xs[k], xs[k + 1], xs[k + 2])
        supply = float((us[k + 1] - us[k]) / d @ z)
        load = float(dsv @ (net_k1.I_l - net_k.I_l) / d)
        res[k] = ds + diss - supply + load
        scale[k] = max(abs(ds), diss, abs(supply), abs(load), s[k] / d, s[k + 1] / d)
    return DissipationReport(res, scale, tolerance, equality=True)
