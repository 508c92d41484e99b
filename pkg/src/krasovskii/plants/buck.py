"""Averaged model of a DC microgrid of buck converters with ZIP loads.

State ``x = (phi, q, phi_t)``: converter fluxes, node charges, line fluxes.
With ``grad H = (phi / L, q / C, phi_t / L_t)``::

    xdot = (J - R) grad H(x) + fbar(q) + g u + d
    fbar(q) = -(0, I_L + C P_L / q, 0),   g = (I, 0, 0)

The output is the generated current ``y = phi / L``. The sampled model uses
the midpoint rule on the linear part and the trapezoid average of ``fbar``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from ..dynamics import ContinuousDynamics, DomainViolation, SampledSystem, Trajectory
from ..passivity import DissipationReport
from .base import InvariantViolation, positive_vector, vector

Q_FLOOR = 1e-9


@dataclass(frozen=True)
class BuckNetwork:
    R: np.ndarray
    L: np.ndarray
    C: np.ndarray
    R_t: np.ndarray
    L_t: np.ndarray
    G_L: np.ndarray
    I_L: np.ndarray
    P_L: np.ndarray
    D: np.ndarray
    d: np.ndarray | None = None

    def __post_init__(self):
        L = positive_vector("L", self.L)
        nu = L.size
        D = np.asarray(self.D, dtype=float).reshape(nu, -1)
        mu = D.shape[1]
        if mu and not np.all(np.isin(D, (-1.0, 0.0, 1.0))):
            raise InvariantViolation("D must be an incidence matrix")
        g = np.asarray(self.G_L, dtype=float)
        g = np.diag(g) if g.ndim < 2 else g
        if g.shape != (nu, nu) or np.max(np.abs(g - g.T)) > 1e-12 * max(1.0, np.max(np.abs(g))):
            raise InvariantViolation("G_L must be a symmetric nu x nu matrix")
        n = 2 * nu + mu
        vals = {
            "L": L,
            "R": positive_vector("R", self.R, nu),
            "C": positive_vector("C", self.C, nu),
            "R_t": positive_vector("R_t", self.R_t, mu) if mu else np.zeros(0),
            "L_t": positive_vector("L_t", self.L_t, mu) if mu else np.zeros(0),
            "G_L": g,
            "I_L": vector("I_L", self.I_L, nu),
            "P_L": vector("P_L", self.P_L, nu),
            "D": D,
            "d": np.zeros(n) if self.d is None else vector("d", self.d, n),
        }
        for key, val in vals.items():
            object.__setattr__(self, key, val)

    @property
    def nu(self) -> int:
        return self.L.size

    @property
    def mu(self) -> int:
        return self.D.shape[1]

    @property
    def n(self) -> int:
        return 2 * self.nu + self.mu

    @property
    def hessian_diag(self) -> np.ndarray:
        """Diagonal of the (constant) Hessian ``diag(1/L, 1/C, 1/L_t)``."""
        return 1.0 / np.concatenate([self.L, self.C, self.L_t])

    def split(self, x):
        nu = self.nu
        return x[:nu], x[nu:2 * nu], x[2 * nu:]

    def interconnection(self) -> np.ndarray:
        """``J - R`` in block form."""
        nu, mu = self.nu, self.mu
        eye = np.eye(nu)
        z = np.zeros
        J = np.block([
            [z((nu, nu)), -eye, z((nu, mu))],
            [eye, z((nu, nu)), self.D],
            [z((mu, nu)), -self.D.T, z((mu, mu))],
        ])
        Rm = np.zeros((self.n, self.n))
        Rm[:nu, :nu] = np.diag(self.R)
        Rm[nu:2 * nu, nu:2 * nu] = self.G_L
        Rm[2 * nu:, 2 * nu:] = np.diag(self.R_t)
        return J - Rm

    def dissipation(self) -> np.ndarray:
        return -0.5 * (self.interconnection() + self.interconnection().T)

    def with_loads(self, I_L=None, P_L=None) -> "BuckNetwork":
        return replace(self, I_L=self.I_L if I_L is None else I_L, P_L=self.P_L if P_L is None else P_L)

    def fbar(self, q) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        if np.any(q <= Q_FLOOR * self.C):
            raise DomainViolation("node charge must stay positive")
        out = np.zeros(self.n)
        out[self.nu:2 * self.nu] = -(self.I_L + self.C * self.P_L / q)
        return out

    def fbar_jac_diag(self, q) -> np.ndarray:
        """Diagonal of ``d fbar / d x``."""
        out = np.zeros(self.n)
        out[self.nu:2 * self.nu] = self.C * self.P_L / np.asarray(q, dtype=float) ** 2
        return out


def buck_dynamics(net: BuckNetwork) -> ContinuousDynamics:
    nu, n = net.nu, net.n
    a = net.interconnection() * net.hessian_diag[None, :]
    g = np.zeros((n, nu))
    g[:nu] = np.eye(nu)
    out = np.zeros((nu, n))
    out[:, :nu] = np.diag(1.0 / net.L)

    def f(x, u):
        _, q, _ = net.split(x)
        return a @ x + net.fbar(q) + g @ np.atleast_1d(u) + net.d

    def jac_x(x, u):
        _, q, _ = net.split(x)
        return a + np.diag(net.fbar_jac_diag(q))

    return ContinuousDynamics(n, nu, f, jac_x, lambda x, u: g,
                              output=lambda x: out @ x, output_jac=lambda x: out)


def buck_sampled(net: BuckNetwork, delta: float) -> SampledSystem:
    """Midpoint on the linear part, trapezoid average of the load term.

    The step residual is divided by ``delta``; its Jacobian is :func:`buck_pi_jacobian`.
    """
    cont = buck_dynamics(net)
    nu, n = net.nu, net.n
    a = net.interconnection() * net.hessian_diag[None, :]
    g = np.zeros((n, nu))
    g[:nu] = np.eye(nu)

    def rhs(x0, x1, u):
        sbar = 0.5 * (net.fbar(net.split(x0)[1]) + net.fbar(net.split(x1)[1]))
        return a @ (0.5 * (x0 + x1)) + sbar + g @ np.atleast_1d(u) + net.d

    def rhs_jac_next(x0, x1, u):
        return 0.5 * a + 0.5 * np.diag(net.fbar_jac_diag(net.split(x1)[1]))

    return SampledSystem(cont, delta, rhs=rhs, rhs_jac_next=rhs_jac_next,
                         rhs_jac_u=lambda x0, x1, u: g, residual_weight=np.full(n, 1.0 / delta))


def buck_pi_jacobian(net: BuckNetwork, x_next, delta: float) -> np.ndarray:
    """``Pi(x_{k+1})``: Jacobian of the sampled step ``Delta x_k - f_delta`` in ``x_{k+1}``.

    The load term ``C P_L / q^2`` enters with a minus sign because ``fbar``
    increases with ``q``.
    """
    q = net.split(np.asarray(x_next, dtype=float))[1]
    if np.any(q <= Q_FLOOR * net.C):
        raise DomainViolation("node charge must stay positive")
    a = net.interconnection() * net.hessian_diag[None, :]
    return np.eye(net.n) / delta - 0.5 * a - 0.5 * np.diag(net.fbar_jac_diag(q))


def buck_feedforward(net: BuckNetwork, q_star, phi_k) -> np.ndarray:
    """Input offset ``q* / C + R phi_k / L``."""
    q_star = vector("q*", q_star, net.nu)
    phi_k = vector("phi", phi_k, net.nu)
    return q_star / net.C + net.R * phi_k / net.L


def buck_energy_balance(traj: Trajectory, nets, tolerance: float = 1e-9) -> DissipationReport:
    """Per-step residual of ``Delta S_K + W_K - (Delta u)^T Delta y``.

    ``W_K = |Hess Delta sigma x|^2_R - (Delta sigma x)^T Hess Delta sigma fbar``
    with the trapezoid load averages of the steps actually taken, so load
    changes made through ``nets(k)`` are accounted for.
    """
    net0 = nets(0)
    hd = net0.hessian_diag
    rm = net0.dissipation()
    d = traj.delta
    xs, us, ys = traj.states, traj.inputs, traj.outputs
    n_audit = traj.n_steps - 1
    sbar = np.array([0.5 * (nets(k).fbar(net0.split(xs[k])[1]) + nets(k).fbar(net0.split(xs[k + 1])[1]))
                     for k in range(traj.n_steps)])
    dx = np.diff(xs, axis=0) / d
    s = 0.5 * np.einsum("ij,j,ij->i", dx, hd, dx)
    res = np.empty(n_audit)
    scale = np.empty(n_audit)
    for k in range(n_audit):
        hdsx = hd * (xs[k + 2] - xs[k]) / (2 * d)
        diss = float(hdsx @ rm @ hdsx)
        load = float(hdsx @ (sbar[k + 1] - sbar[k]) / d)
        ds = (s[k + 1] - s[k]) / d
        supply = float((us[k + 1] - us[k]) @ (ys[k + 1] - ys[k])) / d**2
        res[k] = ds + diss - load - supply
        scale[k] = max(abs(ds), abs(diss), abs(load), abs(supply), s[k] / d, s[k + 1] / d)
    return DissipationReport(res, scale, tolerance, equality=True)
