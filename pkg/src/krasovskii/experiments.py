"""Scenario runners: closed-loop simulations, audit suites and comparisons.

Every runner returns a :class:`RunReport`; the CLI only formats and writes it.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import controllers as ctl
from .dynamics import (ContinuousDynamics, SampledSystem, Trajectory, reference_continuous_simulate,
                       simulate_closed_loop, simulate_open_loop, simulate_policy)
from .numerics import spectral_radius
from .passivity import (AUDIT_TOL, DissipationReport, SupplyRate, audit_incremental, audit_krasovskii,
                        audit_shifted, buck_strict_kp_condition, construct_kp_from_ip, explicit_storage,
                        krasovskii_quadratic, output_increment_supply)
from .plants import (BoostKrasovskiiOutput, BoostNetwork, BuckNetwork, LinearPHS, boost_dynamics,
                     boost_energy_balance, boost_equilibrium, boost_pi_matrix, boost_sampled, buck_dynamics,
                     buck_energy_balance, buck_feedforward, buck_sampled, build_Ac, build_As,
                     consensus_spectral_radius, consensus_step_matrix, lph_dynamics, lph_equilibrium,
                     lph_instances, lph_sampled, lph_shifted_gradient, lph_step_map,
                     stabilizer_closed_loop_map)
from .scenario import ConfigError, Scenario

log = logging.getLogger(__name__)


@dataclass
class RunReport:
    trajectory: Trajectory | None = None
    controller: np.ndarray | None = None
    controller_names: list[str] = field(default_factory=list)
    reports: dict[str, DissipationReport] = field(default_factory=dict)
    metrics: dict[str, object] = field(default_factory=dict)
    skipped: dict[str, str] = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)

    @property
    def audits_ok(self) -> bool:
        return all(r.satisfied for r in self.reports.values()) and all(
            v for k, v in self.metrics.items() if k.startswith("check_"))

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        if self.trajectory is not None:
            self.trajectory.to_csv(out / "trajectory.csv")
            with open(out / "controller.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["k", "t"] + self.controller_names)
                if self.controller is not None:
                    for k, row in enumerate(self.controller):
                        w.writerow([k, f"{k * self.trajectory.delta:.15g}"] + [f"{v:.15g}" for v in row])
        with open(out / "report.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "value"])
            for key, val in self.metrics.items():
                w.writerow([key, val])
            for key, rep in self.reports.items():
                w.writerow([f"{key}.max_violation", repr(rep.max_violation)])
                w.writerow([f"{key}.max_deviation", repr(rep.max_deviation)])
                w.writerow([f"{key}.satisfied", rep.satisfied])
            for key, why in self.skipped.items():
                w.writerow([f"{key}.skipped", why])
            for key, sec in self.timings.items():
                w.writerow([f"time.{key}", f"{sec:.3f}"])
        for key, rep in self.reports.items():
            rep.to_csv(out / f"audit_{key}.csv")


def _edges(scn: Scenario, section: str, key: str):
    val = scn.get(section, key)
    if val is None:
        raise ConfigError(f"missing [{section}] {key}")
    try:
        return [(int(a), int(b)) for a, b in val]
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {key} must be a list of node pairs") from exc


def _gain(scn: Scenario, key: str, m: int) -> np.ndarray:
    g = scn.array("controller", key)
    if g.ndim == 0:
        return float(g) * np.eye(m)
    if g.ndim == 1:
        return np.diag(g)
    return g


def _step_index(scn: Scenario, delta: float) -> int | None:
    t = scn.get("schedule", "load_step_time")
    return None if t is None else int(round(float(t) / delta))


def _incidence(edges, nu):
    try:
        return ctl.incidence_matrix(edges, nu)
    except (ValueError, ctl.DisconnectedGraph) as exc:
        raise ConfigError(str(exc)) from exc


# ---------------------------------------------------------------- boost


def boost_network(scn: Scenario) -> BoostNetwork:
    l_s = scn.array("nodes", "L_s")
    nu = l_s.size
    D = _incidence(_edges(scn, "lines", "edges"), nu)
    try:
        return BoostNetwork(L_s=l_s, C=scn.array("nodes", "C"), G_l=scn.array("loads", "G"),
                            V_s=scn.array("nodes", "V_s"), I_l=scn.array("loads", "I"),
                            L=scn.array("lines", "L"), R=scn.array("lines", "R"), D=D)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def boost_schedule(scn: Scenario, net: BoostNetwork, delta: float):
    k_step = _step_index(scn, delta)
    after = net.scaled_load(scn.number("schedule", "load_step_factor", 1.0))

    def nets(k):
        return net if k_step is None or k < k_step else after

    return nets


def run_boost(scn: Scenario) -> RunReport:
    delta, n_steps = scn.delta, scn.n_steps
    net = boost_network(scn)
    nets = boost_schedule(scn, net, delta)
    v_ref = scn.number("controller", "V_ref")
    i_s, v, i, u_star = boost_equilibrium(net, v_ref)
    i0, v0, l0, u0 = boost_equilibrium(net, scn.number("initial", "V", v_ref))
    x0 = np.concatenate([i0, v0, l0])
    spec = ctl.StabilizerSpec(_gain(scn, "K1", net.nu), _gain(scn, "K2", net.nu), u_star)
    plants = {}

    def plant(k):
        cur = nets(k)
        if id(cur) not in plants:
            plants[id(cur)] = boost_sampled(cur, delta)
        return plants[id(cur)]

    rep = RunReport(controller_names=[f"u_{j}" for j in range(net.nu)])
    t0 = time.perf_counter()
    if scn.controller == "delayed_stabilizer":
        policy = ctl.DelayedBoostPolicy(spec, net, u0, delta)
        traj = simulate_policy(plant, policy, x0, n_steps)
        rep.controller = traj.inputs
        rep.reports["stabilizer_identity"] = policy.identity_report()
    else:
        controller = ctl.StabilizerController(spec, BoostKrasovskiiOutput(net),
                                              a_s=lambda sys: boost_pi_matrix(net, u_star, delta))
        cl = simulate_closed_loop(plant, controller, x0, u0, n_steps)
        traj = cl.plant
        rep.controller = cl.controller
        kout = BoostKrasovskiiOutput(net)
        zs = [kout.z(delta, *traj.states[k:k + 3]) for k in range(n_steps - 1)]
        rep.reports["stabilizer_identity"] = ctl.check_assumption_stab(spec, cl.controller, zs, delta)
    rep.timings["simulate"] = time.perf_counter() - t0
    rep.trajectory = traj
    rep.reports["energy_balance"] = boost_energy_balance(traj, nets)
    volts = traj.states[:, net.nu:2 * net.nu]
    settle = traj.times >= scn.number("schedule", "settle_time", 2.5)
    rep.metrics["terminal_max_voltage_error"] = float(np.max(np.abs(volts[-1] - v_ref)))
    if np.any(settle):
        rep.metrics["settled_max_voltage_error"] = float(np.max(np.abs(volts[settle] - v_ref)))
    else:
        rep.skipped["settled_max_voltage_error"] = "horizon ends before the settle time"
    rep.metrics["u_star"] = " ".join(f"{u:.10g}" for u in u_star)
    rep.metrics["duty_clamped_steps"] = int(np.sum(np.any((traj.inputs <= 0.0) | (traj.inputs >= ctl.DUTY_MAX), axis=1)))
    return rep


# ---------------------------------------------------------------- buck


def buck_network(scn: Scenario) -> BuckNetwork:
    l = scn.array("nodes", "L")
    nu = l.size
    D = _incidence(_edges(scn, "lines", "edges"), nu)
    g = scn.array("loads", "G")
    try:
        return BuckNetwork(R=scn.array("nodes", "R"), L=l, C=scn.array("nodes", "C"),
                           R_t=scn.array("lines", "R"), L_t=scn.array("lines", "L"),
                           G_L=np.diag(g) if g.ndim == 1 else g, I_L=scn.array("loads", "I"),
                           P_L=scn.array("loads", "P"), D=D,
                           d=scn.get("nodes", "d"))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def buck_schedule(scn: Scenario, net: BuckNetwork, delta: float):
    k_step = _step_index(scn, delta)
    after = net.with_loads(P_L=scn.number("schedule", "load_step_factor", 1.0) * net.P_L)

    def nets(k):
        return net if k_step is None or k < k_step else after

    return nets


def consensus_spec(scn: Scenario, m: int) -> ctl.ConsensusSpec:
    E = _incidence(_edges(scn, "controller", "comm_edges"), m)
    try:
        return ctl.ConsensusSpec(E, _gain(scn, "M", m), _gain(scn, "K", m))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def buck_initial(net: BuckNetwork, v0: float):
    """Nominal start: node voltages at ``v0``, idle lines, converters feeding their own loads."""
    v = np.full(net.nu, v0)
    i0 = net.G_L @ v + net.I_L + net.P_L / v
    return np.concatenate([net.L * i0, net.C * v, np.zeros(net.mu)]), i0


def run_buck(scn: Scenario) -> RunReport:
    delta, n_steps = scn.delta, scn.n_steps
    net = buck_network(scn)
    nets = buck_schedule(scn, net, delta)
    v_ref = scn.number("controller", "V_ref")
    spec = consensus_spec(scn, net.nu)
    q_star = net.C * v_ref
    nu = net.nu
    controller = ctl.ConsensusController(spec, feedforward=lambda x: buck_feedforward(net, q_star, x[:nu]))
    x0, i0 = buck_initial(net, scn.number("initial", "V", v_ref))
    c0 = np.concatenate([np.zeros(nu), i0])
    plants = {}

    def plant(k):
        cur = nets(k)
        if id(cur) not in plants:
            plants[id(cur)] = buck_sampled(cur, delta)
        return plants[id(cur)]

    t0 = time.perf_counter()
    cl = simulate_closed_loop(plant, controller, x0, c0, n_steps)
    rep = RunReport(controller=cl.controller,
                    controller_names=[f"u_c_{j}" for j in range(nu)] + [f"rho_{j}" for j in range(nu)])
    rep.timings["simulate"] = time.perf_counter() - t0
    traj = rep.trajectory = cl.plant
    rep.reports["energy_balance"] = buck_energy_balance(traj, nets)
    rep.reports["consensus_identity"] = ctl.check_assumption_oc(
        spec, traj.outputs, cl.controller[:, nu:], cl.controller[:, :nu], delta)
    q = traj.states[:, nu:2 * nu]
    kp = [buck_strict_kp_condition(q[k], q[k + 2], nets(k)) for k in range(len(q) - 2)]
    rep.metrics["check_strict_kp_all_steps"] = bool(all(kp))
    y = traj.outputs
    spread = np.linalg.norm(spec.E.T @ spec.M @ y[-1])
    rep.metrics["terminal_consensus_spread"] = float(spread)
    rep.metrics["terminal_consensus_ratio"] = float(spread / np.linalg.norm(y[-1]))
    volts = traj.states[:, nu:2 * nu] / net.C
    settle = traj.times >= scn.number("schedule", "settle_time", 2.5)
    rep.metrics["terminal_mean_voltage_error"] = float(abs(volts[-1].mean() - v_ref))
    if np.any(settle):
        rep.metrics["settled_mean_voltage_error"] = float(np.max(np.abs(volts[settle].mean(axis=1) - v_ref)))
    else:
        rep.skipped["settled_mean_voltage_error"] = "horizon ends before the settle time"
    return rep


# ---------------------------------------------------------------- linear PHS


def lph_batch(scn: Scenario, count_key: str = "instances", m_min: int = 1) -> list[LinearPHS]:
    return lph_instances(scn.seed, int(scn.number("lph", count_key, 100)),
                         int(scn.number("lph", "n_max", 8)), int(scn.number("lph", "m_max", 3)), m_min)


def lph_stabilizer_spec(scn: Scenario, m: int) -> ctl.StabilizerSpec:
    u_star = np.broadcast_to(scn.array("controller", "u_star", 1.0), (m,))
    return ctl.StabilizerSpec(_gain(scn, "K1", m), _gain(scn, "K2", m), u_star)


def run_lph_stabilizer(plant: LinearPHS, spec: ctl.StabilizerSpec, delta: float, n_steps: int,
                       rng: np.random.Generator):
    sysd = lph_sampled(plant, delta)
    controller = ctl.StabilizerController(spec, ctl.LinearKrasovskiiOutput(plant.B.T @ plant.H),
                                          a_s=lambda sys: build_As(plant, spec.K1, spec.K2, delta)[0])
    x0 = rng.standard_normal(plant.n)
    u0 = spec.u_star + rng.standard_normal(plant.m)
    return simulate_closed_loop(sysd, controller, x0, u0, n_steps)


def run_lph_consensus(plant: LinearPHS, spec: ctl.ConsensusSpec, delta: float, n_steps: int,
                      rng: np.random.Generator):
    sysd = lph_sampled(plant, delta)
    controller = ctl.ConsensusController(spec, well_posedness=lambda sys: consensus_step_matrix(plant, spec, delta))
    x0 = rng.standard_normal(plant.n)
    c0 = rng.standard_normal(2 * plant.m)
    return simulate_closed_loop(sysd, controller, x0, c0, n_steps)


def _worst(reports, tolerance):
    """The instance report with the largest failure measure, keeping every instance's checks."""
    worst = max(reports, key=lambda r: r.max_deviation if r.equality else r.max_violation)
    return DissipationReport(worst.residuals, worst.scales, tolerance, checks_ok=all(r.checks_ok for r in reports),
                             equality=worst.equality)


def lph_krasovskii_suite(scn: Scenario, tolerance: float = AUDIT_TOL) -> DissipationReport:
    """Equality audit of the Krasovskii balance on random open-loop runs; returns the worst instance."""
    rng = np.random.default_rng(scn.seed + 1)
    steps = int(scn.number("lph", "steps", 200))
    reports = []
    for plant in lph_batch(scn):
        traj = simulate_open_loop(lph_sampled(plant, scn.delta), rng.standard_normal(plant.n),
                                  rng.standard_normal((steps, plant.m)))
        H, R, BH = plant.H, plant.R, plant.B.T @ plant.H
        supply = SupplyRate(z=lambda w, BH=BH: BH @ w.dsx,
                            w=lambda w, H=H, R=R: float((H @ w.dsx) @ R @ (H @ w.dsx)))
        rep = audit_krasovskii(traj, krasovskii_quadratic(H), supply, tolerance)
        rep.equality = True
        reports.append(rep)
    return _worst(reports, tolerance)


def lph_implication_suite(scn: Scenario, tolerance: float = AUDIT_TOL) -> dict[str, DissipationReport]:
    """Incremental, constructed-Krasovskii and shifted audits on the random batch."""
    rng = np.random.default_rng(scn.seed + 2)
    steps = int(scn.number("lph", "steps", 200))
    delta = scn.delta
    inc, kp, sh = [], [], []
    for plant in lph_batch(scn):
        sysd = lph_sampled(plant, delta)
        F = lph_step_map(plant, delta)
        H = plant.H
        ua = rng.standard_normal((steps, plant.m))
        ub = rng.standard_normal((steps, plant.m))
        ta = simulate_open_loop(sysd, rng.standard_normal(plant.n), ua)
        tb = simulate_open_loop(sysd, rng.standard_normal(plant.n), ub)

        def s_i(x, xp, H=H):
            e = x - xp
            return 0.5 * float(e @ H @ e)

        inc.append(audit_incremental(ta, tb, s_i, tolerance))
        s_hat = construct_kp_from_ip(s_i, F, delta)
        kp.append(audit_krasovskii(ta, explicit_storage(s_hat), output_increment_supply(), tolerance))
        u_star = rng.standard_normal(plant.m)
        x_star = lph_equilibrium(plant, u_star)
        shifted_inputs = u_star + 0.5 * rng.standard_normal((min(steps, 50), plant.m))
        ts = simulate_open_loop(sysd, x_star + rng.standard_normal(plant.n), shifted_inputs)
        sh.append(audit_shifted(ts, F, s_hat, u_star, grad=lph_shifted_gradient(plant, delta, u_star),
                                tolerance=tolerance))
    return {"incremental": _worst(inc, tolerance), "constructed_krasovskii": _worst(kp, tolerance),
            "shifted": _worst(sh, tolerance)}


def lph_stabilizer_suite(scn: Scenario, tolerance: float = 1e-10):
    """Spectral radii, convergence errors and controller identity over the stabilizer batch."""
    rng = np.random.default_rng(scn.seed + 3)
    delta = scn.delta
    steps = int(scn.number("lph", "stabilizer_steps", 2000))
    radii, errors, identities, invertible = [], [], [], []
    for plant in lph_batch(scn, "stabilizer_instances"):
        spec = lph_stabilizer_spec(scn, plant.m)
        _, ok = build_As(plant, spec.K1, spec.K2, delta)
        invertible.append(ok)
        phi, _ = stabilizer_closed_loop_map(plant, spec.K1, spec.K2, spec.u_star, delta)
        radii.append(spectral_radius(phi))
        cl = run_lph_stabilizer(plant, spec, delta, steps, rng)
        x_star = lph_equilibrium(plant, spec.u_star)
        errors.append(float(np.linalg.norm(cl.plant.states[-1] - x_star)
                            + np.linalg.norm(cl.controller[-1] - spec.u_star)))
        zs = [(plant.B.T @ plant.H) @ cl.plant.delta_sigma_op(k) for k in range(steps - 1)]
        identities.append(ctl.check_assumption_stab(spec, cl.controller, zs, delta, tolerance))
    return {"spectral_radius_max": max(radii), "terminal_error_max": max(errors),
            "all_invertible": all(invertible), "identity": _worst(identities, tolerance)}


def lph_consensus_suite(scn: Scenario, tolerance: float = 1e-10):
    """Consensus loops under each configured disturbance, on the stabilizer batch with ``m >= 2``."""
    rng = np.random.default_rng(scn.seed + 4)
    delta = scn.delta
    steps = int(scn.number("lph", "stabilizer_steps", 2000))
    levels = np.atleast_1d(scn.array("controller", "disturbances", [0.0, 1.0]))
    spreads, radii, identities, invertible = [], [], [], []
    for plant in lph_batch(scn, "stabilizer_instances", m_min=2):
        m = plant.m
        spec = ctl.ConsensusSpec(ctl.incidence_matrix([(j, j + 1) for j in range(m - 1)], m),
                                 _gain(scn, "M", m), _gain(scn, "K", m))
        direction = rng.standard_normal(plant.n)
        _, ok = build_Ac(plant, spec, delta)
        invertible.append(ok)
        radii.append(consensus_spectral_radius(plant, spec, delta))
        for level in levels:
            disturbed = plant.with_disturbance(level * direction)
            cl = run_lph_consensus(disturbed, spec, delta, steps, rng)
            y = cl.plant.outputs
            spreads.append(float(np.linalg.norm(spec.E.T @ spec.M @ y[-1])))
            identities.append(ctl.check_assumption_oc(spec, y, cl.controller[:, m:], cl.controller[:, :m],
                                                      delta, tolerance))
    return {"spectral_radius_max": max(radii), "terminal_spread_max": max(spreads),
            "all_invertible": all(invertible), "identity": _worst(identities, tolerance)}


def run_lph(scn: Scenario) -> RunReport:
    """Single closed loop on the first instance of the batch."""
    plant = lph_batch(scn)[0]
    rng = np.random.default_rng(scn.seed)
    rep = RunReport()
    t0 = time.perf_counter()
    m = plant.m
    if scn.controller == "stabilizer":
        spec = lph_stabilizer_spec(scn, m)
        cl = run_lph_stabilizer(plant, spec, scn.delta, scn.n_steps, rng)
        rep.controller_names = [f"u_{j}" for j in range(m)]
        x_star = lph_equilibrium(plant, spec.u_star)
        rep.metrics["terminal_state_error"] = float(np.linalg.norm(cl.plant.states[-1] - x_star))
    else:
        if m < 2:
            raise ConfigError("consensus needs at least two inputs; the first instance has one")
        spec = ctl.ConsensusSpec(ctl.incidence_matrix([(j, j + 1) for j in range(m - 1)], m),
                                 _gain(scn, "M", m), _gain(scn, "K", m))
        cl = run_lph_consensus(plant, spec, scn.delta, scn.n_steps, rng)
        rep.controller_names = [f"u_{j}" for j in range(m)] + [f"rho_{j}" for j in range(m)]
        rep.metrics["terminal_consensus_spread"] = float(np.linalg.norm(spec.E.T @ spec.M @ cl.plant.outputs[-1]))
    rep.timings["simulate"] = time.perf_counter() - t0
    rep.trajectory = cl.plant
    rep.controller = cl.controller
    return rep


def simulate(scn: Scenario) -> RunReport:
    return {"boost": run_boost, "buck": run_buck, "lph": run_lph}[scn.plant](scn)


SUITES = ("krasovskii", "stabilizer", "consensus", "implications")


def verify(scn: Scenario, suite: str, tolerance: float | None = None) -> RunReport:
    """Run an audit suite; the report's ``audits_ok`` tells whether everything passed."""
    if suite not in SUITES:
        raise ConfigError(f"unknown suite {suite!r}; choose from {', '.join(SUITES)}")
    tol = AUDIT_TOL if tolerance is None else tolerance
    t0 = time.perf_counter()
    if scn.plant in ("boost", "buck"):
        valid = {"boost": ("krasovskii", "stabilizer"), "buck": ("krasovskii", "consensus")}[scn.plant]
        if suite not in valid:
            raise ConfigError(f"suite {suite!r} does not apply to the {scn.plant} scenario")
        rep = simulate(scn)
        keep = "energy_balance" if suite == "krasovskii" else next(k for k in rep.reports if k != "energy_balance")
        for key in list(rep.reports):
            if key != keep:
                del rep.reports[key]
            else:
                rep.reports[key].tolerance = tol
        if suite != "consensus":
            rep.metrics = {k: v for k, v in rep.metrics.items() if not k.startswith("check_")}
    else:
        rep = RunReport()
        if suite == "krasovskii":
            rep.reports["krasovskii_equality"] = lph_krasovskii_suite(scn, tol)
        elif suite == "implications":
            rep.reports.update(lph_implication_suite(scn, tol))
        elif suite == "stabilizer":
            res = lph_stabilizer_suite(scn, tol)
            rep.reports["stabilizer_identity"] = res["identity"]
            rep.metrics["spectral_radius_max"] = res["spectral_radius_max"]
            rep.metrics["terminal_error_max"] = res["terminal_error_max"]
            rep.metrics["check_spectral_radius_below_one"] = res["spectral_radius_max"] < 1.0
        else:
            res = lph_consensus_suite(scn, tol)
            rep.reports["consensus_identity"] = res["identity"]
            rep.metrics["spectral_radius_max"] = res["spectral_radius_max"]
            rep.metrics["terminal_spread_max"] = res["terminal_spread_max"]
            rep.metrics["check_spectral_radius_below_one"] = res["spectral_radius_max"] < 1.0
    rep.timings["verify"] = time.perf_counter() - t0
    return rep


def equilibrium(scn: Scenario) -> dict[str, np.ndarray | float]:
    """Equilibrium of the configured plant and the sup-norm of the vector field there."""
    if scn.plant == "boost":
        net = boost_network(scn)
        i_s, v, i, u = boost_equilibrium(net, scn.number("controller", "V_ref"))
        x = np.concatenate([i_s, v, i])
        res = float(np.max(np.abs(boost_dynamics(net).f(x, u))))
        return {"I_s": i_s, "V": v, "I": i, "u": u, "residual": res}
    if scn.plant == "lph":
        plant = lph_batch(scn)[0]
        u = np.broadcast_to(scn.array("controller", "u_star", 1.0), (plant.m,)).copy()
        x = lph_equilibrium(plant, u)
        res = float(np.max(np.abs(lph_dynamics(plant).f(x, u))))
        return {"x": x, "u": u, "residual": res}
    raise ConfigError("the consensus scenario has no prescribed equilibrium")


# ---------------------------------------------------------------- continuous-time comparison


def boost_continuous_loop(net: BoostNetwork, spec: ctl.StabilizerSpec) -> ContinuousDynamics:
    """Plant with ``K1 udot = K2 (u* - u) - (I_s' * V - I_s * V')`` on the state ``(x, u)``."""
    cont = boost_dynamics(net)
    nu, n = net.nu, net.n
    k1inv = np.linalg.inv(spec.K1)

    def f(w, _u):
        x, u = w[:n], w[n:]
        fx = cont.f(x, u)
        i_s, v, _ = net.split(x)
        z = fx[:nu] * v - i_s * fx[nu:2 * nu]
        return np.concatenate([fx, k1inv @ (spec.K2 @ (spec.u_star - u) - z)])

    def jac(w, _u):
        x, u = w[:n], w[n:]
        fx, jx, ju = cont.f(x, u), cont.jacobian_x(x, u), cont.jacobian_u(x, u)
        i_s, v, _ = net.split(x)
        dz_dx = np.diag(v) @ jx[:nu] - np.diag(i_s) @ jx[nu:2 * nu]
        dz_dx[:, nu:2 * nu] += np.diag(fx[:nu])
        dz_dx[:, :nu] -= np.diag(fx[nu:2 * nu])
        dz_du = np.diag(v) @ ju[:nu] - np.diag(i_s) @ ju[nu:2 * nu]
        return np.block([[jx, ju], [-k1inv @ dz_dx, -k1inv @ (spec.K2 + dz_du)]])

    return ContinuousDynamics(n + nu, 0, f, jac)


def buck_continuous_loop(net: BuckNetwork, spec: ctl.ConsensusSpec, q_star) -> ContinuousDynamics:
    """Plant with the continuous consensus law on the state ``(x, u_c, rho)``."""
    cont = buck_dynamics(net)
    nu, n = net.nu, net.n
    cy = np.zeros((nu, n))
    cy[:, :nu] = np.diag(1.0 / net.L)
    dff = np.zeros((nu, n))
    dff[:, :nu] = np.diag(net.R / net.L)
    lap, K = spec.laplacian, spec.K

    def parts(w):
        x, uc, rho = w[:n], w[n:n + nu], w[n + nu:]
        u = uc + buck_feedforward(net, q_star, x[:nu])
        return x, u, rho

    def f(w, _u):
        x, u, rho = parts(w)
        xd = cont.f(x, u)
        y = cy @ x
        rho_d = y - rho
        return np.concatenate([xd, -lap @ y - K @ (cy @ xd - rho_d), rho_d])

    def jac(w, _u):
        x, u, _ = parts(w)
        jx, ju = cont.jacobian_x(x, u), cont.jacobian_u(x, u)
        dxd_dx = jx + ju @ dff
        z = np.zeros((nu, nu))
        return np.block([
            [dxd_dx, ju, np.zeros((n, nu))],
            [-lap @ cy - K @ (cy @ dxd_dx - cy), -K @ cy @ ju, -K],
            [cy, z, -np.eye(nu)],
        ])

    return ContinuousDynamics(n + 2 * nu, 0, f, jac)


def _piecewise_reference(loops, x0, horizon: float, delta: float, k_switch: int | None, fine_factor: int):
    """Reference run switching the continuous loop at sample ``k_switch``."""
    fine = delta / fine_factor
    n_total = int(round(horizon / delta))
    cut = n_total if k_switch is None else min(max(k_switch, 0), n_total)
    pieces = []
    x = np.asarray(x0, dtype=float)
    for loop, n in ((loops[0], cut), (loops[1], n_total - cut)):
        if n == 0:
            continue
        tr = reference_continuous_simulate(loop, x, n * delta, fine, sample_delta=delta)
        pieces.append(tr.states if not pieces else tr.states[1:])
        x = tr.states[-1]
    return np.vstack(pieces)


def compare(scn: Scenario, fine_factor: int | None = None) -> tuple[list[str], np.ndarray]:
    """Sampled-loop inputs next to those of the fine-step continuous-time loop."""
    factor = int(fine_factor or scn.number("compare", "fine_factor", 4))
    delta = scn.delta
    k_step = _step_index(scn, delta)
    sampled = simulate(scn)
    if scn.plant == "boost":
        net = boost_network(scn)
        nets = boost_schedule(scn, net, delta)
        v_ref = scn.number("controller", "V_ref")
        *_, u_star = boost_equilibrium(net, v_ref)
        spec = ctl.StabilizerSpec(_gain(scn, "K1", net.nu), _gain(scn, "K2", net.nu), u_star)
        loops = [boost_continuous_loop(nets(0), spec), boost_continuous_loop(nets(10**12), spec)]
        w0 = np.concatenate([sampled.trajectory.states[0], sampled.trajectory.inputs[0]])
        ref = _piecewise_reference(loops, w0, scn.horizon, delta, k_step, factor)
        u_cont = ref[:, net.n:]
        u_samp = sampled.trajectory.inputs
        names = [f"u_{j}" for j in range(net.nu)]
    elif scn.plant == "buck":
        net = buck_network(scn)
        nets = buck_schedule(scn, net, delta)
        spec = consensus_spec(scn, net.nu)
        q_star = net.C * scn.number("controller", "V_ref")
        loops = [buck_continuous_loop(nets(0), spec, q_star), buck_continuous_loop(nets(10**12), spec, q_star)]
        w0 = np.concatenate([sampled.trajectory.states[0], sampled.controller[0]])
        ref = _piecewise_reference(loops, w0, scn.horizon, delta, k_step, factor)
        u_cont = ref[:, net.n:net.n + net.nu]
        u_samp = sampled.controller[:, :net.nu]
        names = [f"u_c_{j}" for j in range(net.nu)]
    else:
        if scn.controller != "stabilizer":
            raise ConfigError("comparison for linear systems is available for the stabilizer only")
        plant = lph_batch(scn)[0]
        spec = lph_stabilizer_spec(scn, plant.m)
        cont = lph_dynamics(plant)
        bh = plant.B.T @ plant.H
        k1inv = np.linalg.inv(spec.K1)
        n = plant.n

        def f(w, _u):
            x, u = w[:n], w[n:]
            xd = cont.f(x, u)
            return np.concatenate([xd, k1inv @ (spec.K2 @ (spec.u_star - u) - bh @ xd)])

        jac = np.block([[plant.A, plant.B], [-k1inv @ bh @ plant.A, -k1inv @ (spec.K2 + bh @ plant.B)]])
        loop = ContinuousDynamics(n + plant.m, 0, f, lambda w, _u: jac)
        w0 = np.concatenate([sampled.trajectory.states[0], sampled.trajectory.inputs[0]])
        ref = _piecewise_reference([loop, loop], w0, scn.horizon, delta, None, factor)
        u_cont = ref[:, n:]
        u_samp = sampled.trajectory.inputs
        names = [f"u_{j}" for j in range(plant.m)]
    k = np.arange(len(u_samp))
    header = ["k", "t"] + [f"{c}_sampled" for c in names] + [f"{c}_continuous" for c in names]
    table = np.column_stack([k, k * delta, u_samp, u_cont[:len(u_samp)]])
    return header, table
