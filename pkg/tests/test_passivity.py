import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from krasovskii.dynamics import Trajectory, simulate_open_loop
from krasovskii.passivity import (Certificate, DissipationReport, NonpositiveCharge, StorageFunction, SupplyRate,
                                  WindowTooShort, audit_incremental, audit_krasovskii, audit_shifted,
                                  buck_strict_kp_condition, construct_kp_from_ip, explicit_storage,
                                  krasovskii_quadratic, lph_krasovskii_certificate, output_increment_supply,
                                  shifted_output)
from krasovskii.plants import (lph_equilibrium, lph_sampled, lph_shifted_gradient, lph_step_map, random_lph)
from krasovskii.scenario import bundled
from krasovskii.experiments import buck_network

from conftest import scalar_lph


def lph_supply(plant, inflate=0.0):
    H, R, BH = plant.H, plant.R, plant.B.T @ plant.H
    return SupplyRate(z=lambda w: BH @ w.dsx, w=lambda w: float((H @ w.dsx) @ R @ (H @ w.dsx)) + inflate)


def lph_run(plant, rng, steps=60, delta=0.2, x0=None, inputs=None):
    x0 = rng.standard_normal(plant.n) if x0 is None else x0
    inputs = rng.standard_normal((steps, plant.m)) if inputs is None else inputs
    return simulate_open_loop(lph_sampled(plant, delta), x0, inputs)


def half_h_increment(H):
    def s_i(x, xp):
        e = x - xp
        return 0.5 * float(e @ H @ e)
    return s_i


def test_audit_constant_equilibrium(rng):
    plant = random_lph(rng, 4, 2)
    u = rng.standard_normal(2)
    x = lph_equilibrium(plant, u)
    traj = lph_run(plant, rng, 20, x0=x, inputs=np.tile(u, (20, 1)))
    rep = audit_krasovskii(traj, krasovskii_quadratic(plant.H), lph_supply(plant))
    assert rep.max_deviation < 1e-12


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6), st.floats(0.01, 1.0))
def test_krasovskii_balance_is_an_equality(seed, n, delta):
    rng = np.random.default_rng(seed)
    plant = random_lph(rng, n, int(rng.integers(1, n + 1)))
    traj = lph_run(plant, rng, 40, delta)
    rep = audit_krasovskii(traj, krasovskii_quadratic(plant.H), lph_supply(plant))
    assert rep.max_deviation <= 1e-10
    assert rep.satisfied


def test_inflated_dissipation_detected(rng):
    plant = random_lph(rng, 3, 1)
    traj = lph_run(plant, rng)
    rep = audit_krasovskii(traj, krasovskii_quadratic(plant.H), lph_supply(plant, inflate=1.0))
    assert not rep.satisfied


def test_report_csv(tmp_path):
    rep = DissipationReport(np.array([0.0, -1.0, 2e-9]), np.zeros(3), tolerance=1e-9)
    assert rep.max_violation == pytest.approx(2e-9)
    assert not rep.satisfied
    rep.to_csv(tmp_path / "r.csv")
    rows = list(csv.reader(open(tmp_path / "r.csv")))
    assert rows[0] == ["k", "residual"]
    assert rows[-2] == ["max_violation", "tolerance", "satisfied"]
    assert rows[-1][2] == "False"


def test_report_equality_mode():
    rep = DissipationReport(np.array([-1.0, 0.0]), np.zeros(2), tolerance=1e-9, equality=True)
    assert rep.max_violation <= 0.0
    assert not rep.satisfied


def test_short_trajectory_rejected(rng):
    traj = lph_run(random_lph(rng, 2, 1), rng, steps=1)
    with pytest.raises(WindowTooShort):
        audit_krasovskii(traj, krasovskii_quadratic(np.eye(2)), SupplyRate(lambda w: np.zeros(1)))


def test_solver_tolerance_guard(rng):
    traj = lph_run(random_lph(rng, 2, 1), rng, steps=5)
    with pytest.raises(ValueError):
        audit_krasovskii(traj, krasovskii_quadratic(np.eye(2)), SupplyRate(lambda w: np.zeros(1)), tolerance=1e-12)


def test_certificates():
    assert lph_krasovskii_certificate(np.eye(2), np.eye(2)) is Certificate.STRICTLY_KRASOVSKII_PASSIVE
    assert lph_krasovskii_certificate(np.eye(2), np.diag([1.0, 0.0])) is Certificate.KRASOVSKII_PASSIVE
    assert lph_krasovskii_certificate(np.diag([1.0, -1.0]), np.eye(2)) is Certificate.INCONCLUSIVE


def test_incremental_audits(rng):
    plant = random_lph(rng, 4, 2)
    s_i = half_h_increment(plant.H)
    a = lph_run(plant, rng)
    rep_same = audit_incremental(a, a, s_i)
    assert rep_same.satisfied and np.max(np.abs(rep_same.residuals)) == 0.0
    b = lph_run(plant, rng)
    assert audit_incremental(a, b, s_i).satisfied
    assert not audit_incremental(a, b, lambda x, xp: -float((x - xp) @ (x - xp))).satisfied


def test_constructed_storage_matches_krasovskii(rng):
    plant = random_lph(rng, 4, 2)
    delta = 0.2
    F = lph_step_map(plant, delta)
    s_hat = construct_kp_from_ip(half_h_increment(plant.H), F, delta)
    x, u = rng.standard_normal(4), rng.standard_normal(2)
    dx = (F(x, u) - x) / delta
    assert s_hat(x, u) == pytest.approx(0.5 * dx @ plant.H @ dx, rel=1e-12)
    x_star = lph_equilibrium(plant, u)
    assert abs(s_hat(x_star, u)) < 1e-20
    traj = lph_run(plant, rng, delta=delta)
    assert audit_krasovskii(traj, explicit_storage(s_hat), output_increment_supply()).satisfied


def _scalar_closed_form(delta, x, u, u_star):
    # scalar J=0, R=H=B=1: the integrand is affine in u, so the segment integral is its midpoint value
    p = 1.0 / (1.0 / delta + 0.5)
    r = 1.0 / delta - 0.5
    um = 0.5 * (u + u_star)
    x1 = p * (r * x + um)
    x2 = p * (r * x1 + u_star)
    return delta * (x2 - x1) * (p * r * p - p) / delta**2


@pytest.mark.parametrize("delta,x,u,u_star", [(0.1, 1.0, 2.0, 0.5), (0.5, -3.0, 0.0, 1.0), (0.01, 0.2, -1.0, 4.0)])
def test_shifted_output_closed_form(delta, x, u, u_star):
    plant = scalar_lph()
    F = lph_step_map(plant, delta)
    s_hat = construct_kp_from_ip(half_h_increment(plant.H), F, delta)
    expect = _scalar_closed_form(delta, x, u, u_star)
    got = shifted_output(F, s_hat, [x], [u], [u_star], delta, grad=lph_shifted_gradient(plant, delta, [u_star]))
    assert got[0] == pytest.approx(expect, abs=1e-12 * (1 + abs(expect)))
    fd = shifted_output(F, s_hat, [x], [u], [u_star], delta)
    assert fd[0] == pytest.approx(expect, rel=1e-6, abs=1e-8)


def test_shifted_output_zero_at_equilibrium(rng):
    plant = random_lph(rng, 3, 2)
    F = lph_step_map(plant, 0.2)
    s_hat = construct_kp_from_ip(half_h_increment(plant.H), F, 0.2)
    u_star = rng.standard_normal(2)
    y = shifted_output(F, s_hat, lph_equilibrium(plant, u_star), u_star, u_star, 0.2)
    np.testing.assert_allclose(y, 0.0, atol=1e-8)
    # away from x* the output need not vanish, but its supply does
    y_off = shifted_output(F, s_hat, rng.standard_normal(3), u_star, u_star, 0.2)
    assert np.max(np.abs(y_off)) > 1e-6
    assert (u_star - u_star) @ y_off == 0.0


def test_shifted_audit(rng):
    plant = random_lph(rng, 4, 2)
    delta = 0.2
    F = lph_step_map(plant, delta)
    s_hat = construct_kp_from_ip(half_h_increment(plant.H), F, delta)
    u_star = rng.standard_normal(2)
    traj = lph_run(plant, rng, 30, delta, inputs=u_star + rng.standard_normal((30, 2)))
    assert audit_shifted(traj, F, s_hat, u_star, grad=lph_shifted_gradient(plant, delta, u_star)).satisfied


def test_strict_kp_condition():
    net = buck_network(bundled("buck4"))
    q = net.C * 380.0
    assert buck_strict_kp_condition(q, q, net)
    assert not buck_strict_kp_condition(q / 100, q / 100, net)
    no_power = net.with_loads(P_L=np.zeros(net.nu))
    assert buck_strict_kp_condition(q / 1e4, q / 1e4, no_power)
    with pytest.raises(NonpositiveCharge):
        buck_strict_kp_condition(-q, q, net)


def test_strict_kp_zero_dissipation_gives_rest(rng):
    # with H, R positive definite, zero dissipation on a step forces Delta sigma x = 0
    plant = random_lph(rng, 3, 1)
    u = np.array([0.4])
    traj = lph_run(plant, rng, 10, x0=lph_equilibrium(plant, u), inputs=np.tile(u, (10, 1)))
    rep = audit_krasovskii(traj, krasovskii_quadratic(plant.H), lph_supply(plant))
    for k in range(len(rep.residuals)):
        dsx = traj.delta_sigma_op(k)
        w = (plant.H @ dsx) @ plant.R @ (plant.H @ dsx)
        assert w < 1e-20 and np.max(np.abs(dsx)) < 1e-10


def test_storage_function_wrapper():
    traj = Trajectory(0.5, np.array([[0.0], [1.0], [3.0]]), np.zeros((2, 1)))
    s = StorageFunction(lambda w: w.dx[0] ** 2, "sq")
    from krasovskii.passivity import Window
    assert s(Window(traj, 1)) == 16.0
