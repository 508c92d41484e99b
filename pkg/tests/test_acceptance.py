"""Acceptance criteria 1-8, each at its stated tolerance and runtime budget.

Every criterion prints one ``criterion N: PASS|FAIL`` line to the terminal.
"""

import time

import numpy as np
import pytest

from krasovskii import experiments as ex
from krasovskii.dynamics import midpoint_step
from krasovskii.numerics import finite_difference_jacobian
from krasovskii.passivity import construct_kp_from_ip, shifted_output
from krasovskii.plants import (buck_pi_jacobian, buck_sampled, lph_sampled, lph_shifted_gradient, lph_step_map,
                               random_lph)
from krasovskii.scenario import bundled

from conftest import scalar_lph


@pytest.fixture
def report(pytestconfig):
    capman = pytestconfig.pluginmanager.getplugin("capturemanager")

    def emit(number, ok, detail):
        with capman.global_and_fixture_disabled():
            print(f"\ncriterion {number}: {'PASS' if ok else 'FAIL'} ({detail})")
        assert ok, detail

    return emit


def timed(fn, *args):
    t0 = time.perf_counter()
    out = fn(*args)
    return out, time.perf_counter() - t0


@pytest.fixture(scope="module")
def lph_scenario():
    return bundled("lph_random")


@pytest.fixture(scope="module")
def stabilizer_suite(lph_scenario):
    return timed(ex.lph_stabilizer_suite, lph_scenario, 1e-10)


@pytest.fixture(scope="module")
def consensus_suite(lph_scenario):
    return timed(ex.lph_consensus_suite, lph_scenario, 1e-10)


@pytest.fixture(scope="module")
def boost_run():
    return timed(ex.run_boost, bundled("boost4"))


@pytest.fixture(scope="module")
def buck_run():
    return timed(ex.run_buck, bundled("buck4"))


def test_criterion_1_krasovskii_equality(lph_scenario, report):
    rep, secs = timed(ex.lph_krasovskii_suite, lph_scenario, 1e-9)
    ok = rep.equality_holds and secs < 10.0
    report(1, ok, f"max normalized |residual| {rep.max_deviation:.2e} <= 1e-9, {secs:.1f} s < 10 s")


def test_criterion_2_implications(lph_scenario, report):
    reps, secs = timed(ex.lph_implication_suite, lph_scenario, 1e-9)
    ok = all(r.satisfied for r in reps.values()) and secs < 30.0
    worst = ", ".join(f"{k} {r.max_violation:.2e}" for k, r in reps.items())
    report(2, ok, f"max violation {worst}; {secs:.1f} s < 30 s")


def test_criterion_3_stabilizer_certification(stabilizer_suite, report):
    res, secs = stabilizer_suite
    ok = (res["all_invertible"] and res["spectral_radius_max"] < 1.0
          and res["terminal_error_max"] <= 1e-8 and secs < 20.0)
    report(3, ok, f"max radius {res['spectral_radius_max']:.4f}, max terminal error "
                  f"{res['terminal_error_max']:.2e}, {secs:.1f} s < 20 s")


def test_criterion_4_boost_regulation(boost_run, report):
    rep, secs = boost_run
    settled = rep.metrics["settled_max_voltage_error"]
    energy = rep.reports["energy_balance"].max_deviation
    ok = settled <= 0.5 and energy <= 1e-8 and secs < 60.0 and rep.metrics["duty_clamped_steps"] == 0
    report(4, ok, f"max |V - 380| for t >= 2.5 s {settled:.2e} V, energy residual {energy:.2e}, {secs:.1f} s < 60 s")


def test_criterion_5_buck_current_sharing(buck_run, report):
    rep, secs = buck_run
    ratio = rep.metrics["terminal_consensus_ratio"]
    mean_err = rep.metrics["settled_mean_voltage_error"]
    energy = rep.reports["energy_balance"].max_deviation
    ok = (ratio <= 1e-3 and mean_err <= 0.5 and rep.metrics["check_strict_kp_all_steps"]
          and energy <= 1e-8 and secs < 120.0)
    report(5, ok, f"|E^T M y|/|y| {ratio:.2e}, max |mean V - 380| {mean_err:.3f} V, "
                  f"strict KP {rep.metrics['check_strict_kp_all_steps']}, energy {energy:.2e}, {secs:.1f} s < 120 s")


def test_criterion_6_disturbance_independence(consensus_suite, report):
    res, _ = consensus_suite
    ok = res["all_invertible"] and res["terminal_spread_max"] <= 1e-8 and res["spectral_radius_max"] < 1.0
    report(6, ok, f"max terminal |E^T M y| {res['terminal_spread_max']:.2e} over both d, "
                  f"max radius {res['spectral_radius_max']:.4f}")


def test_criterion_7_controller_identities(stabilizer_suite, consensus_suite, boost_run, buck_run, report):
    devs = {
        "linear stabilizer": stabilizer_suite[0]["identity"].max_deviation,
        "linear consensus": consensus_suite[0]["identity"].max_deviation,
        "boost": boost_run[0].reports["stabilizer_identity"].max_deviation,
        "buck": buck_run[0].reports["consensus_identity"].max_deviation,
    }
    ok = max(devs.values()) <= 1e-10
    report(7, ok, ", ".join(f"{k} {v:.2e}" for k, v in devs.items()))


def test_criterion_8_oracles(report):
    rng = np.random.default_rng(8)
    cayley = 0.0
    for _ in range(20):
        plant = random_lph(rng, 6, 2)
        delta = float(rng.uniform(0.01, 1.0))
        x, u = rng.standard_normal(6), rng.standard_normal(2)
        lhs = np.eye(6) / delta - plant.A / 2
        expect = np.linalg.solve(lhs, (np.eye(6) / delta + plant.A / 2) @ x + plant.B @ u)
        cayley = max(cayley, np.max(np.abs(midpoint_step(lph_sampled(plant, delta), x, u) - expect)))

    net = ex.buck_network(bundled("buck4"))
    sys = buck_sampled(net, 1e-4)
    jac_err = 0.0
    for _ in range(10):
        x0 = np.concatenate([rng.uniform(0, 0.1, 4), net.C * rng.uniform(300, 420, 4), rng.uniform(0, 1e-5, 4)])
        x1 = x0 * (1 + 0.01 * rng.standard_normal(12))
        pi = buck_pi_jacobian(net, x1, 1e-4)
        fd = finite_difference_jacobian(lambda z: sys.residual(x0, z, np.full(4, 380.0)), x1)
        jac_err = max(jac_err, np.max(np.abs(fd - pi)) / np.max(np.abs(pi)))

    quad = 0.0
    plant = scalar_lph()
    for delta, x, u, u_star in [(0.1, 1.0, 2.0, 0.5), (0.5, -3.0, 0.0, 1.0), (0.01, 0.2, -1.0, 4.0)]:
        F = lph_step_map(plant, delta)
        s_hat = construct_kp_from_ip(lambda a, b: 0.5 * float((a - b) @ (a - b)), F, delta)
        p, r = 1.0 / (1.0 / delta + 0.5), 1.0 / delta - 0.5
        x1 = p * (r * x + 0.5 * (u + u_star))
        exact = (p * (r * x1 + u_star) - x1) * (p * r * p - p) / delta
        got = shifted_output(F, s_hat, [x], [u], [u_star], delta, grad=lph_shifted_gradient(plant, delta, [u_star]))
        quad = max(quad, abs(got[0] - exact) / (1 + abs(exact)))

    ok = cayley <= 1e-12 and jac_err <= 1e-5 and quad <= 1e-12
    report(8, ok, f"Cayley {cayley:.1e}, buck Jacobian relative {jac_err:.1e}, quadrature {quad:.1e}")
