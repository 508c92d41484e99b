import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from krasovskii.controllers import LinearKrasovskiiOutput, StabilizerController, StabilizerSpec
from krasovskii.dynamics import (ContinuousDynamics, IndexOutOfRange, SampledSystem, Scheme, Trajectory,
                                 euler_step, find_equilibrium, midpoint_step, reference_continuous_simulate,
                                 simulate_closed_loop, simulate_open_loop)
from krasovskii.numerics import spectral_radius
from krasovskii.plants import lph_equilibrium, lph_sampled, random_lph, stabilizer_closed_loop_map

from conftest import scalar_decay, scalar_lph

ZERO_FIELD = ContinuousDynamics(2, 1, lambda x, u: np.zeros(2), lambda x, u: np.zeros((2, 2)),
                                lambda x, u: np.zeros((2, 1)))


def test_midpoint_scalar_decay():
    x1 = midpoint_step(scalar_decay(0.1), [1.0], [0.0])
    assert x1[0] == pytest.approx(0.9047619048, abs=1e-10)
    assert x1[0] == pytest.approx(1.9 / 2.1, abs=1e-12)


def test_midpoint_equilibrium_and_zero_field():
    assert midpoint_step(scalar_decay(0.1), [1.0], [1.0])[0] == pytest.approx(1.0, abs=1e-14)
    x = np.array([0.3, -2.0])
    np.testing.assert_array_equal(midpoint_step(SampledSystem(ZERO_FIELD, 0.1), x, [5.0]), x)


def test_euler_step():
    sys = SampledSystem(scalar_decay().source, 0.1, Scheme.FORWARD_EULER)
    assert euler_step(sys, [1.0], [0.0])[0] == pytest.approx(0.9)
    sys0 = SampledSystem(ZERO_FIELD, 0.1, Scheme.FORWARD_EULER)
    np.testing.assert_array_equal(euler_step(sys0, [1.0, 2.0], [3.0]), [1.0, 2.0])
    with pytest.raises(ValueError):
        SampledSystem(ZERO_FIELD, 0.0)


def test_difference_operators():
    traj = Trajectory(0.5, np.array([[0.0], [1.0], [1.0]]), np.zeros((2, 1)))
    assert traj.delta_op(0)[0] == 2.0
    assert traj.sigma_op(0)[0] == 0.5
    const = Trajectory(0.1, np.full((4, 2), 3.25), np.zeros((3, 1)))
    np.testing.assert_array_equal(const.delta_op(1), 0.0)
    np.testing.assert_array_equal(const.sigma_op(2), 3.25)
    with pytest.raises(IndexOutOfRange):
        const.delta_sigma_op(2)


@settings(max_examples=50, deadline=None)
@given(arrays(float, (2, 3), elements=st.floats(-100, 100, allow_nan=False)),
       st.floats(1e-3, 10.0))
def test_delta_of_quadratic(xs, delta):
    # Delta(|x|^2_P / 2) = (Delta x)^T P sigma x under the midpoint rule
    p = np.array([[2.0, 0.3, 0.0], [0.3, 1.0, 0.2], [0.0, 0.2, 0.5]])
    traj = Trajectory(delta, xs, np.zeros((1, 1)))
    lhs = (0.5 * xs[1] @ p @ xs[1] - 0.5 * xs[0] @ p @ xs[0]) / delta
    rhs = traj.delta_op(0) @ p @ traj.sigma_op(0)
    assert lhs == pytest.approx(rhs, rel=1e-9, abs=1e-9 * (1 + np.abs(xs).max() ** 2 / delta))


def test_open_loop_geometric_decay():
    traj = simulate_open_loop(scalar_decay(0.1), [1.0], np.zeros((10, 1)))
    assert traj.states[-1, 0] == pytest.approx((1.9 / 2.1) ** 10, rel=1e-12)
    assert traj.states[-1, 0] == pytest.approx(0.9047619048**10, rel=1e-9)


def test_open_loop_constant_cases():
    traj = simulate_open_loop(SampledSystem(ZERO_FIELD, 0.2), [1.0, -1.0], np.ones((5, 1)))
    np.testing.assert_array_equal(traj.states, np.tile([1.0, -1.0], (6, 1)))
    eq = find_equilibrium(scalar_decay(), [1.0], [0.0])
    traj = simulate_open_loop(scalar_decay(), eq.x_star, np.tile(eq.u_star, (8, 1)))
    np.testing.assert_allclose(traj.states, 1.0, atol=1e-12)


def test_cayley_exactness(rng):
    for _ in range(10):
        plant = random_lph(rng, 5, 2)
        delta = 0.1
        x, u = rng.standard_normal(5), rng.standard_normal(2)
        x1 = midpoint_step(lph_sampled(plant, delta), x, u)
        lhs = np.eye(5) / delta - plant.A / 2
        expect = np.linalg.solve(lhs, (np.eye(5) / delta + plant.A / 2) @ x + plant.B @ u)
        np.testing.assert_allclose(x1, expect, atol=1e-12)


def test_step_residual_invariant(rng):
    plant = random_lph(rng, 4, 2)
    sys = lph_sampled(plant, 0.2)
    traj = simulate_open_loop(sys, rng.standard_normal(4), rng.standard_normal((30, 2)))
    for k in range(traj.n_steps):
        assert np.max(np.abs(sys.residual(traj.states[k], traj.states[k + 1], traj.inputs[k]))) <= 1e-12


def test_find_equilibrium_linear(rng):
    plant = random_lph(rng, 5, 2)
    u = rng.standard_normal(2)
    eq = find_equilibrium(lph_sampled(plant, 0.1), u, np.zeros(5))
    np.testing.assert_allclose(eq.x_star, np.linalg.solve(plant.A, -plant.B @ u), atol=1e-10)
    guess = np.array([4.0, 5.0])
    np.testing.assert_array_equal(find_equilibrium(SampledSystem(ZERO_FIELD, 0.1), [0.0], guess).x_star, guess)


def _stabilizer(plant, delta, u_star=0.0, k1=1.0, k2=1.0):
    spec = StabilizerSpec(k1, k2, np.full(plant.m, u_star))
    return spec, StabilizerController(spec, LinearKrasovskiiOutput(plant.B.T @ plant.H))


def test_closed_loop_from_equilibrium():
    plant = scalar_lph()
    spec, ctl = _stabilizer(plant, 0.1, u_star=0.7)
    x_star = lph_equilibrium(plant, spec.u_star)
    cl = simulate_closed_loop(lph_sampled(plant, 0.1), ctl, x_star, spec.u_star, 50)
    np.testing.assert_allclose(cl.plant.states, x_star[0], atol=1e-12)
    np.testing.assert_allclose(cl.controller, 0.7, atol=1e-12)


def test_closed_loop_scalar_stable():
    plant = scalar_lph()
    phi, _ = stabilizer_closed_loop_map(plant, 1.0, 1.0, [0.0], 0.1)
    assert spectral_radius(phi) < 1.0
    _, ctl = _stabilizer(plant, 0.1)
    cl = simulate_closed_loop(lph_sampled(plant, 0.1), ctl, [1.0], [0.5], 400)
    assert abs(cl.plant.states[-1, 0]) < 1e-6
    # the simulator and the assembled affine map agree
    zeta = np.array([cl.plant.states[0, 0], cl.plant.states[1, 0], cl.controller[0, 0]])
    for k in range(5):
        zeta = phi @ zeta
    np.testing.assert_allclose(zeta, [cl.plant.states[5, 0], cl.plant.states[6, 0], cl.controller[5, 0]],
                               atol=1e-12)


def test_reference_continuous_exponential():
    cont = scalar_decay().source
    tr = reference_continuous_simulate(cont, [1.0], 1.0, 1e-4)
    assert abs(tr.states[-1, 0] - np.exp(-1.0)) < 1e-6
    z = reference_continuous_simulate(ZERO_FIELD, [1.0, 2.0], 1.0, 0.1)
    np.testing.assert_array_equal(z.states[-1], [1.0, 2.0])


def test_reference_continuous_second_order():
    cont = scalar_decay().source
    errs = [abs(reference_continuous_simulate(cont, [1.0], 1.0, h).states[-1, 0] - np.exp(-1.0))
            for h in (0.02, 0.01, 0.005)]
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(orders >= 1.9)


def test_trajectory_csv(tmp_path, rng):
    plant = random_lph(rng, 3, 1)
    traj = simulate_open_loop(lph_sampled(plant, 0.25), rng.standard_normal(3), rng.standard_normal((4, 1)))
    traj.to_csv(tmp_path / "t.csv")
    rows = list(csv.reader(open(tmp_path / "t.csv")))
    assert rows[0] == ["k", "t", "x_0", "x_1", "x_2", "u_0", "y_0"]
    assert len(rows) == 1 + 5
    assert float(rows[2][1]) == 0.25
    assert float(rows[3][2]) == pytest.approx(traj.states[2, 0], rel=1e-14)
