import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from krasovskii.controllers import ConsensusSpec, incidence_matrix
from krasovskii.dynamics import simulate_open_loop
from krasovskii.experiments import boost_network, buck_network
from krasovskii.numerics import finite_difference_jacobian, spectral_radius
from krasovskii.plants import (BoostNetwork, BuckNetwork, InfeasibleReference, InvariantViolation, LinearPHS,
                               affine_fixed_point, boost_dynamics, boost_energy_balance, boost_equilibrium,
                               boost_pi_matrix, boost_sampled, buck_dynamics, buck_energy_balance,
                               buck_feedforward, buck_pi_jacobian, buck_sampled, build_Ac, build_As,
                               consensus_closed_loop_map, consensus_equilibrium, consensus_invariant,
                               consensus_spectral_radius, lph_dynamics, lph_equilibrium, random_lph,
                               stabilizer_closed_loop_map)
from krasovskii.scenario import bundled

from conftest import scalar_lph


@pytest.fixture(scope="module")
def boost_net():
    return boost_network(bundled("boost4"))


@pytest.fixture(scope="module")
def buck_net():
    return buck_network(bundled("buck4"))


def test_lph_validation():
    with pytest.raises(InvariantViolation):
        LinearPHS(J=[[0.0, 1.0], [1.0, 0.0]], R=np.eye(2), H=np.eye(2), B=[[1.0], [0.0]])
    with pytest.raises(InvariantViolation):
        LinearPHS(J=np.zeros((2, 2)), R=-np.eye(2), H=np.eye(2), B=[[1.0], [0.0]])
    with pytest.raises(InvariantViolation):
        LinearPHS(J=np.zeros((2, 2)), R=np.eye(2), H=np.eye(2), B=np.ones((2, 2)))


def test_lph_dynamics(rng):
    plant = random_lph(rng, 4, 2)
    f = lph_dynamics(plant).f
    np.testing.assert_array_equal(f(np.zeros(4), np.zeros(2)), 0.0)
    assert lph_dynamics(scalar_lph()).f(np.array([2.0]), np.array([0.5]))[0] == -1.5
    x, u = rng.standard_normal(4), rng.standard_normal(2)
    naive = [sum(sum((plant.J[i, j] - plant.R[i, j]) * plant.H[j, l] * x[l] for l in range(4)) for j in range(4))
             + sum(plant.B[i, j] * u[j] for j in range(2)) for i in range(4)]
    np.testing.assert_allclose(f(x, u), naive, atol=1e-13)


def test_build_As_scalar():
    a_s, ok = build_As(scalar_lph(), 1.0, 1.0, 0.1)
    np.testing.assert_allclose(a_s, [[10.5, -1.0], [5.0, 10.5]], atol=1e-14)
    assert ok
    for delta in (1e-3, 1.0, 100.0):
        assert build_As(scalar_lph(), 1.0, 1.0, delta)[1]


def test_build_As_random_small_delta(rng):
    for _ in range(10):
        plant = random_lph(rng, 6, 2)
        assert build_As(plant, np.eye(2), np.eye(2), 1e-3)[1]


def test_build_Ac_scalar_and_shapes(rng):
    spec = ConsensusSpec(np.zeros((1, 0)), np.eye(1), np.zeros((1, 1)))
    a_c, ok = build_Ac(scalar_lph(), spec, 0.1)
    np.testing.assert_allclose(a_c, [[10.5, -1.0, 0.0], [0.0, 10.0, 0.0], [-0.25, 0.0, 10.5]], atol=1e-14)
    assert ok
    plant = random_lph(rng, 8, 4)
    spec4 = ConsensusSpec(incidence_matrix([(0, 1), (1, 2), (2, 3)], 4), 10 * np.eye(4), 0.5 * np.eye(4))
    assert build_Ac(plant, spec4, 1e-4)[0].shape == (16, 16)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 8), st.floats(0.01, 0.5))
def test_stabilizer_map_contracts(seed, n, delta):
    rng = np.random.default_rng(seed)
    m = int(rng.integers(1, min(n, 3) + 1))
    plant = random_lph(rng, n, m)
    g = rng.standard_normal((m, m))
    k1, k2 = g @ g.T + 0.1 * np.eye(m), np.eye(m) * float(rng.uniform(0.2, 5))
    u_star = rng.standard_normal(m)
    phi, c = stabilizer_closed_loop_map(plant, k1, k2, u_star, delta)
    assert spectral_radius(phi) < 1.0
    x_star = lph_equilibrium(plant, u_star)
    np.testing.assert_allclose(affine_fixed_point(phi, c), np.concatenate([x_star, x_star, u_star]), atol=1e-8)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10**6))
def test_consensus_invariant_and_radius(seed):
    rng = np.random.default_rng(seed)
    m = int(rng.integers(2, 4))
    plant = random_lph(rng, int(rng.integers(m, 8)), m)
    plant = plant.with_disturbance(rng.standard_normal(plant.n))
    spec = ConsensusSpec(incidence_matrix([(j, j + 1) for j in range(m - 1)], m), np.eye(m), 0.5 * np.eye(m))
    phi, c = consensus_closed_loop_map(plant, spec, 0.2)
    ell = consensus_invariant(plant, spec)
    np.testing.assert_allclose(ell @ phi, ell, atol=1e-12)
    assert abs(ell @ c) < 1e-12
    assert consensus_spectral_radius(plant, spec, 0.2) < 1.0
    zeta0 = rng.standard_normal(len(c))
    eq = consensus_equilibrium(plant, spec, 0.2, zeta0)
    np.testing.assert_allclose(phi @ eq + c, eq, atol=1e-9)
    y = plant.B.T @ plant.H @ eq[:plant.n]
    np.testing.assert_allclose(spec.E.T @ spec.M @ y, 0.0, atol=1e-9)


def test_boost_validation():
    with pytest.raises(InvariantViolation):
        BoostNetwork(L_s=[1e-3], C=[-1.0], G_l=[0.1], V_s=[280.0], I_l=[0.0], L=[], R=[], D=np.zeros((1, 0)))


def test_boost_equilibrium(boost_net):
    i_s, v, i, u = boost_equilibrium(boost_net, 380.0)
    np.testing.assert_allclose(u, 0.2631578947, atol=1e-10)
    x = np.concatenate([i_s, v, i])
    assert np.max(np.abs(boost_dynamics(boost_net).f(x, u) * boost_net.energy_weight)) < 1e-12
    with pytest.raises(InfeasibleReference):
        boost_equilibrium(boost_net, 200.0)
    bare = BoostNetwork(L_s=[1e-3], C=[1e-3], G_l=[1e-300], V_s=[280.0], I_l=[0.0], L=[], R=[], D=np.zeros((1, 0)))
    np.testing.assert_allclose(boost_equilibrium(bare, 400.0)[0], 0.0, atol=1e-290)


def test_boost_dynamics_cases(boost_net, rng):
    x = rng.uniform(1, 300, boost_net.n)
    f = boost_dynamics(boost_net).f(x, np.ones(4))
    np.testing.assert_allclose(f[:4], boost_net.V_s / boost_net.L_s)
    single = BoostNetwork(L_s=[2e-3], C=[5e-3], G_l=[0.02], V_s=[100.0], I_l=[1.0], L=[], R=[], D=np.zeros((1, 0)))
    i, v, u = 3.0, 150.0, 0.4
    f1 = boost_dynamics(single).f(np.array([i, v]), np.array([u]))
    np.testing.assert_allclose(f1, [(-(1 - u) * v + 100.0) / 2e-3, ((1 - u) * i - 0.02 * v - 1.0) / 5e-3])


def test_boost_jacobians(boost_net, rng):
    cont = boost_dynamics(boost_net)
    x, u = rng.uniform(1, 300, boost_net.n), rng.uniform(0, 0.9, 4)
    np.testing.assert_allclose(cont.jacobian_x(x, u), finite_difference_jacobian(lambda z: cont.f(z, u), x),
                               rtol=1e-6, atol=1e-3)
    np.testing.assert_allclose(cont.jacobian_u(x, u), finite_difference_jacobian(lambda w: cont.f(x, w), u),
                               rtol=1e-6, atol=1e-3)


def test_boost_pi(boost_net, rng):
    single = BoostNetwork(L_s=[2.0], C=[3.0], G_l=[0.5], V_s=[1.0], I_l=[0.0], L=[], R=[], D=np.zeros((1, 0)))
    np.testing.assert_allclose(boost_pi_matrix(single, [0.0], 1.0), [[2.0, 0.5], [-0.5, 3.25]])
    for delta in (1e-5, 1e-4, 1e-1, 10.0):
        u = rng.uniform(0, 1, 4)
        pi = boost_pi_matrix(boost_net, u, delta)
        sym = 0.5 * (pi + pi.T)
        expect = np.concatenate([boost_net.L_s / delta, boost_net.C / delta + boost_net.G_l / 2,
                                 boost_net.L / delta + boost_net.R / 2])
        np.testing.assert_allclose(sym, np.diag(expect), rtol=1e-14, atol=1e-14)
        assert np.linalg.matrix_rank(pi) == boost_net.n
    # Pi is the Jacobian of the energy-unit step residual
    delta = 1e-4
    sys = boost_sampled(boost_net, delta)
    x0, x1, u = rng.uniform(1, 300, boost_net.n), rng.uniform(1, 300, boost_net.n), rng.uniform(0, 0.9, 4)
    jac = finite_difference_jacobian(lambda z: boost_net.energy_weight * (
        (z - x0) / delta - boost_dynamics(boost_net).f(0.5 * (x0 + z), u)), x1)
    np.testing.assert_allclose(jac, boost_pi_matrix(boost_net, u, delta), rtol=1e-6, atol=1e-6)
    assert sys.residual_weight is not None


def test_boost_energy_balance(boost_net, rng):
    delta = 1e-4
    i_s, v, i, u = boost_equilibrium(boost_net, 380.0)
    x0 = np.concatenate([i_s, v, i]) + rng.standard_normal(boost_net.n)
    after = boost_net.scaled_load(1.5)
    nets = lambda k: boost_net if k < 50 else after
    inputs = u + 0.01 * rng.standard_normal((100, 4))
    traj = simulate_open_loop(lambda k: boost_sampled(nets(k), delta), x0, inputs)
    assert boost_energy_balance(traj, nets).max_deviation <= 1e-9
    # ignoring the load step breaks the balance
    assert boost_energy_balance(traj, lambda k: boost_net).max_deviation > 1e-6


def test_buck_validation():
    with pytest.raises(InvariantViolation):
        BuckNetwork(R=[1.0], L=[1.0], C=[1.0], R_t=[], L_t=[], G_L=[[1.0, 0.0]], I_L=[0.0], P_L=[0.0],
                    D=np.zeros((1, 0)))


def test_buck_dynamics_cases(buck_net, rng):
    bare = buck_net.with_loads(I_L=np.zeros(4), P_L=np.zeros(4))
    q = rng.uniform(0.5, 1.0, 4)
    np.testing.assert_array_equal(bare.fbar(q), 0.0)
    cont = buck_dynamics(buck_net)
    x = np.concatenate([rng.uniform(0, 0.1, 4), buck_net.C * 380, rng.uniform(0, 1e-5, 4)])
    np.testing.assert_allclose(cont.output(x), x[:4] / buck_net.L)
    energy = lambda z: 0.5 * float(z @ (buck_net.hessian_diag * z))
    grad = finite_difference_jacobian(lambda z: np.atleast_1d(energy(z)), x)[0]
    np.testing.assert_allclose(buck_net.hessian_diag * x, grad, rtol=1e-6)


def test_buck_pi_matches_finite_differences(buck_net, rng):
    delta = 1e-4
    sys = buck_sampled(buck_net, delta)
    for _ in range(5):
        x0 = np.concatenate([rng.uniform(0, 0.1, 4), buck_net.C * rng.uniform(300, 420, 4), rng.uniform(0, 1e-5, 4)])
        x1 = x0 * (1 + 0.01 * rng.standard_normal(12))
        u = rng.uniform(370, 390, 4)
        fd = finite_difference_jacobian(lambda z: sys.residual(x0, z, u), x1)
        pi = buck_pi_jacobian(buck_net, x1, delta)
        assert np.max(np.abs(fd - pi)) <= 1e-5 * np.max(np.abs(pi))
    bare = buck_net.with_loads(P_L=np.zeros(4))
    np.testing.assert_array_equal(buck_pi_jacobian(bare, x0, delta), buck_pi_jacobian(bare, 2 * x0, delta))


def test_buck_feedforward(buck_net, rng):
    q_star = buck_net.C * 380.0
    np.testing.assert_allclose(buck_feedforward(buck_net, q_star, np.zeros(4)), 380.0)
    phi = rng.standard_normal(4)
    np.testing.assert_allclose(buck_feedforward(buck_net, q_star, phi) - 380.0, buck_net.R * phi / buck_net.L)


def test_buck_energy_balance(buck_net, rng):
    delta = 1e-4
    v = np.full(4, 380.0)
    i0 = buck_net.G_L @ v + buck_net.I_L + buck_net.P_L / v
    x0 = np.concatenate([buck_net.L * i0, buck_net.C * v, np.zeros(4)])
    after = buck_net.with_loads(P_L=2 * buck_net.P_L)
    nets = lambda k: buck_net if k < 40 else after
    inputs = 380 + buck_net.R * i0 + rng.standard_normal((80, 4))
    traj = simulate_open_loop(lambda k: buck_sampled(nets(k), delta), x0, inputs)
    assert buck_energy_balance(traj, nets).max_deviation <= 1e-9
