"""Sampled discrete-time systems built from continuous vector fields.

A sampled system is the implicit one-step relation

    (x_{k+1} - x_k) / delta = f_delta(sigma x_k, u_k)

where ``sigma x_k`` is ``x_k`` for forward Euler and ``(x_k + x_{k+1})/2``
for the implicit midpoint rule. Step residuals are formulated in state
units, i.e. multiplied through by ``delta``::

    r(x_{k+1}) = x_{k+1} - x_k - delta * f_delta(sigma x_k, u_k)
"""

from __future__ import annotations

import csv
import enum
import logging
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

from .numerics import (NewtonSettings, NonConvergence, SingularJacobian,
                       condition_number, finite_difference_jacobian, solve_newton)

log = logging.getLogger(__name__)

MIN_DELTA = 1e-9
ILL_POSED_COND = 1e12


class Scheme(enum.Enum):
    FORWARD_EULER = "forward_euler"
    IMPLICIT_MIDPOINT = "implicit_midpoint"


class StepFailure(RuntimeError):
    def __init__(self, k: int, cause: Exception):
        self.k = k
        self.cause = cause
        super().__init__(f"step {k} failed: {cause}")


class IllPosed(RuntimeError):
    pass


class DomainViolation(ValueError):
    """Raised by vector fields evaluated outside their physical domain."""


class IndexOutOfRange(IndexError):
    pass


@dataclass(frozen=True)
class ContinuousDynamics:
    """``xdot = f(x, u)`` with optional Jacobians and output map ``y = h(x)``."""

    state_dim: int
    input_dim: int
    f: Callable[[np.ndarray, np.ndarray], np.ndarray]
    jac_x: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None
    jac_u: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None
    output: Callable[[np.ndarray], np.ndarray] | None = None
    output_jac: Callable[[np.ndarray], np.ndarray] | None = None

    def __post_init__(self):
        if self.state_dim < 1 or self.input_dim < 0:
            raise ValueError("state_dim must be >= 1 and input_dim >= 0")

    def jacobian_x(self, x, u) -> np.ndarray:
        if self.jac_x is not None:
            return np.atleast_2d(self.jac_x(x, u))
        return finite_difference_jacobian(lambda z: self.f(z, u), x)

    def jacobian_u(self, x, u) -> np.ndarray:
        if self.input_dim == 0:
            return np.zeros((self.state_dim, 0))
        if self.jac_u is not None:
            return np.atleast_2d(self.jac_u(x, u))
        return finite_difference_jacobian(lambda v: self.f(x, v), u)


StepRhs = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class SampledSystem:
    """A continuous model together with a sampling period and a scheme.

    ``rhs`` overrides the discrete vector field ``f_delta`` as a function of
    ``(x_k, x_{k+1}, u_k)``; ``rhs_jac_next`` and ``rhs_jac_u`` are its
    derivatives with respect to ``x_{k+1}`` and ``u_k``. Plants whose
    discretization is not simply ``f(sigma x_k, u_k)`` use these hooks.
    ``residual_weight`` rescales the step residual row-wise, e.g. to energy
    units, so that the Newton tolerance is met at the level of roundoff of
    the physically scaled equations.
    """

    source: ContinuousDynamics
    delta: float
    scheme: Scheme = Scheme.IMPLICIT_MIDPOINT
    rhs: StepRhs | None = None
    rhs_jac_next: StepRhs | None = None
    rhs_jac_u: StepRhs | None = None
    residual_weight: np.ndarray | None = None

    def __post_init__(self):
        if not self.delta >= MIN_DELTA:
            raise ValueError(f"sampling period must be >= {MIN_DELTA}, got {self.delta}")

    @property
    def n(self) -> int:
        return self.source.state_dim

    @property
    def m(self) -> int:
        return self.source.input_dim

    def sigma(self, x_k, x_k1):
        if self.scheme is Scheme.FORWARD_EULER:
            return np.asarray(x_k, dtype=float)
        return 0.5 * (np.asarray(x_k, dtype=float) + np.asarray(x_k1, dtype=float))

    def step_rhs(self, x_k, x_k1, u_k) -> np.ndarray:
        if self.rhs is not None:
            return np.asarray(self.rhs(x_k, x_k1, u_k), dtype=float)
        return np.asarray(self.source.f(self.sigma(x_k, x_k1), u_k), dtype=float)

    def step_rhs_jac_next(self, x_k, x_k1, u_k) -> np.ndarray:
        if self.scheme is Scheme.FORWARD_EULER:
            return np.zeros((self.n, self.n))
        if self.rhs is not None:
            if self.rhs_jac_next is not None:
                return np.atleast_2d(self.rhs_jac_next(x_k, x_k1, u_k))
            return finite_difference_jacobian(lambda z: self.rhs(x_k, z, u_k), x_k1)
        return 0.5 * self.source.jacobian_x(self.sigma(x_k, x_k1), u_k)

    def step_rhs_jac_u(self, x_k, x_k1, u_k) -> np.ndarray:
        if self.m == 0:
            return np.zeros((self.n, 0))
        if self.rhs is not None:
            if self.rhs_jac_u is not None:
                return np.atleast_2d(self.rhs_jac_u(x_k, x_k1, u_k))
            return finite_difference_jacobian(lambda v: self.rhs(x_k, x_k1, v), u_k)
        return self.source.jacobian_u(self.sigma(x_k, x_k1), u_k)

    def residual(self, x_k, x_k1, u_k) -> np.ndarray:
        """Step residual, in state units unless ``residual_weight`` is set."""
        r = np.asarray(x_k1, dtype=float) - x_k - self.delta * self.step_rhs(x_k, x_k1, u_k)
        return r if self.residual_weight is None else self.residual_weight * r

    def residual_jac_next(self, x_k, x_k1, u_k) -> np.ndarray:
        jac = np.eye(self.n) - self.delta * self.step_rhs_jac_next(x_k, x_k1, u_k)
        return jac if self.residual_weight is None else self.residual_weight[:, None] * jac

    def residual_jac_u(self, x_k, x_k1, u_k) -> np.ndarray:
        jac = -self.delta * self.step_rhs_jac_u(x_k, x_k1, u_k)
        return jac if self.residual_weight is None else self.residual_weight[:, None] * jac

    def output(self, x_k, x_k1):
        """Sampled output ``h(sigma x_k)``, or ``None`` without an output map."""
        if self.source.output is None:
            return None
        return np.atleast_1d(np.asarray(self.source.output(self.sigma(x_k, x_k1)), dtype=float))

    def output_jac_next(self, x_k, x_k1) -> np.ndarray:
        """Derivative of the sampled output with respect to ``x_{k+1}``."""
        h = self.source
        s = self.sigma(x_k, x_k1)
        if self.scheme is Scheme.FORWARD_EULER:
            p = np.atleast_1d(h.output(s)).size
            return np.zeros((p, self.n))
        if h.output_jac is not None:
            return 0.5 * np.atleast_2d(h.output_jac(s))
        return 0.5 * finite_difference_jacobian(h.output, s)


PlantSchedule = SampledSystem | Callable[[int], SampledSystem]


def system_at(plant: PlantSchedule, k: int) -> SampledSystem:
    """Resolve a possibly time-indexed plant to the system active at step ``k``."""
    return plant if isinstance(plant, SampledSystem) else plant(k)


@dataclass
class Trajectory:
    """States ``x_0..x_N``, inputs ``u_0..u_{N-1}`` and outputs ``y_0..y_{N-1}``.

    ``y_k = h(sigma x_k)`` needs ``x_{k+1}``, hence one output per input.
    """

    delta: float
    states: np.ndarray
    inputs: np.ndarray
    outputs: np.ndarray | None = None
    scheme: Scheme = Scheme.IMPLICIT_MIDPOINT
    solver_tolerance: float | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        states = np.asarray(self.states, dtype=float)
        self.states = states.reshape(-1, 1) if states.ndim == 1 else states
        inputs = np.asarray(self.inputs, dtype=float)
        n_steps = len(self.states) - 1
        self.inputs = np.zeros((n_steps, 0)) if inputs.size == 0 else inputs.reshape(n_steps, -1)
        if self.outputs is not None:
            self.outputs = np.asarray(self.outputs, dtype=float).reshape(len(self.inputs), -1)

    @property
    def n_steps(self) -> int:
        return len(self.inputs)

    @property
    def times(self) -> np.ndarray:
        return self.delta * np.arange(len(self.states))

    def _check(self, k: int, ahead: int = 1):
        if k < 0 or k + ahead >= len(self.states):
            raise IndexOutOfRange(f"index {k} needs x_{k + ahead}, trajectory ends at x_{len(self.states) - 1}")

    def delta_op(self, k: int) -> np.ndarray:
        """Forward difference ``(x_{k+1} - x_k) / delta``."""
        self._check(k)
        return (self.states[k + 1] - self.states[k]) / self.delta

    def sigma_op(self, k: int) -> np.ndarray:
        self._check(k)
        if self.scheme is Scheme.FORWARD_EULER:
            return self.states[k].copy()
        return 0.5 * (self.states[k] + self.states[k + 1])

    def delta_sigma_op(self, k: int) -> np.ndarray:
        """``Delta sigma x_k``; needs ``x_{k+2}`` under the midpoint rule."""
        self._check(k, 2)
        return (self.sigma_op(k + 1) - self.sigma_op(k)) / self.delta

    def to_csv(self, path, digits: int = 15) -> None:
        n = self.states.shape[1]
        m = self.inputs.shape[1]
        p = 0 if self.outputs is None else self.outputs.shape[1]
        header = (["k", "t"] + [f"x_{i}" for i in range(n)] + [f"u_{i}" for i in range(m)]
                  + [f"y_{i}" for i in range(p)])
        fmt = f"{{:.{digits}g}}".format
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for k, x in enumerate(self.states):
                row = [str(k), fmt(k * self.delta)] + [fmt(v) for v in x]
                if k < self.n_steps:
                    row += [fmt(v) for v in self.inputs[k]]
                    if p:
                        row += [fmt(v) for v in self.outputs[k]]
                else:
                    row += [""] * (m + p)
                w.writerow(row)


@dataclass(frozen=True)
class EquilibriumPair:
    x_star: np.ndarray
    u_star: np.ndarray


def _newton_step(sys: SampledSystem, x_k, u_k, guess, settings: NewtonSettings):
    return solve_newton(lambda z: sys.residual(x_k, z, u_k),
                        lambda z: sys.residual_jac_next(x_k, z, u_k),
                        guess, settings)


def _robust_solve(solve, guess, settings: NewtonSettings):
    """Run ``solve(guess, settings)``; on domain or convergence trouble retry once damped."""
    try:
        return solve(guess, settings)
    except (DomainViolation, NonConvergence, SingularJacobian, FloatingPointError):
        damped = NewtonSettings(settings.tolerance, 4 * settings.max_iterations, 0.5)
        return solve(guess, damped)


def euler_step(sys: SampledSystem, x_k, u_k) -> np.ndarray:
    if sys.scheme is not Scheme.FORWARD_EULER:
        raise ValueError("euler_step needs a forward-Euler system")
    x_k = np.asarray(x_k, dtype=float)
    return x_k + sys.delta * np.asarray(sys.source.f(x_k, np.asarray(u_k, dtype=float)), dtype=float)


def midpoint_step(sys: SampledSystem, x_k, u_k, settings: NewtonSettings = NewtonSettings(),
                  guess=None) -> np.ndarray:
    """Solve one implicit step; the default initial guess is the Euler predictor."""
    if sys.scheme is not Scheme.IMPLICIT_MIDPOINT:
        raise ValueError("midpoint_step needs an implicit-midpoint system")
    x_k = np.asarray(x_k, dtype=float)
    u_k = np.atleast_1d(np.asarray(u_k, dtype=float))
    if guess is None:
        guess = x_k + sys.delta * sys.step_rhs(x_k, x_k, u_k)
    return _robust_solve(lambda g, s: _newton_step(sys, x_k, u_k, g, s), guess, settings)


def step(sys: SampledSystem, x_k, u_k, settings: NewtonSettings = NewtonSettings()) -> np.ndarray:
    if sys.scheme is Scheme.FORWARD_EULER and sys.rhs is None:
        return euler_step(sys, x_k, u_k)
    return midpoint_step(sys, x_k, u_k, settings)


def simulate_open_loop(plant: PlantSchedule, x0, inputs: Sequence,
                       settings: NewtonSettings = NewtonSettings()) -> Trajectory:
    """Iterate the sampled system under a given input sequence."""
    inputs = np.asarray(inputs, dtype=float)
    sys0 = system_at(plant, 0)
    inputs = inputs.reshape(len(inputs), sys0.m)
    if len(inputs) < 1:
        raise ValueError("need at least one input")
    n_steps = len(inputs)
    xs = np.empty((n_steps + 1, sys0.n))
    xs[0] = x0
    ys = None
    for k in range(n_steps):
        sys = system_at(plant, k)
        try:
            xs[k + 1] = step(sys, xs[k], inputs[k], settings)
        except Exception as exc:  # noqa: BLE001 - wrapped with the failing index
            raise StepFailure(k, exc) from exc
        y = sys.output(xs[k], xs[k + 1])
        if y is not None:
            if ys is None:
                ys = np.empty((n_steps, y.size))
            ys[k] = y
    return Trajectory(sys0.delta, xs, inputs, ys, sys0.scheme, settings.tolerance)


class FeedbackPolicy(Protocol):
    """Explicit sampled feedback: returns ``u_k`` from the states measured so far."""

    def __call__(self, k: int, states: np.ndarray) -> np.ndarray: ...


def simulate_policy(plant: PlantSchedule, policy: FeedbackPolicy, x0, n_steps: int,
                    settings: NewtonSettings = NewtonSettings()) -> Trajectory:
    """Closed loop with an explicit (implementable) controller.

    ``policy(k, states[:k+1])`` sees the measured states up to ``x_k``.
    """
    sys0 = system_at(plant, 0)
    xs = np.empty((n_steps + 1, sys0.n))
    us = np.empty((n_steps, sys0.m))
    xs[0] = x0
    ys = None
    for k in range(n_steps):
        sys = system_at(plant, k)
        us[k] = policy(k, xs[: k + 1])
        try:
            xs[k + 1] = step(sys, xs[k], us[k], settings)
        except Exception as exc:  # noqa: BLE001
            raise StepFailure(k, exc) from exc
        y = sys.output(xs[k], xs[k + 1])
        if y is not None:
            if ys is None:
                ys = np.empty((n_steps, y.size))
            ys[k] = y
    return Trajectory(sys0.delta, xs, us, ys, sys0.scheme, settings.tolerance)


class JointController(Protocol):
    """Dynamic controller whose step couples to the plant through ``x_{k+2}``.

    The controller state ``c_k`` produces the plant input via
    ``plant_input(c_k, x_k)``; its own update is an implicit relation
    ``residual(sys, x_k, x_{k+1}, x_{k+2}, c_k, c_{k+1}) = 0`` expressed in the
    units of ``c``.
    """

    dim: int

    def plant_input(self, c: np.ndarray, x: np.ndarray) -> np.ndarray: ...

    def plant_input_jac(self, c: np.ndarray, x: np.ndarray) -> np.ndarray: ...

    def residual(self, sys: SampledSystem, x0, x1, x2, c0, c1) -> np.ndarray: ...

    def residual_jac(self, sys: SampledSystem, x0, x1, x2, c0, c1) -> tuple[np.ndarray, np.ndarray]: ...


@dataclass
class ClosedLoopTrajectory:
    plant: Trajectory
    controller: np.ndarray  # c_0 .. c_{N-1}

    @property
    def n_steps(self) -> int:
        return self.plant.n_steps


def joint_step_jacobian(sys: SampledSystem, sys_next: SampledSystem, controller: JointController,
                        x0, x1, x2, c0, c1) -> np.ndarray:
    """Jacobian of the stacked (plant, controller) residual in ``(x_{k+2}, c_{k+1})``."""
    n = sys_next.n
    u1 = controller.plant_input(c1, x1)
    top_left = sys_next.residual_jac_next(x1, x2, u1)
    top_right = sys_next.residual_jac_u(x1, x2, u1) @ controller.plant_input_jac(c1, x1)
    d_x2, d_c1 = controller.residual_jac(sys, x0, x1, x2, c0, c1)
    jac = np.empty((n + controller.dim, n + controller.dim))
    jac[:n, :n] = top_left
    jac[:n, n:] = top_right
    jac[n:, :n] = d_x2
    jac[n:, n:] = d_c1
    return jac


def simulate_closed_loop(plant: PlantSchedule, controller: JointController, x0, c0, n_steps: int,
                         settings: NewtonSettings = NewtonSettings()) -> ClosedLoopTrajectory:
    """Simulate plant and implicit controller with one Newton solve per step.

    Given ``(x_k, x_{k+1}, c_k)`` each step solves the plant step ``k+1``
    together with the controller step ``k`` for ``(x_{k+2}, c_{k+1})``.
    """
    sys0 = system_at(plant, 0)
    n, nc = sys0.n, controller.dim
    wp = getattr(controller, "well_posedness_matrix", None)
    if wp is not None:
        mat = wp(sys0)
        if mat is not None and condition_number(mat) > ILL_POSED_COND:
            raise IllPosed("closed-loop well-posedness matrix is singular")
    xs = np.empty((n_steps + 1, n))
    cs = np.empty((n_steps, nc))
    us = np.empty((n_steps, sys0.m))
    xs[0] = x0
    cs[0] = c0
    us[0] = controller.plant_input(cs[0], xs[0])
    try:
        xs[1] = step(sys0, xs[0], us[0], settings)
    except Exception as exc:  # noqa: BLE001
        raise StepFailure(0, exc) from exc

    for k in range(n_steps - 1):
        sys = system_at(plant, k)
        sys_next = system_at(plant, k + 1)
        x_k, x_k1, c_k = xs[k], xs[k + 1], cs[k]

        def residual(w, sys=sys, sys_next=sys_next, x_k=x_k, x_k1=x_k1, c_k=c_k):
            x2, c1 = w[:n], w[n:]
            u1 = controller.plant_input(c1, x_k1)
            return np.concatenate([sys_next.residual(x_k1, x2, u1),
                                   controller.residual(sys, x_k, x_k1, x2, c_k, c1)])

        def jacobian(w, sys=sys, sys_next=sys_next, x_k=x_k, x_k1=x_k1, c_k=c_k):
            return joint_step_jacobian(sys, sys_next, controller, x_k, x_k1, w[:n], c_k, w[n:])

        c_prev = cs[k - 1] if k > 0 else c_k
        guess = np.concatenate([2.0 * x_k1 - x_k, 2.0 * c_k - c_prev])
        try:
            w = _robust_solve(lambda g, s: solve_newton(residual, jacobian, g, s), guess, settings)
        except Exception as exc:  # noqa: BLE001
            raise StepFailure(k + 1, exc) from exc
        xs[k + 2] = w[:n]
        cs[k + 1] = w[n:]
        us[k + 1] = controller.plant_input(cs[k + 1], xs[k + 1])

    ys = None
    for k in range(n_steps):
        y = system_at(plant, k).output(xs[k], xs[k + 1])
        if y is None:
            break
        if ys is None:
            ys = np.empty((n_steps, y.size))
        ys[k] = y
    traj = Trajectory(sys0.delta, xs, us, ys, sys0.scheme, settings.tolerance)
    return ClosedLoopTrajectory(traj, cs)


def find_equilibrium(sys: SampledSystem, u_star, guess,
                     settings: NewtonSettings = NewtonSettings()) -> EquilibriumPair:
    """Solve ``f_delta(sigma x*, u*) = 0`` for a constant sequence ``x_k = x*``."""
    u_star = np.atleast_1d(np.asarray(u_star, dtype=float))

    def residual(x):
        return sys.step_rhs(x, x, u_star)

    if sys.rhs is None:
        def jacobian(x):
            return sys.source.jacobian_x(x, u_star)
    else:
        jacobian = None
    x_star = solve_newton(residual, jacobian, guess, settings)
    return EquilibriumPair(x_star, u_star)


def reference_continuous_simulate(cont: ContinuousDynamics, x0, horizon: float, fine_delta: float,
                                  law: Callable[[np.ndarray], np.ndarray] | None = None,
                                  sample_delta: float | None = None,
                                  settings: NewtonSettings = NewtonSettings()) -> Trajectory:
    """Fine-step midpoint reference for a continuous-time loop, resampled.

    ``law`` closes the loop as ``u = law(x)`` (state feedback on an augmented
    state if the controller is dynamic). Samples are taken every
    ``sample_delta`` (default: every fine step).
    """
    if fine_delta <= 0 or horizon <= 0:
        raise ValueError("horizon and fine_delta must be positive")
    fine_delta = max(fine_delta, horizon * 1e-6)
    sample_delta = fine_delta if sample_delta is None else sample_delta
    ratio = max(1, int(round(sample_delta / fine_delta)))
    fine_delta = sample_delta / ratio
    n_samples = int(round(horizon / sample_delta))
    m = cont.input_dim

    def feedback(x):
        return np.zeros(m) if law is None else np.atleast_1d(law(x))

    if law is None:
        sys = SampledSystem(cont, fine_delta)
        hold = np.zeros(m)
    else:
        def f(x, _u):
            return cont.f(x, feedback(x))

        sys = SampledSystem(ContinuousDynamics(cont.state_dim, 0, f), fine_delta)
        hold = np.zeros(0)
    xs = np.empty((n_samples + 1, cont.state_dim))
    us = np.empty((n_samples, m))
    xs[0] = x = np.asarray(x0, dtype=float)
    for j in range(n_samples):
        us[j] = feedback(x)
        for i in range(ratio):
            try:
                x = midpoint_step(sys, x, hold, settings)
            except Exception as exc:  # noqa: BLE001
                raise StepFailure(j * ratio + i, exc) from exc
        xs[j + 1] = x
    return Trajectory(sample_delta, xs, us, None, Scheme.IMPLICIT_MIDPOINT, settings.tolerance,
                      meta={"fine_delta": fine_delta})
