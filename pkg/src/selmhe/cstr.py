"""Nonisothermal CSTR benchmark: an exothermic A -> B reaction in a level tank.

States are concentration c [kmol/m^3], temperature T [K], and level h [m].
Inputs are coolant temperature T_c [K] and outlet flow F [m^3/min]; measured
outputs are T and h. Eight quantities are treated as uncertain parameters
(feed flow, feed temperature, feed concentration, rate prefactor, activation
temperature, heat transfer coefficient, heat capacity, reaction enthalpy);
tank radius and density stay known. Plant runs use zero-order-hold inputs, a
fixed-step RK4 discretization, and additive Gaussian noise in discrete time.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace, fields as dc_fields

import numpy as np

from .errors import DimensionMismatch, DomainError
from .sysmodel import SystemModel

Array = np.ndarray

H_FLOOR = 1e-6   # [m] below this the tank counts as drained

# order of the uncertain parameter block in the augmented state
THETA_FIELDS = ("F0", "T0", "c0", "k0", "E_over_R", "U", "Cp", "dH")


@dataclass(frozen=True)
class CstrParams:
    """Physical constants; defaults are the benchmark operating values."""

    F0: float = 0.1          # feed flow [m^3/min]
    T0: float = 350.0        # feed temperature [K]
    c0: float = 1.0          # feed concentration [kmol/m^3]
    k0: float = 7.2e10       # Arrhenius prefactor [1/min]
    E_over_R: float = 8750.0  # activation temperature [K]
    U: float = 54.94         # heat transfer coefficient [kJ/(min m^2 K)]
    Cp: float = 0.239        # heat capacity [kJ/(kg K)]
    dH: float = -5.0e4       # reaction enthalpy [kJ/kmol], exothermic
    rho: float = 1000.0      # density [kg/m^3], known
    radius: float = 0.219    # tank radius [m], known


def theta_vector(params: CstrParams) -> Array:
    return np.array([getattr(params, f) for f in THETA_FIELDS])


def with_theta(params: CstrParams, theta) -> CstrParams:
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (len(THETA_FIELDS),):
        raise DimensionMismatch(f"theta must have shape ({len(THETA_FIELDS)},)")
    return replace(params, **{f: float(v) for f, v in zip(THETA_FIELDS, theta)})


def _check_domain(h, T):
    if np.any(h <= H_FLOOR):
        raise DomainError(f"tank level at or below floor {H_FLOOR}")
    if np.any(T <= 0.0):
        raise DomainError("absolute temperature must be positive")


def cstr_derivatives(x, u, params: CstrParams) -> Array:
    """Continuous-time state derivatives [dc, dT, dh]/dt."""
    c, T, h = float(x[0]), float(x[1]), float(x[2])
    Tc, F = float(u[0]), float(u[1])
    _check_domain(h, T)
    area = math.pi * params.radius ** 2
    flow = params.F0 / (area * h)
    rate = params.k0 * math.exp(-params.E_over_R / T)
    heat = -params.dH / (params.rho * params.Cp)
    cool = 2.0 * params.U / (params.radius * params.rho * params.Cp)
    return np.array([
        flow * (params.c0 - c) - rate * c,
        flow * (params.T0 - T) + heat * rate * c + cool * (Tc - T),
        (params.F0 - F) / area,
    ])


def cstr_rhs_jacobians(x, u, params: CstrParams) -> tuple[Array, Array]:
    """Analytic Jacobians of the continuous right-hand side.

    Returns (d f / d x) as 3x3 and (d f / d theta) as 3x8 in THETA_FIELDS
    order. Hand-derived; the finite-difference route in sysmodel serves as the
    independent check.
    """
    c, T, h = float(x[0]), float(x[1]), float(x[2])
    Tc, F = float(u[0]), float(u[1])
    _check_domain(h, T)
    p = params
    area = math.pi * p.radius ** 2
    flow = p.F0 / (area * h)
    rate = p.k0 * math.exp(-p.E_over_R / T)
    rate_T = rate * p.E_over_R / (T * T)
    heat = -p.dH / (p.rho * p.Cp)
    cool = 2.0 * p.U / (p.radius * p.rho * p.Cp)

    fx = np.array([
        [-flow - rate, -rate_T * c, -flow * (p.c0 - c) / h],
        [heat * rate, -flow + heat * rate_T * c - cool, -flow * (p.T0 - T) / h],
        [0.0, 0.0, 0.0],
    ])
    # columns: F0, T0, c0, k0, E_over_R, U, Cp, dH
    ftheta = np.array([
        [(p.c0 - c) / (area * h), 0.0, flow, -rate * c / p.k0,
         rate * c / T, 0.0, 0.0, 0.0],
        [(p.T0 - T) / (area * h), flow, 0.0, heat * rate * c / p.k0,
         -heat * rate * c / T, 2.0 * (Tc - T) / (p.radius * p.rho * p.Cp),
         -(heat * rate * c + cool * (Tc - T)) / p.Cp, -rate * c / (p.rho * p.Cp)],
        [1.0 / area, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    ])
    return fx, ftheta


def rk4_step(x, u, params: CstrParams, dt: float) -> Array:
    """One classical RK4 step with zero-order-hold inputs."""
    x = np.asarray(x, dtype=float)
    if dt == 0.0:
        return x.copy()
    k1 = cstr_derivatives(x, u, params)
    k2 = cstr_derivatives(x + 0.5 * dt * k1, u, params)
    k3 = cstr_derivatives(x + 0.5 * dt * k2, u, params)
    k4 = cstr_derivatives(x + dt * k3, u, params)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rk4_step_with_jacobians(x, u, params: CstrParams, dt: float):
    """RK4 step together with its analytic (d x+/d x, d x+/d theta) blocks.

    The Jacobians chain the stage derivatives exactly, so they are the true
    Jacobians of the discrete map, not a discretization of the continuous ones.
    """
    x = np.asarray(x, dtype=float)
    eye = np.eye(3)
    if dt == 0.0:
        return x.copy(), eye.copy(), np.zeros((3, 8))
    k1 = cstr_derivatives(x, u, params)
    A1, B1 = cstr_rhs_jacobians(x, u, params)
    x2 = x + 0.5 * dt * k1
    k2 = cstr_derivatives(x2, u, params)
    A2, B2 = cstr_rhs_jacobians(x2, u, params)
    x3 = x + 0.5 * dt * k2
    k3 = cstr_derivatives(x3, u, params)
    A3, B3 = cstr_rhs_jacobians(x3, u, params)
    x4 = x + dt * k3
    k4 = cstr_derivatives(x4, u, params)
    A4, B4 = cstr_rhs_jacobians(x4, u, params)

    dk1 = A1
    dk2 = A2 @ (eye + 0.5 * dt * dk1)
    dk3 = A3 @ (eye + 0.5 * dt * dk2)
    dk4 = A4 @ (eye + dt * dk3)
    db1 = B1
    db2 = B2 + 0.5 * dt * (A2 @ db1)
    db3 = B3 + 0.5 * dt * (A3 @ db2)
    db4 = B4 + dt * (A4 @ db3)

    x_next = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    A = eye + (dt / 6.0) * (dk1 + 2.0 * dk2 + 2.0 * dk3 + dk4)
    B = (dt / 6.0) * (db1 + 2.0 * db2 + 2.0 * db3 + db4)
    return x_next, A, B


# vectorized evaluation along known trajectories ------------------------------

def _theta_cols(states, inputs, thetas):
    c, T, h = states[:, 0], states[:, 1], states[:, 2]
    Tc, F = inputs[:, 0], inputs[:, 1]
    _check_domain(h, T)
    F0, T0, c0, k0 = thetas[:, 0], thetas[:, 1], thetas[:, 2], thetas[:, 3]
    ER, U, Cp, dH = thetas[:, 4], thetas[:, 5], thetas[:, 6], thetas[:, 7]
    return c, T, h, Tc, F, F0, T0, c0, k0, ER, U, Cp, dH


def _rhs_vec(states, inputs, thetas, params: CstrParams):
    c, T, h, Tc, F, F0, T0, c0, k0, ER, U, Cp, dH = _theta_cols(states, inputs, thetas)
    area = math.pi * params.radius ** 2
    flow = F0 / (area * h)
    rate = k0 * np.exp(-ER / T)
    heat = -dH / (params.rho * Cp)
    cool = 2.0 * U / (params.radius * params.rho * Cp)
    return np.stack([
        flow * (c0 - c) - rate * c,
        flow * (T0 - T) + heat * rate * c + cool * (Tc - T),
        (F0 - F) / area * np.ones_like(c),
    ], axis=1)


def _rhs_jac_vec(states, inputs, thetas, params: CstrParams):
    c, T, h, Tc, F, F0, T0, c0, k0, ER, U, Cp, dH = _theta_cols(states, inputs, thetas)
    K = len(c)
    area = math.pi * params.radius ** 2
    flow = F0 / (area * h)
    rate = k0 * np.exp(-ER / T)
    rate_T = rate * ER / (T * T)
    heat = -dH / (params.rho * Cp)
    cool = 2.0 * U / (params.radius * params.rho * Cp)

    fx = np.zeros((K, 3, 3))
    fx[:, 0, 0] = -flow - rate
    fx[:, 0, 1] = -rate_T * c
    fx[:, 0, 2] = -flow * (c0 - c) / h
    fx[:, 1, 0] = heat * rate
    fx[:, 1, 1] = -flow + heat * rate_T * c - cool
    fx[:, 1, 2] = -flow * (T0 - T) / h

    ft = np.zeros((K, 3, 8))
    ft[:, 0, 0] = (c0 - c) / (area * h)
    ft[:, 0, 2] = flow
    ft[:, 0, 3] = -rate * c / k0
    ft[:, 0, 4] = rate * c / T
    ft[:, 1, 0] = (T0 - T) / (area * h)
    ft[:, 1, 1] = flow
    ft[:, 1, 3] = heat * rate * c / k0
    ft[:, 1, 4] = -heat * rate * c / T
    ft[:, 1, 5] = 2.0 * (Tc - T) / (params.radius * params.rho * Cp)
    ft[:, 1, 6] = -(heat * rate * c + cool * (Tc - T)) / Cp
    ft[:, 1, 7] = -rate * c / (params.rho * Cp)
    ft[:, 2, 0] = 1.0 / area
    return fx, ft


def _traj_rows(params_arg, count):
    arr = np.asarray(params_arg, dtype=float)
    if arr.ndim == 1:
        return np.broadcast_to(arr, (count, 8))
    return arr


def _traj_step_jacobians_factory(params: CstrParams, dt: float):
    def traj_step_jacobians(states, inputs, thetas):
        states = np.asarray(states, dtype=float)
        inputs = np.asarray(inputs, dtype=float)
        th = _traj_rows(thetas, len(states))
        K = len(states)
        eye = np.broadcast_to(np.eye(3), (K, 3, 3))
        if dt == 0.0:
            return eye.copy(), np.zeros((K, 3, 8))
        k1 = _rhs_vec(states, inputs, th, params)
        A1, B1 = _rhs_jac_vec(states, inputs, th, params)
        x2 = states + 0.5 * dt * k1
        k2 = _rhs_vec(x2, inputs, th, params)
        A2, B2 = _rhs_jac_vec(x2, inputs, th, params)
        x3 = states + 0.5 * dt * k2
        k3 = _rhs_vec(x3, inputs, th, params)
        A3, B3 = _rhs_jac_vec(x3, inputs, th, params)
        x4 = states + dt * k3
        A4, B4 = _rhs_jac_vec(x4, inputs, th, params)

        dk1 = A1
        dk2 = A2 @ (eye + 0.5 * dt * dk1)
        dk3 = A3 @ (eye + 0.5 * dt * dk2)
        dk4 = A4 @ (eye + dt * dk3)
        db1 = B1
        db2 = B2 + 0.5 * dt * (A2 @ db1)
        db3 = B3 + 0.5 * dt * (A3 @ db2)
        db4 = B4 + dt * (A4 @ db3)
        A = eye + (dt / 6.0) * (dk1 + 2.0 * dk2 + 2.0 * dk3 + dk4)
        B = (dt / 6.0) * (db1 + 2.0 * db2 + 2.0 * db3 + db4)
        return A, B
    return traj_step_jacobians


_OUTPUT_JAC = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])


def _traj_output_jacobians(states, thetas):
    K = len(np.asarray(states))
    return (np.broadcast_to(_OUTPUT_JAC, (K, 2, 3)).copy(), np.zeros((K, 2, 8)))


def _traj_outputs(states, thetas):
    return np.asarray(states, dtype=float)[:, 1:3].copy()


def build_model(params: CstrParams | None = None, dt: float = 0.2) -> SystemModel:
    """Discrete-time CSTR as a SystemModel with the 8 uncertain parameters."""
    base = params if params is not None else CstrParams()

    def step_fn(x, u, theta):
        return rk4_step(x, u, with_theta(base, theta), dt)

    def output_fn(x, theta):
        return np.array([x[1], x[2]])

    def jac_step_state(x, u, theta):
        _, A, _ = rk4_step_with_jacobians(x, u, with_theta(base, theta), dt)
        return A

    def jac_step_params(x, u, theta):
        _, _, B = rk4_step_with_jacobians(x, u, with_theta(base, theta), dt)
        return B

    return SystemModel(
        state_dim=3, input_dim=2, output_dim=2, param_dim=8,
        step_fn=step_fn,
        output_fn=output_fn,
        jac_step_state=jac_step_state,
        jac_step_params=jac_step_params,
        jac_out_state=lambda x, theta: _OUTPUT_JAC.copy(),
        jac_out_params=lambda x, theta: np.zeros((2, 8)),
        traj_step_jacobians=_traj_step_jacobians_factory(base, dt),
        traj_output_jacobians=_traj_output_jacobians,
        traj_outputs=_traj_outputs,
        name="cstr",
    )


# operating point --------------------------------------------------------------

def steady_state(params: CstrParams, T_s: float = 324.5, h_s: float = 0.659) -> Array:
    """Steady state pinned at (T_s, h_s) with c solved from dc/dt = 0."""
    area = math.pi * params.radius ** 2
    flow = params.F0 / (area * h_s)
    rate = params.k0 * math.exp(-params.E_over_R / T_s)
    c_s = flow * params.c0 / (flow + rate)
    return np.array([c_s, T_s, h_s])


def steady_state_inputs(params: CstrParams, x_s) -> tuple[float, float]:
    """Inputs (F_s, T_c,s) holding x_s stationary.

    F_s = F0 zeroes the level equation; T_c,s zeroes the temperature equation
    in closed form (it enters linearly through the cooling term).
    """
    c, T, h = float(x_s[0]), float(x_s[1]), float(x_s[2])
    area = math.pi * params.radius ** 2
    flow = params.F0 / (area * h)
    rate = params.k0 * math.exp(-params.E_over_R / T)
    heat = -params.dH / (params.rho * params.Cp)
    cool = 2.0 * params.U / (params.radius * params.rho * params.Cp)
    Tc = T - (flow * (params.T0 - T) + heat * rate * c) / cool
    return params.F0, float(Tc)


def steady_input_vector(params: CstrParams, x_s) -> Array:
    F_s, Tc_s = steady_state_inputs(params, x_s)
    return np.array([Tc_s, F_s])


def augmented_steady(params: CstrParams, x_s=None) -> Array:
    """Steady augmented vector [c, T, h, theta] used for scaling and bounds."""
    if x_s is None:
        x_s = steady_state(params)
    return np.concatenate([np.asarray(x_s, dtype=float), theta_vector(params)])


# scenarios and truth simulation ------------------------------------------------

@dataclass(frozen=True)
class CstrScenario:
    """Everything that defines one simulated plant run."""

    dt: float = 0.2                    # [min]
    steps: int = 400
    seed: int = 0
    process_noise_rel: float = 0.6e-3   # std as fraction of |steady state|
    measurement_noise_rel: float = 0.6e-3
    state_mismatch: float = 0.05        # initial guess offset, fraction
    param_mismatch: float = 0.05
    # Excitation defaults sit inside the ignition boundary: SUSTAINED
    # (T_c + 2.5 K, low flow) tips this reactor into thermal runaway, but a
    # short mean dwell keeps hot excursions briefer than the ~1 min thermal
    # ramp-up. Calibrated for 0 blow-ups over 60 seeds x 650 steps with the
    # truth staying within 15% of steady (the constraint box is 30%).
    flow_levels: tuple[float, float] = (0.095, 0.105)  # [m^3/min]
    coolant_offset: float = 2.5         # [K] around T_c,s
    mean_dwell: float = 5.0             # [steps] between input switches
    balanced_flow: bool = True          # level integrates flow; keep it bounded
    T_s: float = 324.5
    h_s: float = 0.659


@dataclass
class TruthRun:
    """Simulated plant trajectory with its noise-free anchors."""

    scenario: CstrScenario
    states: Array      # (steps, 3)
    outputs: Array     # (steps, 2), noisy measurements
    inputs: Array      # (steps, 2), [T_c, F] per step
    theta: Array       # (8,)
    x_steady: Array
    y_steady: Array
    input_steady: Array  # [T_c,s, F_s]

    @property
    def augmented(self) -> Array:
        return np.hstack([self.states,
                          np.broadcast_to(self.theta, (len(self.states), 8))])

    @property
    def augmented_steady(self) -> Array:
        return np.concatenate([self.x_steady, self.theta])


def generate_binary_inputs(steps: int, levels, mean_dwell: float = 20.0,
                           rng=None, balanced=None) -> Array:
    """Pseudo-random binary signals, one column per channel.

    Independent channels hold one of their two levels and switch with
    probability 1/mean_dwell per step (geometric dwell). Channels flagged in
    ``balanced`` instead alternate in equal up/down dwell pairs (dwell drawn
    geometric, capped at 1.25 * mean_dwell), so the running integral of the
    signal about its midpoint stays bounded. Use balanced excitation on
    channels the plant integrates (here the outlet flow driving the level),
    otherwise the integrated state random-walks out of any fixed box.
    """
    if steps < 1:
        raise DimensionMismatch("steps must be >= 1")
    if mean_dwell < 1.0:
        raise DimensionMismatch("mean_dwell must be >= 1 step")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    if balanced is None:
        balanced = (False,) * len(levels)
    out = np.empty((steps, len(levels)))
    cap = max(1, int(round(1.25 * mean_dwell)))
    for j, pair in enumerate(levels):
        lo, hi = float(pair[0]), float(pair[1])
        which = np.empty(steps, dtype=int)
        if balanced[j]:
            side = int(rng.integers(0, 2))
            pos = 0
            while pos < steps:
                d = min(int(rng.geometric(1.0 / mean_dwell)), cap)
                for s in (side, 1 - side):
                    end = min(pos + d, steps)
                    which[pos:end] = s
                    pos = end
        else:
            start = int(rng.integers(0, 2))
            flips = rng.random(steps - 1) < 1.0 / mean_dwell
            which = (start + np.concatenate([[0], np.cumsum(flips)])) % 2
        out[:, j] = np.where(which == 1, hi, lo)
    return out


def simulate_truth(scenario: CstrScenario, params: CstrParams | None = None) -> TruthRun:
    """Simulate the plant: RK4 transitions plus discrete-time Gaussian noise.

    Noise enters after each integration step (states) and on the measured
    outputs, with standard deviations given as fractions of the steady
    magnitudes. The generator is consumed in a fixed order (inputs, process
    noise block, measurement noise block) so runs are reproducible per seed.
    """
    params = params if params is not None else CstrParams()
    x_s = steady_state(params, scenario.T_s, scenario.h_s)
    F_s, Tc_s = steady_state_inputs(params, x_s)
    y_s = np.array([x_s[1], x_s[2]])
    rng = np.random.default_rng(scenario.seed)
    inputs = generate_binary_inputs(
        scenario.steps,
        [(Tc_s - scenario.coolant_offset, Tc_s + scenario.coolant_offset),
         scenario.flow_levels],
        scenario.mean_dwell, rng,
        balanced=(False, scenario.balanced_flow))
    w = rng.standard_normal((scenario.steps - 1, 3)) \
        * (scenario.process_noise_rel * np.abs(x_s))
    v = rng.standard_normal((scenario.steps, 2)) \
        * (scenario.measurement_noise_rel * np.abs(y_s))
    states = np.empty((scenario.steps, 3))
    states[0] = x_s
    for k in range(scenario.steps - 1):
        states[k + 1] = rk4_step(states[k], inputs[k], params, scenario.dt) + w[k]
    outputs = states[:, 1:3] + v
    return TruthRun(scenario, states, outputs, inputs, theta_vector(params),
                    x_s, y_s, np.array([Tc_s, F_s]))


def write_truth_csv(path, truth: TruthRun) -> None:
    """Plant trajectory CSV: step, states, parameters, measurements, inputs."""
    header = (["step", "c", "T", "h"]
              + [f"theta{i + 1}" for i in range(8)]
              + ["y1", "y2", "F", "T_c"])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for k in range(len(truth.states)):
            row = ([k] + [f"{v:.10g}" for v in truth.states[k]]
                   + [f"{v:.10g}" for v in truth.theta]
                   + [f"{v:.10g}" for v in truth.outputs[k]]
                   + [f"{truth.inputs[k, 1]:.10g}", f"{truth.inputs[k, 0]:.10g}"])
            writer.writerow(row)
