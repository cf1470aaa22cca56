"""Discrete-time system models, Jacobians, and parameter augmentation.

A model is a pair of maps

    x(k+1) = step_fn(x(k), u(k), theta)
    y(k)   = output_fn(x(k), theta)

with optional analytic Jacobian callbacks. Anything missing falls back to
central finite differences. ``augment`` turns the parameter vector into
constant extra states so that downstream code can treat joint state and
parameter estimation as plain state estimation.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .errors import DimensionMismatch, NumericalFailure

Array = np.ndarray

# Central-difference step: eps^(1/3) relative, floored per component.
FD_RELATIVE_STEP = float(np.cbrt(np.finfo(float).eps))
FD_FLOOR = 1e-8


@dataclass
class SystemModel:
    """Discrete-time model with optional analytic and vectorized Jacobians.

    The trajectory hooks (``traj_*``) evaluate along a whole array of known
    points in one call. They are optional accelerators; every consumer falls
    back to per-point loops when they are absent.
    """

    state_dim: int
    input_dim: int
    output_dim: int
    param_dim: int
    step_fn: Callable[[Array, Array, Array], Array]
    output_fn: Callable[[Array, Array], Array]
    jac_step_state: Callable | None = None
    jac_step_params: Callable | None = None
    jac_out_state: Callable | None = None
    jac_out_params: Callable | None = None
    # vectorized evaluation along known trajectories, all optional
    traj_step_jacobians: Callable | None = None
    traj_output_jacobians: Callable | None = None
    traj_outputs: Callable | None = None
    # set by augment(): (original state dim, parameter block dim)
    augmented_split: tuple[int, int] | None = None
    name: str = ""


@dataclass
class JacobianBundle:
    """All four first-order blocks of a model at one evaluation point."""

    df_dx: Array      # (n, n)
    df_dparams: Array  # (n, p)
    dh_dx: Array      # (r, n)
    dh_dparams: Array  # (r, p)
    at_state: Array
    at_input: Array | None
    at_params: Array


@dataclass
class AugmentedState:
    """Joint state/parameter vector with elementwise bounds."""

    values: Array
    lower: Array
    upper: Array
    n_states: int

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.lower = np.asarray(self.lower, dtype=float)
        self.upper = np.asarray(self.upper, dtype=float)
        if not (self.values.shape == self.lower.shape == self.upper.shape):
            raise DimensionMismatch("values and bounds must share one shape")
        if np.any(self.lower > self.upper):
            raise DimensionMismatch("lower bound exceeds upper bound")
        if not 0 <= self.n_states <= self.values.size:
            raise DimensionMismatch("state block size out of range")

    @property
    def states(self) -> Array:
        return self.values[: self.n_states]

    @property
    def params(self) -> Array:
        return self.values[self.n_states:]

    def clipped(self) -> Array:
        return np.clip(self.values, self.lower, self.upper)


def _as_vector(name: str, value, dim: int) -> Array:
    vec = np.asarray(value, dtype=float)
    if vec.shape != (dim,):
        raise DimensionMismatch(f"{name} must have shape ({dim},), got {vec.shape}")
    return vec


def _ensure_finite(name: str, arr: Array) -> Array:
    if not np.all(np.isfinite(arr)):
        bad = np.argwhere(~np.isfinite(np.atleast_1d(arr)))[0]
        idx = tuple(int(i) for i in bad)
        raise NumericalFailure(f"{name} produced non-finite entry at {idx}")
    return arr


def _params_or_empty(model: SystemModel, params) -> Array:
    if params is None:
        return np.zeros(model.param_dim)
    return _as_vector("params", params, model.param_dim)


def _input_or_empty(model: SystemModel, u) -> Array:
    if u is None:
        if model.input_dim:
            raise DimensionMismatch("model takes inputs but none were given")
        return np.zeros(0)
    return _as_vector("input", u, model.input_dim)


def step(model: SystemModel, x, u=None, params=None) -> Array:
    """Advance one sampling interval, validating shapes and finiteness."""
    x = _as_vector("state", x, model.state_dim)
    u = _input_or_empty(model, u)
    params = _params_or_empty(model, params)
    nxt = np.asarray(model.step_fn(x, u, params), dtype=float)
    if nxt.shape != (model.state_dim,):
        raise DimensionMismatch(f"step_fn returned shape {nxt.shape}")
    return _ensure_finite("step", nxt)


def output(model: SystemModel, x, params=None) -> Array:
    x = _as_vector("state", x, model.state_dim)
    params = _params_or_empty(model, params)
    y = np.asarray(model.output_fn(x, params), dtype=float)
    if y.shape != (model.output_dim,):
        raise DimensionMismatch(f"output_fn returned shape {y.shape}")
    return _ensure_finite("output", y)


def finite_difference_jacobian(fn, z, out_dim: int,
                               relative_step: float = FD_RELATIVE_STEP,
                               floor: float = FD_FLOOR) -> Array:
    """Central-difference Jacobian of ``fn`` at ``z`` with per-component steps."""
    z = np.asarray(z, dtype=float)
    jac = np.empty((out_dim, z.size))
    for j in range(z.size):
        h = relative_step * max(abs(z[j]), floor)
        zp = z.copy()
        zm = z.copy()
        zp[j] += h
        zm[j] -= h
        jac[:, j] = (np.asarray(fn(zp), dtype=float)
                     - np.asarray(fn(zm), dtype=float)) / (2.0 * h)
    return jac


def step_jacobians(model: SystemModel, x, u=None, params=None) -> tuple[Array, Array]:
    """State and parameter Jacobians of the step map (analytic or FD)."""
    x = _as_vector("state", x, model.state_dim)
    u = _input_or_empty(model, u)
    params = _params_or_empty(model, params)
    if model.jac_step_state is not None:
        df_dx = np.asarray(model.jac_step_state(x, u, params), dtype=float)
    else:
        df_dx = finite_difference_jacobian(
            lambda z: model.step_fn(z, u, params), x, model.state_dim)
    if model.param_dim == 0:
        df_dp = np.zeros((model.state_dim, 0))
    elif model.jac_step_params is not None:
        df_dp = np.asarray(model.jac_step_params(x, u, params), dtype=float)
    else:
        df_dp = finite_difference_jacobian(
            lambda q: model.step_fn(x, u, q), params, model.state_dim)
    _ensure_finite("df_dx", df_dx)
    _ensure_finite("df_dparams", df_dp)
    return df_dx, df_dp


def output_jacobians(model: SystemModel, x, params=None) -> tuple[Array, Array]:
    x = _as_vector("state", x, model.state_dim)
    params = _params_or_empty(model, params)
    if model.jac_out_state is not None:
        dh_dx = np.asarray(model.jac_out_state(x, params), dtype=float)
    else:
        dh_dx = finite_difference_jacobian(
            lambda z: model.output_fn(z, params), x, model.output_dim)
    if model.param_dim == 0:
        dh_dp = np.zeros((model.output_dim, 0))
    elif model.jac_out_params is not None:
        dh_dp = np.asarray(model.jac_out_params(x, params), dtype=float)
    else:
        dh_dp = finite_difference_jacobian(
            lambda q: model.output_fn(x, q), params, model.output_dim)
    _ensure_finite("dh_dx", dh_dx)
    _ensure_finite("dh_dparams", dh_dp)
    return dh_dx, dh_dp


def jacobians(model: SystemModel, x, u=None, params=None) -> JacobianBundle:
    """All four Jacobian blocks at one point."""
    df_dx, df_dp = step_jacobians(model, x, u, params)
    dh_dx, dh_dp = output_jacobians(model, x, params)
    return JacobianBundle(df_dx, df_dp, dh_dx, dh_dp,
                          at_state=np.asarray(x, dtype=float),
                          at_input=None if u is None else np.asarray(u, dtype=float),
                          at_params=_params_or_empty(model, params))


def _params_rows(params, count: int, dim: int) -> Array:
    """Broadcast a (p,) or (K, p) parameter argument to (K, p)."""
    arr = np.asarray(params, dtype=float) if params is not None else np.zeros(dim)
    if arr.ndim == 1:
        return np.broadcast_to(arr, (count, dim))
    if arr.shape != (count, dim):
        raise DimensionMismatch(f"params must be ({dim},) or ({count},{dim})")
    return arr


def trajectory_outputs(model: SystemModel, states, params=None) -> Array:
    """Outputs along an array of states; vectorized hook or per-point loop."""
    states = np.asarray(states, dtype=float)
    if model.traj_outputs is not None:
        return np.asarray(model.traj_outputs(states, params), dtype=float)
    rows = _params_rows(params, len(states), model.param_dim)
    out = np.empty((len(states), model.output_dim))
    for i, x in enumerate(states):
        out[i] = model.output_fn(x, rows[i])
    return out


def trajectory_step_jacobians(model: SystemModel, states, inputs, params=None):
    """Stacked (A, B) Jacobians along a known trajectory."""
    states = np.asarray(states, dtype=float)
    inputs = np.asarray(inputs, dtype=float)
    if model.traj_step_jacobians is not None:
        A, B = model.traj_step_jacobians(states, inputs, params)
        return np.asarray(A, dtype=float), np.asarray(B, dtype=float)
    rows = _params_rows(params, len(states), model.param_dim)
    n, p = model.state_dim, model.param_dim
    A = np.empty((len(states), n, n))
    B = np.empty((len(states), n, p))
    for i in range(len(states)):
        A[i], B[i] = step_jacobians(model, states[i], inputs[i], rows[i])
    return A, B


def trajectory_output_jacobians(model: SystemModel, states, params=None):
    """Stacked (C, D) Jacobians along a known trajectory."""
    states = np.asarray(states, dtype=float)
    if model.traj_output_jacobians is not None:
        C, D = model.traj_output_jacobians(states, params)
        return np.asarray(C, dtype=float), np.asarray(D, dtype=float)
    rows = _params_rows(params, len(states), model.param_dim)
    n, p, r = model.state_dim, model.param_dim, model.output_dim
    C = np.empty((len(states), r, n))
    D = np.empty((len(states), r, p))
    for i in range(len(states)):
        C[i], D[i] = output_jacobians(model, states[i], rows[i])
    return C, D


def augment(model: SystemModel) -> SystemModel:
    """Append the parameters to the state vector as constant extra states.

    The returned model has state dimension n + p, parameter dimension 0, and
    block Jacobians assembled from the base model (which keeps analytic
    callbacks analytic). ``augmented_split`` records the block boundary.
    """
    n, p = model.state_dim, model.param_dim
    if p == 0:
        return replace(model, augmented_split=(n, 0))

    def step_a(xa, u, _):
        return np.concatenate([np.asarray(model.step_fn(xa[:n], u, xa[n:]),
                                          dtype=float), xa[n:]])

    def output_a(xa, _):
        return model.output_fn(xa[:n], xa[n:])

    def jac_step_a(xa, u, _):
        A, B = step_jacobians(model, xa[:n], u, xa[n:])
        top = np.hstack([A, B])
        bottom = np.hstack([np.zeros((p, n)), np.eye(p)])
        return np.vstack([top, bottom])

    def jac_out_a(xa, _):
        C, D = output_jacobians(model, xa[:n], xa[n:])
        return np.hstack([C, D])

    traj_step = None
    traj_out = None
    traj_ys = None
    if model.traj_step_jacobians is not None:
        def traj_step(xs, us, _):
            K = len(xs)
            A, B = model.traj_step_jacobians(xs[:, :n], us, xs[:, n:])
            Aa = np.zeros((K, n + p, n + p))
            Aa[:, :n, :n] = A
            Aa[:, :n, n:] = B
            Aa[:, n:, n:] = np.eye(p)
            return Aa, np.zeros((K, n + p, 0))
    if model.traj_output_jacobians is not None:
        def traj_out(xs, _):
            C, D = model.traj_output_jacobians(xs[:, :n], xs[:, n:])
            return np.concatenate([C, D], axis=2), np.zeros((len(xs), model.output_dim, 0))
    if model.traj_outputs is not None:
        def traj_ys(xs, _):
            return model.traj_outputs(xs[:, :n], xs[:, n:])

    return SystemModel(
        state_dim=n + p,
        input_dim=model.input_dim,
        output_dim=model.output_dim,
        param_dim=0,
        step_fn=step_a,
        output_fn=output_a,
        jac_step_state=jac_step_a,
        jac_step_params=None,
        jac_out_state=jac_out_a,
        jac_out_params=None,
        traj_step_jacobians=traj_step,
        traj_output_jacobians=traj_out,
        traj_outputs=traj_ys,
        augmented_split=(n, p),
        name=model.name + "+params" if model.name else "",
    )


def scale_model(model: SystemModel, state_scale, output_scale=None) -> SystemModel:
    """Work in z = x / state_scale (and y / output_scale) coordinates.

    Scales must be positive. Physical units are restored by multiplying back
    at the caller's boundary; the returned model is otherwise equivalent.
    """
    d = _as_vector("state_scale", state_scale, model.state_dim)
    if np.any(d <= 0) or not np.all(np.isfinite(d)):
        raise DimensionMismatch("state_scale entries must be positive and finite")
    if output_scale is None:
        e = np.ones(model.output_dim)
    else:
        e = _as_vector("output_scale", output_scale, model.output_dim)
        if np.any(e <= 0) or not np.all(np.isfinite(e)):
            raise DimensionMismatch("output_scale entries must be positive and finite")

    def step_s(z, u, th):
        return np.asarray(model.step_fn(z * d, u, th), dtype=float) / d

    def output_s(z, th):
        return np.asarray(model.output_fn(z * d, th), dtype=float) / e

    def jac_step_state_s(z, u, th):
        A, _ = step_jacobians(model, z * d, u, th)
        return A * (d[np.newaxis, :] / d[:, np.newaxis])

    def jac_step_params_s(z, u, th):
        _, B = step_jacobians(model, z * d, u, th)
        return B / d[:, np.newaxis]

    def jac_out_state_s(z, th):
        C, _ = output_jacobians(model, z * d, th)
        return C * (d[np.newaxis, :] / e[:, np.newaxis])

    def jac_out_params_s(z, th):
        _, D = output_jacobians(model, z * d, th)
        return D / e[:, np.newaxis]

    traj_step = None
    traj_out = None
    traj_ys = None
    if model.traj_step_jacobians is not None:
        def traj_step(zs, us, th):
            A, B = model.traj_step_jacobians(zs * d, us, th)
            return (A * (d[np.newaxis, np.newaxis, :] / d[np.newaxis, :, np.newaxis]),
                    B / d[np.newaxis, :, np.newaxis])
    if model.traj_output_jacobians is not None:
        def traj_out(zs, th):
            C, D = model.traj_output_jacobians(zs * d, th)
            return (C * (d[np.newaxis, np.newaxis, :] / e[np.newaxis, :, np.newaxis]),
                    D / e[np.newaxis, :, np.newaxis])
    if model.traj_outputs is not None:
        def traj_ys(zs, th):
            return np.asarray(model.traj_outputs(zs * d, th), dtype=float) / e

    return replace(
        model,
        step_fn=step_s,
        output_fn=output_s,
        jac_step_state=jac_step_state_s,
        jac_step_params=jac_step_params_s,
        jac_out_state=jac_out_state_s,
        jac_out_params=jac_out_params_s,
        traj_step_jacobians=traj_step,
        traj_output_jacobians=traj_out,
        traj_outputs=traj_ys,
        name=model.name + " (scaled)" if model.name else "",
    )
