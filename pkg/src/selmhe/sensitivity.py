"""Output sensitivity propagation, windowed stacks, and rank diagnostics.

Two complementary routes exist on purpose: the direct recursions here chain
Jacobians along a trajectory, while ``finite_difference_sensitivity`` gets the
same quantities by perturb-and-resimulate. The second is slower and only
first-order accurate; it is kept as an independent check of the first.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, NumericalFailure
from .sysmodel import (SystemModel, step, output, step_jacobians, output_jacobians,
                       trajectory_step_jacobians, trajectory_output_jacobians)

Array = np.ndarray

_EPS = float(np.finfo(float).eps)


@dataclass
class SensitivityState:
    """State sensitivities carried by the recursions at one step."""

    wrt_params: Array          # d x(k) / d theta, (n, p)
    wrt_initial_state: Array   # d x(k) / d x(0), (n, n)
    step: int


@dataclass
class SensitivityWindow:
    """Stack of per-step output sensitivity blocks over one data window.

    ``blocks[i]`` is the (r, n) sensitivity of y(start+i) with respect to the
    state at the window start. ``stacked`` is the tall matrix view used for
    rank analysis and variable ranking.
    """

    blocks: Array              # (K, r, n)
    start_step: int = 0
    normalized: bool = False
    floored_outputs: tuple = ()

    def __post_init__(self):
        self.blocks = np.asarray(self.blocks, dtype=float)
        if self.blocks.ndim != 3:
            raise DimensionMismatch("blocks must be a (window, outputs, columns) stack")

    @property
    def n_blocks(self) -> int:
        return self.blocks.shape[0]

    @property
    def stacked(self) -> Array:
        k, r, n = self.blocks.shape
        return self.blocks.reshape(k * r, n)


@dataclass
class RankReport:
    """Numeric rank of a matrix from its singular value spectrum."""

    rank: int
    singular_values: Array
    condition_number: float
    tolerance: float
    rank_scale: float = 1.0


def _trajectory_arrays(model, states, inputs):
    states = np.atleast_2d(np.asarray(states, dtype=float))
    if states.size == 0:
        raise DimensionMismatch("trajectory needs at least one point")
    m = model.input_dim
    if m == 0:
        inputs = np.zeros((len(states) - 1, 0))
    else:
        inputs = np.asarray(inputs, dtype=float)
        inputs = np.zeros((0, m)) if inputs.size == 0 else inputs.reshape(-1, m)
    if len(inputs) != len(states) - 1:
        raise DimensionMismatch(
            f"expected {len(states) - 1} inputs for {len(states)} points, got {len(inputs)}")
    return states, inputs


def propagate_param_sensitivity(model: SystemModel, states, inputs, params=None) -> Array:
    """Output-to-parameter sensitivities d y(k) / d theta along a trajectory.

    Returns a (K, r, p) stack for the K trajectory points. The state
    sensitivity starts at zero: parameters act from the first transition on.
    """
    states, inputs = _trajectory_arrays(model, states, inputs)
    n, p, r = model.state_dim, model.param_dim, model.output_dim
    K = len(states)
    C, D = trajectory_output_jacobians(model, states, params)
    if K > 1:
        A, B = trajectory_step_jacobians(model, states[:-1], inputs, params)
    out = np.empty((K, r, p))
    S = np.zeros((n, p))
    for k in range(K):
        out[k] = C[k] @ S + D[k]
        if k < K - 1:
            S = A[k] @ S + B[k]
    return out


def propagate_initial_state_sensitivity(model: SystemModel, states, inputs,
                                        params=None, jacobians=None) -> Array:
    """Output-to-initial-state sensitivities d y(k) / d x(0), a (K, r, n) stack.

    ``jacobians`` optionally supplies precomputed (A, C) stacks along the same
    trajectory, as built by the trajectory_* helpers, to avoid relinearizing.
    """
    states, inputs = _trajectory_arrays(model, states, inputs)
    n, r = model.state_dim, model.output_dim
    K = len(states)
    if jacobians is not None:
        A, C = jacobians
    else:
        C, _ = trajectory_output_jacobians(model, states, params)
        if K > 1:
            A, _ = trajectory_step_jacobians(model, states[:-1], inputs, params)
    out = np.empty((K, r, n))
    Phi = np.eye(n)
    for k in range(K):
        out[k] = C[k] @ Phi
        if k < K - 1:
            Phi = A[k] @ Phi
    return out


def propagate_state_sensitivities(model: SystemModel, states, inputs,
                                  params=None) -> list[SensitivityState]:
    """Both state sensitivity recursions along a trajectory, one entry per point."""
    states, inputs = _trajectory_arrays(model, states, inputs)
    n, p = model.state_dim, model.param_dim
    out = [SensitivityState(np.zeros((n, p)), np.eye(n), 0)]
    for k in range(len(states) - 1):
        A, B = step_jacobians(model, states[k], inputs[k], params)
        prev = out[-1]
        out.append(SensitivityState(A @ prev.wrt_params + B,
                                    A @ prev.wrt_initial_state, k + 1))
    return out


def finite_difference_sensitivity(model: SystemModel, x0, inputs, params=None,
                                  target: str = "params", deltas=None) -> Array:
    """Forward-difference output sensitivities by perturb-and-resimulate.

    Oracle route: one nominal simulation plus one per perturbed component,
    with steps 1e-6 * max(|z_j|, 1). First-order accurate by construction.
    """
    if target not in ("params", "initial_state"):
        raise DimensionMismatch(f"unknown target {target!r}")
    x0 = np.asarray(x0, dtype=float)
    m = model.input_dim
    if m == 0:
        given = np.asarray(inputs, dtype=float) if inputs is not None else np.zeros((0, 0))
        inputs = np.zeros((given.shape[0] if given.ndim else 0, 0))
    else:
        inputs = np.asarray(inputs, dtype=float)
        inputs = np.zeros((0, m)) if inputs.size == 0 else inputs.reshape(-1, m)
    base = np.zeros(model.param_dim) if params is None else np.asarray(params, dtype=float)

    def simulate(x_init, theta):
        ys = np.empty((len(inputs) + 1, model.output_dim))
        x = np.asarray(x_init, dtype=float)
        ys[0] = output(model, x, theta)
        for k, u in enumerate(inputs):
            x = step(model, x, u, theta)
            ys[k + 1] = output(model, x, theta)
        return ys

    nominal = simulate(x0, base)
    z = base if target == "params" else x0
    if deltas is None:
        deltas = 1e-6 * np.maximum(np.abs(z), 1.0)
    else:
        deltas = np.asarray(deltas, dtype=float)
        if deltas.shape != z.shape:
            raise DimensionMismatch("deltas must match the perturbed vector")
    K = len(inputs) + 1
    out = np.empty((K, model.output_dim, z.size))
    for j in range(z.size):
        zp = z.copy()
        zp[j] += deltas[j]
        if target == "params":
            ys = simulate(x0, zp)
        else:
            ys = simulate(zp, base)
        out[:, :, j] = (ys - nominal) / deltas[j]
    return out


def build_window_sensitivity(model: SystemModel, states, inputs,
                             start_step: int = 0, jacobians=None) -> SensitivityWindow:
    """Windowed sensitivity of every output in the window to the window-start state.

    ``states`` holds the N+1 window trajectory points and ``inputs`` the N
    inputs between them. A single-point window is allowed and yields just the
    output Jacobian block at that point.
    """
    blocks = propagate_initial_state_sensitivity(model, states, inputs,
                                                 jacobians=jacobians)
    return SensitivityWindow(blocks, start_step=start_step)


def normalize_sensitivity(window: SensitivityWindow, anchor_state, outputs,
                          output_floor=None) -> SensitivityWindow:
    """Rescale entries to relative (elasticity) form.

    Entry (block l, output i, column j) is multiplied by
    anchor_state[j] / y_i(l). Output magnitudes below the floor are clamped to
    it (sign preserved) and reported in ``floored_outputs``.
    """
    K, r, n = window.blocks.shape
    anchor = np.asarray(anchor_state, dtype=float)
    ys = np.asarray(outputs, dtype=float)
    if anchor.shape != (n,):
        raise DimensionMismatch(f"anchor must have shape ({n},)")
    if ys.shape != (K, r):
        raise DimensionMismatch(f"outputs must have shape ({K},{r}), got {ys.shape}")
    if output_floor is None:
        floor = 1e-6 * np.abs(ys).max(axis=0)
        floor[floor == 0.0] = 1e-12
    else:
        floor = np.broadcast_to(np.asarray(output_floor, dtype=float), (r,)).copy()
    small = np.abs(ys) < floor
    signs = np.where(ys < 0.0, -1.0, 1.0)
    denom = signs * np.maximum(np.abs(ys), floor)
    scaled = window.blocks * (anchor[np.newaxis, np.newaxis, :]
                              / denom[:, :, np.newaxis])
    return SensitivityWindow(scaled, start_step=window.start_step, normalized=True,
                             floored_outputs=tuple(map(tuple, np.argwhere(small))))


def numeric_rank(matrix, rank_scale: float = 1.0) -> RankReport:
    """SVD numeric rank with tolerance max(dims) * sigma_max * eps * rank_scale."""
    M = np.atleast_2d(np.asarray(matrix, dtype=float))
    if not np.all(np.isfinite(M)):
        raise NumericalFailure("rank input contains non-finite entries")
    if M.size == 0:
        return RankReport(0, np.zeros(0), np.inf, 0.0, rank_scale)
    sv = np.linalg.svd(M, compute_uv=False)
    smax = float(sv[0])
    tol = max(M.shape) * smax * _EPS * rank_scale
    rank = int(np.count_nonzero(sv > tol))
    cond = float(smax / sv[rank - 1]) if rank > 0 else np.inf
    return RankReport(rank, sv, cond, tol, rank_scale)


def observability_matrix_linear(A, C) -> Array:
    """Stack [C; CA; ...; CA^(n-1)] for a linear pair."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    C = np.atleast_2d(np.asarray(C, dtype=float))
    n = A.shape[0]
    if A.shape != (n, n) or C.shape[1] != n:
        raise DimensionMismatch("incompatible (A, C) shapes")
    rows = [C]
    for _ in range(n - 1):
        rows.append(rows[-1] @ A)
    return np.vstack(rows)


def linearized_observability_matrix(model: SystemModel, x, u=None, params=None) -> Array:
    """Observability stack of the Jacobian pair at one operating point."""
    A, _ = step_jacobians(model, x, u, params)
    C, _ = output_jacobians(model, x, params)
    return observability_matrix_linear(A, C)


def write_rank_trace(path, reports, steps=None) -> None:
    """Dump per-step rank diagnostics as CSV: step, rank, cond, sv_1.."""
    reports = list(reports)
    if steps is None:
        steps = range(len(reports))
    width = max((len(r.singular_values) for r in reports), default=0)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "rank", "cond"] + [f"sv_{i + 1}" for i in range(width)])
        for k, rep in zip(steps, reports):
            svs = [f"{v:.6e}" for v in rep.singular_values]
            svs += [""] * (width - len(svs))
            writer.writerow([k, rep.rank, f"{rep.condition_number:.6e}"] + svs)
