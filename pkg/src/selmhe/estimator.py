"""Selection-constrained moving-horizon estimation.

The decision variables of one cycle are the window-start state and the
per-interval additive disturbances of every estimated component. Components on
the frozen list are pinned: their window-start value is carried over from the
previous cycle and their disturbances are fixed at zero, which removes them
from the decision space instead of penalizing them.

The solver is a damped Gauss-Newton method on the single-shooting residual.
Each iteration solves the linearized subproblem exactly with a backward
Riccati-style sweep over the window (cost O(window * n^3)) followed by a
forward rollout of the increment; a halving line search with projection onto
the variable boxes guards the step. Trajectory box constraints and an optional
residual bound enter through quadratic penalties; the window-start state and
the disturbances are projected, not penalized.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, EstimationError, NumericalFailure
from .selection import SelectionPolicy, SelectionResult, select_variables
from .sensitivity import (RankReport, build_window_sensitivity, normalize_sensitivity,
                          numeric_rank)
from .sysmodel import (SystemModel, trajectory_output_jacobians, trajectory_outputs,
                       trajectory_step_jacobians)

Array = np.ndarray

# relative decrease below which the line search counts as stationary
_STALL_DECREASE = 1e-12

# Levenberg ladder for the window-start step: engaged only when the pure
# Gauss-Newton direction fails its line search, then grown until a step is
# accepted or the cap is reached
_DAMP_INIT = 1e-6
_DAMP_GROW = 100.0
_DAMP_MAX = 1e6
_DAMP_MIN = 1e-8


def _covariance_inverse(value, dim: int, name: str) -> Array:
    """Inverse of a covariance given as scalar, diagonal, or full matrix."""
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        arr = np.full(dim, float(arr))
    if arr.ndim == 1:
        if arr.shape != (dim,):
            raise DimensionMismatch(f"{name} diagonal must have length {dim}")
        if np.any(arr <= 0.0):
            raise DimensionMismatch(f"{name} must be positive definite")
        return np.diag(1.0 / arr)
    if arr.shape != (dim, dim):
        raise DimensionMismatch(f"{name} must be {dim}x{dim}")
    try:
        inv = np.linalg.inv(arr)
    except np.linalg.LinAlgError as exc:
        raise NumericalFailure(f"{name} is singular") from exc
    return 0.5 * (inv + inv.T)


def _optional_bound(value, dim: int, default: float) -> Array:
    if value is None:
        return np.full(dim, default)
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return np.full(dim, float(arr))
    if arr.shape != (dim,):
        raise DimensionMismatch(f"bound must be scalar or length {dim}")
    return arr.copy()


@dataclass
class MheConfig:
    """Tuning knobs shared by every estimation cycle.

    ``horizon`` of None means full information: the window is the whole
    history and no arrival cost is carried. Covariances accept scalars,
    diagonals, or full matrices in the units of the model the estimator runs
    on (scale the model first if relative weighting is wanted).
    """

    process_noise_cov: float | Array
    measurement_noise_cov: float | Array
    horizon: int | None = None
    state_lower: Array | None = None
    state_upper: Array | None = None
    disturbance_lower: Array | None = None
    disturbance_upper: Array | None = None
    residual_bound: float | None = None
    prior_cov: float | Array | None = None  # arrival-cost weight, sliding mode only
    max_iterations: int = 40
    gradient_tol: float = 1e-6
    penalty_weight: float = 1e3
    max_backtracks: int = 20
    solve_rcond: float = 1e-10
    step_travel_bound: float | None = None  # per-solve cap on window-start moves
    rank_scale: float = 1.0             # multiplier on the SVD rank tolerance
    output_floor: float | Array | None = None  # normalization floor, None = automatic
    sensitivity_horizon: int | None = None     # ranking window, None = full window


@dataclass
class MheProblem:
    """One window of data plus the frozen-component contract for this cycle."""

    model: SystemModel
    inputs: Array              # (L, m) inputs between the window points
    outputs: Array             # (L+1, r) measurements at the window points
    start_step: int = 0
    frozen: tuple[int, ...] = ()
    frozen_values: Array | None = None   # full-length vector, frozen entries used
    warm_start_state: Array | None = None
    warm_disturbances: Array | None = None
    prior_mean: Array | None = None
    params: Array | None = None

    @property
    def window_length(self) -> int:
        return len(self.inputs)

    @property
    def free_indices(self) -> Array:
        mask = np.ones(self.model.state_dim, dtype=bool)
        mask[list(self.frozen)] = False
        return np.flatnonzero(mask)

    @property
    def free_count(self) -> int:
        """Decision-space dimension: window-start state plus all disturbances."""
        nf = self.model.state_dim - len(self.frozen)
        return nf * (1 + self.window_length)


@dataclass
class EstimateTrajectory:
    """Solver output over one window."""

    states: Array          # (L+1, n)
    disturbances: Array    # (L, n), frozen rows identically zero
    residuals: Array       # (L+1, r) measurement residuals y - y_hat
    objective: float
    iterations: int
    converged: bool
    gradient_norm: float
    start_step: int = 0


@dataclass
class EstimationRecord:
    """Everything one advance() cycle decided and produced."""

    step: int
    estimate: Array                     # current-time estimate x_hat(k|k)
    window_start: int
    frozen: tuple[int, ...]
    selection: SelectionResult | None
    rank: RankReport
    objective: float
    iterations: int
    converged: bool
    solver_failed: bool = False
    reused_linearization: bool = False


def assemble_problem(model: SystemModel, inputs, outputs, frozen=(),
                     frozen_values=None, warm_start_state=None,
                     warm_disturbances=None, start_step: int = 0,
                     prior_mean=None, params=None) -> MheProblem:
    """Validate shapes and fill defaults for one solver call."""
    n, m, r = model.state_dim, model.input_dim, model.output_dim
    outputs = np.asarray(outputs, dtype=float).reshape(-1, r)
    L = len(outputs) - 1
    if L < 0:
        raise DimensionMismatch("window needs at least one measurement")
    if m == 0:
        inputs = np.zeros((L, 0))
    else:
        inputs = np.asarray(inputs, dtype=float).reshape(-1, m)
    if len(inputs) != L:
        raise DimensionMismatch(f"expected {L} inputs for {L + 1} measurements")
    frozen = tuple(sorted(set(int(i) for i in frozen)))
    if frozen and not (0 <= frozen[0] and frozen[-1] < n):
        raise DimensionMismatch(f"frozen indices out of range for {n} states")
    if frozen and frozen_values is None:
        raise DimensionMismatch("frozen components need frozen_values")
    if warm_start_state is None:
        warm_start_state = np.zeros(n)
    warm_start_state = np.asarray(warm_start_state, dtype=float).copy()
    if warm_start_state.shape != (n,):
        raise DimensionMismatch(f"warm start state must have shape ({n},)")
    if warm_disturbances is None:
        warm_disturbances = np.zeros((L, n))
    warm_disturbances = np.asarray(warm_disturbances, dtype=float).copy()
    if warm_disturbances.shape != (L, n):
        raise DimensionMismatch(f"warm disturbances must have shape ({L},{n})")
    if frozen_values is not None:
        frozen_values = np.asarray(frozen_values, dtype=float).copy()
        if frozen_values.shape != (n,):
            raise DimensionMismatch(f"frozen_values must have shape ({n},)")
    return MheProblem(model=model, inputs=inputs, outputs=outputs,
                      start_step=start_step, frozen=frozen,
                      frozen_values=frozen_values,
                      warm_start_state=warm_start_state,
                      warm_disturbances=warm_disturbances,
                      prior_mean=prior_mean, params=params)


def _rollout(model: SystemModel, x0: Array, w: Array, inputs: Array,
             params: Array) -> Array:
    """Single-shooting trajectory x(i+1) = f(x(i), u(i)) + w(i)."""
    L = len(w)
    states = np.empty((L + 1, model.state_dim))
    states[0] = x0
    fn = model.step_fn
    for i in range(L):
        states[i + 1] = fn(states[i], inputs[i], params) + w[i]
    return states


def _rollout_or_hold(model: SystemModel, x0: Array, w: Array, inputs: Array,
                     params: Array) -> tuple[Array, bool]:
    """Rollout that survives model blow-ups by holding the last good point.

    Needed for the prediction trajectory the ranking runs on: a bad warm
    start (typically runaway parameter estimates) must degrade the ranking,
    not kill the cycle. Returns (states, clean).
    """
    L = len(w)
    states = np.empty((L + 1, model.state_dim))
    states[0] = x0
    fn = model.step_fn
    for i in range(L):
        try:
            nxt = fn(states[i], inputs[i], params) + w[i]
        except EstimationError:
            nxt = None
        if nxt is None or not np.all(np.isfinite(nxt)):
            states[i + 1:] = states[i]
            return states, False
        states[i + 1] = nxt
    return states, True


def solve(problem: MheProblem, config: MheConfig,
          first_linearization=None) -> EstimateTrajectory:
    """Damped projected Gauss-Newton over one window.

    ``first_linearization`` may carry (A, C) Jacobian stacks evaluated along
    the warm-start rollout; they are trusted for the first iteration only.
    """
    model = problem.model
    n, r = model.state_dim, model.output_dim
    L = problem.window_length
    y = problem.outputs
    u = problem.inputs
    params = (np.zeros(model.param_dim) if problem.params is None
              else np.asarray(problem.params, dtype=float))
    free = problem.free_indices
    nf = len(free)
    mu = config.penalty_weight

    Qinv = _covariance_inverse(config.process_noise_cov, n, "process noise covariance")
    Rinv = _covariance_inverse(config.measurement_noise_cov, r,
                               "measurement noise covariance")
    Qinv_ff = Qinv[np.ix_(free, free)]

    x_lo = _optional_bound(config.state_lower, n, -np.inf)
    x_hi = _optional_bound(config.state_upper, n, np.inf)
    w_lo = _optional_bound(config.disturbance_lower, n, -np.inf)
    w_hi = _optional_bound(config.disturbance_upper, n, np.inf)
    bound = config.residual_bound

    Pinv = None
    if problem.prior_mean is not None and config.prior_cov is not None:
        Pinv = _covariance_inverse(config.prior_cov, n, "prior covariance")
        prior = np.asarray(problem.prior_mean, dtype=float)

    x0 = problem.warm_start_state.copy()
    if problem.frozen:
        idx = list(problem.frozen)
        x0[idx] = problem.frozen_values[idx]
    x0 = np.clip(x0, x_lo, x_hi)
    # trust region around the warm start: a single window solve may not move
    # the window-start state further than this, which keeps statistically
    # undetermined directions from landing at arbitrary in-box values
    if config.step_travel_bound is not None:
        x0_lo = np.maximum(x_lo, x0 - config.step_travel_bound)
        x0_hi = np.minimum(x_hi, x0 + config.step_travel_bound)
    else:
        x0_lo, x0_hi = x_lo, x_hi
    w = problem.warm_disturbances.copy()
    if problem.frozen:
        w[:, list(problem.frozen)] = 0.0
    w = np.clip(w, w_lo, w_hi)

    def evaluate(x0_c, w_c):
        """Rollout and objective; None objective marks an infeasible point."""
        try:
            states = _rollout(model, x0_c, w_c, u, params)
        except EstimationError:
            return None, None, None
        if not np.all(np.isfinite(states)):
            return None, None, None
        v = y - trajectory_outputs(model, states, params)
        J = float(np.sum((v @ Rinv) * v) + np.sum((w_c @ Qinv) * w_c))
        lo_e = np.maximum(x_lo - states, 0.0)
        hi_e = np.maximum(states - x_hi, 0.0)
        J += mu * float(np.sum(lo_e ** 2) + np.sum(hi_e ** 2))
        if bound is not None:
            over = np.maximum(np.abs(v) - bound, 0.0)
            J += mu * float(np.sum(over ** 2))
        if Pinv is not None:
            d = x0_c - prior
            J += float(d @ Pinv @ d)
        if not np.isfinite(J):
            return None, None, None
        return states, v, J

    states, v, J = evaluate(x0, w)
    if J is None:
        raise NumericalFailure("warm start gives an infeasible trajectory")

    def linearize(states_c):
        C, _ = trajectory_output_jacobians(model, states_c, params)
        if L > 0:
            A, _ = trajectory_step_jacobians(model, states_c[:-1], u, params)
        else:
            A = np.zeros((0, n, n))
        return A, C

    def stage_terms(states_c, v_c, x0_c, C):
        """Per-stage quadratic models: value form dx'P dx - 2 q'dx."""
        CR = C.transpose(0, 2, 1) @ Rinv
        Pm = CR @ C
        qm = (CR @ v_c[:, :, None])[:, :, 0]
        lo_e = np.maximum(x_lo - states_c, 0.0)
        hi_e = np.maximum(states_c - x_hi, 0.0)
        act = (lo_e > 0.0) | (hi_e > 0.0)
        if act.any():
            diag = np.arange(n)
            Pm[:, diag, diag] += mu * act
            qm += mu * (lo_e - hi_e)
        if bound is not None:
            e = v_c - bound * np.sign(v_c)
            e[np.abs(v_c) <= bound] = 0.0
            act_v = (e != 0.0)
            if act_v.any():
                CTa = C.transpose(0, 2, 1) * (mu * act_v)[:, None, :]
                Pm += CTa @ C
                qm += (CTa @ e[:, :, None])[:, :, 0]
        if Pinv is not None:
            Pm[0] += Pinv
            qm[0] -= Pinv @ (x0_c - prior)
        return Pm, qm

    def projected_gradient_norm(A, qm, w_c, x0_c):
        """Adjoint gradient with outward components zeroed at active bounds."""
        g = -2.0 * qm
        lam = g[L].copy()
        gw = np.zeros((L, nf))
        for i in range(L - 1, -1, -1):
            gw[i] = 2.0 * (Qinv @ w_c[i])[free] + lam[free]
            lam = g[i] + A[i].T @ lam
        gx0 = lam[free].copy()
        at_lo = x0_c[free] <= x0_lo[free]
        at_hi = x0_c[free] >= x0_hi[free]
        gx0[at_lo & (gx0 > 0.0)] = 0.0
        gx0[at_hi & (gx0 < 0.0)] = 0.0
        if np.isfinite(w_lo[free]).any() or np.isfinite(w_hi[free]).any():
            wl = w_c[:, free] <= w_lo[free]
            wh = w_c[:, free] >= w_hi[free]
            gw[wl & (gw > 0.0)] = 0.0
            gw[wh & (gw < 0.0)] = 0.0
        return float(np.sqrt(gx0 @ gx0 + np.sum(gw * gw)))

    def gauss_newton_step(A, Pm, qm, w_c, damping=0.0):
        """Exact subproblem solution by a backward sweep and forward rollout.

        ``damping`` shrinks the window-start step along weakly determined
        directions (Levenberg style, scaled by the mean curvature); the
        disturbance sweep needs no damping because the process-noise weight
        already regularizes it.
        """
        P = Pm[L]
        q = qm[L].copy()
        gains = [None] * L
        offsets = [None] * L
        for i in range(L - 1, -1, -1):
            Ai = A[i]
            if nf:
                G = Qinv_ff + P[np.ix_(free, free)]
                F = P[free, :] @ Ai
                c = Qinv_ff @ w_c[i][free] - q[free]
                try:
                    sol = np.linalg.solve(G, np.column_stack([F, c]))
                except np.linalg.LinAlgError:
                    sol = np.linalg.lstsq(G, np.column_stack([F, c]),
                                          rcond=config.solve_rcond)[0]
                GiF, Gic = sol[:, :-1], sol[:, -1]
                gains[i] = -GiF
                offsets[i] = -Gic
                P = Pm[i] + Ai.T @ P @ Ai - F.T @ GiF
                q = qm[i] + Ai.T @ q + F.T @ Gic
            else:
                P = Pm[i] + Ai.T @ P @ Ai
                q = qm[i] + Ai.T @ q
            P = 0.5 * (P + P.T)
        dx0 = np.zeros(n)
        if nf:
            sub = P[np.ix_(free, free)]
            rhs = q[free]
            if damping > 0.0:
                lam = damping * max(np.trace(sub) / nf, np.finfo(float).tiny)
                try:
                    step_f = np.linalg.solve(sub + lam * np.eye(nf), rhs)
                except np.linalg.LinAlgError:
                    step_f = np.linalg.lstsq(sub + lam * np.eye(nf), rhs,
                                             rcond=config.solve_rcond)[0]
            else:
                # min-norm: undetermined directions stay at the warm start
                step_f = np.linalg.lstsq(sub, rhs, rcond=config.solve_rcond)[0]
            dx0[free] = step_f
        dw = np.zeros((L, n))
        dx = dx0
        for i in range(L):
            if nf:
                dw[i, free] = offsets[i] + gains[i] @ dx
            dx = A[i] @ dx + dw[i]
        return dx0, dw

    converged = False
    gnorm = np.inf
    iterations = 0
    reuse = first_linearization
    damping = 0.0
    for it in range(config.max_iterations):
        iterations = it + 1
        if reuse is not None:
            A, C = reuse
            reuse = None
        else:
            A, C = linearize(states)
        Pm, qm = stage_terms(states, v, x0, C)
        gnorm = projected_gradient_norm(A, qm, w, x0)
        if gnorm <= config.gradient_tol * (1.0 + abs(J)):
            converged = True
            break
        accepted = False
        while True:
            dx0, dw = gauss_newton_step(A, Pm, qm, w, damping)
            t = 1.0
            halvings = config.max_backtracks if damping == 0.0 else 4
            for _ in range(halvings + 1):
                x0_c = np.clip(x0 + t * dx0, x0_lo, x0_hi)
                w_c = np.clip(w + t * dw, w_lo, w_hi)
                states_c, v_c, J_c = evaluate(x0_c, w_c)
                if J_c is not None and J_c < J:
                    accepted = True
                    break
                t *= 0.5
            if accepted:
                damping = damping * 0.25 if damping > _DAMP_MIN else 0.0
                break
            if damping >= _DAMP_MAX:
                break
            damping = _DAMP_INIT if damping == 0.0 else damping * _DAMP_GROW
        if not accepted:
            # no decrease at maximum damping: treat a negligible proposed
            # step as stationarity, anything larger as a solver failure
            step_size = float(np.linalg.norm(dx0) + np.linalg.norm(dw))
            point_size = 1.0 + float(np.linalg.norm(x0) + np.linalg.norm(w))
            converged = step_size <= 1e-10 * point_size
            break
        decrease = J - J_c
        x0, w, states, v, J = x0_c, w_c, states_c, v_c, J_c
        if decrease <= _STALL_DECREASE * (1.0 + abs(J)):
            converged = True
            break

    return EstimateTrajectory(states=states, disturbances=w, residuals=v,
                              objective=J, iterations=iterations,
                              converged=converged, gradient_norm=gnorm,
                              start_step=problem.start_step)


class MovingHorizonEstimator:
    """Recursive estimator cycling sensitivity ranking, selection, and solving.

    Works on a parameter-free model (augment a parametric one first). Each
    advance() appends one measurement, ranks the augmented components over the
    current window along the warm-start prediction, freezes the unselected
    ones at their previous window-start estimates, and solves the constrained
    window problem. With ``policy=None`` every component stays free.
    """

    def __init__(self, model: SystemModel, config: MheConfig,
                 policy: SelectionPolicy | None = None, initial_guess=None,
                 anchor_state=None):
        if model.param_dim != 0:
            raise DimensionMismatch(
                "estimator expects a parameter-free (augmented) model")
        if initial_guess is None:
            raise DimensionMismatch("initial_guess is required")
        self.model = model
        self.config = config
        self.policy = policy
        n = model.state_dim
        self.initial_guess = np.asarray(initial_guess, dtype=float).copy()
        if self.initial_guess.shape != (n,):
            raise DimensionMismatch(f"initial_guess must have shape ({n},)")
        self.anchor_state = (np.ones(n) if anchor_state is None
                             else np.asarray(anchor_state, dtype=float).copy())
        if self.anchor_state.shape != (n,):
            raise DimensionMismatch(f"anchor_state must have shape ({n},)")
        self._outputs: list[Array] = []
        self._inputs: list[Array] = []
        self._prev: EstimateTrajectory | None = None
        self._prev_selected: tuple[int, ...] = ()
        self._entry_streaks: tuple[int, ...] | None = None
        self.records: list[EstimationRecord] = []
        self.estimates: list[Array] = []
        self._empty_params = np.zeros(0)

    @property
    def step(self) -> int:
        return len(self._outputs) - 1

    def _window_start(self, k: int) -> int:
        if self.config.horizon is None:
            return 0
        return max(0, k - self.config.horizon)

    def _warm_start(self, k: int, start: int):
        """Warm decision variables for the window [start, k]."""
        n = self.model.state_dim
        L = k - start
        if self._prev is None:
            return self.initial_guess.copy(), np.zeros((L, n))
        shift = start - self._prev.start_step   # 0 until a sliding window fills
        x0 = self._prev.states[shift].copy()
        w = np.vstack([self._prev.disturbances[shift:], np.zeros((1, n))])
        return x0, w

    def advance(self, measurement, input_previous=None) -> EstimationRecord:
        """Incorporate the measurement at the next time step."""
        model = self.model
        n, r = model.state_dim, model.output_dim
        if len(self._outputs) > 0:
            if model.input_dim and input_previous is None:
                raise DimensionMismatch("model takes inputs; pass input_previous")
            self._inputs.append(np.zeros(0) if model.input_dim == 0
                                else np.asarray(input_previous, dtype=float))
        self._outputs.append(np.asarray(measurement, dtype=float).reshape(r))
        k = len(self._outputs) - 1
        start = self._window_start(k)
        u_win = (np.array(self._inputs[start:]).reshape(k - start, model.input_dim)
                 if k > start else np.zeros((0, model.input_dim)))
        y_win = np.array(self._outputs[start:]).reshape(k - start + 1, r)

        x0_warm, w_warm = self._warm_start(k, start)
        # clip here so the prediction, the sensitivity linearization, and the
        # solver's own warm start all see exactly the same trajectory
        x0_warm = np.clip(x0_warm, *self._state_box())
        w_warm = np.clip(w_warm, *self._disturbance_box())
        states_pred, pred_clean = _rollout_or_hold(model, x0_warm, w_warm, u_win,
                                                   self._empty_params)
        C_stack, _ = trajectory_output_jacobians(model, states_pred)
        if k > start:
            A_stack, _ = trajectory_step_jacobians(model, states_pred[:-1], u_win)
        else:
            A_stack = np.zeros((0, n, n))

        window, rank_report = self._rank_window(states_pred, u_win, start,
                                                A_stack, C_stack)
        if self.policy is not None:
            selection = select_variables(self.policy, window, rank_report,
                                         step=k, previous=self._prev_selected,
                                         entry_streaks=self._entry_streaks)
            frozen = tuple(sorted(selection.unselected))
            self._prev_selected = selection.selected
            self._entry_streaks = selection.entry_streaks
        else:
            selection = None
            frozen = ()

        w_zeroed = w_warm.copy()
        if frozen:
            w_zeroed[:, list(frozen)] = 0.0
        reuse_ok = pred_clean and np.array_equal(w_zeroed, w_warm)

        problem = assemble_problem(
            model, u_win, y_win, frozen=frozen, frozen_values=x0_warm,
            warm_start_state=x0_warm, warm_disturbances=w_zeroed,
            start_step=start, prior_mean=self._prior_mean(start))
        failed = False
        try:
            solution = solve(problem, self.config,
                             first_linearization=(A_stack, C_stack)
                             if reuse_ok else None)
        except NumericalFailure:
            failed = True
            v_pred = y_win - trajectory_outputs(model, states_pred)
            solution = EstimateTrajectory(
                states=states_pred, disturbances=w_zeroed, residuals=v_pred,
                objective=float("nan"), iterations=0, converged=False,
                gradient_norm=float("nan"), start_step=start)

        self._prev = solution
        estimate = solution.states[-1].copy()
        self.estimates.append(estimate)
        record = EstimationRecord(
            step=k, estimate=estimate, window_start=start, frozen=frozen,
            selection=selection, rank=rank_report, objective=solution.objective,
            iterations=solution.iterations, converged=solution.converged,
            solver_failed=failed, reused_linearization=reuse_ok)
        self.records.append(record)
        return record

    def _state_box(self):
        n = self.model.state_dim
        return (_optional_bound(self.config.state_lower, n, -np.inf),
                _optional_bound(self.config.state_upper, n, np.inf))

    def _disturbance_box(self):
        n = self.model.state_dim
        return (_optional_bound(self.config.disturbance_lower, n, -np.inf),
                _optional_bound(self.config.disturbance_upper, n, np.inf))

    def _prior_mean(self, start: int):
        if self.config.horizon is None or self.config.prior_cov is None:
            return None
        if self._prev is None or start == self._prev.start_step:
            return None
        return self._prev.states[start - self._prev.start_step].copy()

    def _rank_window(self, states_pred, u_win, start, A_stack, C_stack):
        """Normalized window sensitivity and its numeric rank."""
        cfg = self.config
        s_states, s_inputs = states_pred, u_win
        s_A, s_C, s_start = A_stack, C_stack, start
        if cfg.sensitivity_horizon is not None:
            keep = min(len(states_pred), cfg.sensitivity_horizon + 1)
            s_states = states_pred[-keep:]
            s_inputs = u_win[len(u_win) - (keep - 1):]
            s_A = A_stack[len(A_stack) - (keep - 1):]
            s_C = C_stack[-keep:]
            s_start = start + (len(states_pred) - keep)
        window = build_window_sensitivity(self.model, s_states, s_inputs,
                                          start_step=s_start,
                                          jacobians=(s_A, s_C))
        y_pred = trajectory_outputs(self.model, s_states)
        window = normalize_sensitivity(window, self.anchor_state, y_pred,
                                       output_floor=cfg.output_floor)
        rank_report = numeric_rank(window.stacked, rank_scale=cfg.rank_scale)
        return window, rank_report
