"""Greedy orthogonalized ranking of sensitivity columns and variable selection.

Columns (one per estimated variable) are picked largest-first; after each pick
the remaining columns are replaced by their residuals against the span of the
picked ones, so a column only scores for information not already covered.
Selection policies stop the ranking by numeric rank, by a noise-based cutoff
on the residual norm, or after a fixed count, and can force a subset in first.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, NumericalFailure
from .sensitivity import RankReport, SensitivityWindow

Array = np.ndarray

# 1/cond threshold below which the Gram solve is abandoned for the
# orthogonal-projection update.
_GRAM_RCOND_LIMIT = 1e-12


@dataclass(frozen=True)
class SelectionPolicy:
    """How many sensitivity columns to keep and why.

    mode 'cutoff' stops at the numeric rank or when the best remaining
    residual norm falls below alpha * sqrt(process_noise_var +
    measurement_noise_var); 'fixed_count' keeps exactly ``fixed_count``
    columns; 'forced_subset_cutoff' includes ``forced`` first and applies the
    cutoff rule to the rest. Noise variances are in the same (relative) units
    as the normalized sensitivity entries.

    ``exit_margin`` adds hysteresis to the cutoff modes: a column selected in
    the previous window (passed to select_variables as ``previous``) stays
    eligible down to exit_margin * cutoff instead of the full cutoff. Without
    it, columns hovering near the threshold enter and leave the estimated set
    on alternating windows, and every exit re-freezes the variable at whatever
    value the last window left it with. 1.0 disables the band.

    ``entry_confirm`` guards entry the same way exit_margin guards exit: a
    column not in ``previous`` joins only after clearing the cutoff on this
    many consecutive windows (tracked via ``entry_streaks``). Short windows
    can transiently align a weak column with the unexplained subspace; such
    flares collapse within a few samples, while genuinely identifiable columns
    stay above the cutoff once they cross it, so persistence separates the
    two where the margin itself cannot. 1 disables the guard. A cold start
    (empty ``previous``) is exempt so the initial set forms immediately, and a
    column at or above ``entry_bypass`` times the cutoff skips confirmation:
    observed flares peak around twice the cutoff while strongly identifiable
    columns arrive decades above it, so the two populations are separable by
    magnitude there even though they overlap near the threshold.
    """

    mode: str = "cutoff"
    alpha: float = 2.0
    fixed_count: int | None = None
    forced: tuple[int, ...] = ()
    process_noise_var: float = 0.0
    measurement_noise_var: float = 0.0
    exit_margin: float = 1.0
    entry_confirm: int = 1
    entry_bypass: float = math.inf

    def __post_init__(self):
        if self.mode not in ("cutoff", "fixed_count", "forced_subset_cutoff"):
            raise DimensionMismatch(f"unknown selection mode {self.mode!r}")
        if self.mode == "fixed_count" and (self.fixed_count is None or self.fixed_count < 1):
            raise DimensionMismatch("fixed_count mode needs fixed_count >= 1")
        if self.mode == "forced_subset_cutoff" and not self.forced:
            raise DimensionMismatch("forced_subset_cutoff mode needs forced indices")
        if not 0.0 < self.exit_margin <= 1.0:
            raise DimensionMismatch("exit_margin must be in (0, 1]")
        if self.entry_confirm < 1:
            raise DimensionMismatch("entry_confirm must be >= 1")
        if self.entry_bypass < 1.0:
            raise DimensionMismatch("entry_bypass must be >= 1")


@dataclass
class SelectionResult:
    """Ordered pick list for one step plus the complement set to freeze."""

    step: int
    selected: tuple[int, ...]
    residual_norms: tuple[float, ...]   # picked column's residual norm, per pick
    terminated_by: str                  # 'rank' | 'cutoff' | 'count'
    n_columns: int
    cutoff: float | None = None
    mode: str = "cutoff"
    gram_fallback: bool = False
    dropped_forced: tuple[int, ...] = ()
    # consecutive windows each unselected column has cleared the cutoff;
    # feed back into the next call when entry_confirm > 1
    entry_streaks: tuple[int, ...] | None = None

    @property
    def unselected(self) -> frozenset:
        return frozenset(range(self.n_columns)) - set(self.selected)


@dataclass
class ColumnRanking:
    """Full greedy ordering of all columns with residual norms before each pick."""

    order: tuple[int, ...]
    residual_norms: tuple[float, ...]
    gram_fallback: bool = False


def cutoff_value(alpha: float, process_noise_var: float,
                 measurement_noise_var: float) -> float:
    """Residual-norm cutoff alpha * sqrt(sum of the two noise variances)."""
    if process_noise_var < 0 or measurement_noise_var < 0:
        raise DimensionMismatch("noise variances must be nonnegative")
    return float(alpha) * math.sqrt(process_noise_var + measurement_noise_var)


def _orthonormal_basis(X: Array) -> Array:
    """Rank-revealing modified Gram-Schmidt basis of the columns of X."""
    cols = []
    ref = float(np.max(np.linalg.norm(X, axis=0))) if X.size else 0.0
    for j in range(X.shape[1]):
        v = X[:, j].copy()
        for q in cols:          # two passes for reorthogonalization
            v -= q @ v * q
        for q in cols:
            v -= q @ v * q
        nv = float(np.linalg.norm(v))
        if nv > 1e-12 * max(ref, 1e-300):
            cols.append(v / nv)
    if not cols:
        return np.zeros((X.shape[0], 0))
    return np.column_stack(cols)


class _GreedyRanker:
    """Shared engine: recomputes residual column norms for a growing pick set."""

    def __init__(self, matrix: Array):
        self.S = matrix
        self.selected: list[int] = []
        self.gram_fallback = False

    def residual_norms(self) -> Array:
        """Column norms of S projected off the span of the selected columns."""
        if not self.selected:
            return np.linalg.norm(self.S, axis=0)
        X = self.S[:, self.selected]
        gram = X.T @ X
        use_fallback = True
        cond = np.linalg.cond(gram)
        if np.isfinite(cond) and cond < 1.0 / _GRAM_RCOND_LIMIT:
            try:
                coeff = np.linalg.solve(gram, X.T @ self.S)
                use_fallback = False
            except np.linalg.LinAlgError:
                use_fallback = True
        if use_fallback:
            self.gram_fallback = True
            basis = _orthonormal_basis(X)
            residual = self.S - basis @ (basis.T @ self.S)
        else:
            residual = self.S - X @ coeff
        return np.linalg.norm(residual, axis=0)

    def pick(self, index: int) -> None:
        self.selected.append(index)


def _argmax_over(norms: Array, candidates) -> int:
    """Largest-norm candidate, ties broken by lowest index."""
    cand = sorted(candidates)
    best = cand[0]
    for idx in cand[1:]:
        if norms[idx] > norms[best]:
            best = idx
    return best


def orthogonalize_rank(matrix) -> ColumnRanking:
    """Rank every column of the (stacked) sensitivity matrix, largest first.

    Runs to exhaustion; stopping rules are the caller's business. The recorded
    residual norm for each pick is the picked column's norm at that round.
    """
    S = np.atleast_2d(np.asarray(matrix, dtype=float))
    if not np.all(np.isfinite(S)):
        raise NumericalFailure("ranking input contains non-finite entries")
    engine = _GreedyRanker(S)
    remaining = set(range(S.shape[1]))
    order, norms = [], []
    while remaining:
        res = engine.residual_norms()
        pick = _argmax_over(res, remaining)
        order.append(pick)
        norms.append(float(res[pick]))
        engine.pick(pick)
        remaining.discard(pick)
    return ColumnRanking(tuple(order), tuple(norms), engine.gram_fallback)


def select_variables(policy: SelectionPolicy, window, rank_report: RankReport,
                     step: int = 0, previous=(),
                     entry_streaks=None) -> SelectionResult:
    """Apply a selection policy to a (normalized) sensitivity window.

    ``window`` may be a SensitivityWindow or a plain stacked matrix. The rank
    report must describe the same matrix; its rank caps cutoff-mode picks and
    its tolerance decides when a forced column counts as dependent.
    ``previous`` lists the columns selected in the previous window; they get
    the policy's exit_margin hysteresis in the cutoff modes, and fresh columns
    are held back until their ``entry_streaks`` count (from the previous
    result) reaches entry_confirm - 1.
    """
    S = window.stacked if isinstance(window, SensitivityWindow) else \
        np.atleast_2d(np.asarray(window, dtype=float))
    ncols = S.shape[1]
    if ncols == 0:
        raise DimensionMismatch("selection needs at least one column")
    bad = [i for i in policy.forced if not 0 <= i < ncols]
    if bad:
        raise DimensionMismatch(f"forced indices {bad} out of range for {ncols} columns")
    if policy.mode == "fixed_count" and policy.fixed_count > ncols:
        raise DimensionMismatch(
            f"fixed_count {policy.fixed_count} exceeds {ncols} columns")

    engine = _GreedyRanker(S)
    remaining = set(range(ncols))
    order: list[int] = []
    norms: list[float] = []
    dropped: list[int] = []
    prev = frozenset(previous)
    streaks_in = (np.zeros(ncols, dtype=int) if entry_streaks is None
                  else np.asarray(entry_streaks, dtype=int))
    if streaks_in.shape != (ncols,):
        raise DimensionMismatch(f"entry_streaks must have length {ncols}")
    cold_start = len(prev) == 0
    lam = None
    stop_norm = None
    if policy.mode != "fixed_count":
        lam = cutoff_value(policy.alpha, policy.process_noise_var,
                           policy.measurement_noise_var)
        # lam is a per-sample noise level while column norms stack every row
        # of the window, so the comparison happens on the per-row RMS. This
        # keeps the selected set stationary as the window grows instead of
        # letting every column eventually cross a fixed absolute threshold.
        stop_norm = lam * math.sqrt(S.shape[0])

    def required(idx: int) -> float:
        return stop_norm * (policy.exit_margin if idx in prev else 1.0)

    def confirmed(idx: int, norm: float) -> bool:
        if cold_start or idx in prev:
            return True
        if norm >= policy.entry_bypass * stop_norm:
            return True
        return int(streaks_in[idx]) >= policy.entry_confirm - 1

    def take(idx: int, res: Array) -> None:
        order.append(idx)
        norms.append(float(res[idx]))
        engine.pick(idx)
        remaining.discard(idx)

    terminated = None
    if policy.mode == "forced_subset_cutoff":
        forced_left = set(policy.forced)
        while forced_left:
            res = engine.residual_norms()
            pick = _argmax_over(res, forced_left)
            forced_left.discard(pick)
            if res[pick] <= rank_report.tolerance:
                # dependent on the forced columns already in: drop, flagged
                dropped.append(pick)
                remaining.discard(pick)
                continue
            take(pick, res)

    if policy.mode == "fixed_count":
        while remaining and len(order) < policy.fixed_count:
            res = engine.residual_norms()
            take(_argmax_over(res, remaining), res)
        terminated = "count"
    else:
        while remaining:
            res = engine.residual_norms()
            if order:  # the very first pick happens before any stopping test
                if len(order) >= rank_report.rank:
                    terminated = "rank"
                    break
                passing = [i for i in remaining
                           if res[i] >= required(i) and confirmed(i, res[i])]
                if not passing:
                    terminated = "cutoff"
                    break
                pick = _argmax_over(res, passing)
            else:
                pick = _argmax_over(res, remaining)
            take(pick, res)
        if terminated is None:
            terminated = "rank" if len(order) >= rank_report.rank else "count"

    streaks_out = None
    if policy.mode != "fixed_count":
        streaks_out = np.zeros(ncols, dtype=int)
        if remaining:
            res = engine.residual_norms()
            for i in remaining:
                if res[i] >= stop_norm:
                    streaks_out[i] = streaks_in[i] + 1

    return SelectionResult(
        step=step,
        selected=tuple(order),
        residual_norms=tuple(norms),
        terminated_by=terminated,
        n_columns=ncols,
        cutoff=lam,
        mode=policy.mode,
        gram_fallback=engine.gram_fallback,
        dropped_forced=tuple(dropped),
        entry_streaks=None if streaks_out is None else tuple(int(s) for s in streaks_out),
    )


def unselected_set(result: SelectionResult) -> frozenset:
    """Complement of the selected set: the variables frozen for this step."""
    return result.unselected


def write_selection_log(path, results) -> None:
    """Per-step selection log as CSV."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "selected", "residual_norms", "terminated_by",
                         "cutoff", "dropped_forced"])
        for res in results:
            writer.writerow([
                res.step,
                ";".join(str(i) for i in res.selected),
                ";".join(f"{v:.6e}" for v in res.residual_norms),
                res.terminated_by,
                "" if res.cutoff is None else f"{res.cutoff:.6e}",
                ";".join(str(i) for i in res.dropped_forced),
            ])
