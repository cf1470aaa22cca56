"""Sensitivity propagation against independent oracles, rank diagnostics."""

import csv

import numpy as np
import pytest

from selmhe.errors import DimensionMismatch, NumericalFailure
from selmhe import sensitivity as sens
from selmhe import sysmodel as sm

from test_sysmodel import make_nonlinear


def simulate(model, x0, inputs, th):
    xs = [np.asarray(x0, dtype=float)]
    for u in inputs:
        xs.append(sm.step(model, xs[-1], u, th))
    return np.array(xs)


def random_linear(n, r, seed, stable=0.9):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((n, n))
    A *= stable / max(1e-9, np.max(np.abs(np.linalg.eigvals(A))))
    C = rng.standard_normal((r, n))
    model = sm.SystemModel(
        state_dim=n, input_dim=0, output_dim=r, param_dim=0,
        step_fn=lambda x, u, th: A @ x,
        output_fn=lambda x, th: C @ x)
    return model, A, C


def test_linear_window_equals_observability_stack():
    # windowed sensitivity blocks of a linear pair are exactly C A^k
    for seed in range(25):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 7))
        r = int(rng.integers(1, 3))
        model, A, C = random_linear(n, r, seed)
        x0 = rng.standard_normal(n)
        xs = simulate(model, x0, [None] * (n - 1), None)
        window = sens.build_window_sensitivity(model, xs, np.zeros((n - 1, 0)))
        obs = sens.observability_matrix_linear(A, C)
        assert np.allclose(window.stacked, obs, atol=1e-12)


def test_linearized_observability_matrix_shape():
    model, A, C = random_linear(4, 2, 11)
    obs = sens.linearized_observability_matrix(model, np.zeros(4))
    assert obs.shape == (8, 4)
    assert np.allclose(obs, sens.observability_matrix_linear(A, C), atol=1e-9)


def test_observability_matrix_validates():
    with pytest.raises(DimensionMismatch):
        sens.observability_matrix_linear(np.zeros((2, 3)), np.zeros((1, 2)))
    with pytest.raises(DimensionMismatch):
        sens.observability_matrix_linear(np.zeros((2, 2)), np.zeros((1, 3)))


def test_param_sensitivity_against_finite_differences():
    for seed in range(6):
        model = make_nonlinear(seed=seed)
        rng = np.random.default_rng(200 + seed)
        x0 = 0.3 * rng.standard_normal(3)
        inputs = 0.3 * rng.standard_normal((10, 2))
        th = 0.3 * rng.standard_normal(2)
        xs = simulate(model, x0, inputs, th)
        direct = sens.propagate_param_sensitivity(model, xs, inputs, th)
        oracle = sens.finite_difference_sensitivity(model, x0, inputs, th,
                                                    target="params")
        scale = np.max(np.abs(direct))
        assert np.max(np.abs(direct - oracle)) < 1e-4 * max(scale, 1.0)


def test_initial_state_sensitivity_against_finite_differences():
    for seed in range(6):
        model = make_nonlinear(seed=seed)
        rng = np.random.default_rng(300 + seed)
        x0 = 0.3 * rng.standard_normal(3)
        inputs = 0.3 * rng.standard_normal((10, 2))
        th = 0.3 * rng.standard_normal(2)
        xs = simulate(model, x0, inputs, th)
        direct = sens.propagate_initial_state_sensitivity(model, xs, inputs, th)
        oracle = sens.finite_difference_sensitivity(model, x0, inputs, th,
                                                    target="initial_state")
        scale = np.max(np.abs(direct))
        assert np.max(np.abs(direct - oracle)) < 1e-4 * max(scale, 1.0)


def test_state_sensitivity_recursion_consistency():
    model = make_nonlinear(seed=9)
    rng = np.random.default_rng(9)
    x0 = 0.3 * rng.standard_normal(3)
    inputs = 0.3 * rng.standard_normal((6, 2))
    th = 0.3 * rng.standard_normal(2)
    xs = simulate(model, x0, inputs, th)
    states = sens.propagate_state_sensitivities(model, xs, inputs, th)
    # chaining the per-step state sensitivities with C reproduces the stacks
    param_stack = sens.propagate_param_sensitivity(model, xs, inputs, th)
    init_stack = sens.propagate_initial_state_sensitivity(model, xs, inputs, th)
    for k, st in enumerate(states):
        C, D = sm.output_jacobians(model, xs[k], th)
        assert np.allclose(C @ st.wrt_params + D, param_stack[k], atol=1e-10)
        assert np.allclose(C @ st.wrt_initial_state, init_stack[k], atol=1e-10)
        assert st.step == k


def test_precomputed_jacobians_route_matches():
    model = make_nonlinear(seed=10)
    rng = np.random.default_rng(10)
    xs = 0.3 * rng.standard_normal((5, 3))
    us = 0.3 * rng.standard_normal((4, 2))
    th = np.zeros(2)
    C, _ = sm.trajectory_output_jacobians(model, xs, th)
    A, _ = sm.trajectory_step_jacobians(model, xs[:-1], us, th)
    direct = sens.propagate_initial_state_sensitivity(model, xs, us, th)
    reused = sens.propagate_initial_state_sensitivity(model, xs, us, th,
                                                      jacobians=(A, C))
    assert np.array_equal(direct, reused)


def test_single_point_window_is_one_output_block():
    model = make_nonlinear(seed=12)
    x = np.zeros(3)
    window = sens.build_window_sensitivity(model, x[None, :], np.zeros((0, 2)))
    assert window.n_blocks == 1
    C, _ = sm.output_jacobians(model, x, np.zeros(2))
    assert np.allclose(window.blocks[0], C)


def test_trajectory_input_count_mismatch_raises():
    model = make_nonlinear(seed=13)
    xs = np.zeros((4, 3))
    with pytest.raises(DimensionMismatch):
        sens.build_window_sensitivity(model, xs, np.zeros((1, 2)))
    with pytest.raises(DimensionMismatch):
        sens.propagate_param_sensitivity(model, np.zeros((0, 3)), np.zeros((0, 2)))


def test_finite_difference_sensitivity_validates():
    model = make_nonlinear(seed=14)
    with pytest.raises(DimensionMismatch):
        sens.finite_difference_sensitivity(model, np.zeros(3),
                                           np.zeros((2, 2)), np.zeros(2),
                                           target="both")
    with pytest.raises(DimensionMismatch):
        sens.finite_difference_sensitivity(model, np.zeros(3),
                                           np.zeros((2, 2)), np.zeros(2),
                                           deltas=np.ones(3))


def test_normalize_sensitivity_elasticity_form():
    blocks = np.arange(12, dtype=float).reshape(2, 2, 3) + 1.0
    window = sens.SensitivityWindow(blocks)
    anchor = np.array([2.0, 3.0, 4.0])
    ys = np.array([[1.0, 2.0], [4.0, 5.0]])
    out = sens.normalize_sensitivity(window, anchor, ys)
    assert out.normalized
    for l in range(2):
        for i in range(2):
            for j in range(3):
                expect = blocks[l, i, j] * anchor[j] / ys[l, i]
                assert out.blocks[l, i, j] == pytest.approx(expect)
    assert out.floored_outputs == ()


def test_normalize_sensitivity_floors_small_outputs():
    blocks = np.ones((2, 2, 2))
    window = sens.SensitivityWindow(blocks)
    anchor = np.ones(2)
    ys = np.array([[1.0, 1e-12], [1.0, -1e-12]])
    out = sens.normalize_sensitivity(window, anchor, ys, output_floor=1e-3)
    assert (0, 1) in out.floored_outputs and (1, 1) in out.floored_outputs
    assert out.blocks[0, 1, 0] == pytest.approx(1.0 / 1e-3)
    assert out.blocks[1, 1, 0] == pytest.approx(-1.0 / 1e-3)  # sign preserved
    with pytest.raises(DimensionMismatch):
        sens.normalize_sensitivity(window, np.ones(3), ys)
    with pytest.raises(DimensionMismatch):
        sens.normalize_sensitivity(window, anchor, ys[:1])


def test_numeric_rank_on_constructed_matrices():
    rng = np.random.default_rng(42)
    for trial in range(20):
        m, n = int(rng.integers(4, 30)), int(rng.integers(2, 12))
        r = int(rng.integers(1, min(m, n) + 1))
        L = rng.standard_normal((m, r))
        R = rng.standard_normal((r, n))
        report = sens.numeric_rank(L @ R)
        assert report.rank == np.linalg.matrix_rank(L @ R)
        assert report.singular_values.shape == (min(m, n),)
        assert report.condition_number >= 1.0


def test_numeric_rank_scale_moves_threshold():
    # two singular values 1 and 1e-9: default keeps both, big scale drops one
    U = np.eye(3)[:, :2]
    M = U @ np.diag([1.0, 1e-9]) @ np.eye(2)
    assert sens.numeric_rank(M).rank == 2
    big = sens.numeric_rank(M, rank_scale=1e8)
    assert big.rank == 1
    assert big.tolerance == pytest.approx(
        3 * 1.0 * np.finfo(float).eps * 1e8, rel=1e-12)


def test_numeric_rank_edge_cases():
    assert sens.numeric_rank(np.zeros((0, 3))).rank == 0
    report = sens.numeric_rank(np.zeros((3, 3)))
    assert report.rank == 0 and report.condition_number == np.inf
    with pytest.raises(NumericalFailure):
        sens.numeric_rank(np.array([[1.0, np.nan]]))


def test_window_stack_layout():
    blocks = np.arange(24, dtype=float).reshape(4, 2, 3)
    window = sens.SensitivityWindow(blocks, start_step=7)
    stacked = window.stacked
    assert stacked.shape == (8, 3)
    assert np.array_equal(stacked[2], blocks[1, 0])
    assert window.start_step == 7
    with pytest.raises(DimensionMismatch):
        sens.SensitivityWindow(np.zeros((2, 3)))


def test_write_rank_trace(tmp_path):
    reports = [sens.numeric_rank(np.eye(3)), sens.numeric_rank(np.eye(2))]
    path = tmp_path / "trace.csv"
    sens.write_rank_trace(path, reports, steps=[5, 6])
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0][:3] == ["step", "rank", "cond"]
    assert rows[1][0] == "5" and rows[1][1] == "3"
    assert rows[2][0] == "6" and rows[2][1] == "2"
    assert rows[2][-1] == ""   # padded singular-value column
