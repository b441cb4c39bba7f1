#!/usr/bin/env python3
"""
🧪 ROBUST ESTIMATION TESTS
Student-t likelihood, normal equations, bordered solve, LM and inlier gating
"""

import sys
import os
import math

import numpy as np
import pytest
import scipy.sparse as sp
from numpy.testing import assert_allclose
from scipy import stats

# Add src directory to path
sys.path.insert(0, os.path.join(os.path.dirname(os.path.dirname(__file__)), 'src'))

from robust_estimation import (
    StudentTModel, ResidualSet, SolverSettings, InnerConstraints, student_t_nll, student_t_weights,
    student_t_gradient, student_t_hessian, normal_equations, inner_constraint_matrix, solve_bordered,
    levenberg_marquardt, classify_inliers
)
from calibration_errors import AllOutliers, NoConvergence


class LinearProblem:
    """f(theta) = A theta observed as (n, 2) rows; camera parameters only"""

    def __init__(self, A: np.ndarray, observations: np.ndarray):
        self.A = A
        self.observations = observations
        self.n_camera_parameters = A.shape[1]
        self.n_point_parameters = 0
        self.observation_point_index = None
        self.variances = np.ones_like(observations)
        self.datum_reference = None
        self.initial_state = np.zeros(A.shape[1])

    def residuals(self, state):
        return self.observations - (self.A @ state).reshape(self.observations.shape)

    def linearize(self, state):
        return self.residuals(state), sp.csr_matrix(self.A)

    def retract(self, state, delta):
        return state + delta


def _linear_problem(seed=0, outlier=None):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(60, 3))
    truth = np.array([1.0, -0.5, 0.25])
    observations = (A @ truth).reshape(30, 2)
    if outlier is not None:
        observations[4, 0] += outlier
    return LinearProblem(A, observations), truth


def test_nll_matches_scipy_t_in_one_dimension():
    rng = np.random.default_rng(1)
    r = rng.normal(size=(12, 1))
    sigma = rng.uniform(0.5, 2.0, size=(12, 1))
    model = StudentTModel(nu=4.0, variances=sigma ** 2)
    expected = -np.sum(stats.t.logpdf(r, df=4.0, scale=sigma))
    assert student_t_nll(r, model) == pytest.approx(expected, rel=1e-10)


def test_nll_matches_scipy_multivariate_t():
    rng = np.random.default_rng(2)
    r = rng.normal(size=(8, 2))
    variances = rng.uniform(0.5, 2.0, size=(8, 2))
    model = StudentTModel(nu=3.0, variances=variances)
    expected = -sum(stats.multivariate_t.logpdf(r[i], loc=np.zeros(2), shape=np.diag(variances[i]), df=3.0)
                    for i in range(8))
    assert student_t_nll(r, model) == pytest.approx(expected, rel=1e-10)


def test_joint_nll_is_one_density_over_all_residuals():
    rng = np.random.default_rng(3)
    r = rng.normal(size=(5, 2))
    variances = np.full((5, 2), 0.25)
    model = StudentTModel(nu=4.0, variances=variances, joint=True)
    expected = -stats.multivariate_t.logpdf(r.ravel(), loc=np.zeros(10), shape=np.diag(variances.ravel()), df=4.0)
    assert student_t_nll(r, model) == pytest.approx(expected, rel=1e-10)


def test_infinite_nu_is_gaussian():
    rng = np.random.default_rng(4)
    r = rng.normal(size=(10, 2))
    model = StudentTModel(nu=math.inf, variances=np.full((10, 2), 4.0))
    assert model.gaussian
    expected = -np.sum(stats.norm.logpdf(r, scale=2.0))
    assert student_t_nll(r, model) == pytest.approx(expected, rel=1e-10)
    assert_allclose(student_t_weights(r, model), np.ones(10))


def test_weights_at_zero_residual():
    model = StudentTModel(nu=4.0, variances=np.ones((3, 2)))
    assert_allclose(student_t_weights(np.zeros((3, 2)), model), np.full(3, 6.0 / 4.0))


def test_invalid_nu_rejected():
    with pytest.raises(ValueError):
        StudentTModel(nu=0.0)


def test_gradient_and_hessian_match_finite_differences():
    problem, _ = _linear_problem(seed=5)
    model = StudentTModel(nu=4.0, variances=problem.variances)
    theta = np.array([0.3, 0.2, -0.1])
    J = problem.A

    def nll(t):
        return student_t_nll(problem.residuals(t), model)

    def grad(t):
        return student_t_gradient(problem.residuals(t), J, model)

    h = 1e-6
    numeric_gradient = np.array([(nll(theta + h * e) - nll(theta - h * e)) / (2 * h) for e in np.eye(3)])
    assert_allclose(grad(theta), numeric_gradient, rtol=1e-6, atol=1e-6)

    numeric_hessian = np.column_stack([(grad(theta + h * e) - grad(theta - h * e)) / (2 * h) for e in np.eye(3)])
    H = student_t_hessian(problem.residuals(theta), J, model, gauss_newton=False)
    assert_allclose(H, numeric_hessian, rtol=1e-5, atol=1e-5)


def test_normal_equations_shapes():
    problem, _ = _linear_problem()
    model = StudentTModel(variances=problem.variances)
    N, b = normal_equations(problem.residuals(problem.initial_state), problem.A, model)
    assert N.shape == (3, 3)
    assert b.shape == (3,)
    assert_allclose(N.toarray(), N.toarray().T, atol=1e-12)


def test_inner_constraint_rows_are_normalized():
    rng = np.random.default_rng(6)
    C = inner_constraint_matrix(rng.uniform(-50, 50, (10, 3)))
    assert C.shape == (7, 30)
    assert_allclose(np.linalg.norm(C, axis=1), np.ones(7))
    assert np.linalg.matrix_rank(C) == 7


def test_solve_bordered_matches_dense_kkt():
    rng = np.random.default_rng(8)
    n_camera, n_points = 4, 5
    rows = []
    for p in range(n_points):
        for _ in range(4):
            row = np.zeros(n_camera + 3 * n_points)
            row[:n_camera] = rng.normal(size=n_camera)
            row[n_camera + 3 * p:n_camera + 3 * p + 3] = rng.normal(size=3)
            rows.append(row)
    J = np.array(rows)
    N = J.T @ J
    b = rng.normal(size=N.shape[0])
    reference = rng.uniform(-50, 50, (n_points, 3))
    constraints = InnerConstraints(inner_constraint_matrix(reference), reference)

    delta = solve_bordered(sp.csr_matrix(N), b, 0.0, n_camera, constraints).delta

    E = np.zeros((7, N.shape[0]))
    E[:, n_camera:] = constraints.matrix
    kkt = np.block([[N, E.T], [E, np.zeros((7, 7))]])
    expected = np.linalg.solve(kkt, np.concatenate([b, np.zeros(7)]))[:N.shape[0]]
    assert_allclose(delta, expected, rtol=1e-8, atol=1e-8)
    assert_allclose(constraints.matrix @ delta[n_camera:], np.zeros(7), atol=1e-9)


def test_solve_bordered_without_points_is_plain_solve():
    rng = np.random.default_rng(9)
    A = rng.normal(size=(10, 4))
    N = A.T @ A
    b = rng.normal(size=4)
    delta = solve_bordered(sp.csr_matrix(N), b, 0.0, 4).delta
    assert_allclose(delta, np.linalg.solve(N, b), rtol=1e-10)


def test_levenberg_marquardt_gaussian_matches_least_squares():
    problem, truth = _linear_problem(outlier=5.0)
    result = levenberg_marquardt(problem, StudentTModel(nu=math.inf))
    expected, *_ = np.linalg.lstsq(problem.A, problem.observations.ravel(), rcond=None)
    assert result.converged
    assert_allclose(result.state, expected, atol=1e-6)
    costs = result.trace.costs()
    assert all(later <= earlier for earlier, later in zip(costs, costs[1:]))


def test_student_t_resists_gross_outlier():
    problem, truth = _linear_problem(outlier=100.0)
    gaussian = levenberg_marquardt(problem, StudentTModel(nu=math.inf))
    robust = levenberg_marquardt(problem, StudentTModel(nu=4.0))
    gaussian_error = np.linalg.norm(gaussian.state - truth)
    robust_error = np.linalg.norm(robust.state - truth)
    assert robust_error < 0.1
    assert robust_error < gaussian_error / 5.0


def test_residual_set_flags_the_outlier():
    problem, _ = _linear_problem(outlier=100.0)
    result = levenberg_marquardt(problem, StudentTModel(nu=4.0))
    flags = classify_inliers(result.residual_set)
    assert not flags[4]
    assert flags.sum() == 29
    assert np.all(result.residual_set.variances > 0)
    assert np.all(result.residual_set.variances <= result.residual_set.observation_variances)


def test_levenberg_marquardt_raises_without_convergence():
    problem, _ = _linear_problem(seed=10, outlier=100.0)
    with pytest.raises(NoConvergence):
        levenberg_marquardt(problem, StudentTModel(nu=4.0), SolverSettings(max_iterations=1, tolerance=1e-300))


def test_large_nu_agrees_with_least_squares():
    problem, _ = _linear_problem(seed=2, outlier=0.5)
    result = levenberg_marquardt(problem, StudentTModel(nu=1e6))
    expected, *_ = np.linalg.lstsq(problem.A, problem.observations.ravel(), rcond=None)
    assert_allclose(result.state, expected, atol=1e-4)


def test_crawling_solver_counts_as_converged():
    problem, _ = _linear_problem(outlier=5.0)
    crawl = dict(initial_damping=1e9, damping_down=1.0001, tolerance=1e-14, max_iterations=20)
    result = levenberg_marquardt(problem, StudentTModel(nu=4.0), SolverSettings(stall_steps=3, **crawl))
    assert result.converged
    assert result.iterations == 3
    with pytest.raises(NoConvergence):
        levenberg_marquardt(problem, StudentTModel(nu=4.0), SolverSettings(stall_steps=50, **crawl))
    with pytest.raises(ValueError):
        SolverSettings(stall_steps=0)


def _residual_set(residuals):
    residuals = np.asarray(residuals, dtype=float)
    ones = np.ones_like(residuals)
    return ResidualSet(residuals, ones, ones, np.ones(residuals.shape[0]))


def test_classify_inliers_gates_large_residuals():
    residual_set = _residual_set([[0.1, 0.0]] * 9 + [[10.0, 0.0]])
    flags = classify_inliers(residual_set, threshold=3.0)
    assert flags.tolist() == [True] * 9 + [False]
    assert residual_set.inliers is flags


def test_variance_factor_never_below_one():
    assert _residual_set([[0.1, 0.0]] * 5).variance_factor() == 1.0
    assert _residual_set(np.full((5, 2), 10.0)).variance_factor() > 1.0


def test_common_systematic_error_is_not_gated():
    # every residual inflated equally: the variance factor absorbs it
    residual_set = _residual_set(np.full((20, 2), 20.0))
    assert classify_inliers(residual_set, threshold=3.0).all()


def test_classify_inliers_all_outliers():
    residual_set = _residual_set([[0.1, 0.0]] * 6 + [[50.0, 0.0]] * 4)
    with pytest.raises(AllOutliers):
        classify_inliers(residual_set, threshold=3.0, min_fraction=0.9)


def test_infinite_threshold_keeps_everything():
    residual_set = _residual_set([[0.1, 0.0], [1e6, 0.0]])
    assert classify_inliers(residual_set, threshold=math.inf).all()


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
