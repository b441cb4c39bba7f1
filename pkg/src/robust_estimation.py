#!/usr/bin/env python3
"""
🎯 ROBUST ESTIMATION
Student-t maximum likelihood for bundle adjustment.

- Negative log-likelihood of the Student-t density, its weights, gradient and
  Hessian (Gauss-Newton by default)
- Levenberg-Marquardt with point blocks eliminated by Schur complement
- Free-network datum through 7 inner constraints on the point corrections
- Residual variances and studentized inlier gating
"""

import csv
import math
import logging
from dataclasses import dataclass, field, replace
from typing import Any, List, Optional, Protocol, Tuple

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.special import gammaln
from scipy.stats import chi2

try:
    from .calibration_errors import (
        SingularNormalMatrix, NoConvergence, AllOutliers, PointBehindCamera, DegenerateConfiguration
    )
    from .utils.config import (
        STUDENT_T_NU, INLIER_THRESHOLD, MIN_INLIER_FRACTION,
        LM_INITIAL_DAMPING, LM_DAMPING_UP, LM_DAMPING_DOWN, LM_MAX_DAMPING,
        LM_MAX_ITERATIONS, LM_RELATIVE_TOLERANCE, LM_STALL_TOLERANCE, LM_STALL_STEPS
    )
except ImportError:
    from calibration_errors import (
        SingularNormalMatrix, NoConvergence, AllOutliers, PointBehindCamera, DegenerateConfiguration
    )
    from utils.config import (
        STUDENT_T_NU, INLIER_THRESHOLD, MIN_INLIER_FRACTION,
        LM_INITIAL_DAMPING, LM_DAMPING_UP, LM_DAMPING_DOWN, LM_MAX_DAMPING,
        LM_MAX_ITERATIONS, LM_RELATIVE_TOLERANCE, LM_STALL_TOLERANCE, LM_STALL_STEPS
    )

logger = logging.getLogger(__name__)

VARIANCE_FLOOR = 1e-3  # fraction of sigma^2 kept for residual variances
ROW_CHUNK = 2048
ROUNDING_GUARD = 64 * np.finfo(float).eps


@dataclass(frozen=True, eq=False)
class StudentTModel:
    """
    Student-t likelihood of the image observations.

    Attributes:
        nu: degrees of freedom; math.inf gives the Gaussian (L2) likelihood
        variances: diagonal of C_l, shape (n, D)
        joint: one joint t-density over all observations instead of a sum
               of per-observation densities
    """
    nu: float = STUDENT_T_NU
    variances: Optional[np.ndarray] = None
    joint: bool = False

    def __post_init__(self):
        if not self.nu > 0:
            raise ValueError(f"nu must be > 0, got {self.nu}")
        if self.variances is not None:
            variances = np.atleast_2d(np.asarray(self.variances, dtype=float))
            if np.any(variances <= 0) or not np.all(np.isfinite(variances)):
                raise ValueError("Observation variances must be finite and > 0")
            object.__setattr__(self, "variances", variances)

    @property
    def gaussian(self) -> bool:
        return math.isinf(self.nu)

    def with_variances(self, variances: np.ndarray) -> "StudentTModel":
        return replace(self, variances=variances)


@dataclass
class ResidualSet:
    """Per-observation residuals r = l - f, their variances C_r and the gating outcome"""
    residuals: np.ndarray
    variances: np.ndarray
    observation_variances: np.ndarray
    weights: np.ndarray
    inliers: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.residuals.shape != self.variances.shape:
            raise ValueError("Residuals and variances must have the same shape")
        if self.inliers is None:
            self.inliers = np.ones(self.residuals.shape[0], dtype=bool)

    def __len__(self) -> int:
        return self.residuals.shape[0]

    def studentized(self, variance_factor: float = 1.0) -> np.ndarray:
        """sqrt(r^T C_r^-1 r / variance_factor) per observation"""
        return np.sqrt(np.sum(self.residuals ** 2 / self.variances, axis=1) / variance_factor)

    def variance_factor(self) -> float:
        """
        Robust a-posteriori variance factor: median squared Mahalanobis residual
        over the chi-square median, never below 1 (the a-priori precision).
        """
        if len(self) == 0:
            return 1.0
        m = np.sum(self.residuals ** 2 / self.variances, axis=1)
        return max(float(np.median(m)) / float(chi2.median(self.residuals.shape[1])), 1.0)


@dataclass
class SolverSettings:
    initial_damping: float = LM_INITIAL_DAMPING
    damping_up: float = LM_DAMPING_UP
    damping_down: float = LM_DAMPING_DOWN
    max_damping: float = LM_MAX_DAMPING
    max_iterations: int = LM_MAX_ITERATIONS
    tolerance: float = LM_RELATIVE_TOLERANCE
    stall_tolerance: float = LM_STALL_TOLERANCE
    stall_steps: int = LM_STALL_STEPS

    def __post_init__(self):
        if not self.initial_damping > 0:
            raise ValueError("initial_damping must be > 0")
        if not (self.damping_up > 1 and self.damping_down > 1):
            raise ValueError("damping factors must be > 1")
        if not self.tolerance > 0 or self.max_iterations < 1:
            raise ValueError("tolerance must be > 0 and max_iterations >= 1")
        if not self.stall_tolerance > 0 or self.stall_steps < 1:
            raise ValueError("stall_tolerance must be > 0 and stall_steps >= 1")


@dataclass(frozen=True)
class TraceRow:
    iteration: int
    cost: float
    damping: float
    max_step: float
    accepted: bool


@dataclass
class ConvergenceTrace:
    rows: List[TraceRow] = field(default_factory=list)

    def append(self, iteration: int, cost: float, damping: float, max_step: float, accepted: bool = True):
        self.rows.append(TraceRow(iteration, float(cost), float(damping), float(max_step), accepted))

    def __len__(self) -> int:
        return len(self.rows)

    def costs(self) -> List[float]:
        return [row.cost for row in self.rows if row.accepted]

    def to_csv(self, path: str):
        with open(path, "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(["iteration", "cost", "lambda", "max_step"])
            for row in self.rows:
                if row.accepted:
                    writer.writerow([row.iteration, repr(row.cost), repr(row.damping), repr(row.max_step)])


@dataclass(frozen=True, eq=False)
class InnerConstraints:
    """Bordering rows C (7 x 3m) with C dP = 0 on the point corrections"""
    matrix: np.ndarray
    reference: np.ndarray

    @property
    def n_constraints(self) -> int:
        return self.matrix.shape[0]


class EstimationProblem(Protocol):
    """What the solver needs from a network: points form the trailing 3-blocks"""
    n_camera_parameters: int
    n_point_parameters: int
    observation_point_index: np.ndarray
    variances: np.ndarray
    datum_reference: Optional[np.ndarray]

    def linearize(self, state: Any) -> Tuple[np.ndarray, sp.csr_matrix]: ...

    def residuals(self, state: Any) -> np.ndarray: ...

    def retract(self, state: Any, delta: np.ndarray) -> Any: ...


@dataclass
class LevenbergMarquardtResult:
    state: Any
    residual_set: ResidualSet
    trace: ConvergenceTrace
    cost: float
    iterations: int
    converged: bool


# ---------------------------------------------------------------------------
# Likelihood
# ---------------------------------------------------------------------------

def _as_rows(residuals: np.ndarray, model: StudentTModel) -> Tuple[np.ndarray, np.ndarray]:
    r = np.asarray(residuals, dtype=float)
    if r.ndim == 1:
        r = r[None, :] if model.variances is None or model.variances.shape[0] == 1 else r[:, None]
    variances = model.variances if model.variances is not None else np.ones_like(r)
    if variances.shape != r.shape:
        raise ValueError(f"Residual shape {r.shape} does not match covariance shape {variances.shape}")
    return r, variances


def _log_normalizer(nu: float, dim: int) -> float:
    """-log of the t-density constant Gamma((nu+D)/2) / (Gamma(nu/2) (nu pi)^(D/2))"""
    if math.isinf(nu):
        return 0.5 * dim * math.log(2.0 * math.pi)
    return float(gammaln(nu / 2.0) - gammaln((nu + dim) / 2.0) + 0.5 * dim * math.log(nu * math.pi))


def mahalanobis_squared(residuals: np.ndarray, model: StudentTModel) -> np.ndarray:
    r, variances = _as_rows(residuals, model)
    return np.sum(r * r / variances, axis=1)


def student_t_nll(residuals: np.ndarray, model: StudentTModel) -> float:
    """
    Negative log of the Student-t density at l - f(theta) = residuals.

    Per-observation mode sums the D-dimensional density of every row;
    joint mode evaluates one density over all n*D residuals.
    """
    r, variances = _as_rows(residuals, model)
    n, dim = r.shape
    m = np.sum(r * r / variances, axis=1)
    half_log_det = 0.5 * float(np.sum(np.log(variances)))
    nu = model.nu
    if model.gaussian:
        return n * _log_normalizer(nu, dim) + half_log_det + 0.5 * float(np.sum(m))
    if model.joint:
        total = n * dim
        return _log_normalizer(nu, total) + half_log_det + 0.5 * (nu + total) * math.log1p(float(np.sum(m)) / nu)
    return n * _log_normalizer(nu, dim) + half_log_det + 0.5 * (nu + dim) * float(np.sum(np.log1p(m / nu)))


def student_t_weights(residuals: np.ndarray, model: StudentTModel) -> np.ndarray:
    """IRLS weights (nu + D) / (nu + m) per observation"""
    r, variances = _as_rows(residuals, model)
    n, dim = r.shape
    if model.gaussian:
        return np.ones(n)
    m = np.sum(r * r / variances, axis=1)
    if model.joint:
        total = n * dim
        return np.full(n, (model.nu + total) / (model.nu + float(np.sum(m))))
    return (model.nu + dim) / (model.nu + m)


def _row_weights(residuals: np.ndarray, model: StudentTModel) -> Tuple[np.ndarray, np.ndarray]:
    r, variances = _as_rows(residuals, model)
    weights = student_t_weights(r, model)
    return (weights[:, None] / variances).ravel(), r.ravel()


def normal_equations(residuals: np.ndarray, jacobian, model: StudentTModel) -> Tuple[sp.csr_matrix, np.ndarray]:
    """Gauss-Newton normal matrix J^T W J and right-hand side J^T W r (W = w / sigma^2)"""
    J = sp.csr_matrix(jacobian)
    row_weights, r = _row_weights(residuals, model)
    WJ = sp.diags(row_weights) @ J
    N = (J.T @ WJ).tocsr()
    b = np.asarray(WJ.T @ r).ravel()
    return N, b


def student_t_gradient(residuals: np.ndarray, jacobian, model: StudentTModel) -> np.ndarray:
    """Gradient of student_t_nll w.r.t. the parameters, with J = df/dtheta"""
    _, b = normal_equations(residuals, jacobian, model)
    return -b


def student_t_hessian(residuals: np.ndarray, jacobian, model: StudentTModel,
                      gauss_newton: bool = True) -> np.ndarray:
    """
    Hessian of student_t_nll for a model with constant Jacobian.

    The Gauss-Newton form drops the curvature of the weights; the full form
    adds -2 w^2 / (nu + D) a a^T per observation with a = J_i^T C_i^-1 r_i.
    """
    N, _ = normal_equations(residuals, jacobian, model)
    H = N.toarray()
    if gauss_newton or model.gaussian:
        return H
    r, variances = _as_rows(residuals, model)
    n, dim = r.shape
    J = sp.csr_matrix(jacobian).toarray().reshape(n, dim, -1)
    a = np.einsum("nij,ni->nj", J, r / variances)
    weights = student_t_weights(r, model)
    if model.joint:
        total = n * dim
        a_sum = a.sum(axis=0)
        return H - 2.0 * weights[0] ** 2 / (model.nu + total) * np.outer(a_sum, a_sum)
    return H - np.einsum("n,ni,nj->ij", 2.0 * weights ** 2 / (model.nu + dim), a, a)


# ---------------------------------------------------------------------------
# Datum
# ---------------------------------------------------------------------------

def inner_constraint_matrix(reference: np.ndarray) -> np.ndarray:
    """Rows: net translation (3), net rotation about the centroid (3), net scale (1)"""
    P = np.asarray(reference, dtype=float)
    m = P.shape[0]
    centered = P - P.mean(axis=0)
    spread = math.sqrt(float(np.mean(np.sum(centered ** 2, axis=1)))) or 1.0
    X, Y, Z = (centered / spread).T
    zeros, ones = np.zeros(m), np.ones(m)
    rows = [
        np.column_stack([ones, zeros, zeros]),
        np.column_stack([zeros, ones, zeros]),
        np.column_stack([zeros, zeros, ones]),
        np.column_stack([zeros, -Z, Y]),
        np.column_stack([Z, zeros, -X]),
        np.column_stack([-Y, X, zeros]),
        np.column_stack([X, Y, Z]),
    ]
    C = np.vstack([row.ravel() for row in rows])
    return C / np.linalg.norm(C, axis=1, keepdims=True)


def apply_inner_constraints(problem: EstimationProblem) -> InnerConstraints:
    """
    Free-network datum for a problem.

    The constraints act on the point corrections relative to the problem's
    datum reference coordinates, so every adjustment that starts from the
    reference keeps the net translation, rotation and scale of its points.
    """
    reference = np.asarray(problem.datum_reference, dtype=float)
    if reference.ndim != 2 or reference.shape[0] < 3:
        raise DegenerateConfiguration("Inner constraints need at least 3 object points")
    return InnerConstraints(inner_constraint_matrix(reference), reference)


@dataclass
class BorderedSolution:
    """Step of the bordered system plus the pieces needed for cofactor blocks"""
    delta: np.ndarray
    reduced_inverse: Optional[np.ndarray] = None
    point_inverse: Optional[np.ndarray] = None
    point_coupling: Optional[np.ndarray] = None


def _point_blocks(N_pp: sp.csr_matrix, n_points: int) -> np.ndarray:
    coo = N_pp.tocoo()
    keep = (coo.row // 3) == (coo.col // 3)
    blocks = np.zeros((n_points, 3, 3))
    np.add.at(blocks, (coo.row[keep] // 3, coo.row[keep] % 3, coo.col[keep] % 3), coo.data[keep])
    return blocks


def solve_bordered(N: sp.csr_matrix, b: np.ndarray, damping: float, n_camera: int,
                   constraints: Optional[InnerConstraints] = None,
                   keep_inverse: bool = False) -> BorderedSolution:
    """
    Solve (N + damping * diag(N)) delta = b subject to C delta_points = 0.

    Point blocks (3 x 3, trailing) are eliminated by Schur complement; the
    reduced system over camera parameters and Lagrange multipliers is dense.
    """
    N = sp.csr_matrix(N)
    n_total = N.shape[0]
    n_point_params = n_total - n_camera
    n_points = n_point_params // 3

    diagonal = N.diagonal()
    floor = 1e-12 * max(float(diagonal.max()) if diagonal.size else 1.0, 1e-300)
    N_damped = N + sp.diags(damping * np.maximum(diagonal, floor) + (diagonal <= 0) * floor)
    N_damped = N_damped.tocsr()

    N_cc = N_damped[:n_camera, :n_camera].toarray()
    b_c = b[:n_camera]
    n_extra = constraints.n_constraints if constraints is not None else 0

    if n_points == 0:
        try:
            delta = scipy.linalg.solve(N_cc, b_c, assume_a="sym")
        except (np.linalg.LinAlgError, ValueError) as e:
            raise SingularNormalMatrix("Normal matrix is singular") from e
        if not np.all(np.isfinite(delta)):
            raise SingularNormalMatrix("Normal matrix solve produced non-finite values")
        inverse = np.linalg.inv(N_cc) if keep_inverse else None
        return BorderedSolution(delta, reduced_inverse=inverse)

    N_cp = N_damped[:n_camera, n_camera:].toarray()
    blocks = _point_blocks(N_damped[n_camera:, n_camera:], n_points)
    if np.any(np.abs(np.linalg.det(blocks)) <= 1e-300):
        raise SingularNormalMatrix("Point block of the normal matrix is singular; is every point seen twice?")
    try:
        block_inverse = np.linalg.inv(blocks)
    except np.linalg.LinAlgError as e:
        raise SingularNormalMatrix("Point block of the normal matrix is singular") from e

    # G = [N_pc | C^T] as (m, 3, n_camera + 7)
    coupling = N_cp.T
    if constraints is not None:
        coupling = np.hstack([coupling, constraints.matrix.T])
    G = coupling.reshape(n_points, 3, n_camera + n_extra)
    Y = np.einsum("mij,mjk->mik", block_inverse, G)
    b_p = b[n_camera:].reshape(n_points, 3)
    z = np.einsum("mij,mj->mi", block_inverse, b_p)

    M = -np.einsum("mik,mil->kl", G, Y)
    M[:n_camera, :n_camera] += N_cc
    rhs = -np.einsum("mik,mi->k", G, z)
    rhs[:n_camera] += b_c
    try:
        solution = scipy.linalg.solve(M, rhs, assume_a="sym")
    except (np.linalg.LinAlgError, ValueError) as e:
        raise SingularNormalMatrix("Reduced normal matrix is singular; is the datum defined?") from e
    if not np.all(np.isfinite(solution)):
        raise SingularNormalMatrix("Reduced normal matrix solve produced non-finite values")

    delta_points = z - np.einsum("mik,k->mi", Y, solution)
    delta = np.concatenate([solution[:n_camera], delta_points.ravel()])
    if not keep_inverse:
        return BorderedSolution(delta)
    return BorderedSolution(delta, reduced_inverse=np.linalg.inv(M), point_inverse=block_inverse,
                            point_coupling=Y)


def residual_variances(jacobian: sp.csr_matrix, weights: np.ndarray, variances: np.ndarray,
                       solution: BorderedSolution, n_camera: int,
                       point_index: Optional[np.ndarray]) -> np.ndarray:
    """
    Diagonal of C_r = C_l - w J Q J^T for (n, D) observations.

    Q is the cofactor matrix of the minimally constrained solution, assembled
    block-wise from the Schur pieces kept by solve_bordered.
    """
    n, dim = variances.shape
    J = sp.csr_matrix(jacobian)
    J_c = J[:, :n_camera]
    Minv = solution.reduced_inverse
    Q_cc = Minv[:n_camera, :n_camera]
    leverage = np.empty(n * dim)

    if solution.point_inverse is not None:
        Y = solution.point_coupling
        # A_i = M^-1 Y_i^T ; Q_cp_i = -A_i[:n_camera] ; Q_pp_i = Ninv_i + Y_i A_i
        A = np.einsum("kl,mil->mki", Minv, Y)
        Q_pp = solution.point_inverse + np.einsum("mik,mkj->mij", Y, A)
        A_c = A[:, :n_camera, :]
        J_p = J[:, n_camera:]
        rows_point = np.repeat(point_index, dim)
    for start in range(0, n * dim, ROW_CHUNK):
        stop = min(start + ROW_CHUNK, n * dim)
        Jc = J_c[start:stop].toarray()
        value = np.einsum("rc,rc->r", Jc @ Q_cc, Jc)
        if solution.point_inverse is not None:
            pts = rows_point[start:stop]
            Jp_rows = J_p[start:stop].toarray()
            cols = 3 * pts[:, None] + np.arange(3)[None, :]
            Jp = np.take_along_axis(Jp_rows, cols, axis=1)
            cross = np.einsum("rc,rck->rk", Jc, A_c[pts])
            value += -2.0 * np.einsum("rk,rk->r", cross, Jp)
            value += np.einsum("ri,rij,rj->r", Jp, Q_pp[pts], Jp)
        leverage[start:stop] = value

    leverage = leverage.reshape(n, dim) * weights[:, None]
    return np.maximum(variances - leverage, VARIANCE_FLOOR * variances)


# ---------------------------------------------------------------------------
# Solver
# ---------------------------------------------------------------------------

def levenberg_marquardt(problem: EstimationProblem, model: StudentTModel,
                        settings: Optional[SolverSettings] = None, state: Any = None,
                        constraints: Optional[InnerConstraints] = None) -> LevenbergMarquardtResult:
    """
    Minimize the Student-t NLL of a problem with Levenberg-Marquardt.

    Args:
        problem: network view (linearize / residuals / retract)
        model: likelihood; its variances are taken from the problem
        settings: damping schedule and termination
        state: start state (defaults to problem.initial_state)
        constraints: datum; built from problem.datum_reference when omitted

    Returns:
        LevenbergMarquardtResult with the final state, residual set and trace

    Raises:
        SingularNormalMatrix: damped system cannot be solved at any damping
        NoConvergence: max iterations reached while the cost is still falling
    """
    settings = settings or SolverSettings()
    if state is None:
        state = problem.initial_state
    if constraints is None and getattr(problem, "datum_reference", None) is not None:
        constraints = apply_inner_constraints(problem)
    model = model.with_variances(problem.variances)
    n_camera = problem.n_camera_parameters

    residuals, J = problem.linearize(state)
    cost = student_t_nll(residuals, model)
    floor = student_t_nll(np.zeros_like(residuals), model)
    damping = settings.initial_damping
    trace = ConvergenceTrace()
    trace.append(0, cost, damping, 0.0)

    converged = False
    relative_change = math.inf
    stalled = 0
    iteration = 0
    for iteration in range(1, settings.max_iterations + 1):
        N, b = normal_equations(residuals, J, model)
        accepted = False
        while damping <= settings.max_damping:
            try:
                delta = solve_bordered(N, b, damping, n_camera, constraints).delta
            except SingularNormalMatrix:
                damping *= settings.damping_up
                continue
            candidate = problem.retract(state, delta)
            try:
                candidate_cost = student_t_nll(problem.residuals(candidate), model)
            except PointBehindCamera:
                candidate_cost = math.inf
            if candidate_cost <= cost:
                accepted = True
                break
            trace.append(iteration, candidate_cost, damping, float(np.max(np.abs(delta))), accepted=False)
            damping *= settings.damping_up

        if not accepted:
            logger.debug(f"LM stalled at damping {damping:.3g}; cost {cost:.10g} is a numerical minimum")
            converged = True
            break

        decrease = cost - candidate_cost
        excess = max(cost - floor, 0.0)
        relative_change = decrease / max(excess, 1e-300)
        # changes below the rounding noise of the constant terms count as converged
        negligible = decrease <= settings.tolerance * excess + ROUNDING_GUARD * abs(floor)
        # a run of steps below the stall tolerance is a crawl along a flat valley
        stalled = stalled + 1 if relative_change <= max(settings.stall_tolerance, settings.tolerance) else 0
        state, cost = candidate, candidate_cost
        damping = max(damping / settings.damping_down, 1e-15)
        trace.append(iteration, cost, damping, float(np.max(np.abs(delta))))
        logger.debug(f"LM iteration {iteration}: cost {cost:.10g}, lambda {damping:.3g}, rel {relative_change:.3g}")
        residuals, J = problem.linearize(state)
        if negligible or stalled >= settings.stall_steps:
            converged = True
            break

    if not converged:
        raise NoConvergence(iteration, relative_change)

    residual_set = compute_residual_set(problem, residuals, J, model, constraints)
    return LevenbergMarquardtResult(state, residual_set, trace, cost, iteration, converged)


def compute_residual_set(problem: EstimationProblem, residuals: np.ndarray, jacobian,
                         model: StudentTModel, constraints: Optional[InnerConstraints]) -> ResidualSet:
    """Residuals with studentizing variances at the converged state"""
    N, b = normal_equations(residuals, jacobian, model)
    weights = student_t_weights(residuals, model)
    solution = solve_bordered(N, b, 0.0, problem.n_camera_parameters, constraints, keep_inverse=True)
    variances = residual_variances(jacobian, weights, model.variances, solution,
                                   problem.n_camera_parameters, getattr(problem, "observation_point_index", None))
    return ResidualSet(np.array(residuals, dtype=float), variances, model.variances, weights)


def classify_inliers(residual_set: ResidualSet, threshold: float = INLIER_THRESHOLD,
                     min_fraction: float = MIN_INLIER_FRACTION) -> np.ndarray:
    """
    Flag observations whose studentized Mahalanobis residual is <= threshold.

    Residuals are studentized with the robust variance factor, so unmodelled
    systematic error common to most observations does not gate them all out.

    Raises:
        AllOutliers: fewer than min_fraction of the observations survive
    """
    if math.isinf(threshold):
        flags = np.ones(len(residual_set), dtype=bool)
    else:
        flags = residual_set.studentized(residual_set.variance_factor()) <= threshold
    survivors = int(flags.sum())
    if survivors < min_fraction * len(residual_set):
        raise AllOutliers(survivors, len(residual_set))
    residual_set.inliers = flags
    return flags
