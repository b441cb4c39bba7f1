#!/usr/bin/env python3
"""
🔁 CALIBRATION LOOP
Alternates a robust bundle adjustment (corrections held constant) with
distortion learning on its inlier residuals:

    BA -> inlier gating -> CV-selected kNN (optionally smoothed) -> Δ += δ

until the combined cost (BA negative log-likelihood + held-out regression
cost G) has passed its minimum. The best state seen is returned together with the
fields that produced its corrections.
"""

import csv
import math
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

try:
    from .calibration_errors import Diverged, ConfigError, NoConvergence
    from .network import Network, CalibrationState, Scheme, InitialValues, Observation, build_network, attach_rop
    from .robust_estimation import (
        StudentTModel, SolverSettings, ResidualSet, apply_inner_constraints, levenberg_marquardt,
        classify_inliers, student_t_nll
    )
    from .distortion import ResidualSamples, DistortionField, cross_validate, fit_component
    from .utils.config import (
        CalibrationConfig, STUDENT_T_NU, JOINT_LIKELIHOOD, INLIER_THRESHOLD, MIN_INLIER_FRACTION, CV_FOLDS,
        CANDIDATE_KS, SMOOTHING_GRID_SHAPE, RESELECT_K, MAX_OUTER_ITERATIONS, LOOP_RELATIVE_TOLERANCE,
        DIVERGENCE_PATIENCE, LOOP_NOISE_SCALE, DEFAULT_SEED
    )
except ImportError:
    from calibration_errors import Diverged, ConfigError, NoConvergence
    from network import Network, CalibrationState, Scheme, InitialValues, Observation, build_network, attach_rop
    from robust_estimation import (
        StudentTModel, SolverSettings, ResidualSet, apply_inner_constraints, levenberg_marquardt,
        classify_inliers, student_t_nll
    )
    from distortion import ResidualSamples, DistortionField, cross_validate, fit_component
    from utils.config import (
        CalibrationConfig, STUDENT_T_NU, JOINT_LIKELIHOOD, INLIER_THRESHOLD, MIN_INLIER_FRACTION, CV_FOLDS,
        CANDIDATE_KS, SMOOTHING_GRID_SHAPE, RESELECT_K, MAX_OUTER_ITERATIONS, LOOP_RELATIVE_TOLERANCE,
        DIVERGENCE_PATIENCE, LOOP_NOISE_SCALE, DEFAULT_SEED
    )

logger = logging.getLogger(__name__)


@dataclass
class LoopSettings:
    nu: float = STUDENT_T_NU
    joint_likelihood: bool = JOINT_LIKELIHOOD
    inlier_threshold: float = INLIER_THRESHOLD
    min_inlier_fraction: float = MIN_INLIER_FRACTION
    solver: SolverSettings = field(default_factory=SolverSettings)
    folds: int = CV_FOLDS
    candidate_ks: List[int] = field(default_factory=lambda: list(CANDIDATE_KS))
    grid_shape: Tuple[int, int] = SMOOTHING_GRID_SHAPE
    reselect_k: bool = RESELECT_K
    max_iterations: int = MAX_OUTER_ITERATIONS
    tolerance: float = LOOP_RELATIVE_TOLERANCE
    divergence_patience: int = DIVERGENCE_PATIENCE
    noise_scale: float = LOOP_NOISE_SCALE
    seed: int = DEFAULT_SEED

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ConfigError("max_iterations must be >= 1")
        if not self.tolerance > 0:
            raise ConfigError("tolerance must be > 0")
        if self.divergence_patience < 1:
            raise ConfigError("divergence_patience must be >= 1")
        if self.noise_scale < 0:
            raise ConfigError("noise_scale must be >= 0")

    @property
    def model(self) -> StudentTModel:
        return StudentTModel(self.nu, joint=self.joint_likelihood)

    @classmethod
    def from_config(cls, config: CalibrationConfig) -> "LoopSettings":
        solver = SolverSettings(initial_damping=config.lm_initial_damping, max_iterations=config.lm_max_iterations,
                                tolerance=config.lm_tolerance)
        return cls(nu=config.nu, joint_likelihood=config.joint_likelihood,
                   inlier_threshold=config.inlier_threshold, solver=solver, folds=config.folds,
                   candidate_ks=list(config.candidate_ks), grid_shape=tuple(config.grid_shape),
                   reselect_k=config.reselect_k, max_iterations=config.max_iterations,
                   tolerance=config.tolerance, divergence_patience=config.divergence_patience, seed=config.seed)


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    ba_cost: float
    regression_cost: float
    inliers: int
    observations: int
    ks: Dict[int, int]
    lm_iterations: int

    @property
    def combined(self) -> float:
        return self.ba_cost + self.regression_cost


@dataclass
class LoopState:
    """Progress of the alternation; history is append-only"""
    iteration: int
    network: Network
    fields: Dict[int, DistortionField]
    history: List[IterationRecord] = field(default_factory=list)

    @property
    def combined(self) -> float:
        return combined_cost(self)

    def record(self, entry: IterationRecord):
        self.history.append(entry)
        self.iteration = entry.iteration

    def trace_rows(self) -> List[Dict[str, object]]:
        rows = []
        for entry in self.history:
            row = {
                "iteration": entry.iteration,
                "ba_cost": entry.ba_cost,
                "G": entry.regression_cost,
                "combined": entry.combined,
                "inliers": entry.inliers,
            }
            for sid in self.network.system_ids:
                row[f"k_{sid}"] = entry.ks.get(sid, "")
            rows.append(row)
        return rows

    def to_csv(self, path: str):
        rows = self.trace_rows()
        header = ["iteration", "ba_cost", "G", "combined", "inliers"] + [f"k_{sid}" for sid in self.network.system_ids]
        with open(path, "w", newline="", encoding="utf-8") as handle:
            writer = csv.DictWriter(handle, fieldnames=header, lineterminator="\n")
            writer.writeheader()
            for row in rows:
                writer.writerow({key: repr(value) if isinstance(value, float) else value
                                 for key, value in row.items()})


@dataclass
class Snapshot:
    state: CalibrationState
    network: Network
    fields: Dict[int, DistortionField]
    residual_set: ResidualSet
    ba_cost: float
    combined: float
    iteration: int


@dataclass
class CalibrationResult:
    state: CalibrationState
    fields: Dict[int, DistortionField]
    loop_state: LoopState
    residual_set: ResidualSet
    network: Network
    ba_cost: float
    baseline: Snapshot
    converged: bool

    @property
    def iterations(self) -> int:
        return self.loop_state.iteration


def combined_cost(state: LoopState) -> float:
    """BA negative log-likelihood + regression cost G of the latest iteration"""
    if not state.history:
        return math.inf
    return state.history[-1].combined


def apply_fields(network: Network, fields: Dict[int, DistortionField]) -> Network:
    """Network whose corrections are the fields evaluated at the observed image points"""
    corrections = np.zeros_like(network.obs_xy)
    for sid, distortion in fields.items():
        if sid not in network.system_ids:
            continue
        mask = network.system_mask(sid)
        corrections[mask] = distortion.predict(network.obs_xy[mask])
    return network.with_corrections(corrections)


def ba_cost(network: Network, state: CalibrationState, settings: Optional[LoopSettings] = None) -> float:
    """Student-t NLL of a state under the network's current corrections"""
    settings = settings or LoopSettings()
    return student_t_nll(network.residuals(state), settings.model.with_variances(network.variances))


def system_bounds(network: Network) -> Dict[int, Tuple[float, float, float, float]]:
    """Per-system bounding box of the observed image points (fixed smoothing grids)"""
    bounds = {}
    for sid in network.system_ids:
        xy = network.obs_xy[network.system_mask(sid)]
        bounds[sid] = (float(xy[:, 0].min()), float(xy[:, 0].max()), float(xy[:, 1].min()), float(xy[:, 1].max()))
    return bounds


def _cv_seed(seed: int, system_index: int) -> int:
    """Fold assignment seed of one system; the same folds are reused at every outer iteration"""
    return int(np.random.SeedSequence([seed, system_index]).generate_state(1)[0])


def cost_noise(residual_set: ResidualSet, settings: LoopSettings) -> float:
    """Combined-cost change indistinguishable from sampling noise: noise_scale * sqrt(2 m)"""
    return settings.noise_scale * math.sqrt(2.0 * residual_set.residuals.size)


def run_calibration(network: Network, settings: Optional[LoopSettings] = None,
                    scheme: Optional[Scheme] = None) -> CalibrationResult:
    """
    Self-calibrate a network.

    The loop stops once the combined cost has passed its minimum: a change
    within the relative tolerance or the sampling noise of the cost, or the
    first increase after an improving iteration. The best snapshot is
    returned. An inner adjustment that fails to converge after the first
    iteration also ends the loop (converged=False) with the best snapshot.

    Args:
        network: assembled problem; its scheme selects IOP estimation and smoothing
        settings: likelihood, gating, CV and termination settings
        scheme: overrides network.scheme for the learning stage

    Returns:
        CalibrationResult with the best-cost state and the fields producing its corrections

    Raises:
        Diverged: no iteration improved on the uncorrected adjustment and the combined
                  cost increased divergence_patience times in a row
        NoConvergence, SingularNormalMatrix, AllOutliers, TooFewSamples: from the stages
    """
    settings = settings or LoopSettings()
    scheme = scheme or network.scheme
    model = settings.model
    constraints = apply_inner_constraints(network)
    bounds = system_bounds(network)

    fields = {sid: DistortionField(sid) for sid in network.system_ids}
    current = network.with_corrections(np.zeros_like(network.obs_xy))
    loop_state = LoopState(0, current, fields)
    state = network.initial_state
    ks: Dict[int, int] = {}

    best: Optional[Snapshot] = None
    baseline: Optional[Snapshot] = None
    previous = None
    increases = 0
    converged = False
    stop_reason = f"reached {settings.max_iterations} iterations"

    for iteration in range(settings.max_iterations):
        try:
            solution = levenberg_marquardt(current, model, settings.solver, state, constraints)
        except NoConvergence as e:
            if best is None:
                raise
            stop_reason = f"inner adjustment failed at outer iteration {iteration} ({e})"
            break
        state = solution.state
        inliers = classify_inliers(solution.residual_set, settings.inlier_threshold, settings.min_inlier_fraction)

        regression_cost = 0.0
        components = {}
        if scheme.learns_distortion:
            for s, sid in enumerate(current.system_ids):
                mask = inliers & current.system_mask(sid)
                samples = ResidualSamples(current.obs_xy[mask], solution.residual_set.residuals[mask],
                                          solution.residual_set.variances[mask])
                grid_shape = settings.grid_shape if scheme.smoothing else None
                candidates = settings.candidate_ks if (settings.reselect_k or sid not in ks) else [ks[sid]]
                table = cross_validate(samples, candidates, settings.folds, _cv_seed(settings.seed, s),
                                       grid_shape, bounds[sid] if grid_shape else None)
                ks[sid] = table.best_k
                regression_cost += float(np.min(table.costs)) * settings.folds
                components[sid] = fit_component(samples, ks[sid], grid_shape, bounds[sid] if grid_shape else None)

        entry = IterationRecord(iteration, solution.cost, regression_cost, int(inliers.sum()), len(inliers),
                                dict(ks), solution.iterations)
        loop_state.record(entry)
        snapshot = Snapshot(state, current, dict(loop_state.fields), solution.residual_set, solution.cost,
                            entry.combined, iteration)
        if baseline is None:
            baseline = snapshot
        logger.info(f"🔁 Outer iteration {iteration}: BA {entry.ba_cost:.6f}, G {entry.regression_cost:.3f}, "
                    f"combined {entry.combined:.6f}, inliers {entry.inliers}/{entry.observations}, k {entry.ks}")

        if best is None or entry.combined < best.combined:
            best = snapshot
        if not scheme.learns_distortion:
            converged = True
            break
        if previous is not None:
            change = entry.combined - previous
            noise = max(settings.tolerance * abs(previous), cost_noise(solution.residual_set, settings))
            if abs(change) <= noise:
                converged = True
                break
            if change > 0:
                increases += 1
                if best.iteration > 0:
                    # past the minimum of the combined cost
                    converged = True
                    break
                if increases >= settings.divergence_patience:
                    raise Diverged(iteration, entry.combined)
            else:
                increases = 0
        previous = entry.combined

        # Δ += δ at every observation of each system
        corrections = np.array(current.corrections)
        updated = {}
        for sid, component in components.items():
            mask = current.system_mask(sid)
            corrections[mask] = corrections[mask] + component.predict(current.obs_xy[mask])
            updated[sid] = loop_state.fields[sid].add(component)
        loop_state.fields = {**loop_state.fields, **updated}
        current = current.with_corrections(corrections)
        loop_state.network = current

    if not converged:
        logger.warning(f"⚠️ Outer loop stopped without converging: {stop_reason}")
    logger.info(f"✅ Calibration finished: best combined cost {best.combined:.6f} at outer iteration {best.iteration}")
    return CalibrationResult(best.state, best.fields, loop_state, best.residual_set, best.network, best.ba_cost,
                             baseline, converged)


def calibrate_observations(observations: List[Observation], initial: InitialValues, scheme: Scheme,
                           settings: Optional[LoopSettings] = None,
                           biplanar: bool = False) -> CalibrationResult:
    """build_network (+ attach_rop for a biplanar rig) followed by run_calibration"""
    network = build_network(observations, initial, scheme)
    if biplanar:
        network = attach_rop(network, initial.rop)
    return run_calibration(network, settings, scheme)
