#!/usr/bin/env python3
"""
📏 EVALUATION
Accuracy of a calibration on exposures it never saw:

- single system: the test images are adjusted with IOP and corrections fixed,
  and the object points are compared with the reference after a rigid fit
- biplanar rig: each test exposure pair is intersected in the camera-1 frame,
  and the per-epoch point sets are rigidly fitted to the reference

plus the benchmark sweep over training-set sizes and schemes and the writers
for the results table and its plot data.
"""

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

try:
    from .calibration_errors import NoCommonTargets, NonPositiveBaseline, EvaluationError
    from .geometry import (
        Intrinsics, Pose, back_project, intersect_ray_pairs, intersect_rays, project_array, rigid_align
    )
    from .network import Observation, InitialValues, Scheme, SCHEME_LABELS, build_network, filter_observations
    from .distortion import DistortionField
    from .robust_estimation import apply_inner_constraints, levenberg_marquardt, classify_inliers, ResidualSet
    from .calibration_loop import LoopSettings, CalibrationResult, apply_fields, calibrate_observations
    from .synthetic_generator import Dataset
except ImportError:
    from calibration_errors import NoCommonTargets, NonPositiveBaseline, EvaluationError
    from geometry import (
        Intrinsics, Pose, back_project, intersect_ray_pairs, intersect_rays, project_array, rigid_align
    )
    from network import Observation, InitialValues, Scheme, SCHEME_LABELS, build_network, filter_observations
    from distortion import DistortionField
    from robust_estimation import apply_inner_constraints, levenberg_marquardt, classify_inliers, ResidualSet
    from calibration_loop import LoopSettings, CalibrationResult, apply_fields, calibrate_observations
    from synthetic_generator import Dataset

logger = logging.getLogger(__name__)

DEFAULT_TRAINING_SIZES = (15, 30, 45, 60, 75)
REPORT_COLUMNS = ["# of image pairs", "Calibration Mode", "X_RMSE", "Y_RMSE", "Z_RMSE", "Average RMSE",
                  "% Improvement"]
CSV_COLUMNS = ["training_size", "scheme", "x_rmse_mm", "y_rmse_mm", "z_rmse_mm", "average_rmse_mm",
               "improvement_pct", "reprojection_rmse_px", "redundancy", "protocol"]


@dataclass(frozen=True)
class AxisRmse:
    """Per-axis RMSE in mm; average is the plain mean of the three"""
    x: float
    y: float
    z: float

    @property
    def average(self) -> float:
        return (self.x + self.y + self.z) / 3.0

    def as_tuple(self) -> Tuple[float, float, float]:
        return (self.x, self.y, self.z)

    @classmethod
    def from_residuals(cls, residuals: np.ndarray) -> "AxisRmse":
        r = np.asarray(residuals, dtype=float).reshape(-1, 3)
        if len(r) == 0:
            raise NoCommonTargets("No residuals to summarize")
        x, y, z = np.sqrt(np.mean(r * r, axis=0))
        return cls(float(x), float(y), float(z))


@dataclass
class EvaluationReport:
    """One row of the results table"""
    scheme: Scheme
    training_size: int
    rmse: AxisRmse
    reprojection_rmse: float
    redundancy: int
    improvement: Optional[float] = None
    protocol: str = "out-of-sample"

    @property
    def average(self) -> float:
        return self.rmse.average


@dataclass
class CalibrationSolution:
    """What evaluation needs from a calibration, independent of the network it came from"""
    intrinsics: Dict[int, Intrinsics]
    fields: Dict[int, DistortionField]
    scheme: Scheme = Scheme.KNN_IOP_SMOOTHING
    rop: Optional[Pose] = None
    poses: Dict[Tuple[int, int], Pose] = field(default_factory=dict)
    points: Dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def system_ids(self) -> List[int]:
        return sorted(self.intrinsics)

    @property
    def biplanar(self) -> bool:
        return self.rop is not None

    def corrections(self, system_id: int, image_points: np.ndarray) -> np.ndarray:
        distortion = self.fields.get(system_id)
        if distortion is None:
            return np.zeros_like(np.asarray(image_points, dtype=float))
        return distortion.predict(image_points)

    @classmethod
    def from_result(cls, result: CalibrationResult) -> "CalibrationSolution":
        network, state = result.network, result.state
        return cls(
            intrinsics={sid: network.intrinsics_of(state, sid) for sid in network.system_ids},
            fields=dict(result.fields),
            scheme=network.scheme,
            rop=state.rop,
            poses={key: network.pose_of(state, *key) for key in network.image_keys},
            points=network.points_of(state),
        )


@dataclass(frozen=True)
class TriangulatedPoint:
    exposure_id: Optional[int]
    target_id: int
    position: np.ndarray


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def mapping_error(estimated: Union[Dict[int, np.ndarray], np.ndarray],
                  reference: Union[Dict[int, np.ndarray], np.ndarray]) -> AxisRmse:
    """
    Per-axis RMSE after the least-squares rigid fit of estimated onto reference.

    Dicts are matched on target id; arrays must correspond row by row.

    Raises:
        NoCommonTargets: fewer than 3 correspondences
    """
    if isinstance(estimated, dict):
        common = sorted(set(estimated) & set(reference))
        if len(common) < 3:
            raise NoCommonTargets(f"Need at least 3 common targets, got {len(common)}")
        source = np.array([estimated[t] for t in common], dtype=float)
        target = np.array([reference[t] for t in common], dtype=float)
    else:
        source = np.asarray(estimated, dtype=float)
        target = np.asarray(reference, dtype=float)
        if source.shape != target.shape or len(source) < 3:
            raise NoCommonTargets(f"Need matching (n >= 3, 3) arrays, got {source.shape} and {target.shape}")
    alignment = rigid_align(source, target)
    return AxisRmse.from_residuals(alignment.apply(source) - target)


def in_sample_error(result: CalibrationResult, reference_points: Dict[int, np.ndarray]) -> AxisRmse:
    """Mapping error of the object points adjusted together with the calibration"""
    return mapping_error(result.network.points_of(result.state), reference_points)


def reprojection_error(residual_set: ResidualSet) -> float:
    """RMS over the pooled x and y components of the inlier residuals, px"""
    r = residual_set.residuals[residual_set.inliers]
    if r.size == 0:
        return math.nan
    return float(np.sqrt(np.mean(r * r)))


def improvement(before: float, after: float) -> float:
    """100 (1 - after / before)"""
    if not before > 0:
        raise NonPositiveBaseline(before)
    return 100.0 * (1.0 - after / before)


def improvement_bounds(before: float, after: float, decimals: int = 2) -> Tuple[float, float]:
    """Range of improvement() consistent with inputs that were rounded to `decimals`"""
    half = 0.5 * 10.0 ** (-decimals)
    if not before - half > 0:
        raise NonPositiveBaseline(before - half)
    low = 100.0 * (1.0 - (after + half) / (before - half))
    high = 100.0 * (1.0 - (after - half) / (before + half))
    return low, high


# ---------------------------------------------------------------------------
# Biplanar intersection
# ---------------------------------------------------------------------------

def _pair_rays(solution: CalibrationSolution, first: Sequence[Observation], second: Sequence[Observation]):
    """Rays of both systems in the camera-1 frame: system 1 at identity, system 2 at the ROP"""
    s1, s2 = solution.system_ids
    rays = []
    for sid, pose, group in ((s1, Pose.identity(), first), (s2, solution.rop, second)):
        xy = np.array([[o.x, o.y] for o in group], dtype=float)
        n = len(xy)
        rays.append(back_project(
            xy, np.repeat(pose.matrix[None, :, :], n, axis=0), np.repeat(pose.center[None, :], n, axis=0),
            np.repeat(solution.intrinsics[sid].as_array()[None, :], n, axis=0), solution.corrections(sid, xy)))
    (o1, d1), (o2, d2) = rays
    return intersect_ray_pairs(o1, d1, o2, d2)


def _exposure_pairs(solution: CalibrationSolution, observations: Iterable[Observation]):
    """(exposure_id, [(target_id, obs1, obs2)]) for targets seen by both systems"""
    s1, s2 = solution.system_ids
    by_exposure: Dict[int, Dict[Tuple[int, int], Observation]] = {}
    for o in observations:
        by_exposure.setdefault(o.exposure_id, {})[(o.system_id, o.target_id)] = o
    for eid in sorted(by_exposure):
        images = by_exposure[eid]
        targets = sorted({tid for sid, tid in images if sid == s1} & {tid for sid, tid in images if sid == s2})
        yield eid, [(tid, images[(s1, tid)], images[(s2, tid)]) for tid in targets]


def _pair_residuals(solution: CalibrationSolution, first: Sequence[Observation], second: Sequence[Observation],
                    points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Reprojection residuals and variances of intersected points, rows (obs1 of all pairs, obs2 of all pairs)"""
    s1, s2 = solution.system_ids
    residuals, variances = [], []
    for sid, pose, group in ((s1, Pose.identity(), first), (s2, solution.rop, second)):
        xy = np.array([[o.x, o.y] for o in group], dtype=float)
        iop = np.repeat(solution.intrinsics[sid].as_array()[None, :], len(xy), axis=0)
        residuals.append(xy - project_array(pose.transform(points), iop, solution.corrections(sid, xy)))
        variances.append(np.repeat(np.array([[o.sigma ** 2] for o in group]), 2, axis=1))
    return np.vstack(residuals), np.vstack(variances)


def gate_pairs(solution: CalibrationSolution, test_observations: Sequence[Observation],
               settings: Optional[LoopSettings] = None):
    """
    Intersect every test pair and gate it on its reprojection residuals.

    The residuals of all pairs are pooled and classified like the training
    residuals; a pair is kept only when both of its observations are inliers.

    Returns:
        (list of (exposure_id, target_ids, points (n, 3)), ResidualSet of all pairs)
    """
    settings = settings or LoopSettings()
    epochs, residuals, variances = [], [], []
    for eid, matches in _exposure_pairs(solution, test_observations):
        if not matches:
            continue
        first, second = [m[1] for m in matches], [m[2] for m in matches]
        points = _pair_rays(solution, first, second)
        r, v = _pair_residuals(solution, first, second, points)
        epochs.append((eid, [m[0] for m in matches], points))
        residuals.append(r)
        variances.append(v)
    if not epochs:
        raise NoCommonTargets("No test exposure has targets seen by both systems")
    residual_set = ResidualSet(np.vstack(residuals), np.vstack(variances), np.vstack(variances),
                               np.ones(sum(len(r) for r in residuals)))
    flags = classify_inliers(residual_set, settings.inlier_threshold, settings.min_inlier_fraction)

    gated, start = [], 0
    for eid, targets, points in epochs:
        n = len(targets)
        keep = flags[start:start + n] & flags[start + n:start + 2 * n]
        start += 2 * n
        if not keep.all():
            logger.debug(f"Exposure {eid}: gated {int((~keep).sum())} of {n} pairs")
        gated.append((eid, [t for t, k in zip(targets, keep) if k], points[keep]))
    return gated, residual_set


def intersection_error(solution: CalibrationSolution, test_observations: Sequence[Observation],
                       reference_points: Dict[int, np.ndarray],
                       settings: Optional[LoopSettings] = None) -> AxisRmse:
    """
    Two-ray intersection accuracy of a biplanar calibration.

    Every test exposure is reconstructed in the camera-1 frame, pairs with an
    outlying observation are gated out, the rest is rigidly fitted to the
    reference (it is only defined up to the unknown phantom pose at that
    epoch), and the residuals of all epochs are pooled per axis.

    Raises:
        EvaluationError: the solution has no ROP
        NoCommonTargets: no exposure has 3 inlier targets seen by both systems
        AllOutliers: fewer than the minimum inlier fraction of test observations survive
    """
    if not solution.biplanar or len(solution.system_ids) != 2:
        raise EvaluationError("Intersection error needs a two-system solution with a ROP")
    gated, _ = gate_pairs(solution, test_observations, settings)
    residuals = []
    skipped = 0
    for eid, targets, points in gated:
        keep = [i for i, tid in enumerate(targets) if tid in reference_points]
        if len(keep) < 3:
            skipped += 1
            continue
        points = points[keep]
        reference = np.array([reference_points[targets[i]] for i in keep], dtype=float)
        alignment = rigid_align(points, reference)
        residuals.append(alignment.apply(points) - reference)
    if not residuals:
        raise NoCommonTargets("No test exposure has 3 inlier targets seen by both systems")
    if skipped:
        logger.warning(f"⚠️ Skipped {skipped} test exposure(s) with fewer than 3 paired targets")
    return AxisRmse.from_residuals(np.vstack(residuals))


# ---------------------------------------------------------------------------
# Single-system out-of-sample adjustment
# ---------------------------------------------------------------------------

def out_of_sample_solution(solution: CalibrationSolution, test_observations: Sequence[Observation],
                           initial: InitialValues, settings: Optional[LoopSettings] = None):
    """
    Adjust the test images with IOP and distortion held at their calibrated values.

    The adjusted residuals are gated with the loop's inlier threshold; when
    observations are gated out, the inliers are adjusted once more on their
    own so the object points carry no outlier influence.

    Returns (network, LevenbergMarquardtResult) of the final adjustment.
    """
    settings = settings or LoopSettings()
    points = dict(initial.points or {})
    points.update(solution.points)
    start = InitialValues(dict(solution.intrinsics), dict(initial.poses), points)
    network, result = _adjust_fixed(solution, filter_observations(test_observations), start, settings)
    flags = classify_inliers(result.residual_set, settings.inlier_threshold, settings.min_inlier_fraction)
    if flags.all():
        return network, result

    logger.info(f"🛡️ Gated {int((~flags).sum())} of {len(flags)} test observations; re-adjusting the inliers")
    state = result.state
    adjusted = InitialValues(dict(solution.intrinsics),
                             {key: network.pose_of(state, *key) for key in network.image_keys},
                             network.points_of(state))
    inliers = [o for o, keep in zip(network.observations, flags) if keep]
    network, result = _adjust_fixed(solution, filter_observations(inliers), adjusted, settings)
    return network, result


def _adjust_fixed(solution: CalibrationSolution, observations: Sequence[Observation], start: InitialValues,
                  settings: LoopSettings):
    network = build_network(observations, start, Scheme.NONE)
    network = apply_fields(network, solution.fields)
    result = levenberg_marquardt(network, settings.model, settings.solver, network.initial_state,
                                 apply_inner_constraints(network))
    return network, result


def evaluate(solution: CalibrationSolution, test_observations: Sequence[Observation],
             reference_points: Dict[int, np.ndarray], initial: Optional[InitialValues] = None,
             settings: Optional[LoopSettings] = None) -> Tuple[AxisRmse, float, str]:
    """(per-axis RMSE, reprojection RMSE px, protocol) for the protocol matching the solution"""
    if solution.biplanar:
        return intersection_error(solution, test_observations, reference_points, settings), math.nan, "intersection"
    if initial is None:
        raise EvaluationError("Out-of-sample evaluation needs initial poses for the test exposures")
    network, result = out_of_sample_solution(solution, test_observations, initial, settings)
    rmse = mapping_error(network.points_of(result.state), reference_points)
    return rmse, reprojection_error(result.residual_set), "out-of-sample"


# ---------------------------------------------------------------------------
# Triangulation
# ---------------------------------------------------------------------------

def triangulate(solution: CalibrationSolution, observations: Sequence[Observation]) -> List[TriangulatedPoint]:
    """
    3D points from corrected observations.

    Biplanar: one point per (exposure, target) seen by both systems, in the
    camera-1 frame. Single system: one point per target from all rays of the
    calibrated images, in the calibration's object frame.
    """
    if solution.biplanar:
        out = []
        for eid, matches in _exposure_pairs(solution, observations):
            if not matches:
                continue
            points = _pair_rays(solution, [m[1] for m in matches], [m[2] for m in matches])
            out.extend(TriangulatedPoint(eid, m[0], p) for m, p in zip(matches, points))
        return out

    usable = [o for o in observations if o.image_key in solution.poses]
    if len(usable) < len(observations):
        logger.warning(f"⚠️ {len(observations) - len(usable)} observation(s) come from uncalibrated images "
                       f"and were ignored")
    by_target: Dict[int, List[Observation]] = {}
    for o in usable:
        by_target.setdefault(o.target_id, []).append(o)
    out = []
    for tid in sorted(by_target):
        group = by_target[tid]
        if len(group) < 2:
            continue
        origins, directions = [], []
        for o in group:
            pose = solution.poses[o.image_key]
            xy = np.array([[o.x, o.y]])
            origin, direction = back_project(xy, pose.matrix[None, :, :], pose.center[None, :],
                                             solution.intrinsics[o.system_id].as_array()[None, :],
                                             solution.corrections(o.system_id, xy))
            origins.append(origin[0])
            directions.append(direction[0])
        out.append(TriangulatedPoint(None, tid, intersect_rays(np.array(origins), np.array(directions))))
    return out


# ---------------------------------------------------------------------------
# Benchmark
# ---------------------------------------------------------------------------

@dataclass
class SplitSpec:
    """
    Whole exposures are withheld: every other exposure by default, or an explicit
    test list. The test pool is the same for every training size.
    """
    training_sizes: Tuple[int, ...] = DEFAULT_TRAINING_SIZES
    test_exposures: Optional[Sequence[int]] = None

    def split(self, exposures: Iterable[int]) -> Tuple[List[int], List[int]]:
        ordered = sorted(set(exposures))
        if self.test_exposures is None:
            return ordered[0::2], ordered[1::2]
        test = set(self.test_exposures)
        return [e for e in ordered if e not in test], [e for e in ordered if e in test]

    @staticmethod
    def training_subset(train: Sequence[int], size: int) -> List[int]:
        """size exposures evenly spaced over the training pool"""
        if size < 1:
            raise EvaluationError(f"Training size must be >= 1, got {size}")
        if size >= len(train):
            return list(train)
        index = np.round(np.linspace(0, len(train) - 1, size)).astype(int)
        return [train[i] for i in index]


def benchmark(dataset: Dataset, initial: InitialValues, schemes: Sequence[Scheme] = tuple(Scheme),
              settings: Optional[LoopSettings] = None, split: Optional[SplitSpec] = None) -> List[EvaluationReport]:
    """
    Calibrate every scheme on every training size and evaluate on the test exposures.

    The uncalibrated baseline (Scheme.NONE) always runs first in each group;
    improvements are relative to its average RMSE.
    """
    settings = settings or LoopSettings()
    split = split or SplitSpec()
    biplanar = dataset.truth.rop is not None
    observations = dataset.observations
    train_pool, test = split.split(o.exposure_id for o in observations)
    test_set = set(test)
    test_observations = [o for o in observations if o.exposure_id in test_set]
    ordered_schemes = [Scheme.NONE] + [s for s in schemes if s is not Scheme.NONE]
    logger.info(f"📊 Benchmark: {len(train_pool)} training / {len(test)} test exposures, "
                f"sizes {list(split.training_sizes)}, schemes {[s.value for s in ordered_schemes]}")

    rows = []
    for size in split.training_sizes:
        chosen = set(split.training_subset(train_pool, size))
        training = filter_observations([o for o in observations if o.exposure_id in chosen])
        baseline = None
        for scheme in ordered_schemes:
            result = calibrate_observations(training, initial, scheme, settings, biplanar)
            solution = CalibrationSolution.from_result(result)
            rmse, reprojection, protocol = evaluate(solution, test_observations, dataset.truth.points, initial,
                                                    settings)
            if biplanar:
                reprojection = reprojection_error(result.residual_set)
            row = EvaluationReport(scheme, len(chosen), rmse, reprojection, result.network.redundancy(),
                                   protocol=protocol)
            if scheme is Scheme.NONE:
                baseline = row.average
            else:
                row.improvement = improvement(baseline, row.average)
            rows.append(row)
            logger.info(f"📏 {len(chosen)} pairs, {scheme.label}: average RMSE {row.average:.3f} mm"
                        + ("" if row.improvement is None else f", {row.improvement:.1f}% better"))
    return rows


# ---------------------------------------------------------------------------
# Output
# ---------------------------------------------------------------------------

def render_markdown(rows: Sequence[EvaluationReport]) -> str:
    """Results table; the training size is printed once per group"""
    lines = ["| " + " | ".join(REPORT_COLUMNS) + " |", "|" + "---|" * len(REPORT_COLUMNS)]
    previous = None
    for row in rows:
        size = str(row.training_size) if row.training_size != previous else ""
        previous = row.training_size
        pct = "N/A" if row.improvement is None else f"{row.improvement:.1f}"
        lines.append(f"| {size} | {row.scheme.label} | {row.rmse.x:.2f} | {row.rmse.y:.2f} | {row.rmse.z:.2f} | "
                     f"{row.average:.2f} | {pct} |")
    return "\n".join(lines) + "\n"


def write_report_csv(rows: Sequence[EvaluationReport], path: str):
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for row in rows:
            writer.writerow([row.training_size, row.scheme.value, repr(row.rmse.x), repr(row.rmse.y),
                             repr(row.rmse.z), repr(row.average),
                             "" if row.improvement is None else repr(row.improvement),
                             repr(row.reprojection_rmse), row.redundancy, row.protocol])


def read_report_csv(path: str) -> List[EvaluationReport]:
    rows = []
    with open(path, "r", newline="", encoding="utf-8") as handle:
        for record in csv.DictReader(handle):
            rows.append(EvaluationReport(
                scheme=Scheme.parse(record["scheme"]),
                training_size=int(record["training_size"]),
                rmse=AxisRmse(float(record["x_rmse_mm"]), float(record["y_rmse_mm"]), float(record["z_rmse_mm"])),
                reprojection_rmse=float(record["reprojection_rmse_px"]),
                redundancy=int(record["redundancy"]),
                improvement=float(record["improvement_pct"]) if record["improvement_pct"] else None,
                protocol=record.get("protocol") or "out-of-sample",
            ))
    return rows


def write_plot_data(rows: Sequence[EvaluationReport], path: str):
    """Long format: training_size, series, metric, value"""
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["training_size", "series", "metric", "value"])
        for row in rows:
            metrics = [("x_rmse_mm", row.rmse.x), ("y_rmse_mm", row.rmse.y), ("z_rmse_mm", row.rmse.z),
                       ("average_rmse_mm", row.average)]
            if row.improvement is not None:
                metrics.append(("improvement_pct", row.improvement))
            for metric, value in metrics:
                writer.writerow([row.training_size, row.scheme.value, metric, repr(value)])


def plot_report(rows: Sequence[EvaluationReport], path: str):
    """Average RMSE and improvement against training size, one line per scheme"""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, (ax_rmse, ax_pct) = plt.subplots(nrows=1, ncols=2, figsize=(10, 4))
    for scheme in Scheme:
        series = sorted((r.training_size, r) for r in rows if r.scheme is scheme)
        if not series:
            continue
        sizes = [size for size, _ in series]
        ax_rmse.plot(sizes, [r.average for _, r in series], marker="o", label=SCHEME_LABELS[scheme])
        if scheme is not Scheme.NONE:
            ax_pct.plot(sizes, [r.improvement for _, r in series], marker="o", label=SCHEME_LABELS[scheme])
    ax_rmse.set_xlabel("# of image pairs")
    ax_rmse.set_ylabel("Average RMSE [mm]")
    ax_pct.set_xlabel("# of image pairs")
    ax_pct.set_ylabel("% Improvement")
    ax_rmse.legend(fontsize=8)
    ax_pct.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def aggregate_reports(rows: Sequence[EvaluationReport]) -> List[EvaluationReport]:
    """
    Merge rows from several runs: per (training size, scheme) the per-axis RMSEs
    are averaged, and improvements are recomputed against the merged baseline.
    """
    groups: Dict[Tuple[int, Scheme], List[EvaluationReport]] = {}
    for row in rows:
        groups.setdefault((row.training_size, row.scheme), []).append(row)
    order = list(Scheme)
    merged = []
    for size, scheme in sorted(groups, key=lambda key: (key[0], order.index(key[1]))):
        group = groups[(size, scheme)]
        rmse = AxisRmse(*np.mean([r.rmse.as_tuple() for r in group], axis=0).tolist())
        merged.append(EvaluationReport(scheme, size, rmse, float(np.mean([r.reprojection_rmse for r in group])),
                                       int(round(np.mean([r.redundancy for r in group]))),
                                       protocol=group[0].protocol))
    baselines = {row.training_size: row.average for row in merged if row.scheme is Scheme.NONE}
    for row in merged:
        if row.scheme is not Scheme.NONE and row.training_size in baselines:
            row.improvement = improvement(baselines[row.training_size], row.average)
    return merged
