#!/usr/bin/env python3
"""
🧪 EVALUATION TESTS
Mapping error, improvement arithmetic, the biplanar intersection protocol,
out-of-sample adjustment, triangulation and the results table
"""

import sys
import os
import math
from dataclasses import replace

import numpy as np
import pytest
from numpy.testing import assert_allclose

# Add src and tests directories to path
sys.path.insert(0, os.path.join(os.path.dirname(os.path.dirname(__file__)), 'src'))
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from evaluation import (
    AxisRmse, EvaluationReport, CalibrationSolution, SplitSpec, REPORT_COLUMNS, mapping_error, in_sample_error,
    reprojection_error, improvement, improvement_bounds, intersection_error, gate_pairs, out_of_sample_solution,
    evaluate, triangulate, benchmark, render_markdown, write_report_csv, read_report_csv, write_plot_data, plot_report,
    aggregate_reports
)
from calibration_loop import LoopSettings, calibrate_observations
from network import Scheme, filter_observations
from geometry import Quaternion
from robust_estimation import ResidualSet
from calibration_errors import NoCommonTargets, NonPositiveBaseline, EvaluationError
from calibration_test_cases import small_dataset, perturbed_initial

# Reference accuracy table: (pairs, baseline (X, Y, Z, Avg), [(scheme, (X, Y, Z, Avg), % improvement)])
REFERENCE_TABLE = [
    (15, (.76, .47, .76, .68), [(Scheme.KNN, (.26, .35, .35, .32), 52.8),
                                (Scheme.KNN_IOP, (.27, .35, .36, .33), 51.6),
                                (Scheme.KNN_SMOOTHING, (.24, .35, .34, .31), 53.8),
                                (Scheme.KNN_IOP_SMOOTHING, (.24, .35, .35, .31), 53.8)]),
    (30, (.63, .46, .65, .59), [(Scheme.KNN, (.25, .34, .35, .31), 46.3),
                                (Scheme.KNN_IOP, (.25, .34, .35, .32), 45.9),
                                (Scheme.KNN_SMOOTHING, (.24, .34, .35, .31), 46.3),
                                (Scheme.KNN_IOP_SMOOTHING, (.24, .34, .35, .32), 46.2)]),
    (45, (.63, .45, .66, .59), [(Scheme.KNN, (.24, .34, .35, .31), 46.5),
                                (Scheme.KNN_IOP, (.25, .34, .36, .32), 46.0),
                                (Scheme.KNN_SMOOTHING, (.24, .34, .35, .31), 46.4),
                                (Scheme.KNN_IOP_SMOOTHING, (.24, .34, .35, .32), 46.3)]),
    (60, (.64, .45, .66, .59), [(Scheme.KNN, (.24, .34, .35, .31), 47.0),
                                (Scheme.KNN_IOP, (.25, .34, .36, .32), 46.7),
                                (Scheme.KNN_SMOOTHING, (.24, .34, .35, .31), 46.9),
                                (Scheme.KNN_IOP_SMOOTHING, (.24, .34, .35, .32), 46.8)]),
    (75, (.65, .45, .67, .60), [(Scheme.KNN, (.25, .34, .35, .32), 47.2),
                                (Scheme.KNN_IOP, (.25, .34, .35, .32), 47.1),
                                (Scheme.KNN_SMOOTHING, (.24, .34, .35, .32), 47.0),
                                (Scheme.KNN_IOP_SMOOTHING, (.24, .34, .35, .32), 47.2)]),
]


def _settings():
    return LoopSettings(folds=5, candidate_ks=[3, 8, 20], grid_shape=(16, 16), max_iterations=3)


def _report(scheme, size, values, pct=None):
    return EvaluationReport(scheme, size, AxisRmse(*values), 0.1, 100, pct)


def test_axis_rmse_average_is_plain_mean():
    rmse = AxisRmse(0.76, 0.47, 0.76)
    assert rmse.average == pytest.approx((0.76 + 0.47 + 0.76) / 3.0)
    assert rmse.as_tuple() == (0.76, 0.47, 0.76)
    with pytest.raises(NoCommonTargets):
        AxisRmse.from_residuals(np.zeros((0, 3)))


def test_axis_rmse_from_residuals():
    rmse = AxisRmse.from_residuals(np.array([[3.0, 0.0, 1.0], [-3.0, 4.0, 1.0]]))
    assert_allclose(rmse.as_tuple(), (3.0, math.sqrt(8.0), 1.0))


def test_improvement_formula():
    assert improvement(0.68, 0.32) == pytest.approx(52.94, abs=0.01)
    assert improvement(0.5, 0.5) == 0.0
    with pytest.raises(NonPositiveBaseline):
        improvement(0.0, 0.3)


def test_reference_improvements_are_consistent_with_rounding():
    for pairs, baseline, rows in REFERENCE_TABLE:
        for scheme, values, reported in rows:
            low, high = improvement_bounds(baseline[3], values[3], 2)
            assert low <= reported <= high, (pairs, scheme, low, high, reported)


def test_mapping_error_is_rigid_invariant():
    rng = np.random.default_rng(0)
    reference = {i: p for i, p in enumerate(rng.uniform(-50, 50, (12, 3)))}
    R = Quaternion.from_rotvec([0.2, 0.1, -0.3]).to_matrix()
    moved = {i: R @ p + np.array([10.0, -5.0, 3.0]) for i, p in reference.items()}
    rmse = mapping_error(moved, reference)
    assert max(rmse.as_tuple()) < 1e-9

    noisy = {i: p + np.array([0.0, 0.0, 0.1 * (-1) ** i]) for i, p in reference.items()}
    assert mapping_error(noisy, reference).z > 0.05


def test_mapping_error_needs_three_common_targets():
    with pytest.raises(NoCommonTargets):
        mapping_error({1: np.zeros(3), 2: np.ones(3)}, {1: np.zeros(3), 2: np.ones(3), 3: np.ones(3)})
    with pytest.raises(NoCommonTargets):
        mapping_error(np.zeros((4, 3)), np.zeros((3, 3)))


def test_reprojection_error_pools_inlier_components():
    residuals = np.array([[3.0, 4.0], [100.0, 0.0]])
    ones = np.ones_like(residuals)
    residual_set = ResidualSet(residuals, ones, ones, np.ones(2), np.array([True, False]))
    assert reprojection_error(residual_set) == pytest.approx(math.sqrt(12.5))
    residual_set.inliers = np.array([False, False])
    assert math.isnan(reprojection_error(residual_set))


def test_split_and_training_subsets():
    train, test = SplitSpec().split(range(1, 11))
    assert train == [1, 3, 5, 7, 9]
    assert test == [2, 4, 6, 8, 10]
    train, test = SplitSpec(test_exposures=[3, 4]).split([1, 2, 3, 4, 5])
    assert (train, test) == ([1, 2, 5], [3, 4])
    assert SplitSpec.training_subset(list(range(10)), 4) == [0, 3, 6, 9]
    assert SplitSpec.training_subset([1, 2, 3], 5) == [1, 2, 3]
    with pytest.raises(EvaluationError):
        SplitSpec.training_subset([1, 2, 3], 0)


def test_render_markdown_table():
    rows = [_report(Scheme.NONE, 15, (.76, .47, .76)),
            _report(Scheme.KNN, 15, (.26, .35, .35), 52.8),
            _report(Scheme.NONE, 30, (.63, .46, .65))]
    lines = render_markdown(rows).splitlines()
    assert lines[0] == ("| # of image pairs | Calibration Mode | X_RMSE | Y_RMSE | Z_RMSE | Average RMSE "
                        "| % Improvement |")
    assert lines[1] == "|" + "---|" * len(REPORT_COLUMNS)
    assert lines[2] == "| 15 | No calibration | 0.76 | 0.47 | 0.76 | 0.66 | N/A |"
    assert lines[3] == "|  | kNN | 0.26 | 0.35 | 0.35 | 0.32 | 52.8 |"
    assert lines[4].startswith("| 30 | No calibration |")


def test_report_csv_round_trip(tmp_path):
    rows = [_report(Scheme.NONE, 15, (.76, .47, .76)), _report(Scheme.KNN_IOP, 15, (.27, .35, .36), 51.6)]
    path = str(tmp_path / "report.csv")
    write_report_csv(rows, path)
    restored = read_report_csv(path)
    assert [r.scheme for r in restored] == [Scheme.NONE, Scheme.KNN_IOP]
    assert restored[0].improvement is None
    assert restored[1].improvement == 51.6
    assert restored[1].rmse == rows[1].rmse


def test_plot_data_long_format(tmp_path):
    rows = [_report(Scheme.NONE, 15, (.76, .47, .76)), _report(Scheme.KNN, 15, (.26, .35, .35), 52.8)]
    path = str(tmp_path / "plotdata.csv")
    write_plot_data(rows, path)
    with open(path, encoding="utf-8") as handle:
        lines = handle.read().splitlines()
    assert lines[0] == "training_size,series,metric,value"
    assert len(lines) == 1 + 4 + 5


def test_plot_report_writes_png(tmp_path):
    pytest.importorskip("matplotlib")
    rows = [_report(Scheme.NONE, 15, (.76, .47, .76)), _report(Scheme.KNN, 15, (.26, .35, .35), 52.8),
            _report(Scheme.NONE, 30, (.63, .46, .65)), _report(Scheme.KNN, 30, (.25, .34, .35), 46.3)]
    path = str(tmp_path / "summary.png")
    plot_report(rows, path)
    assert os.path.getsize(path) > 0


def test_aggregate_reports_recomputes_improvement():
    rows = [_report(Scheme.KNN, 15, (.3, .3, .3), 0.0), _report(Scheme.NONE, 15, (.6, .6, .6)),
            _report(Scheme.NONE, 15, (.8, .8, .8)), _report(Scheme.KNN, 15, (.5, .5, .5), 0.0)]
    merged = aggregate_reports(rows)
    assert [r.scheme for r in merged] == [Scheme.NONE, Scheme.KNN]
    assert merged[0].average == pytest.approx(0.7)
    assert merged[1].average == pytest.approx(0.4)
    assert merged[1].improvement == pytest.approx(improvement(0.7, 0.4))


def test_intersection_error_zero_for_exact_geometry():
    dataset, _ = small_dataset(biplanar=True)
    truth = dataset.truth
    solution = CalibrationSolution(dict(truth.intrinsics), {}, Scheme.KNN, rop=truth.rop)
    rmse, reprojection, protocol = evaluate(solution, dataset.observations, truth.points)
    assert protocol == "intersection"
    assert math.isnan(reprojection)
    assert max(rmse.as_tuple()) < 1e-6


def test_uncorrected_distortion_degrades_intersection():
    dataset, _ = small_dataset(biplanar=True, distortion_px=3.0)
    truth = dataset.truth
    solution = CalibrationSolution(dict(truth.intrinsics), {}, Scheme.NONE, rop=truth.rop)
    assert intersection_error(solution, dataset.observations, truth.points).average > 1e-3


def test_intersection_needs_rop():
    dataset, _ = small_dataset(n_exposures=3)
    solution = CalibrationSolution(dict(dataset.truth.intrinsics), {})
    with pytest.raises(EvaluationError):
        intersection_error(solution, dataset.observations, dataset.truth.points)
    with pytest.raises(EvaluationError):
        evaluate(solution, dataset.observations, dataset.truth.points)


def test_triangulate_biplanar_in_camera_one_frame():
    dataset, _ = small_dataset(biplanar=True, n_exposures=3)
    truth = dataset.truth
    solution = CalibrationSolution(dict(truth.intrinsics), {}, Scheme.KNN, rop=truth.rop)
    points = triangulate(solution, dataset.observations)
    assert points
    for p in points[::7]:
        expected = truth.poses[(1, p.exposure_id)].transform(truth.points[p.target_id])
        assert_allclose(p.position, expected, atol=1e-6)


def test_triangulate_single_system():
    dataset, _ = small_dataset(n_exposures=4)
    truth = dataset.truth
    poses = {key: pose for key, pose in truth.poses.items() if key[1] <= 3}
    solution = CalibrationSolution(dict(truth.intrinsics), {}, Scheme.KNN, poses=poses)
    points = triangulate(solution, dataset.observations)
    assert all(p.exposure_id is None for p in points)
    for p in points:
        assert_allclose(p.position, truth.points[p.target_id], atol=1e-6)


def test_single_system_out_of_sample_evaluation():
    dataset, rig = small_dataset()
    initial = perturbed_initial(dataset.truth, rig)
    train, test = SplitSpec().split(o.exposure_id for o in dataset.observations)
    training = filter_observations([o for o in dataset.observations if o.exposure_id in set(train)])
    testing = [o for o in dataset.observations if o.exposure_id in set(test)]
    result = calibrate_observations(training, initial, Scheme.NONE, _settings())
    assert max(in_sample_error(result, dataset.truth.points).as_tuple()) < 1e-4

    solution = CalibrationSolution.from_result(result)
    rmse, reprojection, protocol = evaluate(solution, testing, dataset.truth.points, initial, _settings())
    assert protocol == "out-of-sample"
    assert max(rmse.as_tuple()) < 1e-4
    assert reprojection < 1e-4
    with pytest.raises(EvaluationError):
        evaluate(solution, testing, dataset.truth.points)


def _paired_key(observations):
    """Key of a system-1 observation whose target is also seen by system 2 in the same exposure"""
    seen_by_two = {(o.exposure_id, o.target_id) for o in observations if o.system_id == 2}
    return next(o.key for o in observations if o.system_id == 1 and (o.exposure_id, o.target_id) in seen_by_two)


def test_intersection_gates_outlying_test_pairs():
    dataset, _ = small_dataset(biplanar=True)
    truth = dataset.truth
    solution = CalibrationSolution(dict(truth.intrinsics), {}, Scheme.KNN, rop=truth.rop)
    key = _paired_key(dataset.observations)
    corrupted = [replace(o, y=o.y + 12.0) if o.key == key else o for o in dataset.observations]

    gated, residual_set = gate_pairs(solution, corrupted)
    assert not residual_set.inliers.all()
    assert residual_set.inliers.sum() >= len(residual_set) - 2
    assert all(key[2] not in targets for eid, targets, _ in gated if eid == key[1])
    assert max(intersection_error(solution, corrupted, truth.points).as_tuple()) < 1e-6
    ungated = LoopSettings(inlier_threshold=math.inf)
    assert intersection_error(solution, corrupted, truth.points, ungated).average > 1e-4


def test_out_of_sample_gates_outlying_test_observations():
    dataset, rig = small_dataset()
    initial = perturbed_initial(dataset.truth, rig)
    train, test = SplitSpec().split(o.exposure_id for o in dataset.observations)
    training = filter_observations([o for o in dataset.observations if o.exposure_id in set(train)])
    testing = [o for o in dataset.observations if o.exposure_id in set(test)]
    key = testing[5].key
    corrupted = [replace(o, x=o.x + 12.0) if o.key == key else o for o in testing]
    result = calibrate_observations(training, initial, Scheme.NONE, _settings())
    solution = CalibrationSolution.from_result(result)

    network, _ = out_of_sample_solution(solution, corrupted, initial, _settings())
    assert key not in {o.key for o in network.observations}
    rmse, reprojection, _ = evaluate(solution, corrupted, dataset.truth.points, initial, _settings())
    assert max(rmse.as_tuple()) < 1e-4
    assert reprojection < 1e-4


def test_biplanar_calibration_improves_intersection():
    dataset, rig = small_dataset(biplanar=True, distortion_px=3.0, noise_px=0.06)
    initial = perturbed_initial(dataset.truth, rig)
    rows = benchmark(dataset, initial, [Scheme.KNN_SMOOTHING], _settings(), SplitSpec(training_sizes=(4,)))
    baseline, calibrated = rows
    assert calibrated.protocol == "intersection"
    assert calibrated.average < baseline.average
    assert calibrated.improvement > 0


def test_benchmark_rows_and_baseline():
    dataset, rig = small_dataset(distortion_px=2.0, noise_px=0.06)
    initial = perturbed_initial(dataset.truth, rig)
    rows = benchmark(dataset, initial, [Scheme.KNN], _settings(), SplitSpec(training_sizes=(2, 4)))
    assert [(r.training_size, r.scheme) for r in rows] == [(2, Scheme.NONE), (2, Scheme.KNN),
                                                           (4, Scheme.NONE), (4, Scheme.KNN)]
    for baseline, calibrated in (rows[0:2], rows[2:4]):
        assert baseline.improvement is None
        assert calibrated.improvement == pytest.approx(improvement(baseline.average, calibrated.average))
        assert calibrated.protocol == "out-of-sample"
        assert calibrated.redundancy > 0
    assert rows[3].improvement > 0


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
