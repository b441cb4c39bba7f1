#!/usr/bin/env python3
"""
🧪 EVALUATION I/O TESTS
Observation CSV parsing, point/initial/truth files and the calibration artifact
"""

import sys
import os
import json

import numpy as np
import pytest
from numpy.testing import assert_allclose

# Add src and tests directories to path
sys.path.insert(0, os.path.join(os.path.dirname(os.path.dirname(__file__)), 'src'))
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from evaluation_io import (
    parse_observations, write_observations, write_points, read_points, write_initial_values,
    read_initial_values, write_truth, read_truth, write_fields, write_trace, CalibrationArtifact
)
from evaluation import TriangulatedPoint
from calibration_loop import LoopSettings, calibrate_observations
from distortion import DistortionField
from network import Observation, Scheme
from calibration_errors import MalformedRow, DuplicateKey, ArtifactVersionError, FormatError
from utils.config import DEFAULT_SIGMA_PX, VERSION
from calibration_test_cases import small_dataset, perturbed_initial, two_view_case

HEADER = "system_id,exposure_id,target_id,x_px,y_px,sigma_px\n"


def _write(tmp_path, text, name="obs.csv"):
    path = tmp_path / name
    path.write_bytes(text.encode("utf-8"))
    return str(path)


def _knn_result():
    dataset, rig = small_dataset(distortion_px=2.0, noise_px=0.06, n_exposures=6)
    settings = LoopSettings(folds=5, candidate_ks=[3, 8], grid_shape=(16, 16), max_iterations=1)
    return calibrate_observations(dataset.observations, perturbed_initial(dataset.truth, rig), Scheme.KNN,
                                  settings)


def test_header_only_file_is_empty(tmp_path):
    assert parse_observations(_write(tmp_path, HEADER)) == []


def test_parse_observation_row(tmp_path):
    observations = parse_observations(_write(tmp_path, HEADER + "1,3,42,1001.25,998.50,0.06\n"))
    assert observations == [Observation(1, 3, 42, 1001.25, 998.5, 0.06)]


def test_missing_sigma_column_uses_default(tmp_path):
    text = "system_id,exposure_id,target_id,x_px,y_px\n1,1,1,10.0,20.0\n"
    assert parse_observations(_write(tmp_path, text))[0].sigma == DEFAULT_SIGMA_PX
    assert parse_observations(_write(tmp_path, text), default_sigma=0.5)[0].sigma == 0.5


def test_crlf_and_blank_lines(tmp_path):
    text = HEADER.replace("\n", "\r\n") + "1,1,1,10.0,20.0,0.1\r\n\r\n2,1,1,11.0,21.0,0.1\r\n"
    observations = parse_observations(_write(tmp_path, text))
    assert [o.key for o in observations] == [(1, 1, 1), (2, 1, 1)]


def test_duplicate_key_is_rejected(tmp_path):
    text = HEADER + "1,1,1,10.0,20.0,0.1\n1,1,2,10.0,20.0,0.1\n1,1,1,11.0,21.0,0.1\n"
    with pytest.raises(DuplicateKey) as info:
        parse_observations(_write(tmp_path, text))
    assert info.value.line == 4
    assert info.value.key == (1, 1, 1)


def test_malformed_rows_report_line_and_field(tmp_path):
    with pytest.raises(MalformedRow) as info:
        parse_observations(_write(tmp_path, HEADER + "1,1,1,10.0,20.0,0.1\n1,1,2,abc,20.0,0.1\n"))
    assert (info.value.line, info.value.field) == (3, "x_px")

    with pytest.raises(MalformedRow) as info:
        parse_observations(_write(tmp_path, HEADER + "1,1,1,10.0,20.0\n"))
    assert (info.value.line, info.value.field) == (2, "row")

    with pytest.raises(MalformedRow) as info:
        parse_observations(_write(tmp_path, HEADER + "1,1,1,10.0,20.0,0\n"))
    assert info.value.field == "sigma_px"

    with pytest.raises(MalformedRow) as info:
        parse_observations(_write(tmp_path, "sys,exp,tgt,x,y\n"))
    assert (info.value.line, info.value.field) == (1, "header")

    with pytest.raises(MalformedRow):
        parse_observations(_write(tmp_path, ""))


def test_observation_file_round_trip(tmp_path):
    observations, _ = two_view_case()
    path = str(tmp_path / "obs.csv")
    write_observations(path, observations)
    assert parse_observations(path) == observations


def test_points_round_trip(tmp_path):
    points = [TriangulatedPoint(3, 7, np.array([1.5, -2.25, 100.0])), TriangulatedPoint(None, 8, np.zeros(3))]
    path = str(tmp_path / "points.csv")
    write_points(path, points)
    restored = read_points(path)
    assert [(p.exposure_id, p.target_id) for p in restored] == [(3, 7), (None, 8)]
    assert_allclose(restored[0].position, points[0].position)


def test_initial_values_and_truth_files(tmp_path):
    dataset, rig = small_dataset(biplanar=True, distortion_px=2.0, n_exposures=3)
    initial = perturbed_initial(dataset.truth, rig)
    path = str(tmp_path / "initial.json")
    write_initial_values(path, initial)
    restored = read_initial_values(path)
    assert set(restored.poses) == set(initial.poses)
    assert restored.poses[(2, 3)].is_close(initial.poses[(2, 3)], 1e-12)
    assert restored.rop.is_close(initial.rop, 1e-12)

    path = str(tmp_path / "truth.json")
    write_truth(path, dataset.truth)
    truth = read_truth(path)
    assert_allclose(truth.points[4], dataset.truth.points[4])


def test_json_errors(tmp_path):
    with pytest.raises(MalformedRow):
        read_initial_values(_write(tmp_path, "{\n  \"poses\": [\n", "bad.json"))
    with pytest.raises(FormatError):
        read_initial_values(_write(tmp_path, "[1, 2]", "list.json"))
    with pytest.raises(FormatError):
        read_truth(_write(tmp_path, "{}", "empty.json"))


def test_fields_and_trace_files(tmp_path):
    result = _knn_result()
    paths = write_fields(str(tmp_path), result.fields)
    assert [os.path.basename(p) for p in paths] == ["field_1.json"]
    restored = DistortionField.load(paths[0])
    q = np.array([[800.0, 900.0], [1200.0, 1100.0]])
    assert_allclose(restored.predict(q), result.fields[1].predict(q), atol=1e-12)

    trace = str(tmp_path / "trace.csv")
    write_trace(trace, result.loop_state)
    with open(trace, encoding="utf-8") as handle:
        assert handle.readline().startswith("iteration,ba_cost,G,combined")


def test_artifact_save_and_load(tmp_path):
    result = _knn_result()
    artifact = CalibrationArtifact.from_result(result, train_exposures=[1, 3, 5], test_exposures=[2, 4, 6])
    path = str(tmp_path / "calibration.json")
    artifact.save(path)
    loaded = CalibrationArtifact.load(path)
    assert loaded.version == VERSION
    assert loaded.solution.scheme is Scheme.KNN
    assert loaded.train_exposures == [1, 3, 5]
    assert loaded.final_cost == pytest.approx(result.ba_cost, rel=1e-12)
    assert loaded.recompute_cost() == pytest.approx(loaded.final_cost, rel=1e-9)
    q = np.array([[1000.0, 1000.0]])
    assert_allclose(loaded.solution.corrections(1, q), artifact.solution.corrections(1, q), atol=1e-12)


def test_artifact_version_is_checked(tmp_path):
    result = _knn_result()
    data = CalibrationArtifact.from_result(result).to_dict()
    major, minor = VERSION.split(".")[:2]

    data["version"] = f"{major}.{int(minor) + 1}.0"
    path = _write(tmp_path, json.dumps(data), "newer.json")
    with pytest.raises(ArtifactVersionError):
        CalibrationArtifact.load(path)

    data["version"] = f"{major}.{minor}.99"
    assert CalibrationArtifact.load(_write(tmp_path, json.dumps(data), "patch.json")).version.endswith(".99")

    del data["version"]
    with pytest.raises(ArtifactVersionError):
        CalibrationArtifact.load(_write(tmp_path, json.dumps(data), "missing.json"))


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
