#!/usr/bin/env python3
"""
💾 EVALUATION I/O
File formats for the pipeline: observation and point CSVs, initial-value and
ground-truth JSON, the calibration artifact and the per-system field files.

CSV for tables, JSON for structured records. Lengths are mm, image
quantities px and rotations unit quaternions (w, x, y, z).
"""

import csv
import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

try:
    from .calibration_errors import MalformedRow, DuplicateKey, ArtifactVersionError, FormatError
    from .network import Observation, InitialValues, Network, CalibrationState, Scheme
    from .distortion import DistortionField
    from .synthetic_generator import GroundTruth
    from .calibration_loop import CalibrationResult, LoopSettings, LoopState, ba_cost
    from .evaluation import CalibrationSolution, TriangulatedPoint
    from .utils.config import CalibrationConfig, DEFAULT_SIGMA_PX, VERSION
except ImportError:
    from calibration_errors import MalformedRow, DuplicateKey, ArtifactVersionError, FormatError
    from network import Observation, InitialValues, Network, CalibrationState, Scheme
    from distortion import DistortionField
    from synthetic_generator import GroundTruth
    from calibration_loop import CalibrationResult, LoopSettings, LoopState, ba_cost
    from evaluation import CalibrationSolution, TriangulatedPoint
    from utils.config import CalibrationConfig, DEFAULT_SIGMA_PX, VERSION

logger = logging.getLogger(__name__)

OBSERVATION_COLUMNS = ["system_id", "exposure_id", "target_id", "x_px", "y_px"]
SIGMA_COLUMN = "sigma_px"
POINT_COLUMNS = ["exposure_id", "target_id", "X_mm", "Y_mm", "Z_mm"]


# ---------------------------------------------------------------------------
# Observations
# ---------------------------------------------------------------------------

def _parse_field(path: str, line: int, name: str, text: str, kind):
    try:
        value = kind(text.strip())
    except ValueError:
        raise MalformedRow(path, line, name, f"cannot parse '{text}' as {kind.__name__}") from None
    if kind is float and not math.isfinite(value):
        raise MalformedRow(path, line, name, f"value '{text}' is not finite")
    return value


def parse_observations(path: str, default_sigma: float = DEFAULT_SIGMA_PX) -> List[Observation]:
    """
    Read an observation CSV (LF or CRLF, UTF-8).

    Header: system_id,exposure_id,target_id,x_px,y_px[,sigma_px]. Without the
    sigma column every observation gets default_sigma.

    Raises:
        MalformedRow: bad header, wrong field count or an unparsable value
        DuplicateKey: a (system, exposure, target) key repeats
    """
    observations = []
    seen = {}
    with open(path, "r", newline="", encoding="utf-8-sig") as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header is None:
            raise MalformedRow(path, 1, "header", "file is empty")
        header = [name.strip() for name in header]
        if header not in (OBSERVATION_COLUMNS, OBSERVATION_COLUMNS + [SIGMA_COLUMN]):
            raise MalformedRow(path, 1, "header", f"expected {','.join(OBSERVATION_COLUMNS)}[,{SIGMA_COLUMN}]")
        has_sigma = len(header) == len(OBSERVATION_COLUMNS) + 1

        for row in reader:
            line = reader.line_num
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise MalformedRow(path, line, "row", f"expected {len(header)} fields, got {len(row)}")
            sid, eid, tid = (_parse_field(path, line, name, text, int) for name, text in zip(header[:3], row[:3]))
            x = _parse_field(path, line, "x_px", row[3], float)
            y = _parse_field(path, line, "y_px", row[4], float)
            sigma = _parse_field(path, line, SIGMA_COLUMN, row[5], float) if has_sigma else default_sigma
            if not sigma > 0:
                raise MalformedRow(path, line, SIGMA_COLUMN, f"must be > 0, got {sigma}")
            key = (sid, eid, tid)
            if key in seen:
                raise DuplicateKey(path, line, key)
            seen[key] = line
            observations.append(Observation(sid, eid, tid, x, y, sigma))

    logger.info(f"📥 Read {len(observations)} observations from {path}")
    return observations


def write_observations(path: str, observations: Sequence[Observation]):
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(OBSERVATION_COLUMNS + [SIGMA_COLUMN])
        for o in observations:
            writer.writerow([o.system_id, o.exposure_id, o.target_id, repr(o.x), repr(o.y), repr(o.sigma)])
    logger.info(f"💾 Wrote {len(observations)} observations to {path}")


# ---------------------------------------------------------------------------
# Points
# ---------------------------------------------------------------------------

def write_points(path: str, points: Sequence[TriangulatedPoint]):
    """Point CSV; exposure_id is empty for points that are not tied to one exposure"""
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(POINT_COLUMNS)
        for p in points:
            writer.writerow(["" if p.exposure_id is None else p.exposure_id, p.target_id]
                            + [repr(float(v)) for v in p.position])
    logger.info(f"💾 Wrote {len(points)} points to {path}")


def read_points(path: str) -> List[TriangulatedPoint]:
    points = []
    with open(path, "r", newline="", encoding="utf-8-sig") as handle:
        reader = csv.reader(handle)
        header = [name.strip() for name in next(reader, [])]
        if header != POINT_COLUMNS:
            raise MalformedRow(path, 1, "header", f"expected {','.join(POINT_COLUMNS)}")
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != len(POINT_COLUMNS):
                raise MalformedRow(path, line, "row", f"expected {len(POINT_COLUMNS)} fields, got {len(row)}")
            eid = _parse_field(path, line, "exposure_id", row[0], int) if row[0].strip() else None
            tid = _parse_field(path, line, "target_id", row[1], int)
            xyz = [_parse_field(path, line, name, text, float) for name, text in zip(POINT_COLUMNS[2:], row[2:])]
            points.append(TriangulatedPoint(eid, tid, np.array(xyz)))
    return points


# ---------------------------------------------------------------------------
# JSON records
# ---------------------------------------------------------------------------

def _write_json(path: str, data: Dict[str, Any]):
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(data, handle, indent=1)
        handle.write("\n")


def _read_json(path: str) -> Dict[str, Any]:
    try:
        with open(path, "r", encoding="utf-8") as handle:
            data = json.load(handle)
    except json.JSONDecodeError as e:
        raise MalformedRow(path, e.lineno, "json", e.msg) from e
    if not isinstance(data, dict):
        raise FormatError(f"{path}: expected a JSON object")
    return data


def _from_record(path: str, builder, data: Dict[str, Any]):
    try:
        return builder(data)
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"{path}: missing or invalid entry ({e})") from e


def write_initial_values(path: str, initial: InitialValues):
    _write_json(path, initial.to_dict())


def read_initial_values(path: str) -> InitialValues:
    return _from_record(path, InitialValues.from_dict, _read_json(path))


def write_truth(path: str, truth: GroundTruth):
    _write_json(path, truth.to_dict())


def read_truth(path: str) -> GroundTruth:
    return _from_record(path, GroundTruth.from_dict, _read_json(path))


def write_fields(directory: str, fields: Dict[int, DistortionField]) -> List[str]:
    """One field_<system_id>.json per system"""
    paths = []
    for sid, distortion in sorted(fields.items()):
        path = os.path.join(directory, f"field_{sid}.json")
        distortion.save(path)
        paths.append(path)
    return paths


def write_trace(path: str, loop_state: LoopState):
    loop_state.to_csv(path)
    logger.info(f"💾 Wrote outer-loop trace ({len(loop_state.history)} iterations) to {path}")


# ---------------------------------------------------------------------------
# Calibration artifact
# ---------------------------------------------------------------------------

def _major_minor(version: str):
    parts = str(version).split(".")
    if len(parts) < 2:
        raise ArtifactVersionError(f"Unreadable artifact version '{version}'")
    return parts[0], parts[1]


@dataclass
class CalibrationArtifact:
    """
    Everything a calibration run produces: the solution used downstream, the
    network and state it was adjusted on (so the final cost can be re-checked)
    and provenance.
    """
    solution: CalibrationSolution
    network: Network
    state: CalibrationState
    final_cost: float
    converged: bool
    iterations: int
    config_hash: str = ""
    seed: Optional[int] = None
    train_exposures: List[int] = field(default_factory=list)
    test_exposures: List[int] = field(default_factory=list)
    version: str = VERSION

    @classmethod
    def from_result(cls, result: CalibrationResult, config: Optional[CalibrationConfig] = None,
                    train_exposures: Sequence[int] = (), test_exposures: Sequence[int] = ()) -> "CalibrationArtifact":
        return cls(CalibrationSolution.from_result(result), result.network, result.state, result.ba_cost,
                   result.converged, result.iterations, config.config_hash() if config else "",
                   config.seed if config else None, list(train_exposures), list(test_exposures))

    def recompute_cost(self, settings: Optional[LoopSettings] = None) -> float:
        return ba_cost(self.network, self.state, settings)

    def to_dict(self) -> Dict[str, Any]:
        s = self.solution
        geometry = InitialValues(s.intrinsics, s.poses, s.points, s.rop).to_dict()
        return {
            "version": self.version,
            "provenance": {"config_hash": self.config_hash, "seed": self.seed},
            "scheme": s.scheme.value,
            "final_cost": self.final_cost,
            "converged": self.converged,
            "iterations": self.iterations,
            "train_exposures": list(self.train_exposures),
            "test_exposures": list(self.test_exposures),
            "geometry": geometry,
            "fields": [distortion.to_dict() for _, distortion in sorted(s.fields.items())],
            "network": self.network.to_dict(),
            "state": self.state.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "CalibrationArtifact":
        geometry = InitialValues.from_dict(data["geometry"])
        fields = {}
        for item in data.get("fields", []):
            distortion = DistortionField.from_dict(item)
            fields[distortion.system_id] = distortion
        solution = CalibrationSolution(geometry.intrinsics, fields, Scheme(data["scheme"]), geometry.rop,
                                       geometry.poses, geometry.points or {})
        provenance = data.get("provenance", {})
        return cls(solution, Network.from_dict(data["network"]), CalibrationState.from_dict(data["state"]),
                   float(data["final_cost"]), bool(data["converged"]), int(data["iterations"]),
                   provenance.get("config_hash", ""), provenance.get("seed"),
                   [int(e) for e in data.get("train_exposures", [])],
                   [int(e) for e in data.get("test_exposures", [])], str(data["version"]))

    def save(self, path: str):
        _write_json(path, self.to_dict())
        logger.info(f"💾 Calibration artifact written to {path}")

    @classmethod
    def load(cls, path: str) -> "CalibrationArtifact":
        """Raises ArtifactVersionError unless the artifact's major.minor matches this release"""
        data = _read_json(path)
        if "version" not in data:
            raise ArtifactVersionError(f"{path}: artifact has no version field")
        if _major_minor(data["version"]) != _major_minor(VERSION):
            raise ArtifactVersionError(f"{path}: artifact version {data['version']} is not readable by "
                                       f"release {VERSION}")
        return _from_record(path, cls.from_dict, data)
