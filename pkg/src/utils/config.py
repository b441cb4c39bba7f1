"""
Configuration constants for the fluoroscope calibration toolkit
"""

import os
import json
import hashlib
import logging
from dataclasses import dataclass, field, asdict, fields
from typing import Any, Dict, List, Optional, Tuple

try:
    from ..calibration_errors import ConfigError
except (ImportError, ValueError):
    from calibration_errors import ConfigError

logger = logging.getLogger(__name__)

VERSION = "1.0.0"  # artifacts are readable by any release with the same major.minor

# Robust estimation
STUDENT_T_NU = 4.0  # degrees of freedom, fixed hyperparameter
DEFAULT_SIGMA_PX = 0.06  # centroiding precision
INLIER_THRESHOLD = 3.0  # studentized Mahalanobis residual
MIN_INLIER_FRACTION = 0.5
JOINT_LIKELIHOOD = False  # per-observation sum of 2D t-densities

# Levenberg-Marquardt
LM_INITIAL_DAMPING = 1e-3
LM_DAMPING_UP = 10.0
LM_DAMPING_DOWN = 10.0
LM_MAX_DAMPING = 1e12
LM_MAX_ITERATIONS = 100
LM_RELATIVE_TOLERANCE = 1e-8
LM_STALL_TOLERANCE = 1e-6  # relative decrease counted as no progress
LM_STALL_STEPS = 3

# Network
MIN_POINTS_PER_EXPOSURE = 6
POINT_BEHIND_EPSILON = 1e-9  # mm

# Distortion learning
CV_FOLDS = 10
CANDIDATE_KS = [1, 2, 3, 5, 8, 12, 20, 35, 60, 100, 200]
SMOOTHING_GRID_SHAPE = (64, 64)
RESELECT_K = True

# Outer loop
MAX_OUTER_ITERATIONS = 50
LOOP_RELATIVE_TOLERANCE = 1e-6
DIVERGENCE_PATIENCE = 3
LOOP_NOISE_SCALE = 1.0  # combined-cost changes below this many sqrt(2 m) are sampling noise
DEFAULT_SEED = 20190601

# Synthetic rig (nominal values; the generator perturbs the truth away from them)
IMAGE_SIZE_PX = (2016, 2016)
NOMINAL_PRINCIPAL_DISTANCE_PX = 4000.0
SOURCE_DISTANCE_MM = 600.0

# Logging Configuration
LOG_LEVEL = "INFO"
LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

SCHEME_NAMES = ["none", "knn", "knn+iop", "knn+smoothing", "knn+iop+smoothing"]


# Environment Variable Overrides
def get_env_config():
    """Get configuration from environment variables (logging only)"""
    return {
        "LOG_LEVEL": os.getenv("FLUORO_LOG_LEVEL", LOG_LEVEL),
    }


@dataclass
class CalibrationConfig:
    """
    Flat key-value run configuration.

    Covers the calibration settings and the synthetic generator knobs so a single
    JSON file drives simulate, calibrate and evaluate.
    """
    scheme: str = "knn+iop+smoothing"
    nu: float = STUDENT_T_NU
    joint_likelihood: bool = JOINT_LIKELIHOOD
    sigma_default: float = DEFAULT_SIGMA_PX
    inlier_threshold: float = INLIER_THRESHOLD
    folds: int = CV_FOLDS
    candidate_ks: List[int] = field(default_factory=lambda: list(CANDIDATE_KS))
    grid_shape: Tuple[int, int] = SMOOTHING_GRID_SHAPE
    reselect_k: bool = RESELECT_K
    lm_initial_damping: float = LM_INITIAL_DAMPING
    lm_max_iterations: int = LM_MAX_ITERATIONS
    lm_tolerance: float = LM_RELATIVE_TOLERANCE
    max_iterations: int = MAX_OUTER_ITERATIONS
    tolerance: float = LOOP_RELATIVE_TOLERANCE
    divergence_patience: int = DIVERGENCE_PATIENCE
    seed: int = DEFAULT_SEED
    # synthetic generation
    n_beads: int = 503
    cube_edge_mm: float = 100.0
    faces: int = 4
    n_exposures: int = 150
    height_levels: int = 5
    height_step_mm: float = 30.0
    tilt_deg: float = 3.0
    second_azimuth_deg: float = 70.0
    min_separation_px: float = 6.0
    noise_sigma_px: float = DEFAULT_SIGMA_PX
    outlier_fraction: float = 0.01
    outlier_min_px: float = 5.0
    outlier_max_px: float = 20.0
    biplanar: bool = False
    distortion_max_px: float = 3.0
    initial_pose_noise_mm: float = 2.0
    initial_pose_noise_deg: float = 0.5
    initial_point_noise_mm: float = 0.2
    # paths
    observations_path: Optional[str] = None
    initial_path: Optional[str] = None
    output_dir: Optional[str] = None

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "CalibrationConfig":
        """Build a validated config; unknown keys are dropped with a warning."""
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            logger.warning(f"Ignoring unknown config keys: {', '.join(unknown)}")
        values = {key: value for key, value in data.items() if key in known}
        if "grid_shape" in values:
            values["grid_shape"] = tuple(values["grid_shape"])
        if "candidate_ks" in values:
            values["candidate_ks"] = list(values["candidate_ks"])
        config = cls(**values)
        config.validate()
        return config

    @classmethod
    def load(cls, path: str) -> "CalibrationConfig":
        try:
            with open(path, "r", encoding="utf-8") as handle:
                data = json.load(handle)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: config must be a flat JSON object")
        return cls.from_dict(data)

    def validate(self):
        """Raise ConfigError on the first invalid value."""
        checks = [
            (self.scheme in SCHEME_NAMES, "scheme", f"must be one of {SCHEME_NAMES}"),
            (self.nu > 0, "nu", "must be > 0"),
            (self.sigma_default > 0, "sigma_default", "must be > 0"),
            (self.inlier_threshold > 0, "inlier_threshold", "must be > 0"),
            (self.folds >= 2, "folds", "must be >= 2"),
            (len(self.candidate_ks) > 0 and all(int(k) >= 1 for k in self.candidate_ks),
             "candidate_ks", "must be a non-empty list of positive integers"),
            (len(self.grid_shape) == 2 and min(self.grid_shape) >= 2, "grid_shape", "must be at least 2x2"),
            (self.lm_initial_damping > 0, "lm_initial_damping", "must be > 0"),
            (self.lm_max_iterations >= 1, "lm_max_iterations", "must be >= 1"),
            (self.lm_tolerance > 0, "lm_tolerance", "must be > 0"),
            (self.max_iterations >= 1, "max_iterations", "must be >= 1"),
            (self.tolerance > 0, "tolerance", "must be > 0"),
            (self.divergence_patience >= 1, "divergence_patience", "must be >= 1"),
            (self.n_beads >= 3, "n_beads", "must be >= 3"),
            (self.cube_edge_mm > 0, "cube_edge_mm", "must be > 0"),
            (self.faces in (4, 6), "faces", "must be 4 or 6"),
            (self.n_exposures >= 2, "n_exposures", "must be >= 2"),
            (1 <= self.height_levels <= self.n_exposures, "height_levels", "must be in [1, n_exposures]"),
            (self.height_step_mm >= 0, "height_step_mm", "must be >= 0"),
            (0 <= self.tilt_deg < 45, "tilt_deg", "must be in [0, 45)"),
            (0 < self.second_azimuth_deg < 180, "second_azimuth_deg", "must be in (0, 180)"),
            (self.min_separation_px >= 0, "min_separation_px", "must be >= 0"),
            (self.noise_sigma_px >= 0, "noise_sigma_px", "must be >= 0"),
            (0 <= self.outlier_fraction < 0.5, "outlier_fraction", "must be in [0, 0.5)"),
            (0 <= self.outlier_min_px <= self.outlier_max_px, "outlier_min_px", "must be <= outlier_max_px"),
            (self.distortion_max_px >= 0, "distortion_max_px", "must be >= 0"),
            (self.initial_pose_noise_mm >= 0, "initial_pose_noise_mm", "must be >= 0"),
            (self.initial_pose_noise_deg >= 0, "initial_pose_noise_deg", "must be >= 0"),
            (self.initial_point_noise_mm >= 0, "initial_point_noise_mm", "must be >= 0"),
        ]
        for ok, key, message in checks:
            if not ok:
                raise ConfigError(f"config key '{key}' {message}")

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["grid_shape"] = list(self.grid_shape)
        return data

    def config_hash(self) -> str:
        """SHA-256 of the canonical JSON form (provenance)"""
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


# Common Utility Functions
def setup_logger(name: str, level: str = None) -> logging.Logger:
    """Setup standardized logger for the project"""
    logger = logging.getLogger(name)
    if not logger.handlers:
        handler = logging.StreamHandler()
        formatter = logging.Formatter(LOG_FORMAT)
        handler.setFormatter(formatter)
        logger.addHandler(handler)
    logger.setLevel(getattr(logging, (level or get_env_config()["LOG_LEVEL"]).upper()))
    return logger
