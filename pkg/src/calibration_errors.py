"""
Exception hierarchy for the fluoroscope calibration toolkit.

Every error raised on purpose by the library derives from CalibrationError so
callers (and the CLI exit-code mapping) can catch the whole family at once.
"""

from typing import Any, Optional


class CalibrationError(Exception):
    """Base class for all calibration errors"""


# Geometry

class GeometryError(CalibrationError):
    pass


class PointBehindCamera(GeometryError):
    def __init__(self, depth: float, message: Optional[str] = None):
        self.depth = depth
        super().__init__(message or f"Point is not in front of the camera (W = {depth:.6g} mm)")


class DegenerateRays(GeometryError):
    def __init__(self, angle: float):
        self.angle = angle
        super().__init__(f"Rays are nearly parallel (angle = {angle:.3g} rad)")


class DegenerateConfiguration(GeometryError):
    pass


# Estimation

class EstimationError(CalibrationError):
    pass


class SingularNormalMatrix(EstimationError):
    pass


class NoConvergence(EstimationError):
    def __init__(self, iterations: int, relative_change: float):
        self.iterations = iterations
        self.relative_change = relative_change
        super().__init__(
            f"No convergence after {iterations} iterations (last relative cost change {relative_change:.3g})"
        )


class AllOutliers(EstimationError):
    def __init__(self, inliers: int, total: int):
        self.inliers = inliers
        self.total = total
        super().__init__(f"Only {inliers} of {total} observations survived inlier gating")


# Network

class NetworkError(CalibrationError):
    pass


class InsufficientObservations(NetworkError):
    pass


class MissingPair(NetworkError):
    def __init__(self, exposure_id: Any, system_id: Any):
        self.exposure_id = exposure_id
        self.system_id = system_id
        super().__init__(f"Exposure {exposure_id} has no image from system {system_id}")


# Distortion

class DistortionError(CalibrationError):
    pass


class EmptyTrainingSet(DistortionError):
    pass


class KOutOfRange(DistortionError):
    def __init__(self, k: Any, n_samples: int):
        self.k = k
        self.n_samples = n_samples
        super().__init__(f"k = {k} outside [1, {n_samples}]")


class DegenerateGrid(DistortionError):
    pass


class TooFewSamples(DistortionError):
    def __init__(self, n_samples: int, folds: int):
        self.n_samples = n_samples
        self.folds = folds
        super().__init__(f"{n_samples} samples cannot be split into {folds} folds")


# Outer loop

class LoopError(CalibrationError):
    pass


class Diverged(LoopError):
    def __init__(self, iteration: int, cost: float):
        self.iteration = iteration
        self.cost = cost
        super().__init__(f"Combined cost kept increasing up to outer iteration {iteration} (cost {cost:.6g})")


# Synthetic generator

class GeneratorError(CalibrationError):
    pass


class InvalidSpec(GeneratorError):
    pass


# Evaluation

class EvaluationError(CalibrationError):
    pass


class NoCommonTargets(EvaluationError):
    pass


class NonPositiveBaseline(EvaluationError):
    def __init__(self, before: float):
        self.before = before
        super().__init__(f"Improvement baseline must be positive, got {before}")


# File formats

class FormatError(CalibrationError):
    pass


class MalformedRow(FormatError):
    def __init__(self, path: str, line: int, field: str, detail: str = ""):
        self.path = path
        self.line = line
        self.field = field
        message = f"{path}:{line}: bad value in field '{field}'"
        super().__init__(f"{message} ({detail})" if detail else message)


class DuplicateKey(FormatError):
    def __init__(self, path: str, line: int, key: Any):
        self.path = path
        self.line = line
        self.key = key
        super().__init__(f"{path}:{line}: duplicate observation key {key}")


class ArtifactVersionError(FormatError):
    pass


class ConfigError(FormatError):
    pass
