#!/usr/bin/env python3
"""
🧪 SYNTHETIC FLUOROSCOPY GENERATOR
Stands in for the physical calibration rig: a bead-cube phantom on a
turntable imaged by one or two rigidly mounted fluoroscopes, with injected
image-intensifier distortion (pincushion, S-swirl, local bumps), centroiding
noise and gross outliers. Every random draw flows from one seed.
"""

import math
import logging
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
from scipy.optimize import brentq
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

try:
    from .calibration_errors import InvalidSpec
    from .geometry import Intrinsics, Pose, Quaternion, ImagePoint, project_array
    from .network import Observation, InitialValues
    from .utils.config import (
        CalibrationConfig, IMAGE_SIZE_PX, NOMINAL_PRINCIPAL_DISTANCE_PX, SOURCE_DISTANCE_MM, DEFAULT_SIGMA_PX,
        DEFAULT_SEED, MIN_POINTS_PER_EXPOSURE
    )
except ImportError:
    from calibration_errors import InvalidSpec
    from geometry import Intrinsics, Pose, Quaternion, ImagePoint, project_array
    from network import Observation, InitialValues
    from utils.config import (
        CalibrationConfig, IMAGE_SIZE_PX, NOMINAL_PRINCIPAL_DISTANCE_PX, SOURCE_DISTANCE_MM, DEFAULT_SIGMA_PX,
        DEFAULT_SEED, MIN_POINTS_PER_EXPOSURE
    )

logger = logging.getLogger(__name__)

BUDGET_GRID = 121  # samples per axis when checking the displacement budget


@dataclass
class PhantomSpec:
    n_beads: int = 503
    edge_mm: float = 100.0
    faces: int = 4
    bead_diameter_mm: float = 3.5  # metadata only
    jitter: float = 0.2  # fraction of the grid cell

    def validate(self):
        if self.n_beads < 3:
            raise InvalidSpec(f"Phantom needs at least 3 beads, got {self.n_beads}")
        if self.faces not in (4, 6):
            raise InvalidSpec(f"Beads go on 4 (vertical) or 6 cube faces, got {self.faces}")
        if not self.edge_mm > 0:
            raise InvalidSpec("Cube edge must be > 0")
        if not 0 <= self.jitter < 0.5:
            raise InvalidSpec("Jitter must be in [0, 0.5) of the grid cell")

    @property
    def min_spacing_mm(self) -> float:
        cells = math.ceil(math.sqrt(math.ceil(self.n_beads / self.faces)))
        return (1.0 - 2.0 * self.jitter) * 0.5 * self.edge_mm / cells


@dataclass
class Bump:
    """Gaussian local warp: amplitude (px) * exp(-|p - center|^2 / (2 width^2))"""
    center: Tuple[float, float]
    amplitude: Tuple[float, float]
    width: float

    def displacement(self, points: np.ndarray) -> np.ndarray:
        d2 = np.sum((points - np.asarray(self.center)) ** 2, axis=1)
        return np.exp(-0.5 * d2 / (self.width * self.width))[:, None] * np.asarray(self.amplitude)[None, :]


@dataclass
class DistortionSpec:
    """
    Analytic intensifier distortion of one system, in px.

    Radial (pincushion): (k1 rho^2 + k2 rho^4) (p - center)
    Swirl (sigmoidal):   rotation of (p - center) by theta = swirl * rho
    Local:               sum of Gaussian bumps
    with rho = |p - center| / radius.
    """
    k1: float = 0.0
    k2: float = 0.0
    swirl: float = 0.0
    bumps: List[Bump] = field(default_factory=list)
    center: Optional[Tuple[float, float]] = None
    radius: Optional[float] = None
    max_displacement_px: float = 3.0

    def displacement(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=float).reshape(-1, 2)
        center = np.asarray(self.center if self.center is not None else (0.0, 0.0))
        radius = self.radius or 1.0
        d = p - center
        rho2 = np.sum(d * d, axis=1) / (radius * radius)
        out = (self.k1 * rho2 + self.k2 * rho2 * rho2)[:, None] * d
        if self.swirl:
            theta = self.swirl * np.sqrt(rho2)
            c, s = np.cos(theta), np.sin(theta)
            out = out + np.column_stack([c * d[:, 0] - s * d[:, 1] - d[:, 0], s * d[:, 0] + c * d[:, 1] - d[:, 1]])
        for bump in self.bumps:
            out = out + bump.displacement(p)
        return out

    def scaled(self, factor: float) -> "DistortionSpec":
        bumps = [Bump(b.center, (b.amplitude[0] * factor, b.amplitude[1] * factor), b.width) for b in self.bumps]
        return replace(self, k1=self.k1 * factor, k2=self.k2 * factor, swirl=self.swirl * factor, bumps=bumps)

    def max_displacement(self, image_size: Tuple[int, int]) -> float:
        """Largest displacement over the circular intensifier field of view"""
        width, height = image_size
        cx, cy = 0.5 * width, 0.5 * height
        fov = 0.5 * min(width, height)
        X, Y = np.meshgrid(np.linspace(cx - fov, cx + fov, BUDGET_GRID), np.linspace(cy - fov, cy + fov, BUDGET_GRID))
        grid = np.column_stack([X.ravel(), Y.ravel()])
        grid = grid[np.hypot(grid[:, 0] - cx, grid[:, 1] - cy) <= fov]
        return float(np.max(np.linalg.norm(self.displacement(grid), axis=1)))

    def fitted(self, image_size: Tuple[int, int]) -> "DistortionSpec":
        """
        Same shape, scaled down until its peak is within max_displacement_px.

        The swirl term is a rotation, so its peak is not linear in the scale
        factor; the factor is found by root finding and then checked.
        """
        budget = self.max_displacement_px
        if budget <= 0:
            return self.scaled(0.0)
        peak = self.max_displacement(image_size)
        if peak <= budget:
            return self

        def excess(factor: float) -> float:
            return self.scaled(factor).max_displacement(image_size) - budget

        factor = budget / peak
        if excess(factor) > 0:
            factor = brentq(excess, 0.0, factor, xtol=1e-12)
            while excess(factor) > 0:
                factor *= 1.0 - 1e-9
        return self.scaled(factor)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "k1": self.k1, "k2": self.k2, "swirl": self.swirl,
            "bumps": [{"center": list(b.center), "amplitude": list(b.amplitude), "width": b.width} for b in self.bumps],
            "center": None if self.center is None else list(self.center),
            "radius": self.radius,
            "max_displacement_px": self.max_displacement_px,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "DistortionSpec":
        bumps = [Bump(tuple(b["center"]), tuple(b["amplitude"]), float(b["width"])) for b in data.get("bumps", [])]
        center = tuple(data["center"]) if data.get("center") is not None else None
        return cls(float(data["k1"]), float(data["k2"]), float(data["swirl"]), bumps, center,
                   data.get("radius"), float(data.get("max_displacement_px", 3.0)))


@dataclass
class AcquisitionSpec:
    n_exposures: int = 150
    height_levels: int = 5
    height_step_mm: float = 30.0
    tilt_deg: float = 3.0
    noise_sigma_px: float = DEFAULT_SIGMA_PX
    outlier_fraction: float = 0.01
    outlier_range_px: Tuple[float, float] = (5.0, 20.0)
    min_separation_px: float = 6.0
    seed: int = DEFAULT_SEED

    def validate(self):
        if self.n_exposures < 2:
            raise InvalidSpec("Need at least 2 exposures")
        if not 1 <= self.height_levels <= self.n_exposures:
            raise InvalidSpec("height_levels must be in [1, n_exposures]")
        if self.noise_sigma_px < 0:
            raise InvalidSpec("Noise sigma must be >= 0")
        if not 0 <= self.outlier_fraction < 0.5:
            raise InvalidSpec(f"Outlier fraction must be in [0, 0.5), got {self.outlier_fraction}")
        low, high = self.outlier_range_px
        if not 0 <= low <= high:
            raise InvalidSpec(f"Bad outlier magnitude range {self.outlier_range_px}")

    @property
    def reported_sigma_px(self) -> float:
        """Sigma written to the observation file (noise-free runs keep the nominal precision)"""
        return self.noise_sigma_px if self.noise_sigma_px > 0 else DEFAULT_SIGMA_PX


@dataclass
class RigSpec:
    """Fluoroscopes fixed in the lab, aimed at the turntable axis"""
    image_size: Tuple[int, int] = IMAGE_SIZE_PX
    source_distance_mm: float = SOURCE_DISTANCE_MM
    nominal_c: float = NOMINAL_PRINCIPAL_DISTANCE_PX
    azimuths_deg: Tuple[float, ...] = (0.0, 70.0)
    # per system: principal point offset (px) and principal distance scale of the true IOP
    iop_offsets: Tuple[Tuple[float, float, float], ...] = ((6.0, -4.0, 1.005), (-5.0, 3.0, 0.996))

    def nominal_intrinsics(self) -> Intrinsics:
        return Intrinsics(0.5 * self.image_size[0], 0.5 * self.image_size[1], self.nominal_c)

    def true_intrinsics(self, index: int) -> Intrinsics:
        dx, dy, scale = self.iop_offsets[index]
        nominal = self.nominal_intrinsics()
        return Intrinsics(nominal.x_p + dx, nominal.y_p + dy, nominal.c * scale)

    def lab_pose(self, index: int) -> Pose:
        """Lab -> camera map of system index; the camera looks at the lab origin along -Z"""
        a = math.radians(self.azimuths_deg[index])
        z_axis = np.array([math.cos(a), math.sin(a), 0.0])
        x_axis = np.array([-math.sin(a), math.cos(a), 0.0])
        y_axis = np.cross(z_axis, x_axis)
        R = np.vstack([x_axis, y_axis, z_axis])
        return Pose(self.source_distance_mm * z_axis, Quaternion.from_matrix(R))


@dataclass
class GroundTruth:
    intrinsics: Dict[int, Intrinsics]
    poses: Dict[Tuple[int, int], Pose]
    points: Dict[int, np.ndarray]
    distortion: Dict[int, DistortionSpec]
    rop: Optional[Pose] = None
    noise_sigma_px: float = DEFAULT_SIGMA_PX
    outliers: List[Tuple[int, int, int]] = field(default_factory=list)
    image_size: Tuple[int, int] = IMAGE_SIZE_PX

    def to_dict(self) -> Dict[str, Any]:
        data = InitialValues(self.intrinsics, self.poses, self.points, self.rop).to_dict()
        data["distortion"] = [{"system_id": sid, **spec.to_dict()} for sid, spec in sorted(self.distortion.items())]
        data["noise_sigma_px"] = self.noise_sigma_px
        data["outliers"] = [list(key) for key in self.outliers]
        data["image_size_px"] = list(self.image_size)
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "GroundTruth":
        values = InitialValues.from_dict(data)
        distortion = {int(row["system_id"]): DistortionSpec.from_dict(row) for row in data.get("distortion", [])}
        return cls(values.intrinsics, values.poses, values.points or {}, distortion, values.rop,
                   float(data.get("noise_sigma_px", DEFAULT_SIGMA_PX)),
                   [tuple(int(v) for v in key) for key in data.get("outliers", [])],
                   tuple(data.get("image_size_px", IMAGE_SIZE_PX)))

    def field_function(self, system_id: int):
        return self.distortion[system_id].displacement


@dataclass
class Dataset:
    observations: List[Observation]
    truth: GroundTruth


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------

def default_distortion(index: int = 0, rig: Optional[RigSpec] = None,
                       max_displacement_px: float = 3.0) -> DistortionSpec:
    """Mixed pincushion + swirl + local distortion, scaled to fit the budget"""
    rig = rig or RigSpec()
    width, height = rig.image_size
    cx, cy = 0.5 * width, 0.5 * height
    sign = 1.0 if index == 0 else -1.0
    spec = DistortionSpec(
        k1=1.5e-3,
        k2=5e-4,
        swirl=3e-4 * sign,
        bumps=[
            Bump((cx + 300.0 * sign, cy - 200.0), (0.5, -0.3), 120.0),
            Bump((cx - 250.0, cy + 350.0 * sign), (-0.4, 0.4), 150.0),
        ],
        max_displacement_px=max_displacement_px,
    )
    return _anchor(spec, rig.true_intrinsics(index), rig).fitted(rig.image_size)


def _anchor(spec: DistortionSpec, iop: Intrinsics, rig: RigSpec) -> DistortionSpec:
    """Centre the radial terms on the true principal point; normalize by half the image width"""
    center = spec.center if spec.center is not None else (iop.x_p, iop.y_p)
    radius = spec.radius if spec.radius is not None else 0.5 * rig.image_size[0]
    return replace(spec, center=tuple(float(v) for v in center), radius=float(radius))


def true_field_at(distortion: DistortionSpec, query: Union[ImagePoint, np.ndarray]) -> np.ndarray:
    """Injected displacement (px) at one ImagePoint or at (m, 2) points"""
    if isinstance(query, ImagePoint):
        return distortion.displacement(query.as_array()[None, :])[0]
    return distortion.displacement(query)


def phantom_beads(phantom: PhantomSpec, rng: np.random.Generator) -> Dict[int, np.ndarray]:
    """
    Jittered-grid beads on the cube faces (4 vertical, or all 6), ids from 1.

    Raises:
        InvalidSpec: two beads closer than the minimum spacing
    """
    phantom.validate()
    half = 0.5 * phantom.edge_mm
    per_face = [phantom.n_beads // phantom.faces + (f < phantom.n_beads % phantom.faces) for f in range(phantom.faces)]
    cells = math.ceil(math.sqrt(max(per_face)))
    cell = phantom.edge_mm / cells
    beads = []
    for face, count in enumerate(per_face):
        chosen = np.sort(rng.choice(cells * cells, size=count, replace=False))
        u = -half + cell * (chosen % cells + 0.5) + rng.uniform(-phantom.jitter, phantom.jitter, count) * cell
        v = -half + cell * (chosen // cells + 0.5) + rng.uniform(-phantom.jitter, phantom.jitter, count) * cell
        w = np.full(count, half if face % 2 == 0 else -half)
        axis = face // 2  # 0: x = +-half, 1: y = +-half, 2: z = +-half
        if axis == 0:
            beads.append(np.column_stack([w, u, v]))
        elif axis == 1:
            beads.append(np.column_stack([u, w, v]))
        else:
            beads.append(np.column_stack([u, v, w]))
    positions = np.vstack(beads)
    spacing = cKDTree(positions).query(positions, k=2)[0][:, 1].min()
    if spacing < phantom.min_spacing_mm - 1e-9:
        raise InvalidSpec(f"Beads {spacing:.3f} mm apart, below the {phantom.min_spacing_mm:.3f} mm minimum")
    return {i + 1: positions[i] for i in range(positions.shape[0])}


def turntable_poses(acquisition: AcquisitionSpec) -> List[Pose]:
    """
    Phantom -> lab maps per exposure: rotation about the vertical axis with a
    small periodic tilt, stepped through height levels.
    """
    per_level = math.ceil(acquisition.n_exposures / acquisition.height_levels)
    levels = acquisition.height_levels
    offsets = (np.arange(levels) - 0.5 * (levels - 1)) * acquisition.height_step_mm
    poses = []
    for j in range(acquisition.n_exposures):
        level, step = divmod(j, per_level)
        theta = 2.0 * math.pi * (step + 0.5 * (level % 2)) / per_level
        tilt = math.radians(acquisition.tilt_deg) * math.sin(3.0 * theta + level)
        R = Rotation.from_euler("zx", [theta, tilt]).as_matrix()
        poses.append(Pose.from_rt(R, [0.0, 0.0, offsets[level]]))
    return poses


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------

def generate(phantom: Optional[PhantomSpec] = None,
             distortion: Optional[Union[DistortionSpec, Dict[int, DistortionSpec]]] = None,
             acquisition: Optional[AcquisitionSpec] = None, biplanar: bool = False,
             rig: Optional[RigSpec] = None) -> Dataset:
    """
    Simulate a calibration acquisition.

    Each observation is the exact projection of a bead plus the injected
    distortion at that image point plus Gaussian noise; outlier-flagged
    observations are additionally offset by a magnitude drawn uniformly from
    the outlier range, in a uniform direction.

    Raises:
        InvalidSpec: inconsistent specs, a distortion over its budget or an
            image left with too few beads
    """
    phantom = phantom or PhantomSpec()
    acquisition = acquisition or AcquisitionSpec()
    rig = rig or RigSpec()
    acquisition.validate()
    n_systems = 2 if biplanar else 1
    if len(rig.azimuths_deg) < n_systems or len(rig.iop_offsets) < n_systems:
        raise InvalidSpec(f"Rig describes fewer than {n_systems} systems")
    system_ids = list(range(1, n_systems + 1))

    specs: Dict[int, DistortionSpec] = {}
    for index, sid in enumerate(system_ids):
        if distortion is None:
            spec = default_distortion(index, rig)
        elif isinstance(distortion, DistortionSpec):
            spec = _anchor(distortion, rig.true_intrinsics(index), rig)
        else:
            spec = _anchor(distortion[sid], rig.true_intrinsics(index), rig)
        peak = spec.max_displacement(rig.image_size)
        if peak > spec.max_displacement_px + 1e-9:
            raise InvalidSpec(f"System {sid} distortion reaches {peak:.3f} px, over the "
                              f"{spec.max_displacement_px:.3f} px budget")
        specs[sid] = spec

    streams = np.random.SeedSequence(acquisition.seed).spawn(1 + n_systems * acquisition.n_exposures)
    beads = phantom_beads(phantom, np.random.default_rng(streams[0]))
    ids = np.array(sorted(beads))
    positions = np.array([beads[i] for i in ids])

    table = turntable_poses(acquisition)
    lab = [rig.lab_pose(index) for index in range(n_systems)]
    intrinsics = {sid: rig.true_intrinsics(index) for index, sid in enumerate(system_ids)}
    poses = {(sid, j + 1): table[j].compose(lab[index])
             for index, sid in enumerate(system_ids) for j in range(acquisition.n_exposures)}
    rop = lab[0].inverse().compose(lab[1]) if biplanar else None

    width, height = rig.image_size
    fov = 0.5 * min(width, height)
    observations: List[Observation] = []
    outliers: List[Tuple[int, int, int]] = []
    low, high = acquisition.outlier_range_px
    for index, sid in enumerate(system_ids):
        iop = intrinsics[sid].as_array()
        for j in range(acquisition.n_exposures):
            rng = np.random.default_rng(streams[1 + index * acquisition.n_exposures + j])
            pose = poses[(sid, j + 1)]
            camera = pose.transform(positions)
            front = camera[:, 2] < -1e-6
            ideal = np.full((len(ids), 2), np.nan)
            ideal[front] = project_array(camera[front], np.repeat(iop[None, :], int(front.sum()), axis=0),
                                         np.zeros((int(front.sum()), 2)))
            visible = front & (ideal[:, 0] >= 0) & (ideal[:, 0] <= width) & (ideal[:, 1] >= 0) & (ideal[:, 1] <= height)
            visible &= np.hypot(ideal[:, 0] - 0.5 * width, ideal[:, 1] - 0.5 * height) <= fov
            if acquisition.min_separation_px > 0 and visible.sum() > 1:
                where = np.flatnonzero(visible)
                for a, b in cKDTree(ideal[where]).query_pairs(acquisition.min_separation_px):
                    visible[where[a]] = visible[where[b]] = False

            # draws happen for every bead so streams do not depend on visibility
            noise = rng.normal(0.0, 1.0, size=(len(ids), 2)) * acquisition.noise_sigma_px
            flagged = rng.random(len(ids)) < acquisition.outlier_fraction
            angle = rng.uniform(0.0, 2.0 * math.pi, len(ids))
            magnitude = rng.uniform(low, high, len(ids))

            measured = ideal + specs[sid].displacement(np.nan_to_num(ideal)) + noise
            directions = np.column_stack([np.cos(angle), np.sin(angle)])
            measured[flagged] += magnitude[flagged, None] * directions[flagged]
            for b in np.flatnonzero(visible):
                observations.append(Observation(sid, j + 1, int(ids[b]), float(measured[b, 0]),
                                                float(measured[b, 1]), acquisition.reported_sigma_px))
                if flagged[b]:
                    outliers.append((sid, j + 1, int(ids[b])))

    observations = _enforce_visibility(observations)
    kept = {o.key for o in observations}
    outliers = [key for key in outliers if key in kept]
    truth = GroundTruth(intrinsics, poses, {int(i): p for i, p in zip(ids, positions)}, specs, rop,
                        acquisition.noise_sigma_px, outliers, tuple(rig.image_size))
    logger.info(f"🧪 Generated {len(observations)} observations over {n_systems} system(s) x "
                f"{acquisition.n_exposures} exposures ({len(outliers)} outliers)")
    return Dataset(observations, truth)


def _enforce_visibility(observations: List[Observation]) -> List[Observation]:
    """Drop beads seen in fewer than 2 exposures of a system; refuse images left too thin"""
    seen: Dict[Tuple[int, int], set] = {}
    for o in observations:
        seen.setdefault((o.system_id, o.target_id), set()).add(o.exposure_id)
    kept = [o for o in observations if len(seen[(o.system_id, o.target_id)]) >= 2]
    counts: Dict[Tuple[int, int], int] = {}
    for o in kept:
        counts[o.image_key] = counts.get(o.image_key, 0) + 1
    thin = [key for key, count in counts.items() if count < MIN_POINTS_PER_EXPOSURE]
    if thin:
        raise InvalidSpec(f"{len(thin)} image(s) keep fewer than {MIN_POINTS_PER_EXPOSURE} beads; "
                          f"reduce the height step or enlarge the field of view")
    return kept


def perturbed_initial_values(truth: GroundTruth, rig: Optional[RigSpec] = None, pose_noise_mm: float = 2.0,
                             pose_noise_deg: float = 0.5, point_noise_mm: float = 0.2,
                             seed: int = DEFAULT_SEED) -> InitialValues:
    """Nominal IOP and ground-truth EOP, points and ROP perturbed by Gaussian noise"""
    rig = rig or RigSpec()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    nominal = rig.nominal_intrinsics()

    def perturb(pose: Pose) -> Pose:
        delta = np.radians(pose_noise_deg) * rng.normal(size=3)
        return Pose(pose.translation + pose_noise_mm * rng.normal(size=3), pose.rotation.exp_update(delta))

    intrinsics = {sid: nominal for sid in sorted(truth.intrinsics)}
    poses = {key: perturb(truth.poses[key]) for key in sorted(truth.poses)}
    points = {tid: truth.points[tid] + point_noise_mm * rng.normal(size=3) for tid in sorted(truth.points)}
    rop = perturb(truth.rop) if truth.rop is not None else None
    return InitialValues(intrinsics, poses, points, rop)


def specs_from_config(config: CalibrationConfig) -> Tuple[PhantomSpec, Dict[str, Any], AcquisitionSpec, RigSpec]:
    """Generator specs for a flat run configuration"""
    phantom = PhantomSpec(n_beads=config.n_beads, edge_mm=config.cube_edge_mm, faces=config.faces)
    acquisition = AcquisitionSpec(
        n_exposures=config.n_exposures, height_levels=config.height_levels, height_step_mm=config.height_step_mm,
        tilt_deg=config.tilt_deg, noise_sigma_px=config.noise_sigma_px, outlier_fraction=config.outlier_fraction,
        outlier_range_px=(config.outlier_min_px, config.outlier_max_px), min_separation_px=config.min_separation_px,
        seed=config.seed,
    )
    rig = RigSpec(azimuths_deg=(0.0, config.second_azimuth_deg))
    n_systems = 2 if config.biplanar else 1
    distortion = {index + 1: default_distortion(index, rig, config.distortion_max_px) for index in range(n_systems)}
    return phantom, distortion, acquisition, rig


def generate_from_config(config: CalibrationConfig) -> Tuple[Dataset, InitialValues]:
    phantom, distortion, acquisition, rig = specs_from_config(config)
    dataset = generate(phantom, distortion, acquisition, config.biplanar, rig)
    initial = perturbed_initial_values(dataset.truth, rig, config.initial_pose_noise_mm,
                                       config.initial_pose_noise_deg, config.initial_point_noise_mm, config.seed)
    return dataset, initial
