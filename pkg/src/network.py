#!/usr/bin/env python3
"""
🧩 ADJUSTMENT NETWORK
Assembles the bundle adjustment problem from image observations: parameter
blocks (IOP per system, EOP per image, ROP for biplanar rigs, object points),
the observation graph, residuals, analytic Jacobians and the manifold
retraction the solver steps with.
"""

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
from scipy.spatial.transform import Rotation

try:
    from .calibration_errors import (
        NetworkError, InsufficientObservations, MissingPair, ConfigError
    )
    from .geometry import (
        Intrinsics, Pose, Quaternion, MIN_RAY_ANGLE, skew, quaternion_to_matrix_array,
        quaternion_exp_update_array, camera_coordinates, project_array, project_jacobian_array,
        back_project, intersect_ray_pairs, intersect_rays
    )
    from .utils.config import DEFAULT_SIGMA_PX, MIN_POINTS_PER_EXPOSURE
except ImportError:
    from calibration_errors import (
        NetworkError, InsufficientObservations, MissingPair, ConfigError
    )
    from geometry import (
        Intrinsics, Pose, Quaternion, MIN_RAY_ANGLE, skew, quaternion_to_matrix_array,
        quaternion_exp_update_array, camera_coordinates, project_array, project_jacobian_array,
        back_project, intersect_ray_pairs, intersect_rays
    )
    from utils.config import DEFAULT_SIGMA_PX, MIN_POINTS_PER_EXPOSURE

logger = logging.getLogger(__name__)

N_INNER_CONSTRAINTS = 7


class Scheme(Enum):
    """Calibration schemes; NONE is the uncalibrated baseline (BA only)"""
    NONE = "none"
    KNN = "knn"
    KNN_IOP = "knn+iop"
    KNN_SMOOTHING = "knn+smoothing"
    KNN_IOP_SMOOTHING = "knn+iop+smoothing"

    @property
    def estimate_iop(self) -> bool:
        return "iop" in self.value

    @property
    def smoothing(self) -> bool:
        return self.value.endswith("smoothing")

    @property
    def learns_distortion(self) -> bool:
        return self is not Scheme.NONE

    @property
    def label(self) -> str:
        return SCHEME_LABELS[self]

    @classmethod
    def parse(cls, name: str) -> "Scheme":
        """Accept either the config value ("knn+iop") or the report label ("kNN + IOP")"""
        key = str(name).strip().lower().replace(" ", "")
        for scheme in cls:
            if key in (scheme.value, scheme.label.lower().replace(" ", "")):
                return scheme
        raise ConfigError(f"Unknown calibration scheme '{name}'; expected one of {[s.value for s in cls]}")


SCHEME_LABELS = {
    Scheme.NONE: "No calibration",
    Scheme.KNN: "kNN",
    Scheme.KNN_IOP: "kNN + IOP",
    Scheme.KNN_SMOOTHING: "kNN + smoothing",
    Scheme.KNN_IOP_SMOOTHING: "kNN + IOP + smoothing",
}


@dataclass(frozen=True)
class Observation:
    """One bead centroid: target i seen at exposure j by system k"""
    system_id: int
    exposure_id: int
    target_id: int
    x: float
    y: float
    sigma: float = DEFAULT_SIGMA_PX
    dx: float = 0.0
    dy: float = 0.0

    def __post_init__(self):
        if not (np.isfinite(self.x) and np.isfinite(self.y)):
            raise ValueError(f"Observation {self.key} has non-finite image coordinates")
        if not (np.isfinite(self.sigma) and self.sigma > 0):
            raise ValueError(f"Observation {self.key} needs sigma > 0, got {self.sigma}")

    @property
    def key(self) -> Tuple[int, int, int]:
        return (self.system_id, self.exposure_id, self.target_id)

    @property
    def image_key(self) -> Tuple[int, int]:
        return (self.system_id, self.exposure_id)


@dataclass
class InitialValues:
    """Starting geometry for an adjustment; points are derived by intersection when absent"""
    intrinsics: Dict[int, Intrinsics]
    poses: Dict[Tuple[int, int], Pose]
    points: Optional[Dict[int, np.ndarray]] = None
    rop: Optional[Pose] = None

    def to_dict(self) -> Dict[str, Any]:
        data = {
            "units": {"length": "mm", "image": "px", "rotation": "unit quaternion wxyz"},
            "intrinsics": [
                {"system_id": k, "x_p": v.x_p, "y_p": v.y_p, "c": v.c}
                for k, v in sorted(self.intrinsics.items())
            ],
            "poses": [
                {"system_id": k[0], "exposure_id": k[1], "translation": v.translation.tolist(),
                 "rotation": v.rotation.as_array().tolist()}
                for k, v in sorted(self.poses.items())
            ],
        }
        if self.points is not None:
            data["points"] = [{"target_id": k, "position": np.asarray(v, dtype=float).tolist()}
                              for k, v in sorted(self.points.items())]
        if self.rop is not None:
            data["rop"] = {"translation": self.rop.translation.tolist(),
                           "rotation": self.rop.rotation.as_array().tolist()}
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "InitialValues":
        intrinsics = {int(row["system_id"]): Intrinsics(float(row["x_p"]), float(row["y_p"]), float(row["c"]))
                      for row in data["intrinsics"]}
        poses = {(int(row["system_id"]), int(row["exposure_id"])): _pose_from_row(row) for row in data["poses"]}
        points = None
        if data.get("points") is not None:
            points = {int(row["target_id"]): np.asarray(row["position"], dtype=float) for row in data["points"]}
        rop = _pose_from_row(data["rop"]) if data.get("rop") is not None else None
        return cls(intrinsics, poses, points, rop)


def _pose_from_row(row: Dict[str, Any]) -> Pose:
    return Pose(np.asarray(row["translation"], dtype=float), Quaternion.from_array(row["rotation"]))


@dataclass(eq=False)
class CalibrationState:
    """
    Array-backed parameter values.

    Rotations are wxyz unit quaternions, one per image (system, exposure);
    with a ROP attached the system-2 entries mirror pose1 ∘ ROP.
    """
    intrinsics: np.ndarray
    rotations: np.ndarray
    translations: np.ndarray
    points: np.ndarray
    rop_rotation: Optional[np.ndarray] = None
    rop_translation: Optional[np.ndarray] = None

    def copy(self) -> "CalibrationState":
        return CalibrationState(
            self.intrinsics.copy(), self.rotations.copy(), self.translations.copy(), self.points.copy(),
            None if self.rop_rotation is None else self.rop_rotation.copy(),
            None if self.rop_translation is None else self.rop_translation.copy(),
        )

    def pose(self, index: int) -> Pose:
        return Pose(self.translations[index], Quaternion.from_array(self.rotations[index]))

    @property
    def rop(self) -> Optional[Pose]:
        if self.rop_rotation is None:
            return None
        return Pose(self.rop_translation, Quaternion.from_array(self.rop_rotation))

    def to_dict(self) -> Dict[str, Any]:
        data = {
            "intrinsics": self.intrinsics.tolist(),
            "rotations": self.rotations.tolist(),
            "translations": self.translations.tolist(),
            "points": self.points.tolist(),
        }
        if self.rop_rotation is not None:
            data["rop_rotation"] = self.rop_rotation.tolist()
            data["rop_translation"] = self.rop_translation.tolist()
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "CalibrationState":
        def arr(key, width):
            return np.asarray(data[key], dtype=float).reshape(-1, width)
        rop_rotation = rop_translation = None
        if data.get("rop_rotation") is not None:
            rop_rotation = np.asarray(data["rop_rotation"], dtype=float).reshape(4)
            rop_translation = np.asarray(data["rop_translation"], dtype=float).reshape(3)
        return cls(arr("intrinsics", 3), arr("rotations", 4), arr("translations", 3), arr("points", 3),
                   rop_rotation, rop_translation)


@dataclass(frozen=True)
class ParameterBlock:
    name: str
    start: int
    size: int


@dataclass
class ParameterLayout:
    """Named blocks of the solver vector, camera blocks first and points last"""
    blocks: List[ParameterBlock] = field(default_factory=list)
    size: int = 0

    def add(self, name: str, size: int) -> int:
        start = self.size
        self.blocks.append(ParameterBlock(name, start, size))
        self.size += size
        return start

    def block(self, name: str) -> ParameterBlock:
        for block in self.blocks:
            if block.name == name:
                return block
        raise KeyError(name)


class Network:
    """
    Immutable adjustment problem.

    Observations are kept in canonical (system, exposure, target) order; all
    per-observation arrays (image points, sigmas, corrections, indices) share
    that order. Satisfies the EstimationProblem protocol of robust_estimation.
    """

    def __init__(self, observations: Sequence[Observation], system_ids: Sequence[int],
                 image_keys: Sequence[Tuple[int, int]], target_ids: Sequence[int], scheme: Scheme,
                 initial_state: CalibrationState, rop_active: bool = False,
                 corrections: Optional[np.ndarray] = None, datum_reference: Optional[np.ndarray] = None):
        self.observations: Tuple[Observation, ...] = tuple(observations)
        self.system_ids = list(system_ids)
        self.image_keys = list(image_keys)
        self.target_ids = list(target_ids)
        self.scheme = scheme
        self.rop_active = rop_active

        system_index = {sid: i for i, sid in enumerate(self.system_ids)}
        self.image_index = {key: i for i, key in enumerate(self.image_keys)}
        self.point_index = {tid: i for i, tid in enumerate(self.target_ids)}

        n = len(self.observations)
        self.obs_xy = np.array([(o.x, o.y) for o in self.observations], dtype=float).reshape(n, 2)
        self.sigma = np.array([o.sigma for o in self.observations], dtype=float)
        self.obs_system = np.array([system_index[o.system_id] for o in self.observations], dtype=int)
        self.obs_pose = np.array([self.image_index[o.image_key] for o in self.observations], dtype=int)
        self.observation_point_index = np.array([self.point_index[o.target_id] for o in self.observations],
                                                dtype=int)
        if corrections is None:
            corrections = np.array([(o.dx, o.dy) for o in self.observations], dtype=float).reshape(n, 2)
        self.corrections = np.array(corrections, dtype=float).reshape(n, 2)
        self.variances = np.repeat((self.sigma ** 2)[:, None], 2, axis=1)

        # system-2 images are derived from system 1 of the same exposure when the ROP is active
        self.pose_parent = np.full(len(self.image_keys), -1, dtype=int)
        if rop_active:
            first, second = self.system_ids[0], self.system_ids[1]
            for p, (sid, eid) in enumerate(self.image_keys):
                if sid == second:
                    self.pose_parent[p] = self.image_index[(first, eid)]
        self.derived = np.flatnonzero(self.pose_parent >= 0)
        self.free_poses = np.flatnonzero(self.pose_parent < 0)

        self.layout = ParameterLayout()
        self.iop_start = None
        if scheme.estimate_iop:
            self.iop_start = np.array([self.layout.add(f"iop:{sid}", 3) for sid in self.system_ids], dtype=int)
        self.pose_start = np.full(len(self.image_keys), -1, dtype=int)
        for p in self.free_poses:
            sid, eid = self.image_keys[p]
            self.pose_start[p] = self.layout.add(f"pose:{sid}:{eid}", 6)
        self.rop_start = self.layout.add("rop", 6) if rop_active else None
        self.n_camera_parameters = self.layout.size
        for tid in self.target_ids:
            self.layout.add(f"point:{tid}", 3)
        self.n_point_parameters = 3 * len(self.target_ids)

        expected = (3 * len(self.system_ids) * scheme.estimate_iop + 6 * len(self.free_poses)
                    + 6 * rop_active + self.n_point_parameters)
        if expected != self.layout.size or sum(b.size for b in self.layout.blocks) != self.layout.size:
            raise NetworkError(f"Parameter bookkeeping mismatch: {self.layout.size} != {expected}")

        self.initial_state = _sync_derived(initial_state.copy(), self.pose_parent)
        reference = self.initial_state.points if datum_reference is None else datum_reference
        self.datum_reference = np.array(reference, dtype=float)

        for array in (self.obs_xy, self.sigma, self.corrections, self.variances, self.datum_reference):
            array.setflags(write=False)

    # ------------------------------------------------------------------
    # Sizes

    def __len__(self) -> int:
        return len(self.observations)

    @property
    def n_parameters(self) -> int:
        return self.layout.size

    @property
    def estimate_iop(self) -> bool:
        return self.scheme.estimate_iop

    @property
    def exposure_ids(self) -> List[int]:
        return sorted({eid for _, eid in self.image_keys})

    def redundancy(self) -> int:
        return 2 * len(self.observations) - self.n_parameters + N_INNER_CONSTRAINTS

    def system_mask(self, system_id: int) -> np.ndarray:
        return self.obs_system == self.system_ids.index(system_id)

    # ------------------------------------------------------------------
    # Model

    def camera_frames(self, state: CalibrationState) -> Tuple[np.ndarray, np.ndarray]:
        """Effective rotation matrices and centers per image"""
        R = quaternion_to_matrix_array(state.rotations)
        T = np.array(state.translations, dtype=float)
        if self.rop_active and self.derived.size:
            parents = self.pose_parent[self.derived]
            R_rel = quaternion_to_matrix_array(state.rop_rotation[None, :])[0]
            T[self.derived] = T[parents] + np.einsum("nji,j->ni", R[parents], state.rop_translation)
            R[self.derived] = np.einsum("ij,njk->nik", R_rel, R[parents])
        return R, T

    def _camera_points(self, state: CalibrationState):
        R, T = self.camera_frames(state)
        P = state.points[self.observation_point_index]
        Xc = camera_coordinates(P, R[self.obs_pose], T[self.obs_pose])
        return R, T, P, Xc

    def predict(self, state: CalibrationState) -> np.ndarray:
        _, _, _, Xc = self._camera_points(state)
        return project_array(Xc, state.intrinsics[self.obs_system], self.corrections)

    def residuals(self, state: CalibrationState) -> np.ndarray:
        """l - f(theta), shape (n, 2)"""
        return self.obs_xy - self.predict(state)

    def linearize(self, state: CalibrationState) -> Tuple[np.ndarray, sp.csr_matrix]:
        """Residuals and the sparse Jacobian df/dtheta (rows x0, y0, x1, y1, ...)"""
        R, T, P, Xc = self._camera_points(state)
        iop = state.intrinsics[self.obs_system]
        residuals = self.obs_xy - project_array(Xc, iop, self.corrections)
        d_camera, d_iop = project_jacobian_array(Xc, iop)
        d_point = np.einsum("nij,njk->nik", d_camera, R[self.obs_pose])

        n = len(self.observations)
        obs = np.arange(n)
        entries = [(obs, self.n_camera_parameters + 3 * self.observation_point_index, d_point)]
        if self.iop_start is not None:
            entries.append((obs, self.iop_start[self.obs_system], d_iop))

        parent = self.pose_parent[self.obs_pose]
        free = parent < 0
        starts = self.pose_start[self.obs_pose[free]]
        entries.append((obs[free], starts, -d_point[free]))
        entries.append((obs[free], starts + 3, -np.einsum("nij,njk->nik", d_camera[free], skew(Xc[free]))))

        derived = ~free
        if np.any(derived):
            p1 = parent[derived]
            R_rel = quaternion_to_matrix_array(state.rop_rotation[None, :])[0]
            Xc1 = camera_coordinates(P[derived], R[p1], T[p1])
            dc = d_camera[derived]
            d_rel = np.einsum("nij,jk->nik", dc, R_rel)
            starts = self.pose_start[p1]
            rop = np.full(p1.shape[0], self.rop_start, dtype=int)
            entries.append((obs[derived], starts, -d_point[derived]))
            entries.append((obs[derived], starts + 3, -np.einsum("nij,njk->nik", d_rel, skew(Xc1))))
            entries.append((obs[derived], rop, -d_rel))
            entries.append((obs[derived], rop + 3, -np.einsum("nij,njk->nik", dc, skew(Xc[derived]))))

        rows, cols, vals = zip(*(_block_entries(*entry) for entry in entries))
        J = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(2 * n, self.n_parameters))
        return residuals, J

    def retract(self, state: CalibrationState, delta: np.ndarray) -> CalibrationState:
        """Apply a solver step: additive on vectors, left exp-update on rotations"""
        new = state.copy()
        if self.iop_start is not None:
            new.intrinsics = new.intrinsics + delta[self.iop_start[:, None] + np.arange(3)]
        idx = self.free_poses
        starts = self.pose_start[idx]
        new.translations[idx] += delta[starts[:, None] + np.arange(3)]
        new.rotations[idx] = quaternion_exp_update_array(new.rotations[idx], delta[starts[:, None] + 3 + np.arange(3)])
        if self.rop_start is not None:
            s = self.rop_start
            new.rop_translation = new.rop_translation + delta[s:s + 3]
            new.rop_rotation = quaternion_exp_update_array(new.rop_rotation[None, :], delta[None, s + 3:s + 6])[0]
        new.points = new.points + delta[self.n_camera_parameters:].reshape(-1, 3)
        return _sync_derived(new, self.pose_parent)

    # ------------------------------------------------------------------
    # Views

    def with_corrections(self, corrections: np.ndarray) -> "Network":
        return Network(self.observations, self.system_ids, self.image_keys, self.target_ids, self.scheme,
                       self.initial_state, self.rop_active, corrections, self.datum_reference)

    def with_initial_state(self, state: CalibrationState) -> "Network":
        return Network(self.observations, self.system_ids, self.image_keys, self.target_ids, self.scheme,
                       state, self.rop_active, self.corrections, self.datum_reference)

    def pose_of(self, state: CalibrationState, system_id: int, exposure_id: int) -> Pose:
        R, T = self.camera_frames(state)
        p = self.image_index[(system_id, exposure_id)]
        return Pose(T[p], Quaternion.from_matrix(R[p]))

    def intrinsics_of(self, state: CalibrationState, system_id: int) -> Intrinsics:
        return Intrinsics.from_array(state.intrinsics[self.system_ids.index(system_id)])

    def points_of(self, state: CalibrationState) -> Dict[int, np.ndarray]:
        return {tid: state.points[i].copy() for i, tid in enumerate(self.target_ids)}

    # ------------------------------------------------------------------
    # Serialization

    def to_dict(self) -> Dict[str, Any]:
        return {
            "scheme": self.scheme.value,
            "rop_active": self.rop_active,
            "system_ids": list(self.system_ids),
            "image_keys": [list(key) for key in self.image_keys],
            "target_ids": list(self.target_ids),
            "observations": [[o.system_id, o.exposure_id, o.target_id, o.x, o.y, o.sigma]
                             for o in self.observations],
            "corrections": self.corrections.tolist(),
            "initial_state": self.initial_state.to_dict(),
            "datum_reference": self.datum_reference.tolist(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Network":
        observations = [Observation(int(s), int(e), int(t), float(x), float(y), float(sigma))
                        for s, e, t, x, y, sigma in data["observations"]]
        return cls(observations, [int(s) for s in data["system_ids"]],
                   [(int(s), int(e)) for s, e in data["image_keys"]], [int(t) for t in data["target_ids"]],
                   Scheme(data["scheme"]), CalibrationState.from_dict(data["initial_state"]),
                   bool(data["rop_active"]), np.asarray(data["corrections"], dtype=float),
                   np.asarray(data["datum_reference"], dtype=float))


def _block_entries(obs: np.ndarray, starts: np.ndarray, values: np.ndarray):
    width = values.shape[2]
    rows = np.broadcast_to(2 * obs[:, None, None] + np.arange(2)[None, :, None], values.shape)
    cols = np.broadcast_to(starts[:, None, None] + np.arange(width)[None, None, :], values.shape)
    return rows.ravel(), cols.ravel(), values.ravel()


def _sync_derived(state: CalibrationState, pose_parent: np.ndarray) -> CalibrationState:
    derived = np.flatnonzero(pose_parent >= 0)
    if derived.size == 0 or state.rop_rotation is None:
        return state
    parents = pose_parent[derived]
    q1 = state.rotations[parents]
    rel = Rotation.from_quat(np.roll(state.rop_rotation, -1))
    q2 = (rel * Rotation.from_quat(q1[:, [1, 2, 3, 0]])).as_quat()[:, [3, 0, 1, 2]]
    q2[q2[:, 0] < 0] *= -1.0
    R1 = quaternion_to_matrix_array(q1)
    state.rotations[derived] = q2
    state.translations[derived] = state.translations[parents] + np.einsum("nji,j->ni", R1, state.rop_translation)
    return state


# ---------------------------------------------------------------------------
# Construction
# ---------------------------------------------------------------------------

def _check_unique(observations: Iterable[Observation]):
    seen = set()
    for o in observations:
        if o.key in seen:
            raise NetworkError(f"Observation (system {o.system_id}, exposure {o.exposure_id}, "
                               f"target {o.target_id}) appears twice")
        seen.add(o.key)


def filter_observations(observations: Sequence[Observation],
                        min_per_exposure: int = MIN_POINTS_PER_EXPOSURE) -> List[Observation]:
    """
    Prune until build_network's requirements hold: every target seen in at least
    two images and every image holding at least min_per_exposure targets.
    """
    kept = list(observations)
    while True:
        images = defaultdict(int)
        targets = defaultdict(set)
        for o in kept:
            images[o.image_key] += 1
            targets[o.target_id].add(o.image_key)
        pruned = [o for o in kept if images[o.image_key] >= min_per_exposure and len(targets[o.target_id]) >= 2]
        if len(pruned) == len(kept):
            break
        kept = pruned
    if len(kept) < len(observations):
        logger.warning(f"⚠️ Pruned {len(observations) - len(kept)} of {len(observations)} observations "
                       f"(targets seen once or images with < {min_per_exposure} points)")
    return kept


def initial_points(observations: Sequence[Observation], intrinsics: Dict[int, Intrinsics],
                   poses: Dict[Tuple[int, int], Pose]) -> Dict[int, np.ndarray]:
    """
    Object points as the mean of two-ray intersections.

    The rays of each target (in image order) are paired i <-> i + n//2 so
    that pairs span the widest baselines the ordering offers; targets whose
    pairs are all near-parallel fall back to a least-squares N-ray point.
    """
    by_target = defaultdict(list)
    for o in sorted(observations, key=lambda o: (o.target_id, o.system_id, o.exposure_id)):
        by_target[o.target_id].append(o)

    def rays(group):
        xy = np.array([(o.x, o.y) for o in group])
        corr = np.array([(o.dx, o.dy) for o in group])
        R = np.stack([poses[o.image_key].matrix for o in group])
        T = np.stack([poses[o.image_key].center for o in group])
        iop = np.stack([intrinsics[o.system_id].as_array() for o in group])
        return back_project(xy, R, T, iop, corr)

    points = {}
    min_sin = np.sin(MIN_RAY_ANGLE)
    for tid, group in by_target.items():
        origins, directions = rays(group)
        n = len(group)
        first = np.arange(n - n // 2)
        second = first + n // 2
        sin_angle = np.linalg.norm(np.cross(directions[first], directions[second]), axis=1)
        ok = sin_angle >= min_sin
        if np.any(ok):
            mids = intersect_ray_pairs(origins[first[ok]], directions[first[ok]],
                                       origins[second[ok]], directions[second[ok]])
            points[tid] = mids.mean(axis=0)
        else:
            points[tid] = intersect_rays(origins, directions)
    return points


def build_network(observations: Sequence[Observation], initial_values: InitialValues,
                  scheme: Scheme = Scheme.KNN_IOP_SMOOTHING,
                  min_per_exposure: int = MIN_POINTS_PER_EXPOSURE) -> Network:
    """
    Assemble the adjustment problem.

    With scheme.estimate_iop false the IOP are held at their initial values and
    the learned distortion field absorbs any IOP error.

    Raises:
        InsufficientObservations: no observations, a target seen in fewer than
            two images, or an image with fewer than min_per_exposure points
        NetworkError: duplicate observations or missing initial values
    """
    if isinstance(scheme, str):
        scheme = Scheme.parse(scheme)
    if not observations:
        raise InsufficientObservations("No observations to build a network from")
    _check_unique(observations)

    ordered = sorted(observations, key=lambda o: o.key)
    image_counts = defaultdict(int)
    target_images = defaultdict(set)
    for o in ordered:
        image_counts[o.image_key] += 1
        target_images[o.target_id].add(o.image_key)
    thin = sorted(key for key, count in image_counts.items() if count < min_per_exposure)
    if thin:
        raise InsufficientObservations(
            f"{len(thin)} image(s) have fewer than {min_per_exposure} points, e.g. system {thin[0][0]} "
            f"exposure {thin[0][1]} ({image_counts[thin[0]]} points)")
    single = sorted(tid for tid, images in target_images.items() if len(images) < 2)
    if single:
        raise InsufficientObservations(f"{len(single)} target(s) seen in only one image, e.g. target {single[0]}")
    if len(target_images) < 3:
        raise InsufficientObservations(f"Need at least 3 targets for the datum, got {len(target_images)}")

    system_ids = sorted({o.system_id for o in ordered})
    image_keys = sorted(image_counts)
    target_ids = sorted(target_images)

    missing_iop = [sid for sid in system_ids if sid not in initial_values.intrinsics]
    if missing_iop:
        raise NetworkError(f"No initial interior orientation for system(s) {missing_iop}")
    missing_pose = [key for key in image_keys if key not in initial_values.poses]
    if missing_pose:
        raise NetworkError(f"No initial pose for {len(missing_pose)} image(s), e.g. system "
                           f"{missing_pose[0][0]} exposure {missing_pose[0][1]}")

    points = dict(initial_values.points or {})
    absent = [tid for tid in target_ids if tid not in points]
    if absent:
        subset = [o for o in ordered if o.target_id in set(absent)]
        points.update(initial_points(subset, initial_values.intrinsics, initial_values.poses))
        logger.info(f"📍 Initialized {len(absent)} object point(s) by two-ray intersection")

    state = CalibrationState(
        intrinsics=np.array([initial_values.intrinsics[sid].as_array() for sid in system_ids]),
        rotations=np.array([initial_values.poses[key].rotation.canonical().as_array() for key in image_keys]),
        translations=np.array([initial_values.poses[key].translation for key in image_keys]),
        points=np.array([np.asarray(points[tid], dtype=float) for tid in target_ids]),
    )
    network = Network(ordered, system_ids, image_keys, target_ids, scheme, state)
    logger.info(f"🧩 Network built: {len(ordered)} observations, {len(system_ids)} system(s), "
                f"{len(image_keys)} images, {len(target_ids)} targets, {network.n_parameters} parameters, "
                f"redundancy {network.redundancy()}")
    return network


def attach_rop(network: Network, initial_rop: Optional[Pose] = None) -> Network:
    """
    Constrain a two-system network to a fixed relative orientation.

    System 1 is the lowest system id. Every system-2 pose becomes
    pose1_j ∘ ROP with one shared free ROP block; without an initial ROP the
    mean relative pose of the initial values is used.

    Raises:
        MissingPair: an exposure lacks the image of one system
        NetworkError: the network does not have exactly two systems
    """
    if network.rop_active:
        return network
    if len(network.system_ids) != 2:
        raise NetworkError(f"A relative orientation needs exactly two systems, got {network.system_ids}")
    first, second = network.system_ids
    images = set(network.image_keys)
    for eid in network.exposure_ids:
        for sid in (first, second):
            if (sid, eid) not in images:
                raise MissingPair(eid, sid)

    state = network.initial_state.copy()
    if initial_rop is None:
        initial_rop = _mean_relative_pose(network, state)
    state.rop_rotation = initial_rop.rotation.canonical().as_array()
    state.rop_translation = np.array(initial_rop.translation, dtype=float)

    constrained = Network(network.observations, network.system_ids, network.image_keys, network.target_ids,
                          network.scheme, state, True, network.corrections, network.datum_reference)
    logger.info(f"🔗 ROP attached: {len(network.exposure_ids)} exposure pairs, "
                f"{network.n_parameters - constrained.n_parameters} parameters removed")
    return constrained


def _mean_relative_pose(network: Network, state: CalibrationState) -> Pose:
    first, second = network.system_ids
    relatives = []
    for eid in network.exposure_ids:
        pose1 = state.pose(network.image_index[(first, eid)])
        pose2 = state.pose(network.image_index[(second, eid)])
        relatives.append(pose1.inverse().compose(pose2))
    rotations = Rotation.from_quat(np.array([np.roll(r.rotation.as_array(), -1) for r in relatives]))
    mean = np.roll(rotations.mean().as_quat(), 1)
    translation = np.mean([r.translation for r in relatives], axis=0)
    return Pose(translation, Quaternion.from_array(mean).canonical())


def redundancy(network: Network) -> int:
    """Observation equations - free parameters + inner constraints"""
    return network.redundancy()
