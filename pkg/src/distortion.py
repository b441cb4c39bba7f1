#!/usr/bin/env python3
"""
🌀 DISTORTION LEARNING
Nonparametric image correction fields learned from bundle adjustment residuals.

- KnnRegressor: KD-tree k-nearest-neighbour mean of inlier residual vectors
- SmoothedField: the regressor sampled on a rectilinear grid and read back
  by bilinear interpolation (clamped at the grid border)
- select_k / cross_validate: k-fold CV of the weighted L2 cost
  G = sum (r - g)^T C_r^-1 (r - g) over held-out samples
- DistortionField: the cumulative per-system correction (sum of the
  components learned in successive outer iterations)
"""

import json
import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.interpolate import RegularGridInterpolator
from scipy.spatial import cKDTree

try:
    from .calibration_errors import EmptyTrainingSet, KOutOfRange, DegenerateGrid, TooFewSamples
    from .geometry import ImagePoint
    from .utils.config import CV_FOLDS, CANDIDATE_KS, SMOOTHING_GRID_SHAPE, DEFAULT_SEED
except ImportError:
    from calibration_errors import EmptyTrainingSet, KOutOfRange, DegenerateGrid, TooFewSamples
    from geometry import ImagePoint
    from utils.config import CV_FOLDS, CANDIDATE_KS, SMOOTHING_GRID_SHAPE, DEFAULT_SEED

logger = logging.getLogger(__name__)

Bounds = Tuple[float, float, float, float]  # x_min, x_max, y_min, y_max


@dataclass(frozen=True, eq=False)
class ResidualSamples:
    """Image positions (n, 2) px, residual vectors (n, 2) px and their variances (n, 2) px^2"""
    positions: np.ndarray
    residuals: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        positions = np.asarray(self.positions, dtype=float).reshape(-1, 2)
        residuals = np.asarray(self.residuals, dtype=float).reshape(-1, 2)
        variances = np.asarray(self.variances, dtype=float).reshape(-1, 2)
        if not (positions.shape == residuals.shape == variances.shape):
            raise ValueError("positions, residuals and variances must all be (n, 2)")
        if np.any(variances <= 0):
            raise ValueError("Residual variances must be > 0")
        object.__setattr__(self, "positions", positions)
        object.__setattr__(self, "residuals", residuals)
        object.__setattr__(self, "variances", variances)

    def __len__(self) -> int:
        return self.positions.shape[0]

    def subset(self, index: np.ndarray) -> "ResidualSamples":
        return ResidualSamples(self.positions[index], self.residuals[index], self.variances[index])

    def bounds(self) -> Bounds:
        lo = self.positions.min(axis=0)
        hi = self.positions.max(axis=0)
        return (float(lo[0]), float(hi[0]), float(lo[1]), float(hi[1]))

    @classmethod
    def from_inliers(cls, positions: np.ndarray, residuals: np.ndarray, variances: np.ndarray,
                     inliers: np.ndarray) -> "ResidualSamples":
        """Only inlier-flagged observations are admitted to the regression"""
        mask = np.asarray(inliers, dtype=bool)
        return cls(np.asarray(positions)[mask], np.asarray(residuals)[mask], np.asarray(variances)[mask])


class KnnRegressor:
    """
    Unweighted mean of the k nearest residual vectors.

    Neighbours are ranked by (distance, sample index), so the neighbourhood
    is unique even when distances tie; the mean is summed in ascending
    sample-index order.
    """

    def __init__(self, samples: ResidualSamples, k: int):
        if len(samples) == 0:
            raise EmptyTrainingSet("Cannot fit a kNN regressor without samples")
        if int(k) != k or not 1 <= k <= len(samples):
            raise KOutOfRange(k, len(samples))
        self.samples = samples
        self.k = int(k)
        self.tree = cKDTree(samples.positions)

    def __len__(self) -> int:
        return len(self.samples)

    def neighbors(self, queries: np.ndarray, k: Optional[int] = None) -> np.ndarray:
        """(m, k) neighbour indices ordered by (distance, index)"""
        k = self.k if k is None else int(k)
        n = len(self.samples)
        q = np.asarray(queries, dtype=float).reshape(-1, 2)
        if k == n:
            d = np.sqrt(np.sum((q[:, None, :] - self.samples.positions[None, :, :]) ** 2, axis=2))
            idx = np.broadcast_to(np.arange(n), d.shape)
            return np.take_along_axis(idx, np.lexsort((idx, d), axis=1), axis=1)

        dist, idx = self.tree.query(q, k=list(range(1, k + 2)))
        out = idx[:, :k].copy()
        # re-rank rows whose k-th and (k+1)-th neighbours are equidistant, or whose
        # in-neighbourhood order could be affected by ties
        tied = (dist[:, k - 1] == dist[:, k]) | np.any(dist[:, 1:k] == dist[:, :k - 1], axis=1)
        for row in np.flatnonzero(tied):
            radius = dist[row, k - 1]
            candidates = np.asarray(self.tree.query_ball_point(q[row], radius * (1 + 1e-12) + 1e-300), dtype=int)
            d = np.sqrt(np.sum((self.samples.positions[candidates] - q[row]) ** 2, axis=1))
            out[row] = candidates[np.lexsort((candidates, d))][:k]
        return out

    def predict(self, queries: np.ndarray) -> np.ndarray:
        idx = np.sort(self.neighbors(queries), axis=1)
        values = self.samples.residuals[idx]
        return np.cumsum(values, axis=1)[:, -1, :] / self.k

    def to_dict(self) -> Dict[str, Any]:
        return {
            "type": "knn",
            "k": self.k,
            "samples": [[*p, *r, *v] for p, r, v in zip(self.samples.positions.tolist(),
                                                       self.samples.residuals.tolist(),
                                                       self.samples.variances.tolist())],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "KnnRegressor":
        rows = np.asarray(data["samples"], dtype=float).reshape(-1, 6)
        return cls(ResidualSamples(rows[:, 0:2], rows[:, 2:4], rows[:, 4:6]), int(data["k"]))


class SmoothedField:
    """Node corrections on a rectilinear grid, bilinear in between, clamped outside"""

    def __init__(self, x_nodes: np.ndarray, y_nodes: np.ndarray, values: np.ndarray, k: Optional[int] = None):
        x_nodes = np.asarray(x_nodes, dtype=float)
        y_nodes = np.asarray(y_nodes, dtype=float)
        values = np.asarray(values, dtype=float)
        if x_nodes.size < 2 or y_nodes.size < 2:
            raise DegenerateGrid(f"Grid needs at least 2x2 nodes, got {x_nodes.size}x{y_nodes.size}")
        if np.any(np.diff(x_nodes) <= 0) or np.any(np.diff(y_nodes) <= 0):
            raise DegenerateGrid("Grid nodes must be strictly increasing in both axes")
        if values.shape != (x_nodes.size, y_nodes.size, 2):
            raise DegenerateGrid(f"Node values must be {(x_nodes.size, y_nodes.size, 2)}, got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise DegenerateGrid("Node values must be finite")
        self.x_nodes = x_nodes
        self.y_nodes = y_nodes
        self.values = values
        self.k = k
        self._interpolator = RegularGridInterpolator((x_nodes, y_nodes), values, method="linear")

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.x_nodes.size, self.y_nodes.size)

    @property
    def bounds(self) -> Bounds:
        return (float(self.x_nodes[0]), float(self.x_nodes[-1]), float(self.y_nodes[0]), float(self.y_nodes[-1]))

    def same_grid(self, other: "SmoothedField") -> bool:
        return np.array_equal(self.x_nodes, other.x_nodes) and np.array_equal(self.y_nodes, other.y_nodes)

    def predict(self, queries: np.ndarray) -> np.ndarray:
        q = np.asarray(queries, dtype=float).reshape(-1, 2)
        clamped = np.column_stack([
            np.clip(q[:, 0], self.x_nodes[0], self.x_nodes[-1]),
            np.clip(q[:, 1], self.y_nodes[0], self.y_nodes[-1]),
        ])
        return self._interpolator(clamped)

    def to_dict(self) -> Dict[str, Any]:
        nx, ny = self.shape
        x_min, x_max, y_min, y_max = self.bounds
        ix, iy = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
        return {
            "type": "grid",
            "k": self.k,
            "grid": [nx, ny],
            "bounds_px": [x_min, x_max, y_min, y_max],
            "x_nodes": self.x_nodes.tolist(),
            "y_nodes": self.y_nodes.tolist(),
            "nodes": [[int(a), int(b), float(dx), float(dy)]
                      for a, b, (dx, dy) in zip(ix.ravel(), iy.ravel(), self.values.reshape(-1, 2))],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SmoothedField":
        nx, ny = (int(v) for v in data["grid"])
        values = np.zeros((nx, ny, 2))
        for ix, iy, dx, dy in data["nodes"]:
            values[int(ix), int(iy)] = (dx, dy)
        if "x_nodes" in data:
            x_nodes, y_nodes = data["x_nodes"], data["y_nodes"]
        else:
            x_min, x_max, y_min, y_max = data["bounds_px"]
            x_nodes, y_nodes = np.linspace(x_min, x_max, nx), np.linspace(y_min, y_max, ny)
        return cls(x_nodes, y_nodes, values, data.get("k"))


Component = Union[KnnRegressor, SmoothedField]


@dataclass(eq=False)
class DistortionField:
    """
    Per-system cumulative correction: the sum of the components learned in
    successive outer iterations. Empty means zero correction.
    """
    system_id: int
    components: List[Component] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.components)

    def add(self, component: Component) -> "DistortionField":
        return DistortionField(self.system_id, self.components + [component])

    def predict(self, queries: np.ndarray) -> np.ndarray:
        q = np.asarray(queries, dtype=float).reshape(-1, 2)
        total = np.zeros_like(q)
        for component in self.components:
            total = total + component.predict(q)
        return total

    @property
    def last_k(self) -> Optional[int]:
        return self.components[-1].k if self.components else None

    def consolidate(self) -> "DistortionField":
        """Merge grid components that share one grid into a single grid (the distributable product)"""
        merged: List[Component] = []
        for component in self.components:
            if isinstance(component, SmoothedField):
                for i, existing in enumerate(merged):
                    if isinstance(existing, SmoothedField) and existing.same_grid(component):
                        merged[i] = SmoothedField(existing.x_nodes, existing.y_nodes,
                                                  existing.values + component.values, component.k)
                        break
                else:
                    merged.append(component)
            else:
                merged.append(component)
        return DistortionField(self.system_id, merged)

    def to_dict(self) -> Dict[str, Any]:
        return {"system_id": self.system_id, "units": "px",
                "components": [component.to_dict() for component in self.components]}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "DistortionField":
        components = []
        for item in data.get("components", []):
            if item["type"] == "grid":
                components.append(SmoothedField.from_dict(item))
            elif item["type"] == "knn":
                components.append(KnnRegressor.from_dict(item))
            else:
                raise ValueError(f"Unknown distortion component type '{item['type']}'")
        return cls(int(data["system_id"]), components)

    def save(self, path: str):
        with open(path, "w", encoding="utf-8") as handle:
            json.dump(self.to_dict(), handle, indent=1)
            handle.write("\n")

    @classmethod
    def load(cls, path: str) -> "DistortionField":
        with open(path, "r", encoding="utf-8") as handle:
            return cls.from_dict(json.load(handle))


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------

def knn_fit(samples: ResidualSamples, k: int) -> KnnRegressor:
    return KnnRegressor(samples, k)


def grid_nodes(bounds: Bounds, grid_shape: Tuple[int, int]) -> Tuple[np.ndarray, np.ndarray]:
    nx, ny = (int(v) for v in grid_shape)
    x_min, x_max, y_min, y_max = bounds
    if nx < 2 or ny < 2:
        raise DegenerateGrid(f"Grid shape must be at least 2x2, got {nx}x{ny}")
    if not (x_max > x_min and y_max > y_min):
        raise DegenerateGrid(f"Grid bounds {bounds} have zero extent")
    return np.linspace(x_min, x_max, nx), np.linspace(y_min, y_max, ny)


def smooth(regressor: KnnRegressor, grid_shape: Tuple[int, int] = SMOOTHING_GRID_SHAPE,
           bounds: Optional[Bounds] = None) -> SmoothedField:
    """
    Resample a regressor onto a rectilinear grid.

    Node values are the kNN prediction at each node; bounds default to the
    samples' bounding box.
    """
    x_nodes, y_nodes = grid_nodes(bounds or regressor.samples.bounds(), grid_shape)
    X, Y = np.meshgrid(x_nodes, y_nodes, indexing="ij")
    values = regressor.predict(np.column_stack([X.ravel(), Y.ravel()])).reshape(x_nodes.size, y_nodes.size, 2)
    return SmoothedField(x_nodes, y_nodes, values, regressor.k)


def fit_component(samples: ResidualSamples, k: int, grid_shape: Optional[Tuple[int, int]] = None,
                  bounds: Optional[Bounds] = None) -> Component:
    regressor = knn_fit(samples, k)
    if grid_shape is None:
        return regressor
    return smooth(regressor, grid_shape, bounds)


def predict(field: Union[DistortionField, Component], query: Union[ImagePoint, np.ndarray]) -> np.ndarray:
    """Correction (dx, dy) px at one ImagePoint, or (m, 2) corrections for (m, 2) queries"""
    if isinstance(query, ImagePoint):
        return field.predict(query.as_array()[None, :])[0]
    return field.predict(np.asarray(query, dtype=float))


def cv_cost(field: Union[DistortionField, Component], heldout: ResidualSamples) -> float:
    """Weighted L2 cost G of a field on samples it was not fitted to"""
    if len(heldout) == 0:
        return 0.0
    diff = heldout.residuals - field.predict(heldout.positions)
    return float(np.sum(diff * diff / heldout.variances))


def field_rms(field: Union[DistortionField, Component], reference_fn: Callable[[np.ndarray], np.ndarray],
              points: np.ndarray) -> float:
    """RMS of the vector difference between a field and a reference at (m, 2) points"""
    diff = field.predict(points) - reference_fn(points)
    return float(np.sqrt(np.mean(np.sum(diff * diff, axis=1))))


# ---------------------------------------------------------------------------
# Cross-validation
# ---------------------------------------------------------------------------

@dataclass
class CrossValidation:
    """Mean held-out cost per candidate k (after clipping to the training size)"""
    ks: List[int]
    costs: np.ndarray
    fold_costs: np.ndarray

    @property
    def best_k(self) -> int:
        return self.ks[int(np.argmin(self.costs))]


def fold_assignment(samples: ResidualSamples, folds: int, seed: int) -> List[np.ndarray]:
    """
    Seeded folds over a canonical sample order, so the split does not depend
    on the order in which samples arrive.
    """
    canonical = np.lexsort((samples.residuals[:, 1], samples.residuals[:, 0],
                            samples.positions[:, 1], samples.positions[:, 0]))
    rng = np.random.default_rng(seed)
    return np.array_split(canonical[rng.permutation(len(samples))], folds)


def cross_validate(samples: ResidualSamples, candidate_ks: Sequence[int] = CANDIDATE_KS, folds: int = CV_FOLDS,
                   seed: int = DEFAULT_SEED, grid_shape: Optional[Tuple[int, int]] = None,
                   bounds: Optional[Bounds] = None) -> CrossValidation:
    """
    K-fold cross-validation of the kNN (or smoothed kNN) cost G.

    Candidates larger than the smallest training fold are clipped to it.

    Raises:
        TooFewSamples: fewer samples than folds
    """
    n = len(samples)
    if folds < 2 or n < folds:
        raise TooFewSamples(n, folds)
    if not candidate_ks:
        raise KOutOfRange(None, n)
    parts = fold_assignment(samples, folds, seed)
    min_train = n - max(len(part) for part in parts)
    ks: List[int] = []
    for k in candidate_ks:
        if int(k) < 1:
            raise KOutOfRange(k, n)
        clipped = min(int(k), min_train)
        if clipped not in ks:
            ks.append(clipped)
    k_max = max(ks)
    if grid_shape is not None and bounds is None:
        bounds = samples.bounds()

    fold_costs = np.zeros((folds, len(ks)))
    for f, test in enumerate(parts):
        train = np.sort(np.concatenate([part for g, part in enumerate(parts) if g != f]))
        regressor = KnnRegressor(samples.subset(train), k_max)
        held = samples.subset(test)
        if grid_shape is None:
            queries = held.positions
        else:
            x_nodes, y_nodes = grid_nodes(bounds, grid_shape)
            X, Y = np.meshgrid(x_nodes, y_nodes, indexing="ij")
            queries = np.column_stack([X.ravel(), Y.ravel()])
        # running neighbour sums give every candidate's prediction from one query
        sums = np.cumsum(regressor.samples.residuals[regressor.neighbors(queries, k_max)], axis=1)
        for c, k in enumerate(ks):
            prediction = sums[:, k - 1, :] / k
            if grid_shape is None:
                diff = held.residuals - prediction
            else:
                grid = SmoothedField(x_nodes, y_nodes, prediction.reshape(x_nodes.size, y_nodes.size, 2), k)
                diff = held.residuals - grid.predict(held.positions)
            fold_costs[f, c] = np.sum(diff * diff / held.variances)
    return CrossValidation(ks, fold_costs.mean(axis=0), fold_costs)


def select_k(samples: ResidualSamples, candidate_ks: Sequence[int] = CANDIDATE_KS, folds: int = CV_FOLDS,
             seed: int = DEFAULT_SEED, grid_shape: Optional[Tuple[int, int]] = None,
             bounds: Optional[Bounds] = None) -> int:
    """Candidate k with the minimum mean held-out G (first one on ties)"""
    table = cross_validate(samples, candidate_ks, folds, seed, grid_shape, bounds)
    k = table.best_k
    logger.debug(f"CV costs {dict(zip(table.ks, np.round(table.costs, 3)))} -> k = {k}")
    return k
