#!/usr/bin/env python3
"""
🧪 CALIBRATION TEST CASES
Small synthetic acquisitions shared by the network, loop and evaluation tests
"""

import sys
import os

import numpy as np

# Add src directory to path
sys.path.insert(0, os.path.join(os.path.dirname(os.path.dirname(__file__)), 'src'))

from geometry import Pose, Quaternion, Intrinsics, project
from network import Observation, InitialValues
from synthetic_generator import (
    PhantomSpec, AcquisitionSpec, RigSpec, default_distortion, generate, perturbed_initial_values
)

SMALL_PHANTOM = PhantomSpec(n_beads=40, faces=4)
SMALL_SEED = 11


def small_dataset(biplanar=False, distortion_px=0.0, noise_px=0.0, outlier_fraction=0.0, n_exposures=8,
                  seed=SMALL_SEED):
    """40-bead phantom on one turntable level; zero distortion, noise and outliers by default"""
    rig = RigSpec()
    n_systems = 2 if biplanar else 1
    distortion = {index + 1: default_distortion(index, rig, distortion_px) for index in range(n_systems)}
    acquisition = AcquisitionSpec(n_exposures=n_exposures, height_levels=1, noise_sigma_px=noise_px,
                                  outlier_fraction=outlier_fraction, seed=seed)
    return generate(SMALL_PHANTOM, distortion, acquisition, biplanar, rig), rig


def exact_initial(truth):
    return InitialValues(dict(truth.intrinsics), dict(truth.poses), dict(truth.points), truth.rop)


def perturbed_initial(truth, rig, seed=SMALL_SEED):
    """Perturbed poses (and ROP) with true IOP and exact points"""
    initial = perturbed_initial_values(truth, rig, pose_noise_mm=1.0, pose_noise_deg=0.3, point_noise_mm=0.0,
                                       seed=seed)
    return InitialValues(dict(truth.intrinsics), initial.poses, initial.points, initial.rop)


def two_view_case(n_points=10, n_exposures=2, drop=()):
    """
    Hand-built single-system network: n_points beads seen from n_exposures
    views. drop lists (exposure_id, target_id) observations to leave out.
    """
    rng = np.random.default_rng(3)
    iop = Intrinsics(1008.0, 1008.0, 4000.0)
    points = {i + 1: rng.uniform(-40.0, 40.0, 3) for i in range(n_points)}
    poses = {}
    for j in range(n_exposures):
        R = Quaternion.from_rotvec([0.0, np.deg2rad(25.0 * j), 0.0]).to_matrix()
        poses[(1, j + 1)] = Pose.from_rt(R, [0.0, 0.0, -600.0])
    observations = []
    for (sid, eid), pose in sorted(poses.items()):
        for tid, p in sorted(points.items()):
            if (eid, tid) in drop:
                continue
            xy = project(p, pose, iop)
            observations.append(Observation(sid, eid, tid, xy.x, xy.y))
    return observations, InitialValues({1: iop}, poses, points)
