#!/usr/bin/env python3
"""
🧪 NETWORK TESTS
Parameter bookkeeping, schemes, the biplanar relative orientation and the
zero-noise adjustment
"""

import sys
import os
import json
from types import SimpleNamespace

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

# Add src and tests directories to path
sys.path.insert(0, os.path.join(os.path.dirname(os.path.dirname(__file__)), 'src'))
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from network import (
    Scheme, Observation, InitialValues, Network, build_network, attach_rop, filter_observations, redundancy
)
from robust_estimation import StudentTModel, levenberg_marquardt, apply_inner_constraints
from synthetic_generator import perturbed_initial_values
from geometry import rigid_align, quaternion_exp_update_array
from calibration_errors import InsufficientObservations, NetworkError, MissingPair, ConfigError, DegenerateConfiguration
from calibration_test_cases import small_dataset, exact_initial, perturbed_initial, two_view_case


def test_scheme_flags_and_parsing():
    assert not Scheme.KNN.estimate_iop and not Scheme.KNN.smoothing
    assert Scheme.KNN_IOP.estimate_iop and not Scheme.KNN_IOP.smoothing
    assert Scheme.KNN_IOP_SMOOTHING.estimate_iop and Scheme.KNN_IOP_SMOOTHING.smoothing
    assert not Scheme.NONE.learns_distortion
    assert Scheme.parse("knn+iop") is Scheme.KNN_IOP
    assert Scheme.parse("kNN + IOP + smoothing") is Scheme.KNN_IOP_SMOOTHING
    assert Scheme.parse("No calibration") is Scheme.NONE
    with pytest.raises(ConfigError):
        Scheme.parse("bogus")


def test_observation_validation():
    with pytest.raises(ValueError):
        Observation(1, 1, 1, 0.0, 0.0, sigma=0.0)
    with pytest.raises(ValueError):
        Observation(1, 1, 1, float("nan"), 0.0)
    o = Observation(1, 3, 42, 1001.25, 998.5, 0.06)
    assert o.key == (1, 3, 42)
    assert o.image_key == (1, 3)
    assert (o.dx, o.dy) == (0.0, 0.0)


def test_redundancy_hand_count():
    observations, initial = two_view_case()
    network = build_network(observations, initial, Scheme.KNN_IOP)
    assert network.n_parameters == 2 * 6 + 10 * 3 + 3
    assert redundancy(network) == 40 - 45 + 7 == 2


def test_iop_blocks_follow_scheme():
    observations, initial = two_view_case()
    held = build_network(observations, initial, Scheme.KNN)
    free = build_network(observations, initial, Scheme.KNN_IOP)
    assert held.iop_start is None
    assert free.n_parameters == held.n_parameters + 3
    assert [block.name for block in free.layout.blocks][:1] == ["iop:1"]


def test_one_more_observation_adds_two_to_redundancy():
    fewer, initial = two_view_case(n_exposures=3, drop=[(3, 4)])
    more, _ = two_view_case(n_exposures=3)
    a = build_network(fewer, initial, Scheme.KNN)
    b = build_network(more, initial, Scheme.KNN)
    assert a.n_parameters == b.n_parameters
    assert b.redundancy() - a.redundancy() == 2


def test_build_network_rejects_bad_graphs():
    observations, initial = two_view_case()
    with pytest.raises(InsufficientObservations):
        build_network([], initial)
    with pytest.raises(InsufficientObservations):
        build_network([o for o in observations if not (o.target_id == 5 and o.exposure_id == 2)], initial)
    with pytest.raises(InsufficientObservations):
        build_network([o for o in observations if o.exposure_id == 1 or o.target_id <= 5], initial)
    with pytest.raises(NetworkError):
        build_network(observations + [observations[0]], initial)
    with pytest.raises(NetworkError):
        build_network(observations, InitialValues(initial.intrinsics, {}, initial.points))


def test_filter_observations_prunes_to_a_valid_graph():
    observations, initial = two_view_case(n_points=10, n_exposures=2)
    lonely = Observation(1, 1, 99, 1000.0, 1000.0)
    kept = filter_observations(observations + [lonely])
    assert lonely not in kept
    assert len(kept) == len(observations)
    thin = [o for o in observations if o.exposure_id == 1 or o.target_id <= 5]
    assert filter_observations(thin) == []


def test_observations_are_canonically_ordered():
    observations, initial = two_view_case()
    network = build_network(list(reversed(observations)), initial, Scheme.KNN)
    assert [o.key for o in network.observations] == sorted(o.key for o in observations)


def test_points_derived_by_intersection():
    observations, initial = two_view_case()
    network = build_network(observations, InitialValues(initial.intrinsics, initial.poses), Scheme.KNN)
    for tid, position in network.points_of(network.initial_state).items():
        assert_allclose(position, initial.points[tid], atol=1e-6)


def test_corrections_shift_residuals():
    observations, initial = two_view_case()
    network = build_network(observations, initial, Scheme.KNN)
    shift = np.tile([0.5, -0.25], (len(network), 1))
    before = network.residuals(network.initial_state)
    after = network.with_corrections(shift).residuals(network.initial_state)
    assert_allclose(before - after, shift, atol=1e-9)


def test_zero_noise_adjustment_recovers_geometry():
    dataset, rig = small_dataset()
    network = build_network(dataset.observations, perturbed_initial(dataset.truth, rig), Scheme.NONE)
    result = levenberg_marquardt(network, StudentTModel())
    rms = np.sqrt(np.mean(result.residual_set.residuals ** 2))
    assert result.converged
    assert rms < 1e-4
    estimated = network.points_of(result.state)
    ids = sorted(estimated)
    alignment = rigid_align(np.array([estimated[i] for i in ids]), np.array([dataset.truth.points[i] for i in ids]))
    assert alignment.rmse < 1e-4


def test_inner_constraints_keep_the_point_centroid():
    dataset, rig = small_dataset()
    noisy = perturbed_initial_values(dataset.truth, rig, pose_noise_mm=1.0, pose_noise_deg=0.3, point_noise_mm=0.5)
    initial = InitialValues(dict(dataset.truth.intrinsics), noisy.poses, noisy.points)
    network = build_network(dataset.observations, initial, Scheme.NONE)
    constraints = apply_inner_constraints(network)
    assert constraints.n_constraints == 7
    result = levenberg_marquardt(network, StudentTModel(), constraints=constraints)
    before = network.initial_state.points.mean(axis=0)
    after = result.state.points.mean(axis=0)
    assert_allclose(after, before, atol=1e-6)
    with pytest.raises(DegenerateConfiguration):
        apply_inner_constraints(SimpleNamespace(datum_reference=np.zeros((2, 3))))


def test_attach_rop_parameter_count():
    dataset, rig = small_dataset(biplanar=True)
    network = build_network(dataset.observations, exact_initial(dataset.truth), Scheme.KNN)
    constrained = attach_rop(network, dataset.truth.rop)
    n_exposures = len(network.exposure_ids)
    assert network.n_parameters - constrained.n_parameters == 6 * (n_exposures - 1)
    assert constrained.rop_active
    assert attach_rop(constrained) is constrained


def test_attach_rop_needs_pairs_and_two_systems():
    dataset, rig = small_dataset(biplanar=True)
    unpaired = [o for o in dataset.observations if o.image_key != (2, 3)]
    network = build_network(unpaired, exact_initial(dataset.truth), Scheme.KNN)
    with pytest.raises(MissingPair):
        attach_rop(network)
    observations, initial = two_view_case()
    with pytest.raises(NetworkError):
        attach_rop(build_network(observations, initial, Scheme.KNN))


def test_rop_drives_only_system_two():
    dataset, rig = small_dataset(biplanar=True)
    network = attach_rop(build_network(dataset.observations, exact_initial(dataset.truth), Scheme.KNN),
                         dataset.truth.rop)
    state = network.initial_state
    moved = state.copy()
    moved.rop_rotation = quaternion_exp_update_array(moved.rop_rotation[None, :], np.array([[0.0, 1e-3, 0.0]]))[0]
    change = np.abs(network.residuals(moved) - network.residuals(state)).max(axis=1)
    assert np.all(change[network.system_mask(1)] == 0.0)
    assert np.all(change[network.system_mask(2)] > 0.0)


def test_jacobian_matches_finite_differences_with_rop():
    dataset, rig = small_dataset(biplanar=True, n_exposures=3)
    network = attach_rop(build_network(dataset.observations, perturbed_initial(dataset.truth, rig),
                                       Scheme.KNN_IOP), dataset.truth.rop)
    state = network.initial_state
    _, J = network.linearize(state)
    J = J.toarray()
    h = 1e-6
    for column in range(network.n_parameters):
        step = np.zeros(network.n_parameters)
        step[column] = h
        plus = network.predict(network.retract(state, step)).ravel()
        minus = network.predict(network.retract(state, -step)).ravel()
        assert_allclose(J[:, column], (plus - minus) / (2 * h), rtol=1e-5, atol=1e-4)


def test_zero_noise_biplanar_recovers_rop():
    dataset, rig = small_dataset(biplanar=True)
    initial = perturbed_initial(dataset.truth, rig)
    network = attach_rop(build_network(dataset.observations, initial, Scheme.NONE), initial.rop)
    result = levenberg_marquardt(network, StudentTModel())
    rop = result.state.rop
    assert_allclose(rop.translation, dataset.truth.rop.translation, atol=1e-6)
    assert rop.rotation.is_close(dataset.truth.rop.rotation, 1e-8)


def test_network_serialization_is_exact():
    dataset, rig = small_dataset(biplanar=True, n_exposures=3)
    network = attach_rop(build_network(dataset.observations, perturbed_initial(dataset.truth, rig), Scheme.KNN_IOP))
    restored = Network.from_dict(json.loads(json.dumps(network.to_dict())))
    assert restored.observations == network.observations
    assert restored.image_keys == network.image_keys
    assert restored.n_parameters == network.n_parameters
    for name in ("intrinsics", "rotations", "translations", "points", "rop_rotation", "rop_translation"):
        assert_array_equal(getattr(restored.initial_state, name), getattr(network.initial_state, name))
    assert_array_equal(restored.residuals(restored.initial_state), network.residuals(network.initial_state))


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
