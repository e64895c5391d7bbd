import numpy as np
import pytest

from probesim import phantom
from probesim.phantom import (
    AIR,
    BONE,
    BONE_CORE,
    FAT,
    MUSCLE,
    analytic_vertebra_volume_mm3,
    generate_phantom,
    upper_surface_points,
)


def test_same_seed_bit_identical():
    a_ct, a_lb, a_marks = generate_phantom("torso", seed=9)
    b_ct, b_lb, b_marks = generate_phantom("torso", seed=9)
    assert a_ct.data.tobytes() == b_ct.data.tobytes()
    assert a_lb.data.tobytes() == b_lb.data.tobytes()
    for name in a_marks:
        np.testing.assert_array_equal(a_marks[name].position, b_marks[name].position)
        np.testing.assert_array_equal(a_marks[name].rotation, b_marks[name].rotation)


def test_different_seed_changes_ct_not_labels():
    a_ct, a_lb, _ = generate_phantom("torso", seed=1)
    b_ct, b_lb, _ = generate_phantom("torso", seed=2)
    assert a_ct.data.tobytes() != b_ct.data.tobytes()
    assert a_lb.data.tobytes() == b_lb.data.tobytes()


def test_unknown_kind():
    with pytest.raises(ValueError):
        generate_phantom("banana", seed=0)


def test_slab_has_two_tissues_plus_background():
    _, labels, _ = generate_phantom("slab", seed=3)
    assert set(np.unique(labels.data)) == {AIR, FAT, MUSCLE}


def test_torso_vertebra_volume_matches_analytic():
    _, labels, _ = generate_phantom("torso", seed=0)
    count = int(np.isin(labels.data, (BONE, BONE_CORE)).sum())
    voxel_mm3 = float(np.prod(labels.spacing_mm))
    expected = analytic_vertebra_volume_mm3() / voxel_mm3
    assert abs(count - expected) / expected < 0.10


def test_torso_landmarks_consistent():
    _, labels, marks = generate_phantom("torso", seed=0)
    assert set(marks) >= {"vertebra", "probe_goal", "drill_goal", "skin_entry"}
    goal = marks["drill_goal"]
    entry = marks["skin_entry"]
    # the drill goal sits the planned distance along the entry ray
    np.testing.assert_allclose(
        goal.position - phantom.SKIN_TO_GOAL_MM * goal.rotation[:, 2],
        entry.position,
        atol=1e-9,
    )
    # and inside the vertebra
    assert labels.sample_label(goal.position) in (BONE, BONE_CORE)
    # probe goal on the skin apex looking into the body
    np.testing.assert_allclose(marks["probe_goal"].rotation[:, 2], (0, 0, -1.0), atol=1e-12)


def test_ct_intensity_ranges():
    ct, labels, _ = generate_phantom("torso", seed=0)
    assert np.all(ct.data >= -1000.0) and np.all(ct.data <= 3000.0)
    bone = ct.data[labels.data == BONE]
    muscle = ct.data[labels.data == MUSCLE]
    assert bone.mean() > 800.0
    assert -20.0 < muscle.mean() < 120.0
    air = ct.data[labels.data == AIR]
    assert np.all(air == -1000.0)


def test_upper_surface_points_have_clear_top():
    _, labels, _ = generate_phantom("torso", seed=0)
    pts = upper_surface_points(labels)
    assert 200 < len(pts) < 5000
    up = pts + (0.0, 0.0, labels.spacing_mm[2])
    for p in up[::50]:
        assert labels.sample_label(p) not in (BONE, BONE_CORE)
    for p in pts[::50]:
        assert labels.sample_label(p) in (BONE, BONE_CORE)
