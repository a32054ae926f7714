import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from amodal_pursuit.geometry import chains_to_segments
from amodal_pursuit.sensing import (
    CameraConfig,
    LidarConfig,
    LidarStack,
    raycast_lidar,
    render_mask,
    stack_masks,
    visible_fraction,
)
from amodal_pursuit.world import (
    GeneratorParams,
    HumanAgent,
    Pose2D,
    RobotState,
    Velocity,
    WorldState,
    generate_scenario,
)
from oracles import ray_hits_circle, ray_hits_vertical_wall

ORIGIN = Pose2D(0, 0, 0)


def world(humans=(), chains=()):
    segs = chains_to_segments(list(chains)) if chains else np.zeros((0, 4))
    return WorldState(0, RobotState(ORIGIN, Velocity(), 0.3), tuple(humans), segs)


def beam0(scan):
    return scan.ranges[np.argmin(np.abs(scan.beam_angles))]


ODD = LidarConfig(beams=181)  # beam 90 lies exactly on the heading


def test_empty_world_all_max_range():
    scan = raycast_lidar(world(), ORIGIN)
    assert scan.ranges.shape == (180,)
    assert np.all(scan.ranges == 6.0)


def test_wall_fixture():
    scan = raycast_lidar(world(chains=[[(5, -5), (5, 5)]]), ORIGIN, LidarConfig(beams=181, max_range=10))
    assert abs(beam0(scan) - 5.0) < 1e-6
    assert abs(beam0(scan) - ray_hits_vertical_wall(0, 0, 0, 5, 5)) < 1e-6


def test_disc_fixture():
    h = HumanAgent(0, Pose2D(2, 0), body_radius=0.3)
    scan = raycast_lidar(world([h]), ORIGIN, ODD)
    assert abs(beam0(scan) - 1.7) < 1e-6


@settings(max_examples=50, deadline=None)
@given(cx=st.floats(0.8, 5), cy=st.floats(-3, 3), r=st.floats(0.1, 0.5),
       wx=st.floats(0.5, 5.5), th=st.floats(-1, 1))
def test_every_beam_matches_analytic_oracle(cx, cy, r, wx, th):
    pose = Pose2D(0, 0, th)
    if math.hypot(cx, cy) <= r + 0.05:
        return
    h = HumanAgent(0, Pose2D(cx, cy), body_radius=r)
    state = WorldState(0, RobotState(pose, Velocity(), 0.05), (h,), chains_to_segments([[(wx, -4), (wx, 4)]]))
    cfg = LidarConfig(beams=37, max_range=6.0)
    scan = raycast_lidar(state, pose, cfg)
    for a, got in zip(scan.beam_angles, scan.ranges):
        want = min(ray_hits_vertical_wall(0, 0, a + th, wx, 4), ray_hits_circle(0, 0, a + th, cx, cy, r), 6.0)
        assert abs(got - want) < 1e-6


@pytest.mark.parametrize("seed", range(6))
def test_ranges_bounded_by_clearance_and_max(seed):
    sc = generate_scenario(GeneratorParams(), seed)
    s = WorldState.from_scenario(sc)
    scan = raycast_lidar(s, s.robot.pose)
    assert np.all(scan.ranges <= 6.0)
    assert np.all(scan.ranges >= s.robot.radius)


def test_lidar_stack_pads_and_keeps_three():
    st_ = LidarStack()
    s = world()
    for k in range(5):
        scan = raycast_lidar(WorldState(k, s.robot, (), s.segments), ORIGIN)
        st_.push(scan)
        assert len(st_.scans) == 3
        assert [x.tick for x in st_.scans] == [k - 2, k - 1, k]
    assert st_.as_array().shape == (3, 180)


def test_visible_fraction_trivial_cases():
    h = HumanAgent(0, Pose2D(3, 0), body_radius=0.3)
    assert visible_fraction(h, ORIGIN, world([h])) == 1.0
    walled = world([h], [[(2, -3), (2, 3)]])
    assert visible_fraction(h, ORIGIN, walled) == 0.0
    behind = HumanAgent(0, Pose2D(-3, 0), body_radius=0.3)
    assert visible_fraction(behind, ORIGIN, world([behind])) == 0.0


@pytest.mark.parametrize("samples", [8, 16, 32, 33])
def test_half_plane_occluder(samples):
    h = HumanAgent(0, Pose2D(3, 0), body_radius=0.3)
    # wall covers every sight line with negative bearing
    s = world([h], [[(2, 0), (2, -4)]])
    f = visible_fraction(h, ORIGIN, s, samples=samples)
    assert abs(f - 0.5) <= 1.0 / samples


def test_visible_fraction_requires_samples():
    h = HumanAgent(0, Pose2D(3, 0))
    with pytest.raises(ValueError):
        visible_fraction(h, ORIGIN, world([h]), samples=4)


def test_sweeping_wall_is_monotone():
    h = HumanAgent(0, Pose2D(3, 0), body_radius=0.3)
    fr = []
    for top in np.linspace(-0.4, 0.4, 5):
        s = world([h], [[(2, -4), (2, top)]])
        fr.append(visible_fraction(h, ORIGIN, s, samples=64))
    assert all(a >= b for a, b in zip(fr, fr[1:]))
    assert fr[0] == 1.0 and fr[-1] == 0.0


def test_default_mask_resolution():
    h = HumanAgent(0, Pose2D(3, 0))
    m = render_mask(h, ORIGIN, world([h]))
    assert m.values.shape == (244, 244)
    assert set(np.unique(m.values)) <= {0, 1}


def test_occluded_mask_is_empty():
    h = HumanAgent(0, Pose2D(3, 0))
    m = render_mask(h, ORIGIN, world([h], [[(2, -3), (2, 3)]]))
    assert m.values.shape == (244, 244)
    assert m.pixel_count() == 0


def test_near_mask_larger_than_far():
    near = HumanAgent(0, Pose2D(1, 0))
    far = HumanAgent(0, Pose2D(4, 0))
    a = render_mask(near, ORIGIN, world([near])).pixel_count()
    b = render_mask(far, ORIGIN, world([far])).pixel_count()
    assert a > b > 0


def test_resolution_floor():
    h = HumanAgent(0, Pose2D(3, 0))
    with pytest.raises(ValueError):
        render_mask(h, ORIGIN, world([h]), resolution=8)


@pytest.mark.parametrize("seed", range(8))
def test_mask_empty_iff_not_visible_and_amodal_dominates(seed):
    sc = generate_scenario(GeneratorParams(n_humans=5), seed)
    s = WorldState.from_scenario(sc)
    cam = CameraConfig()
    for h in s.humans:
        modal = render_mask(h, s.robot.pose, s, resolution=61)
        amodal = render_mask(h, s.robot.pose, s, resolution=61, amodal=True)
        frac = visible_fraction(h, s.robot.pose, s, bearings=cam.column_bearings(61))
        assert (modal.pixel_count() == 0) == (frac == 0)
        assert amodal.pixel_count() >= modal.pixel_count()
        assert np.all(amodal.values >= modal.values)


def test_stack_masks_zero_pads_front():
    h = HumanAgent(0, Pose2D(2, 0))
    m = render_mask(h, ORIGIN, world([h]), resolution=16)
    out = stack_masks([m], 3, 16)
    assert out.shape == (3, 16, 16)
    assert out[0].sum() == 0 and out[1].sum() == 0
    assert np.array_equal(out[2], m.values)
