import math

import numpy as np
import pytest

from amodal_pursuit.baselines import (
    OccupancyGrid,
    astar,
    passive_policy,
    pure_pursuit,
    random_policy,
    shortest_path_policy,
    write_path_csv,
)
from amodal_pursuit.env import PassivePolicy, rollout
from amodal_pursuit.errors import PlanningError
from amodal_pursuit.geometry import chains_to_segments
from amodal_pursuit.policy import ActionSpace
from amodal_pursuit.world import GeneratorParams, Pose2D, RobotState, Velocity, generate_scenario
from oracles import dijkstra_grid_cost

BOUNDS = (0.0, 0.0, 6.0, 6.0)


def robot(x, y, th=0.0):
    return RobotState(Pose2D(x, y, th), Velocity(), 0.3)


def empty_grid():
    return OccupancyGrid.from_segments(np.zeros((0, 4)), BOUNDS)


def test_passive_always_zero():
    assert passive_policy() == Velocity(0.0, 0.0)
    assert passive_policy(object(), 3) == Velocity(0.0, 0.0)


def test_passive_rollout_static_pose():
    sc = generate_scenario(GeneratorParams(), 2)
    log = rollout(sc, PassivePolicy(), horizon=20, measure_until=100)
    assert len(log.ticks) >= 100
    assert len({tuple(t["robot"]) for t in log.ticks}) == 1


def test_random_policy_marginal_and_bounds():
    sp = ActionSpace()
    rng = np.random.default_rng(0)
    acts = [random_policy(rng) for _ in range(100_000)]
    index = {(a.v, a.w): i for i, a in enumerate(sp.actions)}
    freq = np.bincount([index[(a.v, a.w)] for a in acts], minlength=25) / len(acts)
    assert np.all(np.abs(freq - 1 / 25) <= 0.005)
    assert all(0 <= a.v <= 1 and -1 <= a.w <= 1 for a in acts[:1000])
    a = [random_policy(np.random.default_rng(7)) for _ in range(2)]
    assert a[0] == a[1]


def test_target_straight_ahead():
    cmd = shortest_path_policy(empty_grid(), robot(1.05, 3.05), (5.05, 3.05))
    assert cmd.v == pytest.approx(1.0)
    assert abs(cmd.w) < 1e-9


def test_target_behind():
    cmd = shortest_path_policy(empty_grid(), robot(3.05, 3.05, 0.0), (0.55, 3.05))
    assert abs(cmd.w) == 1.0 and cmd.v == pytest.approx(0.0)


def test_pure_pursuit_curvature_limits():
    cmd = pure_pursuit(robot(0, 0), [(1.0, 1.0)])
    assert abs(cmd.w) <= 1.0 and 0 < cmd.v <= 1.0
    alpha = math.pi / 4
    curv = 2 * math.sin(alpha) / math.sqrt(2)
    assert cmd.v == pytest.approx(1.0 / curv)


def test_walled_off_target_rotates():
    box = [[(4.0, 2.0), (5.5, 2.0), (5.5, 4.0), (4.0, 4.0), (4.0, 2.0)]]
    grid = OccupancyGrid.from_segments(chains_to_segments(box), BOUNDS)
    cmd, path = shortest_path_policy(grid, robot(1.05, 3.05), (4.75, 3.0), return_path=True)
    assert cmd == Velocity(0.0, 1.0) and path == []


def test_occupied_start_raises():
    grid = OccupancyGrid.from_segments(chains_to_segments([[(1.0, 0.0), (1.0, 6.0)]]), BOUNDS)
    with pytest.raises(PlanningError):
        shortest_path_policy(grid, robot(1.0, 3.0), (5, 3))


def test_segments_rasterise_to_occupied_cells():
    seg = chains_to_segments([[(0.5, 0.5), (5.3, 4.1)]])
    grid = OccupancyGrid.from_segments(seg, BOUNDS, inflation=0.0)
    for t in np.linspace(0, 1, 200):
        x, y = 0.5 + t * 4.8, 0.5 + t * 3.6
        assert grid.cells[grid.cell_of(x, y)]


@pytest.mark.parametrize("seed", range(50))
def test_astar_equals_dijkstra(seed):
    rng = np.random.default_rng(seed)
    occ = rng.random((14, 14)) < 0.25
    free = np.argwhere(~occ)
    s, g = map(tuple, free[rng.choice(len(free), 2, replace=False)])
    grid = OccupancyGrid(1.0, occ)
    path, cost = astar(grid, s, g)
    want = dijkstra_grid_cost(occ, s, g)
    if math.isinf(want):
        assert path is None
        return
    assert cost == pytest.approx(want, abs=1e-9)
    # the path itself is legal and costs what A* claims
    assert path[0] == s and path[-1] == g
    total = 0.0
    for (r0, c0), (r1, c1) in zip(path, path[1:]):
        assert not occ[r1, c1]
        assert max(abs(r1 - r0), abs(c1 - c0)) == 1
        total += math.hypot(r1 - r0, c1 - c0)
    assert total == pytest.approx(cost)


def test_path_csv(tmp_path):
    write_path_csv([(0, 0), (1.5, 2)], tmp_path / "p.csv")
    assert (tmp_path / "p.csv").read_text().splitlines()[2] == "1,1.5000,2.0000"
