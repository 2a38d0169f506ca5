import pytest
import numpy as np

from ml import env as world
from ml.env import (
    Action,
    ObstacleType,
    PlacementError,
    PlaneGeometry,
    WorldConfig,
    food_kinds,
)

def empty_world(episode_len=10):
    cfg = WorldConfig(grid_w=12, grid_h=12, n_food_items=0, n_obstacles=0, episode_len=episode_len)
    state = world.reset(cfg, seed=0)
    return world.place_agent(state, (5, 5), 0)

def test_default_reset_counts():
    """Default world holds 200 food items and 4 three-cell obstacles."""
    state = world.reset(WorldConfig(), seed=7)
    assert len(state.food_map) == 200
    assert len(state.obstacle_map) == 4 * 3
    assert state.agent_pos not in state.obstacle_map
    assert state.agent_pos not in state.food_map

def test_reset_is_seeded():
    a = world.reset(WorldConfig(), seed=3)
    b = world.reset(WorldConfig(), seed=3)
    assert a.food_map == b.food_map
    assert a.obstacle_map == b.obstacle_map
    assert (a.agent_pos, a.heading) == (b.agent_pos, b.heading)

def test_zero_food_items():
    state = world.reset(WorldConfig(n_food_items=0), seed=1)
    assert state.food_map == {}

def test_food_kinds_rewards():
    """Rewards lie in [-2, 2] and cancel out over all kinds."""
    kinds = food_kinds(20)
    rewards = [k.reward for k in kinds]
    assert len(kinds) == 20
    assert min(rewards) == -2.0 and max(rewards) == 2.0
    assert abs(sum(rewards)) < 1e-9
    assert sum(1 for k in kinds if k.health_class.value == "healthy") == 5
    assert sum(1 for k in kinds if k.health_class.value == "unhealthy") == 5

def test_config_rejects_uneven_food():
    with pytest.raises(ValueError):
        WorldConfig(n_food_items=201)

def test_reset_rejects_overfull_grid():
    cfg = WorldConfig(grid_w=4, grid_h=4, n_food_items=20, n_obstacles=0)
    with pytest.raises(PlacementError):
        world.reset(cfg, seed=0)

def test_eat_food_ahead():
    state = empty_world()
    state.food_map[(5, 4)] = 19
    state, reward, done = world.step(state, Action.MOVE_STRAIGHT)
    assert reward == 2.0
    assert state.agent_pos == (5, 4)
    assert (5, 4) not in state.food_map
    assert state.eaten == [19]
    assert not done

def test_wall_blocks_move():
    state = empty_world()
    state.obstacle_map[(5, 4)] = ObstacleType.WALL
    state, reward, _ = world.step(state, Action.MOVE_STRAIGHT)
    assert state.agent_pos == (5, 5)
    assert reward == 0.0

def test_jump_clears_low_barrier():
    state = empty_world()
    state.obstacle_map[(5, 4)] = ObstacleType.LOW_BARRIER
    blocked, _, _ = world.step(state, Action.MOVE_STRAIGHT)
    assert blocked.agent_pos == (5, 5)
    jumped, _, _ = world.step(state, Action.JUMP)
    assert jumped.agent_pos == (5, 3)

def test_crouch_passes_overhang():
    state = empty_world()
    state.obstacle_map[(5, 4)] = ObstacleType.OVERHANG
    blocked, _, _ = world.step(state, Action.MOVE_STRAIGHT)
    assert blocked.agent_pos == (5, 5)
    crouched, _, _ = world.step(state, Action.CROUCH)
    assert crouched.agent_pos == (5, 4)

def test_turns_and_move_back():
    state = empty_world()
    left, _, _ = world.step(state, Action.TURN_LEFT)
    assert left.heading == 7 and left.agent_pos == (5, 5)
    right, _, _ = world.step(state, Action.TURN_RIGHT)
    assert right.heading == 1
    back, _, _ = world.step(state, Action.MOVE_BACK)
    assert back.agent_pos == (5, 6)

def test_world_wraps_around():
    state = world.place_agent(empty_world(), (5, 0), 0)
    state, _, _ = world.step(state, Action.MOVE_STRAIGHT)
    assert state.agent_pos == (5, 11)

def test_episode_horizon():
    state = empty_world(episode_len=3)
    state.step_count = 2
    state, _, done = world.step(state, Action.TURN_LEFT)
    assert done
    with pytest.raises(RuntimeError):
        world.step(state, Action.TURN_LEFT)

def test_place_agent_rejects_wall():
    state = empty_world()
    state.obstacle_map[(2, 2)] = ObstacleType.WALL
    with pytest.raises(PlacementError):
        world.place_agent(state, (2, 2), 0)

def test_observe_empty_view():
    obs = world.observe(empty_world())
    assert obs.visible_objects == []
    assert obs.occupancy[..., 1:].sum() == 0
    assert obs.occupancy[..., 0].sum() > 0

def test_observe_one_channel_per_cell():
    state = world.reset(WorldConfig(), seed=11)
    obs = world.observe(state)
    per_cell = obs.occupancy.sum(axis=-1)
    assert set(np.unique(per_cell)) <= {0.0, 1.0}
    for obj in obs.visible_objects:
        cx, cy, w, h = obj.box
        assert 0.0 <= cx - w / 2 and cx + w / 2 <= 1.0
        assert 0.0 <= cy - h / 2 and cy + h / 2 <= 1.0

def test_object_behind_is_invisible():
    state = empty_world()
    state.food_map[(5, 6)] = 3
    assert world.observe(state).visible_objects == []

def test_inverse_distance_boxes():
    state = empty_world()
    state.food_map[(5, 4)] = 3
    state.food_map[(5, 3)] = 3
    objs = sorted(world.observe(state).visible_objects, key=lambda o: o.distance)
    assert [o.distance for o in objs] == [1, 2]
    assert objs[1].box[3] == pytest.approx(objs[0].box[3] / 2)
    assert objs[1].box[2] == pytest.approx(objs[0].box[2] / 2)

def test_wall_occludes_cells_behind_it():
    state = empty_world()
    state.obstacle_map[(5, 4)] = ObstacleType.WALL
    state.food_map[(5, 2)] = 3
    kinds = [o.kind for o in world.observe(state).visible_objects]
    assert kinds == [ObstacleType.WALL]

def test_geometry_inverse():
    geometry = PlaneGeometry(6)
    box = geometry.project(3, -1)
    assert geometry.depth_of(box) == pytest.approx(3.0)
    assert geometry.lateral_of(box) == pytest.approx(-1.0)
    assert geometry.is_near(geometry.project(1, 0))
    assert not geometry.is_near(geometry.project(6, 0))

def test_random_views_count():
    views = list(world.random_views(WorldConfig(), 25, seed=2, views_per_world=10))
    assert len(views) == 25

def open_world(heading):
    cfg = WorldConfig(grid_w=20, grid_h=20, n_food_items=0, n_obstacles=0)
    return world.place_agent(world.reset(cfg, seed=0), (10, 10), heading)

def visible_offsets(heading):
    """World offsets at which a lone food item shows up in the view."""
    seen = set()
    for dy in range(-8, 9):
        for dx in range(-8, 9):
            if (dx, dy) == (0, 0):
                continue
            state = open_world(heading)
            state.food_map[(10 + dx, 10 + dy)] = 19
            if world.observe(state).visible_objects:
                seen.add((dx, dy))
    return seen

def test_food_beside_a_diagonal_heading_is_seen():
    state = open_world(1)
    state.food_map[(12, 9)] = 19
    objs = world.observe(state).visible_objects
    assert len(objs) == 1
    assert objs[0].distance == 2
    assert objs[0].box[0] > 0.5

def test_visibility_under_all_headings():
    """Quarter turns map the view onto itself and diagonal cones are full."""
    cones = {h: visible_offsets(h) for h in range(8)}
    assert len(cones[0]) == 28
    for h in range(8):
        turned = {(-dy, dx) for dx, dy in cones[h]}
        assert turned == cones[(h + 2) % 8]
    north_east = cones[1]
    assert 20 <= len(north_east) <= 36
    assert {(dx + dy) % 2 for dx, dy in north_east} == {0, 1}
    assert {(-dy, -dx) for dx, dy in north_east} == north_east
    assert all(dx - dy > 0 for dx, dy in north_east)

def test_walls_occlude_on_diagonal_headings():
    state = open_world(1)
    state.obstacle_map[(11, 9)] = ObstacleType.WALL
    state.food_map[(13, 7)] = 3
    kinds = [o.kind for o in world.observe(state).visible_objects]
    assert kinds == [ObstacleType.WALL]

def random_rollout(seed, steps=70):
    state = world.reset(WorldConfig(), seed=seed)
    rng = np.random.default_rng(seed)
    frames = [world.observe(state)]
    done = False
    while not done:
        state, _, done = world.step(state, Action(int(rng.integers(6))))
        frames.append(world.observe(state))
    return state, frames

def test_cumulative_reward_matches_eaten_food():
    for seed in range(5):
        state, _ = random_rollout(seed)
        assert state.cum_reward == pytest.approx(sum(state.kinds[k].reward for k in state.eaten))

def test_projected_boxes_stay_on_the_plane():
    geometry = PlaneGeometry(6)
    for seed in range(5):
        _, frames = random_rollout(seed)
        for obs in frames:
            for obj in obs.visible_objects:
                cx, cy, w, h = obj.box
                assert 0.0 <= cx - w / 2 and cx + w / 2 <= 1.0
                assert 0.0 <= cy - h / 2 and cy + h / 2 <= 1.0
                assert round(geometry.depth_of(obj.box)) == obj.distance
                assert 1 <= obj.distance <= 6
