"""Food-gathering gridworld with a partial, egocentric view.

The world is a toroidal grid holding food items of ``n_food_kinds`` kinds and a
few straight obstacle segments. The agent sees a forward wedge of cells and a
list of visible objects projected onto a synthetic ``[0, 1]^2`` image plane.
"""

import math
from dataclasses import dataclass, field, replace
from enum import Enum, IntEnum
from typing import Dict, Iterator, List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, model_validator

Cell = Tuple[int, int]


class PlacementError(ValueError):
    """Raised when the grid cannot hold the requested objects."""


class Action(IntEnum):
    TURN_LEFT = 0
    TURN_RIGHT = 1
    CROUCH = 2
    JUMP = 3
    MOVE_STRAIGHT = 4
    MOVE_BACK = 5


N_ACTIONS = len(Action)


class ObstacleType(str, Enum):
    WALL = "wall"
    LOW_BARRIER = "low_barrier"
    OVERHANG = "overhang"


class HealthClass(str, Enum):
    HEALTHY = "healthy"
    UNHEALTHY = "unhealthy"
    NEUTRAL = "neutral"


# A detected or projected label: food kind id or obstacle type
Label = Union[int, ObstacleType]

# Compass headings in 45 degree steps, clockwise from north; y grows southwards
HEADINGS: Tuple[Cell, ...] = (
    (0, -1), (1, -1), (1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1),
)

OBSTACLE_CHANNELS = (ObstacleType.WALL, ObstacleType.LOW_BARRIER, ObstacleType.OVERHANG)


class WorldConfig(BaseModel):
    grid_w: int = 40
    grid_h: int = 40
    n_food_items: int = 200
    n_food_kinds: int = 20
    n_obstacles: int = 4
    obstacle_len: int = 3
    episode_len: int = 70
    fov_depth: int = 6
    fov_halfwidth: int = 2
    max_visible_distance: int = 6
    rng_seed: int = 0

    @model_validator(mode="after")
    def check_counts(self) -> "WorldConfig":
        if self.grid_w < 1 or self.grid_h < 1:
            raise ValueError("grid dimensions must be positive")
        if self.n_food_kinds < 1:
            raise ValueError("n_food_kinds must be >= 1")
        if self.n_food_items < 0 or self.n_obstacles < 0:
            raise ValueError("object counts must be non-negative")
        if self.n_food_items % self.n_food_kinds != 0:
            raise ValueError("n_food_items must be divisible by n_food_kinds")
        if self.episode_len <= 0:
            raise ValueError("episode_len must be > 0")
        if self.fov_depth < 1 or self.fov_halfwidth < 0:
            raise ValueError("fov_depth must be >= 1 and fov_halfwidth >= 0")
        if self.max_visible_distance < 1:
            raise ValueError("max_visible_distance must be >= 1")
        return self

    @property
    def n_channels(self) -> int:
        return 1 + len(OBSTACLE_CHANNELS) + self.n_food_kinds

    @property
    def occupancy_shape(self) -> Tuple[int, int, int]:
        return (self.fov_depth, 2 * self.fov_halfwidth + 1, self.n_channels)

    @property
    def occupancy_size(self) -> int:
        d, w, c = self.occupancy_shape
        return d * w * c


@dataclass(frozen=True)
class FoodKind:
    id: int
    reward: float
    health_class: HealthClass


def food_kinds(n_kinds: int = 20, n_labelled: int = 5) -> List[FoodKind]:
    """Evenly spaced rewards over [-2, +2] skipping 0; extremes labelled."""
    half = n_kinds // 2
    step = 2.0 / half if half else 0.0
    rewards = [-2.0 + i * step for i in range(half)]
    rewards += [-r for r in reversed(rewards)]
    if n_kinds % 2:
        rewards.insert(half, 0.0)
    kinds = []
    for i, r in enumerate(rewards):
        if i < n_labelled:
            cls = HealthClass.UNHEALTHY
        elif i >= n_kinds - n_labelled:
            cls = HealthClass.HEALTHY
        else:
            cls = HealthClass.NEUTRAL
        kinds.append(FoodKind(id=i, reward=round(r, 10), health_class=cls))
    return kinds


@dataclass(frozen=True)
class PlaneGeometry:
    """Maps agent-frame cells to boxes on the synthetic image plane.

    ``cy = 1 - (d - 0.5) / D`` and ``h = h0 / d`` so the nearest row sits at the
    bottom of the image; ``cx = 0.5 + lateral_scale * j / d``.
    """

    max_visible_distance: int = 6
    lateral_scale: float = 0.3
    width_fill: float = 0.8

    @property
    def h0(self) -> float:
        return 0.9 / self.max_visible_distance

    def project(self, depth: float, lateral: float) -> Tuple[float, float, float, float]:
        d = float(depth)
        cx = 0.5 + self.lateral_scale * lateral / d
        cy = 1.0 - (d - 0.5) / self.max_visible_distance
        w = self.width_fill * self.lateral_scale / d
        h = self.h0 / d
        return (cx, cy, w, h)

    def depth_of(self, box: Tuple[float, float, float, float]) -> float:
        return self.max_visible_distance * (1.0 - box[1]) + 0.5

    def lateral_of(self, box: Tuple[float, float, float, float]) -> float:
        return (box[0] - 0.5) * self.depth_of(box) / self.lateral_scale

    def is_near(self, box: Tuple[float, float, float, float]) -> bool:
        return box[1] >= 0.5


@dataclass
class WorldState:
    config: WorldConfig
    kinds: List[FoodKind]
    agent_pos: Cell
    heading: int
    food_map: Dict[Cell, int]
    obstacle_map: Dict[Cell, ObstacleType]
    step_count: int = 0
    cum_reward: float = 0.0
    eaten: List[int] = field(default_factory=list)

    @property
    def done(self) -> bool:
        return self.step_count >= self.config.episode_len

    def copy(self) -> "WorldState":
        return replace(
            self,
            food_map=dict(self.food_map),
            obstacle_map=dict(self.obstacle_map),
            eaten=list(self.eaten),
        )


@dataclass(frozen=True)
class ProjectedObject:
    kind: Label
    box: Tuple[float, float, float, float]
    distance: int


@dataclass
class Observation:
    occupancy: np.ndarray
    visible_objects: List[ProjectedObject]


def _wrap(config: WorldConfig, x: int, y: int) -> Cell:
    return (x % config.grid_w, y % config.grid_h)


def reset(config: WorldConfig, seed: Optional[int] = None) -> WorldState:
    """Place obstacles, food and the agent uniformly at random."""
    rng = np.random.default_rng(config.rng_seed if seed is None else seed)
    n_cells = config.grid_w * config.grid_h
    needed = config.n_obstacles * config.obstacle_len + config.n_food_items + 1
    if needed > n_cells:
        raise PlacementError(
            f"grid {config.grid_w}x{config.grid_h} cannot hold {needed} occupied cells"
        )

    obstacle_map: Dict[Cell, ObstacleType] = {}
    types = list(OBSTACLE_CHANNELS)
    for i in range(config.n_obstacles):
        kind = types[i % len(types)]
        for _ in range(1000):
            x0 = int(rng.integers(config.grid_w))
            y0 = int(rng.integers(config.grid_h))
            dx, dy = ((1, 0), (0, 1))[int(rng.integers(2))]
            cells = [_wrap(config, x0 + dx * t, y0 + dy * t) for t in range(config.obstacle_len)]
            if len(set(cells)) == len(cells) and not any(c in obstacle_map for c in cells):
                for c in cells:
                    obstacle_map[c] = kind
                break
        else:
            raise PlacementError(f"could not place obstacle {i}")

    free = [
        (x, y)
        for y in range(config.grid_h)
        for x in range(config.grid_w)
        if (x, y) not in obstacle_map
    ]
    order = rng.permutation(len(free))
    per_kind = config.n_food_items // config.n_food_kinds
    food_map: Dict[Cell, int] = {}
    for slot, idx in enumerate(order[: config.n_food_items]):
        food_map[free[int(idx)]] = slot // per_kind
    agent_pos = free[int(order[config.n_food_items])]
    heading = int(rng.integers(len(HEADINGS)))

    return WorldState(
        config=config,
        kinds=food_kinds(config.n_food_kinds),
        agent_pos=agent_pos,
        heading=heading,
        food_map=food_map,
        obstacle_map=obstacle_map,
    )


def place_agent(state: WorldState, pos: Cell, heading: int) -> WorldState:
    """Return a copy of ``state`` with the agent moved to ``pos``."""
    if state.obstacle_map.get(pos) in (ObstacleType.WALL, ObstacleType.LOW_BARRIER):
        raise PlacementError(f"cell {pos} is not standable")
    new = state.copy()
    new.agent_pos = pos
    new.heading = heading % len(HEADINGS)
    return new


def _can_stand(state: WorldState, cell: Cell, crouching: bool = False) -> bool:
    obstacle = state.obstacle_map.get(cell)
    if obstacle is None:
        return True
    return crouching and obstacle is ObstacleType.OVERHANG


def step(state: WorldState, action: Action) -> Tuple[WorldState, float, bool]:
    """Apply one action. Illegal moves are no-ops with reward 0."""
    if state.done:
        raise RuntimeError("step called on a finished episode")
    new = state.copy()
    cfg = state.config
    fx, fy = HEADINGS[state.heading]
    x, y = state.agent_pos
    target: Optional[Cell] = None

    action = Action(action)
    if action is Action.TURN_LEFT:
        new.heading = (state.heading - 1) % len(HEADINGS)
    elif action is Action.TURN_RIGHT:
        new.heading = (state.heading + 1) % len(HEADINGS)
    elif action is Action.MOVE_STRAIGHT:
        cell = _wrap(cfg, x + fx, y + fy)
        if _can_stand(state, cell):
            target = cell
    elif action is Action.MOVE_BACK:
        cell = _wrap(cfg, x - fx, y - fy)
        if _can_stand(state, cell):
            target = cell
    elif action is Action.CROUCH:
        cell = _wrap(cfg, x + fx, y + fy)
        if _can_stand(state, cell, crouching=True):
            target = cell
    elif action is Action.JUMP:
        first = _wrap(cfg, x + fx, y + fy)
        landing = _wrap(cfg, x + 2 * fx, y + 2 * fy)
        if state.obstacle_map.get(first) in (None, ObstacleType.LOW_BARRIER) and _can_stand(
            state, landing
        ):
            target = landing

    reward = 0.0
    if target is not None:
        new.agent_pos = target
        kind = new.food_map.pop(target, None)
        if kind is not None:
            reward = state.kinds[kind].reward
            new.eaten.append(kind)

    new.step_count += 1
    new.cum_reward += reward
    return new, reward, new.done


def _round_half_away(v: float) -> int:
    return int(math.copysign(math.floor(abs(v) + 0.5), v))


def _frame_axes(heading: int) -> Tuple[Tuple[float, float], Tuple[float, float]]:
    """Unit forward and right vectors for a heading."""
    fx, fy = HEADINGS[heading]
    rx, ry = HEADINGS[(heading + 2) % len(HEADINGS)]
    nf, nr = math.hypot(fx, fy), math.hypot(rx, ry)
    return (fx / nf, fy / nf), (rx / nr, ry / nr)


def _frame_offset(heading: int, depth: int, lateral: int) -> Cell:
    """World offset of the cell nearest the agent-frame point (depth, lateral)."""
    (fx, fy), (rx, ry) = _frame_axes(heading)
    return (_round_half_away(depth * fx + lateral * rx), _round_half_away(depth * fy + lateral * ry))


def _to_frame(heading: int, dx: int, dy: int) -> Tuple[float, float]:
    (fx, fy), (rx, ry) = _frame_axes(heading)
    return dx * fx + dy * fy, dx * rx + dy * ry


def _sight_line(dx: int, dy: int) -> List[Cell]:
    """World offsets strictly between the agent and (dx, dy)."""
    n = max(abs(dx), abs(dy))
    cells = []
    for i in range(1, n):
        t = i / n
        cells.append((_round_half_away(dx * t), _round_half_away(dy * t)))
    return [c for c in cells if c != (0, 0) and c != (dx, dy)]


def _occluded(state: WorldState, dx: int, dy: int) -> bool:
    x, y = state.agent_pos
    return any(
        state.obstacle_map.get(_wrap(state.config, x + ox, y + oy)) is ObstacleType.WALL
        for ox, oy in _sight_line(dx, dy)
    )


def in_wedge(config: WorldConfig, depth: int, lateral: int) -> bool:
    return 1 <= depth <= config.fov_depth and abs(lateral) <= min(config.fov_halfwidth, depth)


def _label_at(state: WorldState, cell: Cell) -> Optional[Label]:
    obstacle = state.obstacle_map.get(cell)
    if obstacle is not None:
        return obstacle
    return state.food_map.get(cell)


def _plane_point(depth: int, lateral: int, exact_depth: float, exact_lateral: float,
                 max_visible_distance: int) -> Tuple[float, float]:
    # stay inside the slot so depth_of rounds back to it and the box stays on the plane
    d = min(max(exact_depth, depth - 0.45, 1.0), depth + 0.45, float(max_visible_distance))
    j = min(max(exact_lateral, lateral - 0.45, -d), lateral + 0.45, d)
    return d, j


def observe(state: WorldState, geometry: Optional[PlaneGeometry] = None) -> Observation:
    """Egocentric occupancy of the forward wedge plus projected visible objects.

    Occupancy slots sample the world cell nearest each agent-frame point. Visible
    objects come from every world cell whose rotated offset falls in the wedge, so
    diagonal headings see the same cone as axis-aligned ones.
    """
    cfg = state.config
    geometry = geometry or PlaneGeometry(cfg.max_visible_distance)
    occupancy = np.zeros(cfg.occupancy_shape, dtype=np.float64)
    h = cfg.fov_halfwidth
    x, y = state.agent_pos

    for depth in range(1, cfg.fov_depth + 1):
        for lateral in range(-h, h + 1):
            if not in_wedge(cfg, depth, lateral):
                continue
            dx, dy = _frame_offset(state.heading, depth, lateral)
            if _occluded(state, dx, dy):
                continue
            label = _label_at(state, _wrap(cfg, x + dx, y + dy))
            if label is None:
                channel = 0
            elif isinstance(label, ObstacleType):
                channel = 1 + OBSTACLE_CHANNELS.index(label)
            else:
                channel = 1 + len(OBSTACLE_CHANNELS) + label
            occupancy[depth - 1, lateral + h, channel] = 1.0

    reach = int(math.ceil(math.hypot(cfg.fov_depth + 0.5, h + 0.5)))
    found = []
    for dy in range(-reach, reach + 1):
        for dx in range(-reach, reach + 1):
            exact_depth, exact_lateral = _to_frame(state.heading, dx, dy)
            depth, lateral = _round_half_away(exact_depth), _round_half_away(exact_lateral)
            if not in_wedge(cfg, depth, lateral) or depth > cfg.max_visible_distance:
                continue
            label = _label_at(state, _wrap(cfg, x + dx, y + dy))
            if label is None or _occluded(state, dx, dy):
                continue
            d, j = _plane_point(depth, lateral, exact_depth, exact_lateral, cfg.max_visible_distance)
            found.append(((depth, lateral, exact_depth, exact_lateral),
                          ProjectedObject(kind=label, box=geometry.project(d, j), distance=depth)))
    found.sort(key=lambda item: item[0])
    return Observation(occupancy=occupancy, visible_objects=[obj for _, obj in found])


def random_views(config: WorldConfig, n_frames: int, seed: int = 0,
                 views_per_world: int = 100) -> Iterator[List[ProjectedObject]]:
    """Truth lists from fresh worlds seen from uniformly random free poses."""
    rng = np.random.default_rng(seed)
    produced = 0
    while produced < n_frames:
        world = reset(config, seed=int(rng.integers(2**63 - 1)))
        free = [
            (x, y)
            for y in range(config.grid_h)
            for x in range(config.grid_w)
            if (x, y) not in world.obstacle_map and (x, y) not in world.food_map
        ]
        for _ in range(min(views_per_world, n_frames - produced)):
            pos = free[int(rng.integers(len(free)))]
            posed = place_agent(world, pos, int(rng.integers(len(HEADINGS))))
            yield observe(posed).visible_objects
            produced += 1
