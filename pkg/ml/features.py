"""Knowledge-shaped features built from detections.

Two kinds: a presence-of-objects boolean vector over the tracked kinds, and a
k x k grid of summed object scores (the "important areas") kept together with
the two previous frames.
"""

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field

from ml.detector_sim import Detection, DetectorConfig, DetectorSim
from ml.env import (
    FoodKind,
    HealthClass,
    Observation,
    PlaneGeometry,
    WorldState,
    observe,
)
from ml.neural import ShapeMismatchError

HISTORY = 3
UNHEALTHY_SCORE = -15.0
HEALTHY_SCORE = 5.0


class RegionMask(str, Enum):
    FULL = "full"
    BOTTOM_HALF = "bottom_half"

    def admits(self, cy: float) -> bool:
        if self is RegionMask.BOTTOM_HALF:
            return cy >= 0.5
        return True

    def row_active(self, row: int, k: int) -> bool:
        if self is RegionMask.BOTTOM_HALF:
            return (row + 1) / k > 0.5
        return True


@dataclass(frozen=True)
class ObjectScoreTable:
    scores: Dict[int, float]
    tracked: Tuple[int, ...]

    def score(self, kind) -> float:
        if not isinstance(kind, int) or kind not in self.tracked:
            return 0.0
        return self.scores.get(kind, 0.0)

    @property
    def tracked_set(self) -> FrozenSet[int]:
        return frozenset(self.tracked)


def default_score_table(kinds: Sequence[FoodKind],
                        tracked: Optional[Iterable[int]] = None) -> ObjectScoreTable:
    scores = {}
    for kind in kinds:
        if kind.health_class is HealthClass.UNHEALTHY:
            scores[kind.id] = UNHEALTHY_SCORE
        elif kind.health_class is HealthClass.HEALTHY:
            scores[kind.id] = HEALTHY_SCORE
        else:
            scores[kind.id] = 0.0
    ids = tuple(sorted(tracked)) if tracked is not None else tuple(k.id for k in kinds)
    return ObjectScoreTable(scores=scores, tracked=ids)


def meta_score_table(kinds: Sequence[FoodKind],
                     confusion_kinds: Iterable[int] = ()) -> ObjectScoreTable:
    """Healthy and unhealthy kinds only, minus kinds that are easily confused."""
    excluded = set(confusion_kinds)
    tracked = [
        k.id for k in kinds
        if k.health_class is not HealthClass.NEUTRAL and k.id not in excluded
    ]
    return default_score_table(kinds, tracked)


class FeatureFilter(BaseModel):
    min_confidence: float = Field(0.25, ge=0.0, le=1.0)
    max_distance: float = math.inf
    region_mask: RegionMask = RegionMask.FULL

    @classmethod
    def for_geometry(cls, geometry: PlaneGeometry, **kwargs) -> "FeatureFilter":
        kwargs.setdefault("max_distance", 0.75 * geometry.max_visible_distance)
        return cls(**kwargs)

    @classmethod
    def passthrough(cls) -> "FeatureFilter":
        return cls(min_confidence=0.0)

    def keep(self, det: Detection, geometry: PlaneGeometry) -> bool:
        if det.confidence < self.min_confidence:
            return False
        if geometry.depth_of(det.box) > self.max_distance:
            return False
        return self.region_mask.admits(det.box[1])


@dataclass(frozen=True)
class AreaGrid:
    k: int
    scores: np.ndarray
    region_mask: RegionMask = RegionMask.FULL

    @classmethod
    def zeros(cls, k: int, region_mask: RegionMask = RegionMask.FULL) -> "AreaGrid":
        return cls(k=k, scores=np.zeros(k * k), region_mask=region_mask)


def _cell_index(v: float, k: int) -> int:
    # borders belong to the lower-index cell
    return min(max(int(math.ceil(v * k)) - 1, 0), k - 1)


def presence(dets: Sequence[Detection], table: ObjectScoreTable) -> np.ndarray:
    flags = np.zeros(len(table.tracked), dtype=bool)
    position = {kind: i for i, kind in enumerate(table.tracked)}
    for det in dets:
        if isinstance(det.kind, int) and det.kind in position:
            flags[position[det.kind]] = True
    return flags


def area_scores(dets: Sequence[Detection], k: int, table: ObjectScoreTable,
                filter: FeatureFilter, geometry: Optional[PlaneGeometry] = None) -> AreaGrid:
    """Sum of object scores per cell of a k x k split of the image plane."""
    if k < 1:
        raise ValueError("k must be >= 1")
    geometry = geometry or PlaneGeometry()
    scores = np.zeros(k * k)
    for det in dets:
        if not filter.keep(det, geometry):
            continue
        value = table.score(det.kind)
        if value == 0.0:
            continue
        row = _cell_index(det.box[1], k)
        col = _cell_index(det.box[0], k)
        scores[row * k + col] += value
    for row in range(k):
        if not filter.region_mask.row_active(row, k):
            scores[row * k:(row + 1) * k] = 0.0
    return AreaGrid(k=k, scores=scores, region_mask=filter.region_mask)


@dataclass(frozen=True)
class FeatureStack:
    k: int
    frames: Tuple[np.ndarray, ...]

    @classmethod
    def empty(cls, k: int) -> "FeatureStack":
        return cls(k=k, frames=tuple(np.zeros(k * k) for _ in range(HISTORY)))

    def flatten(self) -> np.ndarray:
        return np.concatenate(self.frames)

    def __len__(self) -> int:
        return HISTORY * self.k * self.k


def push_frame(stack: FeatureStack, grid: AreaGrid) -> FeatureStack:
    if grid.k != stack.k:
        raise ShapeMismatchError(f"grid k={grid.k} does not match stack k={stack.k}")
    return FeatureStack(k=stack.k, frames=(grid.scores.copy(),) + stack.frames[:-1])


@dataclass
class Percept:
    observation: Observation
    detections: List[Detection]
    presence: np.ndarray
    area: AreaGrid
    stack: FeatureStack
    meta_stack: FeatureStack


@dataclass
class Perception:
    """Observe, detect and featurize for one agent context.

    Holds two stacks: one over the injection table (fed to the policy network)
    and one over the filtered meta table (fed to the knowledge decider).
    """

    detector: DetectorSim
    k: int
    table: ObjectScoreTable
    meta_table: ObjectScoreTable
    filter: FeatureFilter
    meta_filter: FeatureFilter
    geometry: PlaneGeometry
    stack: FeatureStack = field(init=False)
    meta_stack: FeatureStack = field(init=False)

    def __post_init__(self) -> None:
        self.reset()

    def reset(self) -> None:
        self.stack = FeatureStack.empty(self.k)
        self.meta_stack = FeatureStack.empty(self.k)

    def perceive(self, state: WorldState) -> Percept:
        obs = observe(state, self.geometry)
        dets = self.detector.detect(obs.visible_objects)
        grid = area_scores(dets, self.k, self.table, self.filter, self.geometry)
        meta_grid = area_scores(dets, self.k, self.meta_table, self.meta_filter, self.geometry)
        self.stack = push_frame(self.stack, grid)
        self.meta_stack = push_frame(self.meta_stack, meta_grid)
        return Percept(
            observation=obs,
            detections=dets,
            presence=presence(dets, self.table),
            area=grid,
            stack=self.stack,
            meta_stack=self.meta_stack,
        )


def make_perception(detector_cfg: DetectorConfig, kinds: Sequence[FoodKind], k: int = 3,
                    seed: Optional[int] = None, geometry: Optional[PlaneGeometry] = None,
                    table: Optional[ObjectScoreTable] = None,
                    meta_table: Optional[ObjectScoreTable] = None,
                    region_mask: RegionMask = RegionMask.FULL) -> Perception:
    """Perception with the default injection and meta-feature tables and filters."""
    geometry = geometry or PlaneGeometry()
    if table is None:
        table = default_score_table(kinds)
    if meta_table is None:
        confused = [kind for pair in detector_cfg.confusion_pairs for kind in pair.kinds]
        meta_table = meta_score_table(kinds, confused)
    return Perception(
        detector=DetectorSim(detector_cfg, seed=seed),
        k=k,
        table=table,
        meta_table=meta_table,
        filter=FeatureFilter(min_confidence=0.0, region_mask=region_mask),
        meta_filter=FeatureFilter.for_geometry(geometry, region_mask=region_mask),
        geometry=geometry,
    )
