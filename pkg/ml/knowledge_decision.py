"""Knowledge-based deciders.

Two interchangeable deciders share this module: a rule-driven planner that
keeps a queue of planned actions and rechecks it each step, and a
meta-feature learner (dueling double DQN over the filtered important-area
stack).
"""

import logging
import math
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field

from ml.detector_sim import Detection
from ml.env import N_ACTIONS, Action, FoodKind, HealthClass, Label, ObstacleType, PlaneGeometry
from ml.features import FeatureStack, ObjectScoreTable, default_score_table
from ml.neural import ShapeMismatchError
from ml.rl_core import (
    DQNConfig,
    DQNLearner,
    DuelingMode,
    ExplorationPolicy,
    TargetMode,
    Transition,
)

logger = logging.getLogger(__name__)

ACTION_NAMES: Dict[str, Action] = {a.name.lower(): a for a in Action}
ALL_ACTIONS: FrozenSet[Action] = frozenset(Action)
MAX_TURNS = 2


class RegionLabel(str, Enum):
    CENTER = "center"
    LEFT = "left"
    RIGHT = "right"
    OTHER = "other"


def region_of(box: Tuple[float, float, float, float], near_threshold: float = 0.5) -> RegionLabel:
    cx, cy = box[0], box[1]
    if cx < 1.0 / 3.0:
        return RegionLabel.LEFT
    if cx > 2.0 / 3.0:
        return RegionLabel.RIGHT
    return RegionLabel.CENTER if cy >= near_threshold else RegionLabel.OTHER


# ---------------------------------------------------------------- rules

Subject = Union[int, HealthClass, ObstacleType]


class RuleParseError(ValueError):
    def __init__(self, message: str, line_no: int, source: str = "<string>"):
        super().__init__(f"{source}:{line_no}: {message}")
        self.line_no = line_no
        self.source = source


@dataclass(frozen=True)
class Rule:
    subject: Subject
    region: RegionLabel
    forbidden: FrozenSet[Action]
    line_no: int = 0

    def __post_init__(self) -> None:
        if not self.forbidden:
            raise ValueError("a rule must forbid at least one action")
        if self.forbidden >= ALL_ACTIONS:
            raise ValueError("a rule may not forbid every action")

    def matches(self, det: Detection, health: Dict[int, HealthClass]) -> bool:
        if region_of(det.box) is not self.region:
            return False
        if isinstance(self.subject, ObstacleType):
            return det.kind is self.subject
        if isinstance(det.kind, ObstacleType):
            return False
        if isinstance(self.subject, HealthClass):
            return health.get(det.kind) is self.subject
        return det.kind == self.subject


@dataclass
class RuleSet:
    rules: List[Rule] = field(default_factory=list)
    source: str = "<string>"

    def __len__(self) -> int:
        return len(self.rules)

    def __iter__(self):
        return iter(self.rules)


_RULE_RE = re.compile(r"^forbid\s+(?P<actions>[\w,\s]+?)\s+when\s+(?P<subject>\S+)\s+in\s+(?P<region>\S+)$")


def _parse_subject(token: str, line_no: int, source: str) -> Subject:
    if token.isdigit():
        return int(token)
    for enum in (HealthClass, ObstacleType):
        try:
            return enum(token)
        except ValueError:
            continue
    raise RuleParseError(f"unknown subject {token!r}", line_no, source)


def parse_rules(text: str, source: str = "<string>") -> RuleSet:
    """Parse ``forbid <action>[,<action>...] when <subject> in <region>`` lines."""
    rules = []
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        m = _RULE_RE.match(line)
        if m is None:
            raise RuleParseError(f"malformed rule {line!r}", line_no, source)
        actions = set()
        for name in m.group("actions").split(","):
            name = name.strip()
            if name not in ACTION_NAMES:
                raise RuleParseError(f"unknown action {name!r}", line_no, source)
            actions.add(ACTION_NAMES[name])
        subject = _parse_subject(m.group("subject"), line_no, source)
        try:
            region = RegionLabel(m.group("region"))
        except ValueError:
            raise RuleParseError(f"unknown region {m.group('region')!r}", line_no, source)
        try:
            rules.append(Rule(subject, region, frozenset(actions), line_no))
        except ValueError as e:
            raise RuleParseError(str(e), line_no, source)
    return RuleSet(rules, source)


def load_rules(path: Union[str, Path]) -> RuleSet:
    path = Path(path)
    return parse_rules(path.read_text(encoding="utf-8"), source=str(path))


def count_rules(rules: RuleSet) -> int:
    return len(rules)


def health_map(kinds: Sequence[FoodKind]) -> Dict[int, HealthClass]:
    return {k.id: k.health_class for k in kinds}


def firing_rules(dets: Sequence[Detection], rules: RuleSet,
                 health: Dict[int, HealthClass]) -> Tuple[FrozenSet[Action], List[Rule]]:
    """Union of actions forbidden by every rule matched by some detection."""
    fired = [r for r in rules if any(r.matches(d, health) for d in dets)]
    forbidden = frozenset().union(*(r.forbidden for r in fired)) if fired else frozenset()
    return forbidden, fired


# ---------------------------------------------------------------- planner

DEFAULT_PRIORITY: Tuple[Action, ...] = (
    Action.MOVE_STRAIGHT,
    Action.TURN_LEFT,
    Action.TURN_RIGHT,
    Action.JUMP,
    Action.CROUCH,
    Action.MOVE_BACK,
)


@dataclass(frozen=True)
class PriorityList:
    order: Tuple[Action, ...] = DEFAULT_PRIORITY

    def __post_init__(self) -> None:
        if sorted(self.order) != sorted(Action):
            raise ValueError("priority list must be a permutation of all actions")

    @property
    def head(self) -> Action:
        return self.order[0]

    def survivors(self, forbidden: FrozenSet[Action]) -> List[Action]:
        return [a for a in self.order if a not in forbidden]


@dataclass(frozen=True)
class Plan:
    queue: Tuple[Action, ...] = ()
    justification: Optional[Tuple[Label, RegionLabel]] = None
    fallback: bool = False


@dataclass(frozen=True)
class PlannerContext:
    health: Dict[int, HealthClass]
    table: ObjectScoreTable
    geometry: PlaneGeometry = PlaneGeometry()
    min_confidence: float = 0.25

    @classmethod
    def for_kinds(cls, kinds: Sequence[FoodKind], **kwargs) -> "PlannerContext":
        return cls(health=health_map(kinds), table=default_score_table(kinds), **kwargs)


def estimate_turn_and_steps(target: Union[Detection, Tuple[float, float, float, float]],
                            geometry: Optional[PlaneGeometry] = None) -> List[Action]:
    """Turns toward the target (45 degrees each) followed by the steps to reach it."""
    geometry = geometry or PlaneGeometry()
    box = target.box if isinstance(target, Detection) else target
    offset = box[0] - 0.5
    angle = math.degrees(math.atan(abs(offset) / geometry.lateral_scale))
    n_turn = min(int(math.floor(angle / 45.0 + 0.5)), MAX_TURNS) if offset != 0 else 0
    turn = Action.TURN_LEFT if offset < 0 else Action.TURN_RIGHT
    n_steps = max(int(math.floor(geometry.depth_of(box) + 0.5)), 0)
    return [turn] * n_turn + [Action.MOVE_STRAIGHT] * n_steps


def _has_obstacle(dets: Sequence[Detection], kind: ObstacleType) -> bool:
    return any(d.kind is kind and region_of(d.box) is RegionLabel.CENTER for d in dets)


def _plan_valid(plan: Plan, dets: Sequence[Detection], forbidden: FrozenSet[Action]) -> bool:
    head = plan.queue[0]
    if head in forbidden:
        return False
    if head is Action.JUMP and not _has_obstacle(dets, ObstacleType.LOW_BARRIER):
        return False
    if head is Action.CROUCH and not _has_obstacle(dets, ObstacleType.OVERHANG):
        return False
    if plan.justification is None:
        return True
    kind, region = plan.justification
    return any(
        d.kind == kind and region_of(d.box) in (region, RegionLabel.CENTER)
        for d in dets
    )


def _best_target(dets: Sequence[Detection], ctx: PlannerContext) -> Optional[Detection]:
    candidates = [d for d in dets if ctx.table.score(d.kind) > 0]
    if not candidates:
        return None
    return min(
        candidates,
        key=lambda d: (-ctx.table.score(d.kind), ctx.geometry.depth_of(d.box), abs(d.box[0] - 0.5)),
    )


def planner_decide(dets: Sequence[Detection], rules: RuleSet, prio: PriorityList, state: Plan,
                   ctx: PlannerContext) -> Tuple[Action, Plan]:
    """Continue the current plan while it is justified; otherwise replan."""
    dets = [d for d in dets if d.confidence >= ctx.min_confidence]
    forbidden, _ = firing_rules(dets, rules, ctx.health)

    if state.queue and _plan_valid(state, dets, forbidden):
        return state.queue[0], Plan(state.queue[1:], state.justification)

    survivors = prio.survivors(forbidden)
    if not survivors:
        logger.debug("all actions forbidden, falling back to %s", prio.head.name)
        return prio.head, Plan(fallback=True)

    target = _best_target(dets, ctx)
    if target is not None:
        seq = estimate_turn_and_steps(target, ctx.geometry)
        if seq and seq[0] not in forbidden:
            return seq[0], Plan(tuple(seq[1:]), (target.kind, region_of(target.box)))
    return survivors[0], Plan()


class Planner:
    """Stateful wrapper owning one plan, with fallback telemetry."""

    def __init__(self, rules: RuleSet, ctx: PlannerContext,
                 prio: Optional[PriorityList] = None):
        self.rules = rules
        self.ctx = ctx
        self.prio = prio or PriorityList()
        self.plan = Plan()
        self.decisions = 0
        self.fallbacks = 0

    def reset(self) -> None:
        self.plan = Plan()

    def decide(self, dets: Sequence[Detection]) -> Action:
        action, self.plan = planner_decide(dets, self.rules, self.prio, self.plan, self.ctx)
        self.decisions += 1
        if self.plan.fallback:
            self.fallbacks += 1
        return action


# ---------------------------------------------------------------- meta-feature learner

class MetaLearnerConfig(BaseModel):
    k: int = Field(3, ge=1)
    hidden: List[int] = Field(default_factory=lambda: [100, 100, 100])
    lr: float = Field(1e-3, gt=0)
    batch_size: int = Field(32, ge=1)
    gamma: float = Field(1.0, ge=0.0, le=1.0)
    target_sync: int = Field(500, ge=1)
    replay_capacity: int = Field(100_000, ge=1)
    learn_start: int = Field(1000, ge=1)
    eps_start: float = Field(1.0, ge=0.0, le=1.0)
    eps_end: float = Field(0.05, ge=0.0, le=1.0)
    eps_steps: int = Field(50_000, ge=1)
    input_scale: float = Field(0.1, gt=0)

    @property
    def input_size(self) -> int:
        return 3 * self.k * self.k

    def to_dqn_config(self) -> DQNConfig:
        return DQNConfig(
            hidden=self.hidden,
            dueling=True,
            dueling_mode=DuelingMode.MEAN,
            target_mode=TargetMode.DOUBLE,
            optimizer="adam",
            lr=self.lr,
            batch_size=self.batch_size,
            gamma=self.gamma,
            target_sync=self.target_sync,
            replay_capacity=max(self.replay_capacity, self.batch_size),
            learn_start=self.learn_start,
            exploration=ExplorationPolicy(start=self.eps_start, end=self.eps_end,
                                          steps=self.eps_steps),
        )


class MetaLearner:
    """Dueling double DQN over the filtered important-area stack."""

    def __init__(self, config: Optional[MetaLearnerConfig] = None, seed: int = 0,
                 n_actions: int = N_ACTIONS):
        self.config = config or MetaLearnerConfig()
        self.dqn = DQNLearner(self.config.input_size, n_actions, self.config.to_dqn_config(), seed)

    @classmethod
    def for_sweep(cls, k: int, n_layers: int, size: int, seed: int = 0,
                  **overrides) -> "MetaLearner":
        cfg = MetaLearnerConfig(k=k, hidden=[size] * n_layers, **overrides)
        return cls(cfg, seed)

    @property
    def input_size(self) -> int:
        return self.config.input_size

    def prepare(self, features: Union[FeatureStack, np.ndarray]) -> np.ndarray:
        x = features.flatten() if isinstance(features, FeatureStack) else np.asarray(features, dtype=np.float64)
        if x.shape[-1] != self.input_size:
            raise ShapeMismatchError(f"feature length {x.shape[-1]} != {self.input_size}")
        return self.config.input_scale * x

    def observe(self, s: np.ndarray, a: int, r: float, s_next: np.ndarray, done: bool) -> Optional[float]:
        """Store a prepared transition and learn when due."""
        return self.dqn.observe(Transition(s, int(a), float(r), s_next, bool(done)))


def meta_decide(features: Union[FeatureStack, np.ndarray], learner: MetaLearner,
                explore: bool = True) -> Action:
    return Action(learner.dqn.act(learner.prepare(features), explore))


def meta_update(learner: MetaLearner, batch: Sequence[Transition]) -> MetaLearner:
    """One double-Q step through the dueling head; the target syncs periodically."""
    learner.dqn.learn(batch)
    return learner
