"""One agent per experiment variant.

Every agent owns its environment context and exposes
``run_episode(env_seed, learn) -> EpisodeOutcome``. The drl_ek agent wires the
full pipeline: perceive, both deciders propose, the selector picks, the env
steps, and every learner is updated from the obtained reward.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Tuple

import numpy as np

from ml import env as world
from ml.a3c import A3CTrainer, FeatureKind, GridTask, policy_value
from ml.action_selector import ActionSelector
from ml.env import N_ACTIONS, Action, PlaneGeometry
from ml.features import ObjectScoreTable, Percept, Perception, default_score_table, make_perception
from ml.knowledge_decision import (
    MetaLearner,
    Planner,
    PlannerContext,
    load_rules,
    meta_decide,
)
from ml.rl_core import DQNLearner, DuelingMode, TargetMode, Transition

logger = logging.getLogger(__name__)


class Variant(str, Enum):
    RANDOM = "random"
    PLANNER = "planner"
    META = "meta"
    DQN = "dqn"
    DUELING_DDQN = "dueling_ddqn"
    A3C = "a3c"
    A3C_PRESENCE = "a3c_presence"
    A3C_AREA = "a3c_area"
    DRL_EK = "drl_ek"


class KnowledgeSource(str, Enum):
    """Which knowledge decider proposes a1 in the drl_ek pipeline."""

    META = "meta"
    PLANNER = "planner"


class UnknownVariantError(ValueError):
    """Raised for a variant name outside the supported set."""


def parse_variant(name: str) -> Variant:
    try:
        return Variant(name)
    except ValueError:
        known = ", ".join(v.value for v in Variant)
        raise UnknownVariantError(f"unknown variant {name!r} (expected one of: {known})")


A3C_FEATURES = {
    Variant.A3C: FeatureKind.NONE,
    Variant.A3C_PRESENCE: FeatureKind.PRESENCE,
    Variant.A3C_AREA: FeatureKind.AREA,
    Variant.DRL_EK: FeatureKind.AREA,
}


@dataclass
class EpisodeOutcome:
    reward: float
    steps: int
    selections: List[Tuple[int, int, int]] = field(default_factory=list)
    fallbacks: int = 0


def _perception(cfg, seed: int) -> Perception:
    kinds = world.food_kinds(cfg.world.n_food_kinds)
    table = None
    if cfg.scores or cfg.tracked is not None:
        table = default_score_table(kinds, cfg.tracked)
        if cfg.scores:
            table = ObjectScoreTable(scores={**table.scores, **cfg.scores}, tracked=table.tracked)
    return make_perception(
        cfg.detector, kinds, k=cfg.k, seed=seed,
        geometry=PlaneGeometry(cfg.world.max_visible_distance),
        table=table, region_mask=cfg.region_mask,
    )


def _grid_task(cfg, kind: FeatureKind, seed: int) -> GridTask:
    return GridTask(cfg.world, cfg.detector, kind, k=cfg.k,
                    feature_scale=cfg.a3c.feature_scale, seed=seed,
                    perception=_perception(cfg, seed))


class RandomAgent:
    def __init__(self, cfg, seed: int = 0):
        self.cfg = cfg
        self.rng = np.random.default_rng(seed)

    def run_episode(self, env_seed: int, learn: bool = True) -> EpisodeOutcome:
        state = world.reset(self.cfg.world, seed=env_seed)
        done = False
        while not done:
            state, _, done = world.step(state, Action(int(self.rng.integers(N_ACTIONS))))
        return EpisodeOutcome(state.cum_reward, state.step_count)


def _planner(cfg, perception: Perception) -> Planner:
    kinds = world.food_kinds(cfg.world.n_food_kinds)
    ctx = PlannerContext(
        health={k.id: k.health_class for k in kinds},
        table=perception.table,
        geometry=perception.geometry,
        min_confidence=cfg.planner_min_confidence,
    )
    return Planner(load_rules(cfg.rules_path), ctx)


class PlannerAgent:
    def __init__(self, cfg, seed: int = 0):
        self.cfg = cfg
        self.perception = _perception(cfg, seed)
        self.planner = _planner(cfg, self.perception)

    def run_episode(self, env_seed: int, learn: bool = True) -> EpisodeOutcome:
        state = world.reset(self.cfg.world, seed=env_seed)
        self.perception.reset()
        self.planner.reset()
        fallbacks = self.planner.fallbacks
        done = False
        while not done:
            percept = self.perception.perceive(state)
            state, _, done = world.step(state, self.planner.decide(percept.detections))
        return EpisodeOutcome(state.cum_reward, state.step_count,
                              fallbacks=self.planner.fallbacks - fallbacks)


class MetaAgent:
    def __init__(self, cfg, seed: int = 0, learner: Optional[MetaLearner] = None):
        self.cfg = cfg
        self.perception = _perception(cfg, seed)
        self.learner = learner or MetaLearner(cfg.meta, seed)

    def run_episode(self, env_seed: int, learn: bool = True) -> EpisodeOutcome:
        state = world.reset(self.cfg.world, seed=env_seed)
        self.perception.reset()
        stack = self.perception.perceive(state).meta_stack
        done = False
        while not done:
            action = meta_decide(stack, self.learner, explore=learn)
            state, reward, done = world.step(state, action)
            stack_next = self.perception.perceive(state).meta_stack
            if learn:
                self.learner.observe(self.learner.prepare(stack), action, reward,
                                     self.learner.prepare(stack_next), done)
            stack = stack_next
        return EpisodeOutcome(state.cum_reward, state.step_count)


class DQNAgent:
    """Baseline Q-learner over the encoded observation without injected features."""

    def __init__(self, cfg, seed: int = 0, dueling: bool = False):
        self.cfg = cfg
        self.task = _grid_task(cfg, FeatureKind.NONE, seed)
        dqn_cfg = cfg.dqn.model_copy(update={
            "dueling": dueling,
            "dueling_mode": DuelingMode.MEAN,
            "target_mode": TargetMode.DOUBLE if dueling else TargetMode.MAX,
        })
        self.learner = DQNLearner(self.task.state_size, N_ACTIONS, dqn_cfg, seed)

    def run_episode(self, env_seed: int, learn: bool = True) -> EpisodeOutcome:
        x = self.task.reset(env_seed)
        done = False
        while not done:
            action = self.learner.act(x, explore=learn)
            x_next, reward, done = self.task.step(action)
            if learn:
                self.learner.observe(Transition(x, action, reward, x_next, done))
            x = x_next
        state = self.task.state
        return EpisodeOutcome(state.cum_reward, state.step_count)


class A3CAgent:
    """A3C with worker 0 driven by the episode loop and private-env helpers."""

    def __init__(self, cfg, seed: int = 0, feature_kind: FeatureKind = FeatureKind.NONE):
        self.cfg = cfg
        self.task = _grid_task(cfg, feature_kind, seed)
        helpers = [_grid_task(cfg, feature_kind, seed * 100 + i + 1)
                   for i in range(cfg.a3c.n_workers - 1)]
        self.trainer = A3CTrainer(cfg.a3c, self.task.state_size, helpers, seed=seed, driven=True)
        self.rng = np.random.default_rng(seed + 7)

    def _sync_helpers(self, version: int) -> None:
        if self.trainer.shared.version != version:
            self.trainer.background_round()

    def propose(self, x: np.ndarray, learn: bool) -> int:
        if not learn:
            pi = policy_value(self.trainer.shared.params, x).output.pi
            return int(self.rng.choice(len(pi), p=pi))
        version = self.trainer.shared.version
        action = self.trainer.driver.propose(x, self.trainer.shared, self.trainer.opt)
        self._sync_helpers(version)
        return action

    def record(self, action: int, reward: float, done: bool, learn: bool) -> None:
        if not learn:
            return
        version = self.trainer.shared.version
        self.trainer.driver.record(action, reward, done, self.trainer.shared, self.trainer.opt)
        self._sync_helpers(version)

    def run_episode(self, env_seed: int, learn: bool = True) -> EpisodeOutcome:
        if learn:
            self.trainer.start()
        x = self.task.reset(env_seed)
        done = False
        while not done:
            action = self.propose(x, learn)
            x, reward, done = self.task.step(action)
            self.record(action, reward, done, learn)
        state = self.task.state
        return EpisodeOutcome(state.cum_reward, state.step_count)

    def close(self) -> None:
        self.trainer.stop()


class DrlEkAgent:
    """Knowledge decider and A3C propose, the selector decides.

    The knowledge decider is the meta-feature learner unless
    ``knowledge = planner``, which uses the rule planner on the same detections.
    """

    def __init__(self, cfg, seed: int = 0):
        self.cfg = cfg
        self.rl = A3CAgent(cfg, seed, FeatureKind.AREA)
        self.task = self.rl.task
        self.knowledge = KnowledgeSource(cfg.knowledge)
        self.meta: Optional[MetaLearner] = None
        self.planner: Optional[Planner] = None
        if self.knowledge is KnowledgeSource.PLANNER:
            self.planner = _planner(cfg, self.task.perception)
        else:
            self.meta = MetaLearner(cfg.meta, seed + 11)
        self.selector = ActionSelector(cfg.selector_config(), seed + 13)

    def _knowledge_action(self, percept: Percept, learn: bool) -> Action:
        if self.planner is not None:
            return self.planner.decide(percept.detections)
        return meta_decide(percept.meta_stack, self.meta, explore=learn)

    def run_episode(self, env_seed: int, learn: bool = True) -> EpisodeOutcome:
        if learn:
            self.rl.trainer.start()
        x = self.task.reset(env_seed)
        fallbacks = 0
        if self.planner is not None:
            self.planner.reset()
            fallbacks = self.planner.fallbacks
        selections: List[Tuple[int, int, int]] = []
        done = False
        while not done:
            # features are computed before either decider runs
            percept = self.task.percept
            a1 = self._knowledge_action(percept, learn)
            a2 = Action(self.rl.propose(x, learn))
            chosen = self.selector.propose(a1, a2, percept.stack.flatten(), explore=learn)
            selections.append((int(a1), int(a2), int(chosen)))
            x, reward, done = self.task.step(chosen)
            self.rl.record(chosen, reward, done, learn)
            if learn:
                self.selector.record(reward, done)
                if self.meta is not None:
                    self.meta.observe(self.meta.prepare(percept.meta_stack), chosen, reward,
                                      self.meta.prepare(self.task.percept.meta_stack), done)
        self.selector.finish_episode()
        logger.debug("selector tau=%.3f updates=%d", self.selector.tau, self.selector.updates)
        if self.planner is not None:
            fallbacks = self.planner.fallbacks - fallbacks
        state = self.task.state
        return EpisodeOutcome(state.cum_reward, state.step_count, selections, fallbacks)

    def close(self) -> None:
        self.rl.close()


def build_agent(cfg, seed: int = 0):
    variant = parse_variant(cfg.variant) if isinstance(cfg.variant, str) else cfg.variant
    if variant is Variant.RANDOM:
        return RandomAgent(cfg, seed)
    if variant is Variant.PLANNER:
        return PlannerAgent(cfg, seed)
    if variant is Variant.META:
        return MetaAgent(cfg, seed)
    if variant is Variant.DQN:
        return DQNAgent(cfg, seed, dueling=False)
    if variant is Variant.DUELING_DDQN:
        return DQNAgent(cfg, seed, dueling=True)
    if variant is Variant.DRL_EK:
        return DrlEkAgent(cfg, seed)
    return A3CAgent(cfg, seed, A3C_FEATURES[variant])
