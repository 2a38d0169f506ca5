from pathlib import Path

import numpy as np
import pytest

from ml import env as world
from ml.detector_sim import Detection
from ml.env import Action, ObstacleType, PlaneGeometry
from ml.features import FeatureStack
from ml.knowledge_decision import (
    MAX_TURNS,
    MetaLearner,
    MetaLearnerConfig,
    Plan,
    Planner,
    PlannerContext,
    PriorityList,
    RegionLabel,
    RuleParseError,
    count_rules,
    estimate_turn_and_steps,
    firing_rules,
    health_map,
    load_rules,
    meta_decide,
    meta_update,
    parse_rules,
    planner_decide,
    region_of,
)
from ml.rl_core import Transition

RULES = Path(__file__).resolve().parent.parent / "rules" / "default.rules"
KINDS = world.food_kinds(20)
GEOMETRY = PlaneGeometry(6)

def ctx(**kwargs):
    return PlannerContext.for_kinds(KINDS, geometry=GEOMETRY, **kwargs)

def seen(kind, depth, lateral, confidence=0.9):
    return Detection(kind=kind, box=GEOMETRY.project(depth, lateral), confidence=confidence)

def test_region_thresholds():
    assert region_of((0.1, 0.8, 0.1, 0.1)) is RegionLabel.LEFT
    assert region_of((0.9, 0.2, 0.1, 0.1)) is RegionLabel.RIGHT
    assert region_of((0.5, 0.8, 0.1, 0.1)) is RegionLabel.CENTER
    assert region_of((0.5, 0.2, 0.1, 0.1)) is RegionLabel.OTHER

def test_default_rules_file():
    """The shipped rules file holds 43 rules."""
    rules = load_rules(RULES)
    assert count_rules(rules) == 43
    assert rules.source == str(RULES)

def test_parse_rule_line():
    rules = parse_rules("# comment\n\nforbid jump,crouch when wall in center  # trailing\n")
    (rule,) = rules.rules
    assert rule.subject is ObstacleType.WALL
    assert rule.region is RegionLabel.CENTER
    assert rule.forbidden == frozenset({Action.JUMP, Action.CROUCH})
    assert rule.line_no == 3

@pytest.mark.parametrize("text,line_no", [
    ("forbid jump when 0 in left\nforbid fly when 0 in left", 2),
    ("forbid jump when dragon in left", 1),
    ("\n\nforbid jump when 0 in behind", 3),
    ("forbid jump 0 left", 1),
    ("forbid turn_left,turn_right,crouch,jump,move_straight,move_back when 0 in left", 1),
])
def test_parse_errors_carry_line(text, line_no):
    with pytest.raises(RuleParseError) as exc:
        parse_rules(text, source="test.rules")
    assert exc.value.line_no == line_no
    assert str(exc.value).startswith(f"test.rules:{line_no}:")

def test_firing_rules_union():
    rules = load_rules(RULES)
    dets = [seen(0, 1, -1), seen(ObstacleType.WALL, 1, 0)]
    forbidden, fired = firing_rules(dets, rules, health_map(KINDS))
    assert Action.TURN_LEFT in forbidden
    assert {Action.MOVE_STRAIGHT, Action.JUMP, Action.CROUCH} <= forbidden
    assert len(fired) >= 2

def test_priority_list_must_cover_all_actions():
    with pytest.raises(ValueError):
        PriorityList((Action.MOVE_STRAIGHT, Action.TURN_LEFT))

def test_empty_view_returns_priority_head():
    action, plan = planner_decide([], load_rules(RULES), PriorityList(), Plan(), ctx())
    assert action is Action.MOVE_STRAIGHT
    assert plan == Plan()

def test_planned_jump_without_obstacle_is_replanned():
    stale = Plan((Action.JUMP, Action.MOVE_STRAIGHT))
    action, plan = planner_decide([], load_rules(RULES), PriorityList(), stale, ctx())
    assert action is Action.MOVE_STRAIGHT
    assert plan.queue == ()

def test_unhealthy_on_left_forbids_turn_left():
    prio = PriorityList((Action.TURN_LEFT, Action.TURN_RIGHT, Action.MOVE_STRAIGHT,
                         Action.JUMP, Action.CROUCH, Action.MOVE_BACK))
    action, _ = planner_decide([seen(0, 1, -1)], load_rules(RULES), prio, Plan(), ctx())
    assert action is Action.TURN_RIGHT

def test_plan_toward_healthy_food_continues():
    rules = load_rules(RULES)
    dets = [seen(17, 2, 0)]
    action, plan = planner_decide(dets, rules, PriorityList(), Plan(), ctx())
    assert action is Action.MOVE_STRAIGHT
    assert plan.queue == (Action.MOVE_STRAIGHT,)
    assert plan.justification == (17, RegionLabel.CENTER)
    action, plan = planner_decide([seen(17, 1, 0)], rules, PriorityList(), plan, ctx())
    assert action is Action.MOVE_STRAIGHT
    assert plan.queue == ()

def test_plan_dropped_when_target_disappears():
    rules = load_rules(RULES)
    prio = PriorityList((Action.TURN_RIGHT, Action.TURN_LEFT, Action.MOVE_STRAIGHT,
                         Action.JUMP, Action.CROUCH, Action.MOVE_BACK))
    _, plan = planner_decide([seen(17, 3, 0)], rules, prio, Plan(), ctx())
    assert plan.queue
    action, plan = planner_decide([], rules, prio, plan, ctx())
    assert action is Action.TURN_RIGHT
    assert plan.queue == ()

def test_low_confidence_detections_ignored():
    action, plan = planner_decide([seen(17, 2, 0, confidence=0.1)], load_rules(RULES),
                                  PriorityList(), Plan(), ctx())
    assert plan.justification is None

def test_fallback_when_everything_is_forbidden():
    rules = parse_rules(
        "forbid turn_left,turn_right,crouch when wall in center\n"
        "forbid jump,move_straight,move_back when 17 in center\n"
    )
    planner = Planner(rules, ctx())
    action = planner.decide([seen(ObstacleType.WALL, 1, 0), seen(17, 2, 0)])
    assert action is Action.MOVE_STRAIGHT
    assert planner.plan.fallback
    assert planner.fallbacks == 1 and planner.decisions == 1

def test_estimate_dead_ahead():
    assert estimate_turn_and_steps(GEOMETRY.project(3, 0), GEOMETRY) == [Action.MOVE_STRAIGHT] * 3

def test_estimate_far_left_turns_left():
    seq = estimate_turn_and_steps((0.02, 0.8, 0.1, 0.1), GEOMETRY)
    turns = [a for a in seq if a is not Action.MOVE_STRAIGHT]
    assert turns and set(turns) == {Action.TURN_LEFT}
    assert len(turns) <= MAX_TURNS
    assert seq[len(turns):] == [Action.MOVE_STRAIGHT] * (len(seq) - len(turns))

def test_estimate_right_side():
    seq = estimate_turn_and_steps(GEOMETRY.project(1, 1), GEOMETRY)
    assert seq == [Action.TURN_RIGHT, Action.MOVE_STRAIGHT]

def test_meta_greedy_is_argmax():
    learner = MetaLearner(MetaLearnerConfig(k=3, hidden=[8, 8]), seed=0)
    stack = FeatureStack.empty(3)
    q = learner.dqn.online.q_values(learner.prepare(stack))
    assert meta_decide(stack, learner, explore=False) is Action(int(np.argmax(q)))

def test_meta_full_exploration_is_uniform():
    cfg = MetaLearnerConfig(k=3, hidden=[8], eps_start=1.0, eps_end=1.0)
    learner = MetaLearner(cfg, seed=0)
    stack = FeatureStack.empty(3)
    counts = np.bincount([meta_decide(stack, learner) for _ in range(10_000)], minlength=6)
    assert np.all(np.abs(counts / 10_000 - 1 / 6) < 0.02)

def test_for_sweep_sizes():
    learner = MetaLearner.for_sweep(k=4, n_layers=2, size=50)
    assert learner.input_size == 48
    assert learner.config.hidden == [50, 50]

def test_meta_update_counts_updates():
    learner = MetaLearner(MetaLearnerConfig(k=1, hidden=[4], batch_size=2), seed=0)
    s = learner.prepare(np.ones(3))
    batch = [Transition(s, 0, 1.0, s, True), Transition(s, 1, 0.0, s, False)]
    assert meta_update(learner, batch) is learner
    assert learner.dqn.updates == 1

def test_meta_learner_solves_two_state_chain():
    """From A, action 0 leads to B; from B, action 1 pays 1. Everything else ends at 0."""
    cfg = MetaLearnerConfig(k=1, hidden=[16], lr=1e-2, batch_size=16, learn_start=16,
                            target_sync=50, eps_steps=1000)
    learner = MetaLearner(cfg, seed=0)
    a_state, b_state = np.array([10.0, 0.0, 0.0]), np.array([0.0, 10.0, 0.0])
    steps = 0
    while steps < 3000:
        s, done = a_state, False
        while not done:
            action = int(meta_decide(s, learner))
            if s is a_state and action == 0:
                s_next, r, done = b_state, 0.0, False
            else:
                s_next, r, done = s, float(s is b_state and action == 1), True
            learner.observe(learner.prepare(s), action, r, learner.prepare(s_next), done)
            s = s_next
            steps += 1
    assert meta_decide(a_state, learner, explore=False) == 0
    assert meta_decide(b_state, learner, explore=False) == 1

def test_planner_decide_is_deterministic():
    rules = load_rules(RULES)
    dets = [seen(17, 4, 2), seen(0, 1, -1), seen(ObstacleType.WALL, 2, 1)]
    state = Plan((Action.TURN_LEFT,), (17, RegionLabel.RIGHT))
    results = {planner_decide(dets, rules, PriorityList(), state, ctx()) for _ in range(5)}
    assert len(results) == 1

def test_each_planned_action_is_used_once():
    rules = load_rules(RULES)
    queue = (Action.TURN_RIGHT, Action.MOVE_STRAIGHT, Action.MOVE_STRAIGHT)
    plan = Plan(queue, (17, RegionLabel.CENTER))
    taken = []
    for _ in queue:
        action, plan = planner_decide([seen(17, 3, 0)], rules, PriorityList(), plan, ctx())
        taken.append(action)
        assert plan.justification == (17, RegionLabel.CENTER)
    assert tuple(taken) == queue
    assert plan.queue == ()
