"""Arbitration between the knowledge decider and the RL module.

The selector is a DQN over the concatenated one-hot encodings of the two
proposed actions. It may pick any action, not only one of the two proposals.
"""

import logging
from collections import deque
from dataclasses import dataclass
from typing import Deque, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator

from ml.env import N_ACTIONS, Action
from ml.neural import OptState, optimizer_step
from ml.rl_core import (
    LinearSchedule,
    QNetwork,
    ReplayMemory,
    RLSettings,
    TargetMode,
    Transition,
    dqn_loss_and_grad,
    sample_boltzmann,
    sync_target,
)

logger = logging.getLogger(__name__)

PAIR_SIZE = 2 * N_ACTIONS


class SelectorConfig(BaseModel):
    hidden: List[int] = Field(default_factory=lambda: [50, 50])
    replay_capacity: int = Field(1_000_000, ge=1)
    batch_size: int = Field(32, ge=1)
    target_sync: int = Field(500, ge=1)
    gamma: float = Field(1.0, ge=0.0, le=1.0)
    lr: float = Field(7e-4, gt=0)
    rms_eps: float = Field(1e-6, gt=0)
    tau_start: float = Field(1.0, gt=0)
    tau_end: float = Field(0.1, gt=0)
    tau_steps: int = Field(50_000, ge=1)
    greedy_tau: float = Field(1e-6, gt=0)
    append_features: bool = False
    feature_len: int = Field(0, ge=0)
    feature_scale: float = Field(0.1, gt=0)
    log_window: int = Field(10_000, ge=1)

    @model_validator(mode="after")
    def check_capacity(self) -> "SelectorConfig":
        if self.replay_capacity < self.batch_size:
            raise ValueError("replay_capacity must be >= batch_size")
        return self

    @property
    def input_size(self) -> int:
        return PAIR_SIZE + (self.feature_len if self.append_features else 0)


def encode(a1: Action, a2: Action) -> np.ndarray:
    pair = np.zeros(PAIR_SIZE)
    pair[int(a1)] = 1.0
    pair[N_ACTIONS + int(a2)] = 1.0
    return pair


def select(pair: np.ndarray, net: QNetwork, tau: float, rng: np.random.Generator) -> Action:
    return Action(sample_boltzmann(net.q_values(pair), tau, rng))


def update(net: QNetwork, target_net: QNetwork, memory: ReplayMemory, cfg: SelectorConfig,
           opt: OptState, rng: np.random.Generator) -> Tuple[QNetwork, Optional[float]]:
    """One max-target DQN step on a uniform batch; loss is None when skipped."""
    if len(memory) < cfg.batch_size:
        logger.debug("selector update skipped: %d < %d transitions", len(memory), cfg.batch_size)
        return net, None
    settings = RLSettings(gamma=cfg.gamma, target_sync=cfg.target_sync, batch_size=cfg.batch_size)
    loss, grads = dqn_loss_and_grad(net, target_net, memory.sample(cfg.batch_size, rng),
                                    settings, TargetMode.MAX)
    optimizer_step(opt, net.params, grads)
    return net, loss


def selection_share_stats(log: Sequence[Tuple[int, int, int]]) -> Tuple[float, float, float]:
    """Shares of steps where the executed action came from each proposer.

    Agreement steps (a1 == a2 == chosen) count half to each side.
    """
    if not log:
        raise ValueError("selection log is empty")
    s1 = s2 = other = 0.0
    for a1, a2, chosen in log:
        if chosen == a1 and chosen == a2:
            s1 += 0.5
            s2 += 0.5
        elif chosen == a1:
            s1 += 1.0
        elif chosen == a2:
            s2 += 1.0
        else:
            other += 1.0
    n = len(log)
    return s1 / n, s2 / n, other / n


@dataclass
class _Pending:
    x: np.ndarray
    action: int
    reward: float = 0.0
    rewarded: bool = False


class ActionSelector:
    """Owns the selector networks, replay, temperature schedule and telemetry.

    ``propose`` picks the executed action; ``record`` attaches the env reward.
    A transition is completed when the next pair is known or the episode ends.
    """

    def __init__(self, cfg: Optional[SelectorConfig] = None, seed: int = 0):
        self.cfg = cfg or SelectorConfig()
        self.rng = np.random.default_rng(seed)
        self.net = QNetwork(self.cfg.input_size, self.cfg.hidden, N_ACTIONS,
                            rng=np.random.default_rng(seed + 1))
        self.target = self.net.copy()
        self.opt = OptState.rmsprop(self.cfg.lr, eps=self.cfg.rms_eps)
        self.memory = ReplayMemory(self.cfg.replay_capacity)
        self.schedule = LinearSchedule(self.cfg.tau_start, self.cfg.tau_end, self.cfg.tau_steps)
        self.steps = 0
        self.updates = 0
        self.skipped_updates = 0
        self.log: Deque[Tuple[int, int, int]] = deque(maxlen=self.cfg.log_window)
        self._pending: Optional[_Pending] = None

    def _input(self, a1: Action, a2: Action, features: Optional[np.ndarray]) -> np.ndarray:
        pair = encode(a1, a2)
        if not self.cfg.append_features:
            return pair
        extra = np.zeros(self.cfg.feature_len) if features is None else np.asarray(features, dtype=np.float64)
        return np.concatenate([pair, self.cfg.feature_scale * extra])

    @property
    def tau(self) -> float:
        return self.schedule.value(self.steps)

    def propose(self, a1: Action, a2: Action, features: Optional[np.ndarray] = None,
                explore: bool = True) -> Action:
        x = self._input(a1, a2, features)
        if self._pending is not None and self._pending.rewarded:
            self._store(Transition(self._pending.x, self._pending.action,
                                   self._pending.reward, x, False))
        tau = self.tau if explore else self.cfg.greedy_tau
        chosen = select(x, self.net, tau, self.rng)
        self._pending = _Pending(x, int(chosen)) if explore else None
        self.log.append((int(a1), int(a2), int(chosen)))
        return chosen

    def record(self, reward: float, done: bool) -> None:
        if self._pending is None:
            return
        self._pending.reward = float(reward)
        self._pending.rewarded = True
        if done:
            p = self._pending
            self._store(Transition(p.x, p.action, p.reward, np.zeros_like(p.x), True))
            self._pending = None

    def finish_episode(self) -> None:
        self._pending = None

    def _store(self, transition: Transition) -> None:
        self.memory.push(transition)
        self.steps += 1
        _, loss = update(self.net, self.target, self.memory, self.cfg, self.opt, self.rng)
        if loss is None:
            self.skipped_updates += 1
            return
        self.updates += 1
        if self.updates % self.cfg.target_sync == 0:
            sync_target(self.net, self.target)

    def shares(self, last: Optional[int] = None) -> Tuple[float, float, float]:
        log = list(self.log)
        if last:
            log = log[-last:]
        return selection_share_stats(log)
