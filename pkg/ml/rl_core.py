"""Value-based learning building blocks.

Returns, TD targets, tabular Q-learning, dueling aggregation, replay memory,
exploration schedules and a small DQN learner used by the meta-feature
decider and the pixel-free baselines.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator

from ml.neural import (
    Activation,
    Activations,
    Grads,
    NetSpec,
    OptState,
    Params,
    ShapeMismatchError,
    backward_layers,
    clip_by_global_norm,
    forward_layers,
    init_layers,
    optimizer_step,
)

logger = logging.getLogger(__name__)


@dataclass
class Transition:
    s: np.ndarray
    a: int
    r: float
    s_next: np.ndarray
    done: bool


class ReplayMemory:
    """Fixed-capacity ring of transitions with uniform sampling."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._items: List[Transition] = []
        self._next = 0

    def __len__(self) -> int:
        return len(self._items)

    def push(self, transition: Transition) -> None:
        if len(self._items) < self.capacity:
            self._items.append(transition)
        else:
            self._items[self._next] = transition
        self._next = (self._next + 1) % self.capacity

    def sample_indices(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        if not self._items:
            raise ValueError("cannot sample from an empty memory")
        return rng.integers(len(self._items), size=batch_size)

    def sample(self, batch_size: int, rng: np.random.Generator) -> List[Transition]:
        return [self._items[i] for i in self.sample_indices(batch_size, rng)]

    def contents(self) -> List[Transition]:
        """Transitions oldest first."""
        if len(self._items) < self.capacity:
            return list(self._items)
        return self._items[self._next:] + self._items[:self._next]


class LinearSchedule:
    """value(t) = start + (end - start) * min(t / total_steps, 1)"""

    def __init__(self, start: float = 1.0, end: float = 0.1, total_steps: int = 1000):
        self.start = start
        self.end = end
        self.total_steps = max(int(total_steps), 1)

    def value(self, t: int) -> float:
        frac = min(max(t, 0) / self.total_steps, 1.0)
        return self.start + (self.end - self.start) * frac


class ExplorationKind(str, Enum):
    BOLTZMANN = "boltzmann"
    EPSILON_GREEDY = "epsilon_greedy"


class ExplorationPolicy(BaseModel):
    kind: ExplorationKind = ExplorationKind.EPSILON_GREEDY
    start: float = 1.0
    end: float = 0.05
    steps: int = Field(10_000, ge=1)

    @model_validator(mode="after")
    def check_range(self) -> "ExplorationPolicy":
        lo, hi = min(self.start, self.end), max(self.start, self.end)
        if self.kind is ExplorationKind.BOLTZMANN and lo <= 0:
            raise ValueError("temperature must stay > 0")
        if self.kind is ExplorationKind.EPSILON_GREEDY and (lo < 0 or hi > 1):
            raise ValueError("epsilon must stay in [0, 1]")
        return self

    def schedule(self) -> LinearSchedule:
        return LinearSchedule(self.start, self.end, self.steps)

    def choose(self, q: np.ndarray, t: int, rng: np.random.Generator) -> int:
        value = self.schedule().value(t)
        if self.kind is ExplorationKind.BOLTZMANN:
            return sample_boltzmann(q, value, rng)
        return epsilon_greedy(q, value, rng)


class RLSettings(BaseModel):
    gamma: float = Field(1.0, ge=0.0, le=1.0)
    target_sync: int = Field(500, ge=1)
    batch_size: int = Field(32, ge=1)


def discounted_return(rewards: Sequence[float], gamma: float,
                      bootstrap: float = 0.0) -> np.ndarray:
    """R_t for every step, optionally bootstrapped from a value after the last reward."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must be in [0, 1]")
    out = np.zeros(len(rewards))
    running = bootstrap
    for t in range(len(rewards) - 1, -1, -1):
        running = rewards[t] + gamma * running
        out[t] = running
    return out


class TargetMode(str, Enum):
    MAX = "max"
    DOUBLE = "double"


def td_target(r: float, gamma: float, q_next: np.ndarray, done: bool,
              mode: TargetMode = TargetMode.MAX,
              q_online_next: Optional[np.ndarray] = None) -> float:
    if done:
        return float(r)
    q_next = np.asarray(q_next, dtype=np.float64)
    if TargetMode(mode) is TargetMode.DOUBLE:
        if q_online_next is None:
            raise ValueError("double targets need the online network's next-state values")
        return float(r + gamma * q_next[int(np.argmax(q_online_next))])
    return float(r + gamma * np.max(q_next))


def q_learning_update(table: np.ndarray, t: Transition, alpha: float, gamma: float) -> np.ndarray:
    """One tabular update on a (n_states, n_actions) array; returns a new table."""
    if not 0.0 < alpha <= 1.0:
        raise ValueError("alpha must be in (0, 1]")
    s, s_next = int(t.s), int(t.s_next)
    y = td_target(t.r, gamma, table[s_next], t.done)
    out = table.copy()
    out[s, t.a] += alpha * (y - table[s, t.a])
    return out


class DuelingMode(str, Enum):
    MAX = "max"
    MEAN = "mean"


def dueling_combine(v, a: np.ndarray, mode: DuelingMode = DuelingMode.MEAN) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if a.ndim > 1 and v.ndim == a.ndim - 1:
        v = v[..., None]
    if DuelingMode(mode) is DuelingMode.MAX:
        ref = np.max(a, axis=-1, keepdims=True)
    else:
        ref = np.mean(a, axis=-1, keepdims=True)
    return v + a - ref


def advantage(q: np.ndarray, v) -> np.ndarray:
    return np.asarray(q, dtype=np.float64) - v


def boltzmann_probs(q: np.ndarray, tau: float) -> np.ndarray:
    if tau <= 0:
        raise ValueError("tau must be > 0")
    z = np.asarray(q, dtype=np.float64) / tau
    z = z - np.max(z)
    e = np.exp(z)
    return e / e.sum()


def sample_boltzmann(q: np.ndarray, tau: float, rng: np.random.Generator) -> int:
    p = boltzmann_probs(q, tau)
    return int(rng.choice(len(p), p=p))


def epsilon_greedy(q: np.ndarray, epsilon: float, rng: np.random.Generator) -> int:
    # draw order fixed: one uniform, then one integer only when exploring
    if rng.random() < epsilon:
        return int(rng.integers(len(q)))
    return int(np.argmax(q))


@dataclass
class QCache:
    q: np.ndarray
    trunk: Activations
    value: Optional[Activations] = None
    advantage: Optional[Activations] = None


class QNetwork:
    """Q-value network: a ReLU trunk (theta) with a plain head or dueling streams.

    Dueling networks keep the advantage stream in group ``advantage`` (alpha)
    and the value stream in group ``value`` (beta).
    """

    def __init__(self, n_in: int, hidden: Sequence[int], n_actions: int,
                 dueling: bool = False, mode: DuelingMode = DuelingMode.MEAN,
                 rng: Optional[np.random.Generator] = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_in = n_in
        self.hidden = tuple(hidden)
        self.n_actions = n_actions
        self.dueling = dueling
        self.mode = DuelingMode(mode)
        if dueling:
            if not self.hidden:
                raise ValueError("dueling networks need at least one hidden layer")
            trunk = NetSpec(layer_sizes=[n_in, *self.hidden],
                            activations=[Activation.RELU] * len(self.hidden))
            width = self.hidden[-1]
            self.params = Params({
                "trunk": init_layers(trunk, rng),
                "advantage": init_layers(NetSpec.mlp(width, [], n_actions), rng),
                "value": init_layers(NetSpec.mlp(width, [], 1), rng),
            })
        else:
            spec = NetSpec.mlp(n_in, self.hidden, n_actions)
            self.params = Params({"trunk": init_layers(spec, rng)})

    def forward(self, x: np.ndarray) -> QCache:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.n_in:
            raise ShapeMismatchError(f"input length {x.shape[-1]} != {self.n_in}")
        if not self.dueling:
            acts = forward_layers(self.params["trunk"], x)
            return QCache(q=acts.output, trunk=acts)
        trunk = forward_layers(self.params["trunk"], x)
        adv = forward_layers(self.params["advantage"], trunk.output)
        val = forward_layers(self.params["value"], trunk.output)
        q = dueling_combine(val.output[..., 0], adv.output, self.mode)
        return QCache(q=q, trunk=trunk, value=val, advantage=adv)

    def q_values(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x).q

    def backward(self, cache: QCache, dq: np.ndarray) -> Grads:
        dq = np.asarray(dq, dtype=np.float64)
        grads = self.params.zeros_like()
        if not self.dueling:
            layers, _ = backward_layers(self.params["trunk"], cache.trunk, dq)
            grads.groups["trunk"] = layers
            return grads
        total = np.sum(dq, axis=-1, keepdims=True)
        if self.mode is DuelingMode.MEAN:
            da = dq - total / self.n_actions
        else:
            a = cache.advantage.output
            onehot = np.zeros_like(a)
            np.put_along_axis(onehot, np.argmax(a, axis=-1)[..., None], 1.0, axis=-1)
            da = dq - onehot * total
        adv_layers, dh_a = backward_layers(self.params["advantage"], cache.advantage, da)
        val_layers, dh_v = backward_layers(self.params["value"], cache.value, total)
        trunk_layers, _ = backward_layers(self.params["trunk"], cache.trunk, dh_a + dh_v)
        grads.groups["trunk"] = trunk_layers
        grads.groups["advantage"] = adv_layers
        grads.groups["value"] = val_layers
        return grads

    def copy(self) -> "QNetwork":
        clone = QNetwork.__new__(QNetwork)
        clone.__dict__.update(self.__dict__)
        clone.params = self.params.copy()
        return clone


def sync_target(online: QNetwork, target: QNetwork) -> None:
    target.params.assign(online.params)


def _stack(batch: Sequence[Transition]) -> Tuple[np.ndarray, np.ndarray, np.ndarray,
                                                  np.ndarray, np.ndarray]:
    s = np.stack([np.asarray(t.s, dtype=np.float64) for t in batch])
    a = np.array([int(t.a) for t in batch])
    r = np.array([float(t.r) for t in batch])
    s_next = np.stack([np.asarray(t.s_next, dtype=np.float64) for t in batch])
    done = np.array([bool(t.done) for t in batch])
    return s, a, r, s_next, done


def dqn_loss_and_grad(net: QNetwork, target_net: QNetwork, batch: Sequence[Transition],
                      settings: RLSettings,
                      mode: TargetMode = TargetMode.MAX) -> Tuple[float, Grads]:
    """Mean squared TD error and its gradient through Q(s_i, a_i) only."""
    if not batch:
        raise ValueError("batch must be non-empty")
    s, a, r, s_next, done = _stack(batch)
    q_next = target_net.q_values(s_next)
    q_online_next = net.q_values(s_next) if TargetMode(mode) is TargetMode.DOUBLE else None
    y = np.array([
        td_target(r[i], settings.gamma, q_next[i], done[i], mode,
                  None if q_online_next is None else q_online_next[i])
        for i in range(len(batch))
    ])
    cache = net.forward(s)
    rows = np.arange(len(batch))
    q_sa = cache.q[rows, a]
    err = y - q_sa
    loss = float(np.mean(err ** 2))
    dq = np.zeros_like(cache.q)
    dq[rows, a] = -2.0 * err / len(batch)
    return loss, net.backward(cache, dq)


class DQNConfig(BaseModel):
    hidden: List[int] = Field(default_factory=lambda: [100, 100, 100])
    dueling: bool = True
    dueling_mode: DuelingMode = DuelingMode.MEAN
    target_mode: TargetMode = TargetMode.DOUBLE
    optimizer: str = "adam"
    lr: float = Field(1e-3, gt=0)
    batch_size: int = Field(32, ge=1)
    gamma: float = Field(1.0, ge=0.0, le=1.0)
    target_sync: int = Field(500, ge=1)
    replay_capacity: int = Field(100_000, ge=1)
    learn_start: int = Field(32, ge=1)
    train_every: int = Field(1, ge=1)
    exploration: ExplorationPolicy = Field(default_factory=ExplorationPolicy)
    grad_clip: float = 0.0

    @model_validator(mode="after")
    def check_memory(self) -> "DQNConfig":
        if self.replay_capacity < self.batch_size:
            raise ValueError("replay_capacity must be >= batch_size")
        if self.optimizer not in ("sgd", "rmsprop", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        return self

    def settings(self) -> RLSettings:
        return RLSettings(gamma=self.gamma, target_sync=self.target_sync,
                          batch_size=self.batch_size)


def make_optimizer(name: str, lr: float) -> OptState:
    if name == "sgd":
        return OptState.sgd(lr)
    if name == "rmsprop":
        return OptState.rmsprop(lr)
    return OptState.adam(lr)


class DQNLearner:
    """Online/target Q-networks with replay, exploration and periodic target sync."""

    def __init__(self, n_in: int, n_actions: int, config: DQNConfig, seed: int = 0):
        self.n_in = n_in
        self.n_actions = n_actions
        self.config = config
        self.seed = seed
        self.steps = 0
        self.updates = 0
        self.last_loss: Optional[float] = None
        self.rng = np.random.default_rng(seed)
        init_rng = np.random.default_rng(seed + 1)
        self.online = QNetwork(self.n_in, self.config.hidden, self.n_actions,
                               self.config.dueling, self.config.dueling_mode, init_rng)
        self.target = self.online.copy()
        self.memory = ReplayMemory(self.config.replay_capacity)
        self.opt = make_optimizer(self.config.optimizer, self.config.lr)

    def act(self, x: np.ndarray, explore: bool = True) -> int:
        q = self.online.q_values(x)
        if not explore:
            return int(np.argmax(q))
        return self.config.exploration.choose(q, self.steps, self.rng)

    def observe(self, transition: Transition) -> Optional[float]:
        """Store a transition and learn when due; returns the loss if an update ran."""
        self.memory.push(transition)
        self.steps += 1
        if len(self.memory) < max(self.config.learn_start, self.config.batch_size):
            return None
        if self.steps % self.config.train_every:
            return None
        return self.learn(self.memory.sample(self.config.batch_size, self.rng))

    def learn(self, batch: Sequence[Transition]) -> float:
        loss, grads = dqn_loss_and_grad(self.online, self.target, batch,
                                        self.config.settings(), self.config.target_mode)
        if self.config.grad_clip > 0:
            clip_by_global_norm(grads, self.config.grad_clip)
        optimizer_step(self.opt, self.online.params, grads)
        self.updates += 1
        if self.updates % self.config.target_sync == 0:
            sync_target(self.online, self.target)
            logger.debug("target synced after %d updates", self.updates)
        self.last_loss = loss
        return loss

