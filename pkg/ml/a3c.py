"""Asynchronous advantage actor-critic with knowledge-feature injection.

The policy-value network reads the flattened occupancy of the current and two
previous frames, concatenated with an optional injected feature vector
(presence flags or the stacked important-area scores). Frame stacking stands
in for a recurrent layer.

Workers share one parameter store and one rmsprop state. By default rollouts
from different workers are serialized round-robin so a run is reproducible;
``threaded=True`` runs private-environment workers on threads, with every
update applied under the store's lock.
"""

import logging
import threading
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Deque, List, Optional, Protocol, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field

from ml import env as world
from ml.detector_sim import DetectorConfig
from ml.env import N_ACTIONS, Action, Observation, PlaneGeometry, WorldConfig, WorldState
from ml.features import HISTORY, Percept, Perception, make_perception
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
from ml.rl_core import discounted_return

logger = logging.getLogger(__name__)


class FeatureKind(str, Enum):
    NONE = "none"
    PRESENCE = "presence"
    AREA = "area"


class WorkerConfig(BaseModel):
    n_workers: int = Field(3, ge=1)
    t_max: int = Field(5, ge=1)
    gamma: float = Field(1.0, ge=0.0, le=1.0)
    entropy_coeff: float = Field(0.01, ge=0.0)
    value_loss_coeff: float = Field(0.5, ge=0.0)
    lr: float = Field(7e-4, gt=0)
    rms_rho: float = Field(0.99, gt=0, lt=1)
    rms_eps: float = Field(1e-6, gt=0)
    grad_clip: float = Field(40.0, ge=0.0)
    hidden: List[int] = Field(default_factory=lambda: [128, 64])
    feature_scale: float = Field(0.1, gt=0)
    threaded: bool = False
    results_window: int = Field(100, ge=1)


def encode_state(obs: Observation, features: Optional[np.ndarray],
                 history: Sequence[np.ndarray]) -> np.ndarray:
    """Current occupancy, the previous frames (most recent first), then features.

    Missing history frames are zero-filled.
    """
    current = obs.occupancy.ravel()
    frames = [current] + [np.asarray(h, dtype=np.float64) for h in history[:HISTORY - 1]]
    while len(frames) < HISTORY:
        frames.append(np.zeros_like(current))
    if features is not None:
        frames.append(np.asarray(features, dtype=np.float64).ravel())
    return np.concatenate(frames)


class StateEncoder:
    """Keeps the occupancy history and guards the encoded length."""

    def __init__(self, occupancy_size: int, feature_len: int = 0, feature_scale: float = 1.0):
        self.occupancy_size = occupancy_size
        self.feature_len = feature_len
        self.feature_scale = feature_scale
        self.history: Deque[np.ndarray] = deque(maxlen=HISTORY - 1)

    @property
    def size(self) -> int:
        return HISTORY * self.occupancy_size + self.feature_len

    def reset(self) -> None:
        self.history.clear()

    def encode(self, obs: Observation, features: Optional[np.ndarray] = None) -> np.ndarray:
        scaled = None if features is None else self.feature_scale * np.asarray(features, dtype=np.float64)
        x = encode_state(obs, scaled, list(self.history))
        if len(x) != self.size:
            raise ShapeMismatchError(f"encoded state length {len(x)} != {self.size}")
        self.history.appendleft(obs.occupancy.ravel().copy())
        return x


def feature_vector(percept: Percept, kind: FeatureKind) -> Optional[np.ndarray]:
    if kind is FeatureKind.PRESENCE:
        return percept.presence.astype(np.float64)
    if kind is FeatureKind.AREA:
        return percept.stack.flatten()
    return None


def feature_length(kind: FeatureKind, k: int, n_tracked: int) -> int:
    if kind is FeatureKind.PRESENCE:
        return n_tracked
    if kind is FeatureKind.AREA:
        return HISTORY * k * k
    return 0


class EncodedEnv(Protocol):
    state_size: int
    n_actions: int

    def reset(self, seed: int) -> np.ndarray: ...

    def step(self, action: int) -> Tuple[np.ndarray, float, bool]: ...


class GridTask:
    """The gridworld seen through perception and the state encoder."""

    def __init__(self, world_cfg: WorldConfig, detector_cfg: DetectorConfig,
                 feature_kind: FeatureKind = FeatureKind.NONE, k: int = 3,
                 feature_scale: float = 0.1, seed: int = 0,
                 perception: Optional[Perception] = None):
        self.world_cfg = world_cfg
        self.feature_kind = FeatureKind(feature_kind)
        self.n_actions = N_ACTIONS
        kinds = world.food_kinds(world_cfg.n_food_kinds)
        self.perception = perception or make_perception(
            detector_cfg, kinds, k=k, seed=seed,
            geometry=PlaneGeometry(world_cfg.max_visible_distance),
        )
        n_tracked = len(self.perception.table.tracked)
        self.encoder = StateEncoder(
            world_cfg.occupancy_size,
            feature_length(self.feature_kind, self.perception.k, n_tracked),
            feature_scale,
        )
        self.state_size = self.encoder.size
        self.state: Optional[WorldState] = None
        self.percept: Optional[Percept] = None

    def _encode(self) -> np.ndarray:
        self.percept = self.perception.perceive(self.state)
        return self.encoder.encode(self.percept.observation,
                                   feature_vector(self.percept, self.feature_kind))

    def reset(self, seed: int) -> np.ndarray:
        self.state = world.reset(self.world_cfg, seed=seed)
        self.perception.reset()
        self.encoder.reset()
        return self._encode()

    def step(self, action: int) -> Tuple[np.ndarray, float, bool]:
        self.state, reward, done = world.step(self.state, Action(action))
        return self._encode(), reward, done


@dataclass
class PolicyValueOutput:
    pi: np.ndarray
    v: np.ndarray


class PolicyValueNet:
    """Shared ReLU trunk with a softmax policy head and a scalar value head."""

    def __init__(self, n_in: int, hidden: Sequence[int], n_actions: int = N_ACTIONS,
                 rng: Optional[np.random.Generator] = None):
        if not hidden:
            raise ValueError("policy-value net needs at least one hidden layer")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_in = n_in
        self.n_actions = n_actions
        trunk = NetSpec(layer_sizes=[n_in, *hidden], activations=[Activation.RELU] * len(hidden))
        self.params = Params({
            "trunk": init_layers(trunk, rng),
            "policy": init_layers(NetSpec.mlp(hidden[-1], [], n_actions, Activation.SOFTMAX), rng),
            "value": init_layers(NetSpec.mlp(hidden[-1], [], 1), rng),
        })


@dataclass
class PVCache:
    trunk: Activations
    policy: Activations
    value: Activations

    @property
    def output(self) -> PolicyValueOutput:
        return PolicyValueOutput(pi=self.policy.output, v=self.value.output[..., 0])


def policy_value(params: Params, x: np.ndarray) -> PVCache:
    trunk = forward_layers(params["trunk"], x)
    return PVCache(
        trunk=trunk,
        policy=forward_layers(params["policy"], trunk.output),
        value=forward_layers(params["value"], trunk.output),
    )


@dataclass
class Trajectory:
    states: List[np.ndarray] = field(default_factory=list)
    actions: List[int] = field(default_factory=list)
    rewards: List[float] = field(default_factory=list)
    terminal: bool = False
    bootstrap: float = 0.0

    def __len__(self) -> int:
        return len(self.actions)


@dataclass
class ACStats:
    policy_loss: float
    value_loss: float
    entropy: float


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - np.max(z, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def _returns(traj: Trajectory, gamma: float) -> np.ndarray:
    return discounted_return(traj.rewards, gamma, bootstrap=0.0 if traj.terminal else traj.bootstrap)


def actor_critic_objective(traj: Trajectory, params: Params, cfg: WorkerConfig,
                           baseline: Optional[np.ndarray] = None) -> float:
    """Policy loss minus the entropy bonus plus the weighted value loss.

    The advantage uses ``baseline`` as a constant; by default the critic values
    at ``params``. Differentiating with ``baseline`` fixed gives
    ``actor_critic_grads``.
    """
    cache = policy_value(params, np.stack(traj.states))
    returns = _returns(traj, cfg.gamma)
    out = cache.output
    if baseline is None:
        baseline = out.v.copy()
    adv = returns - np.asarray(baseline, dtype=np.float64)
    logp = _log_softmax(cache.policy.pre[-1])
    rows = np.arange(len(traj))
    policy_loss = -np.sum(logp[rows, traj.actions] * adv)
    entropy = -np.sum(out.pi * logp)
    value_loss = np.sum((returns - out.v) ** 2)
    return float(policy_loss - cfg.entropy_coeff * entropy + cfg.value_loss_coeff * value_loss)


def actor_critic_grads(traj: Trajectory, params: Params,
                       cfg: WorkerConfig) -> Tuple[Grads, ACStats]:
    """Gradient of ``actor_critic_objective`` with the baseline held at the current critic."""
    if len(traj) == 0:
        raise ValueError("trajectory must be non-empty")
    cache = policy_value(params, np.stack(traj.states))
    returns = _returns(traj, cfg.gamma)
    out = cache.output
    adv = returns - out.v
    logp = _log_softmax(cache.policy.pre[-1])
    rows = np.arange(len(traj))
    actions = np.asarray(traj.actions)

    g_pi = np.zeros_like(out.pi)
    g_pi[rows, actions] = -adv * np.exp(-logp[rows, actions])
    g_pi += cfg.entropy_coeff * (logp + 1.0)
    g_v = (-2.0 * cfg.value_loss_coeff * (returns - out.v))[:, None]

    policy_layers, dh_pi = backward_layers(params["policy"], cache.policy, g_pi)
    value_layers, dh_v = backward_layers(params["value"], cache.value, g_v)
    trunk_layers, _ = backward_layers(params["trunk"], cache.trunk, dh_pi + dh_v)
    grads = Params({"trunk": trunk_layers, "policy": policy_layers, "value": value_layers})
    stats = ACStats(
        policy_loss=float(-np.sum(logp[rows, actions] * adv)),
        value_loss=float(np.sum((returns - out.v) ** 2)),
        entropy=float(-np.sum(out.pi * logp)),
    )
    return grads, stats


class SharedParams:
    """Global policy-value parameters with a version counter.

    Two atomic operations: ``snapshot`` and ``apply``.
    """

    def __init__(self, params: Params):
        self.params = params
        self.version = 0
        self._lock = threading.Lock()

    def snapshot(self) -> Params:
        with self._lock:
            return self.params.copy()

    def apply(self, grads: Grads, opt: OptState) -> int:
        with self._lock:
            optimizer_step(opt, self.params, grads)
            self.version += 1
            return self.version

    def __getstate__(self):
        state = self.__dict__.copy()
        del state["_lock"]
        return state

    def __setstate__(self, state) -> None:
        self.__dict__.update(state)
        self._lock = threading.Lock()


def apply_async_update(shared: SharedParams, grads: Grads, opt: OptState) -> int:
    return shared.apply(grads, opt)


@dataclass
class EpisodeResult:
    worker: int
    reward: float
    steps: int


class Worker:
    """One actor-learner with a private environment and parameter snapshot."""

    def __init__(self, index: int, env: EncodedEnv, cfg: WorkerConfig, seed: int):
        self.index = index
        self.env = env
        self.cfg = cfg
        self.rng = np.random.default_rng(seed)
        self.local: Optional[Params] = None
        self.x: Optional[np.ndarray] = None
        self.episode_reward = 0.0
        self.episode_steps = 0
        self.finished: Deque[EpisodeResult] = deque(maxlen=cfg.results_window)
        self.episodes_done = 0

    def _new_episode(self) -> None:
        self.x = self.env.reset(int(self.rng.integers(2**32)))
        self.episode_reward = 0.0
        self.episode_steps = 0

    def sample_action(self, params: Params, x: np.ndarray) -> int:
        pi = policy_value(params, x).output.pi
        return int(self.rng.choice(len(pi), p=pi))

    def pull(self, shared: SharedParams) -> None:
        self.local = shared.snapshot()

    def env_step(self, action: int) -> Tuple[float, bool]:
        x_next, reward, done = self.env.step(action)
        self.episode_reward += reward
        self.episode_steps += 1
        if done:
            self.finished.append(EpisodeResult(self.index, self.episode_reward, self.episode_steps))
            self.episodes_done += 1
            self._new_episode()
        else:
            self.x = x_next
        return reward, done

    def push(self, traj: Trajectory, shared: SharedParams, opt: OptState) -> ACStats:
        grads, stats = actor_critic_grads(traj, self.local, self.cfg)
        if self.cfg.grad_clip > 0:
            clip_by_global_norm(grads, self.cfg.grad_clip)
        apply_async_update(shared, grads, opt)
        return stats


def rollout(worker: Worker, shared: SharedParams) -> Trajectory:
    """Up to ``t_max`` steps from the worker's current state with a fresh snapshot."""
    if worker.x is None:
        worker._new_episode()
    worker.pull(shared)
    traj = Trajectory()
    for _ in range(worker.cfg.t_max):
        x = worker.x
        action = worker.sample_action(worker.local, x)
        reward, done = worker.env_step(action)
        traj.states.append(x)
        traj.actions.append(action)
        traj.rewards.append(reward)
        if done:
            traj.terminal = True
            break
    if not traj.terminal:
        traj.bootstrap = float(policy_value(worker.local, worker.x).output.v)
    return traj


class DrivenWorker:
    """Worker whose environment is stepped by an outside loop.

    ``propose`` samples the policy's action for the current encoded state;
    ``record`` takes the action actually executed and its reward. Updates are
    pushed every ``t_max`` recorded steps and at episode end.
    """

    def __init__(self, index: int, cfg: WorkerConfig, seed: int):
        self.index = index
        self.cfg = cfg
        self.rng = np.random.default_rng(seed)
        self.local: Optional[Params] = None
        self.traj = Trajectory()
        self._x: Optional[np.ndarray] = None
        self.last_stats: Optional[ACStats] = None

    def propose(self, x: np.ndarray, shared: SharedParams, opt: OptState) -> int:
        if self.local is None:
            self.local = shared.snapshot()
        if len(self.traj) >= self.cfg.t_max:
            self.traj.bootstrap = float(policy_value(self.local, x).output.v)
            self._push(shared, opt)
        self._x = x
        pi = policy_value(self.local, x).output.pi
        return int(self.rng.choice(len(pi), p=pi))

    def greedy(self, x: np.ndarray, shared: SharedParams) -> int:
        params = self.local if self.local is not None else shared.snapshot()
        return int(np.argmax(policy_value(params, x).output.pi))

    def record(self, action: int, reward: float, done: bool,
               shared: SharedParams, opt: OptState) -> None:
        if self._x is None:
            raise RuntimeError("record called before propose")
        self.traj.states.append(self._x)
        self.traj.actions.append(int(action))
        self.traj.rewards.append(float(reward))
        self._x = None
        if done:
            self.traj.terminal = True
            self._push(shared, opt)

    def _push(self, shared: SharedParams, opt: OptState) -> None:
        grads, self.last_stats = actor_critic_grads(self.traj, self.local, self.cfg)
        if self.cfg.grad_clip > 0:
            clip_by_global_norm(grads, self.cfg.grad_clip)
        apply_async_update(shared, grads, opt)
        self.traj = Trajectory()
        self.local = shared.snapshot()


class A3CTrainer:
    """Shared store, shared rmsprop state and the worker pool.

    With a driven worker, index 0 is stepped by the caller and the remaining
    ``n_workers - 1`` workers own private environments.
    """

    def __init__(self, cfg: WorkerConfig, state_size: int, envs: Sequence[EncodedEnv],
                 seed: int = 0, n_actions: int = N_ACTIONS, driven: bool = False):
        expected = cfg.n_workers - 1 if driven else cfg.n_workers
        if len(envs) != expected:
            raise ValueError(f"expected {expected} private environments, got {len(envs)}")
        self.cfg = cfg
        self.state_size = state_size
        seeds = np.random.SeedSequence(seed).spawn(cfg.n_workers + 1)
        init_rng = np.random.default_rng(seeds[0])
        net = PolicyValueNet(state_size, cfg.hidden, n_actions, init_rng)
        self.shared = SharedParams(net.params)
        self.opt = OptState.rmsprop(cfg.lr, rho=cfg.rms_rho, eps=cfg.rms_eps)
        offset = 1 if driven else 0
        self.driver: Optional[DrivenWorker] = (
            DrivenWorker(0, cfg, int(seeds[1].generate_state(1)[0])) if driven else None
        )
        self.workers = [
            Worker(i + offset, e, cfg, int(seeds[i + offset + 1].generate_state(1)[0]))
            for i, e in enumerate(envs)
        ]
        self._threads: List[threading.Thread] = []
        self._stop = threading.Event()

    def background_round(self) -> None:
        """One rollout and update for every private worker, in index order."""
        if self.cfg.threaded:
            return
        for w in self.workers:
            w.push(rollout(w, self.shared), self.shared, self.opt)

    def run_episode_for_worker(self, index: int = 0) -> EpisodeResult:
        """Roll worker ``index`` until its current episode ends.

        After each of its rollouts every other private worker performs one
        rollout, keeping the serialization fixed.
        """
        target = next(w for w in self.workers if w.index == index)
        done_before = target.episodes_done
        while target.episodes_done == done_before:
            for w in self.workers:
                w.push(rollout(w, self.shared), self.shared, self.opt)
                if w is target and target.episodes_done > done_before:
                    break
        return target.finished[-1]

    def _thread_loop(self, w: Worker) -> None:
        while not self._stop.is_set():
            w.push(rollout(w, self.shared), self.shared, self.opt)

    def start(self) -> None:
        if not self.cfg.threaded or self._threads:
            return
        self._stop.clear()
        for w in self.workers:
            t = threading.Thread(target=self._thread_loop, args=(w,), daemon=True,
                                 name=f"a3c-worker-{w.index}")
            t.start()
            self._threads.append(t)
        logger.info("started %d worker threads", len(self._threads))

    def stop(self) -> None:
        self._stop.set()
        for t in self._threads:
            t.join()
        self._threads = []

    def greedy_action(self, x: np.ndarray) -> int:
        return int(np.argmax(policy_value(self.shared.params, x).output.pi))

    def __getstate__(self):
        state = self.__dict__.copy()
        state["_threads"] = []
        del state["_stop"]
        return state

    def __setstate__(self, state) -> None:
        self.__dict__.update(state)
        self._stop = threading.Event()
