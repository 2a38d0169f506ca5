"""Experiment runner: config loading, episode loop, metrics, plots and sweeps.

Every run is determined by (config, seeds). Episode seeds are derived from
``SeedSequence([seed, episode])`` so that the CSV written for a run never
changes between invocations.
"""

import logging
import math
import time
import typing
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import joblib
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from ml.a3c import WorkerConfig
from ml.action_selector import SelectorConfig, selection_share_stats
from ml.agents import EpisodeOutcome, KnowledgeSource, MetaAgent, Variant, build_agent, parse_variant
from ml.detector_sim import DetectorConfig
from ml.env import WorldConfig
from ml.features import HISTORY, RegionMask
from ml.knowledge_decision import MetaLearner, MetaLearnerConfig
from ml.rl_core import DQNConfig, ExplorationPolicy

logger = logging.getLogger(__name__)

CSV_COLUMNS = ["episode", "seed", "reward", "steps", "share_a1", "share_a2", "share_other", "wall_ms"]
SWEEP_AREAS = (4, 9, 16, 25)
SWEEP_SIZES = (25, 50, 100, 200, 300)
EVAL_OFFSET = 1_000_000


class ConfigError(ValueError):
    def __init__(self, message: str, path: Optional[str] = None, line: Optional[int] = None):
        where = path or "<config>"
        if line is not None:
            where = f"{where}:{line}"
        super().__init__(f"{where}: {message}")
        self.path = path
        self.line = line


class SweepGrid(BaseModel):
    areas: List[int] = Field(default_factory=lambda: [4, 9, 16])
    layers: List[int] = Field(default_factory=lambda: [1, 2, 3])
    sizes: List[int] = Field(default_factory=lambda: [50, 100, 200])

    @field_validator("areas")
    @classmethod
    def check_areas(cls, v: List[int]) -> List[int]:
        bad = [a for a in v if a not in SWEEP_AREAS]
        if bad or not v:
            raise ValueError(f"areas must be drawn from {SWEEP_AREAS}")
        return v

    @field_validator("layers")
    @classmethod
    def check_layers(cls, v: List[int]) -> List[int]:
        if not v or any(n < 1 or n > 5 for n in v):
            raise ValueError("hidden layer counts must lie in [1, 5]")
        return v

    @field_validator("sizes")
    @classmethod
    def check_sizes(cls, v: List[int]) -> List[int]:
        bad = [s for s in v if s not in SWEEP_SIZES]
        if bad or not v:
            raise ValueError(f"layer sizes must be drawn from {SWEEP_SIZES}")
        return v


class BaselineDQNConfig(DQNConfig):
    """Defaults for the pixel-only stand-in baselines (dqn, dueling_ddqn)."""

    hidden: List[int] = Field(default_factory=lambda: [128, 64])
    learn_start: int = Field(1000, ge=1)
    train_every: int = Field(4, ge=1)
    exploration: ExplorationPolicy = Field(default_factory=lambda: ExplorationPolicy(steps=50_000))


class ExperimentConfig(BaseModel):
    variant: str = Variant.DRL_EK.value
    knowledge: KnowledgeSource = KnowledgeSource.META
    episodes: int = Field(5000, ge=1)
    eval_episodes: int = Field(200, ge=1)
    seeds: List[int] = Field(default_factory=lambda: [0])
    k: int = Field(3, ge=1)
    output_dir: str = "outputs"
    rules_path: str = "rules/default.rules"
    tracked: Optional[List[int]] = None
    scores: Dict[int, float] = Field(default_factory=dict)
    region_mask: RegionMask = RegionMask.FULL
    planner_min_confidence: float = Field(0.25, ge=0.0, le=1.0)
    window: int = Field(100, ge=1)
    share_window: int = Field(350, ge=1)
    log_every: int = Field(100, ge=1)
    record_timing: bool = False
    checkpoint: bool = True
    world: WorldConfig = Field(default_factory=WorldConfig)
    detector: DetectorConfig = Field(default_factory=DetectorConfig)
    a3c: WorkerConfig = Field(default_factory=WorkerConfig)
    meta: MetaLearnerConfig = Field(default_factory=MetaLearnerConfig)
    selector: SelectorConfig = Field(default_factory=SelectorConfig)
    dqn: BaselineDQNConfig = Field(default_factory=BaselineDQNConfig)
    sweep: SweepGrid = Field(default_factory=SweepGrid)

    @field_validator("variant")
    @classmethod
    def known_variant(cls, v: str) -> str:
        return parse_variant(v).value

    @field_validator("seeds")
    @classmethod
    def at_least_one_seed(cls, v: List[int]) -> List[int]:
        if not v:
            raise ValueError("at least one seed is required")
        return v

    @model_validator(mode="after")
    def sync_meta_k(self) -> "ExperimentConfig":
        if self.meta.k != self.k:
            self.meta = self.meta.model_copy(update={"k": self.k})
        return self

    @model_validator(mode="after")
    def sync_detector_kinds(self) -> "ExperimentConfig":
        kinds = self.world.n_food_kinds
        if self.detector.n_food_kinds == kinds:
            return self
        if "n_food_kinds" in self.detector.model_fields_set:
            raise ValueError(f"detector.n_food_kinds={self.detector.n_food_kinds} "
                             f"does not match world.n_food_kinds={kinds}")
        self.detector = self.detector.model_copy(update={"n_food_kinds": kinds})
        return self

    def selector_config(self) -> SelectorConfig:
        update: Dict[str, Any] = {"feature_len": HISTORY * self.k * self.k}
        if "tau_steps" not in self.selector.model_fields_set:
            update["tau_steps"] = max(1, self.episodes * self.world.episode_len // 2)
        return self.selector.model_copy(update=update)

    def for_variant(self, variant: Union[str, Variant], **update) -> "ExperimentConfig":
        name = variant.value if isinstance(variant, Variant) else parse_variant(variant).value
        return self.model_copy(update={"variant": name, **update})


# ---------------------------------------------------------------- config file

def _is_list(annotation) -> bool:
    origin = typing.get_origin(annotation)
    if origin in (list, List):
        return True
    if origin is Union:
        return any(_is_list(arg) for arg in typing.get_args(annotation) if arg is not type(None))
    return False


def _is_model(annotation) -> bool:
    return isinstance(annotation, type) and issubclass(annotation, BaseModel)


def _split_list(value: str) -> List[str]:
    return [item.strip() for item in value.split(",") if item.strip()]


def _parse_confusion(value: str) -> List[Dict[str, Any]]:
    if value.strip().lower() in ("", "none"):
        return []
    pairs = []
    for item in _split_list(value):
        parts = item.split(":")
        if len(parts) != 3:
            raise ValueError(f"confusion pair {item!r} is not <kind>:<kind>:<prob>")
        pairs.append({"kinds": (int(parts[0]), int(parts[1])), "swap_prob": float(parts[2])})
    return pairs


def _assign(tree: Dict[str, Any], key: str, value: str) -> None:
    """Place one dotted key into the nested dict, checking it against the models."""
    parts = key.split(".")
    head = parts[0]

    if head == "score":
        if len(parts) != 2 or not parts[1].isdigit():
            raise ValueError(f"score key must be score.<kind>, got {key!r}")
        tree.setdefault("scores", {})[parts[1]] = value
        return
    if head == "detector" and len(parts) == 3 and parts[1] == "p_miss" and parts[2].isdigit():
        tree.setdefault("detector", {}).setdefault("p_miss_per_kind", {})[parts[2]] = value
        return
    if key == "detector.confusion":
        tree.setdefault("detector", {})["confusion_pairs"] = _parse_confusion(value)
        return

    model = ExperimentConfig
    node = tree
    for i, part in enumerate(parts):
        fields = model.model_fields
        if part not in fields or (i == 0 and part in ("scores",)):
            raise ValueError(f"unknown key {key!r}")
        annotation = fields[part].annotation
        last = i == len(parts) - 1
        if last:
            if _is_model(annotation):
                raise ValueError(f"key {key!r} names a section, not a value")
            node[part] = _split_list(value) if _is_list(annotation) else value
            return
        if not _is_model(annotation):
            raise ValueError(f"unknown key {key!r}")
        node = node.setdefault(part, {})
        model = annotation


def _parse_lines(lines: Iterable[Tuple[Optional[int], str]], source: str,
                 tree: Dict[str, Any], origin: Dict[str, Tuple[str, Optional[int]]]) -> None:
    for line_no, raw in lines:
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected key=value, got {line!r}", source, line_no)
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError("empty key", source, line_no)
        try:
            _assign(tree, key, value)
        except ValueError as e:
            raise ConfigError(str(e), source, line_no)
        origin[key] = (source, line_no)


def load_config(path: Optional[Union[str, Path]] = None,
                overrides: Optional[Sequence[str]] = None) -> ExperimentConfig:
    """Read a flat ``key=value`` file, then apply ``key=value`` overrides in order."""
    tree: Dict[str, Any] = {}
    origin: Dict[str, Tuple[str, Optional[int]]] = {}
    source = str(path) if path is not None else "<defaults>"
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config: {e.strerror or e}", source)
        _parse_lines(enumerate(text.splitlines(), start=1), source, tree, origin)
    if overrides:
        _parse_lines(((None, o) for o in overrides), "<override>", tree, origin)
    try:
        return ExperimentConfig(**tree)
    except ValidationError as e:
        err = e.errors()[0]
        loc = ".".join(str(p) for p in err["loc"])
        src, line = _locate(loc, origin, source)
        raise ConfigError(f"{loc or 'config'}: {err['msg']}", src, line)


def _locate(loc: str, origin: Mapping[str, Tuple[str, Optional[int]]],
            default: str) -> Tuple[str, Optional[int]]:
    if loc in origin:
        return origin[loc]
    for key, where in origin.items():
        if loc.startswith(key) or key.startswith(loc):
            return where
    return default, None


# ---------------------------------------------------------------- metrics

class EpisodeRecord(BaseModel):
    episode: int
    seed: int
    reward: float
    steps: int
    share_a1: Optional[float] = None
    share_a2: Optional[float] = None
    share_other: Optional[float] = None
    wall_ms: float = 0.0

    @property
    def has_shares(self) -> bool:
        return self.share_a1 is not None


class MetricsLog:
    """Append-only sequence of episode records for one variant."""

    def __init__(self, variant: str = "", records: Optional[Iterable[EpisodeRecord]] = None,
                 window: int = 100):
        self.variant = variant
        self.window = window
        self._records: List[EpisodeRecord] = list(records or [])

    def __len__(self) -> int:
        return len(self._records)

    def __iter__(self):
        return iter(self._records)

    @property
    def records(self) -> Tuple[EpisodeRecord, ...]:
        return tuple(self._records)

    def append(self, record: EpisodeRecord) -> None:
        self._records.append(record)

    def extend(self, other: "MetricsLog") -> None:
        self._records.extend(other.records)

    @property
    def rewards(self) -> np.ndarray:
        return np.array([r.reward for r in self._records], dtype=np.float64)

    def tail(self, n: int) -> np.ndarray:
        return self.rewards[-n:] if n > 0 else self.rewards

    @property
    def has_shares(self) -> bool:
        return any(r.has_shares for r in self._records)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([r.model_dump() for r in self._records], columns=CSV_COLUMNS)

    def write_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False, lineterminator="\n")
        return path

    @classmethod
    def read_csv(cls, path: Union[str, Path], variant: str = "") -> "MetricsLog":
        frame = pd.read_csv(path, float_precision="round_trip")
        missing = [c for c in CSV_COLUMNS if c not in frame.columns]
        if missing:
            raise ValueError(f"{path}: missing columns {missing}")
        records = []
        for row in frame[CSV_COLUMNS].to_dict("records"):
            records.append(EpisodeRecord(**{
                key: None if isinstance(value, float) and math.isnan(value) else value
                for key, value in row.items()
            }))
        return cls(variant or Path(path).stem, records)


def moving_average(log: Union[MetricsLog, Sequence[float], np.ndarray], window: int) -> np.ndarray:
    """Trailing mean; the first points average over what is available.

    A window covering the whole series gives the global mean at every point.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    values = log.rewards if isinstance(log, MetricsLog) else np.asarray(log, dtype=np.float64)
    n = len(values)
    if n == 0:
        return values
    if window >= n:
        return np.full(n, values.mean())
    csum = np.concatenate([[0.0], np.cumsum(values)])
    idx = np.arange(n)
    start = np.maximum(idx - window + 1, 0)
    return (csum[idx + 1] - csum[start]) / (idx + 1 - start)


# ---------------------------------------------------------------- runs

def episode_seed(seed: int, episode: int) -> int:
    return int(np.random.SeedSequence([seed, episode]).generate_state(1)[0])


def _record(cfg: ExperimentConfig, seed: int, episode: int, outcome: EpisodeOutcome,
            elapsed_ms: float) -> EpisodeRecord:
    shares: Tuple[Optional[float], ...] = (None, None, None)
    if outcome.selections:
        shares = selection_share_stats(outcome.selections)
    return EpisodeRecord(
        episode=episode,
        seed=seed,
        reward=outcome.reward,
        steps=outcome.steps,
        share_a1=shares[0],
        share_a2=shares[1],
        share_other=shares[2],
        wall_ms=round(elapsed_ms, 3) if cfg.record_timing else 0.0,
    )


def _play(agent, cfg: ExperimentConfig, seed: int, episodes: int, learn: bool,
          offset: int = 0) -> MetricsLog:
    log = MetricsLog(cfg.variant, window=cfg.window)
    for episode in range(episodes):
        started = time.perf_counter()
        outcome = agent.run_episode(episode_seed(seed, offset + episode), learn=learn)
        log.append(_record(cfg, seed, episode, outcome, 1000.0 * (time.perf_counter() - started)))
        if (episode + 1) % cfg.log_every == 0:
            logger.info("variant=%s seed=%d learn=%s episode=%d avg_reward=%.3f",
                        cfg.variant, seed, learn, episode + 1, log.tail(cfg.window).mean())
    return log


def run_seed(cfg: ExperimentConfig, seed: int, agent=None):
    """Train one agent for ``cfg.episodes`` episodes; returns (agent, log)."""
    agent = agent if agent is not None else build_agent(cfg, seed)
    try:
        log = _play(agent, cfg, seed, cfg.episodes, learn=True)
    finally:
        if hasattr(agent, "close"):
            agent.close()
    return agent, log


def run_experiment(cfg: ExperimentConfig) -> MetricsLog:
    """Training episodes for every seed in order, as one log."""
    combined = MetricsLog(cfg.variant, window=cfg.window)
    for seed in cfg.seeds:
        _, log = run_seed(cfg, seed)
        combined.extend(log)
    return combined


def evaluate(agent, cfg: ExperimentConfig, episodes: Optional[int] = None,
             seed: Optional[int] = None) -> MetricsLog:
    """Frozen-policy episodes on seeds disjoint from training."""
    seed = cfg.seeds[0] if seed is None else seed
    return _play(agent, cfg, seed, episodes or cfg.eval_episodes, learn=False, offset=EVAL_OFFSET)


def run_paths(cfg: ExperimentConfig, seed: int, suffix: str = "") -> Dict[str, Path]:
    stem = f"{cfg.variant}_seed{seed}{suffix}"
    out = Path(cfg.output_dir)
    return {"csv": out / f"{stem}.csv", "checkpoint": out / f"{stem}.joblib", "stem": Path(stem)}


def save_checkpoint(agent, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    joblib.dump(agent, path)
    return path


def load_checkpoint(path: Union[str, Path]):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return joblib.load(path)


def train(cfg: ExperimentConfig, plots: bool = True) -> Dict[int, MetricsLog]:
    """Train every seed and write its CSV, checkpoint and plots under ``output_dir``."""
    logs = {}
    for seed in cfg.seeds:
        agent, log = run_seed(cfg, seed)
        paths = run_paths(cfg, seed)
        log.write_csv(paths["csv"])
        if cfg.checkpoint:
            save_checkpoint(agent, paths["checkpoint"])
        if plots:
            emit_plots(log, cfg.output_dir, str(paths["stem"]), cfg.window)
        logger.info("variant=%s seed=%d wrote %s", cfg.variant, seed, paths["csv"])
        if log.has_shares:
            logger.info("variant=%s seed=%d share_a2_slope=%.6f", cfg.variant, seed,
                        share_trend_slope(log, cfg.share_window))
        logs[seed] = log
    return logs


# ---------------------------------------------------------------- reports

def compare_table(logs: Mapping[str, Union[MetricsLog, Sequence[MetricsLog]]],
                  tail: int = 100) -> pd.DataFrame:
    """Mean and population std of the last ``tail`` rewards per variant."""
    rows = []
    for variant, entry in logs.items():
        group = [entry] if isinstance(entry, MetricsLog) else list(entry)
        if not group or any(len(log) == 0 for log in group):
            raise ValueError(f"empty log for variant {variant!r}")
        values = np.concatenate([log.tail(tail) for log in group])
        rows.append({"variant": variant, "mean": float(values.mean()),
                     "std": float(values.std()), "n": int(len(values))})
    return pd.DataFrame(rows, columns=["variant", "mean", "std", "n"])


def _line_chart(path: Path, x: np.ndarray, series: Mapping[str, np.ndarray],
                ylabel: str) -> Path:
    plt.rcParams["svg.hashsalt"] = "knowledge-lab"
    fig, ax = plt.subplots(figsize=(8, 4.5))
    for label, y in series.items():
        ax.plot(x, y, label=label)
    ax.set_xlabel("episode")
    ax.set_ylabel(ylabel)
    ax.grid(True, alpha=0.3)
    ax.legend(loc="best")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def emit_plots(log: MetricsLog, out_dir: Union[str, Path], stem: Optional[str] = None,
               window: Optional[int] = None) -> List[Path]:
    """Reward curve CSV and SVG; selection-share CSV and SVG when telemetry exists."""
    if len(log) == 0:
        raise ValueError("cannot plot an empty log")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = stem or log.variant or "run"
    frame = log.to_frame()
    episodes = frame["episode"].to_numpy()
    avg = moving_average(log, window or log.window)

    written = []
    reward_csv = out / f"{stem}_reward.csv"
    pd.DataFrame({"episode": episodes, "reward": log.rewards, "moving_avg": avg}).to_csv(
        reward_csv, index=False, lineterminator="\n")
    written.append(reward_csv)
    written.append(_line_chart(out / f"{stem}_reward.svg", episodes,
                               {"reward": log.rewards, "moving average": avg}, "reward"))

    if log.has_shares:
        shares = frame[["episode", "share_a1", "share_a2", "share_other"]].dropna()
        share_csv = out / f"{stem}_shares.csv"
        shares.to_csv(share_csv, index=False, lineterminator="\n")
        written.append(share_csv)
        written.append(_line_chart(
            out / f"{stem}_shares.svg", shares["episode"].to_numpy(),
            {"knowledge decider": shares["share_a1"].to_numpy(),
             "rl module": shares["share_a2"].to_numpy(),
             "other": shares["share_other"].to_numpy()},
            "selection share"))
    return written


def share_trend_slope(log: MetricsLog, window: int = 350) -> float:
    """Least-squares slope of the mean share_a2 per block of ``window`` episodes.

    Runs shorter than two windows use blocks of a fifth of the run.
    """
    values = np.array([r.share_a2 for r in log if r.share_a2 is not None], dtype=np.float64)
    if len(values) == 0:
        raise ValueError("log has no selection telemetry")
    if len(values) < 2 * window:
        window = max(1, len(values) // 5)
    n_blocks = len(values) // window
    if n_blocks < 2:
        return 0.0
    means = values[:n_blocks * window].reshape(n_blocks, window).mean(axis=1)
    return float(np.polyfit(np.arange(n_blocks, dtype=np.float64), means, 1)[0])


# ---------------------------------------------------------------- sweep and orderings

def sweep(cfg: ExperimentConfig, seed: Optional[int] = None) -> pd.DataFrame:
    """Train and evaluate the meta-learner over the (areas, layers, size) grid."""
    seed = cfg.seeds[0] if seed is None else seed
    base = cfg.meta.model_dump(exclude={"k", "hidden"})
    rows = []
    for areas in cfg.sweep.areas:
        k = math.isqrt(areas)
        for n_layers in cfg.sweep.layers:
            for size in cfg.sweep.sizes:
                learner = MetaLearner.for_sweep(k, n_layers, size, seed, **base)
                run_cfg = cfg.for_variant(Variant.META, k=k, meta=learner.config)
                agent = MetaAgent(run_cfg, seed, learner=learner)
                _play(agent, run_cfg, seed, run_cfg.episodes, learn=True)
                rewards = evaluate(agent, run_cfg, seed=seed).rewards
                rows.append({"areas": areas, "layers": n_layers, "size": size,
                             "mean_reward": float(rewards.mean()),
                             "std_reward": float(rewards.std())})
                logger.info("sweep areas=%d layers=%d size=%d mean_reward=%.3f",
                            areas, n_layers, size, rows[-1]["mean_reward"])
    return pd.DataFrame(rows, columns=["areas", "layers", "size", "mean_reward", "std_reward"])


@dataclass
class OrderingResult:
    better: str
    worse: str
    wins: int
    total: int
    required: int
    margins: List[float]
    allow_equal: bool = False

    @property
    def passed(self) -> bool:
        return self.wins >= self.required


ORDERINGS: Tuple[Tuple[str, str, bool], ...] = (
    ("planner", "random", False),
    ("meta", "planner", False),
    ("a3c_area", "a3c", True),
    ("drl_ek", "a3c", False),
)


def ordering_check(cfg: ExperimentConfig, better: str, worse: str,
                   seeds: Optional[Sequence[int]] = None, tail: int = 200,
                   allow_equal: bool = False) -> OrderingResult:
    """Per seed, compare tail mean training rewards of two variants.

    Passes when the direction holds in at least 60 percent of seeds.
    """
    seeds = list(seeds if seeds is not None else cfg.seeds)
    margins = []
    for seed in seeds:
        _, log_b = run_seed(cfg.for_variant(better), seed)
        _, log_w = run_seed(cfg.for_variant(worse), seed)
        margins.append(float(log_b.tail(tail).mean() - log_w.tail(tail).mean()))
    wins = sum(1 for m in margins if m > 0 or (allow_equal and m == 0))
    result = OrderingResult(better, worse, wins, len(seeds), math.ceil(0.6 * len(seeds)),
                            margins, allow_equal)
    logger.info("ordering %s %s %s: %d/%d seeds", better, ">=" if allow_equal else ">",
                worse, wins, len(seeds))
    return result
