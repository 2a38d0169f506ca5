"""Noisy object detector standing in for a trained vision model.

Each true object is kept with probability ``1 - p_miss``; kept boxes are jittered,
labels inside a confusion pair may be swapped, and a Poisson number of spurious
food detections is scattered over the image plane. Confidence for true and
spurious detections comes from two Beta laws.
"""

import logging
from collections import defaultdict
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, field_validator

from ml.env import Label, ObstacleType, ProjectedObject

logger = logging.getLogger(__name__)

Box = Tuple[float, float, float, float]


@dataclass(frozen=True)
class Detection:
    kind: Label
    box: Box
    confidence: float
    spurious: bool = False


class ConfusionPair(BaseModel):
    kinds: Tuple[int, int]
    swap_prob: float = Field(0.2, ge=0.0, le=1.0)


class ConfidenceLaw(BaseModel):
    true_alpha: float = 5.0
    true_beta: float = 2.0
    spurious_alpha: float = 2.0
    spurious_beta: float = 5.0

    @field_validator("*")
    @classmethod
    def positive(cls, v: float) -> float:
        if v <= 0:
            raise ValueError("Beta parameters must be positive")
        return v


class DetectorConfig(BaseModel):
    p_miss: float = Field(0.12, ge=0.0, le=1.0)
    p_miss_per_kind: Dict[int, float] = Field(default_factory=dict)
    fp_rate: float = Field(1.0, ge=0.0)
    confusion_pairs: List[ConfusionPair] = Field(
        default_factory=lambda: [ConfusionPair(kinds=(4, 15), swap_prob=0.2)]
    )
    confidence_law: ConfidenceLaw = Field(default_factory=ConfidenceLaw)
    jitter: float = Field(0.03, ge=0.0, le=0.1)
    n_food_kinds: int = 20
    rng_seed: int = 0

    @field_validator("p_miss_per_kind")
    @classmethod
    def probabilities(cls, v: Dict[int, float]) -> Dict[int, float]:
        for kind, p in v.items():
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"p_miss for kind {kind} outside [0, 1]")
        return v

    def miss_prob(self, kind: Label) -> float:
        if isinstance(kind, int):
            return self.p_miss_per_kind.get(kind, self.p_miss)
        return self.p_miss

    @classmethod
    def noiseless(cls, **kwargs) -> "DetectorConfig":
        return cls(**{"p_miss": 0.0, "fp_rate": 0.0, "confusion_pairs": [], "jitter": 0.0, **kwargs})


def _clip_box(cx: float, cy: float, w: float, h: float) -> Box:
    w = min(max(w, 1e-6), 1.0)
    h = min(max(h, 1e-6), 1.0)
    cx = min(max(cx, w / 2), 1.0 - w / 2)
    cy = min(max(cy, h / 2), 1.0 - h / 2)
    return (cx, cy, w, h)


class DetectorSim:
    """Seeded detector; one instance per worker context."""

    def __init__(self, config: Optional[DetectorConfig] = None, seed: Optional[int] = None):
        self.config = config or DetectorConfig()
        self.rng = np.random.default_rng(self.config.rng_seed if seed is None else seed)
        self._swap: Dict[int, Tuple[int, float]] = {}
        for pair in self.config.confusion_pairs:
            a, b = pair.kinds
            self._swap[a] = (b, pair.swap_prob)
            self._swap[b] = (a, pair.swap_prob)

    def detect(self, truth: Sequence[ProjectedObject]) -> List[Detection]:
        return detect(truth, self.config, self.rng, self._swap)


def detect(truth: Sequence[ProjectedObject], cfg: DetectorConfig,
           rng: np.random.Generator,
           swap: Optional[Dict[int, Tuple[int, float]]] = None) -> List[Detection]:
    """One noisy detection pass over the true objects of a frame."""
    if swap is None:
        swap = {}
        for pair in cfg.confusion_pairs:
            a, b = pair.kinds
            swap[a] = (b, pair.swap_prob)
            swap[b] = (a, pair.swap_prob)
    law = cfg.confidence_law
    out: List[Detection] = []

    for obj in truth:
        # fixed draw order per object keeps streams aligned across configs
        u_miss, u_swap = rng.random(2)
        noise = rng.uniform(-1.0, 1.0, size=4)
        conf = float(rng.beta(law.true_alpha, law.true_beta))
        if u_miss < cfg.miss_prob(obj.kind):
            continue
        kind = obj.kind
        if isinstance(kind, int) and kind in swap and u_swap < swap[kind][1]:
            kind = swap[kind][0]
        cx, cy, w, h = obj.box
        j = cfg.jitter
        box = _clip_box(
            cx + j * w * noise[0],
            cy + j * h * noise[1],
            w * (1.0 + j * noise[2]),
            h * (1.0 + j * noise[3]),
        )
        out.append(Detection(kind=kind, box=box, confidence=conf))

    n_spurious = int(rng.poisson(cfg.fp_rate)) if cfg.fp_rate > 0 else 0
    for _ in range(n_spurious):
        kind = int(rng.integers(cfg.n_food_kinds))
        w, h = rng.uniform(0.02, 0.25, size=2)
        cx = rng.uniform(w / 2, 1.0 - w / 2)
        cy = rng.uniform(h / 2, 1.0 - h / 2)
        conf = float(rng.beta(law.spurious_alpha, law.spurious_beta))
        out.append(Detection(kind=kind, box=_clip_box(cx, cy, w, h), confidence=conf, spurious=True))
    return out


def iou(a: Box, b: Box) -> float:
    ax0, ax1 = a[0] - a[2] / 2, a[0] + a[2] / 2
    ay0, ay1 = a[1] - a[3] / 2, a[1] + a[3] / 2
    bx0, bx1 = b[0] - b[2] / 2, b[0] + b[2] / 2
    by0, by1 = b[1] - b[3] / 2, b[1] + b[3] / 2
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a[2] * a[3] + b[2] * b[3] - inter
    return inter / union if union > 0 else 0.0


def match_detections(dets: Sequence[Detection], truth: Sequence[ProjectedObject],
                     iou_threshold: float = 0.5) -> Tuple[List[Optional[int]], List[bool]]:
    """Greedy label-aware matching by descending confidence.

    Returns, per detection, the matched truth index (or None), and per truth
    object whether it was matched.
    """
    matched_truth = [False] * len(truth)
    assignment: List[Optional[int]] = [None] * len(dets)
    order = sorted(range(len(dets)), key=lambda i: -dets[i].confidence)
    for i in order:
        best, best_iou = None, iou_threshold
        for t, obj in enumerate(truth):
            if matched_truth[t] or obj.kind != dets[i].kind:
                continue
            score = iou(dets[i].box, obj.box)
            if score >= best_iou:
                best, best_iou = t, score
        if best is not None:
            matched_truth[best] = True
            assignment[i] = best
    return assignment, matched_truth


@dataclass
class ErrorMix:
    fp_share: float
    fn_share: float
    false_positives: int
    false_negatives: int
    frames: int
    precision_per_kind: Dict[str, float]

    @property
    def total_errors(self) -> int:
        return self.false_positives + self.false_negatives


def _label_name(kind: Label) -> str:
    return kind.value if isinstance(kind, ObstacleType) else str(kind)


def measure_error_mix(cfg: DetectorConfig, n_frames: int,
                      env_sampler: Iterable[List[ProjectedObject]],
                      seed: Optional[int] = None) -> ErrorMix:
    """Empirical share of false positives and false negatives among all errors."""
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    sim = DetectorSim(cfg, seed=seed)
    fp = fn = frames = 0
    tp_kind: Dict[str, int] = defaultdict(int)
    det_kind: Dict[str, int] = defaultdict(int)
    for truth in env_sampler:
        if frames >= n_frames:
            break
        dets = sim.detect(truth)
        assignment, matched = match_detections(dets, truth)
        for det, hit in zip(dets, assignment):
            name = _label_name(det.kind)
            det_kind[name] += 1
            if hit is None:
                fp += 1
            else:
                tp_kind[name] += 1
        fn += matched.count(False)
        frames += 1

    total = fp + fn
    if total == 0:
        logger.info("error mix: no errors over %d frames", frames)
        fp_share = fn_share = 0.0
    else:
        fp_share, fn_share = fp / total, fn / total
    precision = {k: tp_kind[k] / n for k, n in sorted(det_kind.items()) if n > 0}
    return ErrorMix(fp_share, fn_share, fp, fn, frames, precision)
