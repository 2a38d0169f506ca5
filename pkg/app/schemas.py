from pydantic import BaseModel, Field
from typing import Optional, List, Dict

# Experiment schemas
class ExperimentRequest(BaseModel):
    variant: str = "random"
    episodes: int = Field(5, ge=1)
    seed: int = 0
    overrides: Dict[str, str] = Field(default_factory=dict)

class EpisodeSummary(BaseModel):
    episode: int
    reward: float
    steps: int
    share_a1: Optional[float] = None
    share_a2: Optional[float] = None
    share_other: Optional[float] = None

class ExperimentResponse(BaseModel):
    variant: str
    seed: int
    episodes: int
    mean_reward: float
    std_reward: float
    records: List[EpisodeSummary]

# Rules schemas
class RulesCheckRequest(BaseModel):
    text: str
    source: str = "<request>"

class RulesCheckResponse(BaseModel):
    source: str
    n_rules: int

# Detector schemas
class CalibrationResponse(BaseModel):
    frames: int
    fp_share: float
    fn_share: float
    false_positives: int
    false_negatives: int
    precision_per_kind: Dict[str, float]
