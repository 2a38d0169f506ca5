from fastapi import APIRouter, HTTPException
from app.schemas import ExperimentRequest, ExperimentResponse, EpisodeSummary
from app.config import settings
from ml.harness import ConfigError, load_config, run_seed

router = APIRouter(prefix="/api/experiments", tags=["experiments"])

@router.post("", response_model=ExperimentResponse)
def run_experiment(request: ExperimentRequest):
    """Train one variant for a bounded number of episodes and return its log"""
    if request.episodes > settings.MAX_API_EPISODES:
        raise HTTPException(
            status_code=400,
            detail=f"episodes must be <= {settings.MAX_API_EPISODES} through the API"
        )

    overrides = [f"{key}={value}" for key, value in request.overrides.items()]
    overrides += [
        f"variant={request.variant}",
        f"episodes={request.episodes}",
        f"seeds={request.seed}",
        f"rules_path={settings.RULES_PATH}",
    ]
    try:
        cfg = load_config(None, overrides)
        _, log = run_seed(cfg, request.seed)
    except FileNotFoundError as e:
        raise HTTPException(status_code=404, detail=str(e))
    except (ConfigError, ValueError) as e:
        raise HTTPException(status_code=400, detail=str(e))

    rewards = log.rewards
    return ExperimentResponse(
        variant=cfg.variant,
        seed=request.seed,
        episodes=len(log),
        mean_reward=float(rewards.mean()),
        std_reward=float(rewards.std()),
        records=[
            EpisodeSummary(**record.model_dump(include=set(EpisodeSummary.model_fields)))
            for record in log
        ],
    )
