from fastapi import APIRouter, HTTPException, Query
from app.schemas import CalibrationResponse
from app.config import settings
from ml import env as world
from ml.detector_sim import DetectorConfig, measure_error_mix

router = APIRouter(prefix="/api/detector", tags=["detector"])

@router.get("/calibrate", response_model=CalibrationResponse)
def calibrate(frames: int = Query(500, ge=1), seed: int = Query(0, ge=0)):
    """Measure the simulated detector's error mix on random views"""
    if frames > settings.CALIBRATION_FRAMES:
        raise HTTPException(
            status_code=400,
            detail=f"frames must be <= {settings.CALIBRATION_FRAMES} through the API"
        )

    world_cfg = world.WorldConfig()
    mix = measure_error_mix(DetectorConfig(), frames, world.random_views(world_cfg, frames, seed=seed), seed=seed)
    return CalibrationResponse(
        frames=mix.frames,
        fp_share=mix.fp_share,
        fn_share=mix.fn_share,
        false_positives=mix.false_positives,
        false_negatives=mix.false_negatives,
        precision_per_kind=mix.precision_per_kind,
    )
