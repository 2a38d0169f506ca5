from pathlib import Path
from fastapi import APIRouter, HTTPException
from app.schemas import RulesCheckRequest, RulesCheckResponse
from app.config import settings
from ml.knowledge_decision import RuleParseError, count_rules, load_rules, parse_rules

router = APIRouter(prefix="/api/rules", tags=["rules"])

@router.post("/check", response_model=RulesCheckResponse)
async def check_rules(request: RulesCheckRequest):
    """Parse a rules text and count its rules"""
    try:
        rules = parse_rules(request.text, source=request.source)
    except RuleParseError as e:
        raise HTTPException(status_code=400, detail={"message": str(e), "line": e.line_no})
    return RulesCheckResponse(source=request.source, n_rules=count_rules(rules))

@router.get("/default", response_model=RulesCheckResponse)
async def default_rules():
    """Count the rules of the configured rules file"""
    path = Path(settings.RULES_PATH)
    if not path.exists():
        raise HTTPException(status_code=404, detail=f"rules file not found: {path}")
    try:
        rules = load_rules(path)
    except RuleParseError as e:
        raise HTTPException(status_code=400, detail={"message": str(e), "line": e.line_no})
    return RulesCheckResponse(source=str(path), n_rules=count_rules(rules))
