import logging
from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware
from app.routers import experiments, rules, detector
from app.config import settings
from ml.cli import LOG_FORMAT

logging.basicConfig(level=settings.LOG_LEVEL.upper(), format=LOG_FORMAT)

app = FastAPI(
    title="Knowledge Injection Lab API",
    description="Gridworld laboratory for reinforcement learning with external knowledge",
    version="1.0.0",
    debug=settings.DEBUG
)

# CORS middleware
app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)

# Include routers
app.include_router(experiments.router)
app.include_router(rules.router)
app.include_router(detector.router)

@app.get("/")
async def root():
    """Root endpoint"""
    return {
        "message": "Knowledge Injection Lab API",
        "version": "1.0.0",
        "docs": "/docs",
        "max_api_episodes": settings.MAX_API_EPISODES
    }

@app.get("/health")
async def health_check():
    """Health check endpoint"""
    return {"status": "healthy"}
