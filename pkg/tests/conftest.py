import pytest
from pathlib import Path
from fastapi.testclient import TestClient

from app.main import app
from app.config import settings
from ml.env import WorldConfig
from ml.harness import load_config

ROOT = Path(__file__).resolve().parent.parent
RULES_PATH = ROOT / "rules" / "default.rules"

# Small enough to train every variant in a test
TINY_SETTINGS = [
    "episodes=2",
    "eval_episodes=2",
    "seeds=0",
    f"rules_path={RULES_PATH}",
    "world.grid_w=12",
    "world.grid_h=12",
    "world.n_food_items=40",
    "world.n_obstacles=2",
    "world.episode_len=12",
    "a3c.n_workers=2",
    "a3c.hidden=16",
    "meta.hidden=8,8",
    "meta.learn_start=4",
    "meta.batch_size=4",
    "selector.hidden=8",
    "selector.batch_size=4",
    "dqn.hidden=8",
    "dqn.learn_start=4",
    "dqn.batch_size=4",
]

def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="run long stochastic ordering checks")

def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long stochastic checks, run with --runslow")

def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)

@pytest.fixture
def client(monkeypatch):
    """Create a test client reading the shipped rules file."""
    monkeypatch.setattr(settings, "RULES_PATH", str(RULES_PATH))
    with TestClient(app) as test_client:
        yield test_client

@pytest.fixture
def small_world():
    """A 12x12 world that keeps episodes short."""
    return WorldConfig(grid_w=12, grid_h=12, n_food_items=40, n_food_kinds=20,
                       n_obstacles=2, episode_len=15)

@pytest.fixture
def tiny_config(tmp_path):
    return load_config(None, TINY_SETTINGS + [f"output_dir={tmp_path / 'out'}"])

@pytest.fixture
def tiny_config_file(tmp_path):
    """The tiny settings written as a config file."""
    path = tmp_path / "tiny.conf"
    lines = ["# tiny experiment"] + TINY_SETTINGS + [f"output_dir={tmp_path / 'out'}"]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path
