from fastapi.testclient import TestClient

from app.config import settings

SMALL_WORLD = {"world.grid_w": "12", "world.grid_h": "12", "world.n_food_items": "40",
               "world.episode_len": "10"}

def test_root_and_health(client: TestClient):
    """Test the informational endpoints."""
    assert client.get("/health").json() == {"status": "healthy"}
    data = client.get("/").json()
    assert data["max_api_episodes"] == settings.MAX_API_EPISODES

def test_run_random_experiment(client: TestClient):
    """Test a short random-agent run."""
    response = client.post("/api/experiments", json={
        "variant": "random", "episodes": 3, "seed": 1, "overrides": SMALL_WORLD,
    })
    assert response.status_code == 200
    data = response.json()
    assert data["variant"] == "random"
    assert data["episodes"] == 3
    assert [r["episode"] for r in data["records"]] == [0, 1, 2]
    assert all(r["steps"] == 10 and r["share_a1"] is None for r in data["records"])

def test_run_planner_experiment(client: TestClient):
    """Test that the planner reads the configured rules file."""
    response = client.post("/api/experiments", json={
        "variant": "planner", "episodes": 2, "overrides": SMALL_WORLD,
    })
    assert response.status_code == 200
    assert len(response.json()["records"]) == 2

def test_experiment_limits(client: TestClient):
    """Test rejection of oversized and malformed requests."""
    response = client.post("/api/experiments", json={"episodes": settings.MAX_API_EPISODES + 1})
    assert response.status_code == 400
    response = client.post("/api/experiments", json={"episodes": 0})
    assert response.status_code == 422
    response = client.post("/api/experiments", json={"variant": "teleport"})
    assert response.status_code == 400
    assert "unknown variant" in response.json()["detail"]
    response = client.post("/api/experiments", json={"overrides": {"world.colour": "red"}})
    assert response.status_code == 400

def test_missing_rules_file(client: TestClient, monkeypatch, tmp_path):
    """Test the planner without a rules file."""
    monkeypatch.setattr(settings, "RULES_PATH", str(tmp_path / "none.rules"))
    response = client.post("/api/experiments", json={
        "variant": "planner", "episodes": 1, "overrides": SMALL_WORLD,
    })
    assert response.status_code == 404
    assert client.get("/api/rules/default").status_code == 404

def test_check_rules(client: TestClient):
    """Test parsing a rules text."""
    response = client.post("/api/rules/check", json={
        "text": "forbid jump when wall in center\nforbid move_back when healthy in left\n",
    })
    assert response.status_code == 200
    assert response.json() == {"source": "<request>", "n_rules": 2}

def test_check_rules_error_line(client: TestClient):
    """Test that a parse error reports its line."""
    response = client.post("/api/rules/check", json={
        "text": "forbid jump when wall in center\nforbid jump when wall in orbit\n",
        "source": "mine.rules",
    })
    assert response.status_code == 400
    detail = response.json()["detail"]
    assert detail["line"] == 2
    assert detail["message"].startswith("mine.rules:2:")

def test_default_rules(client: TestClient):
    response = client.get("/api/rules/default")
    assert response.status_code == 200
    assert response.json()["n_rules"] == 43

def test_detector_calibration(client: TestClient):
    """Test a small detector calibration."""
    response = client.get("/api/detector/calibrate", params={"frames": 200, "seed": 2})
    assert response.status_code == 200
    data = response.json()
    assert data["frames"] == 200
    assert abs(data["fp_share"] + data["fn_share"] - 1.0) < 1e-9
    assert data["false_positives"] > 0

def test_detector_calibration_limit(client: TestClient):
    response = client.get("/api/detector/calibrate",
                          params={"frames": settings.CALIBRATION_FRAMES + 1})
    assert response.status_code == 400
