"""
HTTP service tests through FastAPI's TestClient.
"""
import json

import numpy as np
import pytest
from fastapi.testclient import TestClient

from conftest import small_spec
from shape_tracker.main import app
from shape_tracker.simulator import generate_scenario

K_FORM = {"fx": "300", "fy": "300", "cx": "160", "cy": "120", "width": "320", "height": "240"}


@pytest.fixture(scope="module")
def client():
    return TestClient(app)


def _correspondence_csv():
    scenario = generate_scenario(small_spec(n_frames=1), stream=True)
    rows = ["x,y,z,u,v"] + [
        ",".join(f"{v:.17g}" for v in (*p, *px))
        for p, px in zip(scenario.correspondence_points, scenario.correspondence_pixels)
    ]
    return ("\n".join(rows) + "\n").encode(), scenario.t_init


def test_root(client):
    response = client.get("/")
    assert response.status_code == 200
    assert response.json()["status"] == "running"


def test_health(client):
    body = client.get("/health").json()
    assert body["status"] == "healthy"
    assert body["cache_enabled"] is False and body["cache_size"] == 0


def test_register(client):
    content, truth = _correspondence_csv()
    response = client.post("/register", files={"correspondences": ("c.csv", content, "text/csv")}, data=K_FORM)
    assert response.status_code == 200
    body = response.json()
    assert body["success"] is True and body["rms_px"] < 1e-3
    np.testing.assert_allclose(np.array(body["pose"])[:, 3], truth.translation, atol=1e-4)


def test_register_rejects_too_few_points(client):
    content = b"x,y,z,u,v\n0,0,0,160,120\n1,0,0,200,120\n"
    response = client.post("/register", files={"correspondences": ("c.csv", content, "text/csv")}, data=K_FORM)
    assert response.status_code == 400
    body = response.json()
    assert body == {**body, "success": False, "module": "registration", "error_type": "TooFewPoints"}


def test_register_rejects_bad_extension(client):
    response = client.post("/register", files={"correspondences": ("c.exe", b"x", "text/plain")}, data=K_FORM)
    assert response.status_code == 400
    assert response.json()["error_type"] == "InputFormatError"


def test_track_rejects_bad_config(client):
    response = client.post("/track", files={"config": ("run.toml", b"[tracker]\nturbo = 1\n", "text/plain")})
    assert response.status_code == 400
    assert json.loads(response.text)["error_type"] == "ConfigError"
