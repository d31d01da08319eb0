from fastapi.testclient import TestClient

from src.main import app

client = TestClient(app)


def test_health():
    """Test that the health endpoint reports ok."""
    response = client.get("/health")
    assert response.status_code == 200
    assert response.json() == {"status": "ok"}


def test_healthz():
    """Test that the alternative health endpoint reports ok."""
    response = client.get("/healthz")
    assert response.status_code == 200
    assert response.json() == {"status": "ok"}
