import io
import threading

import numpy as np
import pytest
from fastapi.testclient import TestClient
from PIL import Image

from facessd import __version__
from facessd.data import to_uint8
from facessd.model import save_weights
from facessd.models import DatasetStats, InferenceConfig
from facessd.service import SERVICE_NAME, create_app

STATS = DatasetStats(mean=(0.5, 0.5, 0.5), std=(0.25, 0.25, 0.25))


def ppm_bytes(image: np.ndarray) -> bytes:
    buffer = io.BytesIO()
    Image.fromarray(to_uint8(image)).save(buffer, format="PPM")
    return buffer.getvalue()


@pytest.fixture
def weights(tmp_path, smile_model):
    return save_weights(smile_model, tmp_path / "w.fssd", STATS)


@pytest.fixture
def client(weights):
    with TestClient(create_app(weights, InferenceConfig(th_face=0.2))) as client:
        yield client


def test_root_and_health(client):
    assert client.get("/health").json() == {"status": "healthy"}
    info = client.get("/").json()
    assert info["service"] == SERVICE_NAME
    assert info["version"] == __version__
    assert info["head"]["tasks"] == ["smile"]


def test_detect(client, tiny_dataset):
    response = client.post("/detect", params={"image_id": "img0"}, content=ppm_bytes(tiny_dataset[0].image))
    assert response.status_code == 200
    body = response.json()
    assert body["image_id"] == "img0" and body["tasks"] == ["smile"]
    for detection in body["detections"]:
        assert detection["face_score"] > 0.2
        assert len(detection["box"]) == 4
        assert detection["task_bits"] in ([0], [1])
    stats = client.get("/stats").json()
    assert stats["total_requests"] == 1
    assert stats["total_faces"] == len(body["detections"])


def test_detect_threshold_override(client, tiny_dataset):
    body = ppm_bytes(tiny_dataset[1].image)
    strict = client.post("/detect", params={"th_face": 1.0}, content=body).json()
    assert strict["detections"] == []
    assert client.post("/detect", params={"th_face": 2.0}, content=body).status_code == 422


def test_detect_rejects_bad_images(client):
    response = client.post("/detect", content=b"garbage")
    assert response.status_code == 400
    assert response.json()["detail"].startswith("dataset: ")
    small = ppm_bytes(np.zeros((3, 20, 20)))
    assert client.post("/detect", content=small).status_code == 400
    assert client.get("/stats").json()["total_failed"] == 2


def test_reset_reloads_weights(client, weights, smile_model):
    smile_model.params["detection.head1.face.bias"].data[:] = 5.0
    save_weights(smile_model, weights, STATS)
    response = client.post("/reset")
    assert response.json() == {"status": "reloaded", "weights": str(weights)}
    assert client.get("/stats").json()["loads"] == 2


def test_missing_weights_report_unavailable(tmp_path):
    with TestClient(create_app(tmp_path / "absent.fssd")) as client:
        assert client.get("/health").status_code == 200
        assert client.post("/detect", content=b"").status_code == 503
        assert client.get("/stats").status_code == 503
        assert client.post("/reset").status_code == 503
        assert client.get("/").json()["head"] is None


def test_detect_runs_off_the_event_loop(client, tiny_dataset, monkeypatch):
    detector = client.app.state.detector
    entered, release = threading.Event(), threading.Event()
    original = detector.detect

    def held_detect(*args):
        entered.set()
        release.wait(timeout=10)
        return original(*args)

    monkeypatch.setattr(detector, "detect", held_detect)
    responses = []
    worker = threading.Thread(
        target=lambda: responses.append(client.post("/detect", content=ppm_bytes(tiny_dataset[0].image)))
    )
    worker.start()
    try:
        assert entered.wait(timeout=10)
        assert client.get("/health").status_code == 200
        assert client.get("/stats").json()["total_requests"] == 0
        assert worker.is_alive()
    finally:
        release.set()
        worker.join(timeout=30)
    assert responses[0].status_code == 200
    assert client.get("/stats").json()["total_requests"] == 1
