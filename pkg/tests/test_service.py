import numpy as np
import pytest
from fastapi.testclient import TestClient

from oodgate import pipeline
from oodgate.service.app import create_app
from oodgate.service.schemas import WindowRequest
from oodgate.stream_io import load_session


@pytest.fixture()
def client():
    return TestClient(create_app())


def test_healthz(client):
    resp = client.get("/healthz")
    assert resp.status_code == 200
    body = resp.json()
    assert body["status"] == "ok"
    assert "version" in body


def test_missing_data_root_is_404_with_error_body(client):
    resp = client.post(
        "/pipeline/train", json={"config": {"data_root": "/nonexistent", "out": "/tmp/x"}}
    )
    assert resp.status_code == 404
    body = resp.json()
    assert body["error"]["type"] == "DataRootError"
    assert "does not exist" in body["error"]["message"]


def test_invalid_config_rejected(client):
    resp = client.post("/pipeline/train", json={"config": {"gate_threshold": 2.0}})
    assert resp.status_code == 422


def test_eval_before_train_conflict(client, tmp_path):
    from oodgate.synthetic import make_synthetic_dataset

    make_synthetic_dataset(tmp_path / "d", n_subjects=1, seed=1, train_trials_per_class=3,
                           test_trials_per_class=2)
    resp = client.post(
        "/pipeline/replay",
        json={"config": {"data_root": str(tmp_path / "d"), "out": str(tmp_path / "o")}},
    )
    assert resp.status_code == 409
    assert "run train first" in resp.json()["error"]["message"]


def test_pipeline_jobs_via_http(client, trained_workspace):
    root, config = trained_workspace
    payload = {"config": config.resolved_dict()}
    replay = client.post("/pipeline/replay", json=payload)
    assert replay.status_code == 200
    counts = replay.json()["result"]["decisions"]["synthetic"]["S1"]["test"]["counts"]
    assert sum(counts.values()) > 0

    evaluation = client.post("/pipeline/eval", json=payload)
    assert evaluation.status_code == 200
    report = evaluation.json()["result"]["reports"]["synthetic"]
    assert "tempdens" in report["auroc_averages"]["online"]


class TestSessions:
    def test_streaming_session_lifecycle(self, client, trained_workspace):
        root, config = trained_workspace
        created = client.post(
            "/sessions",
            json={
                "config": config.resolved_dict(),
                "dataset": "synthetic",
                "subject_id": "S1",
            },
        )
        assert created.status_code == 200
        info = created.json()
        session_id = info["session_id"]
        assert info["n_classes"] == 2

        manifest, signal = load_session(root / "data" / "S1" / "test.json")
        win = int(2.0 * manifest.sampling_rate)
        hop = int(0.125 * manifest.sampling_rate)
        decisions = []
        for k in range(30):
            start = k * hop
            req = WindowRequest.from_matrix(k * 0.125, signal[:, start : start + win])
            resp = client.post(f"/sessions/{session_id}/windows", json=req.model_dump())
            assert resp.status_code == 200
            body = resp.json()
            assert body["decision"] in ("no_action", "class", "reject")
            assert 0.0 <= body["p_task"] <= 1.0
            decisions.append(body)

        status = client.get(f"/sessions/{session_id}")
        assert status.json()["steps"] == 30

        closed = client.delete(f"/sessions/{session_id}")
        assert closed.status_code == 200
        assert client.get(f"/sessions/{session_id}").status_code == 404

    def test_unknown_session_404(self, client):
        req = WindowRequest.from_matrix(0.0, np.zeros((2, 10)))
        resp = client.post("/sessions/deadbeef/windows", json=req.model_dump())
        assert resp.status_code == 404

    def test_out_of_order_window_rejected(self, client, trained_workspace):
        root, config = trained_workspace
        session_id = client.post(
            "/sessions",
            json={
                "config": config.resolved_dict(),
                "dataset": "synthetic",
                "subject_id": "S1",
            },
        ).json()["session_id"]
        manifest, signal = load_session(root / "data" / "S1" / "test.json")
        win = int(2.0 * manifest.sampling_rate)
        req = WindowRequest.from_matrix(1.0, signal[:, :win])
        assert client.post(f"/sessions/{session_id}/windows", json=req.model_dump()).status_code == 200
        stale = WindowRequest.from_matrix(0.5, signal[:, :win])
        resp = client.post(f"/sessions/{session_id}/windows", json=stale.model_dump())
        assert resp.status_code == 422
        assert "order" in resp.json()["error"]["message"]
