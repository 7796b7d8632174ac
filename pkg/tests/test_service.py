import numpy as np
import pytest
from fastapi.testclient import TestClient

from ostta.service.app import app

client = TestClient(app)
SMALL = {"samples_per_domain": 200, "dim": 16, "num_classes": 4}


def test_health():
    r = client.get("/health")
    assert r.status_code == 200 and r.json()["status"] == "ok"


def test_run_endpoint():
    r = client.post("/experiments/run", json={"config": SMALL})
    assert r.status_code == 200
    s = r.json()["summary"]
    assert s["n_steps"] > 0 and s["config_echo"]["dim"] == 16


@pytest.mark.parametrize("config", [{"lr": "abc"}, {"bogus": 1}, {"input": "/etc/passwd"}])
def test_run_rejects(config):
    assert client.post("/experiments/run", json={"config": config}).status_code == 422


def test_session_lifecycle():
    P = np.eye(4)
    r = client.post("/sessions", json={"config": {"method": "zseval", "warmup": 0}, "prototypes": P.tolist()})
    assert r.status_code == 201
    sid = r.json()["session_id"]
    assert r.json()["dim"] == 4 and r.json()["num_classes"] == 4
    step = client.post(f"/sessions/{sid}/samples", json={"raw": [3.0, 0, 0, 0], "gt_class": 0})
    assert step.status_code == 200 and step.json()["t"] == 0
    assert client.post(f"/sessions/{sid}/samples", json={"raw": [1.0, 2.0]}).status_code == 422
    assert client.post(f"/sessions/{sid}/samples", json={"raw": [1.0, 0, 0, 0], "gt_class": 9}).status_code == 422
    client.post(f"/sessions/{sid}/samples", json={"raw": [0, 0, 1.0, 1.0]})
    m = client.get(f"/sessions/{sid}/metrics").json()
    assert m["n_steps"] == 2 and m["n_desired"] == 1
    assert client.get(f"/sessions/{sid}").json()["n_steps"] == 2
    assert client.delete(f"/sessions/{sid}").status_code == 204
    assert client.get(f"/sessions/{sid}").status_code == 404


def test_session_matches_batch_engine():
    from ostta.engine import run
    from ostta.experiment import load_config, materialize

    cfg = load_config(None, {k: str(v) for k, v in SMALL.items()}, env={})
    prototypes, samples = materialize(cfg)
    want = run(samples[:60], prototypes, cfg.method)
    sid = client.post("/sessions", json={"config": SMALL}).json()["session_id"]
    got = [client.post(f"/sessions/{sid}/samples", json={"raw": s.raw.tolist(), "raw_aug": s.raw_aug.tolist(),
                                                        "gt_class": s.gt_class}).json() for s in samples[:60]]
    assert [g["prediction"] for g in got] == [r.prediction for r in want.records]
    assert [g["s_t"] for g in got] == [r.s_t for r in want.records]


def test_gradcheck_endpoint():
    r = client.post("/gradcheck", json={"trials": 2})
    assert r.status_code == 200 and r.json()["passed"]
    assert client.post("/gradcheck", json={"trials": 0}).status_code == 422
