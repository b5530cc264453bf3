"""HTTP service contract: same jobs, same artifacts, HTTP error mapping."""
import json

import pytest
from fastapi.testclient import TestClient

from iwd.cli import main
from iwd.service import app

from test_cli import base_config

client = TestClient(app)


def test_health_reports_version():
    body = client.get("/health").json()
    assert body["status"] == "ok"
    assert body["version"]


def test_distill_endpoint_writes_artifacts(tmp_path):
    out = tmp_path / "svc"
    r = client.post("/distill", json={"config": base_config(),
                                      "out_dir": str(out), "threads": 2})
    assert r.status_code == 200
    body = r.json()
    assert body["job"] == "distill"
    assert set(body["artifacts"]) == {"run_report.json", "synthetic.json",
                                      "synthetic.bin", "objective_curve.csv",
                                      "curve.svg"}
    for name in body["artifacts"]:
        assert (out / name).is_file(), name
    assert 0.0 <= body["summary"]["accuracy_mean"] <= 1.0


def test_service_and_cli_produce_identical_bytes(tmp_path):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(base_config()))
    cli_out = tmp_path / "cli"
    assert main(["distill", "--config", str(cfg_path), "--out", str(cli_out)]) == 0
    svc_out = tmp_path / "svc"
    r = client.post("/distill", json={"config": base_config(), "out_dir": str(svc_out)})
    assert r.status_code == 200
    for name in ("run_report.json", "synthetic.bin", "objective_curve.csv"):
        assert (cli_out / name).read_bytes() == (svc_out / name).read_bytes(), name


def test_seed_override_changes_run(tmp_path):
    base = {"config": base_config(), "out_dir": str(tmp_path / "a")}
    a = client.post("/distill", json=base).json()["summary"]
    b = client.post("/distill", json={**base, "out_dir": str(tmp_path / "b"),
                                      "seed": 12}).json()["summary"]
    assert a["final_objective"] != b["final_objective"]


def test_invalid_config_rejected_with_422(tmp_path):
    cfg = base_config()
    cfg["schema_version"] = 9
    r = client.post("/distill", json={"config": cfg, "out_dir": str(tmp_path)})
    assert r.status_code == 422
    cfg = base_config()
    cfg["distill"]["outer_steps"] = 0
    r = client.post("/distill", json={"config": cfg, "out_dir": str(tmp_path)})
    assert r.status_code == 422


def test_missing_section_maps_to_422(tmp_path):
    r = client.post("/evaluate", json={"config": base_config(),
                                       "out_dir": str(tmp_path)})
    assert r.status_code == 422
    assert "synthetic_json" in r.json()["detail"]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numerical_failure_maps_to_500(tmp_path):
    cfg = base_config()
    cfg["train"] = {"kind": "two-moons", "n": 48, "noise": 0.1, "seed": 0}
    cfg["test"] = None
    cfg["arch"] = {"kind": "mlp", "input_dim": 2, "classes": 2, "hidden": [8]}
    cfg["trajectory"] = {"s_inner": "S", "steps": 1, "inner_sgd": {"lr": 0.05}}
    cfg["policy"] = {"kind": "uniform"}
    cfg["distill"] = {"outer_steps": 40, "batch_size": 16, "outer_lr": 50.0,
                      "refresh": 10, "ipc": 2, "syn_init": "noise"}
    cfg["seed"] = 1
    r = client.post("/distill", json={"config": cfg, "out_dir": str(tmp_path)})
    assert r.status_code == 500
    assert "outer step" in r.json()["detail"]


def test_influence_endpoint_summary_counts(tmp_path):
    r = client.post("/influence", json={"config": base_config(),
                                        "out_dir": str(tmp_path / "infl")})
    assert r.status_code == 200
    summary = r.json()["summary"]
    assert summary["n"] == 40
    assert summary["flipped_count"] == 8
