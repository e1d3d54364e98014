import json
import warnings

import pytest
from click.testing import CliRunner

with warnings.catch_warnings():
    warnings.simplefilter("ignore")
    from fastapi.testclient import TestClient

from sagefaith import toymm
from sagefaith.api import app
from sagefaith.cli import main
from sagefaith.harness import dump_manifest

from test_harness import three_records

client = TestClient(app)
SMALL_PLAN = {"combos": [{"tag": "none"}, {"tag": "I", "see": True}], "n_scenes": 1, "max_len": 3}


@pytest.fixture
def manifest_path(tmp_path):
    path = tmp_path / "m.jsonl"
    path.write_text(dump_manifest(three_records()))
    return path


def test_health():
    assert client.get("/health").json()["status"] == "ok"


def test_eval_endpoint(manifest_path):
    res = client.post("/eval", json={"manifest": manifest_path.read_text(), "format": "csv"})
    body = res.json()
    assert res.status_code == 200 and body["n_records"] == 3 and body["judge"] == "rule"
    assert body["aggregates"]["all"]["tf1"] == 1.0
    assert body["report"].startswith("row,")


def test_eval_rejections_and_errors(manifest_path):
    text = manifest_path.read_text() + "{broken\n"
    assert client.post("/eval", json={"manifest": text}).json()["rejected"][0]["line"] == 4
    res = client.post("/eval", json={"manifest": "{}\n"})
    assert res.status_code == 422 and res.json()["detail"]["errors"][0]["line"] == 1
    assert client.post("/eval", json={"manifest": text, "metrics": "bleu"}).status_code == 422
    assert client.post("/eval", json={"manifest": text, "format": "xml"}).status_code == 422


def test_eval_remote_without_credentials(manifest_path, monkeypatch):
    for var in ("JUDGE_API_KEY", "JUDGE_ENDPOINT", "JUDGE_MODEL"):
        monkeypatch.delenv(var, raising=False)
    res = client.post("/eval", json={"manifest": manifest_path.read_text(), "judge": "remote"})
    assert res.status_code == 400


def test_ablate_endpoint():
    body = client.post("/ablate", json={"plan": SMALL_PLAN}).json()
    assert body["n_rows"] == 2 and body["failed"] == []
    assert client.post("/ablate", json={"plan": {"grid": {"gamma": [1]}}}).status_code == 422


def test_decode_probe_perturb_endpoints():
    dec = client.post("/decode", json={"scene_seed": 3, "max_len": 4, "sage": True}).json()
    assert len(dec["tokens"]) == len(dec["token_names"]) and dec["sage_trace"]
    out = client.post("/probe", json={"probe": "tam", "traces": [dec["bundle"]]})
    assert out.status_code == 200 and out.json()["output"]
    assert client.post("/probe", json={"probe": "residual", "traces": [dec["bundle"]]}).status_code == 422
    hint = client.post("/perturb", json={"mode": "hint-explicit", "prompt": [toymm.Q_SAME]}).json()
    assert hint["prompt"][-3:] == list(toymm.HINT_SUFFIX)
    mask = client.post("/perturb", json={"mode": "mask", "ratio": 0.25}).json()
    assert mask["masked_cells"] == 4
    assert client.post("/perturb", json={"mode": "mask", "ratio": 0.3}).status_code == 422
    assert client.post("/decode", json={"model": {"d_model": 30}}).status_code == 422


def test_cli_eval(manifest_path, tmp_path):
    runner = CliRunner()
    out = tmp_path / "r.csv"
    res = runner.invoke(main, ["eval", "--manifest", str(manifest_path), "--format", "csv", "--out", str(out)])
    assert res.exit_code == 0, res.output
    first = out.read_bytes()
    runner.invoke(main, ["eval", "--manifest", str(manifest_path), "--format", "csv", "--out", str(out)])
    assert out.read_bytes() == first
    bad = runner.invoke(main, ["eval", "--manifest", str(manifest_path), "--metrics", "bleu"])
    assert bad.exit_code != 0 and "bleu" in bad.output


def test_cli_ablate(tmp_path):
    plan = tmp_path / "plan.json"
    plan.write_text(json.dumps(SMALL_PLAN))
    res = CliRunner().invoke(main, ["ablate", "--plan", str(plan), "--format", "csv"])
    assert res.exit_code == 0 and len(res.output.strip().splitlines()) == 4
    plan.write_text(json.dumps({"combos": []}))
    assert CliRunner().invoke(main, ["ablate", "--plan", str(plan)]).exit_code != 0


def test_cli_decode_probe_perturb(tmp_path):
    runner = CliRunner()
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    assert runner.invoke(main, ["decode", "--scene-seed", "1", "--max-len", "3", "--out", str(a)]).exit_code == 0
    assert runner.invoke(main, ["decode", "--scene-seed", "1", "--max-len", "3", "--sage", "--stages", "I",
                                "--out", str(b)]).exit_code == 0
    res = runner.invoke(main, ["probe", "--trace", str(a), "--trace", str(b), "--probe", "residual"])
    assert res.exit_code == 0 and res.output
    assert runner.invoke(main, ["probe", "--trace", str(a), "--probe", "residual"]).exit_code != 0
    res = runner.invoke(main, ["perturb", "--mode", "hint-implicit", "--prompt", str(toymm.Q_DIFF)])
    assert json.loads(res.output)["prompt"][0] == toymm.TAG_Q_OPEN
    res = runner.invoke(main, ["perturb", "--mode", "mask", "--ratio", "1.0"])
    assert json.loads(res.output)["masked_cells"] == 16


def test_cli_unwritable_output(manifest_path, tmp_path):
    res = CliRunner().invoke(main, ["eval", "--manifest", str(manifest_path),
                                    "--out", str(tmp_path / "no" / "x.txt")])
    assert res.exit_code != 0 and "cannot write" in res.output
