import json
import shutil
import subprocess
import sys
from pathlib import Path

import pytest

from upt.cli import fit_exponent, main, parse_edits

GOLDEN = Path(__file__).parent / "golden"


def run(args, capsys):
    code = main([str(a) for a in args])
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def last_error(err):
    return json.loads(err.strip().splitlines()[-1])


@pytest.mark.parametrize("workers", [1, 3])
def test_infer_reproduces_golden_predictions(tmp_path, capsys, workers):
    code, _, _ = run(["infer", "--out", tmp_path, "--data", GOLDEN / "data",
                      "--checkpoint", GOLDEN / "model" / "checkpoint.json", "--workers", workers], capsys)
    assert code == 0
    got = (tmp_path / "predictions.jsonl").read_bytes()
    assert got == (GOLDEN / "predictions" / "predictions.jsonl").read_bytes()


def test_eval_reproduces_golden_reports(tmp_path, capsys):
    code, out, _ = run(["eval", "--out", tmp_path, "--data", GOLDEN / "data",
                        "--predictions", GOLDEN / "predictions" / "predictions.jsonl", "--setting", "both"], capsys)
    assert code == 0 and "known_objects" in out
    for name in ("report_default.json", "report_known_objects.json"):
        assert (tmp_path / name).read_bytes() == (GOLDEN / "report" / name).read_bytes()


@pytest.mark.parametrize("workers", [1, 2])
def test_export_attn_reproduces_golden(tmp_path, capsys, workers):
    code, _, _ = run(["export-attn", "--out", tmp_path, "--data", GOLDEN / "data", "--image-id", "syn-03",
                      "--checkpoint", GOLDEN / "model" / "checkpoint.json", "--workers", workers], capsys)
    assert code == 0
    got = (tmp_path / "attention" / "syn-03.json").read_bytes()
    assert got == (GOLDEN / "attention" / "syn-03.json").read_bytes()


def test_inputs_are_not_modified(tmp_path, capsys):
    data = tmp_path / "data"
    shutil.copytree(GOLDEN / "data", data)
    before = {p.name: p.read_bytes() for p in data.iterdir()}
    run(["infer", "--out", tmp_path / "o", "--data", data, "--checkpoint", GOLDEN / "model" / "checkpoint.json"],
        capsys)
    assert {p.name: p.read_bytes() for p in data.iterdir()} == before


def test_gen_data_train_pipeline_is_deterministic(tmp_path, capsys):
    for tag in ("a", "b"):
        assert run(["gen-data", "--out", tmp_path / tag / "data", "--num-images", 8, "--seed", 2], capsys)[0] == 0
        code, _, err = run(["train", "--out", tmp_path / tag / "model", "--data", tmp_path / tag / "data",
                            "--epochs", 1, "--batch-size", 4, "--seed", 2], capsys)
        assert code == 0
        config_line = next(line for line in err.splitlines() if line.startswith("config "))
        assert json.loads(config_line[len("config "):])["epochs"] == 1
    for rel in ("data/detections.jsonl", "model/checkpoint.json", "model/metrics.jsonl"):
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_config_file_and_flag_precedence(tmp_path, capsys):
    ini = tmp_path / "c.ini"
    ini.write_text("[common]\nseed = 9\n\n[gen-data]\nnum_images = 5\nfeature_dim = 8\n")
    code, _, err = run(["gen-data", "--out", tmp_path / "d", "--config", ini, "--feature-dim", 4], capsys)
    assert code == 0
    cfg = json.loads(err.splitlines()[0][len("config "):])
    assert (cfg["seed"], cfg["num_images"], cfg["feature_dim"]) == (9, 5, 4)
    assert len((tmp_path / "d" / "detections.jsonl").read_text().splitlines()) == 5


def test_analyze_deltas_and_intervene(tmp_path, capsys):
    ckpt = GOLDEN / "model" / "checkpoint.json"
    code, out, _ = run(["analyze-deltas", "--out", tmp_path, "--data", GOLDEN / "data",
                        "--reference", ckpt, "--variant", ckpt], capsys)
    assert code == 0 and "positive" in out
    assert (tmp_path / "deltas.tsv").exists() and (tmp_path / "scatter.tsv").exists()

    code, out, _ = run(["intervene", "--out", tmp_path, "--data", GOLDEN / "data", "--checkpoint", ckpt], capsys)
    assert code == 0
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["instances"] > 0

    code, _, _ = run(["intervene", "--out", tmp_path, "--data", GOLDEN / "data", "--checkpoint", ckpt,
                      "--image-id", "syn-00", "--edits", "coop:0,0,1,set_weight,1.0;coop:1,0,1,neg_inf"], capsys)
    assert code == 0
    doc = json.loads((tmp_path / "intervention.json").read_text())
    assert len(doc["edits"]) == 2 and len(doc["baseline"]) == len(doc["pairs"])


def test_bench_pairwise_fits_quadratic(tmp_path, capsys):
    code, _, _ = run(["bench-pairwise", "--out", tmp_path, "--repeats", 1], capsys)
    assert code == 0
    doc = json.loads((tmp_path / "bench.json").read_text())
    assert [r["pairs"] for r in doc["rows"]] == [n // 2 * (n - 1) for n in (8, 16, 32, 64)]
    assert 1.7 <= doc["exponent_pairs"] <= 2.3


def test_fit_exponent():
    assert fit_exponent([1, 2, 4], [3, 12, 48]) == pytest.approx(2.0)


ERRORS = [
    (["infer", "--out", "{tmp}", "--bogus", "1"], "usage", "--bogus"),
    (["infer", "--out", "{tmp}", "--checkpoint", "{tmp}/none.json", "--data", str(GOLDEN / "data")],
     "missing_file", "--checkpoint"),
    (["train", "--out", "{tmp}", "--epochs", "many"], "usage", "--epochs"),
    (["train", "--out", "{tmp}"], "usage", "--data"),
    (["eval", "--out", "{tmp}", "--data", str(GOLDEN / "data"), "--predictions", "{tmp}/bad.jsonl"],
     "schema", "score"),
    (["eval", "--out", "{tmp}", "--data", str(GOLDEN / "data"),
      "--predictions", str(GOLDEN / "predictions" / "predictions.jsonl"), "--setting", "strict"],
     "invalid", "--setting"),
    (["gen-data", "--out", "{tmp}", "--config", "{tmp}/bad.ini"], "config", "gen-data.colour"),
    (["bench-pairwise", "--out", "{tmp}", "--sizes", "8,x"], "invalid", "--sizes"),
]


@pytest.mark.parametrize("args,kind,field", ERRORS)
def test_errors_are_one_json_line_naming_the_field(tmp_path, capsys, args, kind, field):
    (tmp_path / "bad.jsonl").write_text(json.dumps(
        {"image_id": "a", "human_box": [0.5, 0.5, 0.1, 0.1], "object_box": [0.5, 0.5, 0.1, 0.1],
         "object_class": 1, "action_id": 0, "score": "high"}) + "\n")
    (tmp_path / "bad.ini").write_text("[gen-data]\ncolour = red\n")
    code, _, err = run([a.replace("{tmp}", str(tmp_path)) for a in args], capsys)
    assert code != 0
    doc = last_error(err)
    assert doc["error"] == kind and doc["field"] == field


def test_parse_edits():
    edits = parse_edits("coop:0,1,2,neg_inf; comp:0,3,4,set_weight,0.5,1")
    assert edits[0].action == "neg_inf" and edits[1].value == 0.5 and edits[1].head == 1
    assert parse_edits("") == []


def test_console_entry_point_exit_codes(tmp_path):
    ok = subprocess.run([sys.executable, "-m", "upt.cli", "--help"], capture_output=True, text=True)
    assert ok.returncode == 0 and "bench-pairwise" in ok.stdout
    bad = subprocess.run([sys.executable, "-m", "upt.cli", "eval", "--out", str(tmp_path), "--nope"],
                         capture_output=True, text=True)
    assert bad.returncode == 2
    assert len(bad.stderr.strip().splitlines()) == 1
