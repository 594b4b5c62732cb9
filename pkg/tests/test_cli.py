import csv
import hashlib
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from diseg.cli import main
from diseg.data import load_corpus
from diseg.model import DiSegModel, load_checkpoint


def sha(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert run("gen-data", "--out", d / "corpus.jsonl", "--sentences", 40, "--seed", 7) == 0
    start = time.perf_counter()
    assert run("train", "--corpus", d / "corpus.jsonl", "--out", d / "model.json", "--epochs", 1,
               "--sentences", 32, "--seed", 1) == 0
    assert time.perf_counter() - start < 60
    return d


def test_gen_data_writes_requested_sentences(workdir):
    lines = (workdir / "corpus.jsonl").read_text().splitlines()
    assert len(lines) == 40
    assert json.loads(lines[0])["id"] == 0


def test_gen_data_is_reproducible(workdir, tmp_path):
    assert run("gen-data", "--out", tmp_path / "again.jsonl", "--sentences", 40, "--seed", 7) == 0
    assert sha(tmp_path / "again.jsonl") == sha(workdir / "corpus.jsonl")


def test_gen_data_config_overrides(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"frame_dim": 3, "silence_prob": 0.0}))
    assert run("gen-data", "--out", tmp_path / "c.jsonl", "--sentences", 5, "--config", cfg) == 0
    assert len(load_corpus(tmp_path / "c.jsonl")[0].features.frames[0]) == 3
    cfg.write_text(json.dumps({"frame_noise": -1}))
    assert run("gen-data", "--out", tmp_path / "d.jsonl", "--config", cfg) == 1


def test_usage_errors_exit_one(tmp_path, capsys):
    assert run("gen-data") == 1
    assert "--out" in capsys.readouterr().err
    assert run("no-such-command") == 1
    assert run("simulate", "--checkpoint", "x", "--corpus", "y", "--k", "0", "--out-dir", tmp_path) == 1


def test_unwritable_output_is_a_data_error(tmp_path, capsys):
    assert run("gen-data", "--out", tmp_path / "missing" / "c.jsonl", "--sentences", 2) == 2
    assert "does not exist" in capsys.readouterr().err


def test_train_outputs(workdir):
    params, cfg, fp = load_checkpoint(workdir / "model.json")
    assert cfg.epochs == 1 and fp
    with open(workdir / "model.json.loss.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["epoch", "L_st", "L_asr", "L_mt", "L_num", "L_ctr", "total"]
    assert len(rows) == 2 and all(len(r) == 7 for r in rows)


def test_train_is_reproducible(workdir, tmp_path):
    assert run("train", "--corpus", workdir / "corpus.jsonl", "--out", tmp_path / "m.json", "--epochs", 1,
               "--sentences", 32, "--seed", 1) == 0
    assert sha(tmp_path / "m.json") == sha(workdir / "model.json")
    assert sha(tmp_path / "m.json.loss.csv") == sha(workdir / "model.json.loss.csv")


def test_train_rejects_bad_corpus(tmp_path, capsys):
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"id": 0}\n')
    assert run("train", "--corpus", bad, "--out", tmp_path / "m.json") == 2
    assert "bad.jsonl:1" in capsys.readouterr().err
    assert run("train", "--corpus", tmp_path / "nope.jsonl", "--out", tmp_path / "m.json") == 2


@pytest.fixture(scope="module")
def traces(workdir):
    out = workdir / "traces"
    out.mkdir()
    assert run("simulate", "--checkpoint", workdir / "model.json", "--corpus", workdir / "corpus.jsonl",
               "--k", "1,3,5,7,inf", "--out-dir", out, "--sentences", 12) == 0
    return out


def test_simulate_writes_one_file_per_k(traces):
    names = sorted(p.name for p in traces.glob("traces_k*.jsonl"))
    assert names == ["traces_k1.jsonl", "traces_k3.jsonl", "traces_k5.jsonl", "traces_k7.jsonl",
                     "traces_kinf.jsonl"]


def test_simulate_inf_matches_offline_decode(workdir, traces):
    params, cfg, _ = load_checkpoint(workdir / "model.json")
    model = DiSegModel(params, cfg)
    corpus = {s.id: s for s in load_corpus(workdir / "corpus.jsonl")}
    for line in (traces / "traces_kinf.jsonl").read_text().splitlines():
        tr = json.loads(line)
        assert tr["hypothesis"][:-1] == model.offline_decode(corpus[tr["id"]].features)


def test_simulate_rerun_from_manifest_is_identical(traces):
    before = {p.name: sha(p) for p in traces.glob("traces_k*.jsonl")}
    for p in traces.glob("traces_k*.jsonl"):
        p.unlink()
    assert run("rerun", traces / "simulate.manifest.json") == 0
    assert {p.name: sha(p) for p in traces.glob("traces_k*.jsonl")} == before


def test_simulate_missing_checkpoint(workdir, tmp_path):
    assert run("simulate", "--checkpoint", tmp_path / "none.json", "--corpus", workdir / "corpus.jsonl",
               "--k", "1", "--out-dir", tmp_path) == 2


def test_eval_rows_and_header(workdir, traces, tmp_path):
    files = [traces / f"traces_k{k}.jsonl" for k in (1, 3, 5, 7)]
    out = tmp_path / "metrics.csv"
    assert run("eval", "--traces", *files, "--corpus", workdir / "corpus.jsonl", "--out", out,
               "--tolerance-frames", 1) == 0
    lines = out.read_text().splitlines()
    assert lines[0].startswith("# tolerance_frames=1")
    rows = list(csv.DictReader(lines[1:]))
    assert [r["k"] for r in rows] == ["1", "3", "5", "7"]
    als = [float(r["AL"]) for r in rows]
    assert als == sorted(als)
    doc = json.loads(Path(str(out) + ".json").read_text())
    assert doc["tolerance_frames"] == 1 and len(doc["rows"]) == 4
    assert "fixed_length_baseline" in doc


def test_eval_id_mismatch_names_id(workdir, tmp_path, capsys):
    tr = tmp_path / "t.jsonl"
    tr.write_text(json.dumps({"id": 999, "k": "1", "T_ms": 80.0, "events": [], "hypothesis": [-1],
                              "tau_ms": []}) + "\n")
    assert run("eval", "--traces", tr, "--corpus", workdir / "corpus.jsonl", "--out", tmp_path / "m.csv") == 2
    assert "999" in capsys.readouterr().err


def golden_fixture(tmp_path):
    sentence = {"id": 0, "frame_ms": 40.0, "frames": [[0.0]] * 50, "subwords": [0, 1, 2, 3],
                "word_spans": [[1, 1], [2, 2], [3, 3], [4, 4]], "target": [0, 1, 2, 3],
                "boundaries_ms": [480.0, 1000.0, 1520.0, 2000.0]}
    corpus = tmp_path / "gold.jsonl"
    corpus.write_text(json.dumps(sentence) + "\n")
    tau = [500.0, 1000.0, 1500.0, 2000.0]
    events = [{"kind": "WRITE", "t_ms": t, "payload": i} for i, t in enumerate(tau)]
    events.append({"kind": "WRITE", "t_ms": 2000.0, "payload": -1})
    trace = {"id": 0, "k": "4", "T_ms": 2000.0, "frame_ms": 40.0, "events": events,
             "hypothesis": [0, 1, 2, 3, -1], "tau_ms": tau, "seg_boundaries_ms": [480.0, 1000.0, 1520.0, 2000.0]}
    traces = tmp_path / "gold_traces.jsonl"
    traces.write_text(json.dumps(trace) + "\n")
    return corpus, traces


def test_eval_golden_fixture(tmp_path):
    corpus, traces = golden_fixture(tmp_path)
    out = tmp_path / "m.csv"
    assert run("eval", "--traces", traces, "--corpus", corpus, "--out", out) == 0
    row = out.read_text().splitlines()[2]
    # perfectly paced: AL = CW = DAL = T/|y| = 500, AP = 0.625; exact output and boundaries
    assert row == "4,500.0000,0.6250,500.0000,500.0000,100.0000,100.0000,100.0000,100.0000,0.0000,100.0000"


def test_eval_is_reproducible_and_does_not_touch_inputs(tmp_path):
    corpus, traces = golden_fixture(tmp_path)
    before = (sha(corpus), sha(traces))
    assert run("eval", "--traces", traces, "--corpus", corpus, "--out", tmp_path / "a.csv") == 0
    assert run("rerun", tmp_path / "a.csv.manifest.json") == 0
    first = sha(tmp_path / "a.csv")
    assert run("eval", "--traces", traces, "--corpus", corpus, "--out", tmp_path / "a.csv") == 0
    assert sha(tmp_path / "a.csv") == first and (sha(corpus), sha(traces)) == before


def test_manifest_contents(workdir):
    m = json.loads((workdir / "model.json.manifest.json").read_text())
    assert m["command"] == "train" and m["seed"] == 1
    assert set(m) >= {"command", "argv", "config", "seed", "inputs", "outputs", "code_version", "duration_s"}
    assert m["outputs"][str(workdir / "model.json")] == sha(workdir / "model.json")


def test_verify_passes_and_reports_families(tmp_path):
    out = tmp_path / "verify.json"
    assert run("verify", "--out", out) == 0
    report = json.loads(out.read_text())
    assert report["passed"] and len(report["families"]) >= 5
    assert all(f["checks"] > 0 for f in report["families"])


def test_verify_fails_on_injected_gradient_fault(tmp_path):
    out = tmp_path / "verify.json"
    assert run("verify", "--out", out, "--inject-gradient-fault", "0.01") == 3
    report = json.loads(out.read_text())
    failed = [f["name"] for f in report["families"] if not f["passed"]]
    assert failed == ["fd_gradients"]
