"""Acceptance suite: one test (and one PASS/FAIL line) per criterion.

The end-to-end experiment trains once on the default 2000-sentence corpus
through the command-line interface and evaluates on 200 held-out sentences
(ids 2000-2199 of the same generator stream).
"""

import csv
import hashlib
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from diseg.cli import main
from diseg.data import CorpusConfig, fingerprint, generate, load_corpus, save_corpus
from diseg.model import DiSegModel, load_checkpoint
from diseg.policy import read_traces
from diseg.verify import (check_attention_reductions, check_dp_oracle, check_gradients, check_metric_examples,
                          check_normalization)

TRAIN_BUDGET_S = 600.0
TARGET_F1_GAP = 15.0
BLEU_GAP = 2.0
KS = ("1", "2", "3", "4", "inf")


def sha(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def run(*argv):
    return main([str(a) for a in argv])


def test_criterion_1_dp_oracle(acceptance_log):
    start = time.perf_counter()
    fam = check_dp_oracle(trials=100, max_len=8)
    elapsed = time.perf_counter() - start
    ok = fam.passed and fam.max_error <= 1e-10 and elapsed < 10.0
    acceptance_log(1, "DP equals brute force, |a| <= 8, 100 trials", ok,
                   f"max abs err {fam.max_error:.2e}, {elapsed:.2f} s")
    assert ok, fam.details


def test_criterion_2_normalization(acceptance_log):
    fam = check_normalization(trials=1000)
    ok = fam.passed and fam.max_error <= 1e-12
    acceptance_log(2, "marginals sum to one, 1000 instances", ok, f"max err {fam.max_error:.2e}")
    assert ok, fam.details


def test_criterion_3_attention_reductions(acceptance_log):
    fam = check_attention_reductions(trials=100)
    ok = fam.passed and fam.checks == 300 and fam.max_error <= 1e-12
    acceptance_log(3, "expected attention reduces to bi / hard / uni", ok, f"max err {fam.max_error:.2e}")
    assert ok, fam.details


def test_criterion_4_gradients(acceptance_log):
    fam = check_gradients(max_entries=None)
    ok = fam.passed and fam.checks == 4 and fam.seconds < 60.0
    acceptance_log(4, "finite differences for L_num, L_ctr, expected attention, L_DiSeg", ok,
                   f"max rel err {fam.max_error:.2e}, {fam.seconds:.1f} s")
    assert ok, fam.details


def test_criterion_5_metric_hand_checks(acceptance_log):
    fam = check_metric_examples()
    acceptance_log(5, "latency hand checks exact, OS / R-value within 0.1", fam.passed,
                   f"{fam.checks} checks")
    assert fam.passed, fam.details


# ---------------------------------------------------------------- end-to-end experiment


@pytest.fixture(scope="module")
def experiment(tmp_path_factory):
    d = tmp_path_factory.mktemp("experiment")
    assert run("gen-data", "--out", d / "all.jsonl", "--sentences", 2200, "--seed", 0) == 0
    corpus = load_corpus(d / "all.jsonl")
    save_corpus(corpus[2000:], d / "heldout.jsonl")
    start = time.perf_counter()
    assert run("train", "--corpus", d / "all.jsonl", "--sentences", 2000, "--out", d / "model.json",
               "--seed", 0) == 0
    train_seconds = time.perf_counter() - start
    (d / "traces").mkdir()
    assert run("simulate", "--checkpoint", d / "model.json", "--corpus", d / "heldout.jsonl", "--k", ",".join(KS),
               "--out-dir", d / "traces") == 0
    files = [d / "traces" / f"traces_k{k}.jsonl" for k in KS]
    assert run("eval", "--traces", *files, "--corpus", d / "heldout.jsonl", "--out", d / "metrics.csv",
               "--tolerance-frames", 1) == 0
    report = json.loads((d / "metrics.csv.json").read_text())
    return {"dir": d, "corpus": corpus, "train_seconds": train_seconds, "report": report,
            "rows": {r["k"]: r for r in report["rows"]}}


def test_default_training_corpus_is_used(experiment):
    assert fingerprint(experiment["corpus"][:2000]) == fingerprint(generate(CorpusConfig()))


def test_criterion_6_offline_equivalence(experiment, acceptance_log):
    params, cfg, _ = load_checkpoint(experiment["dir"] / "model.json")
    model = DiSegModel(params, cfg)
    heldout = {s.id: s for s in experiment["corpus"][2000:]}
    traces = read_traces(experiment["dir"] / "traces" / "traces_kinf.jsonl")
    mismatches = [tr.id for tr in traces if tr.tokens != model.offline_decode(heldout[tr.id].features)]
    ok = len(traces) == 200 and not mismatches
    acceptance_log(6, "k = inf simulation equals offline decoding on 200 sentences", ok,
                   f"{len(mismatches)} mismatches")
    assert ok, mismatches[:10]


def test_criterion_7_end_to_end(experiment, acceptance_log):
    rows, report = experiment["rows"], experiment["report"]
    baseline = report["fixed_length_baseline"]
    f1 = rows["inf"]["F1"]
    gap = f1 - baseline["F1"]

    params, cfg, _ = load_checkpoint(experiment["dir"] / "model.json")
    model = DiSegModel(params, cfg)
    heldout = experiment["corpus"][2000:]
    count_err = float(np.mean([abs(model.probabilities(s.features.frames).sum() - s.K) for s in heldout]))

    als = [rows[k]["AL"] for k in KS]
    checks = {
        "budget": experiment["train_seconds"] < TRAIN_BUDGET_S,
        "a": f1 > baseline["F1"] and gap >= TARGET_F1_GAP,
        "b": count_err <= 1.0,
        "c": abs(rows["4"]["BLEU"] - rows["inf"]["BLEU"]) <= BLEU_GAP,
        "d": all(a2 >= a1 for a1, a2 in zip(als, als[1:])),
    }
    acceptance_log("7", "training time on one core", checks["budget"], f"{experiment['train_seconds']:.0f} s")
    acceptance_log("7a", "boundary F1 beats fixed-length baseline", checks["a"],
                   f"F1 {f1:.1f} vs {baseline['F1']:.1f} at {baseline['spacing_ms']:g} ms, gap {gap:.1f}, "
                   f"target >= {TARGET_F1_GAP:g}")
    acceptance_log("7b", "mean |sum p - K| <= 1", checks["b"], f"{count_err:.3g}")
    acceptance_log("7c", "BLEU(k=4) within 2 of BLEU(k=inf)", checks["c"],
                   f"{rows['4']['BLEU']:.2f} vs {rows['inf']['BLEU']:.2f}")
    acceptance_log("7d", "corpus AL non-decreasing in k", checks["d"], " ".join(f"{a:.0f}" for a in als))
    assert all(checks.values()), checks


# ---------------------------------------------------------------- determinism


def test_criterion_8_determinism(tmp_path, acceptance_log):
    """Each command twice from scratch, then once more from its manifest; hashes must agree."""
    results = {}
    for tag in ("a", "b"):
        d = tmp_path / tag
        d.mkdir()
        (d / "traces").mkdir()
        assert run("gen-data", "--out", d / "c.jsonl", "--sentences", 30, "--seed", 11) == 0
        assert run("train", "--corpus", d / "c.jsonl", "--out", d / "m.json", "--epochs", 2, "--seed", 5) == 0
        assert run("simulate", "--checkpoint", d / "m.json", "--corpus", d / "c.jsonl", "--k", "1,3,inf",
                   "--out-dir", d / "traces") == 0
        files = sorted((d / "traces").glob("traces_k*.jsonl"))
        assert run("eval", "--traces", *files, "--corpus", d / "c.jsonl", "--out", d / "e.csv") == 0
        results[tag] = {
            "gen-data": sha(d / "c.jsonl"),
            "train": (sha(d / "m.json"), sha(d / "m.json.loss.csv")),
            "simulate": tuple(sha(f) for f in files),
            "eval": (sha(d / "e.csv"), sha(d / "e.csv.json")),
        }
    same_runs = {cmd: results["a"][cmd] == results["b"][cmd] for cmd in results["a"]}

    # the manifests record paths, so replay them inside run "a"'s directory tree
    d = tmp_path / "a"
    replayed = {}
    for cmd, manifest, outputs in [("gen-data", "c.jsonl", ["c.jsonl"]),
                                   ("train", "m.json", ["m.json", "m.json.loss.csv"]),
                                   ("simulate", "traces/simulate", ["traces/traces_k1.jsonl",
                                                                    "traces/traces_k3.jsonl",
                                                                    "traces/traces_kinf.jsonl"]),
                                   ("eval", "e.csv", ["e.csv", "e.csv.json"])]:
        before = [sha(d / o) for o in outputs]
        for o in outputs:
            (d / o).unlink()
        assert run("rerun", d / f"{manifest}.manifest.json") == 0
        replayed[cmd] = before == [sha(d / o) for o in outputs]

    ok = all(same_runs.values()) and all(replayed.values())
    acceptance_log(8, "gen-data / train / simulate / eval byte-identical on rerun", ok,
                   ", ".join(f"{c}: {'ok' if same_runs[c] and replayed[c] else 'DIFF'}" for c in same_runs))
    assert ok, (same_runs, replayed)
