"""Self-contained correctness checks: oracles, reductions, gradients, hand examples.

Each family returns a :class:`CheckFamily`; :func:`run_all` bundles them into
a JSON-serialisable report.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .alignment import (brute_force_marginals, contrastive_loss, expected_segment_representations,
                        segment_marginals, segment_marginals_op, word_pooling_matrix)
from .attention import (causal_mask, expected_segmented_attention, hard_segment_mask,
                        same_segment_probabilities)
from .autodiff import ParameterSet, finite_difference_check
from .data import Sentence
from .metrics import latency_metrics, over_segmentation, r_value
from .model import ModelConfig, collate, init_params, multitask_losses
from .policy import replay_consistency_check, simulate
from .segmentation import FeatureSequence, segment_count_loss

DP_TOL = 1e-10
NORM_TOL = 1e-12
REDUCTION_TOL = 1e-12
FD_EPS = 1e-5
FD_TOL = 1e-4


@dataclass
class CheckFamily:
    name: str
    checks: int = 0
    failures: int = 0
    max_error: float = 0.0
    tolerance: float | None = None
    seconds: float = 0.0
    details: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.checks > 0 and self.failures == 0

    def record(self, ok: bool, error: float = 0.0, detail: str | None = None) -> None:
        self.checks += 1
        self.max_error = max(self.max_error, float(error))
        if not ok:
            self.failures += 1
            if detail and len(self.details) < 10:
                self.details.append(detail)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["passed"] = self.passed
        return d


def _timed(fn):
    def wrapper(*args, **kwargs):
        start = time.perf_counter()
        fam = fn(*args, **kwargs)
        fam.seconds = time.perf_counter() - start
        return fam
    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


# ---------------------------------------------------------------- DP


@_timed
def check_dp_oracle(trials: int = 100, max_len: int = 8, seed: int = 0) -> CheckFamily:
    """DP marginals against exhaustive enumeration of cut patterns."""
    rng = np.random.default_rng(seed)
    fam = CheckFamily("dp_oracle", tolerance=DP_TOL)
    for _ in range(trials):
        n = int(rng.integers(1, max_len + 1))
        K = int(rng.integers(1, n + 1))
        p = rng.uniform(0.0, 1.0, n)
        for absorbing in (True, False):
            err = float(np.abs(segment_marginals(p, K, absorbing).M - brute_force_marginals(p, K, absorbing)).max())
            fam.record(err <= DP_TOL, err, f"n={n} K={K} absorbing={absorbing} err={err:.3g}")
    return fam


@_timed
def check_normalization(trials: int = 1000, seed: int = 1) -> CheckFamily:
    """Every frame's segment marginals sum to one."""
    rng = np.random.default_rng(seed)
    fam = CheckFamily("marginal_normalization", tolerance=NORM_TOL)
    for _ in range(trials):
        n = int(rng.integers(1, 40))
        K = int(rng.integers(1, n + 1))
        p = rng.uniform(0.0, 1.0, n)
        err = float(np.abs(segment_marginals(p, K).M.sum(1) - 1.0).max())
        fam.record(err <= NORM_TOL, err, f"n={n} K={K} err={err:.3g}")
    return fam


# ---------------------------------------------------------------- attention


def _masked_softmax(scores: np.ndarray, allowed: np.ndarray | None) -> np.ndarray:
    s = scores if allowed is None else np.where(allowed, scores, -np.inf)
    e = np.exp(s - s.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


def _expected(scores: np.ndarray, p: np.ndarray) -> np.ndarray:
    with ad.no_grad():
        return expected_segmented_attention(_masked_softmax(scores, None), same_segment_probabilities(p)).data


@_timed
def check_attention_reductions(trials: int = 100, seed: int = 2) -> CheckFamily:
    """Expected attention collapses to bi-directional, hard-masked and causal attention."""
    rng = np.random.default_rng(seed)
    fam = CheckFamily("attention_reductions", tolerance=REDUCTION_TOL)
    for trial in range(trials):
        n = int(rng.integers(1, 16))
        scores = rng.normal(0.0, 2.0, (n, n))
        bi = _masked_softmax(scores, None)
        err = float(np.abs(_expected(scores, np.zeros(n)) - bi).max())
        fam.record(err <= REDUCTION_TOL, err, f"trial {trial}: p=0 vs bi err={err:.3g}")
        b = rng.integers(0, 2, n)
        err = float(np.abs(_expected(scores, b.astype(float)) - _masked_softmax(scores, hard_segment_mask(b))).max())
        fam.record(err <= REDUCTION_TOL, err, f"trial {trial}: p=b vs hard err={err:.3g}")
        err = float(np.abs(_expected(scores, np.ones(n)) - _masked_softmax(scores, causal_mask(n))).max())
        fam.record(err <= REDUCTION_TOL, err, f"trial {trial}: b=1 vs uni err={err:.3g}")
    return fam


# ---------------------------------------------------------------- gradients


def tiny_fd_setup(seed: int = 0):
    """A d=8 model with one 6-frame, 3-target sentence, plus fixed training noise."""
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(d_model=8, heads=2, enc_layers=1, dec_layers=1, ffn_dim=16, src_vocab=3, tgt_vocab=3,
                      frame_dim=4, seed=seed)
    sentence = Sentence(0, FeatureSequence(rng.normal(size=(6, 4))), [0, 1, 2], [(1, 2), (3, 3)], [2, 0, 1],
                        [120.0, 240.0])
    batch = collate([sentence], cfg)
    noise = rng.normal(size=(1, 6))
    return cfg, init_params(cfg), batch, noise


def fd_cases(seed: int = 0):
    """Named (loss_fn, params) pairs probed by the gradient family."""
    rng = np.random.default_rng(seed)
    cases = {}

    num_params = ParameterSet({"logits": rng.normal(size=9)})
    cases["L_num"] = (lambda P: segment_count_loss(ad.sigmoid(P["logits"]), 3), num_params)

    pool = word_pooling_matrix([(1, 2), (3, 3), (4, 5)], 5)
    ctr_params = ParameterSet({"logits": rng.normal(size=7), "a": rng.normal(size=(7, 8)),
                               "e": rng.normal(size=(5, 8))})

    def ctr(P):
        M = segment_marginals_op(ad.sigmoid(P["logits"]), 3)
        return contrastive_loss(expected_segment_representations(P["a"], M), ad.matmul(pool, P["e"]), 0.1)
    cases["L_ctr"] = (ctr, ctr_params)

    proj = rng.normal(size=(6, 6))
    att_params = ParameterSet({"logits": rng.normal(size=6), "scores": rng.normal(size=(6, 6))})

    def att(P):
        gamma = expected_segmented_attention(ad.softmax(P["scores"]),
                                             same_segment_probabilities(ad.sigmoid(P["logits"])))
        return ad.sum(ad.mul(gamma, proj))
    cases["expected_attention"] = (att, att_params)

    cfg, params, batch, noise = tiny_fd_setup(seed)
    cases["L_DiSeg"] = (lambda P: multitask_losses(P, cfg, batch, 1, noise)["total"], params)
    return cases


@_timed
def check_gradients(fault: float = 0.0, seed: int = 0, max_entries: int | None = 6) -> CheckFamily:
    """Central finite differences against reverse mode for the training losses.

    ``fault`` is added to every analytic gradient; a non-zero value must make
    the family fail.
    """
    fam = CheckFamily("fd_gradients", tolerance=FD_TOL)
    for name, (fn, params) in fd_cases(seed).items():
        report = finite_difference_check(fn, params, eps=FD_EPS, tol=FD_TOL, max_entries=max_entries, seed=seed,
                                         perturb_analytic=fault)
        worst_name = max(report.max_rel_err, key=report.max_rel_err.get)
        fam.record(report.passed, report.worst, f"{name}: {worst_name} rel err {report.worst:.3g}")
    return fam


# ---------------------------------------------------------------- metrics


@_timed
def check_metric_examples() -> CheckFamily:
    """Latency and over-segmentation examples worked out by hand."""
    fam = CheckFamily("metric_hand_checks", tolerance=0.1)

    def exact(label, got, want):
        err = abs(got - want)
        fam.record(err == 0.0, err, f"{label}: got {got}, want {want}")

    exact("single token AL", latency_metrics([1200.0], 1200.0).AL, 1200.0)
    exact("perfectly paced AL", latency_metrics([500.0, 1000.0, 1500.0, 2000.0], 2000.0).AL, 500.0)
    exact("CW", latency_metrics([500.0, 500.0, 1000.0], 1000.0).CW, 500.0)
    exact("clamped DAL", latency_metrics([2000.0, 2000.0], 2000.0).DAL, 2000.0)
    OS = over_segmentation(34.9, 32.3)
    fam.record(abs(OS - (-7.4)) <= 0.1, abs(OS + 7.4), f"OS {OS:.3f}")
    rv = r_value(0.323, OS / 100.0)
    fam.record(abs(rv - 44.6) <= 0.1, abs(rv - 44.6), f"R-value {rv:.3f}")
    return fam


# ---------------------------------------------------------------- policy


class ScriptedModel:
    """Stub with fixed decisions and a fixed output sequence."""

    def __init__(self, b, outputs, eos: int = -1):
        self.b = np.asarray(b, dtype=np.int64)
        self.outputs = list(outputs) + [eos]

    def decisions(self, frames):
        return self.b[: len(frames)]

    def next_token(self, frames, b, prefix, visible):
        return self.outputs[len(prefix)]

    def max_length(self, n_segments):
        return 2 * int(n_segments) + 10


class RandomModel:
    """Random but deterministic model: causal thresholded decisions, hashed outputs."""

    def __init__(self, seed: int, dim: int = 3, vocab: int = 5):
        rng = np.random.default_rng(seed)
        self.w = rng.normal(size=dim)
        self.vocab = vocab
        self.stop = rng.uniform(0.1, 0.4)

    def decisions(self, frames):
        return (np.asarray(frames) @ self.w > 0.3).astype(np.int64)

    def next_token(self, frames, b, prefix, visible):
        h = math.sin(12.9898 * (len(prefix) + 1) + 78.233 * float(np.asarray(frames).sum()) + len(frames))
        u = (h * 43758.5453) % 1.0
        return -1 if u < self.stop else int(u * 1000) % self.vocab

    def max_length(self, n_segments):
        return 2 * int(n_segments) + 10


@_timed
def check_policy(fuzz: int = 100, seed: int = 3) -> CheckFamily:
    """Hand trace of the wait-seg loop plus replay of random-model traces."""
    fam = CheckFamily("policy")
    trace = simulate(np.zeros((4, 1)), ScriptedModel([0, 1, 0, 1], [7]), k=1, frame_ms=40.0)
    writes = [e.t_ms for e in trace.events if e.kind == "WRITE"]
    fam.record(writes == [80.0, 160.0], 0.0, f"hand trace WRITE times {writes}")
    fam.record(trace.tau_ms == [80.0], 0.0, f"hand trace tau {trace.tau_ms}")
    rng = np.random.default_rng(seed)
    for i in range(fuzz):
        frames = rng.normal(size=(int(rng.integers(1, 25)), 3))
        k = [1, 2, 3, math.inf][i % 4]
        model = RandomModel(i)
        tr = simulate(frames, model, k, 40.0, i)
        res = replay_consistency_check(tr, frames, model, k)
        ok = res.passed and all(t <= tr.T_ms for t in tr.tau_ms) and tr.tau_ms == sorted(tr.tau_ms)
        fam.record(ok, 0.0, f"fuzz {i}: {res.reason}")
    return fam


FAMILIES = ("dp_oracle", "marginal_normalization", "attention_reductions", "fd_gradients", "metric_hand_checks",
            "policy")


def run_all(gradient_fault: float = 0.0) -> dict:
    families = [check_dp_oracle(), check_normalization(), check_attention_reductions(),
                check_gradients(fault=gradient_fault), check_metric_examples(), check_policy()]
    return {"passed": all(f.passed for f in families), "families": [f.to_dict() for f in families]}
