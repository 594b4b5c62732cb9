"""Training loop with a freshly sampled lagging value k for every batch."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .autodiff import ParameterSet, evaluate_with_gradients
from .model import LOSS_TERMS, ModelConfig, collate, init_params, multitask_losses
from .segmentation import sample_noise

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, history: list["EpochLog"]):
        super().__init__(message)
        self.history = history


@dataclass
class EpochLog:
    epoch: int
    st: float
    asr: float
    mt: float
    num: float
    ctr: float
    total: float

    def row(self) -> list:
        return [self.epoch, self.st, self.asr, self.mt, self.num, self.ctr, self.total]


class Adam:
    def __init__(self, params: ParameterSet, lr: float, betas=(0.9, 0.98), eps: float = 1e-9):
        self.lr, self.betas, self.eps = lr, betas, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: ParameterSet, grads: ParameterSet) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1**self.t, 1 - b2**self.t
        for name in params:
            g = grads[name]
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            params[name] = params[name] - self.lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)


def clip_gradients(grads: ParameterSet, max_norm: float) -> float:
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for name in grads:
            grads[name] = grads[name] * scale
    return norm


def sample_k(rng: np.random.Generator, K: np.ndarray, max_k: int = 0) -> int:
    """Uniform k in [1, largest word count in the batch] (optionally capped)."""
    upper = int(K.max())
    if max_k:
        upper = min(upper, max_k)
    return int(rng.integers(1, upper + 1))


def bucketed_batches(rng: np.random.Generator, lengths: list[int], batch_size: int, pool: int = 8):
    """Shuffle, sort by length within pools of ``pool`` batches, then shuffle batch order."""
    order = rng.permutation(len(lengths))
    batches = []
    span = batch_size * pool
    for start in range(0, len(order), span):
        chunk = sorted(order[start:start + span], key=lambda i: lengths[i])
        batches.extend(chunk[j:j + batch_size] for j in range(0, len(chunk), batch_size))
    return [batches[i] for i in rng.permutation(len(batches))]


def train(corpus, cfg: ModelConfig, params: ParameterSet | None = None, progress=None):
    """Train on ``corpus``; returns ``(params, history)``.

    Deterministic given ``cfg.seed``: the same seed, corpus and config give
    bit-identical parameters.
    """
    if not corpus:
        raise ValueError("training corpus is empty")
    cfg.validate()
    params = init_params(cfg) if params is None else params.copy()
    rng = np.random.default_rng(cfg.seed + 1)
    opt = Adam(params, cfg.lr)
    history: list[EpochLog] = []
    strikes = 0
    for epoch in range(1, cfg.epochs + 1):
        sums = dict.fromkeys(LOSS_TERMS, 0.0)
        n_batches = 0
        for indices in bucketed_batches(rng, [len(s.features) for s in corpus], cfg.batch_size):
            batch = collate([corpus[i] for i in indices], cfg)
            k = sample_k(rng, batch.K, cfg.max_k)
            noise = sample_noise(batch.frame_mask.shape, cfg.noise_variance, rng)
            losses, grads = evaluate_with_gradients(
                lambda P: _total_first(multitask_losses(P, cfg, batch, k, noise)), params)
            clip_gradients(grads, cfg.grad_clip)
            opt.step(params, grads)
            for name in LOSS_TERMS:
                sums[name] += float(losses[1][name].data)
            n_batches += 1
        entry = EpochLog(epoch, **{name: sums[name] / n_batches for name in LOSS_TERMS})
        history.append(entry)
        log.info("epoch %d total %.4f st %.4f asr %.4f mt %.4f num %.4f ctr %.4f", epoch, entry.total,
                 entry.st, entry.asr, entry.mt, entry.num, entry.ctr)
        if progress is not None:
            progress(entry)
        strikes = strikes + 1 if entry.total > 10 * history[0].total else 0
        if strikes >= 3:
            raise TrainingDiverged(f"loss diverged at epoch {epoch}", history)
    return params, history


def _total_first(losses):
    return losses["total"], losses
