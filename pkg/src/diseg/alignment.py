"""Feature-to-segment marginals and the word-level contrastive loss built on them."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

PAD_LOGIT = -1e9


@dataclass
class SegmentMarginals:
    M: np.ndarray  # (|a|, K)
    absorbing: bool = True

    @property
    def expected_index(self) -> np.ndarray:
        """1-based expected segment index per frame."""
        return self.M @ np.arange(1, self.M.shape[1] + 1)


def validate_spans(spans, n_subwords: int) -> list[tuple[int, int]]:
    """Check 1-based inclusive spans are ordered, contiguous and cover 1..n_subwords."""
    spans = [(int(l), int(r)) for l, r in spans]
    if not spans:
        raise ValueError("word spans are empty")
    expected_left = 1
    for k, (l, r) in enumerate(spans):
        if l != expected_left:
            kind = "gap" if l > expected_left else "overlap"
            raise ValueError(f"malformed word spans: {kind} before span {k + 1} {(l, r)}")
        if r < l:
            raise ValueError(f"malformed word spans: span {k + 1} {(l, r)} is empty")
        expected_left = r + 1
    if expected_left - 1 != n_subwords:
        raise ValueError(f"word spans cover {expected_left - 1} subwords, sequence has {n_subwords}")
    return spans


def _transition_tables(K: np.ndarray, kmax: int, absorbing: bool):
    cols = np.arange(kmax)[None, :]
    last = cols == (K[:, None] - 1)
    can_move = (cols >= 1) & (cols <= K[:, None] - 1)
    leaks = cols < (K[:, None] - 1)
    if not absorbing:
        leaks = leaks | last
    return can_move.astype(np.float64), leaks.astype(np.float64), (last & absorbing).astype(np.float64)


def segment_marginals_op(p, K, absorbing: bool = True) -> Tensor:
    """Differentiable p(a_i in Seg_k) for a batch: p (B, n), K (B,) -> (B, n, max K).

    Row i is built from row i-1 by either cutting after frame i-1 (prob p_{i-1})
    or staying (prob 1 - p_{i-1}).  With ``absorbing`` the last column keeps
    all its mass so every row sums to one; otherwise overflow beyond K is dropped.
    A 1-D ``p`` with scalar ``K`` returns an (n, K) matrix.
    """
    p = ad.as_tensor(p)
    squeeze = p.ndim == 1
    pd = p.data[None, :] if squeeze else p.data
    K = np.atleast_1d(np.asarray(K, dtype=np.int64))
    if np.any(K < 1):
        raise ValueError("K must be at least 1")
    B, n = pd.shape
    kmax = int(K.max())
    move, leak, keep = _transition_tables(K, kmax, absorbing)
    M = np.zeros((B, n, kmax))
    M[:, 0, 0] = 1.0
    for i in range(1, n):
        q = pd[:, i - 1:i]
        prev = M[:, i - 1]
        shifted = np.concatenate([np.zeros((B, 1)), prev[:, :-1]], axis=1)
        M[:, i] = shifted * move * q + prev * (leak * (1.0 - q) + keep)

    def backward(G):
        G = G[None] if squeeze else G
        gp = np.zeros((B, n))
        acc = G[:, n - 1].copy()
        for i in range(n - 1, 0, -1):
            q = pd[:, i - 1:i]
            prev = M[:, i - 1]
            shifted = np.concatenate([np.zeros((B, 1)), prev[:, :-1]], axis=1)
            gp[:, i - 1] = (acc * (shifted * move - prev * leak)).sum(axis=1)
            stay = leak * (1.0 - q) + keep
            moved = acc * move * q
            acc = G[:, i - 1] + acc * stay + np.concatenate([moved[:, 1:], np.zeros((B, 1))], axis=1)
        return (gp[0] if squeeze else gp,)

    out = M[0] if squeeze else M
    return ad.make_node(out, (p,), backward, "segment_marginals")


def segment_marginals(p, K: int, absorbing: bool = True) -> SegmentMarginals:
    with ad.no_grad():
        M = segment_marginals_op(np.asarray(p, dtype=np.float64), K, absorbing).data
    return SegmentMarginals(M, absorbing)


def brute_force_marginals(p, K: int, absorbing: bool = True) -> np.ndarray:
    """Enumerate all 2^(n-1) cut patterns; the independent reference for the DP."""
    p = np.asarray(p, dtype=np.float64)
    n = len(p)
    M = np.zeros((n, K))
    for cuts in itertools.product((0, 1), repeat=n - 1):
        weight = 1.0
        for l, c in enumerate(cuts):
            weight *= p[l] if c else 1.0 - p[l]
        seg = 0
        for i in range(n):
            if i > 0:
                seg += cuts[i - 1]
            if seg < K:
                M[i, seg] += weight
            elif absorbing:
                M[i, K - 1] += weight
    return M


def expected_segment_representations(features, M) -> Tensor:
    """f^s_k = sum_i M[i, k] a_i, i.e. M^T A (works batched on the leading axis)."""
    features, M = ad.as_tensor(features), ad.as_tensor(M)
    axes = tuple(range(M.ndim - 2)) + (M.ndim - 1, M.ndim - 2)
    return ad.matmul(ad.transpose(M, axes), features)


def word_pooling_matrix(spans, n_subwords: int) -> np.ndarray:
    spans = validate_spans(spans, n_subwords)
    P = np.zeros((len(spans), n_subwords))
    for k, (l, r) in enumerate(spans):
        P[k, l - 1:r] = 1.0 / (r - l + 1)
    return P


def subword_to_word(embeddings, spans) -> Tensor:
    """Average the subword embedding rows belonging to each word."""
    embeddings = ad.as_tensor(embeddings)
    return ad.matmul(word_pooling_matrix(spans, embeddings.shape[0]), embeddings)


def contrastive_loss(fs, ft, tau: float = 0.1) -> Tensor:
    """N-pair loss with in-sentence negatives, summed over the K words."""
    fs, ft = ad.as_tensor(fs), ad.as_tensor(ft)
    if fs.shape != ft.shape or fs.ndim != 2:
        raise ValueError(f"contrastive_loss: mismatched representations {fs.shape} vs {ft.shape}")
    if tau <= 0:
        raise ValueError("temperature must be positive")
    K = fs.shape[0]
    sims = ad.cosine_similarity(ad.reshape(fs, (K, 1, -1)), ad.reshape(ft, (1, K, -1)))
    logits = ad.mul(sims, 1.0 / tau)
    return ad.mul(ad.cross_entropy(logits, np.arange(K)), float(K))


def contrastive_loss_batch(fs: Tensor, ft: Tensor, K: np.ndarray, tau: float = 0.1) -> Tensor:
    """Padded batch version: per-sentence sums averaged over sentences.

    ``fs`` and ``ft`` are (B, Kmax, D); rows at or beyond a sentence's K are
    padding and must already be non-zero.
    """
    B, kmax, _ = fs.shape
    K = np.asarray(K)
    valid = np.arange(kmax)[None, :] < K[:, None]
    sims = ad.cosine_similarity(ad.reshape(fs, (B, kmax, 1, -1)), ad.reshape(ft, (B, 1, kmax, -1)))
    logits = ad.mul(sims, 1.0 / tau) + np.where(valid[:, None, :], 0.0, PAD_LOGIT)
    targets = np.broadcast_to(np.arange(kmax), (B, kmax))
    weights = valid.astype(np.float64)
    return ad.mul(ad.cross_entropy(logits, targets, weights), weights.sum() / B)
