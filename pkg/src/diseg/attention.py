"""Expected segmented attention (training) and hard segmented attention (inference).

Feature ``i`` may look at ``j`` when ``j`` is in the same segment or an
earlier one.  In expectation this is

    beta[i, j] = prod_{l=i}^{j-1} (1 - p_l)   for i < j,   1 otherwise,

which multiplies the soft attention before renormalising.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

NEG_INF = -np.inf


def same_segment_probabilities(p) -> Tensor:
    """beta over the last axis of ``p`` (shape (..., n) -> (..., n, n)).

    Computed from exclusive prefix sums of log(1 - p).  Entries with p == 1
    exactly are counted separately so a hard cut yields an exact zero.
    """
    p = ad.as_tensor(p)
    n = p.shape[-1]
    hard = (p.data >= 1.0).astype(np.float64)
    # log(1 - p) with hard cuts replaced by log(1) = 0
    logs = ad.log(1.0 - ad.mul(p, 1.0 - hard))
    zero = np.zeros(p.shape[:-1] + (1,))
    # c[..., i] = sum_{l < i} log(1 - p_l), for i = 0..n
    c = ad.concat([ad.Tensor(zero), ad.cumsum(logs, axis=-1)], axis=-1)
    ci = ad.reshape(c[..., :n], p.shape[:-1] + (n, 1))
    cj = ad.reshape(c[..., :n], p.shape[:-1] + (1, n))
    upper = np.triu(np.ones((n, n)), k=1)
    beta = ad.exp(ad.mul(cj - ci, upper))
    cuts = np.concatenate([zero, np.cumsum(hard, axis=-1)], axis=-1)[..., :n]
    separated = (cuts[..., None, :] - cuts[..., :, None]) * upper > 0
    if separated.any():
        beta = ad.mul(beta, 1.0 - separated)
    return beta


def same_segment_probabilities_direct(p) -> np.ndarray:
    """Explicit product form, O(n^3); kept as an independent reference."""
    p = np.asarray(p, dtype=np.float64)
    n = len(p)
    beta = np.ones((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            beta[i, j] = np.prod(1.0 - p[i:j])
    return beta


def expected_segmented_attention(alpha, beta) -> Tensor:
    """gamma = row-normalised alpha * beta."""
    alpha, beta = ad.as_tensor(alpha), ad.as_tensor(beta)
    weighted = ad.mul(alpha, beta)
    total = weighted.data.sum(-1, keepdims=True)
    assert np.all(total > 0), "zero attention row; beta[i, i] must be 1"
    ones = np.ones((weighted.shape[-1], 1))
    denom = ad.matmul(weighted, ones)
    # division as multiplication by the reciprocal keeps us inside the op set
    recip = _reciprocal(denom)
    return ad.mul(weighted, recip)


def _reciprocal(x: Tensor) -> Tensor:
    return ad.make_node(1.0 / x.data, (x,), lambda g: (-g / (x.data * x.data),), "reciprocal")


def segment_ids(b) -> np.ndarray:
    """1-based segment id per frame: 1 + number of cuts strictly before it."""
    b = np.asarray(b, dtype=np.int64)
    return 1 + np.concatenate([[0], np.cumsum(b)[:-1]]) if len(b) else np.zeros(0, dtype=np.int64)


def hard_segment_mask(b) -> np.ndarray:
    """allowed[i, j] = segment(j) <= segment(i)."""
    seg = segment_ids(b)
    return seg[None, :] <= seg[:, None]


def causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


def additive(allowed: np.ndarray) -> np.ndarray:
    return np.where(allowed, 0.0, NEG_INF)


def multi_head_attention(xq: Tensor, xkv: Tensor, params: dict[str, Tensor], prefix: str, heads: int,
                         allowed: np.ndarray | None = None, beta: Tensor | None = None) -> Tensor:
    """Scaled dot-product attention, queries (B, Tq, D) over keys (B, Tk, D).

    ``allowed`` is a boolean mask broadcastable to (B, heads, Tq, Tk);
    ``beta`` (B, Tq, Tk) reweights the softmax and is shared by all heads.
    """
    B, Tq, D = xq.shape
    Tk = xkv.shape[1]
    dh = D // heads

    def split(t, T):
        return ad.transpose(ad.reshape(t, (B, T, heads, dh)), (0, 2, 1, 3))

    q = split(ad.matmul(xq, params[f"{prefix}.wq"]) + params[f"{prefix}.bq"], Tq)
    k = split(ad.matmul(xkv, params[f"{prefix}.wk"]) + params[f"{prefix}.bk"], Tk)
    v = split(ad.matmul(xkv, params[f"{prefix}.wv"]) + params[f"{prefix}.bv"], Tk)
    scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    mask = None if allowed is None else additive(allowed)
    if beta is not None:
        beta = ad.reshape(beta, (B, 1, Tq, Tk))
    weights = ad.softmax(scores, mask=mask, weights=beta)
    ctx = ad.reshape(ad.transpose(ad.matmul(weights, v), (0, 2, 1, 3)), (B, Tq, D))
    return ad.matmul(ctx, params[f"{prefix}.wo"]) + params[f"{prefix}.bo"]


def self_attention_regime(n: int, mode: str, p=None, b=None, key_mask: np.ndarray | None = None):
    """(allowed, beta) for self-attention over (B, n) frames under ``mode``.

    ``bi``: unmasked; ``uni``: causal; ``hard``: segment mask from ``b``;
    ``expected``: beta(p) reweighting.  ``key_mask`` (B, n) marks real frames.
    """
    allowed, beta = None, None
    if mode == "bi":
        pass
    elif mode == "uni":
        allowed = causal_mask(n)[None]
    elif mode == "hard":
        if b is None:
            raise ValueError("hard segmented attention needs decisions b")
        b = np.asarray(b)
        seg = np.concatenate([np.zeros(b.shape[:-1] + (1,), dtype=np.int64),
                              np.cumsum(b, axis=-1)[..., :-1]], axis=-1)
        allowed = seg[..., None, :] <= seg[..., :, None]
    elif mode == "expected":
        if p is None:
            raise ValueError("expected segmented attention needs probabilities p")
        beta = same_segment_probabilities(p)
    else:
        raise ValueError(f"unknown attention mode {mode!r}")
    if key_mask is not None:
        km = np.asarray(key_mask, dtype=bool)[:, None, :]
        allowed = km if allowed is None else (allowed & km)
    if allowed is not None:
        allowed = allowed[:, None]  # head axis
    return allowed, beta


def encoder_attention(x: Tensor, params: dict[str, Tensor], prefix: str, heads: int, mode: str,
                      p=None, b=None, key_mask: np.ndarray | None = None) -> Tensor:
    """Multi-head self-attention over ``x`` (B, n, D) under one of the four regimes."""
    allowed, beta = self_attention_regime(x.shape[1], mode, p=p, b=b, key_mask=key_mask)
    return multi_head_attention(x, x, params, prefix, heads, allowed=allowed, beta=beta)


def dump_attention_csv(path: str | Path, rows: list[tuple[str, np.ndarray]]) -> None:
    """Write gamma matrices as CSV rows: sentence_id, row, w_1 .. w_n."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sentence_id", "row", "weights"])
        for sid, gamma in rows:
            for i, row in enumerate(np.asarray(gamma)):
                writer.writerow([sid, i + 1, " ".join(repr(float(v)) for v in row)])
