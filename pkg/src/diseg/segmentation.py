"""Per-frame cut probabilities and the loss that keeps their count near K."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

EPS = 1e-7


@dataclass
class FeatureSequence:
    frames: np.ndarray  # (|a|, d)
    frame_ms: float = 40.0

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2:
            raise ValueError(f"frames must be a matrix, got shape {self.frames.shape}")

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def duration_ms(self) -> float:
        return len(self) * self.frame_ms


@dataclass
class SegmentationState:
    p: np.ndarray
    b: np.ndarray
    K_target: int | None = None
    noise_variance: float = 0.0

    def __post_init__(self):
        if len(self.p) != len(self.b):
            raise ValueError("p and b must have the same length")


def segmenter_logits(a: Tensor, params: dict[str, Tensor], prefix: str = "seg") -> Tensor:
    """One tanh hidden layer to a scalar logit per frame; ``a`` is (..., n, D)."""
    h = ad.tanh(ad.matmul(a, params[f"{prefix}.w1"]) + params[f"{prefix}.b1"])
    out = ad.matmul(h, params[f"{prefix}.w2"]) + params[f"{prefix}.b2"]
    return ad.reshape(out, out.shape[:-1])


def rowwise_dense(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``x @ w + b`` for a (n, d) matrix, computed so each row's result is
    independent of n (BLAS blocking otherwise varies in the last bit)."""
    return (x[:, :, None] * w[None]).sum(axis=1) + b


def segmenter_logits_rowwise(a: np.ndarray, params: dict, prefix: str = "seg") -> np.ndarray:
    """Inference-only segmenter logits whose prefix rows equal the full-sequence rows bit-for-bit."""
    val = {k: (v.data if isinstance(v, Tensor) else np.asarray(v)) for k, v in params.items()}
    h = np.tanh(rowwise_dense(a, val[f"{prefix}.w1"], val[f"{prefix}.b1"]))
    return rowwise_dense(h, val[f"{prefix}.w2"], val[f"{prefix}.b2"])[:, 0]


def probabilities_from_logits(logits: Tensor, noise: np.ndarray | None = None) -> Tensor:
    """sigmoid(logit + noise) clamped to [EPS, 1 - EPS]; noise is a constant input."""
    z = logits if noise is None else logits + noise
    return ad.clip(ad.sigmoid(z), EPS, 1.0 - EPS)


def sample_noise(shape, variance: float, rng: np.random.Generator) -> np.ndarray:
    if variance < 0:
        raise ValueError("noise variance must be non-negative")
    if variance == 0:
        return np.zeros(shape)
    return rng.normal(0.0, np.sqrt(variance), size=shape)


def segmentation_probabilities(
    features: FeatureSequence | np.ndarray,
    ffn: dict,
    n: float = 1.0,
    mode: str = "infer",
    seed: int | None = None,
    prefix: str = "seg",
) -> np.ndarray:
    """Segmentation probability for every row of ``features``.

    ``ffn`` holds the segmenter weights (``{prefix}.w1`` ...).  Noise with
    variance ``n`` is only added in ``train`` mode.
    """
    frames = features.frames if isinstance(features, FeatureSequence) else np.asarray(features, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] == 0:
        raise ValueError("segmentation needs a non-empty feature sequence")
    if mode not in ("train", "infer"):
        raise ValueError(f"unknown mode {mode!r}")
    params = {k: ad.as_tensor(v) for k, v in ffn.items() if k.startswith(prefix + ".")}
    with ad.no_grad():
        logits = Tensor(segmenter_logits_rowwise(frames, params, prefix))
        noise = None
        if mode == "train":
            noise = sample_noise(logits.shape, n, np.random.default_rng(seed))
        return probabilities_from_logits(logits, noise).data


def hard_decisions(p) -> np.ndarray:
    return (np.asarray(p) >= 0.5).astype(np.int64)


def pool_kernel(n_frames: int, K: int) -> int:
    return max(1, n_frames // K)


def segment_count_loss(p, K: int) -> Tensor:
    """|sum(p) - K| + |sum(maxpool(p, w)) - K| with w = max(1, |a| // K).

    ``p`` is a 1-D tensor (or array) holding one sentence's probabilities.
    """
    if K < 1:
        raise ValueError("K must be at least 1")
    p = ad.as_tensor(p)
    if p.ndim != 1 or p.shape[0] < 1:
        raise ValueError(f"segment_count_loss expects a non-empty vector, got shape {p.shape}")
    w = pool_kernel(p.shape[0], K)
    expected = ad.absolute(ad.sum(p) - float(K))
    pooled = ad.absolute(ad.sum(ad.max_pool1d(p, w)) - float(K))
    return expected + pooled
