"""Toy speech-translation transformer with a differentiable segmenter.

One encoder and one decoder are shared by three tasks:

* ST  (speech -> target):   expected segmented encoder, wait-seg decoder
* ASR (speech -> subwords): same encoder and policy as ST
* MT  (subwords -> target): causal text encoder, wait-k decoder over words

The decoder vocabulary is ``[PAD, BOS_TGT, BOS_SRC, EOS] + targets + subwords``;
the BOS token tells the decoder which language to produce.
"""

from __future__ import annotations

import json
from contextlib import contextmanager
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .alignment import contrastive_loss_batch, expected_segment_representations, segment_marginals_op
from .attention import encoder_attention, multi_head_attention
from .autodiff import ParameterSet, Tensor
from .segmentation import (hard_decisions, probabilities_from_logits, rowwise_dense, segment_count_loss,
                           segmenter_logits, segmenter_logits_rowwise)

PAD, BOS_TGT, BOS_SRC, EOS = 0, 1, 2, 3
N_SPECIAL = 4
EOS_ID = -1  # end of sequence in target-id space (decoded hypotheses, traces)
LOSS_TERMS = ("st", "asr", "mt", "num", "ctr", "total")


@dataclass
class ModelConfig:
    d_model: int = 64
    heads: int = 2
    enc_layers: int = 2
    dec_layers: int = 2
    ffn_dim: int = 256
    src_vocab: int = 1
    tgt_vocab: int = 1
    frame_dim: int = 16
    noise_variance: float = 1.0
    tau: float = 0.1
    lr: float = 1e-3
    batch_size: int = 16
    max_k: int = 0  # 0 = no cap beyond the batch's largest word count
    seed: int = 0
    epochs: int = 12
    grad_clip: float = 1.0
    absorbing: bool = True

    def validate(self) -> None:
        for name in ("d_model", "heads", "enc_layers", "dec_layers", "ffn_dim", "src_vocab", "tgt_vocab",
                     "frame_dim", "batch_size", "epochs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.heads:
            raise ValueError("heads must divide d_model")
        if self.tau <= 0 or self.lr <= 0 or self.noise_variance < 0 or self.max_k < 0:
            raise ValueError("tau and lr must be positive, noise_variance and max_k non-negative")

    @property
    def vocab(self) -> int:
        return N_SPECIAL + self.tgt_vocab + self.src_vocab

    def tgt_token(self, ids) -> np.ndarray:
        return N_SPECIAL + np.asarray(ids, dtype=np.int64)

    def src_token(self, ids) -> np.ndarray:
        return N_SPECIAL + self.tgt_vocab + np.asarray(ids, dtype=np.int64)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


# ---------------------------------------------------------------- parameters


def init_params(cfg: ModelConfig) -> ParameterSet:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    D, F = cfg.d_model, cfg.ffn_dim
    params = ParameterSet()

    def dense(name, fan_in, fan_out):
        params[f"{name}.w"] = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))
        params[f"{name}.b"] = np.zeros(fan_out)

    def attention(prefix):
        for m in ("q", "k", "v", "o"):
            params[f"{prefix}.w{m}"] = rng.normal(0.0, 1.0 / np.sqrt(D), size=(D, D))
            params[f"{prefix}.b{m}"] = np.zeros(D)

    def norm(prefix):
        params[f"{prefix}.g"] = np.ones(D)
        params[f"{prefix}.b"] = np.zeros(D)

    dense("speech", cfg.frame_dim, D)
    params["seg.w1"] = rng.normal(0.0, 1.0 / np.sqrt(D), size=(D, 4 * D))
    params["seg.b1"] = np.zeros(4 * D)
    params["seg.w2"] = rng.normal(0.0, 1.0 / np.sqrt(4 * D), size=(4 * D, 1))
    params["seg.b2"] = np.zeros(1)
    params["src_embed"] = rng.normal(0.0, 1.0, size=(cfg.src_vocab, D))
    params["dec_embed"] = rng.normal(0.0, 1.0, size=(cfg.vocab, D))
    for layer in range(cfg.enc_layers):
        pre = f"enc.{layer}"
        norm(f"{pre}.ln1")
        attention(f"{pre}.attn")
        norm(f"{pre}.ln2")
        dense(f"{pre}.ffn1", D, F)
        dense(f"{pre}.ffn2", F, D)
    norm("enc.ln")
    for layer in range(cfg.dec_layers):
        pre = f"dec.{layer}"
        norm(f"{pre}.ln1")
        attention(f"{pre}.self")
        norm(f"{pre}.ln2")
        attention(f"{pre}.cross")
        norm(f"{pre}.ln3")
        dense(f"{pre}.ffn1", D, F)
        dense(f"{pre}.ffn2", F, D)
    norm("dec.ln")
    dense("out", D, cfg.vocab)
    return params


# ---------------------------------------------------------------- building blocks


def positional_encoding(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    rates = 1.0 / (10000.0 ** (np.arange(0, d, 2) / d))
    pe = np.zeros((n, d))
    pe[:, 0::2] = np.sin(pos * rates)
    pe[:, 1::2] = np.cos(pos * rates[: d // 2])
    return pe


def _ln(P, prefix, x):
    return ad.layer_norm(x, P[f"{prefix}.g"], P[f"{prefix}.b"])


def _ffn(P, prefix, x):
    h = ad.tanh(ad.matmul(x, P[f"{prefix}1.w"]) + P[f"{prefix}1.b"])
    return ad.matmul(h, P[f"{prefix}2.w"]) + P[f"{prefix}2.b"]


def speech_features(P, frames: np.ndarray) -> Tensor:
    """Project raw frames (B, n, frame_dim) to model features a (B, n, D)."""
    return ad.matmul(ad.Tensor(frames), P["speech.w"]) + P["speech.b"]


def encode(P, cfg: ModelConfig, x: Tensor, mode: str, key_mask: np.ndarray, p=None, b=None) -> Tensor:
    """Pre-norm transformer encoder; every layer uses the same attention regime."""
    h = x + positional_encoding(x.shape[1], cfg.d_model)
    for layer in range(cfg.enc_layers):
        pre = f"enc.{layer}"
        h = h + encoder_attention(_ln(P, f"{pre}.ln1", h), P, f"{pre}.attn", cfg.heads, mode,
                                  p=p, b=b, key_mask=key_mask)
        h = h + _ffn(P, f"{pre}.ffn", _ln(P, f"{pre}.ln2", h))
    return _ln(P, "enc.ln", h)


def decode(P, cfg: ModelConfig, memory: Tensor, memory_allowed: np.ndarray, dec_in: np.ndarray) -> Tensor:
    """Logits (B, T, V) for decoder inputs ``dec_in`` (B, T).

    ``memory_allowed`` (B, T, n) says which encoder positions each row may read.
    """
    B, T = dec_in.shape
    h = ad.embedding(P["dec_embed"], dec_in) + positional_encoding(T, cfg.d_model)
    causal = np.tril(np.ones((T, T), dtype=bool))[None, None]
    cross = np.asarray(memory_allowed, dtype=bool)[:, None]
    for layer in range(cfg.dec_layers):
        pre = f"dec.{layer}"
        x = _ln(P, f"{pre}.ln1", h)
        h = h + multi_head_attention(x, x, P, f"{pre}.self", cfg.heads, allowed=causal)
        h = h + multi_head_attention(_ln(P, f"{pre}.ln2", h), memory, P, f"{pre}.cross", cfg.heads, allowed=cross)
        h = h + _ffn(P, f"{pre}.ffn", _ln(P, f"{pre}.ln3", h))
    h = _ln(P, "dec.ln", h)
    return ad.matmul(h, P["out.w"]) + P["out.b"]


# ---------------------------------------------------------------- policies


def g_of_t(b, t: int, k: int) -> int:
    """Frames needed before emitting token ``t`` (1-based) under wait-seg ``k``.

    Smallest i with sum(b[:i]) >= t + k - 1; the full length when the stream
    never accumulates that many cuts.
    """
    b = np.asarray(b)
    if t < 1 or k < 1:
        raise ValueError("t and k must be at least 1")
    csum = np.cumsum(b)
    need = t + k - 1
    if len(b) == 0 or csum[-1] < need:
        return len(b)
    return int(np.searchsorted(csum, need, side="left")) + 1


def wait_seg_decoder_mask(b, k, n_rows: int) -> np.ndarray:
    """(n_rows, |a|) boolean; row t may read frames 1..g(t; k)."""
    b = np.asarray(b)
    n = len(b)
    if k == np.inf or k > n + n_rows:
        return np.ones((n_rows, n), dtype=bool)
    limits = np.array([g_of_t(b, t, int(k)) for t in range(1, n_rows + 1)])
    return np.arange(n)[None, :] < limits[:, None]


def wait_k_word_mask(word_end: list[int], k: int, n_rows: int, n_cols: int) -> np.ndarray:
    """Row t may read the subwords of words 1..t+k-1 (``word_end`` is 1-based)."""
    K = len(word_end)
    limits = np.array([word_end[min(t + k - 1, K) - 1] for t in range(1, n_rows + 1)])
    return np.arange(n_cols)[None, :] < limits[:, None]


# ---------------------------------------------------------------- batches


@dataclass
class Batch:
    """A padded batch; targets carry a trailing EOS in ``*_out``."""

    frames: np.ndarray        # (B, n, frame_dim)
    frame_mask: np.ndarray    # (B, n) bool
    n_frames: np.ndarray      # (B,)
    K: np.ndarray             # (B,) word counts
    sub_ids: np.ndarray       # (B, X) raw subword ids, 0-padded
    sub_mask: np.ndarray      # (B, X) bool
    word_end: list[list[int]]  # per sentence, 1-based last subword of each word
    pool: np.ndarray          # (B, Kmax, X) subword-to-word averaging
    st_in: np.ndarray
    st_out: np.ndarray
    st_w: np.ndarray
    asr_in: np.ndarray
    asr_out: np.ndarray
    asr_w: np.ndarray

    @property
    def size(self) -> int:
        return len(self.K)


def collate(sentences, cfg: ModelConfig) -> Batch:
    from .alignment import word_pooling_matrix

    B = len(sentences)
    n = max(len(s.features) for s in sentences)
    X = max(len(s.subwords) for s in sentences)
    Ty = max(len(s.target) for s in sentences) + 1
    kmax = max(s.K for s in sentences)
    frames = np.zeros((B, n, sentences[0].features.frames.shape[1]))
    frame_mask = np.zeros((B, n), dtype=bool)
    sub_ids = np.zeros((B, X), dtype=np.int64)
    sub_mask = np.zeros((B, X), dtype=bool)
    pool = np.zeros((B, kmax, X))
    st_in = np.full((B, Ty), PAD, dtype=np.int64)
    st_out = np.full((B, Ty), PAD, dtype=np.int64)
    st_w = np.zeros((B, Ty))
    asr_in = np.full((B, X + 1), PAD, dtype=np.int64)
    asr_out = np.full((B, X + 1), PAD, dtype=np.int64)
    asr_w = np.zeros((B, X + 1))
    word_end = []
    for i, s in enumerate(sentences):
        L = len(s.features)
        frames[i, :L] = s.features.frames
        frame_mask[i, :L] = True
        m = len(s.subwords)
        sub_ids[i, :m] = s.subwords
        sub_mask[i, :m] = True
        pool[i, : s.K, :m] = word_pooling_matrix(s.word_spans, m)
        word_end.append([r for _, r in s.word_spans])
        y = cfg.tgt_token(s.target)
        st_in[i, : len(y) + 1] = np.concatenate([[BOS_TGT], y])
        st_out[i, : len(y) + 1] = np.concatenate([y, [EOS]])
        st_w[i, : len(y) + 1] = 1.0
        x = cfg.src_token(s.subwords)
        asr_in[i, : m + 1] = np.concatenate([[BOS_SRC], x])
        asr_out[i, : m + 1] = np.concatenate([x, [EOS]])
        asr_w[i, : m + 1] = 1.0
    return Batch(frames, frame_mask, frame_mask.sum(1), np.array([s.K for s in sentences]), sub_ids, sub_mask,
                 word_end, pool, st_in, st_out, st_w, asr_in, asr_out, asr_w)


def _speech_cross_masks(b: np.ndarray, batch: Batch, k: np.ndarray, n_rows: int) -> np.ndarray:
    B, n = b.shape
    mask = np.zeros((B, n_rows, n), dtype=bool)
    for i in range(B):
        L = batch.n_frames[i]
        mask[i, :, :L] = wait_seg_decoder_mask(b[i, :L], int(k[i]), n_rows)
    return mask


def _text_cross_masks(batch: Batch, k: np.ndarray, n_rows: int) -> np.ndarray:
    B, X = batch.sub_ids.shape
    mask = np.zeros((B, n_rows, X), dtype=bool)
    for i in range(B):
        mask[i] = wait_k_word_mask(batch.word_end[i], int(k[i]), n_rows, X)
    return mask


def multitask_losses(P, cfg: ModelConfig, batch: Batch, k, noise: np.ndarray | None = None,
                     speech_mode: str = "expected", text_mode: str = "uni") -> dict[str, Tensor]:
    """All training losses for one batch; ``total`` is their unweighted sum.

    ``k`` (scalar or per sentence) is clamped to each sentence's word count.
    ``noise`` is the pre-sigmoid Gaussian noise, sampled by the caller.
    The decoder masks use cuts obtained by thresholding the (noisy) p; no
    gradient flows through that threshold.
    """
    B = batch.size
    k = np.minimum(np.broadcast_to(np.asarray(k), (B,)), batch.K)
    with _term("speech encoder (shared by st/asr/num/ctr)"):
        a = speech_features(P, batch.frames)
        p = probabilities_from_logits(segmenter_logits(a, P), noise)
        b = hard_decisions(p.data) * batch.frame_mask
        if speech_mode == "expected":
            memory = encode(P, cfg, a, "expected", batch.frame_mask, p=p)
        else:
            memory = encode(P, cfg, a, speech_mode, batch.frame_mask, b=b)

    losses = {}
    with _term("st"):
        st_mask = _speech_cross_masks(b, batch, k, batch.st_in.shape[1])
        losses["st"] = ad.cross_entropy(decode(P, cfg, memory, st_mask, batch.st_in), batch.st_out, batch.st_w)
    with _term("asr"):
        asr_mask = _speech_cross_masks(b, batch, k, batch.asr_in.shape[1])
        losses["asr"] = ad.cross_entropy(decode(P, cfg, memory, asr_mask, batch.asr_in), batch.asr_out,
                                         batch.asr_w)
    with _term("mt"):
        e = ad.embedding(P["src_embed"], batch.sub_ids)
        text_memory = encode(P, cfg, e, text_mode, batch.sub_mask)
        mt_mask = _text_cross_masks(batch, k, batch.st_in.shape[1])
        losses["mt"] = ad.cross_entropy(decode(P, cfg, text_memory, mt_mask, batch.st_in), batch.st_out,
                                        batch.st_w)
    with _term("num"):
        l_num = None
        for i in range(B):
            term = segment_count_loss(p[i, : batch.n_frames[i]], int(batch.K[i]))
            l_num = term if l_num is None else l_num + term
        losses["num"] = ad.mul(l_num, 1.0 / B)
    with _term("ctr"):
        kmax = batch.pool.shape[1]
        pad_rows = (np.arange(kmax)[None, :] >= batch.K[:, None])[..., None] * np.ones((1, 1, cfg.d_model))
        M = ad.mul(segment_marginals_op(p, batch.K, cfg.absorbing), batch.frame_mask[..., None].astype(float))
        fs = expected_segment_representations(a, M) + pad_rows
        ft = ad.matmul(batch.pool, e) + pad_rows
        losses["ctr"] = contrastive_loss_batch(fs, ft, batch.K, cfg.tau)

    for name, value in losses.items():
        if not np.isfinite(value.data):
            raise FloatingPointError(f"loss term {name} is not finite")
    losses["total"] = losses["st"] + losses["asr"] + losses["mt"] + losses["num"] + losses["ctr"]
    return losses


@contextmanager
def _term(name: str):
    try:
        yield
    except FloatingPointError as exc:
        raise FloatingPointError(f"loss term {name}: {exc}") from exc


# ---------------------------------------------------------------- inference


class DiSegModel:
    """Read-only inference wrapper around trained parameters."""

    def __init__(self, params: ParameterSet, cfg: ModelConfig):
        self.params = params
        self.cfg = cfg
        self._P = params.constants()
        self._memo = None
        self._allowed = np.concatenate([[EOS], cfg.tgt_token(np.arange(cfg.tgt_vocab))])

    def probabilities(self, frames: np.ndarray) -> np.ndarray:
        frames = np.asarray(frames, dtype=np.float64)
        if frames.ndim != 2 or len(frames) == 0:
            raise ValueError("segmentation needs a non-empty feature sequence")
        a = rowwise_dense(frames, self.params["speech.w"], self.params["speech.b"])
        with ad.no_grad():
            return probabilities_from_logits(ad.Tensor(segmenter_logits_rowwise(a, self.params))).data

    def decisions(self, frames: np.ndarray) -> np.ndarray:
        return hard_decisions(self.probabilities(frames))

    def encode(self, frames: np.ndarray, b: np.ndarray) -> Tensor:
        """Hard segmented encoding of a (prefix) frame sequence; memoises the last call."""
        frames = np.asarray(frames, dtype=np.float64)
        if self._memo is not None:
            f0, b0, mem = self._memo
            if f0.shape == frames.shape and np.array_equal(f0, frames) and np.array_equal(b0, b):
                return mem
        with ad.no_grad():
            a = speech_features(self._P, frames[None])
            mem = encode(self._P, self.cfg, a, "hard", np.ones((1, len(frames)), dtype=bool), b=np.asarray(b)[None])
        self._memo = (frames.copy(), np.asarray(b).copy(), mem)
        return mem

    def next_token(self, frames: np.ndarray, b: np.ndarray, prefix: list[int], visible: list[int]) -> int:
        """Greedy next target id (or EOS_ID) given the tokens so far.

        ``visible[r]`` is how many frames decoder row r may read; the last
        entry belongs to the token being produced.
        """
        mem = self.encode(frames, b)
        n = len(frames)
        dec_in = np.concatenate([[BOS_TGT], self.cfg.tgt_token(prefix)])[None].astype(np.int64)
        allowed = (np.arange(n)[None, :] < np.asarray(visible)[:, None])[None]
        with ad.no_grad():
            logits = decode(self._P, self.cfg, mem, allowed, dec_in).data[0, -1]
        token = int(self._allowed[np.argmax(logits[self._allowed])])
        return EOS_ID if token == EOS else token - N_SPECIAL

    def max_length(self, n_segments: int) -> int:
        return 2 * int(n_segments) + 10

    def offline_decode(self, features) -> list[int]:
        """Greedy decoding with the whole input visible; EOS is not included."""
        frames = features.frames if hasattr(features, "frames") else np.asarray(features)
        b = self.decisions(frames)
        n = len(frames)
        tokens: list[int] = []
        cap = self.max_length(b.sum())
        while len(tokens) < cap:
            tok = self.next_token(frames, b, tokens, [n] * (len(tokens) + 1))
            if tok == EOS_ID:
                break
            tokens.append(tok)
        return tokens


def offline_decode(features, params: ParameterSet, cfg: ModelConfig) -> list[int]:
    return DiSegModel(params, cfg).offline_decode(features)


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path: str | Path, params: ParameterSet, cfg: ModelConfig, corpus_fingerprint: str) -> None:
    doc = params.to_json_dict()
    doc["model_config"] = cfg.to_dict()
    doc["corpus_fingerprint"] = corpus_fingerprint
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path: str | Path) -> tuple[ParameterSet, ModelConfig, str]:
    doc = json.loads(Path(path).read_text())
    cfg = ModelConfig.from_dict(doc["model_config"])
    return ParameterSet.from_json_dict(doc), cfg, doc.get("corpus_fingerprint", "")
