"""Planted-boundary streaming corpus.

Every word type owns a fixed random block of frames; a sentence concatenates
the blocks of its words (plus Gaussian jitter), so the true word boundaries
are known exactly.  Optional silence blocks carry no tokens.

File format (JSON lines, one sentence per line)::

    {"id": 0, "frame_ms": 40.0, "frames": [[...], ...], "subwords": [...],
     "word_spans": [[l, r], ...], "target": [...], "boundaries_ms": [...]}

``word_spans`` are 1-based and inclusive.  Subword and target ids are 0-based
vocabulary indices.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .alignment import validate_spans
from .segmentation import FeatureSequence


class CorpusFormatError(ValueError):
    pass


@dataclass
class CorpusConfig:
    n_word_types: int = 24
    frame_dim: int = 16
    frames_per_word: tuple[int, int] = (2, 6)
    words_per_sentence: tuple[int, int] = (3, 10)
    frame_noise: float = 0.2
    silence_prob: float = 0.1
    frame_ms: float = 40.0
    reorder_window: int = 0
    reorder_prob: float = 0.3
    n_sentences: int = 2000
    seed: int = 0
    # word type -> subword ids / target id; drawn from the seed when left empty
    subword_table: list[list[int]] = field(default_factory=list)
    target_map: list[int] = field(default_factory=list)

    def validate(self) -> None:
        lo, hi = self.frames_per_word
        if not 1 <= lo <= hi:
            raise ValueError(f"bad frames_per_word range {self.frames_per_word}")
        lo, hi = self.words_per_sentence
        if not 1 <= lo <= hi:
            raise ValueError(f"bad words_per_sentence range {self.words_per_sentence}")
        if self.frame_noise < 0:
            raise ValueError("frame_noise must be non-negative")
        if not 0 <= self.silence_prob < 1:
            raise ValueError("silence_prob must lie in [0, 1)")
        if self.reorder_window not in (0, 2):
            raise ValueError("reorder_window must be 0 or 2")
        if self.n_word_types < 1 or self.frame_dim < 1 or self.n_sentences < 1 or self.frame_ms <= 0:
            raise ValueError("counts, dimensions and frame_ms must be positive")
        if self.subword_table and len(self.subword_table) != self.n_word_types:
            raise ValueError("subword_table must cover every word type")
        if self.target_map and len(self.target_map) != self.n_word_types:
            raise ValueError("target_map must cover every word type")

    @property
    def n_subwords(self) -> int:
        return 1 + max(s for ids in self.subword_table for s in ids)

    @property
    def n_targets(self) -> int:
        return 1 + max(self.target_map)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["frames_per_word"] = list(self.frames_per_word)
        d["words_per_sentence"] = list(self.words_per_sentence)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusConfig":
        d = dict(d)
        for key in ("frames_per_word", "words_per_sentence"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class Sentence:
    id: int
    features: FeatureSequence
    subwords: list[int]
    word_spans: list[tuple[int, int]]
    target: list[int]
    boundaries_ms: list[float]

    @property
    def K(self) -> int:
        return len(self.word_spans)

    @property
    def frame_ms(self) -> float:
        return self.features.frame_ms

    @property
    def T_ms(self) -> float:
        return self.features.duration_ms

    def check(self) -> None:
        validate_spans(self.word_spans, len(self.subwords))
        if len(self.boundaries_ms) != self.K:
            raise ValueError(f"sentence {self.id}: {len(self.boundaries_ms)} boundaries for K={self.K}")
        if any(b2 <= b1 for b1, b2 in zip(self.boundaries_ms, self.boundaries_ms[1:])):
            raise ValueError(f"sentence {self.id}: boundaries not strictly increasing")
        if self.boundaries_ms and self.boundaries_ms[-1] != self.T_ms:
            raise ValueError(f"sentence {self.id}: last boundary {self.boundaries_ms[-1]} != T {self.T_ms}")

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "frame_ms": self.frame_ms,
            "frames": self.features.frames.tolist(),
            "subwords": list(self.subwords),
            "word_spans": [list(s) for s in self.word_spans],
            "target": list(self.target),
            "boundaries_ms": list(self.boundaries_ms),
        }

    @classmethod
    def from_json(cls, d: dict) -> "Sentence":
        s = cls(
            id=d["id"],
            features=FeatureSequence(np.asarray(d["frames"], dtype=np.float64), float(d["frame_ms"])),
            subwords=[int(x) for x in d["subwords"]],
            word_spans=[(int(l), int(r)) for l, r in d["word_spans"]],
            target=[int(x) for x in d["target"]],
            boundaries_ms=[float(x) for x in d["boundaries_ms"]],
        )
        s.check()
        return s

    def __eq__(self, other) -> bool:
        if not isinstance(other, Sentence):
            return NotImplemented
        return self.to_json() == other.to_json()


def resolve_tables(config: CorpusConfig, rng: np.random.Generator) -> CorpusConfig:
    """Fill in the subword table and target map from ``rng`` when absent."""
    W = config.n_word_types
    if not config.subword_table:
        split = rng.random(W) < 0.5
        table, next_id = [], 0
        for w in range(W):
            width = 2 if split[w] else 1
            table.append(list(range(next_id, next_id + width)))
            next_id += width
        config.subword_table = table
    if not config.target_map:
        config.target_map = [int(t) for t in rng.permutation(W)]
    return config


def generate(config: CorpusConfig) -> list[Sentence]:
    config.validate()
    rng = np.random.default_rng(config.seed)
    # own stream for swaps, so enabling reordering leaves frames and words unchanged
    swap_rng = np.random.default_rng([config.seed, 1])
    resolve_tables(config, rng)
    d = config.frame_dim
    lo, hi = config.frames_per_word
    lengths = rng.integers(lo, hi + 1, size=config.n_word_types)
    prototypes = [rng.normal(0.0, 1.0, size=(int(L), d)) for L in lengths]

    corpus = []
    for sid in range(config.n_sentences):
        m = int(rng.integers(config.words_per_sentence[0], config.words_per_sentence[1] + 1))
        words = rng.integers(0, config.n_word_types, size=m)
        blocks, subwords, spans, boundaries = [], [], [], []
        n_frames = 0
        for w in words:
            # silence only ever precedes a word, so the last boundary stays at T
            if config.silence_prob > 0 and rng.random() < config.silence_prob:
                L = int(rng.integers(lo, hi + 1))
                blocks.append(rng.normal(0.0, config.frame_noise, size=(L, d)))
                n_frames += L
            proto = prototypes[w]
            blocks.append(proto + rng.normal(0.0, config.frame_noise, size=proto.shape))
            n_frames += proto.shape[0]
            boundaries.append(n_frames * config.frame_ms)
            left = len(subwords) + 1
            subwords.extend(config.subword_table[w])
            spans.append((left, len(subwords)))
        target = [config.target_map[w] for w in words]
        if config.reorder_window == 2:
            t = 0
            while t < len(target) - 1:
                if swap_rng.random() < config.reorder_prob:
                    target[t], target[t + 1] = target[t + 1], target[t]
                    t += 2
                else:
                    t += 1
        frames = np.round(np.concatenate(blocks, axis=0), 6)
        corpus.append(Sentence(sid, FeatureSequence(frames, config.frame_ms), subwords, spans, target, boundaries))
    return corpus


def dumps_corpus(corpus: list[Sentence]) -> str:
    return "".join(json.dumps(s.to_json(), separators=(",", ":")) + "\n" for s in corpus)


def save_corpus(corpus: list[Sentence], path: str | Path) -> None:
    Path(path).write_text(dumps_corpus(corpus))


def load_corpus(path: str | Path) -> list[Sentence]:
    corpus = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                corpus.append(Sentence.from_json(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise CorpusFormatError(f"{path}:{lineno}: malformed sentence ({exc})") from exc
    return corpus


def fingerprint(corpus: list[Sentence]) -> str:
    return hashlib.sha256(dumps_corpus(corpus).encode()).hexdigest()


def vocab_sizes(corpus: list[Sentence]) -> tuple[int, int]:
    """(subword vocabulary, target vocabulary) sizes implied by a corpus."""
    n_sub = 1 + max(max(s.subwords) for s in corpus)
    n_tgt = 1 + max(max(s.target) for s in corpus)
    return n_sub, n_tgt


def fixed_length_boundaries(T_ms: float, spacing_ms: float = 280.0) -> list[float]:
    """Equal-spacing segmenter: a cut every ``spacing_ms`` up to and including T."""
    count = int(np.floor(T_ms / spacing_ms))
    return [spacing_ms * (i + 1) for i in range(count)]
