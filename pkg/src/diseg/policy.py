"""Streaming wait-seg simulation over incrementally revealed frames.

Trace file format (JSON lines, one sentence per line)::

    {"id": 3, "k": "3", "T_ms": 1200.0,
     "events": [{"kind": "READ", "t_ms": 40.0, "payload": 1}, ...,
                {"kind": "WRITE", "t_ms": 400.0, "payload": 17}, ...],
     "hypothesis": [17, 4, -1], "tau_ms": [400.0, 480.0],
     "seg_boundaries_ms": [...], "capped": false}

READ payloads are 1-based frame indices, WRITE payloads target ids; the
hypothesis ends with -1 (end of sequence), which gets a WRITE event but no
entry in ``tau_ms``.  ``seg_boundaries_ms`` lists the stream's cut times
(frame index * frame_ms) over the whole input.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np

from .model import EOS_ID

INF = math.inf


class StreamingModel(Protocol):
    def decisions(self, frames: np.ndarray) -> np.ndarray: ...

    def next_token(self, frames: np.ndarray, b: np.ndarray, prefix: list[int], visible: list[int]) -> int: ...

    def max_length(self, n_segments: int) -> int: ...


@dataclass
class StreamEvent:
    kind: str  # READ | WRITE
    t_ms: float
    payload: int

    def to_json(self) -> dict:
        return {"kind": self.kind, "t_ms": self.t_ms, "payload": self.payload}


@dataclass
class SimulationTrace:
    id: int
    k: float
    T_ms: float
    frame_ms: float
    events: list[StreamEvent] = field(default_factory=list)
    hypothesis: list[int] = field(default_factory=list)
    tau_ms: list[float] = field(default_factory=list)
    seg_boundaries_ms: list[float] = field(default_factory=list)
    capped: bool = False

    @property
    def tokens(self) -> list[int]:
        """Hypothesis without the end-of-sequence marker."""
        return [t for t in self.hypothesis if t != EOS_ID]

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "k": format_k(self.k),
            "T_ms": self.T_ms,
            "frame_ms": self.frame_ms,
            "events": [e.to_json() for e in self.events],
            "hypothesis": list(self.hypothesis),
            "tau_ms": list(self.tau_ms),
            "seg_boundaries_ms": list(self.seg_boundaries_ms),
            "capped": self.capped,
        }

    @classmethod
    def from_json(cls, d: dict) -> "SimulationTrace":
        events = [StreamEvent(e["kind"], float(e["t_ms"]), int(e["payload"])) for e in d["events"]]
        frame_ms = float(d.get("frame_ms", 40.0))
        return cls(d["id"], parse_k(d.get("k", "inf")), float(d["T_ms"]), frame_ms, events,
                   [int(x) for x in d["hypothesis"]], [float(x) for x in d["tau_ms"]],
                   [float(x) for x in d.get("seg_boundaries_ms", [])], bool(d.get("capped", False)))


def parse_k(value) -> float:
    if isinstance(value, str) and value.strip().lower() in ("inf", "infinity", "∞"):
        return INF
    k = int(value)
    if k < 1:
        raise ValueError(f"k must be at least 1, got {value!r}")
    return k


def format_k(k: float) -> str:
    return "inf" if k == INF else str(int(k))


def simulate(frames, model: StreamingModel, k: float, frame_ms: float = 40.0, sentence_id: int = 0) -> SimulationTrace:
    """Run the wait-seg policy over ``frames`` revealed one at a time.

    After every read the cuts are recomputed on the received prefix.  Token
    ``t`` is written once the prefix holds at least ``t + k - 1`` cuts, or
    unconditionally once the whole input has been read.
    """
    frames = frames.frames if hasattr(frames, "frames") else np.asarray(frames, dtype=np.float64)
    n = len(frames)
    if n == 0:
        raise ValueError("cannot simulate an empty feature sequence")
    trace = SimulationTrace(sentence_id, k, n * frame_ms, frame_ms)
    read = 0
    b = np.zeros(0, dtype=np.int64)
    emitted_at: list[int] = []
    while True:
        segments = int(b.sum())
        t = len(trace.tokens) + 1
        if read == n or segments >= t + k - 1:
            if len(trace.tokens) >= model.max_length(segments):
                token = EOS_ID
                trace.capped = True
            else:
                token = model.next_token(frames[:read], b, trace.tokens, emitted_at + [read])
            trace.events.append(StreamEvent("WRITE", read * frame_ms, token))
            trace.hypothesis.append(token)
            if token == EOS_ID:
                break
            emitted_at.append(read)
            trace.tau_ms.append(read * frame_ms)
        else:
            read += 1
            trace.events.append(StreamEvent("READ", read * frame_ms, read))
            b = np.asarray(model.decisions(frames[:read]))
    full = np.asarray(model.decisions(frames))
    trace.seg_boundaries_ms = [float((i + 1) * frame_ms) for i in np.nonzero(full)[0]]
    return trace


@dataclass
class ReplayResult:
    passed: bool
    event_index: int | None = None
    reason: str = ""


def replay_consistency_check(trace: SimulationTrace, frames, model: StreamingModel, k: float) -> ReplayResult:
    """Check every WRITE against the policy condition, then re-simulate bit-for-bit."""
    frames = frames.frames if hasattr(frames, "frames") else np.asarray(frames, dtype=np.float64)
    n = len(frames)
    t = 1
    last_time = 0.0
    for idx, event in enumerate(trace.events):
        if event.t_ms < last_time:
            return ReplayResult(False, idx, "event times decrease")
        last_time = event.t_ms
        if event.kind != "WRITE":
            continue
        read = int(round(event.t_ms / trace.frame_ms))
        if not 0 <= read <= n:
            return ReplayResult(False, idx, f"WRITE at {event.t_ms} ms lies outside the stream")
        segments = int(np.asarray(model.decisions(frames[:read])).sum()) if read else 0
        if not (read == n or segments >= t + k - 1):
            return ReplayResult(False, idx, f"token {t} written with {segments} cuts after {read} frames")
        t += 1
    again = simulate(frames, model, k, trace.frame_ms, trace.id)
    mine, theirs = trace.to_json(), again.to_json()
    if mine != theirs:
        for idx, (e1, e2) in enumerate(zip(trace.events, again.events)):
            if e1 != e2:
                return ReplayResult(False, idx, f"replay differs: recorded {e1}, replayed {e2}")
        return ReplayResult(False, min(len(trace.events), len(again.events)), "replay differs")
    return ReplayResult(True)


def write_traces(traces, path: str | Path) -> None:
    with open(path, "w") as fh:
        for tr in traces:
            fh.write(json.dumps(tr.to_json(), separators=(",", ":")) + "\n")


def read_traces(path: str | Path) -> list[SimulationTrace]:
    traces = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                traces.append(SimulationTrace.from_json(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed trace ({exc})") from exc
    return traces
