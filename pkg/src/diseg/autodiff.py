"""Small reverse-mode differentiation engine over a closed set of numpy ops.

Every value is a float64 :class:`Tensor`.  Operations record a backward
closure when gradient recording is on and at least one input requires a
gradient; calling :meth:`Tensor.backward` on a scalar walks the tape in
reverse topological order.

Stochastic quantities (noise, sampled ``k``) never live in the graph: callers
sample them up front and pass them in as constants, so every loss is a
deterministic function of the parameters and can be finite-difference checked.
"""

from __future__ import annotations

import contextlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

FORMAT_VERSION = 1

_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, op: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf needing it."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topological_order(root: Tensor) -> list[Tensor]:
    # iterative DFS; graphs are deep enough (DP, decoding) to hit the recursion limit
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    order.reverse()
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    """Wrap an op result, recording ``backward`` only when some parent needs a gradient.

    ``backward(g)`` must return one gradient (or None) per parent.
    """
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by op '{op}'")
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), backward, op)
    return Tensor(data, op=op)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shape mismatch between left operand {a.shape} and right operand {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return make_node(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return make_node(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return make_node(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul",
    )


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    # split by sign so exp never overflows
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)
    return make_node(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return make_node(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def exp(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return make_node(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise FloatingPointError("log of a non-positive value")
    return make_node(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def absolute(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return make_node(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return make_node(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clip")


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ValueError(f"matmul: scalar operand (left {a.shape}, right {b.shape})")
    if a.ndim > 2 and b.ndim == 2:
        return _matmul_weight(a, b)
    a2 = a.data[None, :] if a.ndim == 1 else a.data
    b2 = b.data[:, None] if b.ndim == 1 else b.data
    if a2.shape[-1] != b2.shape[-2]:
        raise ValueError(f"matmul: shape mismatch between left operand {a.shape} and right operand {b.shape}")
    try:
        out2 = np.matmul(a2, b2)
    except ValueError:
        raise ValueError(f"matmul: shape mismatch between left operand {a.shape} and right operand {b.shape}") from None
    out = out2
    if a.ndim == 1:
        out = out.squeeze(-2)
    if b.ndim == 1:
        out = out.squeeze(-1)

    def backward(g):
        g2 = g.reshape(out2.shape)
        ga = _unbroadcast(np.matmul(g2, np.swapaxes(b2, -1, -2)), a2.shape).reshape(a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a2, -1, -2), g2), b2.shape).reshape(b.shape)
        return ga, gb

    return make_node(out, (a, b), backward, "matmul")


def _matmul_weight(a: Tensor, w: Tensor) -> Tensor:
    # (..., n) @ (n, m): flatten the leading axes so the weight gradient is one GEMM
    if a.shape[-1] != w.shape[0]:
        raise ValueError(f"matmul: shape mismatch between left operand {a.shape} and right operand {w.shape}")
    flat = a.data.reshape(-1, a.shape[-1])
    out = (flat @ w.data).reshape(a.shape[:-1] + (w.shape[1],))

    def backward(g):
        g2 = g.reshape(-1, w.shape[1])
        return (g2 @ w.data.T).reshape(a.shape), flat.T @ g2

    return make_node(out, (a, w), backward, "matmul")


# ---------------------------------------------------------------- reductions


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_node(out, (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(count))


def max_pool1d(x: Tensor, kernel: int, stride: int | None = None) -> Tensor:
    """Max over windows of the last axis; a trailing partial window is kept.

    The gradient goes to the window's argmax, ties resolved to the lowest index.
    """
    x = as_tensor(x)
    stride = kernel if stride is None else stride
    if kernel < 1 or stride < 1:
        raise ValueError("max_pool1d: kernel and stride must be positive")
    n = x.shape[-1]
    starts = list(range(0, max(n - kernel, 0) + 1, stride))
    if starts[-1] + kernel < n:
        starts.append(starts[-1] + stride)
    idx = []
    for s in starts:
        window = x.data[..., s:s + kernel]
        idx.append(s + np.argmax(window, axis=-1))
    idx = np.stack(idx, axis=-1)
    out = np.take_along_axis(x.data, idx, axis=-1)

    def backward(g):
        gx = np.zeros_like(x.data)
        flat_g = gx.reshape(-1, n)
        flat_idx = idx.reshape(-1, idx.shape[-1])
        rows = np.repeat(np.arange(flat_g.shape[0]), flat_idx.shape[1])
        np.add.at(flat_g, (rows, flat_idx.ravel()), g.reshape(-1))
        return (gx,)

    return make_node(out, (x,), backward, "max_pool1d")


# ---------------------------------------------------------------- normalisers


def softmax(x: Tensor, mask: np.ndarray | None = None, weights: Tensor | None = None) -> Tensor:
    """Row softmax over the last axis.

    ``mask`` is additive and constant (0 or -inf).  ``weights`` multiplies the
    exponentials before renormalising, i.e. the result is
    ``normalise(softmax(x + mask) * weights)``.
    """
    x = as_tensor(x)
    z = x.data if mask is None else x.data + mask
    zmax = np.max(z, axis=-1, keepdims=True)
    if not np.all(np.isfinite(zmax)):
        raise FloatingPointError("softmax: a row is fully masked")
    e = np.exp(z - zmax)
    if weights is None:
        u = e
        parents = (x,)
    else:
        weights = as_tensor(weights)
        u = e * weights.data
        parents = (x, weights)
    s = u.sum(axis=-1, keepdims=True)
    if np.any(s <= 0):
        raise FloatingPointError("softmax: a row has zero total weight")
    y = u / s

    def backward(g):
        centred = g - (g * y).sum(axis=-1, keepdims=True)
        gx = y * centred
        if weights is None:
            return (gx,)
        gw = _unbroadcast(e * centred / s, weights.shape)
        return gx, gw

    return make_node(y, parents, backward, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        gxhat = g * gain.data
        d = x.shape[-1]
        gx = inv / d * (d * gxhat - gxhat.sum(-1, keepdims=True) - xhat * (gxhat * xhat).sum(-1, keepdims=True))
        return gx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape)

    return make_node(out, (x, gain, bias), backward, "layer_norm")


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity along the last axis, broadcasting the leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "cosine_similarity")
    na = np.sqrt((a.data * a.data).sum(-1, keepdims=True))
    nb = np.sqrt((b.data * b.data).sum(-1, keepdims=True))
    if np.any(na == 0) or np.any(nb == 0):
        raise ValueError("cosine_similarity: zero-norm input vector")
    dot = (a.data * b.data).sum(-1, keepdims=True)
    c = dot / (na * nb)

    def backward(g):
        g = g[..., None]
        ga = g * (b.data / (na * nb) - c * a.data / (na * na))
        gb = g * (a.data / (na * nb) - c * b.data / (nb * nb))
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return make_node(c[..., 0], (a, b), backward, "cosine_similarity")


def cross_entropy(logits: Tensor, targets: np.ndarray, weights: np.ndarray | None = None) -> Tensor:
    """Weighted mean token cross-entropy; ``weights`` (0/1 padding mask) defaults to all ones."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise ValueError(f"cross_entropy: logits {logits.shape} do not match targets {targets.shape}")
    w = np.ones(targets.shape) if weights is None else np.asarray(weights, dtype=np.float64)
    total = w.sum()
    if total <= 0:
        raise ValueError("cross_entropy: no target carries weight")
    z = logits.data - logits.data.max(-1, keepdims=True)
    lse = np.log(np.exp(z).sum(-1, keepdims=True))
    logp = z - lse
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = -(picked * w).sum() / total

    def backward(g):
        probs = np.exp(logp)
        onehot = np.zeros_like(probs)
        np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
        return (g * (probs - onehot) * (w / total)[..., None],)

    return make_node(np.asarray(loss), (logits,), backward, "cross_entropy")


# ---------------------------------------------------------------- indexing / shape


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.ravel(), g.reshape(-1, table.shape[-1]))
        return (gt,)

    return make_node(table.data[ids], (table,), backward, "embedding")


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    return make_node(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    x = as_tensor(x)
    inverse = np.argsort(axes)
    return make_node(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),), "transpose")


def getitem(x: Tensor, index) -> Tensor:
    x = as_tensor(x)

    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (int, np.integer, slice)) or i is Ellipsis or i is None for i in parts)

    def backward(g):
        gx = np.zeros_like(x.data)
        if basic:
            gx[index] += g
        else:
            np.add.at(gx, index, g)
        return (gx,)

    return make_node(x.data[index], (x,), backward, "getitem")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return make_node(
        np.concatenate([x.data for x in xs], axis=axis), tuple(xs),
        lambda g: tuple(np.split(g, sizes, axis=axis)), "concat",
    )


def cumsum(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return make_node(np.cumsum(x.data, axis=axis), (x,), backward, "cumsum")


# ---------------------------------------------------------------- parameters


class ParameterSet(dict):
    """Ordered ``name -> ndarray`` map; iteration follows insertion order."""

    def __setitem__(self, name, value):
        super().__setitem__(name, np.asarray(value, dtype=np.float64))

    def copy(self) -> "ParameterSet":
        return ParameterSet((k, v.copy()) for k, v in self.items())

    def leaves(self) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=True) for k, v in self.items()}

    def constants(self) -> dict[str, Tensor]:
        return {k: Tensor(v) for k, v in self.items()}

    def size(self) -> int:
        return int(np.sum([v.size for v in self.values()]))

    def to_json_dict(self) -> dict:
        doc: dict = {"format_version": FORMAT_VERSION}
        for name, value in self.items():
            doc[name] = {"shape": list(value.shape), "data": value.ravel().tolist()}
        return doc

    @classmethod
    def from_json_dict(cls, doc: dict) -> "ParameterSet":
        version = doc.get("format_version")
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported parameter format version: {version!r}")
        params = cls()
        for name, entry in doc.items():
            if isinstance(entry, dict) and set(entry) == {"shape", "data"}:
                params[name] = np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
        return params

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict()))

    @classmethod
    def load(cls, path: str | Path) -> "ParameterSet":
        return cls.from_json_dict(json.loads(Path(path).read_text()))


def evaluate_with_gradients(fn: Callable, params: ParameterSet, *inputs):
    """Run ``fn(param_tensors, *inputs)`` and differentiate its scalar loss.

    ``fn`` returns either the loss tensor or a tuple whose first item is the
    loss.  Returns ``(outputs, grads)``; parameters the loss does not reach get
    zero gradients.
    """
    leaves = params.leaves()
    outputs = fn(leaves, *inputs)
    loss = outputs[0] if isinstance(outputs, tuple) else outputs
    if loss.data.size != 1:
        raise ValueError(f"gradient requested for non-scalar loss of shape {loss.shape}")
    if loss.requires_grad:
        loss.backward()
    grads = ParameterSet()
    for name, leaf in leaves.items():
        grads[name] = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
    return outputs, grads


@dataclass
class FDReport:
    max_rel_err: dict[str, float] = field(default_factory=dict)
    tol: float = 1e-6
    checked_entries: int = 0

    @property
    def passed(self) -> bool:
        return all(err <= self.tol for err in self.max_rel_err.values())

    @property
    def worst(self) -> float:
        return max(self.max_rel_err.values(), default=0.0)


def finite_difference_check(
    loss_fn: Callable[[dict[str, Tensor]], Tensor],
    params: ParameterSet,
    eps: float = 1e-5,
    tol: float = 1e-6,
    max_entries: int | None = None,
    seed: int = 0,
    perturb_analytic: float = 0.0,
) -> FDReport:
    """Compare analytic gradients with central differences, entry by entry.

    The relative error is ``|a - n| / max(1, |a|, |n|)``.  ``max_entries``
    caps the number of randomly chosen entries probed per parameter.
    ``perturb_analytic`` is a test hook that adds a constant to the analytic
    gradient so the check can be seen to fail.
    """
    _, grads = evaluate_with_gradients(loss_fn, params)
    rng = np.random.default_rng(seed)
    report = FDReport(tol=tol)
    for name, value in params.items():
        flat_count = value.size
        entries = np.arange(flat_count)
        if max_entries is not None and flat_count > max_entries:
            entries = np.sort(rng.choice(flat_count, size=max_entries, replace=False))
        analytic = grads[name].ravel() + perturb_analytic
        worst = 0.0
        for j in entries:
            numeric = _central_difference(loss_fn, params, name, int(j), eps)
            a = analytic[j]
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
        report.max_rel_err[name] = worst
        report.checked_entries += len(entries)
    return report


def _central_difference(loss_fn, params: ParameterSet, name: str, j: int, eps: float) -> float:
    values = []
    for offset in (eps, -eps):
        shifted = params.copy()
        shifted[name].reshape(-1)[j] += offset
        with no_grad():
            try:
                loss = loss_fn(shifted.constants())
            except FloatingPointError as exc:
                raise FloatingPointError(f"non-finite loss perturbing {name}[{j}] by {offset:+g}") from exc
        val = float(loss.data)
        if not np.isfinite(val):
            raise FloatingPointError(f"non-finite loss perturbing {name}[{j}] by {offset:+g}")
        values.append(val)
    return (values[0] - values[1]) / (2.0 * eps)
