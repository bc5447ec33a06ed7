"""Small reverse-mode autodiff engine over float64 numpy arrays.

Only the operations the sequence model needs are provided. Each op builds a
new :class:`Tensor` whose ``_backward`` closure accumulates gradients into
its parents; :meth:`Tensor.backward` walks the graph once in reverse
topological order.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

LN_EPS = 1e-5
_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ChecksumError(ValueError):
    """Checkpoint payload does not match its stored checksum."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        if self.data.size != 1:
            _not_scalar(self)
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        """Populate ``grad`` on every tensor reachable from this scalar."""
        if self.data.size != 1:
            _not_scalar(self)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        # intermediate grads are rebuilt on every call
        for node in order:
            if node._backward is not None:
                node.grad = None
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)


def _not_scalar(t: Tensor):
    raise ValueError(f"expected a scalar tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    live = tuple(p for p in parents if p.requires_grad)
    out = Tensor(data, requires_grad=bool(live))
    if live:
        out._parents = live
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"{op}: cannot combine {a.shape} and {b.shape}") from exc


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(-_unbroadcast(g, b.shape))

    return _result(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), backward)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the erf form of the normal CDF."""
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        x._accumulate(g * (cdf + x.data * pdf))

    return _result(x.data * cdf, (x,), backward)


def abs_(x: Tensor) -> Tensor:
    def backward(g):
        x._accumulate(g * np.sign(x.data))

    return _result(np.abs(x.data), (x,), backward)


# ---------------------------------------------------------------- shape / reduce


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    def backward(g):
        x._accumulate(g.reshape(x.shape))

    try:
        data = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc
    return _result(data, (x,), backward)


def sum_(x: Tensor) -> Tensor:
    def backward(g):
        x._accumulate(np.broadcast_to(g, x.shape))

    return _result(np.asarray(x.data.sum()), (x,), backward)


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    if n == 0:
        return Tensor(0.0)

    def backward(g):
        x._accumulate(np.broadcast_to(g / n, x.shape))

    return _result(np.asarray(x.data.sum() / n), (x,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., m, k] @ b[k, n]``; leading dims of ``a`` are batch dims."""
    if b.data.ndim != 2 or a.data.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            k, n = b.shape
            b._accumulate(a.data.reshape(-1, k).T @ g.reshape(-1, n))

    return _result(out, (a, b), backward)


# ---------------------------------------------------------------- indexing


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``; ids must be valid non-negative rows."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DimensionError("embedding: id outside table")

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        table._accumulate(full)

    return _result(table.data[ids], (table,), backward)


def gather_rows(x: Tensor, index: tuple[np.ndarray, ...]) -> Tensor:
    """``x[index]`` for an advanced index selecting whole trailing rows."""

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        x._accumulate(full)

    return _result(x.data[index], (x,), backward)


def scatter_rows(base: Tensor, index: tuple[np.ndarray, ...], rows: Tensor) -> Tensor:
    """Copy of ``base`` with ``base[index]`` replaced by ``rows``.

    Replaced positions receive no gradient on ``base``; ``index`` must not
    repeat a position.
    """
    out = base.data.copy()
    try:
        out[index] = rows.data
    except ValueError as exc:
        raise DimensionError(f"scatter_rows: {exc}") from exc

    def backward(g):
        if base.requires_grad:
            gb = g.copy()
            gb[index] = 0.0
            base._accumulate(gb)
        if rows.requires_grad:
            rows._accumulate(g[index])

    return _result(out, (base, rows), backward)


# ---------------------------------------------------------------- layers


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS) -> Tensor:
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm: gamma/beta {gamma.shape}/{beta.shape} vs {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def backward(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).reshape(-1, d).sum(axis=0))
        if beta.requires_grad:
            beta._accumulate(g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            dxhat = g * gamma.data
            x._accumulate(
                inv
                * (
                    dxhat
                    - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
                )
            )

    return _result(xhat * gamma.data + beta.data, (x, gamma, beta), backward)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def softmax_cross_entropy(
    logits: Tensor, targets: np.ndarray, ignore_index: int, reduction: str = "mean"
) -> tuple[Tensor, int]:
    """Cross-entropy over the last axis, skipping ``ignore_index`` targets.

    Returns ``(loss, n_supervised)``. With ``reduction="mean"`` the sum is
    divided by ``n_supervised``. When every target is ignored the loss is a
    constant zero and ``n_supervised == 0``.
    """
    targets = np.asarray(targets, dtype=np.int64)
    V = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise DimensionError(f"cross-entropy: targets {targets.shape} vs logits {logits.shape}")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    flat = logits.data.reshape(-1, V)
    tflat = targets.reshape(-1)
    keep = np.flatnonzero(tflat != ignore_index)
    n = int(keep.size)
    if n == 0:
        return Tensor(0.0), 0
    if tflat[keep].min() < 0 or tflat[keep].max() >= V:
        raise DimensionError("cross-entropy: target outside [0, V)")
    logp = log_softmax(flat[keep])
    picked = logp[np.arange(n), tflat[keep]]
    scale = 1.0 / n if reduction == "mean" else 1.0
    value = -picked.sum() * scale

    def backward(g):
        d = np.exp(logp)
        d[np.arange(n), tflat[keep]] -= 1.0
        full = np.zeros_like(flat)
        full[keep] = d * (scale * float(g))
        logits._accumulate(full.reshape(logits.shape))

    return _result(np.asarray(value), (logits,), backward), n


def l1_loss(pred: Tensor, target: np.ndarray) -> tuple[Tensor, int]:
    """Mean absolute error; ``(0, 0)`` when empty."""
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DimensionError(f"l1_loss: {pred.shape} vs {target.shape}")
    if target.size == 0:
        return Tensor(0.0), 0
    return mean(abs_(sub(pred, Tensor(target)))), int(target.size)


def l2_norm_rows(x: Tensor) -> Tensor:
    """Euclidean norm of each row of a 2-D tensor (zero-norm rows get zero grad)."""
    if x.data.ndim != 2:
        raise DimensionError(f"l2_norm_rows expects 2-D input, got {x.shape}")
    norms = np.sqrt((x.data * x.data).sum(axis=1))

    def backward(g):
        safe = np.where(norms > 0, norms, 1.0)
        x._accumulate(np.where(norms[:, None] > 0, x.data / safe[:, None], 0.0) * g[:, None])

    return _result(norms, (x,), backward)


def causal_attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int) -> Tensor:
    """Multi-head scaled dot-product attention with a causal mask.

    ``q``, ``k``, ``v`` are ``[B, L, d]``; heads split the last axis.
    """
    if not (q.shape == k.shape == v.shape) or q.data.ndim != 3:
        raise DimensionError(f"attention: q{q.shape} k{k.shape} v{v.shape}")
    B, L, d = q.shape
    if d % n_heads:
        raise DimensionError(f"attention: d={d} not divisible by {n_heads} heads")
    dh = d // n_heads
    scale = 1.0 / math.sqrt(dh)

    def split(a):
        return a.reshape(B, L, n_heads, dh).transpose(0, 2, 1, 3)

    qh, kh, vh = split(q.data), split(k.data), split(v.data)
    scores = (qh @ kh.transpose(0, 1, 3, 2)) * scale
    future = np.triu(np.ones((L, L), dtype=bool), k=1)
    scores = np.where(future, -np.inf, scores)
    p = softmax(scores)
    out = (p @ vh).transpose(0, 2, 1, 3).reshape(B, L, d)

    def backward(g):
        go = split(g)
        dp = go @ vh.transpose(0, 1, 3, 2)
        ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True)) * scale

        def merge(a):
            return a.transpose(0, 2, 1, 3).reshape(B, L, d)

        if q.requires_grad:
            q._accumulate(merge(ds @ kh))
        if k.requires_grad:
            k._accumulate(merge(ds.transpose(0, 1, 3, 2) @ qh))
        if v.requires_grad:
            v._accumulate(merge(p.transpose(0, 1, 3, 2) @ go))

    return _result(out, (q, k, v), backward)


# ---------------------------------------------------------------- parameter store


class ParamStore(OrderedDict):
    """Named parameters in declaration order."""

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)
        self[name] = t
        return t

    def zero_grad(self) -> None:
        for t in self.values():
            t.zero_grad()

    def n_params(self) -> int:
        return sum(t.data.size for t in self.values())

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for name, t in self.items():
            out.add(name, t.data.copy())
        return out


_MAGIC = b"NUMCKPT1"


def payload_checksum(payload: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


def save_checkpoint(path: str | Path, params: ParamStore, meta: dict | None = None) -> int:
    """Write ``params`` to ``path``; returns the payload checksum.

    Layout: magic, u64 header length, JSON header (meta and ``[name, shape]``
    entries in declaration order), little-endian f64 payloads, u64 checksum.
    """
    header = {
        "meta": meta or {},
        "tensors": [[name, list(t.shape)] for name, t in params.items()],
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(
        np.ascontiguousarray(t.data, dtype="<f8").tobytes() for t in params.values()
    )
    checksum = payload_checksum(payload)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        fh.write(payload)
        fh.write(struct.pack("<Q", checksum))
    return checksum


def load_checkpoint(path: str | Path) -> tuple[ParamStore, dict]:
    raw = Path(path).read_bytes()
    if raw[: len(_MAGIC)] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    pos = len(_MAGIC)
    (hlen,) = struct.unpack_from("<Q", raw, pos)
    pos += 8
    header = json.loads(raw[pos : pos + hlen].decode("utf-8"))
    pos += hlen
    payload = raw[pos:-8]
    (stored,) = struct.unpack_from("<Q", raw, len(raw) - 8)
    if payload_checksum(payload) != stored:
        raise ChecksumError(f"{path}: checksum mismatch")
    params = ParamStore()
    offset = 0
    for name, shape in header["tensors"]:
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(payload, dtype="<f8", count=n, offset=offset).reshape(shape)
        params.add(name, arr.astype(np.float64))
        offset += 8 * n
    if offset != len(payload):
        raise ValueError(f"{path}: payload size does not match header")
    meta = header["meta"]
    meta["checksum"] = stored
    return params, meta
