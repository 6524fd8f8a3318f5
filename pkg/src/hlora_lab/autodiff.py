"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to parent gradients.  Calling
:meth:`Tensor.backward` on a scalar walks the recorded graph once in reverse
topological order, accumulates ``grad`` on every leaf that requires it, and
then releases the graph.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np

_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Run ops without recording a graph (inference, frozen feature extraction)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class GraphError(RuntimeError):
    """Misuse of the computation graph (non-scalar loss, double backward)."""


def _as_array(data) -> np.ndarray:
    arr = np.array(data, dtype=np.float64)
    return arr


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        self.data = data if isinstance(data, np.ndarray) and data.dtype == np.float64 else _as_array(data)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _lift(other))

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, neg(_lift(other)))

    def __neg__(self):
        return neg(self)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def backward(self) -> None:
        """Backpropagate from this scalar; the graph is released afterwards."""
        if self.data.size != 1:
            raise GraphError(f"backward() needs a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise GraphError("backward() already ran on this graph; rebuild it with a new forward pass")
        if not self.requires_grad:
            raise GraphError("loss does not depend on any tensor that requires grad")

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
            if node._consumed:
                raise GraphError("graph segment already consumed by an earlier backward()")
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if node.is_leaf:
                if g is not None:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            if g is not None:
                parent_grads = node._backward(g)
                for p, pg in zip(node._parents, parent_grads):
                    if pg is None or not p.requires_grad:
                        continue
                    key = id(p)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
            node._parents = ()
            node._backward = None
            node._consumed = True
        self._consumed = True


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _is_scalar(t: Tensor) -> bool:
    return t.data.ndim == 0 or t.data.size == 1 and t.data.ndim <= 1


def _reduce_to(g: np.ndarray, t: Tensor) -> np.ndarray:
    if g.shape == t.shape:
        return g
    return np.asarray(g.sum()).reshape(t.shape)


# ---------------------------------------------------------------------------
# arithmetic


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return (g @ bd.T if a.requires_grad else None, ad.T @ g if b.requires_grad else None)

    return _make(ad @ bd, (a, b), backward)


def elementwise(a: Tensor, b: Tensor, kind: str) -> Tensor:
    """Pointwise add or mul; a one-element operand broadcasts over the other."""
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise DimensionError(f"elementwise {kind} shape mismatch: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    if kind == "add":
        out = ad + bd

        def backward(g):
            return _reduce_to(g, a), _reduce_to(g, b)

    elif kind == "mul":
        out = ad * bd

        def backward(g):
            return (
                _reduce_to(g * bd, a) if a.requires_grad else None,
                _reduce_to(g * ad, b) if b.requires_grad else None,
            )

    else:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    return _make(out, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    return elementwise(a, b, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    return elementwise(a, b, "mul")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a constant (no graph node for ``c``)."""
    return _make(a.data * c, (a,), lambda g: (g * c,))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a length-d vector to every row of an n x d matrix."""
    if x.data.ndim != 2 or b.data.ndim != 1 or b.shape[0] != x.shape[1]:
        raise DimensionError(f"add_bias shape mismatch: {x.shape} + {b.shape}")
    return _make(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=0) if b.requires_grad else None))


def add_const(x: Tensor, c: np.ndarray) -> Tensor:
    """Add a constant array (e.g. an attention mask); gradient passes through."""
    return _make(x.data + c, (x,), lambda g: (g,))


def transpose(a: Tensor) -> Tensor:
    return _make(a.data.T.copy(), (a,), lambda g: (g.T,))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _make(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.size)


# ---------------------------------------------------------------------------
# nonlinearities and normalisation

_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    x = a.data
    x2 = x * x
    inner = _GELU_C * x * (1.0 + 0.044715 * x2)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(out, (a,), backward)


def softmax_rows(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError(f"softmax_rows needs a matrix, got {a.shape}")
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _make(s, (a,), backward)


def layer_norm_rows(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row standardisation without affine parameters."""
    x = a.data
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
    y = xc * inv
    n = x.shape[1]

    def backward(g):
        gy = g * inv
        return (gy - gy.mean(axis=1, keepdims=True) - y * (g * y).sum(axis=1, keepdims=True) * inv / n,)

    return _make(y, (a,), backward)


def cross_entropy(logits: Tensor, targets: Sequence[int], mask: Sequence[bool]) -> Tensor:
    """Mean negative log-likelihood of ``targets`` over the unmasked rows."""
    if logits.data.ndim != 2:
        raise DimensionError(f"cross_entropy needs m x V logits, got {logits.shape}")
    m, vocab = logits.shape
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    if targets.shape != (m,) or mask.shape != (m,):
        raise DimensionError(f"targets/mask must have length {m}")
    rows = np.flatnonzero(mask)
    if rows.size == 0:
        raise ValueError("cross_entropy over an empty mask")
    tgt = targets[rows]
    if np.any(tgt < 0) or np.any(tgt >= vocab):
        raise IndexError(f"target id out of vocabulary range [0, {vocab})")
    z = logits.data[rows]
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    sums = e.sum(axis=1)
    logp = z[np.arange(rows.size), tgt] - np.log(sums)
    loss = -logp.mean()

    def backward(g):
        p = e / sums[:, None]
        p[np.arange(rows.size), tgt] -= 1.0
        full = np.zeros((m, vocab))
        full[rows] = p * (float(g) / rows.size)
        return (full,)

    return _make(np.asarray(loss), (logits,), backward)


def causal_attention(q: Tensor, k: Tensor, v: Tensor, lengths: Sequence[int], heads: int) -> Tensor:
    """Multi-head causal self-attention over packed sequences.

    Rows of ``q``/``k``/``v`` hold the sequences back to back with the given
    ``lengths``; a position attends only to itself and earlier positions of
    its own sequence.  Masked weights are exactly zero.
    """
    n, d = q.shape
    if k.shape != (n, d) or v.shape != (n, d):
        raise DimensionError(f"attention operand mismatch: {q.shape}, {k.shape}, {v.shape}")
    if d % heads or sum(lengths) != n:
        raise DimensionError(f"cannot split {q.shape} into {heads} heads over lengths summing to {sum(lengths)}")
    dh = d // heads
    inv = 1.0 / np.sqrt(dh)
    starts = np.concatenate([[0], np.cumsum(lengths)[:-1]]).astype(np.int64)
    groups: dict[int, np.ndarray] = {}
    for st, ln in zip(starts, lengths):
        groups.setdefault(int(ln), []).append(st)

    qd, kd, vd = q.data, k.data, v.data
    out = np.empty((n, d))
    saved = []
    for T, sts in groups.items():
        rows = (np.asarray(sts)[:, None] + np.arange(T)[None, :]).reshape(-1)
        B = len(sts)

        def split(a):
            return a[rows].reshape(B, T, heads, dh).transpose(0, 2, 1, 3)

        Q, K, Vv = split(qd), split(kd), split(vd)
        S = Q @ K.transpose(0, 1, 3, 2) * inv
        S = np.where(np.tri(T, dtype=bool), S, -np.inf)
        S = S - S.max(axis=-1, keepdims=True)
        P = np.exp(S)
        P /= P.sum(axis=-1, keepdims=True)
        out[rows] = (P @ Vv).transpose(0, 2, 1, 3).reshape(B * T, d)
        saved.append((rows, B, T, Q, K, Vv, P))

    def backward(g):
        gq, gk, gv = np.empty((n, d)), np.empty((n, d)), np.empty((n, d))
        for rows, B, T, Q, K, Vv, P in saved:
            G = g[rows].reshape(B, T, heads, dh).transpose(0, 2, 1, 3)
            dP = G @ Vv.transpose(0, 1, 3, 2)
            dV = P.transpose(0, 1, 3, 2) @ G
            dS = P * (dP - (dP * P).sum(axis=-1, keepdims=True)) * inv
            dQ = dS @ K
            dK = dS.transpose(0, 1, 3, 2) @ Q

            def merge(a):
                return a.transpose(0, 2, 1, 3).reshape(B * T, d)

            gq[rows], gk[rows], gv[rows] = merge(dQ), merge(dK), merge(dV)
        return gq, gk, gv

    return _make(out, (q, k, v), backward)


# ---------------------------------------------------------------------------
# indexing and layout


def take_cols(a: Tensor, start: int, stop: int) -> Tensor:
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return _make(a.data[:, start:stop].copy(), (a,), backward)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    widths = np.cumsum([0] + [p.shape[1] for p in parts])

    def backward(g):
        return tuple(g[:, widths[i] : widths[i + 1]] for i in range(len(parts)))

    return _make(np.concatenate([p.data for p in parts], axis=1), tuple(parts), backward)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    if len({p.shape[1] for p in parts}) != 1:
        raise DimensionError(f"concat_rows width mismatch: {[p.shape for p in parts]}")
    heights = np.cumsum([0] + [p.shape[0] for p in parts])

    def backward(g):
        return tuple(g[heights[i] : heights[i + 1]] for i in range(len(parts)))

    return _make(np.concatenate([p.data for p in parts], axis=0), tuple(parts), backward)


def take_rows(a: Tensor, index: Sequence[int]) -> Tensor:
    """Gather rows (embedding lookup); the backward pass scatter-adds."""
    idx = np.asarray(index, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise IndexError(f"row index out of range for {a.shape[0]} rows")
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _make(a.data[idx], (a,), backward)


def expand_cols(w: Tensor, r: int, factor: float = 1.0) -> Tensor:
    """Replicate each column ``r`` times (``w`` kron ones(1, r)) times ``factor``."""
    n, k = w.shape

    def backward(g):
        return (g.reshape(n, k, r).sum(axis=2) * factor,)

    return _make(np.repeat(w.data, r, axis=1) * factor, (w,), backward)


# ---------------------------------------------------------------------------
# gradient checking


def numeric_grad(fn: Callable[[], Tensor], t: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central differences of the scalar ``fn()`` with respect to ``t.data``."""
    out = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    g = out.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        hi = fn().item()
        flat[i] = old - eps
        lo = fn().item()
        flat[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return out


def gradcheck(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-5,
    rtol: float = 1e-4,
    atol: float = 1e-7,
) -> float:
    """Compare analytic and numeric gradients; returns the worst excess.

    An entry passes when ``|a - n| <= max(atol, rtol * max(|a|, |n|))``.
    Raises AssertionError on failure.
    """
    for t in inputs:
        t.grad = None
    fn().backward()
    worst = 0.0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = numeric_grad(fn, t, eps)
        err = np.abs(analytic - numeric)
        bound = np.maximum(atol, rtol * np.maximum(np.abs(analytic), np.abs(numeric)))
        if np.any(err > bound):
            i = int(np.argmax(err - bound))
            raise AssertionError(
                f"gradient mismatch for {t!r}: analytic={analytic.reshape(-1)[i]!r} "
                f"numeric={numeric.reshape(-1)[i]!r}"
            )
        worst = max(worst, float((err / bound).max(initial=0.0)))
    return worst
