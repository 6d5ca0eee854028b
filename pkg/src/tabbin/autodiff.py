"""Reverse-mode automatic differentiation over numpy arrays.

Just enough operator coverage for an embedding layer plus a masked-attention
transformer encoder: lookups, batched matmul, layer norm, GELU, masked
softmax, pooling, cross-entropy, and cosine similarity.  Training runs in
float32; gradient checks run the same graphs in float64.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph construction inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Array node in the computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents", "name", "_grad_owned")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad and _grad_enabled
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self._parents: tuple = ()
        self.name = name
        self._grad_owned = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self) -> None:
        self.grad = None
        self._grad_owned = False

    def _accumulate(self, g: np.ndarray) -> None:
        # First contribution keeps a reference (copy-on-write on the next
        # one): most nodes have a single consumer, so this avoids a zero
        # fill plus add per tensor.
        if self.grad is None:
            self.grad = g
            self._grad_owned = False
        elif self._grad_owned:
            self.grad += g
        else:
            self.grad = self.grad + g
            self._grad_owned = True

    def backward(self) -> None:
        """Backpropagate from this (scalar) tensor through the graph."""
        if self.data.size != 1:
            raise ValueError("backward() expects a scalar loss")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a gradient back to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _make(data, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    live = [p for p in parents if p.requires_grad]
    if _grad_enabled and live:
        out.requires_grad = True
        out._parents = tuple(live)
        out._backward = backward
    return out


def _as_scalar(x) -> Optional[float]:
    """Python float for 0-d non-Tensor operands, else None.

    Keeping scalars out of Tensor wrappers matters: a 0-d float64 array
    would silently promote float32 graphs to float64.
    """
    if isinstance(x, Tensor):
        return None
    if isinstance(x, (int, float, np.integer, np.floating)):
        return float(x)
    return None


def add(a, b) -> Tensor:
    if _as_scalar(a) is not None:
        a, b = b, a
    c = _as_scalar(b)
    if c is not None:
        a = as_tensor(a)

        def backward_scalar(g):
            a._accumulate(g)

        return _make(a.data + c, (a,), backward_scalar)
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    if _as_scalar(a) is not None:
        a, b = b, a
    c = _as_scalar(b)
    if c is not None:
        a = as_tensor(a)

        def backward_scalar(g):
            a._accumulate(g * c)

        return _make(a.data * c, (a,), backward_scalar)
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b._accumulate(_unbroadcast(gb, b.shape))

    return _make(data, (a, b), backward)


def transpose(a: Tensor, axes: tuple) -> Tensor:
    a = as_tensor(a)
    axes = tuple(ax % a.data.ndim for ax in axes)
    inverse = np.argsort(axes)

    def backward(g):
        a._accumulate(np.transpose(g, inverse))

    return _make(np.transpose(a.data, axes), (a,), backward)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        a._accumulate(g.reshape(a.shape))

    return _make(a.data.reshape(shape), (a,), backward)


def concat(parts: list[Tensor], axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.data.shape[axis] for p in parts]
    data = np.concatenate([p.data for p in parts], axis=axis)

    def backward(g):
        offsets = np.cumsum([0] + sizes)
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(lo, hi)
                p._accumulate(g[tuple(index)])

    return _make(data, parts, backward)


def embedding(weight: Tensor, indices: np.ndarray) -> Tensor:
    """Row lookup: out[..., :] = weight[indices[...], :]."""
    weight = as_tensor(weight)
    idx = np.asarray(indices)
    data = weight.data[idx]

    def backward(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, idx, g)
        weight._accumulate(gw)

    return _make(data, (weight,), backward)


def gather_positions(a: Tensor, batch_idx: np.ndarray, pos_idx: np.ndarray) -> Tensor:
    """Select rows (batch, position) from a (B, n, H) tensor -> (K, H)."""
    a = as_tensor(a)
    data = a.data[batch_idx, pos_idx]

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, (batch_idx, pos_idx), g)
        a._accumulate(ga)

    return _make(data, (a,), backward)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            ga = np.broadcast_to(g, a.shape)
        elif keepdims:
            ga = np.broadcast_to(g, a.shape)
        else:
            ga = np.broadcast_to(np.expand_dims(g, axis), a.shape)
        a._accumulate(np.ascontiguousarray(ga))

    return _make(data, (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else a.data.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def matmul_pool(weights: np.ndarray, a: Tensor) -> Tensor:
    """Fixed-weight pooling: (U, n) constant matrix times (n, H) rows."""
    return matmul(Tensor(weights), a)


def layer_norm(a: Tensor, scale: Tensor, shift: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalization over the last axis with learned scale and shift."""
    a, scale, shift = as_tensor(a), as_tensor(scale), as_tensor(shift)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = scale.data * xhat + shift.data

    def backward(g):
        if scale.requires_grad:
            axes = tuple(range(g.ndim - 1))
            scale._accumulate((g * xhat).sum(axis=axes))
        if shift.requires_grad:
            axes = tuple(range(g.ndim - 1))
            shift._accumulate(g.sum(axis=axes))
        if a.requires_grad:
            gx = g * scale.data
            m1 = gx.mean(axis=-1, keepdims=True)
            m2 = (gx * xhat).mean(axis=-1, keepdims=True)
            a._accumulate(inv * (gx - m1 - xhat * m2))

    return _make(data, (a, scale, shift), backward)


_GELU_C = float(np.sqrt(2.0 / np.pi))  # plain float so float32 survives


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximation GELU."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * (x * x * x))  # x**3 is slow for float arrays
    t = np.tanh(inner)
    data = 0.5 * x * (1.0 + t)

    def backward(g):
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        a._accumulate(g * (0.5 * (1.0 + t) + 0.5 * x * dt))

    return _make(data, (a,), backward)


def tanh(a: Tensor) -> Tensor:
    a = as_tensor(a)
    t = np.tanh(a.data)

    def backward(g):
        a._accumulate(g * (1.0 - t * t))

    return _make(t, (a,), backward)


NEG_INF = 1e9  # "large negative" magnitude for masked logits


def mask_bias(mask: np.ndarray, dtype=np.float32) -> np.ndarray:
    """Additive logit bias for a binary mask: 0 where visible, -1e9 where not."""
    return ((np.asarray(mask) != 0).astype(dtype) - 1.0) * NEG_INF


def masked_softmax(
    scores: Tensor,
    mask: np.ndarray,
    mode: str = "additive",
    bias: Optional[np.ndarray] = None,
) -> Tensor:
    """Softmax over the last axis restricted to ``mask == 1`` positions.

    ``additive`` pushes masked logits to -1e9 before the softmax, so masked
    probabilities underflow to exactly zero and receive exactly zero
    gradient.  ``multiplicative_renorm`` instead multiplies the dense
    softmax by the mask and renormalizes each row.  A precomputed ``bias``
    (from :func:`mask_bias`) avoids rebuilding the additive term per layer.
    """
    scores = as_tensor(scores)
    if mode == "additive":
        if bias is None:
            bias = mask_bias(mask, scores.dtype)
        shifted = scores.data + bias
        shifted -= shifted.max(axis=-1, keepdims=True)
        p = np.exp(shifted)
        p /= p.sum(axis=-1, keepdims=True)

        def backward(g):
            inner = (g * p).sum(axis=-1, keepdims=True)
            scores._accumulate(p * (g - inner))

        return _make(p, (scores,), backward)
    m = np.asarray(mask).astype(scores.dtype)

    if mode == "multiplicative_renorm":
        m = np.broadcast_to(m, scores.shape)
        shifted = scores.data - scores.data.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        p0 = e / e.sum(axis=-1, keepdims=True)
        s = (p0 * m).sum(axis=-1, keepdims=True)
        q = p0 * m / s

        def backward(g):
            gq_p0 = m / s * (g - (g * q).sum(axis=-1, keepdims=True))
            inner = (gq_p0 * p0).sum(axis=-1, keepdims=True)
            scores._accumulate(p0 * (gq_p0 - inner))

        return _make(q, (scores,), backward)

    raise ValueError(f"unknown mask mode {mode!r}")


def softmax_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean cross-entropy of integer targets over the last axis."""
    logits = as_tensor(logits)
    t = np.asarray(targets)
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logsumexp
    rows = np.arange(t.shape[0])
    data = -logp[rows, t].mean()

    def backward(g):
        p = np.exp(logp)
        p[rows, t] -= 1.0
        logits._accumulate(g * p / t.shape[0])

    return _make(np.asarray(data), (logits,), backward)


def cosine_rows(a: Tensor, b: Tensor, eps: float = 1e-12) -> Tensor:
    """Cosine similarity along the last axis; broadcasting allowed."""
    a, b = as_tensor(a), as_tensor(b)
    dot = (a.data * b.data).sum(axis=-1, keepdims=True)
    na = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True)) + eps
    nb = np.sqrt((b.data * b.data).sum(axis=-1, keepdims=True)) + eps
    c = dot / (na * nb)

    def backward(g):
        g = np.expand_dims(g, -1)
        if a.requires_grad:
            ga = g * (b.data / (na * nb) - c * a.data / (na * na))
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = g * (a.data / (na * nb) - c * b.data / (nb * nb))
            b._accumulate(_unbroadcast(gb, b.shape))

    return _make(c[..., 0], (a, b), backward)


def dropout(a: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when p == 0."""
    if p <= 0.0:
        return a
    a = as_tensor(a)
    keep = (rng.random(a.shape) >= p).astype(a.dtype) / (1.0 - p)

    def backward(g):
        a._accumulate(g * keep)

    return _make(a.data * keep, (a,), backward)


def grad_check(
    loss_fn: Callable[[], Tensor],
    weights: dict[str, Tensor],
    eps: float = 1e-5,
    samples: int = 200,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Samples up to ``samples`` coordinates per tensor.  The relative error
    denominator is floored at 1e-4 so finite-difference noise on near-zero
    gradients does not dominate.
    """
    for t in weights.values():
        t.zero_grad()
    loss = loss_fn()
    loss.backward()
    analytic = {k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for k, t in weights.items()}

    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, t in weights.items():
        flat = t.data.reshape(-1)
        k = min(samples, flat.size)
        coords = rng.choice(flat.size, size=k, replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            with no_grad():
                up = float(loss_fn().data)
            flat[c] = orig - eps
            with no_grad():
                down = float(loss_fn().data)
            flat[c] = orig
            numeric = (up - down) / (2 * eps)
            a = float(analytic[name].reshape(-1)[c])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-4)
            worst = max(worst, err)
    return worst
