"""Transformer encoder with visibility-masked multi-head attention.

Post-layer-norm blocks in the BERT style: one layer norm on the embedded
input, then per block masked self-attention and a GELU feed-forward path,
each followed by residual + layer norm.  Attention masking replaces hidden
scores with a large negative constant before the softmax; a multiplicative
renormalizing variant is available behind ``mask_mode``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, grad_check  # noqa: F401  (re-exported kernel entry point)
from .errors import NonFiniteError, ShapeError

INIT_STD = 0.02


@dataclass
class EncoderConfig:
    hidden: int = 48
    layers: int = 2
    heads: int = 4
    ffn_mult: int = 4
    dropout: float = 0.0
    max_seq: int = 256
    mask_mode: str = "additive"  # or "multiplicative_renorm"
    ln_eps: float = 1e-12

    def __post_init__(self) -> None:
        if self.hidden % 12 != 0:
            raise ValueError(f"hidden size {self.hidden} must be divisible by 12")
        if self.hidden % self.heads != 0:
            raise ValueError("hidden size must be divisible by the head count")
        if self.layers < 1:
            raise ValueError("need at least one encoder layer")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.mask_mode not in ("additive", "multiplicative_renorm"):
            raise ValueError(f"unknown mask_mode {self.mask_mode!r}")

    def to_dict(self) -> dict:
        return {
            "hidden": self.hidden,
            "layers": self.layers,
            "heads": self.heads,
            "ffn_mult": self.ffn_mult,
            "dropout": self.dropout,
            "max_seq": self.max_seq,
            "mask_mode": self.mask_mode,
            "ln_eps": self.ln_eps,
        }


class EncoderWeights:
    """Per-layer projection, feed-forward, and layer-norm tensors."""

    def __init__(
        self,
        cfg: EncoderConfig,
        rng: Optional[np.random.Generator] = None,
        dtype=np.float32,
    ):
        rng = rng or np.random.default_rng(0)
        self.cfg = cfg
        self.dtype = dtype
        h, f = cfg.hidden, cfg.ffn_mult * cfg.hidden
        self._tensors: dict[str, Tensor] = {}

        def init(name, *shape, zero=False, one=False):
            if zero:
                data = np.zeros(shape, dtype=dtype)
            elif one:
                data = np.ones(shape, dtype=dtype)
            else:
                data = rng.normal(0.0, INIT_STD, size=shape).astype(dtype)
            t = Tensor(data, requires_grad=True, name=name)
            self._tensors[name] = t
            return t

        init("ln_in.scale", h, one=True)
        init("ln_in.shift", h, zero=True)
        for layer in range(cfg.layers):
            p = f"layer{layer}."
            for proj in ("q", "k", "v", "o"):
                init(p + proj + ".w", h, h)
                init(p + proj + ".b", h, zero=True)
            init(p + "ln1.scale", h, one=True)
            init(p + "ln1.shift", h, zero=True)
            init(p + "ffn1.w", h, f)
            init(p + "ffn1.b", f, zero=True)
            init(p + "ffn2.w", f, h)
            init(p + "ffn2.b", h, zero=True)
            init(p + "ln2.scale", h, one=True)
            init(p + "ln2.shift", h, zero=True)

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def tensors(self) -> dict[str, Tensor]:
        return dict(self._tensors)

    def astype(self, dtype) -> "EncoderWeights":
        clone = EncoderWeights.__new__(EncoderWeights)
        clone.cfg = self.cfg
        clone.dtype = dtype
        clone._tensors = {
            k: Tensor(t.data.astype(dtype), requires_grad=True, name=t.name)
            for k, t in self._tensors.items()
        }
        return clone


def masked_attention(q, k, v, mask, mode: str = "additive", bias=None):
    """Scaled dot-product attention restricted to the visibility mask.

    Accepts arrays or Tensors shaped (..., n, d) with mask (..., n, n).
    Rows attend only to positions whose mask entry is 1; every mask row must
    contain at least one 1 (the diagonal guarantees this upstream).
    """
    q, k, v = ad.as_tensor(q), ad.as_tensor(k), ad.as_tensor(v)
    mask = np.asarray(mask)
    if q.shape != k.shape or k.shape != v.shape:
        raise ShapeError(f"q/k/v shapes differ: {q.shape} {k.shape} {v.shape}")
    n, d = q.shape[-2], q.shape[-1]
    if mask.shape[-2:] != (n, n):
        raise ShapeError(f"mask shape {mask.shape} does not match n={n}")
    scores = ad.matmul(q, ad.transpose(k, tuple(range(k.data.ndim - 2)) + (-1, -2)))
    scores = scores * float(1.0 / np.sqrt(d))
    probs = ad.masked_softmax(scores, mask, mode=mode, bias=bias)
    return ad.matmul(probs, v)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, h = x.shape
    x = ad.reshape(x, (b, n, heads, h // heads))
    return ad.transpose(x, (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, a, n, d = x.shape
    x = ad.transpose(x, (0, 2, 1, 3))
    return ad.reshape(x, (b, n, a * d))


def encoder_forward(
    embedded,
    mask,
    weights: EncoderWeights,
    cfg: Optional[EncoderConfig] = None,
    train: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Run the N-layer encoder over an embedded batch.

    ``embedded`` is (B, n, H) or a single (n, H) sequence; ``mask`` is the
    matching (B, n, n) or (n, n) visibility matrix.  Dropout is active only
    with ``train=True``; inference is deterministic.  Raises NonFiniteError
    if any activation diverges.
    """
    cfg = cfg or weights.cfg
    x = ad.as_tensor(embedded)
    squeeze = x.data.ndim == 2
    if squeeze:
        x = ad.reshape(x, (1,) + x.shape)
    mask = np.asarray(mask)
    if mask.ndim == 2:
        mask = mask[None, :, :]
    b, n, h = x.shape
    if n > cfg.max_seq:
        raise ShapeError(f"sequence length {n} exceeds max_seq {cfg.max_seq}")
    if h != cfg.hidden:
        raise ShapeError(f"hidden size {h} != configured {cfg.hidden}")
    if train and cfg.dropout > 0.0 and rng is None:
        raise ValueError("training with dropout requires an rng")
    if not np.isfinite(x.data).all():
        raise NonFiniteError("encoder input contains NaN or Inf")

    head_mask = mask[:, None, :, :]  # broadcast over heads
    head_bias = (
        ad.mask_bias(head_mask, x.data.dtype) if cfg.mask_mode == "additive" else None
    )

    def drop(t: Tensor) -> Tensor:
        if train and cfg.dropout > 0.0:
            return ad.dropout(t, cfg.dropout, rng)
        return t

    x = ad.layer_norm(x, weights["ln_in.scale"], weights["ln_in.shift"], cfg.ln_eps)
    for layer in range(cfg.layers):
        p = f"layer{layer}."
        q = ad.matmul(x, weights[p + "q.w"]) + weights[p + "q.b"]
        k = ad.matmul(x, weights[p + "k.w"]) + weights[p + "k.b"]
        v = ad.matmul(x, weights[p + "v.w"]) + weights[p + "v.b"]
        context = masked_attention(
            _split_heads(q, cfg.heads),
            _split_heads(k, cfg.heads),
            _split_heads(v, cfg.heads),
            head_mask,
            mode=cfg.mask_mode,
            bias=head_bias,
        )
        attn_out = ad.matmul(_merge_heads(context), weights[p + "o.w"]) + weights[p + "o.b"]
        x = ad.layer_norm(
            x + drop(attn_out), weights[p + "ln1.scale"], weights[p + "ln1.shift"], cfg.ln_eps
        )
        ffn = ad.matmul(ad.gelu(ad.matmul(x, weights[p + "ffn1.w"]) + weights[p + "ffn1.b"]),
                        weights[p + "ffn2.w"]) + weights[p + "ffn2.b"]
        x = ad.layer_norm(
            x + drop(ffn), weights[p + "ln2.scale"], weights[p + "ln2.shift"], cfg.ln_eps
        )
    if not np.isfinite(x.data).all():
        raise NonFiniteError("encoder produced NaN or Inf activations")
    if squeeze:
        x = ad.reshape(x, x.shape[1:])
    return x
