"""Trainable embedding layer: six components summed per token.

Components: token id, number features (four concatenated quarter-width
lookups), in-cell position, in-table position (six concatenated sixth-width
coordinate lookups), unit/nesting feature affine map, and inferred type.
The hidden size must be divisible by 12 so both concatenations tile exactly.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .featurize import FEAT_BITS, MAX_CELL_TOKENS, NUM_FEATURE_BOUND, NUM_TYPES, TokenRecord
from .sequences import AblationFlags, TokenSequence
from .tables import DEFAULT_COORD_BOUND

INIT_STD = 0.02
NUM_LOOKUP_ROWS = NUM_FEATURE_BOUND + 1  # discrete values 0..10 inclusive


class EmbeddingWeights:
    """All trainable tensors of the embedding layer."""

    def __init__(
        self,
        vocab_size: int,
        hidden: int,
        coord_bound: int = DEFAULT_COORD_BOUND,
        rng: Optional[np.random.Generator] = None,
        dtype=np.float32,
    ):
        if hidden % 12 != 0:
            raise ValueError(f"hidden size {hidden} must be divisible by 12")
        rng = rng or np.random.default_rng(0)
        self.vocab_size = vocab_size
        self.hidden = hidden
        self.coord_bound = coord_bound
        self.dtype = dtype

        def init(name, *shape):
            data = rng.normal(0.0, INIT_STD, size=shape).astype(dtype)
            return Tensor(data, requires_grad=True, name=name)

        quarter, sixth = hidden // 4, hidden // 6
        self.tok = init("tok", vocab_size, hidden)
        self.mag = init("mag", NUM_LOOKUP_ROWS, quarter)
        self.pre = init("pre", NUM_LOOKUP_ROWS, quarter)
        self.fst = init("fst", NUM_LOOKUP_ROWS, quarter)
        self.lst = init("lst", NUM_LOOKUP_ROWS, quarter)
        self.cpos = init("cpos", MAX_CELL_TOKENS, hidden)
        self.coord_tables = [
            init(name, coord_bound, sixth)
            for name in ("v_row", "v_col", "h_row", "h_col", "n_row", "n_col")
        ]
        self.fmt = init("fmt", FEAT_BITS, hidden)
        self.fmt_bias = Tensor(np.zeros(hidden, dtype=dtype), requires_grad=True, name="fmt_bias")
        self.type = init("type", NUM_TYPES, hidden)

    def tensors(self) -> dict[str, Tensor]:
        out = {
            "tok": self.tok,
            "mag": self.mag,
            "pre": self.pre,
            "fst": self.fst,
            "lst": self.lst,
            "cpos": self.cpos,
            "fmt": self.fmt,
            "fmt_bias": self.fmt_bias,
            "type": self.type,
        }
        for t in self.coord_tables:
            out[t.name] = t
        return out

    def astype(self, dtype) -> "EmbeddingWeights":
        """Copy with every tensor cast (float64 for gradient checks)."""
        clone = EmbeddingWeights.__new__(EmbeddingWeights)
        clone.vocab_size = self.vocab_size
        clone.hidden = self.hidden
        clone.coord_bound = self.coord_bound
        clone.dtype = dtype
        for name in ("tok", "mag", "pre", "fst", "lst", "cpos", "fmt", "fmt_bias", "type"):
            src = getattr(self, name)
            setattr(clone, name, Tensor(src.data.astype(dtype), requires_grad=True, name=src.name))
        clone.coord_tables = [
            Tensor(t.data.astype(dtype), requires_grad=True, name=t.name)
            for t in self.coord_tables
        ]
        return clone


class SequenceArrays:
    """Dense per-token feature arrays for a padded batch of sequences."""

    def __init__(self, token_ids, in_pos, coords, feat, type_ids, num_idx, is_num, pad_mask):
        self.token_ids = token_ids  # (B, n) int
        self.in_pos = in_pos  # (B, n) int
        self.coords = coords  # (B, n, 6) int
        self.feat = feat  # (B, n, 8) float
        self.type_ids = type_ids  # (B, n) int
        self.num_idx = num_idx  # (B, n, 4) int
        self.is_num = is_num  # (B, n, 1) float
        self.pad_mask = pad_mask  # (B, n) 1.0 for real tokens

    @property
    def shape(self):
        return self.token_ids.shape


def records_to_arrays(batch: list[list[TokenRecord]], dtype=np.float32) -> SequenceArrays:
    """Pad a batch of token-record lists to a common length."""
    bsz = len(batch)
    n = max(len(recs) for recs in batch)
    token_ids = np.zeros((bsz, n), dtype=np.int64)
    in_pos = np.zeros((bsz, n), dtype=np.int64)
    coords = np.zeros((bsz, n, 6), dtype=np.int64)
    feat = np.zeros((bsz, n, FEAT_BITS), dtype=dtype)
    type_ids = np.zeros((bsz, n), dtype=np.int64)
    num_idx = np.zeros((bsz, n, 4), dtype=np.int64)
    is_num = np.zeros((bsz, n, 1), dtype=dtype)
    pad_mask = np.zeros((bsz, n), dtype=dtype)
    for b, recs in enumerate(batch):
        for i, r in enumerate(recs):
            token_ids[b, i] = r.token_id
            in_pos[b, i] = r.in_pos
            coords[b, i] = r.coord.components()
            feat[b, i] = r.feat
            type_ids[b, i] = r.type_id
            if r.num is not None:
                num_idx[b, i] = (r.num.mag, r.num.pre, r.num.fst, r.num.lst)
                is_num[b, i, 0] = 1.0
        pad_mask[b, : len(recs)] = 1.0
    return SequenceArrays(token_ids, in_pos, coords, feat, type_ids, num_idx, is_num, pad_mask)


def embed_batch(
    arrays: SequenceArrays, w: EmbeddingWeights, flags: AblationFlags = AblationFlags.none()
) -> Tensor:
    """Summed embedding (B, n, H); ablated components contribute zero."""
    out = ad.embedding(w.tok, arrays.token_ids)

    num_parts = [
        ad.embedding(table, arrays.num_idx[..., k])
        for k, table in enumerate((w.mag, w.pre, w.fst, w.lst))
    ]
    out = out + ad.concat(num_parts, axis=-1) * arrays.is_num

    out = out + ad.embedding(w.cpos, arrays.in_pos)

    if not flags.no_bicoords:
        tpos_parts = [
            ad.embedding(table, arrays.coords[..., k]) for k, table in enumerate(w.coord_tables)
        ]
        out = out + ad.concat(tpos_parts, axis=-1)
    if not flags.no_units_nesting:
        out = out + (ad.matmul(Tensor(arrays.feat), w.fmt) + w.fmt_bias)
    if not flags.no_type:
        out = out + ad.embedding(w.type, arrays.type_ids)
    return out


def embed_components(rec: TokenRecord, w: EmbeddingWeights) -> tuple[np.ndarray, ...]:
    """The six per-token component vectors, each of length H, in the order
    token, number, in-cell position, in-table position, format, type."""
    with ad.no_grad():
        e_tok = w.tok.data[rec.token_id].copy()
        if rec.is_number:
            idx = (rec.num.mag, rec.num.pre, rec.num.fst, rec.num.lst)
            e_num = np.concatenate(
                [t.data[i] for t, i in zip((w.mag, w.pre, w.fst, w.lst), idx)]
            )
        else:
            e_num = np.zeros(w.hidden, dtype=w.dtype)
        e_cpos = w.cpos.data[rec.in_pos].copy()
        e_tpos = np.concatenate(
            [t.data[c] for t, c in zip(w.coord_tables, rec.coord.components())]
        )
        e_fmt = np.asarray(rec.feat, dtype=w.dtype) @ w.fmt.data + w.fmt_bias.data
        e_type = w.type.data[rec.type_id].copy()
    return e_tok, e_num, e_cpos, e_tpos, e_fmt, e_type


def embed_token(
    rec: TokenRecord, w: EmbeddingWeights, flags: AblationFlags = AblationFlags.none()
) -> np.ndarray:
    """Sum of the six components with ablated ones replaced by zero."""
    e_tok, e_num, e_cpos, e_tpos, e_fmt, e_type = embed_components(rec, w)
    total = e_tok + e_num + e_cpos
    if not flags.no_bicoords:
        total = total + e_tpos
    if not flags.no_units_nesting:
        total = total + e_fmt
    if not flags.no_type:
        total = total + e_type
    return total
