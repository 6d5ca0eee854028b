"""Composite embeddings assembled from the trained segment models.

A column composite concatenates its header-path embedding (metadata model)
with its pooled data tokens (column model); table composites concatenate
data / horizontal / vertical metadata means, optionally plus a caption
embedding; numeric and range composites concatenate attribute, value(s), and
unit parts.  Pooling is always the arithmetic mean over content tokens.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from decimal import Decimal
from pathlib import Path
from typing import Callable, Iterable, Optional

import numpy as np

from . import autodiff as ad
from .bundle import ModelBundle, SegmentModel, segment_ablations
from .embeddings import embed_batch, records_to_arrays
from .encoder import encoder_forward
from .errors import EmptyUnitError, RangeOrderError
from .featurize import (
    CLS_ID,
    SEP_ID,
    UNK_ID,
    TokenRecord,
    VAL_ID,
    number_features,
    tokenize_cell,
)
from .sequences import SegmentKind, TokenSequence, TokenSlot, apply_ablation, build_sequences
from .tables import Cell, Table, UNIT_CLASSES, assign_coordinates


def pool(hidden: np.ndarray, unit: Iterable[int]) -> np.ndarray:
    """Arithmetic mean of hidden states at the given token indices."""
    idx = sorted(set(int(i) for i in unit))
    if not idx:
        raise EmptyUnitError("cannot pool an empty token set")
    if idx[0] < 0 or idx[-1] >= hidden.shape[0]:
        raise IndexError(f"pool index out of range 0..{hidden.shape[0] - 1}")
    return hidden[idx].mean(axis=0)


@dataclass(frozen=True)
class CompositePart:
    source: str  # segment model that produced the slice
    description: str  # pooled unit, human readable
    lo: int
    hi: int


@dataclass
class CompositeEmbedding:
    vector: np.ndarray
    recipe: str
    parts: list[CompositePart]

    def slice(self, k: int) -> np.ndarray:
        p = self.parts[k]
        return self.vector[p.lo : p.hi]

    def reassembled(self) -> np.ndarray:
        return np.concatenate([self.slice(k) for k in range(len(self.parts))])


def _concat(recipe: str, named: list[tuple[str, str, np.ndarray]]) -> CompositeEmbedding:
    parts, chunks, off = [], [], 0
    for source, desc, vec in named:
        parts.append(CompositePart(source, desc, off, off + vec.shape[0]))
        chunks.append(vec)
        off += vec.shape[0]
    return CompositeEmbedding(np.concatenate(chunks), recipe, parts)


def encode_sequence(seq: TokenSequence, model: SegmentModel) -> np.ndarray:
    """Hidden states (n, H) for one sequence under a frozen model."""
    flags = segment_ablations(model)
    seq = apply_ablation(seq, flags)
    arrays = records_to_arrays([seq.tokens], dtype=model.embedding.dtype)
    with ad.no_grad():
        h = encoder_forward(
            embed_batch(arrays, model.embedding, flags),
            seq.visibility[None, :, :],
            model.encoder,
            model.config,
        )
    return h.data[0]


def _segment_hidden(
    table: Table, segment: SegmentKind, bundle: ModelBundle, model: SegmentModel
) -> list[tuple[TokenSequence, np.ndarray]]:
    coords = assign_coordinates(table)
    seqs = build_sequences(
        table, segment, bundle.vocab, coords, units=bundle.units, types=bundle.types
    )
    return [(seq, encode_sequence(seq, model)) for seq in seqs]


def _mean_over(
    encoded: list[tuple[TokenSequence, np.ndarray]],
    hidden_size: int,
    keep: Optional[Callable[[TokenSlot], bool]] = None,
) -> np.ndarray:
    """Global mean over content tokens across sequences; zero if none."""
    total = np.zeros(hidden_size, dtype=np.float64)
    count = 0
    for seq, h in encoded:
        for i, slot in enumerate(seq.slots):
            if slot.kind != "content":
                continue
            if keep is not None and not keep(slot):
                continue
            total += h[i]
            count += 1
    if count == 0:
        return np.zeros(hidden_size, dtype=np.float32)
    return (total / count).astype(np.float32)


def text_sequence(text: str, bundle: ModelBundle, segment: SegmentKind) -> TokenSequence:
    """[CLS] <tokens> [SEP] wrapper for free-standing text."""
    records = tokenize_cell(
        Cell(kind="string", text=text), bundle.vocab, units=bundle.units, types=bundle.types
    )
    return _single_cell_sequence(records, segment, f"text:{text[:32]}")


def _single_cell_sequence(
    records: list[TokenRecord], segment: SegmentKind, label: str
) -> TokenSequence:
    from .sequences import SequenceCell

    slots = [TokenSlot(record=TokenRecord(token_id=CLS_ID, text="[CLS]"), kind="cls", cell_id=-1, unit_id=0)]
    for rec in records:
        slots.append(TokenSlot(record=rec, kind="content", cell_id=0, unit_id=0))
    slots.append(
        TokenSlot(
            record=TokenRecord(token_id=SEP_ID, text="[SEP]", in_pos=min(len(records), 63)),
            kind="sep",
            cell_id=0,
            unit_id=0,
        )
    )
    from .tables import CellAddress

    return TokenSequence(
        segment=segment,
        slots=slots,
        cells=[SequenceCell(key=CellAddress("data", 0, 0), text=" ".join(r.text for r in records))],
        table_id=label,
        units_covered=[0],
    )


def _pooled_text(text: str, bundle: ModelBundle, segment: SegmentKind) -> np.ndarray:
    model = bundle.get(segment)
    seq = text_sequence(text, bundle, segment)
    h = encode_sequence(seq, model)
    content = [i for i, s in enumerate(seq.slots) if s.kind == "content"]
    if not content:
        return np.zeros(bundle.config.hidden, dtype=np.float32)
    return pool(h, content).astype(np.float32)


def _pooled_records(
    records: list[TokenRecord], bundle: ModelBundle, segment: SegmentKind, label: str
) -> np.ndarray:
    model = bundle.get(segment)
    seq = _single_cell_sequence(records, segment, label)
    h = encode_sequence(seq, model)
    return pool(h, [i for i, s in enumerate(seq.slots) if s.kind == "content"]).astype(np.float32)


def column_composites(table: Table, bundle: ModelBundle) -> dict[int, CompositeEmbedding]:
    """colcomp vectors for every column, encoding the table only once."""
    hmd_model = bundle.get(SegmentKind.HMD)
    col_model = bundle.get(SegmentKind.COL)
    h = bundle.config.hidden
    hmd_enc = _segment_hidden(table, SegmentKind.HMD, bundle, hmd_model)
    col_enc = _segment_hidden(table, SegmentKind.COL, bundle, col_model)
    out: dict[int, CompositeEmbedding] = {}
    for j in range(1, table.n_cols + 1):
        path_nodes = {id(n) for n in table.hmd.path_to_leaf(j)}
        path_keys = {
            path for node, _d, path in table.hmd.iter_nodes() if id(node) in path_nodes
        }
        attr_vec = _mean_over(hmd_enc, h, keep=lambda slot: slot.path in path_keys)
        data_vec = _mean_over(col_enc, h, keep=lambda slot: slot.col == j)
        out[j] = _concat(
            "colcomp",
            [
                ("hmd", f"header path of column {j}", attr_vec),
                ("col", f"data of column {j}", data_vec),
            ],
        )
    return out


def column_composite(table: Table, j: int, bundle: ModelBundle) -> CompositeEmbedding:
    """Header-path embedding ++ pooled column-data embedding, length 2H.

    The header part pools every token on the metadata path from the root to
    the column's leaf under the HMD model; the data part pools all content
    tokens of column ``j`` under the column model.
    """
    if not 1 <= j <= table.n_cols:
        raise IndexError(f"column {j} outside 1..{table.n_cols}")
    return column_composites(table, bundle)[j]


def table_composite(table: Table, bundle: ModelBundle, recipe: str = "tblcomp1") -> CompositeEmbedding:
    """Mean data / HMD / VMD embeddings (3H); tblcomp2 appends a caption
    embedding from the row model (4H).  An empty VMD contributes zeros."""
    if recipe not in ("tblcomp1", "tblcomp2"):
        raise ValueError(f"unknown table composite recipe {recipe!r}")
    row_model = bundle.get(SegmentKind.ROW)
    hmd_model = bundle.get(SegmentKind.HMD)
    h = bundle.config.hidden

    data_vec = _mean_over(_segment_hidden(table, SegmentKind.ROW, bundle, row_model), h)
    hmd_vec = _mean_over(_segment_hidden(table, SegmentKind.HMD, bundle, hmd_model), h)
    if table.vmd.is_empty or not bundle.has(SegmentKind.VMD):
        vmd_vec = np.zeros(h, dtype=np.float32)
    else:
        vmd_model = bundle.get(SegmentKind.VMD)
        vmd_vec = _mean_over(_segment_hidden(table, SegmentKind.VMD, bundle, vmd_model), h)

    named = [
        ("row", "mean of data tokens", data_vec),
        ("hmd", "mean of horizontal metadata tokens", hmd_vec),
        ("vmd", "mean of vertical metadata tokens", vmd_vec),
    ]
    if recipe == "tblcomp2":
        named.append(("row", "caption embedding", _pooled_text(table.caption, bundle, SegmentKind.ROW)))
    return _concat(recipe, named)


def _value_record(value, unit: Optional[str]) -> TokenRecord:
    feat = [0] * 8
    if unit is not None:
        feat[UNIT_CLASSES.index(unit)] = 1
    d = value if isinstance(value, Decimal) else Decimal(str(value))
    return TokenRecord(
        token_id=VAL_ID,
        text=str(d),
        is_number=True,
        num=number_features(d),
        feat=tuple(feat),
        type_id=1,  # numeric slot in the default fourteen-type table
    )


def _unit_part(unit: Optional[str], bundle: ModelBundle) -> np.ndarray:
    # The unit slice embeds the unit-class word; a missing unit embeds [UNK].
    if unit is None:
        rec = TokenRecord(token_id=UNK_ID, text="[UNK]")
        return _pooled_records([rec], bundle, SegmentKind.COL, "unit:none")
    return _pooled_text(unit, bundle, SegmentKind.COL)


def numeric_composite(
    attribute: str, value, unit: Optional[str], bundle: ModelBundle
) -> CompositeEmbedding:
    """attribute ++ [VAL](value) ++ unit parts, length 3H."""
    attr = _pooled_text(attribute, bundle, SegmentKind.HMD)
    val = _pooled_records([_value_record(value, unit)], bundle, SegmentKind.COL, f"val:{value}")
    return _concat(
        "numeric_ce",
        [
            ("hmd", f"attribute {attribute!r}", attr),
            ("col", "value token", val),
            ("col", f"unit {unit!r}", _unit_part(unit, bundle)),
        ],
    )


def range_composite(
    attribute: str, unit: Optional[str], lo, hi, bundle: ModelBundle
) -> CompositeEmbedding:
    """attribute ++ unit ++ [VAL](lo) ++ [VAL](hi) parts, length 4H."""
    lo_d = lo if isinstance(lo, Decimal) else Decimal(str(lo))
    hi_d = hi if isinstance(hi, Decimal) else Decimal(str(hi))
    if lo_d > hi_d:
        raise RangeOrderError(f"range start {lo} exceeds end {hi}")
    attr = _pooled_text(attribute, bundle, SegmentKind.HMD)
    lo_vec = _pooled_records([_value_record(lo_d, unit)], bundle, SegmentKind.COL, f"lo:{lo}")
    hi_vec = _pooled_records([_value_record(hi_d, unit)], bundle, SegmentKind.COL, f"hi:{hi}")
    return _concat(
        "range_ce",
        [
            ("hmd", f"attribute {attribute!r}", attr),
            ("col", f"unit {unit!r}", _unit_part(unit, bundle)),
            ("col", "range start token", lo_vec),
            ("col", "range end token", hi_vec),
        ],
    )


def cell_value_embedding(cell: Cell, bundle: ModelBundle) -> np.ndarray:
    """Column-model embedding of one data value (entity clustering unit)."""
    records = tokenize_cell(cell, bundle.vocab, units=bundle.units, types=bundle.types)
    if not records:
        return np.zeros(bundle.config.hidden, dtype=np.float32)
    return _pooled_records(records, bundle, SegmentKind.COL, f"cell:{cell.text[:32]}")


# ---------------------------------------------------------------------------
# Embedding dump: little-endian float32 vectors + JSON manifest
# ---------------------------------------------------------------------------


def write_embeddings(path_prefix, recipe: str, vectors: dict[str, np.ndarray], extra: Optional[dict] = None) -> None:
    """Write ``<prefix>.bin`` and ``<prefix>.json``; offsets are in floats."""
    prefix = Path(path_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    ids = sorted(vectors)
    dims = {vectors[i].shape[0] for i in ids}
    if len(dims) > 1:
        raise ValueError(f"inconsistent vector lengths {sorted(dims)}")
    dim = dims.pop() if dims else 0
    offsets = {}
    with open(prefix.with_suffix(".bin"), "wb") as fh:
        for k, item in enumerate(ids):
            offsets[item] = k * dim
            fh.write(np.ascontiguousarray(vectors[item], dtype="<f4").tobytes())
    manifest = {"recipe": recipe, "H": dim, "count": len(ids), "offsets": offsets}
    if extra:
        manifest.update(extra)
    prefix.with_suffix(".json").write_text(
        json.dumps(manifest, ensure_ascii=False, sort_keys=True), encoding="utf-8"
    )


def read_embeddings(path_prefix) -> tuple[str, dict[str, np.ndarray]]:
    prefix = Path(path_prefix)
    manifest = json.loads(prefix.with_suffix(".json").read_text(encoding="utf-8"))
    blob = np.frombuffer(prefix.with_suffix(".bin").read_bytes(), dtype="<f4")
    dim = manifest["H"]
    out = {
        item: blob[off : off + dim].copy() for item, off in manifest["offsets"].items()
    }
    return manifest["recipe"], out
