"""Serialize table segments into token sequences with visibility matrices.

A table is read in four segments: data rows, data columns, horizontal
metadata, vertical metadata.  Each row/column/header-tree unit opens with
[CLS]; every cell closes with [SEP]; sequences are packed greedily up to 256
tokens without ever splitting a cell.  The visibility matrix marks which
token pairs may attend to each other: same cell, same grid row, or same grid
column for data; ancestor/descendant or sibling nodes for metadata.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Optional

import numpy as np

from .errors import CellTooLargeError
from .featurize import (
    CLS_ID,
    SEP_ID,
    FEAT_BITS,
    MAX_CELL_TOKENS,
    TokenRecord,
    TypeDictionary,
    UnitDictionary,
    Vocabulary,
    _feat_bits,
    detect_unit,
    infer_type,
    tokenize_cell,
)
from .tables import (
    Cell,
    CellAddress,
    BiCoordinate,
    Table,
    ZERO_COORD,
    _depth_order_index,
    assign_coordinates,
)

MAX_SEQ_TOKENS = 256


class SegmentKind(str, Enum):
    ROW = "row"
    COL = "col"
    HMD = "hmd"
    VMD = "vmd"

    @property
    def is_data(self) -> bool:
        return self in (SegmentKind.ROW, SegmentKind.COL)


@dataclass(frozen=True)
class AblationFlags:
    """Component-removal switches for the four reduced model variants."""

    no_visibility: bool = False
    no_type: bool = False
    no_units_nesting: bool = False
    no_bicoords: bool = False

    @classmethod
    def none(cls) -> "AblationFlags":
        return cls()

    @classmethod
    def from_names(cls, names: Iterable[str]) -> "AblationFlags":
        mapping = {
            "visibility": "no_visibility",
            "type": "no_type",
            "units": "no_units_nesting",
            "coords": "no_bicoords",
        }
        kwargs = {}
        for n in names:
            if n not in mapping:
                raise ValueError(f"unknown ablation {n!r}; choose from {sorted(mapping)}")
            kwargs[mapping[n]] = True
        return cls(**kwargs)


@dataclass(frozen=True)
class TokenSlot:
    """A token plus the structural identity visibility rules need."""

    record: TokenRecord
    kind: str  # "cls" | "sep" | "content"
    cell_id: int  # index into TokenSequence.cells; -1 for [CLS]
    unit_id: int  # row index, column index, or root index (0-based)
    row: int = 0  # outer 1-based grid row, 0 if not a data cell
    col: int = 0
    path: Optional[tuple[int, ...]] = None  # metadata tree path


@dataclass(frozen=True)
class SequenceCell:
    """One cell-unit of a sequence (a nested host counts as one cell)."""

    key: CellAddress
    text: str


@dataclass
class TokenSequence:
    """One attention scope: tokens, per-token structure, visibility."""

    segment: SegmentKind
    slots: list[TokenSlot]
    cells: list[SequenceCell]
    table_id: str
    units_covered: list[int]
    visibility: np.ndarray = field(default=None)  # (n, n) uint8

    def __post_init__(self) -> None:
        if self.visibility is None:
            self.visibility = build_visibility_matrix(self)

    def __len__(self) -> int:
        return len(self.slots)

    @property
    def tokens(self) -> list[TokenRecord]:
        return [s.record for s in self.slots]

    def content_positions(self, cell_id: Optional[int] = None) -> list[int]:
        return [
            i
            for i, s in enumerate(self.slots)
            if s.kind == "content" and (cell_id is None or s.cell_id == cell_id)
        ]


def _flat_string_records(
    cell: Cell, vocab: Vocabulary, units, types, nested: bool, coord: BiCoordinate
) -> list[TokenRecord]:
    return tokenize_cell(cell, vocab, units=units, types=types, nested=nested, coord=coord)


def _nested_host_records(
    host: Cell,
    host_addr: tuple[int, int],
    coords: dict[CellAddress, BiCoordinate],
    vocab: Vocabulary,
    units,
    types,
) -> list[TokenRecord]:
    """Inline a nested table: its header nodes depth-first, then its data
    grid row-major.  The whole inlined content counts as one host cell and
    shares one in-cell position counter."""
    inner = host.nested
    records: list[TokenRecord] = []

    def node_records(tree, area: str):
        pos = _depth_order_index(tree)
        for node, _d, _p in tree.iter_nodes():
            d, k = pos[id(node)]
            coord = coords[CellAddress(area, d, k, host=host_addr)]
            yield from tokenize_cell(
                Cell(kind="string", text=node.label),
                vocab,
                units=units,
                types=types,
                nested=True,
                coord=coord,
            )

    records.extend(node_records(inner.hmd, "hmd"))
    records.extend(node_records(inner.vmd, "vmd"))
    for a in range(1, inner.n_rows + 1):
        for b in range(1, inner.n_cols + 1):
            coord = coords[CellAddress("data", a, b, host=host_addr)]
            records.extend(
                tokenize_cell(
                    inner.cell(a, b), vocab, units=units, types=types, nested=True, coord=coord
                )
            )
    records = records[:MAX_CELL_TOKENS]
    return [replace(r, in_pos=i) for i, r in enumerate(records)]


def _cell_chunks(
    table: Table,
    segment: SegmentKind,
    coords: dict[CellAddress, BiCoordinate],
    vocab: Vocabulary,
    units,
    types,
):
    """Yield (unit_id, cell_key, row, col, path, records, cell_feat, cell_type)."""
    if segment.is_data:
        by_rows = segment == SegmentKind.ROW
        if by_rows:
            order = [(i, j) for i in range(1, table.n_rows + 1) for j in range(1, table.n_cols + 1)]
        else:
            order = [(i, j) for j in range(1, table.n_cols + 1) for i in range(1, table.n_rows + 1)]
        for i, j in order:
            cell = table.cell(i, j)
            addr = CellAddress("data", i, j)
            coord = coords[addr]
            if cell.kind == "nested":
                records = _nested_host_records(cell, (i, j), coords, vocab, units, types)
                feat = tuple([0] * (FEAT_BITS - 1) + [1])
            else:
                records = tokenize_cell(cell, vocab, units=units, types=types, coord=coord)
                feat = _feat_bits(detect_unit(cell, units), cell.is_numeric, False)
            unit_id = i - 1 if by_rows else j - 1
            yield unit_id, addr, i, j, None, records, feat, infer_type(cell, types), coord
    else:
        tree = table.hmd if segment == SegmentKind.HMD else table.vmd
        pos = _depth_order_index(tree)
        for node, _depth, path in tree.iter_nodes():
            d, k = pos[id(node)]
            addr = CellAddress(segment.value, d, k)
            coord = coords[addr]
            cell = Cell(kind="string", text=node.label)
            records = tokenize_cell(cell, vocab, units=units, types=types, coord=coord)
            yield path[0], addr, 0, 0, path, records, (0,) * FEAT_BITS, infer_type(
                cell, types
            ), coord


def build_sequences(
    table: Table,
    segment: SegmentKind,
    vocab: Vocabulary,
    coords: Optional[dict[CellAddress, BiCoordinate]] = None,
    units: Optional[UnitDictionary] = None,
    types: Optional[TypeDictionary] = None,
    max_tokens: int = MAX_SEQ_TOKENS,
) -> list[TokenSequence]:
    """Pack one table segment into token sequences of at most ``max_tokens``.

    Whole cells are never split; a unit interrupted by the budget re-opens
    with a fresh [CLS] in the next sequence.  An empty segment (no vertical
    metadata) yields an empty list.
    """
    if coords is None:
        coords = assign_coordinates(table)
    types = types or TypeDictionary()
    text_type = infer_type(Cell(kind="string", text=""), types)

    sequences: list[TokenSequence] = []
    slots: list[TokenSlot] = []
    cells: list[SequenceCell] = []
    units_covered: list[int] = []

    def close_sequence():
        nonlocal slots, cells, units_covered
        if slots:
            sequences.append(
                TokenSequence(
                    segment=segment,
                    slots=slots,
                    cells=cells,
                    table_id=table.source_id,
                    units_covered=sorted(set(units_covered)),
                )
            )
        slots, cells, units_covered = [], [], []

    def open_unit(unit_id: int):
        cls_rec = TokenRecord(token_id=CLS_ID, text="[CLS]", type_id=text_type)
        slots.append(TokenSlot(record=cls_rec, kind="cls", cell_id=-1, unit_id=unit_id))
        units_covered.append(unit_id)

    current_unit: Optional[int] = None
    for unit_id, addr, row, col, path, records, cell_feat, cell_type, coord in _cell_chunks(
        table, segment, coords, vocab, units, types
    ):
        chunk_len = len(records) + 1  # + [SEP]
        if chunk_len + 1 > max_tokens:
            raise CellTooLargeError(
                f"cell {addr} needs {chunk_len + 1} tokens, budget is {max_tokens}"
            )
        needs_cls = current_unit != unit_id
        if len(slots) + (1 if needs_cls else 0) + chunk_len > max_tokens:
            close_sequence()
            needs_cls = True
        if needs_cls or not slots:
            open_unit(unit_id)
            current_unit = unit_id
        cell_id = len(cells)
        cells.append(SequenceCell(key=addr, text=" ".join(r.text for r in records)))
        for rec in records:
            slots.append(
                TokenSlot(
                    record=rec,
                    kind="content",
                    cell_id=cell_id,
                    unit_id=unit_id,
                    row=row,
                    col=col,
                    path=path,
                )
            )
        sep_rec = TokenRecord(
            token_id=SEP_ID,
            text="[SEP]",
            in_pos=min(len(records), 63),
            coord=coord,
            feat=cell_feat,
            type_id=cell_type,
        )
        slots.append(
            TokenSlot(record=sep_rec, kind="sep", cell_id=cell_id, unit_id=unit_id, row=row, col=col, path=path)
        )
    close_sequence()
    return sequences


def _is_ancestor(a: tuple[int, ...], b: tuple[int, ...]) -> bool:
    return len(a) < len(b) and b[: len(a)] == a


def build_visibility_matrix(seq: TokenSequence) -> np.ndarray:
    """Symmetric binary matrix with unit diagonal.

    Data segments: tokens see each other iff same cell, same grid row, or
    same grid column.  Metadata segments: iff same node, ancestor and
    descendant, or siblings.  [CLS] sees its own unit plus every other
    [CLS]; [SEP] inherits the visibility of the cell it closes.
    """
    n = len(seq.slots)
    m = np.eye(n, dtype=np.uint8)
    is_data = seq.segment.is_data
    for i in range(n):
        a = seq.slots[i]
        for j in range(i + 1, n):
            b = seq.slots[j]
            if a.kind == "cls" or b.kind == "cls":
                if a.kind == "cls" and b.kind == "cls":
                    vis = True
                else:
                    cls_slot, other = (a, b) if a.kind == "cls" else (b, a)
                    vis = other.unit_id == cls_slot.unit_id
            elif a.cell_id == b.cell_id:
                vis = True
            elif is_data:
                vis = a.row == b.row or a.col == b.col
            else:
                vis = (
                    _is_ancestor(a.path, b.path)
                    or _is_ancestor(b.path, a.path)
                    or a.path[:-1] == b.path[:-1]
                )
            if vis:
                m[i, j] = m[j, i] = 1
    return m


def apply_ablation(seq: TokenSequence, flags: AblationFlags) -> TokenSequence:
    """Return the sequence with ablated structure removed; identity for
    empty flags.  Idempotent."""
    if flags == AblationFlags.none():
        return seq
    slots = seq.slots
    if flags.no_bicoords or flags.no_units_nesting:
        new_slots = []
        for s in slots:
            rec = s.record
            if flags.no_bicoords:
                rec = replace(rec, coord=ZERO_COORD)
            if flags.no_units_nesting:
                rec = replace(rec, feat=(0,) * FEAT_BITS)
            new_slots.append(replace(s, record=rec))
        slots = new_slots
    visibility = seq.visibility
    if flags.no_visibility:
        visibility = np.ones_like(seq.visibility)
    return TokenSequence(
        segment=seq.segment,
        slots=slots,
        cells=seq.cells,
        table_id=seq.table_id,
        units_covered=seq.units_covered,
        visibility=visibility,
    )


def _rle(flat: np.ndarray) -> list[list[int]]:
    out: list[list[int]] = []
    for v in flat.tolist():
        if out and out[-1][0] == v:
            out[-1][1] += 1
        else:
            out.append([v, 1])
    return out


def rle_decode(pairs: list[list[int]], n: int) -> np.ndarray:
    flat = np.concatenate([np.full(c, v, dtype=np.uint8) for v, c in pairs])
    return flat.reshape(n, n)


def sequence_to_json(seq: TokenSequence) -> str:
    """One-line JSON form for inspection dumps."""
    tokens = []
    for s in seq.slots:
        r = s.record
        tokens.append(
            {
                "id": r.token_id,
                "text": r.text,
                "kind": s.kind,
                "in_pos": r.in_pos,
                "coord": list(r.coord.components()),
                "feat": "".join(str(b) for b in r.feat),
                "type_id": r.type_id,
                "num": [r.num.mag, r.num.pre, r.num.fst, r.num.lst] if r.num else None,
            }
        )
    obj = {
        "table": seq.table_id,
        "segment": seq.segment.value,
        "units": seq.units_covered,
        "tokens": tokens,
        "visibility_rle": _rle(seq.visibility.reshape(-1)),
    }
    return json.dumps(obj, ensure_ascii=False)


def dump_sequences(seqs: Iterable[TokenSequence], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for seq in seqs:
            fh.write(sequence_to_json(seq) + "\n")
