"""In-memory model of tables with bi-dimensional hierarchical metadata.

A table is a caption, a horizontal header tree (HMD, one leaf per column),
an optional vertical header tree (VMD, one leaf per row), and a rectangular
grid of typed cells.  Cells may hold strings, numbers, ranges, gaussians, or
a single level of nested table.  The canonical on-disk form is the
``tabjson/1`` JSON schema; parsing is strict and round-trips losslessly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation
from typing import Iterator, Optional

from .errors import SchemaError, ShapeError

TABJSON_FORMAT = "tabjson/1"

CELL_KINDS = ("string", "number", "range", "gaussian", "nested", "empty")

# Unit classes in the fixed feature-bit order; the eighth bit is "nested".
UNIT_CLASSES = ("stats", "length", "weight", "capacity", "time", "temperature", "pressure")

# Positional vocabulary bound: every coordinate component must stay below it.
DEFAULT_COORD_BOUND = 256


@dataclass
class HeaderNode:
    """One label in a header tree; leaves carry a 1-based leaf_index."""

    label: str
    children: list["HeaderNode"] = field(default_factory=list)
    leaf_index: Optional[int] = None

    @property
    def is_leaf(self) -> bool:
        return not self.children


@dataclass
class HeaderTree:
    """Forest of header nodes for one axis (horizontal or vertical)."""

    roots: list[HeaderNode] = field(default_factory=list)

    def __post_init__(self) -> None:
        self._number_leaves()

    def _number_leaves(self) -> None:
        idx = 0
        for node, _depth, _path in self.iter_nodes():
            if node.is_leaf:
                idx += 1
                node.leaf_index = idx
            else:
                node.leaf_index = None
        self._leaf_count = idx

    @property
    def leaf_count(self) -> int:
        return self._leaf_count

    @property
    def is_empty(self) -> bool:
        return not self.roots

    def iter_nodes(self) -> Iterator[tuple[HeaderNode, int, tuple[int, ...]]]:
        """Pre-order traversal yielding (node, depth, path).

        Depth is 1 at the roots.  The path is the tuple of child indices
        from the root list down to the node, so ancestor tests are prefix
        tests on paths.
        """

        def walk(node: HeaderNode, depth: int, path: tuple[int, ...]):
            yield node, depth, path
            for k, child in enumerate(node.children):
                yield from walk(child, depth + 1, path + (k,))

        for r, root in enumerate(self.roots):
            yield from walk(root, 1, (r,))

    def leaves(self) -> list[HeaderNode]:
        return [n for n, _, _ in self.iter_nodes() if n.is_leaf]

    def leaf_depths(self) -> dict[int, int]:
        """Map leaf_index -> depth of that leaf's path from its root."""
        return {n.leaf_index: d for n, d, _ in self.iter_nodes() if n.is_leaf}

    def path_to_leaf(self, leaf_index: int) -> list[HeaderNode]:
        """Nodes from root to the leaf with the given index, inclusive."""
        for node, _depth, path in self.iter_nodes():
            if node.is_leaf and node.leaf_index == leaf_index:
                chain = [self.roots[path[0]]]
                for k in path[1:]:
                    chain.append(chain[-1].children[k])
                return chain
        raise KeyError(f"no leaf with index {leaf_index}")

    def max_depth(self) -> int:
        return max((d for _n, d, _p in self.iter_nodes()), default=0)


@dataclass
class Cell:
    """One data cell; exactly the fields implied by ``kind`` are set."""

    kind: str
    text: str = ""
    number: Optional[Decimal] = None
    range: Optional[tuple[Decimal, Decimal]] = None
    gaussian: Optional[tuple[Decimal, Decimal]] = None
    unit: Optional[str] = None
    nested: Optional["Table"] = None

    @property
    def is_numeric(self) -> bool:
        """True for cells whose content is a number, range, or gaussian."""
        return self.kind in ("number", "range", "gaussian")

    def validate(self, allow_nested: bool = True) -> None:
        if self.kind not in CELL_KINDS:
            raise SchemaError(f"unknown cell kind {self.kind!r}")
        populated = {
            "number": self.number is not None,
            "range": self.range is not None,
            "gaussian": self.gaussian is not None,
            "nested": self.nested is not None,
        }
        expected = {k: False for k in populated}
        if self.kind in expected:
            expected[self.kind] = True
        if populated != expected:
            raise SchemaError(f"cell of kind {self.kind!r} has mismatched fields")
        if self.unit is not None:
            if self.unit not in UNIT_CLASSES:
                raise SchemaError(f"unknown unit class {self.unit!r}")
            if not self.is_numeric:
                raise SchemaError(f"unit on non-numeric cell kind {self.kind!r}")
        if self.kind == "empty" and self.text:
            raise SchemaError("empty cell with non-empty text")
        if self.range is not None and self.range[0] > self.range[1]:
            raise ValueError(f"range lo {self.range[0]} > hi {self.range[1]}")
        if self.gaussian is not None and self.gaussian[1] < 0:
            raise ValueError(f"gaussian sd {self.gaussian[1]} < 0")
        if self.nested is not None:
            if not allow_nested:
                raise ShapeError("nested tables may not contain nested tables")
            self.nested.validate(allow_nested=False)


@dataclass
class Table:
    """Caption + header trees + rectangular cell grid."""

    caption: str
    hmd: HeaderTree
    vmd: HeaderTree
    data: list[list[Cell]]
    source_id: str = ""

    @property
    def n_rows(self) -> int:
        return len(self.data)

    @property
    def n_cols(self) -> int:
        return self.hmd.leaf_count

    def cell(self, i: int, j: int) -> Cell:
        """1-based access matching coordinate conventions."""
        return self.data[i - 1][j - 1]

    def validate(self, allow_nested: bool = True) -> None:
        if self.hmd.leaf_count < 1:
            raise ShapeError("horizontal metadata must have at least one leaf")
        if not self.data:
            raise ShapeError("table has no data rows")
        m = self.hmd.leaf_count
        for i, row in enumerate(self.data):
            if len(row) != m:
                raise ShapeError(f"row {i} has {len(row)} cells, expected {m}")
        if not self.vmd.is_empty and self.vmd.leaf_count != len(self.data):
            raise ShapeError(
                f"vertical metadata has {self.vmd.leaf_count} leaves "
                f"for {len(self.data)} rows"
            )
        for row in self.data:
            for cell in row:
                cell.validate(allow_nested=allow_nested)

    def has_nested(self) -> bool:
        return any(c.kind == "nested" for row in self.data for c in row)


@dataclass(frozen=True)
class BiCoordinate:
    """Paired (row, col) positions along the vertical and horizontal header
    trees plus a nested-table position; (0, 0) marks "not applicable"."""

    v: tuple[int, int] = (0, 0)
    h: tuple[int, int] = (0, 0)
    n: tuple[int, int] = (0, 0)

    def components(self) -> tuple[int, int, int, int, int, int]:
        """Fixed component order: v.row, v.col, h.row, h.col, n.row, n.col."""
        return (*self.v, *self.h, *self.n)


ZERO_COORD = BiCoordinate()


@dataclass(frozen=True)
class CellAddress:
    """Stable key for a cell or header node, outer or nested.

    For data cells ``row``/``col`` are the 1-based grid indices; for header
    nodes they are (depth, index among same-depth nodes in tree order).
    ``host`` is the outer grid position of the enclosing nested-table cell,
    or None for the outer table itself.
    """

    area: str  # "data" | "hmd" | "vmd"
    row: int
    col: int
    host: Optional[tuple[int, int]] = None


def _depth_order_index(tree: HeaderTree) -> dict[int, tuple[int, int]]:
    """Map each node (by identity) to (depth, index among that depth)."""
    counters: dict[int, int] = {}
    out: dict[int, tuple[int, int]] = {}
    for node, depth, _path in tree.iter_nodes():
        counters[depth] = counters.get(depth, 0) + 1
        out[id(node)] = (depth, counters[depth])
    return out


def assign_coordinates(
    table: Table, bound: int = DEFAULT_COORD_BOUND
) -> dict[CellAddress, BiCoordinate]:
    """Assign one bi-dimensional coordinate to every cell and header node.

    Data cell (i, j) gets h = (depth of its column leaf's path, j) and
    v = (depth of its row leaf's path, i), with depth 0 when the table has
    no vertical metadata.  Header nodes get their own tree position along
    their axis and (0, 0) along the other.  Content of a nested table keeps
    the host cell's v/h and adds a nested position laid out Cartesian-style:
    the nested header occupies the first rows, nested data cell (a, b) sits
    at (header depth + a, b).

    Raises OverflowError when any component reaches ``bound``.
    """
    table.validate()
    coords: dict[CellAddress, BiCoordinate] = {}

    def check(c: BiCoordinate) -> BiCoordinate:
        if any(x < 0 or x >= bound for x in c.components()):
            raise OverflowError(f"coordinate component out of [0, {bound}): {c}")
        return c

    hdepth = table.hmd.leaf_depths()
    vdepth = table.vmd.leaf_depths() if not table.vmd.is_empty else {}

    for area, tree in (("hmd", table.hmd), ("vmd", table.vmd)):
        pos = _depth_order_index(tree)
        for node, _depth, _path in tree.iter_nodes():
            d, k = pos[id(node)]
            axis = BiCoordinate(h=(d, k)) if area == "hmd" else BiCoordinate(v=(d, k))
            coords[CellAddress(area, d, k)] = check(axis)

    for i in range(1, table.n_rows + 1):
        v = (vdepth[i], i) if vdepth else (0, i)
        for j in range(1, table.n_cols + 1):
            h = (hdepth[j], j)
            here = check(BiCoordinate(v=v, h=h))
            coords[CellAddress("data", i, j)] = here
            cell = table.cell(i, j)
            if cell.kind == "nested":
                _assign_nested(coords, cell.nested, host=(i, j), outer=here, check=check)

    return coords


def _assign_nested(coords, inner: Table, host, outer: BiCoordinate, check) -> None:
    """Nested positions: header rows first, then the data grid below."""
    header_rows = inner.hmd.max_depth()
    hpos = _depth_order_index(inner.hmd)
    for node, _d, _p in inner.hmd.iter_nodes():
        d, k = hpos[id(node)]
        coords[CellAddress("hmd", d, k, host=host)] = check(
            BiCoordinate(v=outer.v, h=outer.h, n=(d, k))
        )
    vpos = _depth_order_index(inner.vmd)
    for node, _d, _p in inner.vmd.iter_nodes():
        d, k = vpos[id(node)]
        coords[CellAddress("vmd", d, k, host=host)] = check(
            BiCoordinate(v=outer.v, h=outer.h, n=(header_rows + k, d))
        )
    for a in range(1, inner.n_rows + 1):
        for b in range(1, inner.n_cols + 1):
            coords[CellAddress("data", a, b, host=host)] = check(
                BiCoordinate(v=outer.v, h=outer.h, n=(header_rows + a, b))
            )


def is_relational(table: Table) -> bool:
    """True for plain single-header tables: empty VMD, flat HMD, no nesting."""
    table.validate()
    if not table.vmd.is_empty:
        return False
    if any(not root.is_leaf for root in table.hmd.roots):
        return False
    return not table.has_nested()


# ---------------------------------------------------------------------------
# tabjson/1 parsing and serialization
# ---------------------------------------------------------------------------

_TABLE_KEYS = {"format", "caption", "source_id", "hmd", "vmd", "data"}
_NESTED_TABLE_KEYS = _TABLE_KEYS - {"format"}
_NODE_KEYS = {"label", "children"}
_CELL_KEYS = {"kind", "text", "number", "range", "gaussian", "unit", "nested"}


def _require_keys(obj: dict, allowed: set, required: set, what: str) -> None:
    if not isinstance(obj, dict):
        raise SchemaError(f"{what} must be an object, got {type(obj).__name__}")
    extra = set(obj) - allowed
    if extra:
        raise SchemaError(f"{what} has unknown fields {sorted(extra)}")
    missing = required - set(obj)
    if missing:
        raise SchemaError(f"{what} is missing fields {sorted(missing)}")


def _parse_decimal(value, what: str) -> Decimal:
    if isinstance(value, Decimal):
        return value
    if isinstance(value, bool) or not isinstance(value, (int, str)):
        raise SchemaError(f"{what} must be a number or decimal string")
    try:
        return Decimal(value)
    except InvalidOperation as exc:
        raise ValueError(f"malformed number in {what}: {value!r}") from exc


def _parse_node(obj, what: str) -> HeaderNode:
    _require_keys(obj, _NODE_KEYS, {"label"}, what)
    label = obj["label"]
    if not isinstance(label, str):
        raise SchemaError(f"{what}.label must be a string")
    children = obj.get("children", [])
    if not isinstance(children, list):
        raise SchemaError(f"{what}.children must be a list")
    return HeaderNode(
        label=label,
        children=[_parse_node(c, f"{what}.children[{k}]") for k, c in enumerate(children)],
    )


def _parse_pair(value, what: str) -> tuple[Decimal, Decimal]:
    if not isinstance(value, list) or len(value) != 2:
        raise SchemaError(f"{what} must be a two-element array")
    return (_parse_decimal(value[0], what), _parse_decimal(value[1], what))


def _parse_cell(obj, what: str, allow_nested: bool) -> Cell:
    _require_keys(obj, _CELL_KEYS, {"kind"}, what)
    kind = obj["kind"]
    if kind not in CELL_KINDS:
        raise SchemaError(f"{what}.kind {kind!r} is not one of {CELL_KINDS}")
    text = obj.get("text", "")
    if not isinstance(text, str):
        raise SchemaError(f"{what}.text must be a string")
    cell = Cell(kind=kind, text=text)
    if "number" in obj:
        cell.number = _parse_decimal(obj["number"], f"{what}.number")
    if "range" in obj:
        cell.range = _parse_pair(obj["range"], f"{what}.range")
    if "gaussian" in obj:
        cell.gaussian = _parse_pair(obj["gaussian"], f"{what}.gaussian")
    if "unit" in obj:
        if obj["unit"] is not None and obj["unit"] not in UNIT_CLASSES:
            raise SchemaError(f"{what}.unit {obj['unit']!r} unknown")
        cell.unit = obj["unit"]
    if "nested" in obj:
        if not allow_nested:
            raise ShapeError(f"{what}: nesting deeper than one level")
        cell.nested = _parse_table_obj(obj["nested"], f"{what}.nested", nested=True)
    cell.validate(allow_nested=allow_nested)
    return cell


def _parse_table_obj(obj, what: str, nested: bool = False) -> Table:
    allowed = _NESTED_TABLE_KEYS if nested else _TABLE_KEYS
    required = {"caption", "hmd", "vmd", "data"} | (set() if nested else {"format"})
    _require_keys(obj, allowed, required, what)
    if not nested and obj["format"] != TABJSON_FORMAT:
        raise SchemaError(f"unsupported format {obj['format']!r}, expected {TABJSON_FORMAT!r}")
    if not isinstance(obj["caption"], str):
        raise SchemaError(f"{what}.caption must be a string")
    source_id = obj.get("source_id", "")
    if not isinstance(source_id, str):
        raise SchemaError(f"{what}.source_id must be a string")
    for axis in ("hmd", "vmd"):
        if not isinstance(obj[axis], list):
            raise SchemaError(f"{what}.{axis} must be a list of nodes")
    hmd = HeaderTree([_parse_node(n, f"{what}.hmd[{k}]") for k, n in enumerate(obj["hmd"])])
    vmd = HeaderTree([_parse_node(n, f"{what}.vmd[{k}]") for k, n in enumerate(obj["vmd"])])
    if not isinstance(obj["data"], list):
        raise SchemaError(f"{what}.data must be a list of rows")
    data = []
    for i, row in enumerate(obj["data"]):
        if not isinstance(row, list):
            raise SchemaError(f"{what}.data[{i}] must be a list of cells")
        data.append(
            [
                _parse_cell(c, f"{what}.data[{i}][{j}]", allow_nested=not nested)
                for j, c in enumerate(row)
            ]
        )
    table = Table(caption=obj["caption"], hmd=hmd, vmd=vmd, data=data, source_id=source_id)
    table.validate(allow_nested=not nested)
    return table


def parse_table(json_text: str) -> Table:
    """Parse canonical tabjson/1 text into a validated Table."""
    try:
        obj = json.loads(json_text, parse_float=Decimal)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"not valid JSON: {exc}") from exc
    return _parse_table_obj(obj, "table")


def _node_obj(node: HeaderNode) -> dict:
    out: dict = {"label": node.label}
    if node.children:
        out["children"] = [_node_obj(c) for c in node.children]
    return out


def _cell_obj(cell: Cell) -> dict:
    out: dict = {"kind": cell.kind, "text": cell.text}
    if cell.number is not None:
        out["number"] = str(cell.number)
    if cell.range is not None:
        out["range"] = [str(cell.range[0]), str(cell.range[1])]
    if cell.gaussian is not None:
        out["gaussian"] = [str(cell.gaussian[0]), str(cell.gaussian[1])]
    if cell.unit is not None:
        out["unit"] = cell.unit
    if cell.nested is not None:
        out["nested"] = _table_obj(cell.nested, nested=True)
    return out


def _table_obj(table: Table, nested: bool = False) -> dict:
    out: dict = {} if nested else {"format": TABJSON_FORMAT}
    out["caption"] = table.caption
    out["source_id"] = table.source_id
    out["hmd"] = [_node_obj(n) for n in table.hmd.roots]
    out["vmd"] = [_node_obj(n) for n in table.vmd.roots]
    out["data"] = [[_cell_obj(c) for c in row] for row in table.data]
    return out


def serialize_table(table: Table) -> str:
    """Canonical tabjson/1 text; parse(serialize(t)) reproduces t exactly."""
    return json.dumps(_table_obj(table), ensure_ascii=False, sort_keys=True)
