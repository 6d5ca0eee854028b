import json

import pytest
from hypothesis import given, settings, strategies as st

from tabbin.errors import SchemaError, ShapeError
from tabbin.tables import (
    BiCoordinate,
    Cell,
    CellAddress,
    HeaderNode,
    HeaderTree,
    Table,
    assign_coordinates,
    is_relational,
    parse_table,
    serialize_table,
)

from conftest import NESTED_JSON, TABLE2_JSON, leaf, num, s, table_json


class TestParse:
    def test_relational_sample(self, table2):
        assert table2.n_rows == 3
        assert table2.n_cols == 3
        assert table2.vmd.is_empty
        assert all(root.is_leaf for root in table2.hmd.roots)
        assert table2.cell(1, 3).text == "Engineer"
        assert table2.cell(1, 2).number == 24

    def test_empty_data_grid_rejected(self):
        text = table_json("x", [leaf("a")], [], [])
        with pytest.raises(ShapeError):
            parse_table(text)

    def test_ragged_grid_rejected(self):
        text = table_json("x", [leaf("a"), leaf("b")], [], [[s("1"), s("2")], [s("3")]])
        with pytest.raises(ShapeError):
            parse_table(text)

    def test_vmd_leaf_count_mismatch(self):
        text = table_json("x", [leaf("a")], [leaf("r1"), leaf("r2")], [[s("1")]])
        with pytest.raises(ShapeError):
            parse_table(text)

    def test_unknown_field_rejected(self):
        obj = json.loads(TABLE2_JSON)
        obj["surprise"] = 1
        with pytest.raises(SchemaError):
            parse_table(json.dumps(obj))

    def test_missing_format_rejected(self):
        obj = json.loads(TABLE2_JSON)
        del obj["format"]
        with pytest.raises(SchemaError):
            parse_table(json.dumps(obj))

    def test_wrong_version_rejected(self):
        obj = json.loads(TABLE2_JSON)
        obj["format"] = "tabjson/9"
        with pytest.raises(SchemaError):
            parse_table(json.dumps(obj))

    def test_range_order_rejected(self):
        cell = {"kind": "range", "text": "30-20", "range": ["30", "20"]}
        text = table_json("x", [leaf("a")], [], [[cell]])
        with pytest.raises(ValueError):
            parse_table(text)

    def test_malformed_number_rejected(self):
        text = table_json("x", [leaf("a")], [], [[num("x", "2x")]])
        with pytest.raises(ValueError):
            parse_table(text)

    def test_double_nesting_rejected(self):
        inner = {
            "caption": "",
            "source_id": "",
            "hmd": [leaf("a")],
            "vmd": [],
            "data": [[{"kind": "nested", "text": "", "nested": {
                "caption": "", "source_id": "", "hmd": [leaf("b")], "vmd": [],
                "data": [[s("x")]]}}]],
        }
        text = table_json("x", [leaf("a")], [], [[{"kind": "nested", "text": "", "nested": inner}]])
        with pytest.raises(ShapeError):
            parse_table(text)

    def test_nested_round_trip(self, nested_table):
        text = serialize_table(nested_table)
        again = parse_table(text)
        assert serialize_table(again) == text
        assert again.cell(1, 3).kind == "nested"
        assert again.cell(1, 3).nested.n_cols == 2

    def test_decimal_strings_accepted(self):
        text = table_json("x", [leaf("a")], [], [[num("1.50", "1.50")]])
        t = parse_table(text)
        assert str(t.cell(1, 1).number) == "1.50"


class TestCoordinates:
    def test_relational_reduces_to_cartesian(self, table2):
        coords = assign_coordinates(table2)
        engineer = coords[CellAddress("data", 1, 3)]
        assert engineer == BiCoordinate(v=(0, 1), h=(1, 3), n=(0, 0))

    def test_pair_of_pairs_representable(self):
        c = BiCoordinate(v=(1, 3), h=(2, 7))
        assert c.components() == (1, 3, 2, 7, 0, 0)

    def test_header_node_coordinates(self):
        hmd = [
            {"label": "p", "children": [leaf("a"), leaf("b")]},
            leaf("c"),
        ]
        t = parse_table(table_json("x", hmd, [], [[s("1"), s("2"), s("3")]]))
        coords = assign_coordinates(t)
        assert coords[CellAddress("hmd", 1, 1)].h == (1, 1)  # parent "p"
        assert coords[CellAddress("hmd", 1, 2)].h == (1, 2)  # root leaf "c"
        assert coords[CellAddress("hmd", 2, 1)].h == (2, 1)  # child "a"
        assert coords[CellAddress("hmd", 2, 2)].h == (2, 2)  # child "b"

    def test_leaf_depth_matches_tree_walk_oracle(self):
        # leaves at depths 2 and 3 in a three-level header
        hmd = [
            {
                "label": "top",
                "children": [
                    {"label": "mid", "children": [leaf("deep1"), leaf("deep2")]},
                    leaf("shallow"),
                ],
            }
        ]
        t = parse_table(
            table_json("x", hmd, [], [[s("a"), s("b"), s("c")], [s("d"), s("e"), s("f")]])
        )

        def walk_depths(nodes, depth):
            out = []
            for n in nodes:
                kids = n.get("children", [])
                if kids:
                    out.extend(walk_depths(kids, depth + 1))
                else:
                    out.append(depth)
            return out

        oracle = walk_depths(hmd, 1)  # depth per leaf index, in order
        coords = assign_coordinates(t)
        for i in range(1, t.n_rows + 1):
            for j in range(1, t.n_cols + 1):
                assert coords[CellAddress("data", i, j)].h[0] == oracle[j - 1]
                assert coords[CellAddress("data", i, j)].h[1] == j

    def test_nested_positions(self, nested_table):
        coords = assign_coordinates(nested_table)
        host = (1, 3)
        outer = coords[CellAddress("data", 1, 3)]
        # nested header occupies row 1; data rows shift below it
        assert coords[CellAddress("hmd", 1, 1, host=host)].n == (1, 1)
        assert coords[CellAddress("hmd", 1, 2, host=host)].n == (1, 2)
        assert coords[CellAddress("data", 1, 1, host=host)].n == (2, 1)
        assert coords[CellAddress("data", 2, 2, host=host)].n == (3, 2)
        for addr in (CellAddress("data", 1, 1, host=host), CellAddress("hmd", 1, 1, host=host)):
            assert coords[addr].v == outer.v
            assert coords[addr].h == outer.h

    def test_totality(self, nested_table):
        coords = assign_coordinates(nested_table)
        # outer: 6 data cells + 3 hmd leaves; nested: 4 data cells + 2 leaves
        assert len(coords) == 6 + 3 + 4 + 2
        assert all(isinstance(c, BiCoordinate) for c in coords.values())

    def test_overflow(self):
        rows = [[s(f"r{i}")] for i in range(300)]
        t = parse_table(table_json("x", [leaf("a")], [], rows))
        with pytest.raises(OverflowError):
            assign_coordinates(t)

    def test_nesting_bound(self, nested_table):
        coords = assign_coordinates(nested_table)
        for addr, c in coords.items():
            if addr.host is None:
                assert c.n == (0, 0)
            else:
                assert c.n != (0, 0)


class TestIsRelational:
    def test_flat_table(self, table2):
        assert is_relational(table2)

    def test_nested_cell_disqualifies(self, nested_table):
        assert not is_relational(nested_table)

    def test_vmd_disqualifies(self):
        t = parse_table(table_json("x", [leaf("a")], [leaf("r1")], [[s("1")]]))
        assert not is_relational(t)

    def test_deep_hmd_disqualifies(self):
        hmd = [{"label": "p", "children": [leaf("a"), leaf("b")]}]
        t = parse_table(table_json("x", hmd, [], [[s("1"), s("2")]]))
        assert not is_relational(t)


# -- property tests over generated tables ------------------------------------

_words = st.sampled_from(["alpha", "beta", "gamma", "delta", "eps", "x y", "20.3", ""])


def _cell_strategy(allow_nested):
    plain = st.builds(lambda t: Cell(kind="string", text=t), _words)
    number = st.builds(
        lambda v: Cell(kind="number", text=str(v), number=v),
        st.decimals(min_value=-1000, max_value=1000, allow_nan=False, allow_infinity=False, places=2),
    )
    empty = st.just(Cell(kind="empty"))
    options = [plain, number, empty]
    if allow_nested:
        options.append(
            st.builds(
                lambda t: Cell(kind="nested", nested=t),
                _table_strategy(allow_nested=False),
            )
        )
    return st.one_of(options)


def _table_strategy(allow_nested=True):
    def build(n_rows, n_cols, cells, with_vmd):
        hmd = HeaderTree([HeaderNode(f"h{j}") for j in range(n_cols)])
        vmd = HeaderTree([HeaderNode(f"r{i}") for i in range(n_rows)] if with_vmd else [])
        grid = [[cells[(i * n_cols + j) % len(cells)] for j in range(n_cols)] for i in range(n_rows)]
        return Table(caption="c", hmd=hmd, vmd=vmd, data=grid, source_id="gen")

    return st.builds(
        build,
        st.integers(1, 3),
        st.integers(1, 3),
        st.lists(_cell_strategy(allow_nested), min_size=1, max_size=5),
        st.booleans(),
    )


@settings(max_examples=40, deadline=None)
@given(_table_strategy())
def test_serialize_parse_round_trip(table):
    table.validate()
    text = serialize_table(table)
    assert serialize_table(parse_table(text)) == text


@settings(max_examples=40, deadline=None)
@given(_table_strategy(allow_nested=False))
def test_cartesian_reduction_property(table):
    if not is_relational(table):
        return
    coords = assign_coordinates(table)
    for i in range(1, table.n_rows + 1):
        for j in range(1, table.n_cols + 1):
            assert coords[CellAddress("data", i, j)] == BiCoordinate(v=(0, i), h=(1, j))
