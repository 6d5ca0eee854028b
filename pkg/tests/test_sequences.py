import json

import numpy as np
import pytest

from tabbin.errors import CellTooLargeError
from tabbin.featurize import CLS_ID, SEP_ID, VAL_ID, Vocabulary
from tabbin.pretrain import corpus_texts
from tabbin.sequences import (
    AblationFlags,
    SegmentKind,
    apply_ablation,
    build_sequences,
    build_visibility_matrix,
    rle_decode,
    sequence_to_json,
)
from tabbin.tables import ZERO_COORD, parse_table

from conftest import leaf, s, table_json


def token_texts(seq):
    return [slot.record.text for slot in seq.slots]


def find(seq, text):
    return next(i for i, slot in enumerate(seq.slots) if slot.record.text == text)


class TestBuildSequences:
    def test_relational_row_serialization(self, table2, small_vocab):
        seqs = build_sequences(table2, SegmentKind.ROW, small_vocab)
        assert len(seqs) == 1
        seq = seqs[0]
        # per row: [CLS] name [SEP] [VAL] [SEP] job [SEP]  -> 7 tokens, 3 rows
        assert len(seq) == 21
        assert sum(1 for t in seq.tokens if t.token_id == CLS_ID) == 3
        assert sum(1 for t in seq.tokens if t.token_id == SEP_ID) == 9
        assert token_texts(seq)[:7] == ["[CLS]", "sam", "[SEP]", "24", "[SEP]", "engineer", "[SEP]"]
        assert seq.units_covered == [0, 1, 2]

    def test_single_cell_table(self, small_vocab):
        t = parse_table(table_json("x", [leaf("a")], [], [[s("colon")]]))
        for segment in (SegmentKind.ROW, SegmentKind.COL):
            seq = build_sequences(t, segment, small_vocab)[0]
            assert token_texts(seq) == ["[CLS]", "colon", "[SEP]"]

    def test_column_major_packing(self, table2, small_vocab):
        seq = build_sequences(table2, SegmentKind.COL, small_vocab)[0]
        assert token_texts(seq)[:9] == [
            "[CLS]", "sam", "[SEP]", "john", "[SEP]", "nick", "[SEP]", "[CLS]", "24",
        ]

    def test_nested_content_inlined_with_coordinates(self, nested_table, small_vocab):
        seq = build_sequences(nested_table, SegmentKind.ROW, small_vocab)[0]
        nested_slots = [sl for sl in seq.slots if sl.record.coord.n != (0, 0)]
        assert nested_slots, "nested tokens must appear in the row serialization"
        assert all(sl.record.feat[-1] == 1 for sl in nested_slots)
        # whole nested content shares the host cell unit
        assert len({sl.cell_id for sl in nested_slots}) == 1
        val = next(sl for sl in nested_slots if sl.record.token_id == VAL_ID)
        assert val.record.coord.n == (2, 1)  # first data row sits under the header row

    def test_metadata_segments(self, nested_table, small_vocab):
        hmd = build_sequences(nested_table, SegmentKind.HMD, small_vocab)
        # three flat header leaves -> three units, each [CLS] label [SEP]
        assert len(hmd) == 1
        assert sum(1 for t in hmd[0].tokens if t.token_id == CLS_ID) == 3
        assert build_sequences(nested_table, SegmentKind.VMD, small_vocab) == []

    def test_greedy_packing_keeps_cells_whole(self, small_vocab):
        rows = [[s("colon florida"), s("rectum texas")] for _ in range(40)]
        t = parse_table(table_json("x", [leaf("a"), leaf("b")], [], rows))
        seqs = build_sequences(t, SegmentKind.ROW, small_vocab, max_tokens=16)
        assert len(seqs) > 1
        for seq in seqs:
            assert len(seq) <= 16
            # a cell's tokens never straddle sequences: each cell id's
            # content is contiguous and closed by its [SEP]
            for cid in {sl.cell_id for sl in seq.slots if sl.cell_id >= 0}:
                kinds = [sl.kind for sl in seq.slots if sl.cell_id == cid]
                assert kinds[-1] == "sep" and all(k == "content" for k in kinds[:-1])

    def test_cell_too_large(self, small_vocab):
        t = parse_table(table_json("x", [leaf("a")], [], [[s("colon " * 20)]]))
        with pytest.raises(CellTooLargeError):
            build_sequences(t, SegmentKind.ROW, small_vocab, max_tokens=10)

    def test_segment_separation(self, nested_table, small_vocab):
        for segment in (SegmentKind.ROW, SegmentKind.COL):
            for seq in build_sequences(nested_table, segment, small_vocab):
                assert all(sl.path is None for sl in seq.slots)
        for seq in build_sequences(nested_table, SegmentKind.HMD, small_vocab):
            assert all(sl.path is not None for sl in seq.slots if sl.kind != "cls")


class TestVisibility:
    def test_relational_row_and_column_rules(self, table2, small_vocab):
        seq = build_sequences(table2, SegmentKind.ROW, small_vocab)[0]
        m = seq.visibility
        sam, engineer = find(seq, "sam"), find(seq, "engineer")
        lawyer, scientist = find(seq, "lawyer"), find(seq, "scientist")
        john = find(seq, "john")
        assert m[sam, engineer] == 1  # same row
        assert m[sam, lawyer] == 0  # different row and column
        assert m[sam, john] == 1  # same column
        age25 = next(
            i for i, sl in enumerate(seq.slots)
            if sl.record.token_id == VAL_ID and sl.row == 2
        )
        assert m[scientist, age25] == 1  # same row
        age24 = next(
            i for i, sl in enumerate(seq.slots)
            if sl.record.token_id == VAL_ID and sl.row == 1
        )
        assert m[age24, scientist] == 0  # cross attribute, cross row

    def test_cls_and_sep_rules(self, table2, small_vocab):
        seq = build_sequences(table2, SegmentKind.ROW, small_vocab)[0]
        m = seq.visibility
        cls_rows = [i for i, sl in enumerate(seq.slots) if sl.kind == "cls"]
        assert all(m[a, b] == 1 for a in cls_rows for b in cls_rows)
        sam = find(seq, "sam")
        assert m[cls_rows[0], sam] == 1  # own unit
        assert m[cls_rows[1], sam] == 0  # other unit's content
        sep_after_sam = sam + 1
        assert seq.slots[sep_after_sam].kind == "sep"
        engineer = find(seq, "engineer")
        assert m[sep_after_sam, engineer] == 1  # [SEP] inherits its cell

    def test_single_cell_all_ones(self, small_vocab):
        t = parse_table(table_json("x", [leaf("a")], [], [[s("colon")]]))
        seq = build_sequences(t, SegmentKind.ROW, small_vocab)[0]
        assert (seq.visibility == 1).all()

    def test_metadata_tree_visibility(self, small_vocab):
        hmd = [
            {"label": "left", "children": [leaf("alpha"), leaf("beta")]},
            {"label": "right", "children": [leaf("gamma")]},
        ]
        t = parse_table(table_json("x", hmd, [], [[s("1"), s("2"), s("3")]]))
        seq = build_sequences(t, SegmentKind.HMD, small_vocab)[0]
        m = seq.visibility
        p1, a, b, p2, c = (find(seq, x) for x in ("left", "alpha", "beta", "right", "gamma"))
        assert m[p1, a] == 1 and m[p1, b] == 1  # ancestor
        assert m[a, b] == 1  # siblings
        assert m[a, c] == 0  # cousins under different parents
        assert m[p1, p2] == 1  # roots are mutual siblings
        assert m[p1, c] == 0  # not an ancestor of the other root's child

    def test_symmetry_reflexivity_and_brute_force(self, small_vocab):
        rng = np.random.default_rng(0)
        for trial in range(6):
            n_rows, n_cols = int(rng.integers(1, 5)), int(rng.integers(1, 5))
            rows = [
                [s(f"w{rng.integers(6)} w{rng.integers(6)}") for _ in range(n_cols)]
                for _ in range(n_rows)
            ]
            t = parse_table(table_json("x", [leaf(f"h{j}") for j in range(n_cols)], [], rows))
            vocab = Vocabulary.build(corpus_texts([t]))
            for segment in (SegmentKind.ROW, SegmentKind.COL):
                for seq in build_sequences(t, segment, vocab, max_tokens=64):
                    m = seq.visibility
                    assert (m == m.T).all()
                    assert (np.diag(m) == 1).all()
                    # oracle re-derives visibility from raw grid indices
                    for i, a in enumerate(seq.slots):
                        for j, b in enumerate(seq.slots):
                            if a.kind == "cls" or b.kind == "cls":
                                if a.kind == "cls" and b.kind == "cls":
                                    want = 1
                                else:
                                    cls_s, other = (a, b) if a.kind == "cls" else (b, a)
                                    want = int(other.unit_id == cls_s.unit_id)
                            elif (a.row, a.col) == (b.row, b.col):
                                want = 1  # same cell
                            else:
                                want = int(a.row == b.row or a.col == b.col)
                            if i == j:
                                want = 1
                            assert m[i, j] == want


class TestAblation:
    def test_identity(self, table2, small_vocab):
        seq = build_sequences(table2, SegmentKind.ROW, small_vocab)[0]
        assert apply_ablation(seq, AblationFlags.none()) is seq

    def test_no_visibility(self, table2, small_vocab):
        seq = build_sequences(table2, SegmentKind.ROW, small_vocab)[0]
        out = apply_ablation(seq, AblationFlags(no_visibility=True))
        assert (out.visibility == 1).all()
        assert token_texts(out) == token_texts(seq)

    def test_no_bicoords(self, nested_table, small_vocab):
        seq = build_sequences(nested_table, SegmentKind.ROW, small_vocab)[0]
        out = apply_ablation(seq, AblationFlags(no_bicoords=True))
        assert all(sl.record.coord == ZERO_COORD for sl in out.slots)

    def test_no_units_nesting(self, nested_table, small_vocab):
        seq = build_sequences(nested_table, SegmentKind.ROW, small_vocab)[0]
        out = apply_ablation(seq, AblationFlags(no_units_nesting=True))
        assert all(sl.record.feat == (0,) * 8 for sl in out.slots)

    def test_idempotent(self, nested_table, small_vocab):
        seq = build_sequences(nested_table, SegmentKind.ROW, small_vocab)[0]
        flags = AblationFlags(no_visibility=True, no_bicoords=True, no_units_nesting=True)
        once = apply_ablation(seq, flags)
        twice = apply_ablation(once, flags)
        assert token_texts(once) == token_texts(twice)
        assert (once.visibility == twice.visibility).all()
        assert [sl.record for sl in once.slots] == [sl.record for sl in twice.slots]

    def test_from_names(self):
        flags = AblationFlags.from_names(["visibility", "coords"])
        assert flags.no_visibility and flags.no_bicoords
        assert not flags.no_type and not flags.no_units_nesting
        with pytest.raises(ValueError):
            AblationFlags.from_names(["nonsense"])


class TestDump:
    def test_jsonl_round_trip(self, nested_table, small_vocab):
        seq = build_sequences(nested_table, SegmentKind.ROW, small_vocab)[0]
        obj = json.loads(sequence_to_json(seq))
        assert obj["segment"] == "row"
        assert len(obj["tokens"]) == len(seq)
        decoded = rle_decode(obj["visibility_rle"], len(seq))
        assert (decoded == seq.visibility).all()

    def test_rebuild_matches_stored_visibility(self, table2, small_vocab):
        seq = build_sequences(table2, SegmentKind.ROW, small_vocab)[0]
        assert (build_visibility_matrix(seq) == seq.visibility).all()
