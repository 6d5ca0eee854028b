import numpy as np
import pytest

import tabbin.autodiff as ad
from tabbin.embeddings import (
    EmbeddingWeights,
    embed_batch,
    embed_components,
    embed_token,
    records_to_arrays,
)
from tabbin.featurize import NumberFeatures, TokenRecord
from tabbin.sequences import AblationFlags
from tabbin.tables import BiCoordinate


def make_record(seed=0, is_number=True):
    rng = np.random.default_rng(seed)
    return TokenRecord(
        token_id=int(rng.integers(0, 20)),
        text="x",
        is_number=is_number,
        num=NumberFeatures(2, 1, 2, 3) if is_number else None,
        in_pos=int(rng.integers(0, 10)),
        coord=BiCoordinate((1, 2), (2, 5), (0, 0)),
        feat=(0, 1, 0, 0, 0, 0, 0, 1),
        type_id=int(rng.integers(0, 14)),
    )


def make_weights(seed=0, hidden=12, vocab=20, dtype=np.float64):
    return EmbeddingWeights(vocab, hidden, rng=np.random.default_rng(seed), dtype=dtype)


class TestComponents:
    def test_all_zero_weights_give_zero_vectors(self):
        w = make_weights()
        for t in w.tensors().values():
            t.data[:] = 0
        for vec in embed_components(make_record(), w):
            np.testing.assert_array_equal(vec, np.zeros(12))

    def test_zero_feature_vector_gives_bias_exactly(self):
        w = make_weights(3)
        rec = TokenRecord(token_id=1, text="x", feat=(0,) * 8)
        _t, _n, _c, _p, e_fmt, _ty = embed_components(rec, w)
        np.testing.assert_array_equal(e_fmt, w.fmt_bias.data)

    def test_type_lookup_matches_dense_oracle(self):
        w = make_weights(4)
        rec = make_record(1)
        onehot = np.zeros(14)
        onehot[rec.type_id] = 1
        want = onehot @ w.type.data  # dense matrix-vector oracle
        _t, _n, _c, _p, _f, e_type = embed_components(rec, w)
        np.testing.assert_allclose(e_type, want, atol=1e-12)

    def test_component_shapes(self):
        w = make_weights(hidden=24)
        comps = embed_components(make_record(), w)
        assert all(c.shape == (24,) for c in comps)
        assert w.mag.shape == (11, 6)  # quarter width, values 0..10
        assert w.coord_tables[0].shape == (256, 4)  # sixth width

    def test_number_gating(self):
        w = make_weights(5)
        rec = make_record(2, is_number=False)
        before = embed_token(rec, w)
        w.mag.data[:] += 100.0  # non-numbers must not see number tables
        np.testing.assert_array_equal(embed_token(rec, w), before)
        _t, e_num, *_ = embed_components(rec, w)
        np.testing.assert_array_equal(e_num, np.zeros(12))

    def test_hidden_must_divide_by_twelve(self):
        with pytest.raises(ValueError):
            EmbeddingWeights(vocab_size=10, hidden=10)


class TestSum:
    def test_token_embedding_is_component_sum(self):
        w = make_weights(6)
        rec = make_record(3)
        comps = embed_components(rec, w)
        np.testing.assert_array_equal(embed_token(rec, w), sum(comps))

    def test_ablated_components_drop_out(self):
        w = make_weights(7)
        rec = make_record(4)
        e_tok, e_num, e_cpos, e_tpos, _f, _ty = embed_components(rec, w)
        flags = AblationFlags(no_type=True, no_units_nesting=True)
        np.testing.assert_array_equal(embed_token(rec, w, flags), e_tok + e_num + e_cpos + e_tpos)
        np.testing.assert_allclose(
            embed_token(rec, w, AblationFlags(no_bicoords=True)),
            sum(embed_components(rec, w)) - e_tpos,
            atol=1e-15,
        )

    def test_linearity_under_weight_scaling(self):
        w = make_weights(8)
        rec = make_record(5)
        base = embed_token(rec, w)
        for t in w.tensors().values():
            t.data *= 2.5  # biases scale too
        np.testing.assert_allclose(embed_token(rec, w), 2.5 * base, rtol=1e-12)


class TestBatch:
    def test_batch_matches_per_token_path(self):
        w = make_weights(9)
        recs = [make_record(i, is_number=(i % 2 == 0)) for i in range(5)]
        arrays = records_to_arrays([recs], dtype=np.float64)
        batched = embed_batch(arrays, w).data[0]
        for i, rec in enumerate(recs):
            np.testing.assert_allclose(batched[i], embed_token(rec, w), atol=1e-12)

    def test_padding_rows_and_mask(self):
        w = make_weights(10)
        recs_a = [make_record(i) for i in range(3)]
        recs_b = [make_record(7)]
        arrays = records_to_arrays([recs_a, recs_b], dtype=np.float64)
        assert arrays.shape == (2, 3)
        np.testing.assert_array_equal(arrays.pad_mask, [[1, 1, 1], [1, 0, 0]])
        assert arrays.token_ids[1, 1] == 0  # [PAD]

    def test_gradients_flow_to_every_table(self):
        w = make_weights(11)
        recs = [make_record(i, is_number=True) for i in range(4)]
        arrays = records_to_arrays([recs], dtype=np.float64)

        def loss():
            e = embed_batch(arrays, w)
            return ad.sum_(e * e)

        err = ad.grad_check(loss, w.tensors(), samples=30)
        assert err < 1e-6

    def test_ablation_flags_in_batch(self):
        w = make_weights(12)
        recs = [make_record(2)]
        arrays = records_to_arrays([recs], dtype=np.float64)
        full = embed_batch(arrays, w).data[0, 0]
        no_type = embed_batch(arrays, w, AblationFlags(no_type=True)).data[0, 0]
        _t, _n, _c, _p, _f, e_type = embed_components(recs[0], w)
        np.testing.assert_allclose(full - no_type, e_type, atol=1e-12)
