import json

import numpy as np
import pytest

from tabbin.encoder import EncoderConfig, EncoderWeights
from tabbin.embeddings import EmbeddingWeights
from tabbin.bundle import ModelBundle, SegmentModel
from tabbin.featurize import Vocabulary
from tabbin.pretrain import corpus_texts
from tabbin.sequences import SegmentKind
from tabbin.tables import parse_table


def table_json(caption, hmd, vmd, data, source_id="t"):
    return json.dumps(
        {
            "format": "tabjson/1",
            "caption": caption,
            "source_id": source_id,
            "hmd": hmd,
            "vmd": vmd,
            "data": data,
        }
    )


def leaf(label):
    return {"label": label}


def s(text):
    return {"kind": "string", "text": text}


def num(text, value, unit=None):
    cell = {"kind": "number", "text": text, "number": str(value)}
    if unit:
        cell["unit"] = unit
    return cell


TABLE2_JSON = table_json(
    "A sample relational table",
    [leaf("Name"), leaf("Age"), leaf("Job")],
    [],
    [
        [s("Sam"), num("24", 24), s("Engineer")],
        [s("John"), num("25", 25), s("Scientist")],
        [s("Nick"), num("23", 23), s("Lawyer")],
    ],
    source_id="table2",
)

# A table in the style of the nested-table figure: plain cells plus one cell
# hosting a 2x2 table whose values carry time units.
NESTED_JSON = table_json(
    "treatment outcomes",
    [leaf("site"), leaf("state"), leaf("outcome")],
    [],
    [
        [
            s("Colon"),
            s("Florida"),
            {
                "kind": "nested",
                "text": "",
                "nested": {
                    "caption": "",
                    "source_id": "",
                    "hmd": [leaf("OS"), leaf("PFS")],
                    "vmd": [],
                    "data": [
                        [num("20.3 months", "20.3", "time"), num("15 months", "15", "time")],
                        [s("bevacizumab"), s("IFL")],
                    ],
                },
            },
        ],
        [s("Rectum"), s("Texas"), s("none")],
    ],
    source_id="nested1",
)


@pytest.fixture
def table2():
    return parse_table(TABLE2_JSON)


@pytest.fixture
def nested_table():
    return parse_table(NESTED_JSON)


@pytest.fixture
def small_vocab(table2, nested_table):
    return Vocabulary.build(corpus_texts([table2, nested_table]))


def make_bundle(tables, hidden=12, layers=1, heads=2, seed=0, segments=None, flags_by_segment=None):
    """Randomly initialized (untrained) bundle over the given tables."""
    cfg = EncoderConfig(hidden=hidden, layers=layers, heads=heads)
    vocab = Vocabulary.build(corpus_texts(tables))
    bundle = ModelBundle(vocab=vocab, config=cfg)
    rng = np.random.default_rng(seed)
    for segment in segments or list(SegmentKind):
        meta = {}
        if flags_by_segment and segment in flags_by_segment:
            meta["ablations"] = flags_by_segment[segment]
        bundle.set(
            segment,
            SegmentModel(
                embedding=EmbeddingWeights(vocab.size, hidden, rng=rng),
                encoder=EncoderWeights(cfg, rng=rng),
                config=cfg,
                meta=meta,
            ),
        )
    return bundle
