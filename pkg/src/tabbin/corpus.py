"""Seeded synthetic corpus of tables with planted cluster structure.

Each topic owns a word pool and a fixed roster of column templates (string
columns double as entity catalogs; numeric templates differ in scale, unit,
and precision).  Tables sample columns from their topic's roster, so ground
truth falls out for free: table -> topic, column -> template id, string data
value -> template id.  Non-relational tables get two-level horizontal
headers plus vertical metadata; a slice of them hosts a small nested table.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from decimal import Decimal
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError
from .evaluate import GroundTruth
from .tables import Cell, HeaderNode, HeaderTree, Table, serialize_table, parse_table

DEFAULT_TOPICS: dict[str, list[str]] = {
    "oncology": ["tumor", "lesion", "biopsy", "remission", "marker", "stage", "platelet",
                 "sarcoma", "nodule", "screening", "relapse", "cohort"],
    "astronomy": ["nebula", "quasar", "orbit", "galaxy", "comet", "stellar", "parallax",
                  "aurora", "eclipse", "meteor", "pulsar", "transit"],
    "finance": ["dividend", "equity", "ledger", "portfolio", "bond", "futures", "margin",
                "audit", "currency", "broker", "yield", "escrow"],
    "botany": ["fern", "pollen", "stamen", "orchid", "moss", "seedling", "bark", "petal",
               "lichen", "spore", "sapling", "tuber"],
    "maritime": ["harbor", "vessel", "ballast", "anchor", "cargo", "tide", "buoy", "hull",
                 "rudder", "sonar", "mooring", "keel"],
}

# Header suffixes shared across topics, so a header word alone rarely pins
# down the template and data content has to carry part of the signal.
_SUFFIXES = ["name", "count", "rate", "level", "group", "score", "span", "grade"]

_UNIT_SURFACES = {
    "stats": "%",
    "length": "cm",
    "weight": "kg",
    "capacity": "ml",
    "time": "month",
    "temperature": "k",
    "pressure": "bar",
}
_UNIT_CYCLE = ["time", "weight", "stats", "length", "capacity", "pressure", "temperature"]


@dataclass(frozen=True)
class ColumnTemplate:
    template_id: str
    kind: str  # "string" | "number" | "range" | "gaussian"
    header: str
    anchor: str  # word all values of a string template share
    pool: tuple[str, ...] = ()
    scale: int = 1
    decimals: int = 0
    unit: Optional[str] = None


@dataclass
class CorpusSpec:
    """Generator knobs; fractions are per-table probabilities."""

    n_tables: int = 200
    topics: dict[str, list[str]] = field(default_factory=lambda: dict(DEFAULT_TOPICS))
    fraction_nonrelational: float = 0.4
    fraction_nested: float = 0.1
    fraction_numeric: float = 0.4
    hmd_depth: tuple[int, int] = (1, 2)
    vmd_depth: tuple[int, int] = (1, 2)
    rows_mean: float = 12.0
    cols_mean: float = 10.0
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("fraction_nonrelational", "fraction_nested", "fraction_numeric"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if self.hmd_depth[0] < 1:
            raise ConfigError("hmd depth must be at least 1")
        if self.n_tables < 1:
            raise ConfigError("n_tables must be positive")
        if not self.topics:
            raise ConfigError("at least one topic is required")

    def to_dict(self) -> dict:
        return {
            "n_tables": self.n_tables,
            "topics": self.topics,
            "fraction_nonrelational": self.fraction_nonrelational,
            "fraction_nested": self.fraction_nested,
            "fraction_numeric": self.fraction_numeric,
            "hmd_depth": list(self.hmd_depth),
            "vmd_depth": list(self.vmd_depth),
            "rows_mean": self.rows_mean,
            "cols_mean": self.cols_mean,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "CorpusSpec":
        obj = dict(obj)
        for key in ("hmd_depth", "vmd_depth"):
            if key in obj:
                obj[key] = tuple(obj[key])
        return cls(**obj)


def topic_templates(topic: str, words: list[str]) -> list[ColumnTemplate]:
    """Ten deterministic templates per topic: six string, four numeric."""
    out: list[ColumnTemplate] = []
    kinds = ["string", "string", "string", "number", "number", "string",
             "range", "string", "gaussian", "string"]
    num_seen = 0
    for k, kind in enumerate(kinds):
        word = words[k % len(words)]
        header = f"{word} {_SUFFIXES[k % len(_SUFFIXES)]}"
        if kind == "string":
            out.append(
                ColumnTemplate(
                    template_id=f"{topic}.{k}",
                    kind=kind,
                    header=header,
                    anchor=word,
                    pool=tuple(words),
                )
            )
        else:
            unit = _UNIT_CYCLE[num_seen % len(_UNIT_CYCLE)]
            out.append(
                ColumnTemplate(
                    template_id=f"{topic}.{k}",
                    kind=kind,
                    header=header,
                    anchor=word,
                    scale=10 ** (num_seen % 4),
                    decimals=num_seen % 3,
                    unit=unit,
                )
            )
            num_seen += 1
    return out


def _value_cell(tmpl: ColumnTemplate, rng: np.random.Generator) -> Cell:
    if tmpl.kind == "string":
        other = tmpl.pool[int(rng.integers(len(tmpl.pool)))]
        return Cell(kind="string", text=f"{tmpl.anchor} {other}")
    surface = _UNIT_SURFACES[tmpl.unit]
    if tmpl.kind == "number":
        raw = tmpl.scale * (0.5 + rng.random())
        num = Decimal(f"{raw:.{tmpl.decimals}f}")
        return Cell(kind="number", text=f"{num} {surface}", number=num, unit=tmpl.unit)
    if tmpl.kind == "range":
        lo = tmpl.scale * (0.2 + 0.4 * rng.random())
        hi = lo + tmpl.scale * (0.2 + 0.6 * rng.random())
        lo_d = Decimal(f"{lo:.{tmpl.decimals}f}")
        hi_d = Decimal(f"{hi:.{tmpl.decimals}f}")
        return Cell(
            kind="range",
            text=f"{lo_d}-{hi_d} {surface}",
            range=(lo_d, hi_d),
            unit=tmpl.unit,
        )
    mean = Decimal(f"{tmpl.scale * (0.5 + rng.random()):.{tmpl.decimals}f}")
    sd = Decimal(f"{tmpl.scale * 0.1 * rng.random():.{tmpl.decimals}f}")
    return Cell(kind="gaussian", text=f"{mean} ± {sd} {surface}", gaussian=(mean, sd), unit=tmpl.unit)


def _nested_table(topic_words: list[str], rng: np.random.Generator) -> Table:
    w = lambda: topic_words[int(rng.integers(len(topic_words)))]
    hmd = HeaderTree([HeaderNode(w()), HeaderNode(w())])
    data = []
    for _ in range(2):
        num = Decimal(f"{10 * (0.5 + rng.random()):.1f}")
        data.append(
            [
                Cell(kind="string", text=f"{w()} {w()}"),
                Cell(kind="number", text=f"{num} month", number=num, unit="time"),
            ]
        )
    return Table(caption="", hmd=hmd, vmd=HeaderTree([]), data=data)


def _grouped_tree(labels: list[str], group_words: list[str], rng: np.random.Generator) -> HeaderTree:
    """Two-level tree: consecutive leaves under shared parent labels."""
    roots: list[HeaderNode] = []
    i = 0
    g = 0
    while i < len(labels):
        width = int(rng.integers(2, 4))
        children = [HeaderNode(lbl) for lbl in labels[i : i + width]]
        parent_word = group_words[g % len(group_words)]
        roots.append(HeaderNode(f"{parent_word} group", children=children))
        i += width
        g += 1
    return HeaderTree(roots)


def generate_corpus(spec: CorpusSpec) -> tuple[list[Table], dict[str, GroundTruth]]:
    """Deterministic corpus plus ground truth for the three tasks."""
    rng = np.random.default_rng(spec.seed)
    topics = sorted(spec.topics)
    rosters = {t: topic_templates(t, spec.topics[t]) for t in topics}
    tables: list[Table] = []
    tc: dict[str, str] = {}
    cc: dict[str, str] = {}
    ec: dict[str, str] = {}

    for t_idx in range(spec.n_tables):
        topic = topics[t_idx % len(topics)]
        words = spec.topics[topic]
        roster = rosters[topic]
        source_id = f"{topic}-{t_idx:04d}"
        complex_table = rng.random() < spec.fraction_nonrelational
        if complex_table:
            n_rows = max(3, int(round(rng.normal(spec.rows_mean, 2.0))))
            n_cols = int(np.clip(round(rng.normal(spec.cols_mean, 1.5)), 4, len(roster)))
        else:
            n_rows = max(2, int(round(rng.normal(6.0, 2.0))))
            n_cols = int(rng.integers(3, 6))

        numeric_templates = [t for t in roster if t.kind != "string"]
        string_templates = [t for t in roster if t.kind == "string"]
        n_numeric = min(len(numeric_templates), int(round(n_cols * spec.fraction_numeric)))
        n_string = min(len(string_templates), n_cols - n_numeric)
        n_numeric = n_cols - n_string  # backfill if strings ran short
        chosen = [
            numeric_templates[int(i)]
            for i in rng.choice(len(numeric_templates), size=n_numeric, replace=False)
        ] + [
            string_templates[int(i)]
            for i in rng.choice(len(string_templates), size=n_string, replace=False)
        ]
        chosen = [chosen[int(i)] for i in rng.permutation(len(chosen))]

        data = []
        for i in range(n_rows):
            row = []
            for tmpl in chosen:
                if rng.random() < 0.03:
                    row.append(Cell(kind="empty"))
                else:
                    row.append(_value_cell(tmpl, rng))
            data.append(row)

        if complex_table:
            hmd = (
                _grouped_tree([t.header for t in chosen], words, rng)
                if spec.hmd_depth[1] > 1
                else HeaderTree([HeaderNode(t.header) for t in chosen])
            )
            row_labels = [f"{words[int(rng.integers(len(words)))]} {i + 1}" for i in range(n_rows)]
            if spec.vmd_depth[1] > 1 and rng.random() < 0.5:
                vmd = _grouped_tree(row_labels, words[::-1], rng)
            else:
                vmd = HeaderTree([HeaderNode(lbl) for lbl in row_labels])
            p_nested = spec.fraction_nested / max(spec.fraction_nonrelational, 1e-9)
            if rng.random() < min(1.0, p_nested):
                i = int(rng.integers(n_rows))
                j = int(rng.integers(n_cols))
                data[i][j] = Cell(kind="nested", nested=_nested_table(words, rng))
        else:
            hmd = HeaderTree([HeaderNode(t.header) for t in chosen])
            vmd = HeaderTree([])

        caption = f"{topic} {words[t_idx % len(words)]} summary"
        table = Table(caption=caption, hmd=hmd, vmd=vmd, data=data, source_id=source_id)
        table.validate()
        tables.append(table)

        tc[source_id] = topic
        for j, tmpl in enumerate(chosen, start=1):
            cc[f"{source_id}#c{j}"] = tmpl.template_id
            if tmpl.kind == "string":
                for i in range(1, min(n_rows, 3) + 1):
                    if data[i - 1][j - 1].kind == "string":
                        ec[f"{source_id}#r{i}c{j}"] = tmpl.template_id

    truths = {"tc": GroundTruth(tc), "cc": GroundTruth(cc), "ec": GroundTruth(ec)}
    return tables, truths


def write_corpus(tables: list[Table], truths: dict[str, GroundTruth], out_dir, spec: Optional[CorpusSpec] = None) -> None:
    out = Path(out_dir)
    (out / "tables").mkdir(parents=True, exist_ok=True)
    for table in tables:
        path = out / "tables" / f"{table.source_id}.json"
        path.write_text(serialize_table(table), encoding="utf-8")
    for task, truth in truths.items():
        truth.save(out / f"truth_{task}.csv")
    if spec is not None:
        (out / "corpus_spec.json").write_text(
            json.dumps(spec.to_dict(), ensure_ascii=False, sort_keys=True, indent=1),
            encoding="utf-8",
        )


def load_corpus(corpus_dir) -> tuple[list[Table], dict[str, GroundTruth]]:
    root = Path(corpus_dir)
    tables = []
    for path in sorted((root / "tables").glob("*.json")):
        tables.append(parse_table(path.read_text(encoding="utf-8")))
    truths = {}
    for task in ("tc", "cc", "ec"):
        path = root / f"truth_{task}.csv"
        if path.exists():
            truths[task] = GroundTruth.load(path)
    return tables, truths
