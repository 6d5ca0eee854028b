"""Clustering downstream tasks and their ranking metrics.

Column clustering embeds every column (header ++ data composite), splits the
pool into textual / numerical / range strata, blocks candidate pairs with
random-hyperplane LSH, ranks by cosine, and scores AP@k against column
labels.  Table clustering ranks tables against each table's embedding;
entity clustering ranks data values under the column model.  Metrics are
mean average precision and mean reciprocal rank at a cutoff (default 20).
"""

from __future__ import annotations

import csv
import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .bundle import ModelBundle
from .composites import cell_value_embedding, column_composites, table_composite
from .errors import (
    ConfigError,
    EmptyExemplarError,
    NoRelevantError,
    ZeroVectorError,
)
from .sequences import SegmentKind
from .tables import Table


def worker_count() -> int:
    """Worker cap from TABBIN_THREADS (default 1: fully sequential)."""
    try:
        return max(1, int(os.environ.get("TABBIN_THREADS", "1")))
    except ValueError:
        return 1


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity; raises ZeroVectorError on a zero input."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ZeroVectorError("cosine similarity of a zero vector is undefined")
    return float(a @ b / (na * nb))


@dataclass
class RankedList:
    """Top-k items for one query, scores non-increasing, query excluded."""

    query: str
    entries: list[tuple[str, float]]
    k: int = 20

    def __post_init__(self) -> None:
        ids = [i for i, _ in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("ranked list contains duplicate item ids")
        if self.query in ids:
            raise ValueError("query may not appear in its own ranked list")
        scores = [s for _, s in self.entries]
        if any(s0 < s1 for s0, s1 in zip(scores, scores[1:])):
            raise ValueError("ranked-list scores must be non-increasing")


class GroundTruth:
    """item id -> cluster label; total over the evaluated universe."""

    def __init__(self, labels: dict[str, str]):
        self.labels = dict(labels)

    def __getitem__(self, item: str) -> str:
        return self.labels[item]

    def __contains__(self, item: str) -> bool:
        return item in self.labels

    def __len__(self) -> int:
        return len(self.labels)

    def items(self):
        return self.labels.items()

    def restricted(self, ids: Iterable[str]) -> "GroundTruth":
        keep = set(ids)
        return GroundTruth({i: l for i, l in self.labels.items() if i in keep})

    def relevant_count(self, query: str) -> int:
        label = self.labels[query]
        return sum(1 for i, l in self.labels.items() if l == label and i != query)

    @classmethod
    def load(cls, path) -> "GroundTruth":
        labels = {}
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header != ["item_id", "cluster_label"]:
                raise ConfigError(f"unexpected ground-truth header {header}")
            for row in reader:
                labels[row[0]] = row[1]
        return cls(labels)

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["item_id", "cluster_label"])
            for item in sorted(self.labels):
                writer.writerow([item, self.labels[item]])


def lsh_block(
    vectors: dict[str, np.ndarray],
    planes: int = 64,
    bands: int = 16,
    rows: int = 4,
    seed: int = 0,
) -> set[tuple[str, str]]:
    """Random-hyperplane candidate generation.

    Ids whose sign signatures agree on any full band become a candidate
    pair.  A pair at angle theta collides with probability
    1 - (1 - (1 - theta/pi)**rows)**bands; at cosine 0.9 with the 16x4
    default this exceeds 0.999995 per pair.
    """
    if planes != bands * rows:
        raise ConfigError(f"planes ({planes}) must equal bands*rows ({bands}*{rows})")
    ids = sorted(vectors)
    if not ids:
        return set()
    dim = vectors[ids[0]].shape[0]
    rng = np.random.default_rng(seed)
    hyperplanes = rng.normal(size=(planes, dim))
    mat = np.stack([np.asarray(vectors[i], dtype=np.float64) for i in ids])
    bits = (mat @ hyperplanes.T) > 0.0  # (n, planes)
    candidates: set[tuple[str, str]] = set()
    for band in range(bands):
        buckets: dict[bytes, list[str]] = {}
        sig = bits[:, band * rows : (band + 1) * rows]
        for row_i, item in enumerate(ids):
            buckets.setdefault(sig[row_i].tobytes(), []).append(item)
        for members in buckets.values():
            for i in range(len(members)):
                for j in range(i + 1, len(members)):
                    candidates.add((members[i], members[j]))
    return candidates


def _rank(
    query_vec: np.ndarray,
    pool: dict[str, np.ndarray],
    k: int,
    exclude: frozenset[str],
    query_name: str,
) -> RankedList:
    scored = []
    for item in pool:
        if item in exclude:
            continue
        scored.append((-cosine(query_vec, pool[item]), item))
    scored.sort()  # ascending negative score, then ascending id
    entries = [(item, -negscore) for negscore, item in scored[:k]]
    return RankedList(query=query_name, entries=entries, k=k)


def topk_cluster(
    query: str,
    pool: dict[str, np.ndarray],
    k: int = 20,
    candidates: Optional[Iterable[str]] = None,
) -> RankedList:
    """Highest-cosine items for one query, ties broken by ascending id."""
    if query not in pool:
        raise KeyError(f"query {query!r} not in pool")
    sub = pool if candidates is None else {i: pool[i] for i in candidates if i in pool}
    return _rank(pool[query], sub, k, frozenset([query]), query)


def centroid_cluster(
    exemplars: Sequence[np.ndarray],
    pool: dict[str, np.ndarray],
    k: int = 20,
    query_name: str = "centroid",
    exclude: Iterable[str] = (),
) -> RankedList:
    """Rank the pool against the mean of the exemplar vectors."""
    if len(exemplars) == 0:
        raise EmptyExemplarError("centroid of zero exemplars")
    centroid = np.mean(np.stack([np.asarray(e, dtype=np.float64) for e in exemplars]), axis=0)
    if np.linalg.norm(centroid) == 0.0:
        raise ZeroVectorError("exemplars average to the zero vector")
    return _rank(centroid, pool, k, frozenset(exclude), query_name)


def ap_at_k(ranked: RankedList, truth: GroundTruth, k: int = 20) -> float:
    """Average precision at k with denominator min(k, relevant in universe).

    Raises NoRelevantError when the query's label has no other member in
    the truth universe (such queries are excluded from MAP and counted)."""
    total_relevant = truth.relevant_count(ranked.query)
    if total_relevant == 0:
        raise NoRelevantError(f"query {ranked.query!r} has no relevant items")
    label = truth[ranked.query]
    hits = 0
    precision_sum = 0.0
    for rank, (item, _score) in enumerate(ranked.entries[:k], start=1):
        if truth[item] == label:
            hits += 1
            precision_sum += hits / rank
    return precision_sum / min(k, total_relevant)


def reciprocal_rank(ranked: RankedList, truth: GroundTruth, k: int = 20) -> float:
    label = truth[ranked.query]
    for rank, (item, _score) in enumerate(ranked.entries[:k], start=1):
        if truth[item] == label:
            return 1.0 / rank
    return 0.0


def map_mrr(
    lists: Sequence[RankedList], truth: GroundTruth, k: int = 20
) -> tuple[float, float]:
    """(MAP, MRR) over queries that have at least one relevant item."""
    if not lists:
        raise ValueError("map_mrr needs at least one ranked list")
    aps, rrs = [], []
    for ranked in lists:
        try:
            aps.append(ap_at_k(ranked, truth, k))
        except NoRelevantError:
            continue
        rrs.append(reciprocal_rank(ranked, truth, k))
    if not aps:
        return 0.0, 0.0
    return float(np.mean(aps)), float(np.mean(rrs))


# ---------------------------------------------------------------------------
# Task pipelines
# ---------------------------------------------------------------------------

_EC_ID_RE = re.compile(r"^(?P<table>.+)#r(?P<row>\d+)c(?P<col>\d+)$")


def _embed_many(fn, keys: Sequence, workers: Optional[int] = None) -> list:
    workers = workers or worker_count()
    if workers <= 1:
        return [fn(k) for k in keys]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, keys))


def column_kind(table: Table, j: int) -> str:
    """Stratum of a column: strictly numerical, strictly ranges, else text."""
    kinds = {c.kind for c in (table.cell(i, j) for i in range(1, table.n_rows + 1)) if c.kind != "empty"}
    if kinds and kinds <= {"number", "gaussian"}:
        return "numerical"
    if kinds == {"range"}:
        return "ranges"
    return "textual"


@dataclass
class TaskReport:
    task: str
    strata: list[dict]
    config: dict = field(default_factory=dict)
    seed: int = 0

    def to_dict(self) -> dict:
        return {"task": self.task, "strata": self.strata, "config": self.config, "seed": self.seed}

    def overall_map(self) -> float:
        weights = [(s["map"], s["n_queries"]) for s in self.strata if s["n_queries"]]
        if not weights:
            return 0.0
        total = sum(n for _m, n in weights)
        return sum(m * n for m, n in weights) / total


@dataclass
class EvalOptions:
    k: int = 20
    lsh_planes: int = 64
    lsh_bands: int = 16
    lsh_rows: int = 4
    use_lsh: bool = True
    tc_recipe: str = "tblcomp1"
    tc_mode: str = "per_table"  # or "centroid"
    seed: int = 0
    workers: Optional[int] = None


def _score_stratum(
    name: str,
    pool: dict[str, np.ndarray],
    truth: GroundTruth,
    opts: EvalOptions,
    block: bool,
) -> dict:
    sub_truth = truth.restricted(pool)
    n_skipped = 0
    lists = []
    candidates_of: dict[str, set[str]] = {}
    if block and opts.use_lsh and len(pool) > 2:
        pairs = lsh_block(pool, opts.lsh_planes, opts.lsh_bands, opts.lsh_rows, opts.seed)
        for a, b in pairs:
            candidates_of.setdefault(a, set()).add(b)
            candidates_of.setdefault(b, set()).add(a)
    for query in sorted(pool):
        if sub_truth.relevant_count(query) == 0:
            n_skipped += 1
            continue
        cands = candidates_of.get(query) if (block and opts.use_lsh and len(pool) > 2) else None
        ranked = topk_cluster(query, pool, k=opts.k, candidates=cands)
        lists.append(ranked)
    if lists:
        m, r = map_mrr(lists, sub_truth, k=opts.k)
    else:
        m, r = 0.0, 0.0
    return {
        "name": name,
        "map": round(m, 6),
        "mrr": round(r, 6),
        "n_queries": len(lists),
        "n_skipped": n_skipped,
    }


def run_task(
    task: str,
    corpus: list[Table],
    bundle: ModelBundle,
    truth: GroundTruth,
    opts: Optional[EvalOptions] = None,
) -> TaskReport:
    """Run one downstream task end to end and score it."""
    opts = opts or EvalOptions()
    task = task.lower()
    if task == "cc":
        strata_pools: dict[str, dict[str, np.ndarray]] = {"textual": {}, "numerical": {}, "ranges": {}}
        per_table = _embed_many(lambda t: column_composites(t, bundle), corpus, opts.workers)
        for table, cols in zip(corpus, per_table):
            for j, ce in cols.items():
                if not np.any(ce.vector):
                    continue  # empty column: no rankable signal
                strata_pools[column_kind(table, j)][f"{table.source_id}#c{j}"] = ce.vector
        strata = [
            _score_stratum(name, pool, truth, opts, block=True)
            for name, pool in strata_pools.items()
            if len(pool) >= 2
        ]
    elif task == "tc":
        vecs = _embed_many(
            lambda t: table_composite(t, bundle, opts.tc_recipe).vector, corpus, opts.workers
        )
        pool = {t.source_id: v for t, v in zip(corpus, vecs)}
        if opts.tc_mode == "centroid":
            by_topic: dict[str, list[str]] = {}
            for item in pool:
                if item in truth:
                    by_topic.setdefault(truth[item], []).append(item)
            lists = []
            for topic in sorted(by_topic):
                exemplars = [pool[i] for i in sorted(by_topic[topic])]
                ranked = centroid_cluster(exemplars, pool, k=opts.k, query_name=f"topic:{topic}")
                lists.append((topic, ranked))
            aps = []
            rrs = []
            for topic, ranked in lists:
                hits, psum = 0, 0.0
                for rank, (item, _s) in enumerate(ranked.entries[: opts.k], start=1):
                    if truth[item] == topic:
                        hits += 1
                        psum += hits / rank
                total_rel = sum(1 for _i, l in truth.items() if l == topic)
                aps.append(psum / min(opts.k, max(total_rel, 1)))
                rrs.append(
                    next(
                        (
                            1.0 / rank
                            for rank, (item, _s) in enumerate(ranked.entries[: opts.k], start=1)
                            if truth[item] == topic
                        ),
                        0.0,
                    )
                )
            strata = [
                {
                    "name": "tables",
                    "map": round(float(np.mean(aps)), 6) if aps else 0.0,
                    "mrr": round(float(np.mean(rrs)), 6) if rrs else 0.0,
                    "n_queries": len(aps),
                    "n_skipped": 0,
                }
            ]
        else:
            strata = [_score_stratum("tables", pool, truth, opts, block=False)]
    elif task == "ec":
        by_source = {t.source_id: t for t in corpus}
        entity_ids = sorted(truth.labels)

        def embed_entity(item_id):
            m = _EC_ID_RE.match(item_id)
            if not m:
                raise ConfigError(f"entity id {item_id!r} is not <table>#r<i>c<j>")
            table = by_source[m.group("table")]
            cell = table.cell(int(m.group("row")), int(m.group("col")))
            return cell_value_embedding(cell, bundle)

        vecs = _embed_many(embed_entity, entity_ids, opts.workers)
        pool = {i: v for i, v in zip(entity_ids, vecs) if np.any(v)}
        strata = [_score_stratum("entities", pool, truth, opts, block=False)]
    else:
        raise ValueError(f"unknown task {task!r}; expected cc, tc, or ec")

    return TaskReport(
        task=task,
        strata=strata,
        config={
            "k": opts.k,
            "lsh": {"planes": opts.lsh_planes, "bands": opts.lsh_bands, "rows": opts.lsh_rows, "enabled": opts.use_lsh},
            "tc_recipe": opts.tc_recipe,
            "tc_mode": opts.tc_mode,
            "encoder": bundle.config.to_dict(),
            "segments": {k: m.meta for k, m in sorted(bundle.models.items())},
        },
        seed=opts.seed,
    )
