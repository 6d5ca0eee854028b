"""Command-line surface for the whole pipeline.

Subcommands: ingest (validate + normalize table JSON), gen (synthetic
corpus), pretrain (one segment model into a bundle), embed (composite
embedding dumps), eval (cc/tc/ec reports), ablate (before/after comparison
with one component removed), gradcheck (finite-difference gradient suite).
Exit codes: 0 success, 1 validation/usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from decimal import Decimal
from pathlib import Path

import numpy as np

from . import __version__
from .bundle import ModelBundle, load_bundle, save_bundle
from .composites import (
    column_composite,
    numeric_composite,
    range_composite,
    table_composite,
    write_embeddings,
)
from .config import RunConfig, resolve_config
from .corpus import CorpusSpec, generate_corpus, load_corpus, write_corpus
from .errors import ConfigError, SchemaError, ShapeError, TabbinError
from .evaluate import GroundTruth, run_task
from .featurize import Vocabulary
from .pretrain import TrainConfig, corpus_texts, train
from .sequences import AblationFlags, SegmentKind
from .tables import parse_table, serialize_table

_TASK_SEGMENTS = {
    "cc": (SegmentKind.HMD, SegmentKind.COL),
    "tc": (SegmentKind.ROW, SegmentKind.HMD, SegmentKind.VMD),
    "ec": (SegmentKind.COL,),
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tabbin", description=__doc__)
    parser.add_argument("--version", action="version", version=f"tabbin {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=None, help="master random seed")
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--profile", default="desk", choices=["desk", "paper"])
        p.add_argument("--out", default=None, help="output path")

    p = sub.add_parser("ingest", help="validate and normalize table JSON files")
    common(p)
    p.add_argument("paths", nargs="+", help="table JSON files or directories")

    p = sub.add_parser("gen", help="generate a synthetic corpus with ground truth")
    common(p)
    p.add_argument("--spec", default=None, help="corpus spec JSON")
    p.add_argument("--tables", type=int, default=None, help="override table count")

    p = sub.add_parser("pretrain", help="pretrain one segment model")
    common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--segment", required=True, choices=[s.value for s in SegmentKind])
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--drop", action="append", default=[],
                   choices=["visibility", "type", "units", "coords"],
                   help="train with a component removed (repeatable)")
    p.add_argument("--log", default=None, help="JSONL training-log path")

    p = sub.add_parser("embed", help="write composite embedding dumps")
    common(p)
    p.add_argument("--corpus", default=None)
    p.add_argument("--bundle", required=True)
    p.add_argument("--recipe", required=True,
                   choices=["colcomp", "tblcomp1", "tblcomp2", "numeric", "range"])
    p.add_argument("--items", default=None,
                   help="JSON list of numeric/range items to embed")

    p = sub.add_parser("eval", help="run a downstream task and score it")
    common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--bundle", required=True)
    p.add_argument("--task", required=True, choices=["cc", "tc", "ec"])
    p.add_argument("--truth", default=None, help="ground-truth CSV (default from corpus dir)")
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--recipe", default=None, choices=["tblcomp1", "tblcomp2"])
    p.add_argument("--no-lsh", action="store_true")

    p = sub.add_parser("ablate", help="retrain minus one component and compare")
    common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--drop", required=True,
                   choices=["visibility", "type", "units", "coords"])
    p.add_argument("--task", default="tc", choices=["cc", "tc"])
    p.add_argument("--steps", type=int, default=None)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    common(p)
    p.add_argument("--hidden", type=int, default=12)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--tokens", type=int, default=8)

    return parser


def _config_from_args(args) -> RunConfig:
    overrides: dict = {}
    if getattr(args, "steps", None) is not None:
        overrides.setdefault("train", {})["steps"] = args.steps
    if getattr(args, "k", None) is not None:
        overrides.setdefault("eval", {})["k"] = args.k
    if getattr(args, "recipe", None) in ("tblcomp1", "tblcomp2"):
        overrides.setdefault("eval", {})["tc_recipe"] = args.recipe
    if getattr(args, "no_lsh", False):
        overrides.setdefault("eval", {})["use_lsh"] = False
    return resolve_config(args.config, args.profile, args.seed, overrides)


def _cmd_ingest(args, cfg: RunConfig) -> int:
    files: list[Path] = []
    for raw in args.paths:
        p = Path(raw)
        files.extend(sorted(p.glob("*.json")) if p.is_dir() else [p])
    if not files:
        print("ingest: no input files", file=sys.stderr)
        return 1
    out_dir = Path(args.out) if args.out else None
    ok = 0
    for path in files:
        table = parse_table(path.read_text(encoding="utf-8"))
        if out_dir:
            out_dir.mkdir(parents=True, exist_ok=True)
            (out_dir / path.name).write_text(serialize_table(table), encoding="utf-8")
        ok += 1
    print(f"ingest: {ok} tables valid" + (f", normalized into {out_dir}" if out_dir else ""))
    return 0


def _cmd_gen(args, cfg: RunConfig) -> int:
    if not args.out:
        print("gen: --out directory is required", file=sys.stderr)
        return 1
    if args.spec:
        spec = CorpusSpec.from_dict(json.loads(Path(args.spec).read_text(encoding="utf-8")))
    else:
        spec = CorpusSpec()
    if args.tables is not None:
        spec = replace(spec, n_tables=args.tables)
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    tables, truths = generate_corpus(spec)
    write_corpus(tables, truths, args.out, spec=spec)
    n_nonrel = sum(1 for t in tables if not t.vmd.is_empty or t.has_nested() or any(not r.is_leaf for r in t.hmd.roots))
    print(f"gen: wrote {len(tables)} tables ({n_nonrel} non-relational) to {args.out}")
    return 0


def _cmd_pretrain(args, cfg: RunConfig) -> int:
    if not args.out:
        print("pretrain: --out bundle path is required", file=sys.stderr)
        return 1
    corpus, _truths = load_corpus(args.corpus)
    flags = AblationFlags.from_names(args.drop)
    train_cfg = replace(cfg.train, segment=SegmentKind(args.segment), ablations=flags)
    out = Path(args.out)
    if out.exists():
        bundle = load_bundle(out)
        vocab = bundle.vocab
        enc_cfg = bundle.config
    else:
        vocab = Vocabulary.build(corpus_texts(corpus))
        enc_cfg = cfg.encoder
        bundle = ModelBundle(vocab=vocab, config=enc_cfg, meta={"config": cfg.to_dict()})
    model = train(corpus, train_cfg, enc_cfg, vocab, bundle.units, bundle.types, log_path=args.log)
    bundle.set(train_cfg.segment, model)
    bundle.meta.setdefault("config", cfg.to_dict())
    save_bundle(bundle, out)
    print(
        f"pretrain: segment={args.segment} steps={train_cfg.steps} "
        f"mlm {model.meta['mlm_initial']:.3f} -> {model.meta['mlm_final']:.3f}; saved {out}"
    )
    return 0


def _cmd_embed(args, cfg: RunConfig) -> int:
    if not args.out:
        print("embed: --out path prefix is required", file=sys.stderr)
        return 1
    bundle = load_bundle(args.bundle)
    vectors: dict[str, np.ndarray] = {}
    if args.recipe in ("colcomp", "tblcomp1", "tblcomp2"):
        if not args.corpus:
            print("embed: --corpus is required for this recipe", file=sys.stderr)
            return 1
        corpus, _ = load_corpus(args.corpus)
        for table in corpus:
            if args.recipe == "colcomp":
                for j in range(1, table.n_cols + 1):
                    vectors[f"{table.source_id}#c{j}"] = column_composite(table, j, bundle).vector
            else:
                vectors[table.source_id] = table_composite(table, bundle, args.recipe).vector
    else:
        if not args.items:
            print("embed: --items JSON is required for numeric/range recipes", file=sys.stderr)
            return 1
        items = json.loads(Path(args.items).read_text(encoding="utf-8"))
        for k, item in enumerate(items):
            key = item.get("id", f"item{k:05d}")
            if args.recipe == "numeric":
                ce = numeric_composite(
                    item["attribute"], Decimal(str(item["value"])), item.get("unit"), bundle
                )
            else:
                ce = range_composite(
                    item["attribute"], item.get("unit"),
                    Decimal(str(item["lo"])), Decimal(str(item["hi"])), bundle,
                )
            vectors[key] = ce.vector
    write_embeddings(args.out, args.recipe, vectors, extra={"config": cfg.to_dict(), "seed": cfg.seed})
    print(f"embed: wrote {len(vectors)} {args.recipe} vectors to {args.out}.bin")
    return 0


def _cmd_eval(args, cfg: RunConfig) -> int:
    corpus, truths = load_corpus(args.corpus)
    bundle = load_bundle(args.bundle)
    truth = GroundTruth.load(args.truth) if args.truth else truths.get(args.task)
    if truth is None:
        print(f"eval: no ground truth for task {args.task}", file=sys.stderr)
        return 1
    report = run_task(args.task, corpus, bundle, truth, cfg.eval)
    payload = report.to_dict()
    payload["config"]["run"] = cfg.to_dict()
    text = json.dumps(payload, ensure_ascii=False, sort_keys=True, indent=1)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text, encoding="utf-8")
    print(text)
    return 0


def _train_task_bundle(corpus, cfg: RunConfig, task: str, flags: AblationFlags) -> ModelBundle:
    from .pretrain import train_bundle

    train_cfg = replace(cfg.train, ablations=flags)
    return train_bundle(corpus, train_cfg, _TASK_SEGMENTS[task], cfg.encoder)


def _cmd_ablate(args, cfg: RunConfig) -> int:
    corpus, truths = load_corpus(args.corpus)
    truth = truths.get(args.task)
    if truth is None:
        print(f"ablate: corpus has no ground truth for {args.task}", file=sys.stderr)
        return 1
    drop_flags = AblationFlags.from_names([args.drop])
    full = _train_task_bundle(corpus, cfg, args.task, AblationFlags.none())
    reduced = _train_task_bundle(corpus, cfg, args.task, drop_flags)
    full_report = run_task(args.task, corpus, full, truth, cfg.eval)
    reduced_report = run_task(args.task, corpus, reduced, truth, cfg.eval)

    rows = [f"{'stratum':<12} {'full MAP/MRR':>16} {'-' + args.drop + ' MAP/MRR':>18} {'dMAP':>8}"]
    reduced_by_name = {s["name"]: s for s in reduced_report.strata}
    for s in full_report.strata:
        r = reduced_by_name.get(s["name"], {"map": 0.0, "mrr": 0.0})
        rows.append(
            f"{s['name']:<12} {s['map']:.3f} / {s['mrr']:.3f}    "
            f"{r['map']:.3f} / {r['mrr']:.3f}      {r['map'] - s['map']:+.3f}"
        )
    print("\n".join(rows))
    if args.out:
        payload = {
            "task": args.task,
            "drop": args.drop,
            "full": full_report.to_dict(),
            "ablated": reduced_report.to_dict(),
            "config": cfg.to_dict(),
            "seed": cfg.seed,
        }
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(
            json.dumps(payload, ensure_ascii=False, sort_keys=True, indent=1), encoding="utf-8"
        )
    return 0


def _cmd_gradcheck(args, cfg: RunConfig) -> int:
    from . import autodiff as ad
    from .embeddings import EmbeddingWeights, embed_batch, records_to_arrays
    from .encoder import EncoderConfig, EncoderWeights, encoder_forward, masked_attention
    from .featurize import NumberFeatures, TokenRecord
    from .tables import BiCoordinate

    rng = np.random.default_rng(cfg.seed)
    n = args.tokens

    w = ad.Tensor(rng.normal(size=(6, 5)), requires_grad=True)
    quad_err = ad.grad_check(lambda: ad.sum_(w * w) * 0.5, {"w": w})

    q = ad.Tensor(rng.normal(size=(n, 4)), requires_grad=True)
    k = ad.Tensor(rng.normal(size=(n, 4)), requires_grad=True)
    v = ad.Tensor(rng.normal(size=(n, 4)), requires_grad=True)
    mask = np.ones((n, n))
    mask[0, -1] = mask[-1, 0] = 0
    attn_err = ad.grad_check(
        lambda: ad.sum_(masked_attention(q, k, v, mask)), {"q": q, "k": k, "v": v}
    )

    enc_cfg = EncoderConfig(hidden=args.hidden, layers=args.layers, heads=2)
    emb = EmbeddingWeights(vocab_size=24, hidden=args.hidden, rng=rng, dtype=np.float64)
    enc = EncoderWeights(enc_cfg, rng=rng, dtype=np.float64)
    recs = [
        TokenRecord(
            token_id=int(rng.integers(6, 24)),
            text="t",
            is_number=(i % 3 == 0),
            num=NumberFeatures(2, 1, 2, 3) if i % 3 == 0 else None,
            in_pos=i,
            coord=BiCoordinate((1, i + 1), (1, 2), (0, 0)),
            feat=(0, 0, 0, 0, 1, 0, 0, 1) if i % 3 == 0 else (0,) * 8,
            type_id=i % 14,
        )
        for i in range(n)
    ]
    arrays = records_to_arrays([recs], dtype=np.float64)
    vis = np.ones((1, n, n))
    vis[0, 1, n - 1] = vis[0, n - 1, 1] = 0
    targets = np.array([7, 9])
    pos_b, pos_i = np.array([0, 0]), np.array([1, n - 2])

    def pipeline():
        h = encoder_forward(embed_batch(arrays, emb), vis, enc, enc_cfg)
        picked = ad.gather_positions(h, pos_b, pos_i)
        logits = ad.matmul(picked, ad.transpose(emb.tok, (1, 0)))
        return ad.softmax_cross_entropy(logits, targets)

    params = {f"emb.{k_}": t for k_, t in emb.tensors().items()}
    params.update({f"enc.{k_}": t for k_, t in enc.tensors().items()})
    pipe_err = ad.grad_check(pipeline, params, samples=40)

    print(f"gradcheck: quadratic        {quad_err:.3e}")
    print(f"gradcheck: masked attention {attn_err:.3e}")
    print(f"gradcheck: full pipeline    {pipe_err:.3e}")
    worst = max(quad_err, attn_err, pipe_err)
    print(f"gradcheck: max relative error {worst:.3e} ({'PASS' if worst < 1e-4 else 'FAIL'})")
    return 0 if worst < 1e-4 else 2


_COMMANDS = {
    "ingest": _cmd_ingest,
    "gen": _cmd_gen,
    "pretrain": _cmd_pretrain,
    "embed": _cmd_embed,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "gradcheck": _cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code not in (0, None) else 0
    try:
        cfg = _config_from_args(args)
        return _COMMANDS[args.command](args, cfg)
    except (SchemaError, ShapeError, ConfigError, ValueError, FileNotFoundError) as exc:
        print(f"tabbin {args.command}: {exc}", file=sys.stderr)
        return 1
    except TabbinError as exc:
        print(f"tabbin {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
