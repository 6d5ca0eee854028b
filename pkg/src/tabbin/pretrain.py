"""Self-supervised pretraining of the four segment models.

Objectives: masked-token prediction (BERT-style 80/10/10 corruption) plus a
cell-level cloze that fully masks whole cells and asks the model to pick the
original cell out of distractors from the same table, scored by cosine
between the masked span's pooled hidden state and each candidate's pooled
embedding.  One Adam optimizer, one seeded generator, bit-reproducible runs.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .bundle import ModelBundle, SegmentModel
from .embeddings import EmbeddingWeights, embed_batch, records_to_arrays
from .encoder import EncoderConfig, EncoderWeights, encoder_forward
from .errors import NonFiniteError, NoSequencesError, TooFewCellsError
from .featurize import MASK_ID, PAD_ID, TokenRecord, TypeDictionary, UnitDictionary, Vocabulary
from .sequences import AblationFlags, SegmentKind, TokenSequence, apply_ablation, build_sequences
from .tables import Table, assign_coordinates


@dataclass
class TrainConfig:
    """Pretraining hyperparameters; defaults mirror the full-scale recipe,
    ``desk()`` gives the laptop-sized profile."""

    steps: int = 50_000
    batch_size: int = 12
    lr: float = 2e-5
    mlm_rate: float = 0.15
    clc_cells_per_seq: int = 2
    clc_candidates: int = 10
    clc_weight: float = 1.0
    seed: int = 0
    segment: SegmentKind = SegmentKind.ROW
    ablations: AblationFlags = field(default_factory=AblationFlags.none)
    max_grad_norm: Optional[float] = None

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not 0.0 < self.mlm_rate < 1.0:
            raise ValueError("mlm_rate must lie strictly between 0 and 1")
        if self.lr <= 0.0:
            raise ValueError("lr must be positive")
        if isinstance(self.segment, str):
            self.segment = SegmentKind(self.segment)

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        base = dict(steps=1000, batch_size=8, lr=1e-3)
        base.update(overrides)
        return cls(**base)


_MASKABLE_EXCLUDED = {PAD_ID}


def _maskable_positions(seq: TokenSequence, records: list[TokenRecord]) -> list[int]:
    """Content tokens not already consumed by a cloze mask."""
    return [
        i
        for i, slot in enumerate(seq.slots)
        if slot.kind == "content"
        and records[i].token_id != MASK_ID
        and records[i].token_id not in _MASKABLE_EXCLUDED
    ]


def make_mlm_instance(
    seq: TokenSequence,
    rate: float,
    rng: np.random.Generator,
    vocab_size: int,
    mix: tuple[float, float, float] = (0.8, 0.1, 0.1),
    records: Optional[list[TokenRecord]] = None,
) -> tuple[list[TokenRecord], dict[int, int]]:
    """Corrupt maskable tokens and return (records, position -> original id).

    Each maskable token is selected independently with probability ``rate``;
    a selection-free draw forces one random mask.  Selected tokens become
    [MASK] / a random vocabulary token / stay unchanged with the ``mix``
    proportions.  Coordinates and features of masked tokens are untouched.
    """
    records = list(records if records is not None else seq.tokens)
    maskable = _maskable_positions(seq, records)
    if not maskable:
        return records, {}
    picks = [p for p in maskable if rng.random() < rate]
    if not picks:
        picks = [maskable[rng.integers(len(maskable))]]
    targets: dict[int, int] = {}
    for pos in picks:
        original = records[pos]
        targets[pos] = original.token_id
        roll = rng.random()
        if roll < mix[0]:
            records[pos] = replace(original, token_id=MASK_ID)
        elif roll < mix[0] + mix[1]:
            rand_id = int(rng.integers(6, vocab_size))  # skip reserved ids
            records[pos] = replace(original, token_id=rand_id)
        # else: keep the original token, target still recorded
    return records, targets


@dataclass
class ClozeCell:
    """One fully masked cell with its candidate set."""

    positions: tuple[int, ...]
    candidates: list[list[TokenRecord]]
    candidate_texts: list[str]
    answer: int


def _eligible_cells(seq: TokenSequence) -> list[tuple[int, tuple[int, ...], str]]:
    by_cell: dict[int, list[int]] = {}
    for i, slot in enumerate(seq.slots):
        if slot.kind == "content":
            by_cell.setdefault(slot.cell_id, []).append(i)
    return [
        (cid, tuple(positions), seq.cells[cid].text) for cid, positions in sorted(by_cell.items())
    ]


def make_clc_instance(
    seq: TokenSequence,
    rng: np.random.Generator,
    k: int,
    n_candidates: int = 10,
    records: Optional[list[TokenRecord]] = None,
) -> tuple[list[TokenRecord], list[ClozeCell]]:
    """Mask ``k`` whole cells; each gets its original cell plus up to
    ``n_candidates - 1`` distinct-text distractor cells, shuffled.

    Raises TooFewCellsError unless the sequence covers at least k+1 cells.
    """
    cells = _eligible_cells(seq)
    if len(cells) < k + 1:
        raise TooFewCellsError(f"sequence covers {len(cells)} cells, cloze needs {k + 1}")
    records = list(records if records is not None else seq.tokens)
    chosen = rng.choice(len(cells), size=k, replace=False)
    out: list[ClozeCell] = []
    for c in sorted(int(x) for x in chosen):
        _cid, positions, answer_text = cells[c]
        answer_records = [records[p] for p in positions]
        for p in positions:
            records[p] = replace(records[p], token_id=MASK_ID)
        distractor_pool: dict[str, tuple[int, ...]] = {}
        for other, (_ocid, opos, otext) in enumerate(cells):
            if other != c and otext != answer_text and otext not in distractor_pool:
                distractor_pool[otext] = opos
        texts = sorted(distractor_pool)
        take = min(len(texts), n_candidates - 1)
        picked = [texts[int(i)] for i in rng.choice(len(texts), size=take, replace=False)] if take else []
        cand_records = [answer_records] + [
            [seq.slots[p].record for p in distractor_pool[t]] for t in picked
        ]
        cand_texts = [answer_text] + picked
        order = rng.permutation(len(cand_records))
        cand_records = [cand_records[int(i)] for i in order]
        cand_texts = [cand_texts[int(i)] for i in order]
        out.append(
            ClozeCell(
                positions=positions,
                candidates=cand_records,
                candidate_texts=cand_texts,
                answer=int(np.argwhere(order == 0)[0, 0]),
            )
        )
    return records, out


class Adam:
    """Plain Adam with optional global-norm gradient clipping."""

    def __init__(
        self,
        tensors: dict[str, Tensor],
        lr: float,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        max_grad_norm: Optional[float] = None,
    ):
        self.tensors = tensors
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.max_grad_norm = max_grad_norm
        self.t = 0
        self._m = {k: np.zeros_like(t.data) for k, t in tensors.items()}
        self._v = {k: np.zeros_like(t.data) for k, t in tensors.items()}

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def step(self) -> None:
        self.t += 1
        grads = {k: t.grad for k, t in self.tensors.items() if t.grad is not None}
        if self.max_grad_norm is not None and grads:
            total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if total > self.max_grad_norm:
                scale = self.max_grad_norm / (total + 1e-12)
                grads = {k: g * scale for k, g in grads.items()}
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for k, g in grads.items():
            m, v = self._m[k], self._v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            self.tensors[k].data -= self.lr * update.astype(self.tensors[k].data.dtype)


def corpus_texts(corpus: Iterable[Table]) -> list[str]:
    """Every string the tokenizer may meet: captions, labels, cell text."""
    texts: list[str] = []

    def add_table(t: Table) -> None:
        texts.append(t.caption)
        for tree in (t.hmd, t.vmd):
            for node, _d, _p in tree.iter_nodes():
                texts.append(node.label)
        for row in t.data:
            for cell in row:
                texts.append(cell.text)
                if cell.nested is not None:
                    add_table(cell.nested)

    for t in corpus:
        add_table(t)
    return texts


def build_corpus_sequences(
    corpus: list[Table],
    segment: SegmentKind,
    vocab: Vocabulary,
    units: Optional[UnitDictionary] = None,
    types: Optional[TypeDictionary] = None,
    flags: AblationFlags = AblationFlags.none(),
) -> list[TokenSequence]:
    seqs: list[TokenSequence] = []
    for table in corpus:
        coords = assign_coordinates(table)
        for seq in build_sequences(table, segment, vocab, coords, units=units, types=types):
            seqs.append(apply_ablation(seq, flags))
    if not seqs:
        raise NoSequencesError(f"corpus yields no sequences for segment {segment.value!r}")
    return seqs


class _Shuffler:
    """Endless shuffled index stream (epoch reshuffles)."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n = n
        self.rng = rng
        self._pool: list[int] = []

    def take(self, k: int) -> list[int]:
        out: list[int] = []
        while len(out) < k:
            if not self._pool:
                self._pool = list(self.rng.permutation(self.n))
            out.append(self._pool.pop())
        return out


def _pad_visibility(vis_list: list[np.ndarray], n: int) -> np.ndarray:
    b = len(vis_list)
    out = np.zeros((b, n, n), dtype=np.uint8)
    idx = np.arange(n)
    out[:, idx, idx] = 1  # padded positions attend to themselves
    for i, v in enumerate(vis_list):
        out[i, : v.shape[0], : v.shape[1]] = v
    return out


def _mlm_loss(h, tok_weight: Tensor, batch_targets: list[dict[int, int]]):
    b_idx, p_idx, targets = [], [], []
    for b, tmap in enumerate(batch_targets):
        for pos, tid in sorted(tmap.items()):
            b_idx.append(b)
            p_idx.append(pos)
            targets.append(tid)
    if not targets:
        return None, 0
    picked = ad.gather_positions(h, np.array(b_idx), np.array(p_idx))
    logits = ad.matmul(picked, ad.transpose(tok_weight, (1, 0)))
    return ad.softmax_cross_entropy(logits, np.array(targets)), len(targets)


def _clc_loss(h, emb: EmbeddingWeights, flags: AblationFlags, batch_clc, n_candidates, dtype):
    """Cosine-ranked candidate cross-entropy over all masked cells."""
    cells = [(b, cell) for b, cls in enumerate(batch_clc) for cell in cls]
    if not cells:
        return None, 0
    b_idx, p_idx = [], []
    pool_rows = np.zeros((len(cells), sum(len(c.positions) for _b, c in cells)), dtype=dtype)
    col = 0
    for row, (b, cell) in enumerate(cells):
        for p in cell.positions:
            b_idx.append(b)
            p_idx.append(p)
            pool_rows[row, col] = 1.0 / len(cell.positions)
            col += 1
    gathered = ad.gather_positions(h, np.array(b_idx), np.array(p_idx))
    pooled = ad.matmul(Tensor(pool_rows), gathered)  # (C, H)

    pad_record = TokenRecord(token_id=PAD_ID, text="[PAD]")
    cand_lists: list[list[TokenRecord]] = []
    valid = np.full((len(cells), n_candidates), -ad.NEG_INF, dtype=dtype)
    answers = []
    for row, (_b, cell) in enumerate(cells):
        answers.append(cell.answer)
        for a in range(n_candidates):
            if a < len(cell.candidates):
                cand_lists.append(cell.candidates[a])
                valid[row, a] = 0.0
            else:
                cand_lists.append([pad_record])
    arrays = records_to_arrays(cand_lists, dtype=dtype)
    cand_emb = embed_batch(arrays, emb, flags)  # (C*A, L, H)
    weights = arrays.pad_mask / np.maximum(arrays.pad_mask.sum(axis=1, keepdims=True), 1.0)
    cand_pooled = ad.sum_(cand_emb * weights[:, :, None], axis=1)  # (C*A, H)
    cand_pooled = ad.reshape(cand_pooled, (len(cells), n_candidates, -1))

    cos = ad.cosine_rows(ad.reshape(pooled, (len(cells), 1, -1)), cand_pooled)  # (C, A)
    logits = cos + Tensor(valid)
    return ad.softmax_cross_entropy(logits, np.array(answers)), len(cells)


def train(
    corpus: list[Table],
    cfg: TrainConfig,
    enc_cfg: Optional[EncoderConfig] = None,
    vocab: Optional[Vocabulary] = None,
    units: Optional[UnitDictionary] = None,
    types: Optional[TypeDictionary] = None,
    log_path=None,
) -> SegmentModel:
    """Pretrain one segment model; deterministic for a fixed config."""
    if not corpus:
        raise ValueError("corpus must be nonempty")
    enc_cfg = enc_cfg or EncoderConfig()
    vocab = vocab or Vocabulary.build(corpus_texts(corpus))
    units = units or UnitDictionary()
    types = types or TypeDictionary()

    seqs = build_corpus_sequences(corpus, cfg.segment, vocab, units, types, cfg.ablations)

    seg_idx = list(SegmentKind).index(cfg.segment)
    init_rng = np.random.default_rng([cfg.seed, 0, seg_idx])
    data_rng = np.random.default_rng([cfg.seed, 1, seg_idx])

    emb = EmbeddingWeights(vocab.size, enc_cfg.hidden, rng=init_rng)
    enc = EncoderWeights(enc_cfg, rng=init_rng)
    params = {f"emb.{k}": t for k, t in emb.tensors().items()}
    params.update({f"enc.{k}": t for k, t in enc.tensors().items()})
    opt = Adam(params, lr=cfg.lr, max_grad_norm=cfg.max_grad_norm)

    shuffler = _Shuffler(len(seqs), data_rng)
    history: list[dict] = []
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for step in range(1, cfg.steps + 1):
            t0 = time.perf_counter()
            batch = [seqs[i] for i in shuffler.take(cfg.batch_size)]
            recs_list, targets_list, clc_list, vis_list = [], [], [], []
            for seq in batch:
                records = seq.tokens
                clc_cells: list[ClozeCell] = []
                k = cfg.clc_cells_per_seq
                if k > 0 and len(_eligible_cells(seq)) >= k + 1:
                    records, clc_cells = make_clc_instance(
                        seq, data_rng, k, cfg.clc_candidates, records=records
                    )
                records, targets = make_mlm_instance(
                    seq, cfg.mlm_rate, data_rng, vocab.size, records=records
                )
                recs_list.append(records)
                targets_list.append(targets)
                clc_list.append(clc_cells)
                vis_list.append(seq.visibility)

            arrays = records_to_arrays(recs_list)
            mask = _pad_visibility(vis_list, arrays.shape[1])
            opt.zero_grad()
            h = encoder_forward(
                embed_batch(arrays, emb, cfg.ablations),
                np.ones_like(mask) if cfg.ablations.no_visibility else mask,
                enc,
                enc_cfg,
                train=enc_cfg.dropout > 0.0,
                rng=data_rng,
            )
            mlm, n_mlm = _mlm_loss(h, emb.tok, targets_list)
            clc, n_clc = _clc_loss(
                h, emb, cfg.ablations, clc_list, cfg.clc_candidates, np.float32
            )
            if mlm is None and clc is None:
                continue
            loss = mlm if clc is None else (clc if mlm is None else mlm + cfg.clc_weight * clc)
            mlm_val = float(mlm.data) if mlm is not None else 0.0
            clc_val = float(clc.data) if clc is not None else 0.0
            if not np.isfinite(float(loss.data)):
                raise NonFiniteError(f"non-finite loss at step {step}")
            loss.backward()
            opt.step()
            entry = {
                "step": step,
                "mlm_loss": mlm_val,
                "clc_loss": clc_val,
                "lr": cfg.lr,
                "wall_ms": round((time.perf_counter() - t0) * 1000.0, 3),
            }
            history.append(entry)
            if log_fh:
                log_fh.write(json.dumps(entry) + "\n")
    finally:
        if log_fh:
            log_fh.close()

    for name, t in params.items():
        if not np.isfinite(t.data).all():
            raise NonFiniteError(f"non-finite weights in {name} after training")

    tail = max(1, min(50, cfg.steps // 10))
    meta = {
        "segment": cfg.segment.value,
        "seed": cfg.seed,
        "steps": cfg.steps,
        "batch_size": cfg.batch_size,
        "lr": cfg.lr,
        "ablations": cfg.ablations,
        "mlm_initial": history[0]["mlm_loss"] if history else None,
        "mlm_final": float(np.mean([e["mlm_loss"] for e in history[-tail:]])) if history else None,
    }
    return SegmentModel(embedding=emb, encoder=enc, config=enc_cfg, meta=meta)


def train_bundle(
    corpus: list[Table],
    cfg: TrainConfig,
    segments: Iterable[SegmentKind],
    enc_cfg: Optional[EncoderConfig] = None,
    vocab: Optional[Vocabulary] = None,
    units: Optional[UnitDictionary] = None,
    types: Optional[TypeDictionary] = None,
) -> ModelBundle:
    """Train several segments into one bundle with a shared vocabulary.

    Segments with no derivable sequences (an all-relational corpus has no
    vertical metadata) are skipped with a note in the bundle metadata.
    """
    enc_cfg = enc_cfg or EncoderConfig()
    vocab = vocab or Vocabulary.build(corpus_texts(corpus))
    units = units or UnitDictionary()
    types = types or TypeDictionary()
    bundle = ModelBundle(vocab=vocab, config=enc_cfg, units=units, types=types)
    skipped = []
    for segment in segments:
        seg_cfg = replace_config(cfg, segment=segment)
        try:
            model = train(corpus, seg_cfg, enc_cfg, vocab, units, types)
        except NoSequencesError:
            skipped.append(segment.value)
            continue
        bundle.set(segment, model)
    if skipped:
        bundle.meta["skipped_segments"] = skipped
    return bundle


def replace_config(cfg: TrainConfig, **overrides) -> TrainConfig:
    from dataclasses import replace as dc_replace

    return dc_replace(cfg, **overrides)
