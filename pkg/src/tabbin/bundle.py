"""Trained-model container and its versioned on-disk format.

A bundle holds up to four segment models (data rows, data columns,
horizontal metadata, vertical metadata) sharing one vocabulary and one
encoder configuration.  On disk: magic bytes, a JSON manifest (format tag,
config, vocabulary, tensor index with per-tensor CRC32), then a little-endian
float32 blob.  Loading verifies every checksum; round trips are bitwise.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .autodiff import Tensor
from .encoder import EncoderConfig, EncoderWeights
from .embeddings import EmbeddingWeights
from .errors import ChecksumError, FormatError, MissingModelError
from .featurize import TypeDictionary, UnitDictionary, Vocabulary
from .sequences import AblationFlags, SegmentKind

BUNDLE_FORMAT = "tbbn/1"
_MAGIC = b"TBBN"


@dataclass
class SegmentModel:
    """One trained (embedding weights, encoder weights) pair."""

    embedding: EmbeddingWeights
    encoder: EncoderWeights
    config: EncoderConfig
    meta: dict = field(default_factory=dict)  # seed, steps, ablations, ...

    def tensors(self) -> dict[str, Tensor]:
        out = {f"emb.{k}": t for k, t in self.embedding.tensors().items()}
        out.update({f"enc.{k}": t for k, t in self.encoder.tensors().items()})
        return out


@dataclass
class ModelBundle:
    """All segment models plus shared vocabulary and dictionaries."""

    vocab: Vocabulary
    config: EncoderConfig
    models: dict[str, SegmentModel] = field(default_factory=dict)
    units: UnitDictionary = field(default_factory=UnitDictionary)
    types: TypeDictionary = field(default_factory=TypeDictionary)
    meta: dict = field(default_factory=dict)

    def get(self, segment: SegmentKind) -> SegmentModel:
        key = segment.value if isinstance(segment, SegmentKind) else str(segment)
        if key not in self.models:
            raise MissingModelError(f"no trained model for segment {key!r}")
        return self.models[key]

    def has(self, segment: SegmentKind) -> bool:
        key = segment.value if isinstance(segment, SegmentKind) else str(segment)
        return key in self.models

    def set(self, segment: SegmentKind, model: SegmentModel) -> None:
        if model.embedding.hidden != self.config.hidden:
            raise FormatError("segment model hidden size differs from bundle config")
        self.models[segment.value] = model


def _meta_with_flags(meta: dict) -> dict:
    out = dict(meta)
    flags = out.get("ablations")
    if isinstance(flags, AblationFlags):
        out["ablations"] = {
            "no_visibility": flags.no_visibility,
            "no_type": flags.no_type,
            "no_units_nesting": flags.no_units_nesting,
            "no_bicoords": flags.no_bicoords,
        }
    return out


def save_bundle(bundle: ModelBundle, path) -> None:
    """Write the bundle as a single self-describing file."""
    path = Path(path)
    blob = bytearray()
    index = []
    for seg, model in sorted(bundle.models.items()):
        for name, tensor in sorted(model.tensors().items()):
            data = np.ascontiguousarray(tensor.data, dtype="<f4")
            raw = data.tobytes()
            index.append(
                {
                    "name": f"{seg}/{name}",
                    "shape": list(data.shape),
                    "offset": len(blob),
                    "nbytes": len(raw),
                    "crc32": zlib.crc32(raw),
                }
            )
            blob.extend(raw)
    manifest = {
        "format": BUNDLE_FORMAT,
        "config": bundle.config.to_dict(),
        "vocab": bundle.vocab.to_dict(),
        "units": bundle.units.to_dict(),
        "types": bundle.types.to_dict(),
        "meta": bundle.meta,
        "segments": {seg: _meta_with_flags(m.meta) for seg, m in bundle.models.items()},
        "tensors": index,
    }
    head = json.dumps(manifest, ensure_ascii=False, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        fh.write(bytes(blob))
    tmp.replace(path)  # atomic publish


def _segment_flags(meta: dict) -> AblationFlags:
    raw = meta.get("ablations")
    if isinstance(raw, AblationFlags):
        return raw
    if isinstance(raw, dict):
        return AblationFlags(**raw)
    return AblationFlags.none()


def load_bundle(path) -> ModelBundle:
    """Read and verify a bundle file; raises FormatError/ChecksumError."""
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise FormatError("not a model bundle (bad magic bytes)")
    (head_len,) = struct.unpack("<Q", raw[4:12])
    try:
        manifest = json.loads(raw[12 : 12 + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable bundle manifest: {exc}") from exc
    if manifest.get("format") != BUNDLE_FORMAT:
        raise FormatError(
            f"unsupported bundle format {manifest.get('format')!r}, expected {BUNDLE_FORMAT!r}"
        )
    blob = raw[12 + head_len :]

    cfg = EncoderConfig(**manifest["config"])
    vocab = Vocabulary(manifest["vocab"])
    units = UnitDictionary(manifest.get("units"))
    types_obj = manifest.get("types")
    types = (
        TypeDictionary(tuple(types_obj["type_names"]), types_obj.get("entries", {}))
        if types_obj
        else TypeDictionary()
    )
    bundle = ModelBundle(
        vocab=vocab, config=cfg, units=units, types=types, meta=manifest.get("meta", {})
    )

    by_segment: dict[str, dict[str, np.ndarray]] = {}
    for entry in manifest["tensors"]:
        lo, hi = entry["offset"], entry["offset"] + entry["nbytes"]
        chunk = blob[lo:hi]
        if len(chunk) != entry["nbytes"] or zlib.crc32(chunk) != entry["crc32"]:
            raise ChecksumError(f"tensor {entry['name']} failed its checksum")
        seg, name = entry["name"].split("/", 1)
        arr = np.frombuffer(chunk, dtype="<f4").reshape(entry["shape"]).copy()
        by_segment.setdefault(seg, {})[name] = arr

    for seg, tensors in by_segment.items():
        emb = EmbeddingWeights(vocab_size=vocab.size, hidden=cfg.hidden)
        enc = EncoderWeights(cfg)
        model = SegmentModel(
            embedding=emb,
            encoder=enc,
            config=cfg,
            meta=manifest.get("segments", {}).get(seg, {}),
        )
        for name, tensor in model.tensors().items():
            if name not in tensors:
                raise FormatError(f"bundle missing tensor {seg}/{name}")
            if tuple(tensors[name].shape) != tensor.shape:
                raise FormatError(f"tensor {seg}/{name} has unexpected shape")
            tensor.data = tensors[name]
        bundle.models[seg] = model
    return bundle


def segment_ablations(model: SegmentModel) -> AblationFlags:
    """Ablation flags the segment was trained with (identity by default)."""
    return _segment_flags(model.meta)
