"""Cell content -> per-token feature records.

Every token carries: a vocabulary id, discrete number features for numeric
values, its in-cell position, a bi-dimensional coordinate, an 8-bit
unit/nesting feature vector, and an inferred type id.  All functions here are
pure and deterministic for fixed dictionaries.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from decimal import Decimal
from pathlib import Path
from typing import Optional

from .errors import ConfigError
from .tables import UNIT_CLASSES, BiCoordinate, Cell, ZERO_COORD

PAD, CLS, SEP, VAL, MASK, UNK = "[PAD]", "[CLS]", "[SEP]", "[VAL]", "[MASK]", "[UNK]"
RESERVED_TOKENS = (PAD, CLS, SEP, VAL, MASK, UNK)

PAD_ID, CLS_ID, SEP_ID, VAL_ID, MASK_ID, UNK_ID = range(6)

MAX_CELL_TOKENS = 64  # in-cell position vocabulary bound
NUM_TYPES = 14
FEAT_BITS = 8  # seven unit classes + one nesting bit
NUM_FEATURE_BOUND = 10  # magnitude/precision clip value

# Words or unbroken number literals, lowercased; punctuation is dropped.
_WORDNUM_RE = re.compile(r"\d+(?:\.\d+)?|[^\W\d_]+")
# Surface forms for unit lookup keep symbols like "%" and "°c" intact.
_SURFACE_RE = re.compile(r"[^\s\d]+|\d+(?:\.\d+)?")
_NUMERIC_RE = re.compile(r"\d+(?:\.\d+)?")
_RANGE_RE = re.compile(r"\d+(?:\.\d+)?\s*[-–]\s*\d+(?:\.\d+)?")


def lex(text: str) -> list[str]:
    """Deterministic lowercasing word/number lexer."""
    return _WORDNUM_RE.findall(text.lower())


def is_numeric_lexeme(tok: str) -> bool:
    return _NUMERIC_RE.fullmatch(tok) is not None


@dataclass
class Vocabulary:
    """Token -> id map with fixed reserved ids 0-5.

    Out-of-vocabulary words fall back to greedy longest-match pieces
    ("##" continuations) when the vocabulary carries them, else to [UNK].
    """

    token_to_id: dict[str, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for i, tok in enumerate(RESERVED_TOKENS):
            if self.token_to_id.setdefault(tok, i) != i:
                raise ConfigError(f"reserved token {tok} must have id {i}")
        ids = sorted(self.token_to_id.values())
        if ids != list(range(len(ids))):
            raise ConfigError("vocabulary ids must be dense in [0, V)")

    def __len__(self) -> int:
        return len(self.token_to_id)

    @property
    def size(self) -> int:
        return len(self.token_to_id)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def id(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def encode_word(self, word: str) -> list[int]:
        """Whole-word id, else greedy longest-match pieces, else [UNK]."""
        if word in self.token_to_id:
            return [self.token_to_id[word]]
        pieces = []
        pos = 0
        while pos < len(word):
            end = len(word)
            prefix = "" if pos == 0 else "##"
            while end > pos:
                cand = prefix + word[pos:end]
                if cand in self.token_to_id:
                    pieces.append(self.token_to_id[cand])
                    break
                end -= 1
            else:
                return [UNK_ID]
            pos = end
        return pieces

    @classmethod
    def build(
        cls,
        texts: list[str],
        max_size: Optional[int] = None,
        min_count: int = 1,
        char_pieces: bool = True,
    ) -> "Vocabulary":
        """Corpus-built vocabulary: words by descending frequency, then
        single-character pieces so unseen words still decompose."""
        counts: dict[str, int] = {}
        chars: set[str] = set()
        for text in texts:
            for tok in lex(text):
                if is_numeric_lexeme(tok):
                    continue  # numbers are always [VAL]
                counts[tok] = counts.get(tok, 0) + 1
                chars.update(tok)
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        words = [w for w, c in ranked if c >= min_count]
        if max_size is not None:
            words = words[: max(0, max_size - len(RESERVED_TOKENS))]
        mapping = {tok: i for i, tok in enumerate(RESERVED_TOKENS)}
        for w in words:
            mapping.setdefault(w, len(mapping))
        if char_pieces:
            for ch in sorted(chars):
                mapping.setdefault(ch, len(mapping))
                mapping.setdefault("##" + ch, len(mapping))
        return cls(mapping)

    def to_dict(self) -> dict[str, int]:
        return dict(self.token_to_id)


@dataclass(frozen=True)
class NumberFeatures:
    """Discrete features of a written decimal: digit counts and edge digits."""

    mag: int  # digits in the integer part, clipped to 10
    pre: int  # digits after the decimal point, clipped to 10
    fst: int  # leading significant digit (0 for zero)
    lst: int  # trailing digit as written

    def __post_init__(self) -> None:
        for name, v in (("mag", self.mag), ("pre", self.pre), ("fst", self.fst), ("lst", self.lst)):
            if not 0 <= v <= NUM_FEATURE_BOUND:
                raise ValueError(f"number feature {name}={v} outside [0, {NUM_FEATURE_BOUND}]")


def number_features(x) -> NumberFeatures:
    """Features of the written decimal form of ``x``; sign is discarded.

    Precision counts digits after the decimal point, so 20.3 -> (2, 1, 2, 3)
    and 15 -> (2, 0, 1, 5).
    """
    d = x if isinstance(x, Decimal) else Decimal(str(x))
    written = format(abs(d), "f")
    int_part, _, frac_part = written.partition(".")
    digits = int_part + frac_part
    fst = next((int(c) for c in digits if c != "0"), 0)
    return NumberFeatures(
        mag=min(len(int_part), NUM_FEATURE_BOUND),
        pre=min(len(frac_part), NUM_FEATURE_BOUND),
        fst=fst,
        lst=int(written[-1]),
    )


@dataclass(frozen=True)
class TokenRecord:
    """One token with every feature the embedding layer consumes."""

    token_id: int
    text: str
    is_number: bool = False
    num: Optional[NumberFeatures] = None
    in_pos: int = 0
    coord: BiCoordinate = ZERO_COORD
    feat: tuple[int, ...] = (0,) * FEAT_BITS
    type_id: int = 0

    def __post_init__(self) -> None:
        if self.is_number != (self.num is not None):
            raise ValueError("num must be present exactly when is_number")
        if len(self.feat) != FEAT_BITS:
            raise ValueError(f"feat vector must have {FEAT_BITS} bits")

    def with_coord(self, coord: BiCoordinate) -> "TokenRecord":
        return replace(self, coord=coord)


DEFAULT_UNIT_SURFACES: dict[str, list[str]] = {
    "stats": ["%", "mean", "median", "sd", "ci"],
    "length": ["m", "cm", "mm", "km", "in", "ft", "mi"],
    "weight": ["kg", "g", "mg", "lb", "ton"],
    "capacity": ["l", "ml", "gal"],
    "time": ["s", "sec", "min", "hour", "day", "week", "month", "year"],
    "temperature": ["°c", "°f", "k", "celsius", "fahrenheit"],
    "pressure": ["pa", "kpa", "mmhg", "bar", "atm", "psi"],
}


class UnitDictionary:
    """Configurable surface-form -> unit-class lookup."""

    def __init__(self, surfaces: Optional[dict[str, list[str]]] = None):
        surfaces = DEFAULT_UNIT_SURFACES if surfaces is None else surfaces
        unknown = set(surfaces) - set(UNIT_CLASSES)
        if unknown:
            raise ConfigError(f"unknown unit classes {sorted(unknown)}")
        self._lookup: dict[str, str] = {}
        for cls_name in UNIT_CLASSES:  # fixed order keeps collisions deterministic
            for surface in surfaces.get(cls_name, []):
                self._lookup.setdefault(surface.lower(), cls_name)

    def match(self, surface: str) -> Optional[str]:
        surface = surface.lower()
        if surface in self._lookup:
            return self._lookup[surface]
        if len(surface) > 2 and surface.endswith("s"):  # months -> month
            return self._lookup.get(surface[:-1])
        return None

    @classmethod
    def load(cls, path) -> "UnitDictionary":
        return cls(json.loads(Path(path).read_text(encoding="utf-8")))

    def to_dict(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {c: [] for c in UNIT_CLASSES}
        for surface, cls_name in self._lookup.items():
            out[cls_name].append(surface)
        return {c: sorted(v) for c, v in out.items() if v}


def detect_unit(cell: Cell, units: Optional[UnitDictionary] = None) -> Optional[str]:
    """Unit class of a cell: the explicit field if set, else the first
    dictionary hit over the cell text's surface forms."""
    if cell.unit is not None:
        return cell.unit
    units = units or UnitDictionary()
    for surface in _SURFACE_RE.findall(cell.text):
        hit = units.match(surface)
        if hit is not None:
            return hit
    return None


DEFAULT_TYPE_NAMES = (
    "text",
    "numeric",
    "range",
    "name",
    "place",
    "measurement",
    "disease",
    "drug",
    "treatment",
    "vaccine",
    "symptom",
    "chemical",
    "organization",
    "identifier",
)


class TypeDictionary:
    """Exactly fourteen type names plus surface-form entries.

    Numeric and range cells are tagged by regex; string cells by
    longest-match lookup of dictionary surfaces inside the cell text;
    everything else falls back to "text".
    """

    def __init__(
        self,
        type_names: tuple[str, ...] = DEFAULT_TYPE_NAMES,
        entries: Optional[dict[str, str]] = None,
    ):
        type_names = tuple(type_names)
        if len(type_names) != NUM_TYPES:
            raise ConfigError(f"expected exactly {NUM_TYPES} type names, got {len(type_names)}")
        if len(set(type_names)) != NUM_TYPES:
            raise ConfigError("type names must be distinct")
        for needed in ("text", "numeric", "range"):
            if needed not in type_names:
                raise ConfigError(f"type names must include {needed!r}")
        self.type_names = type_names
        self.type_ids = {name: i for i, name in enumerate(type_names)}
        self._entries: dict[tuple[str, ...], str] = {}
        for surface, name in (entries or {}).items():
            if name not in self.type_ids:
                raise ConfigError(f"entry {surface!r} maps to unknown type {name!r}")
            self._entries[tuple(lex(surface))] = name

    def id_of(self, name: str) -> int:
        return self.type_ids[name]

    def lookup(self, lexemes: list[str]) -> Optional[str]:
        """Longest dictionary surface occurring as a contiguous run."""
        best: Optional[tuple[int, str, str]] = None
        for surface, name in self._entries.items():
            k = len(surface)
            if k == 0 or k > len(lexemes):
                continue
            if any(tuple(lexemes[i : i + k]) == surface for i in range(len(lexemes) - k + 1)):
                key = (k, "".join(surface), name)
                if best is None or key > best:
                    best = key
        return best[2] if best else None

    @classmethod
    def load(cls, path) -> "TypeDictionary":
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(tuple(obj["type_names"]), obj.get("entries", {}))

    def to_dict(self) -> dict:
        entries = {" ".join(surface): name for surface, name in self._entries.items()}
        return {"type_names": list(self.type_names), "entries": entries}


def infer_type(cell: Cell, types: Optional[TypeDictionary] = None) -> int:
    """Type id shared by all tokens of the cell."""
    types = types or TypeDictionary()
    if cell.kind in ("number", "gaussian"):
        return types.id_of("numeric")
    if cell.kind == "range":
        return types.id_of("range")
    text = cell.text.strip().lower()
    if _NUMERIC_RE.fullmatch(text):
        return types.id_of("numeric")
    if _RANGE_RE.fullmatch(text):
        return types.id_of("range")
    hit = types.lookup(lex(cell.text))
    return types.id_of(hit) if hit else types.id_of("text")


def _feat_bits(unit: Optional[str], numeric: bool, nested: bool) -> tuple[int, ...]:
    bits = [0] * FEAT_BITS
    if numeric and unit is not None:
        bits[UNIT_CLASSES.index(unit)] = 1
    if nested:
        bits[-1] = 1
    return tuple(bits)


def tokenize_cell(
    cell: Cell,
    vocab: Vocabulary,
    units: Optional[UnitDictionary] = None,
    types: Optional[TypeDictionary] = None,
    nested: bool = False,
    coord: BiCoordinate = ZERO_COORD,
) -> list[TokenRecord]:
    """Token records for one cell's own content.

    Numeric values become single [VAL] tokens carrying number features; a
    range yields two (lo, hi) and a gaussian one (its mean).  All tokens of
    the cell share its unit bits, type id, and coordinate.  Output is
    truncated to the in-cell position bound of 64.  Nested-table hosts have
    no content of their own; the sequence builder inlines the inner table.
    """
    unit = detect_unit(cell, units)
    type_id = infer_type(cell, types)
    feat = _feat_bits(unit, cell.is_numeric, nested)

    values: list[Decimal] = []
    if cell.kind == "number":
        values = [cell.number]
    elif cell.kind == "range":
        values = [cell.range[0], cell.range[1]]
    elif cell.kind == "gaussian":
        values = [cell.gaussian[0]]

    records: list[TokenRecord] = []

    def add(token_id: int, text: str, num: Optional[NumberFeatures] = None) -> None:
        records.append(
            TokenRecord(
                token_id=token_id,
                text=text,
                is_number=num is not None,
                num=num,
                in_pos=len(records),
                coord=coord,
                feat=feat,
                type_id=type_id,
            )
        )

    if cell.is_numeric:
        for v in values:
            add(VAL_ID, str(v), number_features(v))
        for tok in lex(cell.text):
            if not is_numeric_lexeme(tok):
                for piece in vocab.encode_word(tok):
                    add(piece, tok)
    elif cell.kind == "string":
        for tok in lex(cell.text):
            if is_numeric_lexeme(tok):
                add(VAL_ID, tok, number_features(Decimal(tok)))
            else:
                for piece in vocab.encode_word(tok):
                    add(piece, tok)
    # "empty" and "nested" kinds contribute no content tokens here

    return records[:MAX_CELL_TOKENS]
