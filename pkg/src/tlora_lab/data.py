"""Synthetic sentence-pair tasks, a GLUE-style TSV loader, tokenisation and batching."""

from __future__ import annotations

import csv
import hashlib
import io
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataError, LabIOError, SchemaError
from .seeding import make_rng

PAD, CLS, SEP, UNK = 0, 1, 2, 3
RESERVED = ("[pad]", "[cls]", "[sep]", "[unk]")


@dataclass(frozen=True)
class Example:
    text_a: str
    text_b: str | None
    label: int


@dataclass
class Vocab:
    itos: list[str]
    stoi: dict[str, int] = field(init=False)

    def __post_init__(self):
        self.stoi = {tok: i for i, tok in enumerate(self.itos)}

    def __len__(self) -> int:
        return len(self.itos)

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK)


@dataclass
class Batch:
    ids: np.ndarray
    pad_mask: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return self.ids.shape[0]


def tokenize(text: str | None) -> list[str]:
    return [] if not text else text.lower().split()


def build_vocab(examples: Iterable[Example], max_size: int = 10_000) -> Vocab:
    """Frequency-ranked vocabulary; ties broken lexicographically."""
    if max_size <= len(RESERVED):
        raise ConfigError(f"max_size must exceed the {len(RESERVED)} reserved tokens")
    counts: Counter[str] = Counter()
    for ex in examples:
        counts.update(tokenize(ex.text_a))
        counts.update(tokenize(ex.text_b))
    for tok in RESERVED:
        counts.pop(tok, None)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocab(list(RESERVED) + [tok for tok, _ in ranked[: max_size - len(RESERVED)]])


def encode(vocab: Vocab, example: Example, max_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Row layout ``[cls] a.. [sep] b.. [sep] pad..`` (no b segment: ``[cls] a.. [sep]``).

    Truncation keeps the earliest tokens of each segment and never drops
    the structural tokens; it trims the longer segment first.
    """
    a = [vocab.id(t) for t in tokenize(example.text_a)]
    pair = example.text_b is not None
    b = [vocab.id(t) for t in tokenize(example.text_b)] if pair else []
    n_special = 3 if pair else 2
    if max_len < n_special:
        raise ConfigError(f"max_len {max_len} cannot hold {n_special} structural tokens")
    budget = max_len - n_special
    while len(a) + len(b) > budget:
        if len(a) >= len(b):
            a.pop()
        else:
            b.pop()
    row = [CLS] + a + [SEP] + ((b + [SEP]) if pair else [])
    ids = np.full(max_len, PAD, dtype=np.int64)
    ids[: len(row)] = row
    mask = np.ones(max_len, dtype=bool)
    mask[: len(row)] = False
    return ids, mask


def encoded_length(example: Example) -> int:
    return len(tokenize(example.text_a)) + len(tokenize(example.text_b)) + (3 if example.text_b is not None else 2)


def make_batch(vocab: Vocab, examples: Sequence[Example], max_len: int, n_classes: int | None = None) -> Batch:
    ids = np.zeros((len(examples), max_len), dtype=np.int64)
    mask = np.zeros((len(examples), max_len), dtype=bool)
    labels = np.zeros(len(examples), dtype=np.int64)
    for i, ex in enumerate(examples):
        if n_classes is not None and not 0 <= ex.label < n_classes:
            raise DataError(f"example {i}: label {ex.label} outside [0, {n_classes})")
        ids[i], mask[i] = encode(vocab, ex, max_len)
        labels[i] = ex.label
    return Batch(ids, mask, labels)


# ---------------------------------------------------------------- synthetic task


@dataclass
class SynthSpec:
    """Shared-marker paraphrase proxy.

    Each segment holds ``seq_len`` tokens, exactly one of which is a marker
    from a set of ``n_markers``; the rest are distractors. Label 1 iff both
    segments carry the same marker. ``vocab_size`` counts word types
    (markers plus distractors).
    """

    n_examples: int = 512
    n_val: int = 128
    vocab_size: int = 6
    seq_len: int = 2
    n_markers: int = 2
    seed: int = 0
    task: str = "shared-marker"

    def validate(self) -> "SynthSpec":
        if self.task != "shared-marker":
            raise ConfigError(f"unknown synthetic task {self.task!r}")
        if self.seq_len < 1:
            raise ConfigError(f"seq_len must be >= 1, got {self.seq_len}")
        if not 2 <= self.n_markers < self.vocab_size:
            raise ConfigError(f"n_markers must be in [2, vocab_size), got {self.n_markers}")
        if self.n_examples < 2 or self.n_val < 2:
            raise ConfigError("need at least two train and two validation examples")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


def marker_tokens(n_markers: int) -> list[str]:
    return [f"m{i}" for i in range(n_markers)]


def _gen_split(spec: SynthSpec, n: int, rng: np.random.Generator) -> list[Example]:
    markers = marker_tokens(spec.n_markers)
    distractors = [f"w{i}" for i in range(spec.vocab_size - spec.n_markers)]
    labels = np.array([i % 2 for i in range(n)])
    rng.shuffle(labels)

    def segment(marker: str) -> str:
        toks = [distractors[j] for j in rng.integers(0, len(distractors), spec.seq_len - 1)]
        toks.insert(int(rng.integers(0, spec.seq_len)), marker)
        return " ".join(toks)

    out = []
    for label in labels:
        ma = int(rng.integers(0, spec.n_markers))
        if label:
            mb = ma
        else:
            mb = int(rng.integers(0, spec.n_markers - 1))
            mb += mb >= ma
        out.append(Example(segment(markers[ma]), segment(markers[mb]), int(label)))
    return out


def gen_synthetic(spec: SynthSpec) -> tuple[list[Example], list[Example]]:
    """Deterministic train/validation splits, each class-balanced to within one."""
    spec.validate()
    rng = make_rng(spec.seed, "synthetic")
    return _gen_split(spec, spec.n_examples, rng), _gen_split(spec, spec.n_val, rng)


def marker_match_label(example: Example, n_markers: int) -> int:
    """Label from token contents alone: 1 iff the two segments share a marker."""
    mset = set(marker_tokens(n_markers))
    ma = {t for t in tokenize(example.text_a) if t in mset}
    mb = {t for t in tokenize(example.text_b) if t in mset}
    return int(bool(ma & mb))


# ---------------------------------------------------------------- TSV


@dataclass
class TsvSchema:
    col_a: str = "text_a"
    col_b: str | None = "text_b"
    col_label: str = "label"
    labels: list[str] = field(default_factory=lambda: ["0", "1"])


def load_tsv(path: str | Path, schema: TsvSchema | None = None) -> list[Example]:
    """Parse a headed, tab-separated UTF-8 file. Line numbers in errors are 1-based."""
    schema = schema or TsvSchema()
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise LabIOError(f"cannot read {path}: {exc}") from exc
    lines = text.splitlines()
    if not lines:
        raise SchemaError(f"{path}: missing header row")
    header = lines[0].split("\t")
    needed = [schema.col_a, schema.col_label] + ([schema.col_b] if schema.col_b else [])
    for col in needed:
        if col not in header:
            raise SchemaError(f"{path}: column {col!r} not in header {header}")
    idx = {c: header.index(c) for c in needed}
    label_ids = {lab: i for i, lab in enumerate(schema.labels)}
    out = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cells = line.split("\t")
        if len(cells) != len(header):
            raise DataError(f"{path}: line {lineno} has {len(cells)} fields, expected {len(header)}")
        lab = cells[idx[schema.col_label]]
        if lab not in label_ids:
            raise DataError(f"{path}: line {lineno}: unknown label {lab!r}")
        b = cells[idx[schema.col_b]] if schema.col_b else None
        out.append(Example(cells[idx[schema.col_a]], b, label_ids[lab]))
    return out


def dump_tsv(examples: Sequence[Example], schema: TsvSchema | None = None) -> str:
    schema = schema or TsvSchema()
    cols = [schema.col_a] + ([schema.col_b] if schema.col_b else []) + [schema.col_label]
    buf = io.StringIO()
    w = csv.writer(buf, delimiter="\t", lineterminator="\n", quoting=csv.QUOTE_NONE, escapechar="\\")
    w.writerow(cols)
    for ex in examples:
        row = [ex.text_a] + ([ex.text_b or ""] if schema.col_b else []) + [schema.labels[ex.label]]
        w.writerow(row)
    return buf.getvalue()


def write_tsv(path: str | Path, examples: Sequence[Example], schema: TsvSchema | None = None) -> None:
    Path(path).write_text(dump_tsv(examples, schema), encoding="utf-8")


def fingerprint(*splits: Sequence[Example]) -> str:
    h = hashlib.sha256()
    for split in splits:
        h.update(dump_tsv(split).encode("utf-8"))
        h.update(b"\x00")
    return h.hexdigest()
