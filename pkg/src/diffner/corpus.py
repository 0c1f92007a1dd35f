"""Sentences, entities, the boundary codec and dataset I/O."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, ValidationError
from .schedule import round_half_away

logger = logging.getLogger(__name__)

EXPANSION_STRATEGIES = ("repetition", "random")
FORMATS = ("span_json", "conll_bio")


@dataclass(frozen=True)
class Sentence:
    tokens: tuple[str, ...]
    id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        if len(self.tokens) < 1:
            raise ValidationError(f"sentence {self.id!r} is empty")

    @property
    def M(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True, order=True)
class Entity:
    l: int
    r: int
    type: int

    def __post_init__(self):
        if self.l > self.r:
            raise ValidationError(f"entity left boundary {self.l} exceeds right boundary {self.r}")


EntitySet = tuple  # tuple[Entity, ...]; duplicates allowed for nested corpora


@dataclass(frozen=True)
class Example:
    sentence: Sentence
    entities: tuple[Entity, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "entities", tuple(self.entities))
        M = self.sentence.M
        for e in self.entities:
            if e.l < 0 or e.r > M - 1:
                raise ValidationError(
                    f"entity ({e.l}, {e.r}) out of bounds for sentence {self.sentence.id!r} of length {M}"
                )

    @property
    def N(self) -> int:
        return len(self.entities)


@dataclass
class Dataset:
    examples: list[Example]
    labels: tuple[str, ...]

    def __len__(self):
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)

    def __getitem__(self, i):
        return self.examples[i]


@dataclass(frozen=True)
class SpanCodec:
    M: int
    scale: float = 1.0  # lambda

    def __post_init__(self):
        if self.M < 1:
            raise ValidationError(f"sentence length must be positive, got {self.M}")
        if not self.scale > 0:
            raise ValidationError(f"scale factor must be positive, got {self.scale}")


@dataclass(frozen=True, eq=False)
class ExpandedBoundaries:
    B: np.ndarray  # (K, 2) signal-space boundaries
    is_gold: np.ndarray  # (K,) bool; False rows are padding

    @property
    def K(self) -> int:
        return self.B.shape[0]


def encode_boundaries(entity: Entity, codec: SpanCodec) -> tuple[float, float]:
    return (entity.l * codec.scale / codec.M, entity.r * codec.scale / codec.M)


def encode_indices(idx: np.ndarray, M, scale: float) -> np.ndarray:
    """Vectorised ``encode_boundaries`` for an integer array; ``M`` broadcasts."""
    return np.asarray(idx, dtype=np.float64) * scale / np.asarray(M, dtype=np.float64)


def discretize_spans(x: np.ndarray, codec: SpanCodec) -> np.ndarray:
    """Map signal-space spans to word indices ``(l, r)`` with ``0 <= l <= r <= M-1``."""
    return discretize_batch(np.asarray(x, dtype=np.float64), codec.M, codec.scale)


def discretize_batch(x: np.ndarray, M, scale: float) -> np.ndarray:
    """Discretize ``(..., K, 2)`` spans; ``M`` is a scalar or broadcasts against ``x[..., 0, 0]``.

    Values are clamped to ``[-scale, scale]``, mapped by ``round(v * M / scale)``,
    clamped to ``[0, M - 1]`` and swapped when left exceeds right. NaN is rejected.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != 2:
        raise ValidationError(f"spans must have a trailing dimension of 2, got shape {x.shape}")
    if np.isnan(x).any():
        raise ValidationError("span values contain NaN")
    M = np.asarray(M, dtype=np.float64)
    Mb = M.reshape(M.shape + (1, 1)) if M.ndim else M
    v = np.clip(x, -scale, scale)
    idx = round_half_away(v * Mb / scale)
    idx = np.clip(idx, 0, Mb - 1).astype(np.int64)
    left = np.minimum(idx[..., 0], idx[..., 1])
    right = np.maximum(idx[..., 0], idx[..., 1])
    return np.stack([left, right], axis=-1)


def expand_entities(
    gold: Sequence[Entity],
    K: int,
    strategy: str,
    codec: SpanCodec,
    rng: np.random.Generator,
) -> ExpandedBoundaries:
    """Pad the gold set to ``K`` boundary rows.

    The first ``N`` rows always encode the gold entities in order. ``repetition`` fills
    the rest by cycling through the gold rows (falling back to random rows when there
    is no gold entity); ``random`` draws standard-normal boundaries clamped to
    ``[-scale, scale]``.
    """
    if strategy not in EXPANSION_STRATEGIES:
        raise ConfigurationError(f"unknown expansion strategy {strategy!r}")
    N = len(gold)
    if K < 1:
        raise ValidationError(f"K must be at least 1, got {K}")
    if K < N:
        raise ValidationError(f"cannot expand {N} gold entities into K={K} spans (K < N)")
    gold_rows = np.array([encode_boundaries(e, codec) for e in gold], dtype=np.float64).reshape(N, 2)
    pad = K - N
    if strategy == "repetition" and N > 0:
        padding = gold_rows[np.arange(pad) % N]
    else:
        padding = np.clip(rng.standard_normal((pad, 2)), -codec.scale, codec.scale)
    B = np.concatenate([gold_rows, padding], axis=0)
    is_gold = np.zeros(K, dtype=bool)
    is_gold[:N] = True
    return ExpandedBoundaries(B=B, is_gold=is_gold)


# ----------------------------------------------------------------------------- I/O


class LabelVocab:
    """Insertion-ordered label interning shared between splits."""

    def __init__(self, labels: Iterable[str] = ()):
        self._ids: dict[str, int] = {}
        for label in labels:
            self.add(label)

    def add(self, label: str) -> int:
        if label not in self._ids:
            self._ids[label] = len(self._ids)
        return self._ids[label]

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(self._ids)

    def __len__(self):
        return len(self._ids)


def _read_span_json(path: Path, vocab: LabelVocab) -> list[Example]:
    examples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            if "header" in record and "tokens" not in record:
                continue
            try:
                tokens = record["tokens"]
                if not isinstance(tokens, list) or not all(isinstance(t, str) for t in tokens):
                    raise TypeError("tokens must be a list of strings")
                ents = [
                    Entity(int(e["start"]), int(e["end"]), vocab.add(str(e["type"])))
                    for e in record.get("entities", [])
                ]
                sent = Sentence(tuple(tokens), str(record.get("id", lineno)))
                examples.append(Example(sent, tuple(ents)))
            except ValidationError as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from exc
            except (KeyError, TypeError, ValueError) as exc:
                raise ValidationError(f"{path}:{lineno}: malformed record ({exc})") from exc
    return examples


def bio_to_spans(tags: Sequence[str]) -> list[tuple[int, int, str]]:
    """Convert BIO tags to inclusive ``(start, end, label)`` spans.

    A stray ``I-X`` that does not continue an ``X`` span opens a new span.
    """
    spans = []
    start, label = None, None
    for i, tag in enumerate(list(tags) + ["O"]):
        prefix, _, name = tag.partition("-")
        if label is not None and not (prefix == "I" and name == label):
            spans.append((start, i - 1, label))
            start, label = None, None
        if prefix == "B" or (prefix == "I" and label is None):
            start, label = i, name
        elif prefix not in ("B", "I", "O"):
            raise ValidationError(f"invalid BIO tag {tag!r}")
    return spans


def _read_conll_bio(path: Path, vocab: LabelVocab) -> list[Example]:
    examples = []
    tokens: list[str] = []
    tags: list[str] = []
    start_line = 1

    def flush(lineno):
        nonlocal tokens, tags
        if tokens:
            try:
                ents = [Entity(s, e, vocab.add(lab)) for s, e, lab in bio_to_spans(tags)]
                examples.append(Example(Sentence(tuple(tokens), str(len(examples))), tuple(ents)))
            except ValidationError as exc:
                raise ValidationError(f"{path}:{start_line}-{lineno}: {exc}") from exc
        tokens, tags = [], []

    with open(path, encoding="utf-8") as fh:
        lineno = 0
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                flush(lineno)
                start_line = lineno + 1
                continue
            if parts[0] == "-DOCSTART-":
                continue
            if len(parts) < 2:
                raise ValidationError(f"{path}:{lineno}: expected 'token tag', got {line.strip()!r}")
            tokens.append(parts[0])
            tags.append(parts[-1])
        flush(lineno)
    return examples


def load_dataset(path, format: str = "span_json", labels: Iterable[str] = ()) -> Dataset:
    """Read a corpus file. ``labels`` seeds the label vocabulary so splits share ids."""
    if format not in FORMATS:
        raise ConfigurationError(f"unknown dataset format {format!r}; expected one of {FORMATS}")
    path = Path(path)
    vocab = LabelVocab(labels)
    reader = _read_span_json if format == "span_json" else _read_conll_bio
    examples = reader(path, vocab)
    return Dataset(examples=examples, labels=vocab.labels)


def example_record(example: Example, labels: Sequence[str], scores: Sequence[float] | None = None) -> dict:
    ents = []
    for i, e in enumerate(example.entities):
        rec = {"start": e.l, "end": e.r, "type": labels[e.type]}
        if scores is not None:
            rec["score"] = float(scores[i])
        ents.append(rec)
    return {"id": example.sentence.id, "tokens": list(example.sentence.tokens), "entities": ents}


def write_span_json(path, dataset: Dataset, header: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        if header is not None:
            fh.write(json.dumps({"header": header}) + "\n")
        for ex in dataset:
            fh.write(json.dumps(example_record(ex, dataset.labels)) + "\n")


# ----------------------------------------------------------------------- synthetic

SYNTHETIC_LABELS = ("ANG", "SQR")
DELIMITERS = (("<", ">"), ("[", "]"))


@dataclass(frozen=True)
class SyntheticSpec:
    """Size and shape of a generated corpus.

    Entities are bracketed by a delimiter pair that identifies their type and the
    delimiters belong to the span, so labels follow from the surface tokens alone.
    """

    n_sentences: int = 2000
    vocab_size: int = 50
    mean_entities: float = 2.0
    nesting_rate: float = 0.2
    max_depth: int = 2
    filler_len: tuple[int, int] = (1, 4)
    content_len: tuple[int, int] = (1, 3)
    seed: int = 0
    id_prefix: str = "syn"

    def validate(self):
        if self.vocab_size < 10:
            raise ValidationError(f"vocab_size must be at least 10, got {self.vocab_size}")
        if self.n_sentences < 1:
            raise ValidationError(f"n_sentences must be at least 1, got {self.n_sentences}")
        if self.mean_entities < 0:
            raise ValidationError("mean_entities must be non-negative")
        if not 0.0 <= self.nesting_rate <= 1.0:
            raise ValidationError("nesting_rate must lie in [0, 1]")
        if self.max_depth < 1:
            raise ValidationError("max_depth must be at least 1")
        for name in ("filler_len", "content_len"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ValidationError(f"{name} must be an ordered non-negative range, got {(lo, hi)}")


@dataclass
class _Node:
    type: int
    depth: int
    children: list = field(default_factory=list)


def _render(node: _Node, words, rng, spec, out: list[str], spans: list[Entity]):
    opener, closer = DELIMITERS[node.type]
    start = len(out)
    out.append(opener)
    lo, hi = spec.content_len
    content = list(rng.choice(words, size=int(rng.integers(lo, hi + 1))))
    slots = sorted(int(rng.integers(0, len(content) + 1)) for _ in node.children)
    child_iter = iter(node.children)
    for pos in range(len(content) + 1):
        while slots and slots[0] == pos:
            slots.pop(0)
            _render(next(child_iter), words, rng, spec, out, spans)
        if pos < len(content):
            out.append(str(content[pos]))
    out.append(closer)
    spans.append(Entity(start, len(out) - 1, node.type))


def make_synthetic_corpus(spec: SyntheticSpec, rng: np.random.Generator | None = None) -> Dataset:
    """Generate a bracket-delimited NER corpus (span_json compatible)."""
    spec.validate()
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    words = np.array([f"w{i}" for i in range(spec.vocab_size)])
    examples = []
    for i in range(spec.n_sentences):
        n = int(rng.poisson(spec.mean_entities)) if spec.mean_entities > 0 else 0
        roots: list[_Node] = []
        prev = None
        for _ in range(n):
            etype = int(rng.integers(len(DELIMITERS)))
            if prev is not None and prev.depth < spec.max_depth and rng.random() < spec.nesting_rate:
                node = _Node(etype, prev.depth + 1)
                prev.children.append(node)
            else:
                node = _Node(etype, 1)
                roots.append(node)
            prev = node
        tokens: list[str] = []
        spans: list[Entity] = []
        lo, hi = spec.filler_len
        for root in roots:
            tokens.extend(str(w) for w in rng.choice(words, size=int(rng.integers(lo, hi + 1))))
            _render(root, words, rng, spec, tokens, spans)
        tokens.extend(str(w) for w in rng.choice(words, size=int(rng.integers(max(lo, 1), max(hi, 1) + 1))))
        examples.append(Example(Sentence(tuple(tokens), f"{spec.id_prefix}-{i}"), tuple(sorted(spans))))
    return Dataset(examples=examples, labels=SYNTHETIC_LABELS)
