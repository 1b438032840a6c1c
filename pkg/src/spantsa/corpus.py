"""Sentences, target annotations, tag schemes and corpus I/O.

Word indices are 0-based and inclusive everywhere in this package. Human
readable reports print 1-based positions; JSONL files always hold 0-based
indices.
"""

from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class Polarity(enum.Enum):
    POSITIVE = "+"
    NEGATIVE = "-"
    NEUTRAL = "0"

    @property
    def index(self) -> int:
        return POLARITIES.index(self)

    @classmethod
    def parse(cls, value: str) -> "Polarity":
        try:
            return cls(value)
        except ValueError:
            raise ValueError(f"unknown polarity {value!r} (expected '+', '-' or '0')") from None


# Fixed class order; also the tie-break order for majority votes.
POLARITIES = (Polarity.POSITIVE, Polarity.NEGATIVE, Polarity.NEUTRAL)


class Scheme(enum.Enum):
    BIO = "bio"
    BIO_PLUS_POLARITY = "biop"
    COLLAPSED = "collapsed"


class CorpusError(ValueError):
    """Malformed corpus input; ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class TagSchemeError(ValueError):
    pass


@dataclass(frozen=True)
class TargetAnnotation:
    start: int
    end: int
    # None marks a polarity-free span, e.g. one read back from BIO tags.
    polarity: Polarity | None = None

    @property
    def length(self) -> int:
        return self.end - self.start + 1

    def key(self) -> tuple[int, int, str | None]:
        return (self.start, self.end, self.polarity.value if self.polarity else None)


@dataclass(frozen=True)
class AnnotatedSentence:
    words: tuple[str, ...]
    targets: tuple[TargetAnnotation, ...] = ()
    id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "words", tuple(self.words))
        object.__setattr__(self, "targets", tuple(self.targets))

    def __len__(self) -> int:
        return len(self.words)

    def sorted_targets(self) -> tuple[TargetAnnotation, ...]:
        return tuple(sorted(self.targets, key=lambda t: (t.start, t.end)))

    def to_json(self) -> dict:
        out = {
            "words": list(self.words),
            "targets": [
                {"start": t.start, "end": t.end, "polarity": t.polarity.value}
                for t in self.targets
            ],
        }
        if self.id:
            out = {"id": self.id, **out}
        return out


@dataclass(frozen=True)
class TagSequence:
    scheme: Scheme
    tags: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "tags", tuple(self.tags))

    def __len__(self) -> int:
        return len(self.tags)


@dataclass(frozen=True)
class Corpus:
    sentences: tuple[AnnotatedSentence, ...]
    name: str = "corpus"

    def __post_init__(self):
        object.__setattr__(self, "sentences", tuple(self.sentences))

    def __len__(self) -> int:
        return len(self.sentences)

    def __iter__(self):
        return iter(self.sentences)

    def __getitem__(self, i):
        return self.sentences[i]

    def to_jsonl(self) -> str:
        return "".join(
            json.dumps(s.to_json(), ensure_ascii=False) + "\n" for s in self.sentences
        )

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_jsonl().encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# validation and I/O


def validate_sentence(s: AnnotatedSentence) -> list[str]:
    violations = []
    n = len(s.words)
    if n < 1:
        violations.append("empty sentence")
    for t in s.targets:
        if t.start > t.end:
            violations.append("span start exceeds end")
        elif t.start < 0 or t.end >= n:
            violations.append("index out of bounds")
    for i in range(len(s.targets)):
        for j in range(i + 1, len(s.targets)):
            a, b = s.targets[i], s.targets[j]
            if a.start <= b.end and b.start <= a.end:
                violations.append(f"overlap between targets {i} and {j}")
    return violations


def sentence_from_json(obj, line: int | None = None, default_id: str = "") -> AnnotatedSentence:
    if not isinstance(obj, dict):
        raise CorpusError("expected a JSON object", line)
    words = obj.get("words")
    if not isinstance(words, list) or not all(isinstance(w, str) for w in words):
        raise CorpusError("field 'words' must be an array of strings", line)
    raw_targets = obj.get("targets", [])
    if not isinstance(raw_targets, list):
        raise CorpusError("field 'targets' must be an array", line)
    targets = []
    for t in raw_targets:
        try:
            start, end = t["start"], t["end"]
            if not (isinstance(start, int) and isinstance(end, int)):
                raise TypeError
            polarity = Polarity.parse(t["polarity"])
        except (KeyError, TypeError):
            raise CorpusError("target needs integer 'start', 'end' and a 'polarity'", line) from None
        except ValueError as e:
            raise CorpusError(str(e), line) from None
        targets.append(TargetAnnotation(start, end, polarity))
    sid = obj.get("id", default_id)
    return AnnotatedSentence(tuple(words), tuple(targets), str(sid))


def parse_corpus_lines(lines: Iterable[str], name: str = "corpus") -> Corpus:
    sentences = []
    index = 0
    for lineno, text in enumerate(lines, start=1):
        if not text.strip():
            continue
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as e:
            raise CorpusError(f"invalid JSON ({e.msg})", lineno) from None
        s = sentence_from_json(obj, lineno, default_id=str(index))
        problems = validate_sentence(s)
        if problems:
            raise CorpusError("; ".join(problems), lineno)
        sentences.append(s)
        index += 1
    return Corpus(tuple(sentences), name)


def parse_corpus(path, format: str = "jsonl") -> Corpus:
    if format != "jsonl":
        raise ValueError(f"unsupported corpus format {format!r}")
    path = Path(path)
    with path.open(encoding="utf-8") as f:
        return parse_corpus_lines(f, name=path.stem)


def write_corpus(corpus: Corpus, path) -> None:
    Path(path).write_text(corpus.to_jsonl(), encoding="utf-8")


# ---------------------------------------------------------------------------
# tag schemes


def spans_to_tags(s: AnnotatedSentence, scheme: Scheme) -> TagSequence:
    tags = ["O"] * len(s.words)
    for t in s.targets:
        suffix = ""
        if scheme is not Scheme.BIO:
            if t.polarity is None:
                raise TagSchemeError(f"target ({t.start}, {t.end}) has no polarity")
            suffix = t.polarity.value
        tags[t.start] = "B" + suffix
        for i in range(t.start + 1, t.end + 1):
            tags[i] = "I" + suffix
    return TagSequence(scheme, tuple(tags))


def _split_tag(tag: str, scheme: Scheme, position: int) -> tuple[str, Polarity | None]:
    head, rest = tag[:1], tag[1:]
    if tag == "O":
        return "O", None
    if head not in ("B", "I"):
        raise TagSchemeError(f"unknown tag {tag!r} at position {position}")
    if scheme is Scheme.BIO:
        if rest:
            raise TagSchemeError(f"BIO tag {tag!r} carries a polarity at position {position}")
        return head, None
    if scheme is Scheme.COLLAPSED and not rest:
        raise TagSchemeError(f"collapsed tag {tag!r} lacks a polarity at position {position}")
    try:
        return head, Polarity.parse(rest) if rest else None
    except ValueError:
        raise TagSchemeError(f"unknown tag {tag!r} at position {position}") from None


def majority_polarity(votes: Sequence[Polarity | None]) -> Polarity:
    """Most frequent polarity; ties resolved in the order +, -, 0."""
    counts = {p: 0 for p in POLARITIES}
    for v in votes:
        if v is not None:
            counts[v] += 1
    best = max(counts.values())
    return next(p for p in POLARITIES if counts[p] == best)


def tags_to_spans(t: TagSequence) -> list[TargetAnnotation]:
    """Inverse of :func:`spans_to_tags`.

    BIO yields spans with ``polarity=None``. Under BIO_PLUS_POLARITY the
    per-word polarities inside one run may disagree and the span takes the
    majority vote; COLLAPSED requires them to agree.
    """
    spans = []
    start = None
    votes: list[Polarity | None] = []

    def close(end):
        if t.scheme is Scheme.BIO:
            pol = None
        elif t.scheme is Scheme.COLLAPSED:
            pol = votes[0]
        else:
            pol = majority_polarity(votes)
        spans.append(TargetAnnotation(start, end, pol))

    for i, tag in enumerate(t.tags):
        head, pol = _split_tag(tag, t.scheme, i)
        if head == "I":
            if start is None:
                raise TagSchemeError(f"I tag without a preceding B at position {i}")
            if t.scheme is Scheme.COLLAPSED and pol is not votes[0]:
                raise TagSchemeError(f"polarity changes inside a target at position {i}")
            votes.append(pol)
            continue
        if start is not None:
            close(i - 1)
            start = None
        if head == "B":
            start, votes = i, [pol]
    if start is not None:
        close(len(t.tags) - 1)
    return spans


# ---------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SyntheticConfig:
    """Generator settings for toy corpora.

    Each target follows a marker word from ``lexicon`` that fixes its
    polarity, so a small model can learn both subtasks. With probability
    ``adjacency_rate`` a marker governs two targets joined by ``connector``
    ("love X and Y"), which exercises adjacent-target decoding.
    """

    sentences: int = 50
    filler_vocab: int = 30
    target_vocab: int = 20
    min_length: int = 6
    max_length: int = 14
    # P(number of targets = i)
    target_count_weights: tuple[float, ...] = (0.0, 0.5, 0.35, 0.15)
    # P(target word count = i + 1)
    target_length_weights: tuple[float, ...] = (0.6, 0.3, 0.1)
    adjacency_rate: float = 0.3
    connector: str = "and"
    lexicon: tuple[tuple[str, str], ...] = (
        ("love", "+"),
        ("great", "+"),
        ("hate", "-"),
        ("awful", "-"),
        ("saw", "0"),
        ("ordered", "0"),
    )

    def check(self) -> None:
        max_target = len(self.target_length_weights)
        if self.sentences < 1:
            raise ValueError("sentences must be >= 1")
        if not 1 <= self.min_length <= self.max_length:
            raise ValueError("need 1 <= min_length <= max_length")
        if max_target + 1 > self.min_length:
            raise ValueError(
                f"max target length {max_target} plus its marker does not fit "
                f"in min sentence length {self.min_length}"
            )
        if not 0.0 <= self.adjacency_rate <= 1.0:
            raise ValueError("adjacency_rate must lie in [0, 1]")
        for weights in (self.target_count_weights, self.target_length_weights):
            if not weights or min(weights) < 0 or sum(weights) <= 0:
                raise ValueError("distribution weights must be non-negative with positive sum")
        if not self.lexicon or self.filler_vocab < 1 or self.target_vocab < 1:
            raise ValueError("lexicon and vocabularies must be non-empty")


def _draw(rng: np.random.Generator, weights: Sequence[float]) -> int:
    w = np.asarray(weights, dtype=float)
    return int(rng.choice(len(w), p=w / w.sum()))


def generate_synthetic(config: SyntheticConfig, seed: int) -> Corpus:
    config.check()
    rng = np.random.default_rng(seed)
    fillers = [f"w{i}" for i in range(config.filler_vocab)]
    nouns = [f"t{i}" for i in range(config.target_vocab)]
    lexicon = [(m, Polarity.parse(p)) for m, p in config.lexicon]
    sentences = []
    for index in range(config.sentences):
        length = int(rng.integers(config.min_length, config.max_length + 1))
        n_targets = _draw(rng, config.target_count_weights)
        # chunk = marker followed by one target, or two targets joined by the connector
        chunks = []
        used = 0
        remaining = n_targets
        while remaining > 0:
            marker, polarity = lexicon[int(rng.integers(len(lexicon)))]
            pair = remaining >= 2 and rng.random() < config.adjacency_rate
            lens = [_draw(rng, config.target_length_weights) + 1 for _ in range(2 if pair else 1)]
            size = 1 + sum(lens) + (1 if pair else 0)
            if used + size > length:
                break
            chunks.append((marker, polarity, lens))
            used += size
            remaining -= len(lens)
        # scatter filler words into the gaps around the chunks
        gaps = rng.multinomial(length - used, [1.0 / (len(chunks) + 1)] * (len(chunks) + 1))
        words: list[str] = []
        targets = []
        for gap, chunk in zip(gaps, chunks + [None]):
            words.extend(fillers[int(j)] for j in rng.integers(len(fillers), size=gap))
            if chunk is None:
                break
            marker, polarity, lens = chunk
            words.append(marker)
            for k, n in enumerate(lens):
                if k:
                    words.append(config.connector)
                start = len(words)
                words.extend(nouns[int(j)] for j in rng.integers(len(nouns), size=n))
                targets.append(TargetAnnotation(start, start + n - 1, polarity))
        sentences.append(AnnotatedSentence(tuple(words), tuple(targets), str(index)))
    return Corpus(tuple(sentences), name=f"synthetic-{seed}")


# ---------------------------------------------------------------------------
# cross-validation


def kfold_split(c: Corpus, k: int, seed: int) -> list[tuple[Corpus, Corpus]]:
    if not 2 <= k <= len(c):
        raise ValueError(f"k={k} out of range for {len(c)} sentences")
    order = np.random.default_rng(seed).permutation(len(c))
    folds = np.array_split(order, k)
    out = []
    for i, test_idx in enumerate(folds):
        test_set = set(int(j) for j in test_idx)
        train = tuple(c.sentences[j] for j in range(len(c)) if j not in test_set)
        test = tuple(c.sentences[j] for j in sorted(test_set))
        out.append((Corpus(train, f"{c.name}-fold{i}-train"), Corpus(test, f"{c.name}-fold{i}-test")))
    return out
