"""Word to token conversion with [CLS]/[SEP] framing and alignment tables."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from pathlib import Path

from .corpus import AnnotatedSentence, Corpus

UNK, CLS, SEP = "[UNK]", "[CLS]", "[SEP]"
RESERVED = (UNK, CLS, SEP)
CONTINUATION = "##"
# Framing positions carry this in token_to_word.
NO_WORD = -1


class SequenceTooLong(ValueError):
    pass


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    subword: bool = False
    lowercase: bool = False
    max_length: int = 128

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        if self.tokens[: len(RESERVED)] != RESERVED:
            raise ValueError(f"vocabulary must start with the reserved tokens {RESERVED}")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        object.__setattr__(self, "_ids", {t: i for i, t in enumerate(self.tokens)})

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def id(self, token: str) -> int:
        return self._ids.get(token, self._ids[UNK])

    @property
    def cls_id(self) -> int:
        return self._ids[CLS]

    @property
    def sep_id(self) -> int:
        return self._ids[SEP]

    @property
    def unk_id(self) -> int:
        return self._ids[UNK]

    def pieces(self, word: str) -> list[int]:
        if self.lowercase:
            word = word.lower()
        if word in self._ids or not self.subword:
            return [self.id(word)]
        # greedy longest-match-first; an unsplittable word becomes [UNK]
        out = []
        start = 0
        while start < len(word):
            end = len(word)
            while end > start:
                piece = word[start:end] if start == 0 else CONTINUATION + word[start:end]
                if piece in self._ids:
                    out.append(self._ids[piece])
                    break
                end -= 1
            else:
                return [self.unk_id]
            start = end
        return out

    def save(self, path) -> None:
        header = f"# vocabulary size={len(self)} subword={int(self.subword)} lowercase={int(self.lowercase)}\n"
        Path(path).write_text(header + "".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path, **kwargs) -> "Vocabulary":
        return cls.from_lines(Path(path).read_text(encoding="utf-8").splitlines(), **kwargs)

    @classmethod
    def from_lines(cls, lines, **kwargs) -> "Vocabulary":
        tokens = []
        for line in lines:
            # "# " comments only before the first token; "##x" pieces are tokens
            if not tokens and (line.startswith("# ") or line == "#"):
                continue
            if line:
                tokens.append(line)
        return cls(tuple(tokens), **kwargs)


def build_vocab(c: Corpus, max_size: int, subword: bool = False,
                lowercase: bool = False, max_length: int = 128) -> Vocabulary:
    """Keep the most frequent word types (ties: lexicographic order).

    In subword mode every character seen in the corpus is added first, both
    as a word-initial piece and as a ``##`` continuation, so any word can be
    spelled out; frequent whole words fill the remaining slots.
    """
    if max_size < len(RESERVED) + 1:
        raise ValueError(f"max_size must be at least {len(RESERVED) + 1}")
    if len(c) == 0:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    counts = Counter()
    for s in c:
        counts.update(w.lower() if lowercase else w for w in s.words)
    ranked = sorted(counts, key=lambda w: (-counts[w], w))
    tokens = list(RESERVED)
    if subword:
        chars = Counter()
        for w, n in counts.items():
            chars[w[0]] += n
            for ch in w[1:]:
                chars[CONTINUATION + ch] += n
        for piece in sorted(chars, key=lambda p: (-chars[p], p)):
            if len(tokens) >= max_size:
                break
            tokens.append(piece)
    seen = set(tokens)
    for w in ranked:
        if len(tokens) >= max_size:
            break
        if w not in seen:
            tokens.append(w)
            seen.add(w)
    return Vocabulary(tuple(tokens), subword=subword, lowercase=lowercase, max_length=max_length)


@dataclass(frozen=True)
class TokenizedSentence:
    token_ids: tuple[int, ...]
    token_to_word: tuple[int, ...]
    word_to_token_range: tuple[tuple[int, int], ...]

    def __len__(self) -> int:
        return len(self.token_ids)

    @property
    def n_words(self) -> int:
        return len(self.word_to_token_range)

    def first_pieces(self) -> list[int]:
        return [a for a, _ in self.word_to_token_range]


def tokenize(s: AnnotatedSentence, v: Vocabulary) -> TokenizedSentence:
    ids = [v.cls_id]
    to_word = [NO_WORD]
    ranges = []
    for w_index, word in enumerate(s.words):
        pieces = v.pieces(word)
        first = len(ids)
        ids.extend(pieces)
        to_word.extend([w_index] * len(pieces))
        ranges.append((first, len(ids) - 1))
    ids.append(v.sep_id)
    to_word.append(NO_WORD)
    if len(ids) > v.max_length:
        raise SequenceTooLong(
            f"sentence {s.id or '?'} needs {len(ids)} tokens, limit is {v.max_length}"
        )
    return TokenizedSentence(tuple(ids), tuple(to_word), tuple(ranges))


def word_span_to_token_span(ts: TokenizedSentence, a: int, b: int) -> tuple[int, int]:
    if not 0 <= a <= b < ts.n_words:
        raise ValueError(f"invalid word span ({a}, {b}) for {ts.n_words} words")
    return ts.word_to_token_range[a][0], ts.word_to_token_range[b][1]


def token_span_to_word_span(ts: TokenizedSentence, start: int, end: int) -> tuple[int, int]:
    if not 0 <= start <= end < len(ts):
        raise ValueError(f"invalid token span ({start}, {end})")
    a, b = ts.token_to_word[start], ts.token_to_word[end]
    if a == NO_WORD or b == NO_WORD:
        raise ValueError(f"token span ({start}, {end}) touches a framing position")
    return a, b
