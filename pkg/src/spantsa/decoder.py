"""Heuristic multi-span decoding.

Candidate spans pair a start from the top-M start scores with an end from
the top-M end scores. A pair survives when ``start <= end`` and its raw
score ``g_s[start] + g_e[end]`` reaches ``gamma``. Its ranking score ``u``
subtracts the span length in tokens. Greedy non-maximum suppression then
keeps the best span and discards every remaining candidate that shares a
word with it, until ``K`` spans are kept.

Span length is counted in token positions while overlap is measured on word
sets; the two only differ once words split into several subword pieces.

Ties are broken deterministically: top-M prefers the lower index among
equal scores, and suppression prefers the earlier start, then earlier end.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .corpus import POLARITIES, Polarity
from .heads import MASK
from .tokenizer import NO_WORD


@dataclass(frozen=True)
class DecodeConfig:
    M: int = 20
    K: int = 10
    gamma: float = 0.0
    length_penalty: bool = True
    nms: bool = True

    def __post_init__(self):
        if self.M < 1 or self.K < 1:
            raise ValueError("M and K must be >= 1")


@dataclass(frozen=True)
class CandidateSpan:
    start: int  # token positions, inclusive
    end: int
    raw: float
    u: float


@dataclass(frozen=True)
class SpanPrediction:
    start: int  # word positions, inclusive
    end: int
    raw: float
    u: float
    token_start: int
    token_end: int
    polarity: Polarity | None = None

    def to_json(self) -> dict:
        out = {"start": self.start, "end": self.end}
        if self.polarity is not None:
            out["polarity"] = self.polarity.value
        out["raw"] = self.raw
        out["u"] = self.u
        return out


def _valid_positions(token_to_word: Sequence[int]) -> np.ndarray:
    return np.asarray(token_to_word) != NO_WORD


def top_m_indices(g, M: int, valid: np.ndarray | None = None) -> list[int]:
    """Indices of the ``M`` highest scores among valid positions.

    Without ``valid``, entries at or below the masking constant count as
    masked.
    """
    g = np.asarray(g, dtype=np.float64)
    if valid is None:
        valid = g > MASK
    idx = np.flatnonzero(valid)
    # lexsort: last key is primary -> descending score, then ascending index
    order = idx[np.lexsort((idx, -g[idx]))]
    return [int(i) for i in order[:M]]


def generate_candidates(g_s, g_e, cfg: DecodeConfig,
                        valid: np.ndarray | None = None) -> list[CandidateSpan]:
    g_s = np.asarray(g_s, dtype=np.float64)
    g_e = np.asarray(g_e, dtype=np.float64)
    if g_s.shape != g_e.shape:
        raise ValueError("start and end score vectors differ in length")
    starts = top_m_indices(g_s, cfg.M, valid)
    ends = top_m_indices(g_e, cfg.M, valid)
    out = []
    for s in starts:
        for e in ends:
            if s <= e:
                raw = float(g_s[s] + g_e[e])
                if raw >= cfg.gamma:
                    u = raw - (e - s + 1) if cfg.length_penalty else raw
                    out.append(CandidateSpan(s, e, raw, u))
    return out


def word_span(span: CandidateSpan, token_to_word: Sequence[int]) -> tuple[int, int]:
    return token_to_word[span.start], token_to_word[span.end]


def word_f1(a: CandidateSpan, b: CandidateSpan, token_to_word: Sequence[int]) -> float:
    """Word-level F1 between two token spans."""
    a0, a1 = word_span(a, token_to_word)
    b0, b1 = word_span(b, token_to_word)
    common = max(0, min(a1, b1) - max(a0, b0) + 1)
    if common == 0:
        return 0.0
    return 2.0 * common / ((a1 - a0 + 1) + (b1 - b0 + 1))


def _rank_key(c: CandidateSpan):
    return (-c.u, c.start, c.end)


def nms_select(candidates: Sequence[CandidateSpan], K: int,
               token_to_word: Sequence[int]) -> list[CandidateSpan]:
    kept: list[CandidateSpan] = []
    kept_words: list[tuple[int, int]] = []
    for c in sorted(candidates, key=_rank_key):
        if len(kept) >= K:
            break
        w0, w1 = word_span(c, token_to_word)
        if any(w0 <= k1 and k0 <= w1 for k0, k1 in kept_words):
            continue
        kept.append(c)
        kept_words.append((w0, w1))
    return kept


def _to_predictions(spans, token_to_word, polarity=None) -> list[SpanPrediction]:
    out = []
    for c in spans:
        w0, w1 = word_span(c, token_to_word)
        out.append(SpanPrediction(w0, w1, c.raw, c.u, c.start, c.end, polarity))
    return out


def decode(g_s, g_e, cfg: DecodeConfig, token_to_word: Sequence[int],
           polarity: Polarity | None = None) -> list[SpanPrediction]:
    """Decode one sentence; spans come back in selection order, word coordinates."""
    valid = _valid_positions(token_to_word)
    candidates = generate_candidates(g_s, g_e, cfg, valid)
    if cfg.nms:
        chosen = nms_select(candidates, cfg.K, token_to_word)
    else:
        chosen = sorted(candidates, key=_rank_key)[: cfg.K]
    return _to_predictions(chosen, token_to_word, polarity)


def oracle_decode(g_s, g_e, cfg: DecodeConfig, token_to_word: Sequence[int]) -> list[SpanPrediction]:
    """Exhaustive reference for :func:`decode`.

    Top-M membership is decided by counting how many valid positions beat a
    given one, all ``(i, j)`` pairs are enumerated, and suppression rescans
    explicit word sets. Must agree with :func:`decode` exactly.
    """
    n = len(g_s)
    valid = [token_to_word[i] != NO_WORD for i in range(n)]

    def in_top(g, i):
        if not valid[i]:
            return False
        better = sum(1 for j in range(n) if valid[j] and (g[j] > g[i] or (g[j] == g[i] and j < i)))
        return better < cfg.M

    S = {i for i in range(n) if in_top(g_s, i)}
    E = {j for j in range(n) if in_top(g_e, j)}
    pool = []
    for i in range(n):
        for j in range(i, n):
            if i in S and j in E:
                raw = float(g_s[i] + g_e[j])
                if raw >= cfg.gamma:
                    u = raw - (j - i + 1) if cfg.length_penalty else raw
                    pool.append(CandidateSpan(i, j, raw, u))

    def words(c):
        return set(token_to_word[t] for t in range(c.start, c.end + 1))

    out = []
    while pool and len(out) < cfg.K:
        best = pool[0]
        for c in pool[1:]:
            if (c.u > best.u or (c.u == best.u and (c.start < best.start
                                 or (c.start == best.start and c.end < best.end)))):
                best = c
        out.append(best)
        pool.remove(best)
        if cfg.nms:
            chosen = words(best)
            pool = [c for c in pool if not (chosen & words(c))]
    return _to_predictions(out, token_to_word)


def decode_collapsed(scores: Mapping[Polarity, tuple[np.ndarray, np.ndarray]], cfg: DecodeConfig,
                     token_to_word: Sequence[int], resolve_overlaps: bool = True) -> list[SpanPrediction]:
    """Decode each polarity's scores separately and merge.

    With ``resolve_overlaps`` a span that shares words with a higher-``u``
    span from another polarity is dropped (ties: earlier start, earlier end,
    then polarity order +, -, 0). Otherwise the sets are concatenated.
    """
    per_pol = [decode(scores[pol][0], scores[pol][1], cfg, token_to_word, pol)
               for pol in POLARITIES if pol in scores]
    merged = [s for spans in per_pol for s in spans]
    if not resolve_overlaps:
        return merged
    ranked = sorted(merged, key=lambda s: (-s.u, s.start, s.end, POLARITIES.index(s.polarity)))
    kept: list[SpanPrediction] = []
    for s in ranked:
        if all(s.end < k.start or k.end < s.start for k in kept):
            kept.append(s)
    return kept
