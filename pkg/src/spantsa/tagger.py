"""Sequence-tagging baseline: word emissions plus a linear-chain CRF.

Three tag-set shapes mirror the tagging baselines:

* ``bio``: one CRF over {O, B, I}; spans come back without polarity.
* ``collapsed``: one CRF over {O, B+, I+, B-, I-, B0, I0}.
* ``biop``: two CRFs on the same encoding, one over {O, B, I} and one over
  per-word polarity tags {O, +, -, 0}; each span takes the majority of its
  words' polarity tags, so a multi-word target may receive mixed votes.

Invalid transitions (``O -> I``, start ``-> I``, polarity switch inside a
collapsed run) are pinned to the masking constant unless ``constrained`` is
off.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .corpus import AnnotatedSentence, Scheme, TagSequence, TargetAnnotation, spans_to_tags, tags_to_spans
from .heads import MASK


@dataclass(frozen=True)
class TagSet:
    labels: tuple[str, ...]
    # allowed[i, j]: label i may be followed by label j; allowed_start[j]
    allowed: np.ndarray
    allowed_start: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def index(self, label: str) -> int:
        return self.labels.index(label)


def make_tagset(labels, constrained: bool = True) -> TagSet:
    labels = tuple(labels)
    n = len(labels)
    allowed = np.ones((n, n), dtype=bool)
    start = np.ones(n, dtype=bool)
    if constrained:
        for j, lj in enumerate(labels):
            if lj.startswith("I"):
                start[j] = False
                for i, li in enumerate(labels):
                    allowed[i, j] = li[:1] in ("B", "I") and li[1:] == lj[1:]
    return TagSet(labels, allowed, start)


BIO_LABELS = ("O", "B", "I")
COLLAPSED_LABELS = ("O", "B+", "I+", "B-", "I-", "B0", "I0")
POLARITY_LABELS = ("O", "+", "-", "0")


def tagsets_for(scheme: Scheme, constrained: bool = True) -> dict[str, TagSet]:
    """Named CRF layers used by a tagging scheme."""
    if scheme is Scheme.BIO:
        return {"bio": make_tagset(BIO_LABELS, constrained)}
    if scheme is Scheme.COLLAPSED:
        return {"collapsed": make_tagset(COLLAPSED_LABELS, constrained)}
    return {"bio": make_tagset(BIO_LABELS, constrained), "pol": make_tagset(POLARITY_LABELS, False)}


def init_crf(tagset: TagSet, h: int, rng: np.random.Generator, prefix: str) -> dict[str, np.ndarray]:
    n = len(tagset)
    limit = np.sqrt(6.0 / (h + n))
    return {
        prefix + "emit": rng.uniform(-limit, limit, size=(n, h)),
        prefix + "trans": np.zeros((n, n)),
        prefix + "start": np.zeros(n),
        prefix + "stop": np.zeros(n),
    }


@dataclass
class CRF:
    """Effective CRF scores with invalid transitions pinned to the mask."""

    trans: np.ndarray
    start: np.ndarray
    stop: np.ndarray
    tagset: TagSet

    @classmethod
    def from_params(cls, params, tagset: TagSet, prefix: str) -> "CRF":
        trans = np.where(tagset.allowed, params[prefix + "trans"], MASK)
        start = np.where(tagset.allowed_start, params[prefix + "start"], MASK)
        return cls(trans, start, params[prefix + "stop"].copy(), tagset)


def emission_scores(H: np.ndarray, W: np.ndarray, rows=None) -> np.ndarray:
    """Emissions ``H[rows] @ W.T``; ``rows`` defaults to all but the framing rows."""
    H = np.asarray(H, dtype=np.float64)
    if H.ndim != 2 or H.shape[1] != W.shape[1]:
        raise ValueError(f"shape mismatch: H {H.shape}, projection {W.shape}")
    if rows is None:
        rows = range(1, len(H) - 1)
    return H[list(rows)] @ W.T


def _lse(x, axis):
    m = x.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def _forward(emissions, crf: CRF):
    n = len(emissions)
    alpha = np.empty_like(emissions)
    alpha[0] = crf.start + emissions[0]
    for t in range(1, n):
        alpha[t] = _lse(alpha[t - 1][:, None] + crf.trans, 0) + emissions[t]
    return alpha


def _backward(emissions, crf: CRF):
    n = len(emissions)
    beta = np.empty_like(emissions)
    beta[n - 1] = crf.stop
    for t in range(n - 2, -1, -1):
        beta[t] = _lse(crf.trans + (emissions[t + 1] + beta[t + 1])[None, :], 1)
    return beta


def crf_log_partition(emissions: np.ndarray, crf: CRF) -> float:
    if len(emissions) < 1:
        raise ValueError("need at least one position")
    alpha = _forward(emissions, crf)
    return float(_lse(alpha[-1] + crf.stop, 0))


def path_score(emissions, path, crf: CRF) -> float:
    score = crf.start[path[0]] + crf.stop[path[-1]]
    for t, y in enumerate(path):
        score += emissions[t, y]
        if t:
            score += crf.trans[path[t - 1], y]
    return float(score)


def path_is_valid(path, tagset: TagSet) -> bool:
    return bool(tagset.allowed_start[path[0]]) and all(
        tagset.allowed[a, b] for a, b in zip(path, path[1:]))


def crf_nll(emissions: np.ndarray, gold, crf: CRF):
    """``(nll, d/d emissions, d/d trans, d/d start, d/d stop)`` for one sequence."""
    gold = [int(y) for y in gold]
    if not path_is_valid(gold, crf.tagset):
        raise ValueError(f"gold path {gold} uses an invalid transition")
    alpha = _forward(emissions, crf)
    beta = _backward(emissions, crf)
    log_z = float(_lse(alpha[-1] + crf.stop, 0))
    nll = log_z - path_score(emissions, gold, crf)
    marg = np.exp(alpha + beta - log_z)
    d_em = marg.copy()
    d_trans = np.zeros_like(crf.trans)
    for t in range(1, len(emissions)):
        pair = alpha[t - 1][:, None] + crf.trans + (emissions[t] + beta[t])[None, :] - log_z
        d_trans += np.exp(pair)
    d_start = marg[0].copy()
    d_stop = marg[-1].copy()
    for t, y in enumerate(gold):
        d_em[t, y] -= 1.0
        if t:
            d_trans[gold[t - 1], y] -= 1.0
    d_start[gold[0]] -= 1.0
    d_stop[gold[-1]] -= 1.0
    # pinned entries are constants, not parameters
    d_trans[~crf.tagset.allowed] = 0.0
    d_start[~crf.tagset.allowed_start] = 0.0
    return max(nll, 0.0), d_em, d_trans, d_start, d_stop


def viterbi_decode(emissions: np.ndarray, crf: CRF) -> list[int]:
    """Best-scoring path; among equal scores the lexicographically smallest.

    Suffix maxima are computed right to left, then the path is built left to
    right taking the smallest tag that still attains the optimum.
    """
    n, k = emissions.shape
    best = np.empty((n, k))
    best[n - 1] = crf.stop
    for t in range(n - 2, -1, -1):
        best[t] = (crf.trans + (emissions[t + 1] + best[t + 1])[None, :]).max(1)
    first = crf.start + emissions[0] + best[0]
    path = [int(np.flatnonzero(first == first.max())[0])]
    for t in range(1, n):
        cont = crf.trans[path[-1]] + emissions[t] + best[t]
        path.append(int(np.flatnonzero(cont == cont.max())[0]))
    return path


def brute_force(emissions: np.ndarray, crf: CRF) -> tuple[float, list[int]]:
    """Exhaustive log-partition over valid paths and lexicographically first argmax."""
    n, k = emissions.shape
    scores = []
    best, best_path = -np.inf, None
    for path in itertools.product(range(k), repeat=n):
        if not path_is_valid(path, crf.tagset):
            continue
        s = path_score(emissions, path, crf)
        scores.append(s)
        if s > best:
            best, best_path = s, list(path)
    scores = np.array(scores)
    m = scores.max()
    return float(m + np.log(np.exp(scores - m).sum())), best_path


# ---------------------------------------------------------------------------
# scheme glue


def gold_paths(s: AnnotatedSentence, scheme: Scheme, tagsets: dict[str, TagSet]) -> dict[str, list[int]]:
    out = {}
    if scheme is Scheme.COLLAPSED:
        tags = spans_to_tags(s, Scheme.COLLAPSED).tags
        out["collapsed"] = [tagsets["collapsed"].index(t) for t in tags]
        return out
    bio = spans_to_tags(s, Scheme.BIO).tags
    out["bio"] = [tagsets["bio"].index(t) for t in bio]
    if scheme is Scheme.BIO_PLUS_POLARITY:
        pol = ["O"] * len(s.words)
        for t in s.targets:
            for i in range(t.start, t.end + 1):
                pol[i] = t.polarity.value
        out["pol"] = [tagsets["pol"].index(t) for t in pol]
    return out


def paths_to_tags(paths: dict[str, list[int]], scheme: Scheme, tagsets: dict[str, TagSet]) -> TagSequence:
    if scheme is Scheme.COLLAPSED:
        return TagSequence(scheme, [tagsets["collapsed"].labels[y] for y in paths["collapsed"]])
    bio = [tagsets["bio"].labels[y] for y in paths["bio"]]
    if scheme is Scheme.BIO:
        return TagSequence(scheme, bio)
    pol = [tagsets["pol"].labels[y] for y in paths["pol"]]
    return TagSequence(scheme, [b if b == "O" or p == "O" else b + p for b, p in zip(bio, pol)])


def tagger_predict(H: np.ndarray, word_rows, params, scheme: Scheme,
                   tagsets: dict[str, TagSet], prefix: str = "crf.") -> list[TargetAnnotation]:
    """Viterbi paths for every CRF layer, converted to target spans.

    ``word_rows`` are the encoding rows standing for each word (first piece).
    """
    paths = {}
    for name, ts in tagsets.items():
        p = f"{prefix}{name}."
        em = emission_scores(H, params[p + "emit"], word_rows)
        paths[name] = viterbi_decode(em, CRF.from_params(params, ts, p))
    return tags_to_spans(paths_to_tags(paths, scheme, tagsets))
