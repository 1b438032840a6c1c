"""Exact-match metrics, breakdowns, threshold sweeps and fold aggregation.

Predictions and gold targets are given per sentence as sequences of objects
with ``start``, ``end`` and ``polarity`` attributes (or ``(start, end,
polarity)`` tuples). Matching is one-to-one: a duplicated prediction counts
as a true positive at most as often as the identical gold item occurs.
Every ratio with a zero denominator is reported as 0.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .corpus import Polarity
from .decoder import DecodeConfig, decode, decode_collapsed, generate_candidates
from .heads import framing_mask


@dataclass(frozen=True)
class PRF:
    precision: float
    recall: float
    f1: float
    tp: int
    n_pred: int
    n_gold: int


def _ratio(a, b) -> float:
    return a / b if b else 0.0


def prf_from_counts(tp: int, n_pred: int, n_gold: int) -> PRF:
    p, r = _ratio(tp, n_pred), _ratio(tp, n_gold)
    f1 = _ratio(2 * p * r, p + r)
    return PRF(p, r, f1, tp, n_pred, n_gold)


def _key(item, with_polarity: bool):
    if isinstance(item, tuple):
        start, end, pol = item if len(item) == 3 else (*item, None)
    else:
        start, end, pol = item.start, item.end, item.polarity
    if not with_polarity:
        return (start, end)
    if pol is None:
        raise ValueError(f"span ({start}, {end}) has no polarity; exact-match scoring needs one")
    return (start, end, pol.value if isinstance(pol, Polarity) else str(pol))


def _count(preds, golds, with_polarity: bool) -> tuple[int, int, int]:
    if len(preds) != len(golds):
        raise ValueError(f"{len(preds)} prediction lists for {len(golds)} gold lists")
    tp = n_pred = n_gold = 0
    for p, g in zip(preds, golds):
        pc = Counter(_key(x, with_polarity) for x in p)
        gc = Counter(_key(x, with_polarity) for x in g)
        tp += sum((pc & gc).values())
        n_pred += sum(pc.values())
        n_gold += sum(gc.values())
    return tp, n_pred, n_gold


def exact_match_prf(preds, golds) -> PRF:
    return prf_from_counts(*_count(preds, golds, True))


def extraction_prf(preds, golds) -> PRF:
    return prf_from_counts(*_count(preds, golds, False))


def polarity_accuracy(predicted: Iterable[Polarity], gold: Iterable[Polarity]) -> float | None:
    """Fraction of gold targets classified correctly; None when there are none."""
    predicted, gold = list(predicted), list(gold)
    if len(predicted) != len(gold):
        raise ValueError("predicted and gold polarity lists differ in length")
    if not gold:
        return None
    return sum(p == g for p, g in zip(predicted, gold)) / len(gold)


# ---------------------------------------------------------------------------
# breakdowns

SENTENCE_LENGTH_EDGES = (1, 10, 20, 30, 40)
TARGET_WORD_EDGES = (1, 2, 3, 4)


def bucket_index(value: float, edges: Sequence[float]) -> int:
    """Bucket ``i`` covers ``[edges[i], edges[i+1])``; the last is open-ended
    and values below ``edges[0]`` join the first bucket."""
    i = int(np.searchsorted(edges, value, side="right")) - 1
    return max(i, 0)


def bucket_label(i: int, edges: Sequence[float]) -> str:
    lo = edges[i]
    if i + 1 < len(edges):
        return f"[{lo:g},{edges[i + 1]:g})"
    return f"[{lo:g},inf)"


def bucket_report(preds, golds, axis: str, edges: Sequence[float] | None = None,
                  sentence_lengths: Sequence[int] | None = None,
                  gold_polarity_preds=None) -> list[dict]:
    """Per-bucket exact and extraction metrics.

    ``axis="sentence_length"`` buckets whole sentences by word count (needs
    ``sentence_lengths``); ``axis="target_words"`` buckets each gold and
    predicted span by its own word count. When ``gold_polarity_preds`` (the
    classifier's output on each gold span) is given, per-bucket polarity
    accuracy is added too.
    """
    if axis == "sentence_length":
        edges = tuple(edges or SENTENCE_LENGTH_EDGES)
        if sentence_lengths is None:
            raise ValueError("sentence_length buckets need the sentence lengths")
    elif axis == "target_words":
        edges = tuple(edges or TARGET_WORD_EDGES)
    else:
        raise ValueError(f"unknown axis {axis!r}")
    if any(b <= a for a, b in zip(edges, edges[1:])):
        raise ValueError("bucket edges must be strictly increasing")
    nb = len(edges)
    bp = [[[] for _ in preds] for _ in range(nb)]
    bg = [[[] for _ in golds] for _ in range(nb)]
    acc = [([], []) for _ in range(nb)]
    for i, (p, g) in enumerate(zip(preds, golds)):
        if axis == "sentence_length":
            b = bucket_index(sentence_lengths[i], edges)
            bp[b][i] = list(p)
            bg[b][i] = list(g)
        else:
            for x in p:
                bp[bucket_index(x.end - x.start + 1, edges)][i].append(x)
            for x in g:
                bg[bucket_index(x.end - x.start + 1, edges)][i].append(x)
        if gold_polarity_preds is not None:
            for x, pol in zip(g, gold_polarity_preds[i]):
                b = (bucket_index(sentence_lengths[i], edges) if axis == "sentence_length"
                     else bucket_index(x.end - x.start + 1, edges))
                acc[b][0].append(pol)
                acc[b][1].append(x.polarity)
    rows = []
    for b in range(nb):
        row = {"bucket": bucket_label(b, edges),
               "exact": asdict(exact_match_prf(bp[b], bg[b])),
               "extraction": asdict(extraction_prf(bp[b], bg[b]))}
        if gold_polarity_preds is not None:
            row["polarity_accuracy"] = polarity_accuracy(*acc[b])
            row["polarity_targets"] = len(acc[b][1])
        rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricsReport:
    exact: PRF
    extraction: PRF
    polarity_accuracy: float | None
    sentences: int
    buckets: dict[str, list[dict]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "sentences": self.sentences,
            "exact": asdict(self.exact),
            "extraction": asdict(self.extraction),
            "polarity_accuracy": self.polarity_accuracy,
            "buckets": self.buckets,
        }

    def table(self) -> str:
        lines = [f"{'metric':<12}{'P':>9}{'R':>9}{'F1':>9}{'TP':>7}{'pred':>7}{'gold':>7}"]
        for name, m in (("exact", self.exact), ("extraction", self.extraction)):
            lines.append(f"{name:<12}{m.precision:>9.4f}{m.recall:>9.4f}{m.f1:>9.4f}"
                         f"{m.tp:>7}{m.n_pred:>7}{m.n_gold:>7}")
        acc = "n/a" if self.polarity_accuracy is None else f"{self.polarity_accuracy:.4f}"
        lines.append(f"polarity accuracy (gold spans): {acc}")
        for axis, rows in self.buckets.items():
            lines.append(f"-- by {axis} --")
            for r in rows:
                e = r["exact"]
                lines.append(f"{r['bucket']:<12}{e['precision']:>9.4f}{e['recall']:>9.4f}{e['f1']:>9.4f}"
                             f"{e['tp']:>7}{e['n_pred']:>7}{e['n_gold']:>7}")
        return "\n".join(lines)


def evaluate(preds, golds, sentence_lengths=None, gold_polarity_preds=None,
             axes: Sequence[str] = ()) -> MetricsReport:
    acc = None
    if gold_polarity_preds is not None:
        acc = polarity_accuracy([p for ps in gold_polarity_preds for p in ps],
                                [t.polarity for g in golds for t in g])
    buckets = {axis: bucket_report(preds, golds, axis, sentence_lengths=sentence_lengths,
                                   gold_polarity_preds=gold_polarity_preds) for axis in axes}
    return MetricsReport(exact_match_prf(preds, golds), extraction_prf(preds, golds), acc,
                         len(golds), buckets)


def crossval_aggregate(reports: Sequence[MetricsReport]) -> dict:
    """Unweighted mean of each headline metric over folds, per-fold values kept."""
    if not reports:
        raise ValueError("need at least one fold")
    folds = [r.to_dict() for r in reports]
    mean = {}
    for group in ("exact", "extraction"):
        mean[group] = {k: float(np.mean([f[group][k] for f in folds])) for k in ("precision", "recall", "f1")}
    accs = [f["polarity_accuracy"] for f in folds if f["polarity_accuracy"] is not None]
    mean["polarity_accuracy"] = float(np.mean(accs)) if accs else None
    return {"folds": len(folds), "mean": mean, "per_fold": folds}


# ---------------------------------------------------------------------------
# threshold sweeps

ABLATIONS = {
    "full": dict(length_penalty=True, nms=True),
    "no-nms": dict(length_penalty=True, nms=False),
    "no-length": dict(length_penalty=False, nms=True),
}


def sweep_scores(model, examples) -> list:
    return [model.span_scores(ex) for ex in examples]


def _candidate_count(scores, cfg, valid) -> int:
    if isinstance(scores, dict):
        return sum(len(generate_candidates(gs, ge, cfg, valid)) for gs, ge in scores.values())
    return len(generate_candidates(scores[0], scores[1], cfg, valid))


def gamma_sweep(model, examples, gammas: Sequence[float], configs: Sequence[str] = tuple(ABLATIONS),
                scores=None, map_fn=map):
    """Extraction precision/recall for each threshold and ablation.

    Returns ``(rows, counts)``: ``rows`` holds dicts with keys gamma, config,
    precision, recall, f1, candidates; ``counts[config][i]`` lists the
    pre-suppression candidate count of every sentence at ``gammas[i]``.
    """
    if scores is None:
        scores = list(map_fn(model.span_scores, examples))
    golds = [[(t.start, t.end) for t in ex.sentence.targets] for ex in examples]
    base = model.decode_config()
    rows = []
    counts = {}
    for name in configs:
        counts[name] = []
        for gamma in gammas:
            cfg = DecodeConfig(M=base.M, K=base.K, gamma=float(gamma), **ABLATIONS[name])

            def run(i):
                ex, sc = examples[i], scores[i]
                t2w = ex.tokens.token_to_word
                valid = framing_mask(len(t2w))
                if isinstance(sc, dict):
                    spans = decode_collapsed(sc, cfg, t2w, model.config.resolve_overlaps)
                else:
                    spans = decode(sc[0], sc[1], cfg, t2w)
                return [(s.start, s.end) for s in spans], _candidate_count(sc, cfg, valid)

            results = list(map_fn(run, range(len(examples))))
            preds = [r[0] for r in results]
            per_sentence = [r[1] for r in results]
            counts[name].append(per_sentence)
            m = extraction_prf(preds, golds)
            rows.append({"gamma": float(gamma), "config": name, "precision": m.precision,
                         "recall": m.recall, "f1": m.f1, "candidates": int(sum(per_sentence))})
    return rows, counts


def format_sweep(rows) -> str:
    lines = ["gamma,config,precision,recall,f1,candidates"]
    for r in rows:
        lines.append(f"{r['gamma']!r},{r['config']},{r['precision']!r},{r['recall']!r},{r['f1']!r},{r['candidates']}")
    return "\n".join(lines) + "\n"


def parse_grid(spec: str) -> list[float]:
    """``"a:b:step"`` (inclusive of ``b`` up to rounding) or a comma list."""
    if ":" in spec:
        a, b, step = (float(x) for x in spec.split(":"))
        if step <= 0 or b < a:
            raise ValueError(f"bad grid {spec!r}")
        n = int(math.floor((b - a) / step + 1e-9)) + 1
        return [a + i * step for i in range(n)]
    return [float(x) for x in spec.split(",") if x.strip()]
