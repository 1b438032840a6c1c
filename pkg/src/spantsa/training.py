"""Optimization: warmup schedule, Adam, variant drivers and gradient checks."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import heads
from .corpus import AnnotatedSentence, Corpus, Polarity, Scheme, TargetAnnotation
from .evaluation import exact_match_prf, extraction_prf
from .model import Example, Model, TrainConfig, Variant
from .seeding import derive_seed
from .decoder import DecodeConfig, decode, decode_collapsed, generate_candidates
from .tokenizer import Vocabulary, build_vocab

log = logging.getLogger(__name__)


def lr_at_step(cfg: TrainConfig, step: int, total: int) -> float:
    """Linear warmup over the first ceil(warmup * total) steps, then linear
    decay reaching 0 at ``total``."""
    if total <= 0:
        raise ValueError("total steps must be > 0")
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    warm = math.ceil(cfg.warmup * total)
    if step < warm:
        return cfg.lr * step / warm
    if total == warm:
        return cfg.lr
    return cfg.lr * (total - step) / (total - warm)


@dataclass
class Adam:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def update(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], rate: float) -> None:
        """In-place bias-corrected update of every tensor present in ``grads``."""
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient in tensor {name!r}")
        self.step += 1
        c1 = 1.0 - self.beta1 ** self.step
        c2 = 1.0 - self.beta2 ** self.step
        for name in sorted(grads):
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[name] -= rate * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _batch_grads(model: Model, batch, parts, seed, epoch):
    total = 0.0
    acc: dict[str, np.ndarray] = {}
    # fixed reduction order: batch order
    for i, ex in batch:
        loss, grads = model.loss_and_grads(ex, parts, train=True,
                                           seed=derive_seed(seed, f"dropout/{epoch}/{i}"))
        total += loss
        for k, g in grads.items():
            if k in acc:
                acc[k] += g
            else:
                acc[k] = g.copy()
    for g in acc.values():
        g /= len(batch)
    return total, acc


def run_phase(model: Model, examples: list[Example], parts, epochs: int, tag: str,
              callback=None) -> list[float]:
    """Optimize the given loss parts; returns the per-epoch summed loss."""
    cfg = model.config
    seed = cfg.seed
    n = len(examples)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = epochs * steps_per_epoch
    rng = np.random.default_rng(derive_seed(seed, f"shuffle/{tag}"))
    opt = Adam()
    trace = []
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            batch = [(int(i), examples[int(i)]) for i in idx]
            loss, grads = _batch_grads(model, batch, parts, seed, f"{tag}/{epoch}")
            opt.update(model.params, grads, lr_at_step(cfg, step, total))
            step += 1
            epoch_loss += loss
        trace.append(epoch_loss)
        log.info("%s epoch %d loss %.6f", tag, epoch + 1, epoch_loss)
        if callback is not None:
            callback(tag, epoch, epoch_loss)
    return trace


@dataclass
class TrainResult:
    model: Model
    trace: dict[str, list[float]]


def train(corpus: Corpus, cfg: TrainConfig, vocab: Vocabulary | None = None,
          encodings: list[np.ndarray] | None = None, callback=None) -> TrainResult:
    """Train a model of ``cfg.variant`` on ``corpus``.

    The pipeline variant trains its extractor (own encoder) and then its
    classifier (second encoder) as two independent phases. The joint variant
    trains both heads on one encoder with the summed loss, feeding gold spans
    to the classifier. With ``encodings`` (precomputed vectors, one per
    sentence) only the heads are trained.
    """
    cfg.check()
    if len(corpus) == 0:
        raise ValueError("cannot train on an empty corpus")
    if cfg.variant is not Variant.TAG and not any(s.targets for s in corpus):
        raise ValueError("span variants need at least one gold target")
    if vocab is None:
        vocab = build_vocab(corpus, cfg.vocab_size, subword=cfg.subword, lowercase=cfg.lowercase,
                            max_length=cfg.max_positions)
    hidden = None if encodings is None else int(encodings[0].shape[1])
    model = Model.initialize(cfg, vocab, precomputed_hidden=hidden)
    examples = [model.example(s, None if encodings is None else encodings[i]) for i, s in enumerate(corpus)]
    trace = {}
    if cfg.epochs > 0:
        if cfg.variant is Variant.PIPELINE:
            ext = [ex for ex in examples if ex.token_spans]
            trace["extractor"] = run_phase(model, ext, {"enc": ["L"]}, cfg.epochs, "extractor", callback)
            trace["classifier"] = run_phase(model, ext, {"enc2": ["J"]}, cfg.epochs, "classifier", callback)
        else:
            trace[cfg.variant.value] = run_phase(model, examples, model.parts(), cfg.epochs,
                                                 cfg.variant.value, callback)
    if cfg.variant is not Variant.TAG:
        model.gamma = cfg.gamma if cfg.gamma is not None else tune_gamma(model, examples)
    return TrainResult(model, trace)


def tune_gamma(model: Model, examples: list[Example], points: int = 41) -> float:
    """Threshold maximizing training-set F1 over an evenly spaced grid.

    The grid spans the observed candidate raw scores; the chosen value is the
    median of the grid points tied for the best F1 (exact-match F1 when the
    model predicts polarities during extraction, extraction F1 otherwise).
    """
    base = model.decode_config(gamma=-np.inf)
    scores = [model.span_scores(ex) for ex in examples]
    raws = []
    for ex, sc in zip(examples, scores):
        pairs = sc.values() if isinstance(sc, dict) else [sc]
        valid = heads.framing_mask(len(ex.tokens))
        for gs, ge in pairs:
            raws.extend(c.raw for c in generate_candidates(gs, ge, base, valid))
    if not raws:
        return 0.0
    grid = np.linspace(min(raws), max(raws), points)
    collapsed = model.config.variant is Variant.COLLAPSED
    golds = [ex.sentence.targets for ex in examples]
    f1s = []
    for g in grid:
        cfg = DecodeConfig(M=base.M, K=base.K, gamma=float(g))
        preds = []
        for ex, sc in zip(examples, scores):
            t2w = ex.tokens.token_to_word
            if collapsed:
                preds.append(decode_collapsed(sc, cfg, t2w, model.config.resolve_overlaps))
            else:
                preds.append(decode(sc[0], sc[1], cfg, t2w))
        f1s.append(exact_match_prf(preds, golds).f1 if collapsed else extraction_prf(preds, golds).f1)
    f1s = np.array(f1s)
    best = np.flatnonzero(f1s == f1s.max())
    return float(grid[best[len(best) // 2]])


def predict_corpus(model: Model, corpus: Corpus, encodings=None, map_fn=map):
    examples = [model.example(s, None if encodings is None else encodings[i]) for i, s in enumerate(corpus)]
    return list(map_fn(model.predict, examples))


# ---------------------------------------------------------------------------
# gradient checking

FULL_SLICES = ("L", "J", "LJ", "collapsed", "crf")
HEAD_SLICES = ("heads-L", "heads-J", "heads-LJ", "heads-collapsed", "crf-only")
# Denominator floor for relative error; keeps gradients that are exactly zero
# (e.g. attention key biases) from turning round-off into large ratios.
REL_FLOOR = 1e-4


def relative_error(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), REL_FLOOR)


def _gradcheck_sentence() -> AnnotatedSentence:
    words = ("i", "love", "windows", "7", "but", "hate", "vista")
    return AnnotatedSentence(words, (TargetAnnotation(2, 3, Polarity.POSITIVE),
                                     TargetAnnotation(6, 6, Polarity.NEGATIVE)), "gradcheck")


def _slice_model(slice_id: str, seed: int, cfg: TrainConfig | None):
    """Model, example, loss parts and the tensors to check for one slice."""
    sentence = _gradcheck_sentence()
    corpus = Corpus((sentence,))
    head_only = slice_id.startswith("heads-") or slice_id == "crf-only"
    base = slice_id.removeprefix("heads-")
    variant = {"L": Variant.JOINT, "J": Variant.JOINT, "LJ": Variant.JOINT,
               "collapsed": Variant.COLLAPSED, "crf": Variant.TAG, "crf-only": Variant.TAG}[base]
    parts = {"L": ["L"], "J": ["J"], "LJ": ["L", "J"], "collapsed": ["C"],
             "crf": ["T"], "crf-only": ["T"]}[base]
    overrides = dict(variant=variant, dropout=0.0, seed=seed, tag_scheme=Scheme.BIO_PLUS_POLARITY)
    cfg = replace(cfg or TrainConfig(), **overrides)
    vocab = build_vocab(corpus, 100, max_length=cfg.max_positions)
    encoding = None
    hidden = None
    if head_only:
        rng = np.random.default_rng(derive_seed(seed, "gradcheck/H"))
        encoding = rng.normal(size=(len(sentence.words) + 2, cfg.hidden))
        hidden = cfg.hidden
    model = Model.initialize(cfg, vocab, precomputed_hidden=hidden)
    # move heads and transitions away from their zero/symmetric initial values
    rng = np.random.default_rng(derive_seed(seed, "gradcheck/params"))
    for k, v in model.params.items():
        if not k.startswith("enc"):
            v += rng.normal(scale=0.3, size=v.shape)
    ex = model.example(sentence, encoding)
    return model, ex, {"enc": parts}


def gradient_check(slice_id: str, seed: int = 0, eps: float = 1e-5, samples: int = 6,
                   cfg: TrainConfig | None = None) -> dict[str, float]:
    """Max relative error between analytic gradients and central differences.

    Samples up to ``samples`` entries per parameter tensor (always including
    the entry with the largest analytic gradient). Returns one maximum per
    tensor.
    """
    if not eps > 0:
        raise ValueError("eps must be > 0")
    if slice_id not in FULL_SLICES + HEAD_SLICES:
        raise ValueError(f"unknown slice {slice_id!r}")
    model, ex, parts = _slice_model(slice_id, seed, cfg)
    _, grads = model.loss_and_grads(ex, parts)
    rng = np.random.default_rng(derive_seed(seed, f"gradcheck/{slice_id}"))
    report = {}
    for name in sorted(model.params):
        p = model.params[name]
        g = grads.get(name, np.zeros_like(p))
        flat = p.reshape(-1)
        candidates = rng.choice(flat.size, size=min(samples - 1, flat.size), replace=False)
        idx = sorted(set(int(i) for i in candidates) | {int(np.argmax(np.abs(g)))})
        worst = 0.0
        for i in idx:
            old = flat[i]
            flat[i] = old + eps
            fp = model.loss_and_grads(ex, parts)[0]
            flat[i] = old - eps
            fm = model.loss_and_grads(ex, parts)[0]
            flat[i] = old
            worst = max(worst, relative_error(g.reshape(-1)[i], (fp - fm) / (2 * eps)))
        report[name] = worst
    return report
