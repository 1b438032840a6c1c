"""Model variants: span pipeline, span joint, span collapsed, and CRF tagging.

A :class:`Model` owns one flat parameter dict. Encoder tensors carry the
prefix ``enc.`` (and ``enc2.`` for the pipeline's second encoder); heads use
``ext.``, ``cls.`` and ``crf.``. Models built on precomputed vectors have no
encoder tensors at all and read their encodings from the example.
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from . import heads
from .corpus import POLARITIES, AnnotatedSentence, Polarity, Scheme, TargetAnnotation, majority_polarity
from .decoder import DecodeConfig, SpanPrediction, decode, decode_collapsed
from .encoder import EncoderConfig, encode, encode_backward, init_params
from .seeding import derive_seed
from .tagger import (CRF, crf_nll, emission_scores, gold_paths, init_crf, paths_to_tags, tagger_predict,
                     tagsets_for, viterbi_decode)
from .tokenizer import TokenizedSentence, Vocabulary, tokenize, word_span_to_token_span


class Variant(enum.Enum):
    PIPELINE = "pipeline"
    JOINT = "joint"
    COLLAPSED = "collapsed"
    TAG = "tag"


@dataclass(frozen=True)
class TrainConfig:
    variant: Variant = Variant.JOINT
    lr: float = 1e-3
    warmup: float = 0.1
    epochs: int = 3
    batch_size: int = 32
    dropout: float = 0.1
    seed: int = 0
    # encoder shape
    n_layers: int = 2
    hidden: int = 32
    heads: int = 2
    ffn_mult: int = 4
    max_positions: int = 128
    vocab_size: int = 1000
    subword: bool = False
    lowercase: bool = False
    # decoding; gamma=None picks the threshold on the training corpus
    M: int = 20
    K: int = 10
    gamma: float | None = None
    resolve_overlaps: bool = True
    # tagging baseline
    tag_scheme: Scheme = Scheme.COLLAPSED
    crf_constrained: bool = True

    def check(self) -> None:
        if self.lr <= 0:
            raise ValueError("learning rate must be > 0")
        if not 0.0 <= self.warmup < 1.0 or not 0.0 <= self.dropout < 1.0:
            raise ValueError("warmup and dropout must lie in [0, 1)")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    def to_dict(self) -> dict:
        out = {}
        for k, v in asdict(self).items():
            out[k] = v.value if isinstance(v, enum.Enum) else v
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        out = {}
        for k, v in d.items():
            if k not in kinds:
                raise ValueError(f"unknown training option {k!r}")
            if k == "variant":
                v = Variant(v)
            elif k == "tag_scheme":
                v = Scheme(v)
            out[k] = v
        return cls(**out)

    def decode_config(self, gamma: float | None = None) -> DecodeConfig:
        g = gamma if gamma is not None else (self.gamma if self.gamma is not None else 0.0)
        return DecodeConfig(M=self.M, K=self.K, gamma=g)


@dataclass
class Example:
    """One sentence prepared for training or inference."""

    sentence: AnnotatedSentence
    tokens: TokenizedSentence
    # gold targets as (token start, token end, polarity)
    token_spans: list[tuple[int, int, Polarity]]
    encoding: np.ndarray | None = None


def make_example(s: AnnotatedSentence, vocab: Vocabulary, encoding=None) -> Example:
    ts = tokenize(s, vocab)
    spans = [(*word_span_to_token_span(ts, t.start, t.end), t.polarity) for t in s.targets]
    if encoding is not None and len(encoding) != len(ts):
        raise ValueError(f"sentence {s.id}: encoding has {len(encoding)} rows, expected {len(ts)}")
    return Example(s, ts, spans, encoding)


class Model:
    def __init__(self, config: TrainConfig, vocab: Vocabulary, params: dict[str, np.ndarray],
                 precomputed: bool = False, hidden: int | None = None, gamma: float | None = None):
        self.config = config
        self.vocab = vocab
        self.params = params
        self.precomputed = precomputed
        self.hidden = hidden if hidden is not None else config.hidden
        self.gamma = gamma
        if config.variant is Variant.TAG:
            self.tagsets = tagsets_for(config.tag_scheme, config.crf_constrained)

    # ------------------------------------------------------------------ setup

    @classmethod
    def initialize(cls, config: TrainConfig, vocab: Vocabulary, precomputed_hidden: int | None = None) -> "Model":
        config.check()
        seed = config.seed
        precomputed = precomputed_hidden is not None
        h = precomputed_hidden if precomputed else config.hidden
        params: dict[str, np.ndarray] = {}
        model = cls(config, vocab, params, precomputed=precomputed, hidden=h)
        if not precomputed:
            for group in model.encoder_groups():
                enc = init_params(model.encoder_config(), derive_seed(seed, group))
                params.update({f"{group}.{k}": v for k, v in enc.items()})
        rng = np.random.default_rng(derive_seed(seed, "heads"))
        v = config.variant
        if v in (Variant.PIPELINE, Variant.JOINT):
            params.update(heads.init_extractor(h, rng))
            params.update(heads.init_classifier(h, rng))
        elif v is Variant.COLLAPSED:
            params.update(heads.init_collapsed_extractor(h, rng))
        else:
            for name, ts in model.tagsets.items():
                params.update(init_crf(ts, h, rng, f"crf.{name}."))
        return model

    def encoder_config(self) -> EncoderConfig:
        c = self.config
        return EncoderConfig(len(self.vocab), c.n_layers, c.hidden, c.heads, c.ffn_mult,
                             c.dropout, c.max_positions)

    def encoder_groups(self) -> list[str]:
        """Encoder name per loss part; the pipeline trains two encoders."""
        if self.config.variant is Variant.PIPELINE:
            return ["enc", "enc2"]
        return ["enc"]

    def parts(self) -> dict[str, list[str]]:
        """Loss parts computed on each encoder group."""
        v = self.config.variant
        if v is Variant.PIPELINE:
            return {"enc": ["L"], "enc2": ["J"]}
        if v is Variant.JOINT:
            return {"enc": ["L", "J"]}
        if v is Variant.COLLAPSED:
            return {"enc": ["C"]}
        return {"enc": ["T"]}

    def example(self, s: AnnotatedSentence, encoding=None) -> Example:
        return make_example(s, self.vocab, encoding)

    # ---------------------------------------------------------------- forward

    def encode(self, ex: Example, group: str = "enc", train: bool = False, seed: int | None = None):
        if self.precomputed:
            if ex.encoding is None:
                raise ValueError(f"sentence {ex.sentence.id}: model expects precomputed vectors")
            return ex.encoding, None
        sub = {k[len(group) + 1:]: v for k, v in self.params.items() if k.startswith(group + ".")}
        return encode(ex.tokens, sub, self.encoder_config(), train=train, seed=seed, return_cache=True)

    def head_loss(self, H, ex: Example, parts: Sequence[str]):
        """Loss, head gradients and ``dL/dH`` for the requested parts on one encoding."""
        total = 0.0
        grads: dict[str, np.ndarray] = {}
        dH = np.zeros_like(H)

        def add(loss, g, d):
            nonlocal total, dH
            total += loss
            for k, v in g.items():
                grads[k] = grads[k] + v if k in grads else v
            dH = dH + d

        for part in parts:
            if part == "L":
                add(*heads.extraction_head_loss(H, [(a, b) for a, b, _ in ex.token_spans], self.params))
            elif part == "J":
                for a, b, pol in ex.token_spans:
                    add(*heads.classify_span_loss(H, a, b, self.params, pol))
            elif part == "C":
                add(*heads.collapsed_head_loss(H, ex.token_spans, self.params))
            elif part == "T":
                add(*self._crf_loss(H, ex))
            else:
                raise ValueError(f"unknown loss part {part!r}")
        return total, grads, dH

    def _crf_loss(self, H, ex: Example):
        rows = ex.tokens.first_pieces()
        paths = gold_paths(ex.sentence, self.config.tag_scheme, self.tagsets)
        total = 0.0
        grads = {}
        dH = np.zeros_like(H)
        for name, ts in self.tagsets.items():
            p = f"crf.{name}."
            W = self.params[p + "emit"]
            em = emission_scores(H, W, rows)
            nll, d_em, d_trans, d_start, d_stop = crf_nll(em, paths[name], CRF.from_params(self.params, ts, p))
            total += nll
            grads[p + "emit"] = d_em.T @ H[rows]
            grads[p + "trans"] = d_trans
            grads[p + "start"] = d_start
            grads[p + "stop"] = d_stop
            np.add.at(dH, rows, d_em @ W)
        return total, grads, dH

    def loss_and_grads(self, ex: Example, parts: dict[str, list[str]] | None = None,
                       train: bool = False, seed: int | None = None):
        """Sentence loss and gradients for every parameter touched.

        ``parts`` maps encoder groups to loss parts and defaults to the
        variant's full objective.
        """
        parts = self.parts() if parts is None else parts
        total = 0.0
        grads: dict[str, np.ndarray] = {}
        for group, group_parts in parts.items():
            dseed = None if seed is None else derive_seed(seed, group)
            H, cache = self.encode(ex, group, train=train, seed=dseed)
            loss, g, dH = self.head_loss(H, ex, group_parts)
            total += loss
            for k, v in g.items():
                grads[k] = grads[k] + v if k in grads else v
            if cache is not None:
                sub = {k[len(group) + 1:]: v for k, v in self.params.items() if k.startswith(group + ".")}
                for k, v in encode_backward(cache, sub, self.encoder_config(), dH).items():
                    grads[f"{group}.{k}"] = v
        return total, grads

    # -------------------------------------------------------------- inference

    def span_scores(self, ex: Example):
        """Boundary scores of the extraction encoder: a ``(g_s, g_e)`` pair, or
        a dict by polarity for the collapsed variant."""
        H, _ = self.encode(ex, "enc")
        if self.config.variant is Variant.COLLAPSED:
            return heads.collapsed_boundary_scores(H, self.params)
        return heads.boundary_scores(H, self.params["ext.w_s"], self.params["ext.w_e"])

    def decode_config(self, **overrides) -> DecodeConfig:
        base = self.config.decode_config(self.gamma)
        return DecodeConfig(**{**asdict(base), **overrides})

    def extract(self, ex: Example, cfg: DecodeConfig | None = None) -> list[SpanPrediction]:
        """Extraction step only (polarity filled in for the collapsed variant)."""
        cfg = cfg or self.decode_config()
        scores = self.span_scores(ex)
        t2w = ex.tokens.token_to_word
        if self.config.variant is Variant.COLLAPSED:
            return decode_collapsed(scores, cfg, t2w, resolve_overlaps=self.config.resolve_overlaps)
        return decode(scores[0], scores[1], cfg, t2w)

    def classify_spans(self, ex: Example, token_spans) -> list[Polarity]:
        group = "enc2" if self.config.variant is Variant.PIPELINE else "enc"
        H, _ = self.encode(ex, group)
        return [heads.predict_polarity(H, a, b, self.params)[0] for a, b in token_spans]

    def predict(self, ex: Example, cfg: DecodeConfig | None = None) -> list[SpanPrediction]:
        v = self.config.variant
        if v is Variant.TAG:
            return [SpanPrediction(t.start, t.end, float("nan"), float("nan"),
                                   *word_span_to_token_span(ex.tokens, t.start, t.end), t.polarity)
                    for t in self.tag(ex)]
        spans = self.extract(ex, cfg)
        if v is Variant.COLLAPSED or not spans:
            return spans
        pols = self.classify_spans(ex, [(s.token_start, s.token_end) for s in spans])
        return [SpanPrediction(s.start, s.end, s.raw, s.u, s.token_start, s.token_end, p)
                for s, p in zip(spans, pols)]

    def tag(self, ex: Example) -> list[TargetAnnotation]:
        if self.config.variant is not Variant.TAG:
            raise ValueError("tagging requires a model trained with the tag variant")
        H, _ = self.encode(ex, "enc")
        return tagger_predict(H, ex.tokens.first_pieces(), self.params, self.config.tag_scheme, self.tagsets)

    def classify_gold(self, ex: Example) -> list[Polarity]:
        """Polarity of each gold target, isolating the classification subtask."""
        v = self.config.variant
        if v in (Variant.PIPELINE, Variant.JOINT):
            return self.classify_spans(ex, [(a, b) for a, b, _ in ex.token_spans])
        if v is Variant.COLLAPSED:
            # best polarity-specific boundary score on the gold span
            scores = self.span_scores(ex)
            return [max(POLARITIES, key=lambda p: scores[p][0][a] + scores[p][1][b])
                    for a, b, _ in ex.token_spans]
        # tagger: majority of the per-word polarities its path assigns inside the span
        H, _ = self.encode(ex, "enc")
        rows = ex.tokens.first_pieces()
        paths = {}
        for name, ts in self.tagsets.items():
            p = f"crf.{name}."
            paths[name] = viterbi_decode(emission_scores(H, self.params[p + "emit"], rows),
                                         CRF.from_params(self.params, ts, p))
        tags = paths_to_tags(paths, self.config.tag_scheme, self.tagsets).tags
        out = []
        for t in ex.sentence.targets:
            votes = [Polarity.parse(tag[1:]) if len(tag) > 1 else None for tag in tags[t.start:t.end + 1]]
            out.append(majority_polarity(votes))
        return out
