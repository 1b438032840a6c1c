import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spantsa.corpus import Polarity
from spantsa.decoder import (CandidateSpan, DecodeConfig, decode, decode_collapsed, generate_candidates,
                             nms_select, oracle_decode, top_m_indices, word_f1)
from spantsa.evaluation import extraction_prf
from strategies import (RESTAURANT_GOLD, adjacent_targets_scores, random_alignment, random_scores,
                        whole_word_alignment)

POS, NEG, NEU = Polarity.POSITIVE, Polarity.NEGATIVE, Polarity.NEUTRAL
IDENTITY = list(range(12))  # token i stands for word i


def _spans(preds):
    return [(p.start, p.end) for p in preds]


def test_top_m():
    assert top_m_indices([3, 1, 2], 2) == [0, 2]
    assert top_m_indices([5, 5], 1) == [0]
    assert top_m_indices([1, 2, 3], 10) == [2, 1, 0]
    assert top_m_indices([1, 9, 3], 5, valid=np.array([False, True, True])) == [1, 2]


def test_generate_candidates_formula():
    g_s = np.full(6, -20.0)
    g_e = np.full(6, -20.0)
    g_s[2], g_e[3] = 5.0, 4.0
    (c,) = generate_candidates(g_s, g_e, DecodeConfig(gamma=0.0))
    assert (c.start, c.end, c.raw, c.u) == (2, 3, 9.0, 7.0)
    (c,) = generate_candidates(g_s, g_e, DecodeConfig(gamma=0.0, length_penalty=False))
    assert c.u == 9.0
    assert generate_candidates(g_s, g_e, DecodeConfig(gamma=10.0)) == []
    with pytest.raises(ValueError):
        generate_candidates(g_s, g_e[:4], DecodeConfig())


def test_decode_config_checks():
    with pytest.raises(ValueError):
        DecodeConfig(M=0)
    with pytest.raises(ValueError):
        DecodeConfig(K=0)


def test_word_f1():
    t2w = IDENTITY
    a, b = CandidateSpan(2, 4, 0, 0), CandidateSpan(4, 6, 0, 0)
    assert word_f1(a, b, t2w) == pytest.approx(1 / 3)
    assert word_f1(a, a, t2w) == 1.0
    assert word_f1(a, CandidateSpan(5, 6, 0, 0), t2w) == 0.0
    # subword pieces of one word overlap at the word level
    t2w = [-1, 0, 0, 1, -1]
    assert word_f1(CandidateSpan(1, 1, 0, 0), CandidateSpan(2, 3, 0, 0), t2w) == pytest.approx(2 / 3)


def test_nms_hand_trace():
    R = [CandidateSpan(1, 4, 0, 6.0), CandidateSpan(1, 1, 0, 7.0), CandidateSpan(4, 4, 0, 5.0)]
    assert [(c.start, c.end) for c in nms_select(R, 10, IDENTITY)] == [(1, 1), (4, 4)]
    assert [(c.start, c.end) for c in nms_select(R, 1, IDENTITY)] == [(1, 1)]
    overlapping = [CandidateSpan(1, 3, 0, 1.0), CandidateSpan(2, 5, 0, 2.0), CandidateSpan(3, 3, 0, 0.5)]
    assert len(nms_select(overlapping, 10, IDENTITY)) == 1


def test_nms_tie_break():
    R = [CandidateSpan(3, 4, 0, 1.0), CandidateSpan(2, 3, 0, 1.0), CandidateSpan(2, 2, 0, 1.0)]
    assert [(c.start, c.end) for c in nms_select(R, 10, IDENTITY)] == [(2, 2), (3, 4)]


def test_adjacent_targets_length_heuristic():
    g_s, g_e, t2w = adjacent_targets_scores()
    on = decode(g_s, g_e, DecodeConfig(gamma=0.0), t2w)
    assert _spans(on) == [(1, 1), (4, 4)]
    assert [p.u for p in on] == [7.0, 6.5]
    off = decode(g_s, g_e, DecodeConfig(gamma=0.0, length_penalty=False), t2w)
    assert _spans(off) == [(1, 4)] and off[0].raw == 9.0
    assert extraction_prf([_spans(on)], [RESTAURANT_GOLD]).f1 == 1.0
    assert extraction_prf([_spans(off)], [RESTAURANT_GOLD]).f1 == 0.0
    no_nms = decode(g_s, g_e, DecodeConfig(gamma=0.0, nms=False), t2w)
    assert _spans(no_nms) == [(1, 1), (4, 4), (1, 4)]


def test_empty_candidates():
    g_s, g_e, t2w = adjacent_targets_scores()
    cfg = DecodeConfig(gamma=100.0)
    assert decode(g_s, g_e, cfg, t2w) == [] == oracle_decode(g_s, g_e, cfg, t2w)


def _instance(data, max_words=12):
    seed = data.draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    n = data.draw(st.integers(1, max_words))
    t2w = random_alignment(rng, n) if data.draw(st.booleans()) else whole_word_alignment(n)
    g_s, g_e = random_scores(rng, len(t2w), integer=data.draw(st.booleans()))
    cfg = DecodeConfig(M=data.draw(st.integers(1, len(t2w) + 2)), K=data.draw(st.integers(1, 10)),
                       gamma=data.draw(st.floats(-5, 10)), length_penalty=data.draw(st.booleans()),
                       nms=data.draw(st.booleans()))
    return g_s, g_e, cfg, t2w


@settings(max_examples=300, deadline=None)
@given(st.data())
def test_decode_matches_oracle(data):
    g_s, g_e, cfg, t2w = _instance(data)
    assert decode(g_s, g_e, cfg, t2w) == oracle_decode(g_s, g_e, cfg, t2w)


@settings(max_examples=300, deadline=None)
@given(st.data())
def test_decode_invariants(data):
    g_s, g_e, cfg, t2w = _instance(data)
    out = decode(g_s, g_e, cfg, t2w)
    assert len(out) <= cfg.K
    S, E = set(top_m_indices(g_s, cfg.M, np.array(t2w) >= 0)), set(top_m_indices(g_e, cfg.M, np.array(t2w) >= 0))
    for p in out:
        assert p.raw >= cfg.gamma
        assert p.token_start in S and p.token_end in E
        assert 0 < p.token_start <= p.token_end < len(t2w) - 1
        length = p.token_end - p.token_start + 1
        assert p.u == (p.raw - length if cfg.length_penalty else p.raw)
    if cfg.nms:
        for i, a in enumerate(out):
            for b in out[i + 1:]:
                assert a.end < b.start or b.end < a.start


@settings(max_examples=100, deadline=None)
@given(st.data())
def test_candidates_monotone_in_gamma(data):
    g_s, g_e, cfg, t2w = _instance(data)
    valid = np.array(t2w) >= 0
    counts = [len(generate_candidates(g_s, g_e, DecodeConfig(M=cfg.M, gamma=g), valid))
              for g in np.linspace(-10, 12, 15)]
    assert all(a >= b for a, b in zip(counts, counts[1:]))


@settings(max_examples=100, deadline=None)
@given(st.data())
def test_saturated_m_is_m_independent(data):
    g_s, g_e, cfg, t2w = _instance(data)
    n = len(t2w)
    a = decode(g_s, g_e, DecodeConfig(M=n, K=cfg.K, gamma=cfg.gamma), t2w)
    b = decode(g_s, g_e, DecodeConfig(M=n + 7, K=cfg.K, gamma=cfg.gamma), t2w)
    assert a == b


def _scores(n, entries):
    """Per-polarity score pairs with given (start, end, g_s, g_e) entries."""
    out = {}
    for pol in (POS, NEG, NEU):
        g_s, g_e = np.full(n, -50.0), np.full(n, -50.0)
        for p, a, b, s, e in entries:
            if p is pol:
                g_s[a], g_e[b] = s, e
        out[pol] = (g_s, g_e)
    return out


def test_collapsed_positive_only():
    t2w = whole_word_alignment(6)
    out = decode_collapsed(_scores(8, [(POS, 2, 3, 5.0, 4.0)]), DecodeConfig(), t2w)
    assert [(p.start, p.end, p.polarity) for p in out] == [(1, 2, POS)]


def test_collapsed_disjoint_union():
    t2w = whole_word_alignment(6)
    out = decode_collapsed(_scores(8, [(POS, 1, 1, 5.0, 4.0), (NEG, 4, 5, 3.0, 3.0)]), DecodeConfig(), t2w)
    assert sorted((p.start, p.end, p.polarity.value) for p in out) == [(0, 0, "+"), (3, 4, "-")]


def test_collapsed_cross_set_overlap():
    # token (2,3): raw 9, u 7 positive; token (3,4): raw 8, u 6 negative
    t2w = whole_word_alignment(6)
    scores = _scores(8, [(POS, 2, 3, 5.0, 4.0), (NEG, 3, 4, 4.0, 4.0)])
    out = decode_collapsed(scores, DecodeConfig(), t2w)
    assert [(p.token_start, p.token_end, p.polarity, p.u) for p in out] == [(2, 3, POS, 7.0)]
    raw = decode_collapsed(scores, DecodeConfig(), t2w, resolve_overlaps=False)
    assert len(raw) == 2
