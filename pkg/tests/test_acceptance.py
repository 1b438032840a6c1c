"""Acceptance criteria C1-C10; each test prints one PASS/FAIL line."""

import itertools
import json
import time
from pathlib import Path

import numpy as np
import pytest

from spantsa.cli import main
from spantsa.corpus import (POLARITIES, AnnotatedSentence, Polarity, Scheme, SyntheticConfig, TargetAnnotation,
                            generate_synthetic, spans_to_tags, tags_to_spans)
from spantsa.decoder import DecodeConfig, decode, oracle_decode
from spantsa.evaluation import exact_match_prf, extraction_prf, format_sweep, gamma_sweep
from spantsa.model import TrainConfig, Variant
from spantsa.tagger import CRF, brute_force, crf_log_partition, make_tagset, viterbi_decode
from spantsa.training import FULL_SLICES, HEAD_SLICES, gradient_check, predict_corpus, train
from strategies import RESTAURANT_GOLD, adjacent_targets_scores, random_scores

FIXTURE = Path(__file__).parent / "data" / "metric_fixture.json"


def report(tag, ok, detail):
    print(f"\n{tag} {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, detail


def _alignment(rng, n_tokens):
    """token_to_word with ``n_tokens`` positions: framing plus words of 1..3 pieces."""
    inner = n_tokens - 2
    if rng.random() < 0.5:
        return [-1] + list(range(inner)) + [-1]
    t2w, w = [-1], 0
    while len(t2w) - 1 < inner:
        t2w.extend([w] * min(int(rng.integers(1, 4)), inner - (len(t2w) - 1)))
        w += 1
    return t2w + [-1]


@pytest.mark.criterion("C1 decoder equals exhaustive oracle")
def test_c1_decoder_oracle():
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    checked = mismatches = 0
    for n in (5, 10, 30):
        for i in range(500):
            t2w = _alignment(rng, n)
            g_s, g_e = random_scores(rng, n, integer=i % 4 == 0)
            cfg = DecodeConfig(M=(3, 20, n + 2)[i % 3], K=(1, 5, 10)[(i // 3) % 3],
                               gamma=float(rng.uniform(-5, 10)))
            mismatches += decode(g_s, g_e, cfg, t2w) != oracle_decode(g_s, g_e, cfg, t2w)
            checked += 1
    elapsed = time.perf_counter() - t0
    report("C1", mismatches == 0 and elapsed < 10,
           f"{checked} instances, {mismatches} mismatches, {elapsed:.2f}s (< 10s)")


@pytest.mark.criterion("C2 suppression invariants")
def test_c2_nms_invariants():
    rng = np.random.default_rng(202)
    t0 = time.perf_counter()
    violations = 0
    for i in range(10_000):
        n = int(rng.integers(3, 31))
        t2w = _alignment(rng, n)
        g_s, g_e = random_scores(rng, n, integer=i % 3 == 0)
        cfg = DecodeConfig(M=int(rng.integers(1, n + 3)), K=int(rng.integers(1, 11)),
                           gamma=float(rng.uniform(-5, 10)), length_penalty=bool(i % 2))
        out = decode(g_s, g_e, cfg, t2w)
        ok = len(out) <= cfg.K
        ok &= all(p.raw >= cfg.gamma and 0 < p.token_start <= p.token_end < n - 1 for p in out)
        ok &= all(a.end < b.start or b.end < a.start for a, b in itertools.combinations(out, 2))
        violations += not ok
    elapsed = time.perf_counter() - t0
    report("C2", violations == 0 and elapsed < 10,
           f"10000 instances, {violations} violations, {elapsed:.2f}s (< 10s)")


@pytest.mark.criterion("C3 length heuristic ablation")
def test_c3_length_ablation():
    t0 = time.perf_counter()
    g_s, g_e, t2w = adjacent_targets_scores()
    on = [(p.start, p.end) for p in decode(g_s, g_e, DecodeConfig(gamma=0.0), t2w)]
    off = [(p.start, p.end) for p in decode(g_s, g_e, DecodeConfig(gamma=0.0, length_penalty=False), t2w)]
    f_on = extraction_prf([on], [RESTAURANT_GOLD]).f1
    f_off = extraction_prf([off], [RESTAURANT_GOLD]).f1
    elapsed = time.perf_counter() - t0
    report("C3", f_on == 1.0 and f_off == 0.0 and off == [(1, 4)] and elapsed < 1,
           f"penalty on {on} F1 {f_on}, off {off} F1 {f_off}, {elapsed:.3f}s (< 1s)")


@pytest.mark.criterion("C4 gradient fidelity")
def test_c4_gradient_check():
    t0 = time.perf_counter()
    worst = {s: max(gradient_check(s, eps=1e-5).values()) for s in FULL_SLICES + HEAD_SLICES}
    elapsed = time.perf_counter() - t0
    full = max(worst[s] for s in FULL_SLICES)
    head = max(worst[s] for s in HEAD_SLICES)
    report("C4", full <= 1e-4 and head <= 1e-6 and elapsed < 60,
           f"full paths {full:.2e} (<= 1e-4), head paths {head:.2e} (<= 1e-6), {elapsed:.1f}s (< 60s)")


CRF_LABELS = [("A", "B"), ("O", "B", "I"), ("O", "B", "I", "X"), ("O", "B+", "I+", "B-", "I-")]


@pytest.mark.criterion("C5 CRF exhaustive oracles")
def test_c5_crf_oracles():
    rng = np.random.default_rng(505)
    t0 = time.perf_counter()
    z_err, path_mismatch = 0.0, 0
    for i in range(200):
        ts = make_tagset(CRF_LABELS[i % 4], constrained=(i // 4) % 2 == 0)
        k, n = len(ts), 1 + i % 6
        integer = i % 5 == 0  # integer scores create ties in the argmax
        draw = (lambda *s: rng.integers(-2, 3, size=s).astype(float)) if integer else \
            (lambda *s: rng.normal(size=s))
        crf = CRF.from_params({"c.trans": draw(k, k), "c.start": draw(k), "c.stop": draw(k)}, ts, "c.")
        em = draw(n, k)
        log_z, best = brute_force(em, crf)
        z_err = max(z_err, abs(crf_log_partition(em, crf) - log_z))
        path_mismatch += viterbi_decode(em, crf) != best
    elapsed = time.perf_counter() - t0
    report("C5", z_err <= 1e-8 and path_mismatch == 0 and elapsed < 30,
           f"200 parameterizations, max |log Z err| {z_err:.1e}, {path_mismatch} path mismatches, "
           f"{elapsed:.2f}s (< 30s)")


def _random_sentence(rng):
    n = int(rng.integers(1, 16))
    targets, i = [], int(rng.integers(0, 3))
    while i < n and rng.random() < 0.8:
        end = min(i + int(rng.integers(0, 3)), n - 1)
        targets.append(TargetAnnotation(i, end, POLARITIES[int(rng.integers(0, 3))]))
        i = end + 1 + int(rng.integers(0, 3))
    return AnnotatedSentence(tuple(f"w{j}" for j in range(n)), tuple(targets))


@pytest.mark.criterion("C6 tag scheme round trip")
def test_c6_scheme_round_trip():
    rng = np.random.default_rng(606)
    t0 = time.perf_counter()
    sents = [_random_sentence(rng) for _ in range(1000)]
    adjacent = sum(any(a.end + 1 == b.start for a, b in zip(s.targets, s.targets[1:])) for s in sents)
    failures = sum(tags_to_spans(spans_to_tags(s, scheme)) != list(s.targets)
                   for s in sents for scheme in (Scheme.BIO_PLUS_POLARITY, Scheme.COLLAPSED))
    elapsed = time.perf_counter() - t0
    report("C6", failures == 0 and adjacent > 0 and elapsed < 5,
           f"1000 sentences ({adjacent} with adjacent targets) x 2 schemes, {failures} failures, "
           f"{elapsed:.2f}s (< 5s)")


@pytest.mark.criterion("C7 desk-scale learnability")
def test_c7_learnability():
    corpus = generate_synthetic(SyntheticConfig(), 1)
    golds = [list(s.targets) for s in corpus]
    t0 = time.perf_counter()
    f1 = {}
    for variant in (Variant.JOINT, Variant.PIPELINE):
        model = train(corpus, TrainConfig(variant=variant, epochs=300, seed=1)).model
        f1[variant.value] = exact_match_prf(predict_corpus(model, corpus), golds).f1
    elapsed = time.perf_counter() - t0
    report("C7", len(corpus) == 50 and min(f1.values()) >= 0.95 and elapsed <= 300,
           f"train exact F1 joint {f1['joint']:.3f}, pipeline {f1['pipeline']:.3f} (>= 0.95), "
           f"{elapsed:.0f}s (<= 300s)")


@pytest.mark.criterion("C8 metric oracle fixture")
def test_c8_metric_fixture():
    data = json.loads(FIXTURE.read_text())
    conv = lambda items: [(a, b, Polarity.parse(p)) for a, b, p in items]
    preds = [conv(s["pred"]) for s in data["sentences"]]
    golds = [conv(s["gold"]) for s in data["sentences"]]
    ok = len(preds) == 6
    got = {}
    for name, fn in (("exact", exact_match_prf), ("extraction", extraction_prf)):
        m, e = fn(preds, golds), data["expected"][name]
        got[name] = (m.precision, m.recall, m.f1)
        ok &= (m.tp, m.n_pred, m.n_gold) == (e["tp"], e["n_pred"], e["n_gold"])
        ok &= all(abs(getattr(m, f) - e[f][0] / e[f][1]) <= 1e-15 for f in ("precision", "recall", "f1"))
    ok &= got["exact"][2] <= got["extraction"][2]
    fmt = lambda t: "/".join(f"{x:.4f}" for x in t)
    report("C8", ok, f"exact P/R/F1 {fmt(got['exact'])}, extraction {fmt(got['extraction'])}")


@pytest.mark.criterion("C9 threshold sweep sanity")
def test_c9_gamma_sweep():
    corpus = generate_synthetic(SyntheticConfig(), 1)
    model = train(corpus, TrainConfig(epochs=5, n_layers=1, seed=1)).model
    examples = [model.example(s) for s in corpus]
    gammas = list(np.linspace(-10, 10, 20))
    t0 = time.perf_counter()
    rows, counts = gamma_sweep(model, examples, gammas)
    table = format_sweep(rows)
    elapsed = time.perf_counter() - t0
    monotone = all(a >= b for per_gamma in counts.values() for prev, cur in zip(per_gamma, per_gamma[1:])
                   for a, b in zip(prev, cur))
    lines = table.splitlines()
    shape = (lines[0] == "gamma,config,precision,recall,f1,candidates" and len(lines) == 61
             and {r["config"] for r in rows} == {"full", "no-nms", "no-length"})
    report("C9", monotone and shape and elapsed < 30,
           f"3 configs x 20 thresholds, per-sentence counts non-increasing: {monotone}, "
           f"table rows {len(lines) - 1}, {elapsed:.2f}s (< 30s)")


@pytest.mark.criterion("C10 byte-identical reruns")
def test_c10_determinism(tmp_path, capsys):
    c = str(tmp_path / "c.jsonl")
    flags = ["--epochs", "4", "--layers", "1", "--seed", "3"]
    codes = [main(["synth", "--seed", "1", "-o", c])]
    for run in ("a", "b"):
        codes.append(main(["train", "-c", c, "-o", str(tmp_path / f"{run}.ckpt"), *flags]))
    outputs = {}
    for run, threads in (("a", "1"), ("b", "1"), ("c", "4")):
        p, r = tmp_path / f"{run}.pred.jsonl", tmp_path / f"{run}.report.json"
        codes.append(main(["decode", "-m", str(tmp_path / "a.ckpt"), "-c", c, "-o", str(p), "--threads", threads]))
        codes.append(main(["evaluate", "--pred", str(p), "--gold", c, "--axis", "sentence_length",
                           "-o", str(r), "--threads", threads]))
        outputs[run] = (p.read_bytes(), r.read_bytes())
    capsys.readouterr()
    same_model = (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    # the two train manifests differ only in the output path
    same_manifest = ((tmp_path / "a.ckpt.manifest.json").read_text().replace("a.ckpt", "b.ckpt")
                     == (tmp_path / "b.ckpt.manifest.json").read_text())
    same_out = outputs["a"] == outputs["b"] == outputs["c"]
    report("C10", not any(codes) and same_model and same_manifest and same_out,
           f"train rerun identical: {same_model}, manifests match: {same_manifest}, decode/evaluate identical across reruns and "
           f"--threads 4: {same_out}")
