"""``spantsa`` command-line entry point.

Exit codes: 0 success, 1 data or validation error, 2 usage error. Every
command that writes files also writes ``<output>.manifest.json`` holding the
full argument echo, the seed, input fingerprints and the tool version.
"""

from __future__ import annotations

import argparse
import difflib
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import asdict
from pathlib import Path

from . import __version__
from . import checkpoint
from .corpus import (Corpus, CorpusError, Polarity, Scheme, SyntheticConfig, TagSchemeError,
                     generate_synthetic, kfold_split, parse_corpus, sentence_from_json, spans_to_tags,
                     validate_sentence, write_corpus)
from .decoder import DecodeConfig
from .encoder import VectorFileError, load_precomputed, write_precomputed
from .evaluation import ABLATIONS, crossval_aggregate, evaluate, format_sweep, gamma_sweep, parse_grid
from .model import TrainConfig, Variant
from .tokenizer import SequenceTooLong
from .training import FULL_SLICES, HEAD_SLICES, gradient_check, predict_corpus, train

log = logging.getLogger("spantsa")

THREADS_ENV = "SPANTSA_THREADS"
FULL_PATH_TOL = 1e-4
HEAD_PATH_TOL = 1e-6


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers


def fingerprint(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(output, args, inputs) -> None:
    echo = {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items())
            if k not in ("func",)}
    manifest = {
        "tool": "spantsa",
        "version": __version__,
        "command": args.command,
        "seed": getattr(args, "seed", None),
        "arguments": echo,
        "inputs": {str(p): fingerprint(p) for p in inputs if p is not None},
    }
    Path(str(output) + ".manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


@contextmanager
def mapper(threads: int):
    if threads <= 1:
        yield map
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            yield pool.map


def load_vectors(path, corpus, model_vocab=None):
    if path is None:
        return None
    from .tokenizer import tokenize

    expected = None
    if model_vocab is not None:
        expected = [len(tokenize(s, model_vocab)) for s in corpus]
    return load_precomputed(path, expected)


def write_jsonl(path, rows) -> None:
    text = "".join(json.dumps(r, ensure_ascii=False) + "\n" for r in rows)
    if path is None:
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


def read_jsonl(path):
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if line.strip():
                try:
                    out.append(json.loads(line))
                except json.JSONDecodeError as e:
                    raise DataError(f"{path}: line {lineno}: invalid JSON ({e.msg})") from None
    return out


def train_config(args) -> TrainConfig:
    return TrainConfig(
        variant=Variant(args.variant), lr=args.lr, warmup=args.warmup, epochs=args.epochs,
        batch_size=args.batch_size, dropout=args.dropout, seed=args.seed, n_layers=args.layers,
        hidden=args.hidden, heads=args.heads, ffn_mult=args.ffn_mult, max_positions=args.max_positions,
        vocab_size=args.vocab_size, subword=args.subword, lowercase=args.lowercase, M=args.M, K=args.K,
        gamma=args.gamma, resolve_overlaps=not args.no_resolve, tag_scheme=Scheme(args.tag_scheme),
        crf_constrained=not args.unconstrained)


def decode_overrides(args, model) -> DecodeConfig:
    base = model.decode_config()
    return DecodeConfig(M=args.M if args.M is not None else base.M,
                        K=args.K if args.K is not None else base.K,
                        gamma=args.gamma if args.gamma is not None else base.gamma,
                        length_penalty=not args.no_length_penalty, nms=not args.no_nms)


def prediction_rows(corpus, preds):
    rows = []
    for s, spans in zip(corpus, preds):
        out = []
        for p in spans:
            d = p.to_json()
            if d.get("raw") != d.get("raw"):  # NaN: tagger spans carry no scores
                d.pop("raw")
                d.pop("u")
            out.append(d)
        rows.append({"id": s.id, "spans": out})
    return rows


# ---------------------------------------------------------------------------
# commands


def cmd_convert(args):
    corpus = parse_corpus(args.corpus)
    scheme = Scheme(args.scheme)
    lines = [" ".join(spans_to_tags(s, scheme).tags) + "\n" for s in corpus]
    if args.output is None:
        sys.stdout.write("".join(lines))
    else:
        Path(args.output).write_text("".join(lines), encoding="utf-8")
        write_manifest(args.output, args, [args.corpus])
    return 0


def cmd_validate(args):
    problems = 0
    with open(args.corpus, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                s = sentence_from_json(json.loads(line), lineno)
                issues = validate_sentence(s)
            except json.JSONDecodeError as e:
                issues = [f"invalid JSON ({e.msg})"]
            except CorpusError as e:
                issues = [str(e).split(": ", 1)[-1]]
            for issue in issues:
                print(f"line {lineno}: {issue}")
                problems += 1
    print(f"{problems} problem(s) found")
    return 1 if problems else 0


def cmd_synth(args):
    cfg = SyntheticConfig(sentences=args.sentences, filler_vocab=args.filler_vocab,
                          target_vocab=args.target_vocab, min_length=args.min_length,
                          max_length=args.max_length, adjacency_rate=args.adjacency_rate)
    corpus = generate_synthetic(cfg, args.seed)
    write_corpus(corpus, args.output)
    write_manifest(args.output, args, [])
    return 0


def cmd_train(args):
    corpus = parse_corpus(args.corpus)
    cfg = train_config(args)
    encodings = load_vectors(args.vectors, corpus) if args.vectors else None
    result = train(corpus, cfg, encodings=encodings)
    checkpoint.save(result.model, args.output,
                    extra={"corpus_fingerprint": corpus.fingerprint(), "loss_trace": result.trace})
    write_manifest(args.output, args, [args.corpus, args.vectors])
    print(f"saved {cfg.variant.value} model to {args.output}"
          + ("" if result.model.gamma is None else f" (gamma={result.model.gamma:.6g})"))
    return 0


def _load_model_and_data(args):
    model, _ = checkpoint.load(args.model)
    corpus = parse_corpus(args.corpus)
    encodings = None
    if model.precomputed:
        if not args.vectors:
            raise UsageError("this model was trained on precomputed vectors; pass --vectors")
        encodings = load_vectors(args.vectors, corpus, model.vocab)
    return model, corpus, encodings


def cmd_decode(args):
    model, corpus, encodings = _load_model_and_data(args)
    if model.config.variant is Variant.TAG:
        raise UsageError("tag models decode with 'tag-decode'")
    cfg = decode_overrides(args, model)
    examples = [model.example(s, None if encodings is None else encodings[i]) for i, s in enumerate(corpus)]
    with mapper(args.threads) as map_fn:
        preds = list(map_fn(lambda ex: model.predict(ex, cfg), examples))
    write_jsonl(args.output, prediction_rows(corpus, preds))
    if args.output:
        write_manifest(args.output, args, [args.model, args.corpus, args.vectors])
    return 0


def cmd_tag_decode(args):
    model, corpus, encodings = _load_model_and_data(args)
    if model.config.variant is not Variant.TAG:
        raise UsageError("tag-decode needs a model trained with --variant tag")
    with mapper(args.threads) as map_fn:
        preds = predict_corpus(model, corpus, encodings, map_fn)
    write_jsonl(args.output, prediction_rows(corpus, preds))
    if args.output:
        write_manifest(args.output, args, [args.model, args.corpus, args.vectors])
    return 0


def cmd_classify(args):
    model, corpus, encodings = _load_model_and_data(args)
    examples = [model.example(s, None if encodings is None else encodings[i]) for i, s in enumerate(corpus)]
    with mapper(args.threads) as map_fn:
        pols = list(map_fn(model.classify_gold, examples))
    rows = [{"id": s.id, "polarities": [p.value for p in ps]} for s, ps in zip(corpus, pols)]
    write_jsonl(args.output, rows)
    gold = [t.polarity for s in corpus for t in s.targets]
    flat = [p for ps in pols for p in ps]
    acc = sum(a == b for a, b in zip(flat, gold)) / len(gold) if gold else None
    print("polarity accuracy (gold spans): " + ("n/a" if acc is None else f"{acc:.4f}"), file=sys.stderr)
    if args.output:
        write_manifest(args.output, args, [args.model, args.corpus, args.vectors])
    return 0


class _Span:
    __slots__ = ("start", "end", "polarity")

    def __init__(self, start, end, polarity):
        self.start, self.end, self.polarity = start, end, polarity


def _aligned(rows, gold: Corpus, what: str):
    if len(rows) != len(gold):
        first = gold[len(rows)].id if len(rows) < len(gold) else rows[len(gold)].get("id")
        raise DataError(f"{what} has {len(rows)} sentences, gold has {len(gold)}; first mismatched id {first!r}")
    for r, s in zip(rows, gold):
        if str(r.get("id")) != s.id:
            raise DataError(f"{what} id {r.get('id')!r} does not match gold id {s.id!r}")


def cmd_evaluate(args):
    gold = parse_corpus(args.gold)
    rows = read_jsonl(args.pred)
    _aligned(rows, gold, "prediction file")
    preds = []
    for r in rows:
        spans = []
        for d in r.get("spans", []):
            if "polarity" not in d:
                raise DataError(f"prediction for id {r.get('id')!r} lacks a polarity")
            spans.append(_Span(int(d["start"]), int(d["end"]), Polarity.parse(d["polarity"])))
        preds.append(spans)
    gold_pols = None
    if args.classified:
        crow = read_jsonl(args.classified)
        _aligned(crow, gold, "classification file")
        gold_pols = [[Polarity.parse(p) for p in r["polarities"]] for r in crow]
        for r, s, ps in zip(crow, gold, gold_pols):
            if len(ps) != len(s.targets):
                raise DataError(f"id {s.id!r}: {len(ps)} polarities for {len(s.targets)} gold targets")
    report = evaluate(preds, [list(s.targets) for s in gold], [len(s) for s in gold], gold_pols,
                      axes=args.axis or ())
    print(report.table())
    if args.output:
        Path(args.output).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
        write_manifest(args.output, args, [args.pred, args.gold, args.classified])
    return 0


def cmd_sweep(args):
    model, corpus, encodings = _load_model_and_data(args)
    if model.config.variant is Variant.TAG:
        raise UsageError("sweeps need a span model")
    configs = ["full"]
    for a in (x.strip() for x in args.ablate.split(",") if x.strip()):
        if f"no-{a}" not in ABLATIONS:
            raise UsageError(f"unknown ablation {a!r} (choose from nms, length)")
        configs.append(f"no-{a}")
    examples = [model.example(s, None if encodings is None else encodings[i]) for i, s in enumerate(corpus)]
    with mapper(args.threads) as map_fn:
        rows, _ = gamma_sweep(model, examples, parse_grid(args.gammas), configs, map_fn=map_fn)
    table = format_sweep(rows)
    if args.output:
        Path(args.output).write_text(table)
        write_manifest(args.output, args, [args.model, args.corpus, args.vectors])
    else:
        sys.stdout.write(table)
    return 0


def cmd_check_grad(args):
    slices = args.slices.split(",") if args.slices else list(FULL_SLICES + HEAD_SLICES)
    report = {}
    ok = True
    for sl in slices:
        errors = gradient_check(sl, seed=args.seed, eps=args.eps)
        tol = HEAD_PATH_TOL if sl in HEAD_SLICES else FULL_PATH_TOL
        worst = max(errors.values())
        passed = bool(worst <= tol)
        ok &= passed
        report[sl] = {"max_relative_error": worst, "tolerance": tol, "passed": passed, "tensors": errors}
        print(f"{sl:<16} max rel err {worst:.3e}  tol {tol:.0e}  {'PASS' if passed else 'FAIL'}")
    if args.output:
        Path(args.output).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
        write_manifest(args.output, args, [])
    return 0 if ok else 1


def cmd_export_vectors(args):
    model, _ = checkpoint.load(args.model)
    if model.precomputed:
        raise UsageError("model has no encoder of its own")
    corpus = parse_corpus(args.corpus)
    group = args.encoder
    if group not in model.encoder_groups():
        raise UsageError(f"model has no encoder {group!r}")
    encodings = [model.encode(model.example(s), group)[0] for s in corpus]
    write_precomputed(args.output, encodings, precision=args.precision, binary=args.binary)
    write_manifest(args.output, args, [args.model, args.corpus])
    return 0


def cmd_kfold(args):
    corpus = parse_corpus(args.corpus)
    folds = kfold_split(corpus, args.k, args.seed)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    reports = []
    for i, (tr, te) in enumerate(folds):
        write_corpus(tr, out / f"fold{i}.train.jsonl")
        write_corpus(te, out / f"fold{i}.test.jsonl")
        if args.run:
            result = train(tr, train_config(args))
            preds = predict_corpus(result.model, te)
            m = result.model
            gold_pols = None
            if m.config.variant is not Variant.TAG or m.config.tag_scheme is not Scheme.BIO:
                gold_pols = [m.classify_gold(m.example(s)) for s in te]
            report = evaluate(preds, [list(s.targets) for s in te], [len(s) for s in te], gold_pols)
            reports.append(report)
            print(f"fold {i}: exact F1 {report.exact.f1:.4f} extraction F1 {report.extraction.f1:.4f}")
    if reports:
        agg = crossval_aggregate(reports)
        (out / "crossval.json").write_text(json.dumps(agg, indent=2, sort_keys=True) + "\n")
        print(f"mean exact F1 over {agg['folds']} folds: {agg['mean']['exact']['f1']:.4f}")
    write_manifest(out / "folds", args, [args.corpus])
    return 0


# ---------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    def __init__(self, *args, **kwargs):
        kwargs.setdefault("allow_abbrev", False)  # prefixes would make recorded commands ambiguous
        super().__init__(*args, **kwargs)

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _add_train_options(p):
    p.add_argument("--variant", choices=[v.value for v in Variant], default="joint")
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--warmup", type=float, default=0.1)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--dropout", type=float, default=0.1)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--hidden", type=int, default=32)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--ffn-mult", type=int, default=4)
    p.add_argument("--max-positions", type=int, default=128)
    p.add_argument("--vocab-size", type=int, default=1000)
    p.add_argument("--subword", action="store_true")
    p.add_argument("--lowercase", action="store_true")
    p.add_argument("--M", type=int, default=20)
    p.add_argument("--K", type=int, default=10)
    p.add_argument("--gamma", type=float, default=None,
                   help="span threshold; default tunes it on the training corpus")
    p.add_argument("--no-resolve", action="store_true",
                   help="collapsed variant: keep cross-polarity overlaps")
    p.add_argument("--tag-scheme", choices=[s.value for s in Scheme], default="collapsed")
    p.add_argument("--unconstrained", action="store_true", help="CRF without transition mask")


def _add_decode_options(p):
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--M", type=int, default=None)
    p.add_argument("--K", type=int, default=None)
    p.add_argument("--no-nms", action="store_true")
    p.add_argument("--no-length-penalty", action="store_true")


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = _Parser(prog="spantsa", description="Span-based targeted sentiment analysis toolkit.")
    parser.add_argument("--version", action="version", version=f"spantsa {__version__}")
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=int(os.environ.get(THREADS_ENV, "1")))
    common.add_argument("--config", help="key=value file; flags override its values")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)
    subs = {}

    def add(name, func, help):
        p = sub.add_parser(name, parents=[common], help=help)
        p.set_defaults(func=func)
        subs[name] = p
        return p

    p = add("convert", cmd_convert, "span annotations to tag lines")
    p.add_argument("-c", "--corpus", required=True)
    p.add_argument("--scheme", choices=[s.value for s in Scheme], required=True)
    p.add_argument("-o", "--output")

    p = add("validate", cmd_validate, "report every annotation problem")
    p.add_argument("-c", "--corpus", required=True)

    p = add("synth", cmd_synth, "generate a synthetic corpus")
    p.add_argument("--sentences", type=int, default=50)
    p.add_argument("--filler-vocab", type=int, default=30)
    p.add_argument("--target-vocab", type=int, default=20)
    p.add_argument("--min-length", type=int, default=6)
    p.add_argument("--max-length", type=int, default=14)
    p.add_argument("--adjacency-rate", type=float, default=0.3)
    p.add_argument("-o", "--output", required=True)

    p = add("train", cmd_train, "train a model")
    p.add_argument("-c", "--corpus", required=True)
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--vectors", help="precomputed encodings; trains the heads only")
    _add_train_options(p)

    for name, func, help in (("decode", cmd_decode, "extract and classify targets"),
                             ("tag-decode", cmd_tag_decode, "decode with a CRF tagging model"),
                             ("classify", cmd_classify, "classify the gold spans' polarity")):
        p = add(name, func, help)
        p.add_argument("-m", "--model", required=True)
        p.add_argument("-c", "--corpus", required=True)
        p.add_argument("-o", "--output")
        p.add_argument("--vectors")
        if name == "decode":
            _add_decode_options(p)

    p = add("evaluate", cmd_evaluate, "score predictions against gold")
    p.add_argument("--pred", required=True)
    p.add_argument("--gold", required=True)
    p.add_argument("--classified", help="output of 'classify' for polarity accuracy")
    p.add_argument("--axis", action="append", choices=["sentence_length", "target_words"])
    p.add_argument("-o", "--output")

    p = add("sweep", cmd_sweep, "precision/recall over a threshold grid")
    p.add_argument("-m", "--model", required=True)
    p.add_argument("-c", "--corpus", required=True)
    p.add_argument("--vectors")
    p.add_argument("--gammas", required=True, help="a:b:step or comma list")
    p.add_argument("--ablate", default="nms,length")
    p.add_argument("-o", "--output")

    p = add("check-grad", cmd_check_grad, "finite-difference gradient check")
    p.add_argument("--slices", help=f"comma list from {', '.join(FULL_SLICES + HEAD_SLICES)}")
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("-o", "--output")

    p = add("export-vectors", cmd_export_vectors, "write encoder outputs as a vector file")
    p.add_argument("-m", "--model", required=True)
    p.add_argument("-c", "--corpus", required=True)
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--encoder", default="enc")
    p.add_argument("--precision", type=int, default=None)
    p.add_argument("--binary", action="store_true")

    p = add("kfold", cmd_kfold, "write k cross-validation folds, optionally train and score each")
    p.add_argument("-c", "--corpus", required=True)
    p.add_argument("-k", type=int, default=10)
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.add_argument("--run", action="store_true", help="train and evaluate on every fold")
    _add_train_options(p)
    return parser, subs


def _read_config(path) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{path}: line {lineno}: expected key=value")
        out[key.strip().lstrip("-").replace("-", "_")] = value.strip()
    return out


def _apply_config(sub: argparse.ArgumentParser, values: dict[str, str]) -> None:
    actions = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, raw in values.items():
        if key not in actions or key in ("config", "help"):
            close = difflib.get_close_matches(key, list(actions), n=1)
            hint = f" (did you mean {close[0]!r}?)" if close else ""
            raise UsageError(f"unknown config key {key!r}{hint}")
        action = actions[key]
        if isinstance(action, argparse._StoreTrueAction):
            defaults[key] = raw.lower() in ("1", "true", "yes", "on")
        else:
            defaults[key] = action.type(raw) if action.type else raw
    sub.set_defaults(**defaults)


def _parse(argv):
    parser, subs = build_parser()
    args, extras = parser.parse_known_args(argv)
    sub = subs[args.command]
    if args.config:
        _apply_config(sub, _read_config(args.config))
        args, extras = parser.parse_known_args(argv)
    if extras:
        options = [o for a in sub._actions for o in a.option_strings]
        hints = []
        for x in extras:
            close = difflib.get_close_matches(x.split("=")[0], options, n=1)
            if close:
                hints.append(f"{x} -> {close[0]}")
        hint = f" (did you mean: {'; '.join(hints)})" if hints else ""
        raise UsageError(f"{sub.prog}: unrecognized arguments: {' '.join(extras)}{hint}")
    return args


def main(argv=None) -> int:
    try:
        args = _parse(sys.argv[1:] if argv is None else argv)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 2
    except (DataError, CorpusError, TagSchemeError, checkpoint.CheckpointError, VectorFileError,
            SequenceTooLong, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
