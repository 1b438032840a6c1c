"""Self-describing text checkpoint.

Layout::

    spantsa-checkpoint version=1
    [config]
    <key>=<JSON value>          one line per option, plus model facts
    [vocab] size=<n> subword=<0|1> lowercase=<0|1> max_length=<int>
    <token>                     n lines
    [tensors] count=<k>
    tensor name=<name> shape=<d0,d1,...>
    h=<width> sentences=1       vector-file block: rows=<d0> then rows
    rows=<d0>
    ...

Tensor values use the precomputed-vector numeric format with shortest
round-trip decimals, so a save/load cycle is exact.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .encoder import parse_header, read_vector_blocks
from .model import Model, TrainConfig
from .tokenizer import Vocabulary

MAGIC = "spantsa-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(model: Model, extra: dict | None = None) -> str:
    out = [f"{MAGIC} version={VERSION}", "[config]"]
    meta = {**model.config.to_dict(), "precomputed": model.precomputed, "model_hidden": model.hidden,
            "tuned_gamma": model.gamma, **(extra or {})}
    for k, v in meta.items():
        out.append(f"{k}={json.dumps(v)}")
    v = model.vocab
    out.append(f"[vocab] size={len(v)} subword={int(v.subword)} lowercase={int(v.lowercase)} "
               f"max_length={v.max_length}")
    out.extend(v.tokens)
    out.append(f"[tensors] count={len(model.params)}")
    for name in sorted(model.params):
        t = model.params[name]
        width = int(np.prod(t.shape[1:])) if t.ndim > 1 else t.size
        rows = t.shape[0] if t.ndim > 1 else 1
        out.append(f"tensor name={name} shape={','.join(str(d) for d in t.shape)}")
        out.append(f"h={width} sentences=1")
        out.append(f"rows={rows}")
        for row in t.reshape(rows, width):
            out.append(" ".join(repr(float(x)) for x in row))
    return "\n".join(out) + "\n"


def save(model: Model, path, extra: dict | None = None) -> None:
    Path(path).write_text(dumps(model, extra), encoding="utf-8")


def loads(text: str) -> tuple[Model, dict]:
    """Rebuild a model; also returns the extra metadata entries."""
    lines = iter(text.splitlines())
    lineno = 1
    head = next(lines, "")
    if not head.startswith(MAGIC):
        raise CheckpointError("not a spantsa checkpoint")
    version = parse_header(head[len(MAGIC):], ["version"], 1)["version"]
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if next(lines, None) != "[config]":
        raise CheckpointError("missing [config] section")
    lineno += 1
    meta = {}
    for line in lines:
        lineno += 1
        if line.startswith("[vocab]"):
            break
        key, _, value = line.partition("=")
        meta[key] = json.loads(value)
    else:
        raise CheckpointError("missing [vocab] section")
    vh = parse_header(line[len("[vocab]"):], ["size", "subword", "lowercase", "max_length"], lineno)
    tokens = []
    for _ in range(vh["size"]):
        lineno += 1
        tokens.append(next(lines))
    vocab = Vocabulary(tuple(tokens), subword=bool(vh["subword"]), lowercase=bool(vh["lowercase"]),
                       max_length=vh["max_length"])
    line = next(lines, "")
    lineno += 1
    if not line.startswith("[tensors]"):
        raise CheckpointError(f"line {lineno}: missing [tensors] section")
    count = parse_header(line[len("[tensors]"):], ["count"], lineno)["count"]
    params = {}
    for _ in range(count):
        line = next(lines, "")
        lineno += 1
        fields = dict(part.split("=", 1) for part in line.split()[1:])
        if not line.startswith("tensor ") or "name" not in fields or "shape" not in fields:
            raise CheckpointError(f"line {lineno}: expected a tensor header")
        shape = tuple(int(d) for d in fields["shape"].split(",") if d)
        header = parse_header(next(lines, ""), ["h", "sentences"], lineno + 1)
        (block,), lineno = read_vector_blocks(lines, header["h"], 1, lineno + 1)
        params[fields["name"]] = block.reshape(shape)
    config_keys = set(TrainConfig().to_dict())
    cfg = TrainConfig.from_dict({k: v for k, v in meta.items() if k in config_keys})
    model = Model(cfg, vocab, params, precomputed=meta["precomputed"], hidden=meta["model_hidden"],
                  gamma=meta["tuned_gamma"])
    extra = {k: v for k, v in meta.items()
             if k not in config_keys and k not in ("precomputed", "model_hidden", "tuned_gamma")}
    return model, extra


def load(path) -> tuple[Model, dict]:
    return loads(Path(path).read_text(encoding="utf-8"))
