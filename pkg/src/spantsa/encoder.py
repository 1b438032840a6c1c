"""Desk-scale Transformer encoder with exact gradients.

Input rows are the sum of token, position and segment embeddings. Blocks use
the pre-normalization layout::

    x = x + Dropout(Attention(LayerNorm(x)))
    x = x + Dropout(FFN(LayerNorm(x)))

followed by a final LayerNorm when at least one block is present. With zero
blocks the output is the embedding sum itself. All arithmetic is float64.

Parameters live in a flat ``dict[str, np.ndarray]`` so that optimizers,
checkpoints and the gradient checker can treat every model uniformly.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .tokenizer import TokenizedSentence

LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    n_layers: int = 2
    hidden: int = 32
    heads: int = 2
    ffn_mult: int = 4
    dropout: float = 0.1
    max_positions: int = 128

    def check(self) -> None:
        if self.n_layers < 0:
            raise ValueError("n_layers must be >= 0")
        if self.hidden < 1 or self.heads < 1 or self.hidden % self.heads:
            raise ValueError(f"hidden size {self.hidden} not divisible by {self.heads} heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.vocab_size < 1 or self.max_positions < 1 or self.ffn_mult < 1:
            raise ValueError("vocab_size, max_positions and ffn_mult must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def _uniform(rng, shape, fan_in, fan_out):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_params(cfg: EncoderConfig, seed: int) -> dict[str, np.ndarray]:
    """Scaled-uniform (Glorot) weights, U(-0.1, 0.1) embeddings, zero biases,
    unit LayerNorm gains."""
    cfg.check()
    rng = np.random.default_rng(seed)
    h, f = cfg.hidden, cfg.hidden * cfg.ffn_mult
    p = {
        "tok_emb": rng.uniform(-0.1, 0.1, size=(cfg.vocab_size, h)),
        "pos_emb": rng.uniform(-0.1, 0.1, size=(cfg.max_positions, h)),
        "seg_emb": rng.uniform(-0.1, 0.1, size=(1, h)),
    }
    for i in range(cfg.n_layers):
        b = f"blocks.{i}."
        p[b + "ln1.g"] = np.ones(h)
        p[b + "ln1.b"] = np.zeros(h)
        for name in ("wq", "wk", "wv", "wo"):
            p[b + "attn." + name] = _uniform(rng, (h, h), h, h)
            p[b + "attn.b" + name[1]] = np.zeros(h)
        p[b + "ln2.g"] = np.ones(h)
        p[b + "ln2.b"] = np.zeros(h)
        p[b + "ffn.w1"] = _uniform(rng, (h, f), h, f)
        p[b + "ffn.b1"] = np.zeros(f)
        p[b + "ffn.w2"] = _uniform(rng, (f, h), f, h)
        p[b + "ffn.b2"] = np.zeros(h)
    if cfg.n_layers:
        p["ln_f.g"] = np.ones(h)
        p["ln_f.b"] = np.zeros(h)
    return p


# ---------------------------------------------------------------------------
# primitives


def _layer_norm(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv)


def _layer_norm_back(dy, g, cache):
    xhat, inv = cache
    dg = (dy * xhat).sum(0)
    db = dy.sum(0)
    dxhat = dy * g
    dx = inv * (dxhat - dxhat.mean(-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(-1, keepdims=True))
    return dx, dg, db


def _gelu(z):
    t = np.tanh(_GELU_C * (z + 0.044715 * z ** 3))
    return 0.5 * z * (1.0 + t), t


def _gelu_back(dy, z, t):
    dt = _GELU_C * (1.0 + 3 * 0.044715 * z * z)
    return dy * (0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * dt)


def softmax(x, axis=-1):
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


class _Dropout:
    """Inverted dropout drawing masks from one seeded stream in call order."""

    def __init__(self, rate: float, seed: int | None, active: bool):
        self.rate = rate
        self.active = active and rate > 0.0
        self.rng = np.random.default_rng(seed) if self.active else None

    def __call__(self, x):
        if not self.active:
            return x, None
        mask = (self.rng.random(x.shape) >= self.rate) / (1.0 - self.rate)
        return x * mask, mask


def _ids(ts) -> np.ndarray:
    if isinstance(ts, TokenizedSentence):
        return np.asarray(ts.token_ids, dtype=np.int64)
    return np.asarray(ts, dtype=np.int64)


# ---------------------------------------------------------------------------
# forward / backward


def encode(ts: TokenizedSentence | Sequence[int], p: dict, cfg: EncoderConfig,
           train: bool = False, seed: int | None = None, return_cache: bool = False):
    """Contextual encoding of shape ``(tokens, hidden)``.

    ``train=True`` applies dropout with masks drawn from ``seed``. With
    ``return_cache`` a second value holds everything
    :func:`encode_backward` needs, including the dropout masks.
    """
    ids = _ids(ts)
    T = len(ids)
    if T > cfg.max_positions:
        raise ValueError(f"sequence of {T} tokens exceeds max_positions={cfg.max_positions}")
    drop = _Dropout(cfg.dropout, seed, train)
    x = p["tok_emb"][ids] + p["pos_emb"][:T] + p["seg_emb"][0]
    x, emb_mask = drop(x)
    blocks = []
    A = cfg.heads
    d = cfg.hidden // A
    for i in range(cfg.n_layers):
        b = f"blocks.{i}."
        a, ln1 = _layer_norm(x, p[b + "ln1.g"], p[b + "ln1.b"])
        q = (a @ p[b + "attn.wq"] + p[b + "attn.bq"]).reshape(T, A, d).transpose(1, 0, 2)
        k = (a @ p[b + "attn.wk"] + p[b + "attn.bk"]).reshape(T, A, d).transpose(1, 0, 2)
        v = (a @ p[b + "attn.wv"] + p[b + "attn.bv"]).reshape(T, A, d).transpose(1, 0, 2)
        probs = softmax(q @ k.transpose(0, 2, 1) / math.sqrt(d))
        ctx = (probs @ v).transpose(1, 0, 2).reshape(T, cfg.hidden)
        o = ctx @ p[b + "attn.wo"] + p[b + "attn.bo"]
        o, attn_mask = drop(o)
        x = x + o
        c, ln2 = _layer_norm(x, p[b + "ln2.g"], p[b + "ln2.b"])
        z = c @ p[b + "ffn.w1"] + p[b + "ffn.b1"]
        gz, t = _gelu(z)
        f = gz @ p[b + "ffn.w2"] + p[b + "ffn.b2"]
        f, ffn_mask = drop(f)
        x = x + f
        blocks.append(dict(a=a, ln1=ln1, q=q, k=k, v=v, probs=probs, ctx=ctx,
                           attn_mask=attn_mask, c=c, ln2=ln2, z=z, t=t, gz=gz,
                           ffn_mask=ffn_mask))
    ln_f = None
    if cfg.n_layers:
        x, ln_f = _layer_norm(x, p["ln_f.g"], p["ln_f.b"])
    if not return_cache:
        return x
    return x, dict(ids=ids, emb_mask=emb_mask, blocks=blocks, ln_f=ln_f)


def attention_weights(cache) -> list[np.ndarray]:
    """Per-block attention probabilities, each ``(heads, tokens, tokens)``."""
    return [blk["probs"] for blk in cache["blocks"]]


def encode_backward(cache, p: dict, cfg: EncoderConfig, upstream: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of ``sum(upstream * H)`` with respect to every parameter."""
    ids = cache["ids"]
    T = len(ids)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (T, cfg.hidden):
        raise ValueError(f"upstream gradient shape {upstream.shape} != {(T, cfg.hidden)}")
    grads = {name: np.zeros_like(value) for name, value in p.items()}
    A = cfg.heads
    d = cfg.hidden // A
    dx = upstream
    if cfg.n_layers:
        dx, grads["ln_f.g"], grads["ln_f.b"] = _layer_norm_back(dx, p["ln_f.g"], cache["ln_f"])
    for i in reversed(range(cfg.n_layers)):
        b = f"blocks.{i}."
        blk = cache["blocks"][i]
        # feed-forward branch
        df = dx if blk["ffn_mask"] is None else dx * blk["ffn_mask"]
        grads[b + "ffn.w2"] = blk["gz"].T @ df
        grads[b + "ffn.b2"] = df.sum(0)
        dz = _gelu_back(df @ p[b + "ffn.w2"].T, blk["z"], blk["t"])
        grads[b + "ffn.w1"] = blk["c"].T @ dz
        grads[b + "ffn.b1"] = dz.sum(0)
        dc = dz @ p[b + "ffn.w1"].T
        dln, grads[b + "ln2.g"], grads[b + "ln2.b"] = _layer_norm_back(dc, p[b + "ln2.g"], blk["ln2"])
        dx = dx + dln
        # attention branch
        do = dx if blk["attn_mask"] is None else dx * blk["attn_mask"]
        grads[b + "attn.wo"] = blk["ctx"].T @ do
        grads[b + "attn.bo"] = do.sum(0)
        dctx = (do @ p[b + "attn.wo"].T).reshape(T, A, d).transpose(1, 0, 2)
        probs = blk["probs"]
        dprobs = dctx @ blk["v"].transpose(0, 2, 1)
        dv = probs.transpose(0, 2, 1) @ dctx
        dscores = probs * (dprobs - (dprobs * probs).sum(-1, keepdims=True)) / math.sqrt(d)
        dq = dscores @ blk["k"]
        dk = dscores.transpose(0, 2, 1) @ blk["q"]
        da = np.zeros((T, cfg.hidden))
        for name, dh in (("q", dq), ("k", dk), ("v", dv)):
            dh = dh.transpose(1, 0, 2).reshape(T, cfg.hidden)
            grads[b + "attn.w" + name] = blk["a"].T @ dh
            grads[b + "attn.b" + name] = dh.sum(0)
            da += dh @ p[b + "attn.w" + name].T
        dln, grads[b + "ln1.g"], grads[b + "ln1.b"] = _layer_norm_back(da, p[b + "ln1.g"], blk["ln1"])
        dx = dx + dln
    if cache["emb_mask"] is not None:
        dx = dx * cache["emb_mask"]
    np.add.at(grads["tok_emb"], ids, dx)
    grads["pos_emb"][:T] += dx
    grads["seg_emb"][0] += dx.sum(0)
    return grads


# ---------------------------------------------------------------------------
# precomputed vector files


class VectorFileError(ValueError):
    pass


_BINARY_MAGIC = b"SPANVEC1"


def write_precomputed(path, encodings: Sequence[np.ndarray], precision: int | None = None,
                      binary: bool = False) -> None:
    """Write encodings as ``h=<int> sentences=<int>`` then ``rows=<int>`` blocks.

    ``precision=None`` writes shortest round-trip decimals (exact); an integer
    writes that many significant digits. ``binary=True`` writes a
    little-endian float64 variant instead.
    """
    encodings = [np.asarray(e, dtype=np.float64) for e in encodings]
    h = encodings[0].shape[1] if encodings else 0
    for i, e in enumerate(encodings):
        if e.ndim != 2 or e.shape[1] != h:
            raise VectorFileError(f"encoding {i} has shape {e.shape}, expected (*, {h})")
    if binary:
        with open(path, "wb") as f:
            f.write(_BINARY_MAGIC)
            f.write(np.array([h, len(encodings)], dtype="<i8").tobytes())
            for e in encodings:
                f.write(np.array([len(e)], dtype="<i8").tobytes())
                f.write(e.astype("<f8").tobytes())
        return
    fmt = repr if precision is None else (lambda v: f"{v:.{precision}g}")
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"h={h} sentences={len(encodings)}\n")
        for e in encodings:
            f.write(f"rows={len(e)}\n")
            for row in e:
                f.write(" ".join(fmt(float(v)) for v in row) + "\n")


def _read_binary(path) -> list[np.ndarray]:
    data = Path(path).read_bytes()
    off = len(_BINARY_MAGIC)
    h, count = np.frombuffer(data, dtype="<i8", count=2, offset=off)
    off += 16
    out = []
    for i in range(int(count)):
        (rows,) = np.frombuffer(data, dtype="<i8", count=1, offset=off)
        off += 8
        n = int(rows) * int(h)
        if off + 8 * n > len(data):
            raise VectorFileError(f"sentence {i}: file truncated")
        out.append(np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(int(rows), int(h)).copy())
        off += 8 * n
    return out


def parse_header(line: str, keys: Sequence[str], lineno: int) -> dict[str, int]:
    try:
        fields = dict(part.split("=", 1) for part in line.split())
        return {k: int(fields[k]) for k in keys}
    except (ValueError, KeyError):
        raise VectorFileError(f"line {lineno}: expected '{' '.join(k + '=<int>' for k in keys)}'") from None


def read_vector_blocks(lines, h: int, count: int, start_line: int = 1) -> tuple[list[np.ndarray], int]:
    """Read ``count`` ``rows=<int>`` blocks of width ``h`` from a line iterator."""
    out = []
    lineno = start_line
    for s in range(count):
        lineno += 1
        rows = parse_header(next(lines, ""), ["rows"], lineno)["rows"]
        block = np.empty((rows, h))
        for r in range(rows):
            lineno += 1
            values = next(lines, None)
            if values is None:
                raise VectorFileError(f"sentence {s}: file ends before row {r}")
            parts = values.split()
            if len(parts) != h:
                raise VectorFileError(
                    f"sentence {s} row {r} (line {lineno}): {len(parts)} values, declared h={h}")
            try:
                block[r] = [float(v) for v in parts]
            except ValueError:
                raise VectorFileError(f"line {lineno}: non-numeric value") from None
        out.append(block)
    return out, lineno


def load_precomputed(path, expected_rows: Sequence[int] | None = None) -> list[np.ndarray]:
    """Load encodings; ``expected_rows`` (e.g. tokenized lengths) is checked if given."""
    with open(path, "rb") as fb:
        binary = fb.read(len(_BINARY_MAGIC)) == _BINARY_MAGIC
    if binary:
        encodings = _read_binary(path)
    else:
        with open(path, encoding="utf-8") as f:
            lines = (line.rstrip("\n") for line in f)
            header = parse_header(next(lines, ""), ["h", "sentences"], 1)
            encodings, _ = read_vector_blocks(lines, header["h"], header["sentences"])
    if expected_rows is not None:
        if len(expected_rows) != len(encodings):
            raise VectorFileError(f"{len(encodings)} encodings for {len(expected_rows)} sentences")
        for i, (e, n) in enumerate(zip(encodings, expected_rows)):
            if len(e) != n:
                raise VectorFileError(f"sentence {i}: {len(e)} rows, tokenized length is {n}")
    for i, e in enumerate(encodings):
        if not np.all(np.isfinite(e)):
            raise VectorFileError(f"sentence {i}: non-finite values")
    return encodings
