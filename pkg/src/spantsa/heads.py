"""Boundary scoring, span attention pooling and polarity scoring heads.

Every head is a pure dot-product or matrix map without bias terms. Framing
positions ([CLS], [SEP]) are excluded from boundary distributions by filling
their scores with a large negative constant (see :func:`mask_scores`).
"""

from __future__ import annotations

import math

import numpy as np

from .corpus import POLARITIES, Polarity
from .encoder import softmax

# Masked positions get MASK * max(1, max|unmasked score|), always below any
# unmasked score; exp() of it underflows to exactly 0.
MASK = -1e4
N_CLASSES = len(POLARITIES)
POLARITY_SUFFIX = {Polarity.POSITIVE: "pos", Polarity.NEGATIVE: "neg", Polarity.NEUTRAL: "neu"}


def _uniform(rng, shape, fan_in, fan_out):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_extractor(h: int, rng: np.random.Generator, prefix: str = "ext.") -> dict[str, np.ndarray]:
    return {prefix + "w_s": _uniform(rng, h, h, 1), prefix + "w_e": _uniform(rng, h, h, 1)}


def init_collapsed_extractor(h: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    p = {}
    for pol in POLARITIES:
        p.update(init_extractor(h, rng, prefix=f"ext.{POLARITY_SUFFIX[pol]}."))
    return p


def init_classifier(h: int, rng: np.random.Generator, prefix: str = "cls.") -> dict[str, np.ndarray]:
    return {
        prefix + "w_alpha": _uniform(rng, h, h, 1),
        prefix + "W_v": _uniform(rng, (h, h), h, h),
        prefix + "W_p": _uniform(rng, (N_CLASSES, h), h, N_CLASSES),
    }


def collapsed_prefix(pol: Polarity) -> str:
    return f"ext.{POLARITY_SUFFIX[pol]}."


# ---------------------------------------------------------------------------
# extraction


def mask_scores(g: np.ndarray, valid: np.ndarray) -> np.ndarray:
    g = np.array(g, dtype=np.float64)
    scale = max(1.0, float(np.abs(g[valid]).max())) if valid.any() else 1.0
    g[~valid] = MASK * scale
    return g


def framing_mask(n_tokens: int) -> np.ndarray:
    valid = np.ones(n_tokens, dtype=bool)
    valid[0] = valid[-1] = False
    return valid


def boundary_scores(H: np.ndarray, w_s: np.ndarray, w_e: np.ndarray,
                    valid: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Start and end scores ``H @ w``; framing positions masked."""
    H = np.asarray(H, dtype=np.float64)
    if H.ndim != 2 or H.shape[1] != len(w_s) or len(w_s) != len(w_e):
        raise ValueError(f"shape mismatch: H {H.shape}, w_s {np.shape(w_s)}, w_e {np.shape(w_e)}")
    if valid is None:
        valid = framing_mask(len(H))
    return mask_scores(H @ w_s, valid), mask_scores(H @ w_e, valid)


def log_softmax(g: np.ndarray, valid: np.ndarray) -> np.ndarray:
    out = np.full(len(g), -np.inf)
    x = g[valid]
    m = x.max()
    out[valid] = x - m - math.log(np.exp(x - m).sum())
    return out


def extraction_loss(g_s, g_e, y_s, y_e, valid: np.ndarray | None = None):
    """Multi-hot negative log-likelihood over one shared softmax per side.

    Returns ``(loss, d_loss/d_g_s, d_loss/d_g_e)``. A sentence without any
    labelled start contributes zero loss and zero gradient.
    """
    g_s, g_e = np.asarray(g_s, dtype=np.float64), np.asarray(g_e, dtype=np.float64)
    y_s, y_e = np.asarray(y_s, dtype=np.float64), np.asarray(y_e, dtype=np.float64)
    if valid is None:
        valid = framing_mask(len(g_s))
    if np.any(y_s[~valid]) or np.any(y_e[~valid]):
        raise ValueError("boundary labels placed on masked positions")
    if y_s.sum() != y_e.sum():
        raise ValueError("unequal numbers of start and end labels")
    if y_s.sum() == 0:
        return 0.0, np.zeros_like(g_s), np.zeros_like(g_e)
    loss = 0.0
    grads = []
    for g, y in ((g_s, y_s), (g_e, y_e)):
        logp = log_softmax(g, valid)
        loss -= float((y[valid] * logp[valid]).sum())
        p = np.where(valid, np.exp(logp), 0.0)
        grads.append(y.sum() * p - y)
    return loss, grads[0], grads[1]


# ---------------------------------------------------------------------------
# polarity classification


def span_representation(H: np.ndarray, start: int, end: int, w_alpha: np.ndarray):
    """Attention-pooled span vector; returns ``(v, alpha)``.

    ``start``/``end`` are inclusive token positions that must not include the
    framing tokens.
    """
    if not 1 <= start <= end <= len(H) - 2:
        raise ValueError(f"invalid token span ({start}, {end}) for {len(H)} tokens")
    rows = H[start:end + 1]
    alpha = softmax(rows @ w_alpha)
    return alpha @ rows, alpha


def polarity_scores(v: np.ndarray, W_v: np.ndarray, W_p: np.ndarray):
    """Returns ``(g_p, p_p, hidden)`` with ``hidden = tanh(W_v v)``."""
    hidden = np.tanh(W_v @ v)
    g_p = W_p @ hidden
    return g_p, softmax(g_p), hidden


def classification_loss(p_p: np.ndarray, gold: Polarity | int):
    """``(-log p_p[gold], d/d g_p)``."""
    k = gold.index if isinstance(gold, Polarity) else int(gold)
    one_hot = np.zeros(len(p_p))
    one_hot[k] = 1.0
    return -math.log(max(p_p[k], np.finfo(float).tiny)), p_p - one_hot


def classify_span_loss(H, start, end, params, gold, prefix="cls."):
    """Loss of one gold span plus gradients for the head params and ``H``."""
    w_alpha, W_v, W_p = params[prefix + "w_alpha"], params[prefix + "W_v"], params[prefix + "W_p"]
    v, alpha = span_representation(H, start, end, w_alpha)
    g_p, p_p, hidden = polarity_scores(v, W_v, W_p)
    loss, dg = classification_loss(p_p, gold)
    grads = {prefix + "W_p": np.outer(dg, hidden)}
    dpre = (W_p.T @ dg) * (1.0 - hidden * hidden)
    grads[prefix + "W_v"] = np.outer(dpre, v)
    dv = W_v.T @ dpre
    rows = H[start:end + 1]
    dalpha = rows @ dv
    dscore = alpha * (dalpha - alpha @ dalpha)
    grads[prefix + "w_alpha"] = rows.T @ dscore
    dH = np.zeros_like(H)
    dH[start:end + 1] = np.outer(alpha, dv) + np.outer(dscore, w_alpha)
    return loss, grads, dH


def predict_polarity(H, start, end, params, prefix="cls.") -> tuple[Polarity, np.ndarray]:
    v, _ = span_representation(H, start, end, params[prefix + "w_alpha"])
    _, p_p, _ = polarity_scores(v, params[prefix + "W_v"], params[prefix + "W_p"])
    return POLARITIES[int(np.argmax(p_p))], p_p


# ---------------------------------------------------------------------------
# label construction and collapsed extraction


def boundary_labels(n_tokens: int, token_spans) -> tuple[np.ndarray, np.ndarray]:
    y_s, y_e = np.zeros(n_tokens), np.zeros(n_tokens)
    for a, b in token_spans:
        if not 1 <= a <= b <= n_tokens - 2:
            raise ValueError(f"token span ({a}, {b}) touches framing positions")
        y_s[a] = 1.0
        y_e[b] = 1.0
    return y_s, y_e


def extraction_head_loss(H, token_spans, params, prefix="ext."):
    """Boundary loss plus gradients for ``w_s``, ``w_e`` and ``H``."""
    w_s, w_e = params[prefix + "w_s"], params[prefix + "w_e"]
    valid = framing_mask(len(H))
    g_s, g_e = boundary_scores(H, w_s, w_e, valid)
    y_s, y_e = boundary_labels(len(H), token_spans)
    loss, dg_s, dg_e = extraction_loss(g_s, g_e, y_s, y_e, valid)
    grads = {prefix + "w_s": H.T @ dg_s, prefix + "w_e": H.T @ dg_e}
    dH = np.outer(dg_s, w_s) + np.outer(dg_e, w_e)
    return loss, grads, dH


def collapsed_boundary_scores(H, params) -> dict[Polarity, tuple[np.ndarray, np.ndarray]]:
    return {
        pol: boundary_scores(H, params[collapsed_prefix(pol) + "w_s"], params[collapsed_prefix(pol) + "w_e"])
        for pol in POLARITIES
    }


def collapsed_head_loss(H, token_spans_with_polarity, params):
    """Sum of three per-polarity boundary losses."""
    total = 0.0
    grads = {}
    dH = np.zeros_like(H)
    for pol in POLARITIES:
        spans = [(a, b) for a, b, p in token_spans_with_polarity if p is pol]
        loss, g, d = extraction_head_loss(H, spans, params, prefix=collapsed_prefix(pol))
        total += loss
        grads.update(g)
        dH += d
    return total, grads, dH
