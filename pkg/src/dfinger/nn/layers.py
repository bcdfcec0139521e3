"""Composite layers built from tensor primitives."""

from __future__ import annotations

import numpy as np

from ..errors import ConfigError
from . import tensor as T


def split_heads(x, heads):
    b, t, d = x.shape
    return x.reshape(b, t, heads, d // heads).transpose(0, 2, 1, 3)


def multihead_attention(q, k, v, heads, params, prefix="att."):
    """Scaled dot-product attention with ``heads`` heads.

    ``q`` is (B, Tq, D); ``k`` and ``v`` are (B, Tk, D).  ``params`` maps
    ``{prefix}{wq,bq,wk,wv,bv,wo,bo}`` to tensors.  There is no key bias:
    it shifts every score of a query equally and cancels in the softmax.  Returns the projected
    output (B, Tq, D) and the attention weights (B, heads, Tq, Tk).
    """
    d = q.shape[-1]
    if d % heads:
        raise ConfigError(f"model width {d} not divisible by {heads} heads")
    p = lambda n: params[prefix + n]  # noqa: E731
    qh = split_heads(T.linear(q, p("wq"), p("bq")), heads)
    kh = split_heads(T.linear(k, p("wk")), heads)
    vh = split_heads(T.linear(v, p("wv"), p("bv")), heads)
    scores = T.matmul(qh, kh.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(d // heads))
    weights = T.softmax(scores, axis=-1)
    ctx = T.matmul(weights, vh).transpose(0, 2, 1, 3).reshape(q.shape[0], q.shape[1], d)
    return T.linear(ctx, p("wo"), p("bo")), weights


def init_attention(store, width, prefix="att."):
    for n in ("q", "k", "v", "o"):
        store.glorot(f"{prefix}w{n}", width, width)
        if n != "k":
            store.zeros(f"{prefix}b{n}", (width,))
