"""Causal attention over full sequences and over cached segments.

``full_causal_attention`` is the quadratic reference path. ``segment_attention``
walks the same sequence block by block against an append-only KV cache and
must agree with the reference to 1e-12 for every block size, which is the
core correctness property everything downstream leans on. Rotary position
embedding (with optional interpolation for context extension) lives here too.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .cache import CacheError, KvCache, update_concat
from .numerics import (
    ShapeError,
    Tensor2,
    add_mask,
    custom_op,
    hstack,
    matmul,
    scale,
    slice_cols,
    slice_rows,
    softmax_cols,
    transpose,
    vstack,
)


@dataclass(frozen=True)
class RopeConfig:
    """Rotary embedding settings.

    ``interpolation_scale`` > 1 squeezes positions into the pretrained range
    when extending the context window (target_context / pretrained_context);
    leave it at 1 otherwise.
    """

    base: float = 10000.0
    interpolation_scale: float = 1.0

    def __post_init__(self):
        if self.base <= 0:
            raise ValueError(f"rope base must be positive, got {self.base}")
        if self.interpolation_scale < 1.0:
            raise ValueError(
                f"interpolation_scale must be >= 1, got {self.interpolation_scale}"
            )


@dataclass
class AttentionParams:
    """Projection weights for one attention layer.

    The per-head projections are stored stacked: rows h*head_dim..(h+1)*head_dim
    of w_q / w_k / w_v belong to head h. w_o maps the concatenated head outputs
    back to the model width.
    """

    w_q: Tensor2
    w_k: Tensor2
    w_v: Tensor2
    w_o: Tensor2
    n_heads: int = 1
    head_dim: int = 0

    def __post_init__(self):
        if self.head_dim == 0:
            self.head_dim = self.w_q.rows // self.n_heads
        inner = self.n_heads * self.head_dim
        for name, w in (("w_q", self.w_q), ("w_k", self.w_k), ("w_v", self.w_v)):
            if w.rows != inner:
                raise ShapeError(f"{name} has {w.rows} rows, expected n_heads*head_dim={inner}")
        if self.w_o.cols != inner:
            raise ShapeError(f"w_o has {self.w_o.cols} cols, expected {inner}")

    def tensors(self):
        return [("w_q", self.w_q), ("w_k", self.w_k), ("w_v", self.w_v), ("w_o", self.w_o)]


@dataclass(frozen=True)
class SegmentStream:
    """A token sequence chunked into blocks of ``block_size``.

    ``position_base`` is the absolute index of the first token, so a stream
    can continue an earlier one (generation after pre-fill). Training demands
    an exact chunking; set ``allow_short_final`` for inference streams whose
    last block may come up short.
    """

    token_ids: np.ndarray
    block_size: int
    position_base: int = 0
    allow_short_final: bool = True

    def __post_init__(self):
        ids = np.asarray(self.token_ids, dtype=np.int64)
        if ids.ndim != 1:
            raise ShapeError("token_ids must be a 1-D sequence")
        object.__setattr__(self, "token_ids", ids)
        if self.block_size < 1:
            raise ValueError(f"block_size must be >= 1, got {self.block_size}")
        if not self.allow_short_final and len(ids) % self.block_size != 0:
            raise ValueError(
                f"length {len(ids)} is not a multiple of block size {self.block_size}"
            )

    def __len__(self) -> int:
        return len(self.token_ids)

    @property
    def n_blocks(self) -> int:
        return -(-len(self.token_ids) // self.block_size)

    def blocks(self):
        """Yield (start, stop, absolute_positions) per block."""
        total = len(self.token_ids)
        for start in range(0, total, self.block_size):
            stop = min(start + self.block_size, total)
            yield start, stop, self.position_base + np.arange(start, stop)


def project_qkv(x: Tensor2, params: AttentionParams) -> tuple[Tensor2, Tensor2, Tensor2]:
    """Linear projections of the input into query/key/value stacks."""
    if x.rows != params.w_q.cols:
        raise ShapeError(f"input has {x.rows} rows, projections expect {params.w_q.cols}")
    return matmul(params.w_q, x), matmul(params.w_k, x), matmul(params.w_v, x)


def apply_rope(x: Tensor2, positions: np.ndarray, cfg: RopeConfig) -> Tensor2:
    """Rotate adjacent row pairs (2i, 2i+1) of each column by its position.

    Pair i of the column at position p turns by p_eff / base^(2i/d) radians
    where p_eff = p / interpolation_scale. Rotation is linear, so the backward
    pass is the same rotation by the negated angle.
    """
    d, t_len = x.shape
    if d % 2 != 0:
        raise ShapeError(f"rotary embedding needs an even row count, got {d}")
    pos = np.asarray(positions, dtype=np.float64)
    if pos.shape != (t_len,):
        raise ShapeError(f"need {t_len} positions, got shape {pos.shape}")
    half = d // 2
    inv_freq = cfg.base ** (-2.0 * np.arange(half) / d)
    ang = np.outer(inv_freq, pos / cfg.interpolation_scale)
    c, s = np.cos(ang), np.sin(ang)
    xe, xo = x.data[0::2, :], x.data[1::2, :]
    out = np.empty_like(x.data)
    out[0::2, :] = xe * c - xo * s
    out[1::2, :] = xe * s + xo * c

    def vjp(g):
        ge, go = g[0::2, :], g[1::2, :]
        gx = np.empty_like(g)
        gx[0::2, :] = ge * c + go * s
        gx[1::2, :] = -ge * s + go * c
        return (gx,)

    return custom_op([x], out, vjp)


def _block_mask(n_cached: int, n_new: int, n_queries: int) -> np.ndarray:
    """Cached keys are visible to every query; same-block keys are causal."""
    mask = np.zeros((n_cached + n_new, n_queries))
    fresh = np.arange(n_new)[:, None] > np.arange(n_queries)[None, :]
    mask[n_cached:, :][fresh] = -np.inf
    return mask


def attend(q: Tensor2, k: Tensor2, v: Tensor2, n_cached: int = 0,
           return_probs: bool = False):
    """Scaled dot-product attention of queries against cached + fresh keys.

    The first ``n_cached`` key columns are past context and fully visible;
    the remaining columns pair off causally with the query columns. Scores
    are scaled by 1/sqrt(d) with d the query row count.
    """
    if k.cols != v.cols:
        raise ShapeError(f"key/value column mismatch: {k.cols} vs {v.cols}")
    if not (0 <= n_cached <= k.cols):
        raise ShapeError(f"n_cached={n_cached} out of range for {k.cols} keys")
    logits = scale(matmul(transpose(k), q), 1.0 / math.sqrt(q.rows))
    probs = softmax_cols(add_mask(logits, _block_mask(n_cached, k.cols - n_cached, q.cols)))
    out = matmul(v, probs)
    if return_probs:
        return out, probs
    return out


def full_causal_attention(q: Tensor2, k: Tensor2, v: Tensor2) -> Tensor2:
    """Reference quadratic path: output column t attends to key columns <= t."""
    if q.cols != k.cols:
        raise ShapeError(f"full attention expects square layout, got {q.cols} queries vs {k.cols} keys")
    return attend(q, k, v, n_cached=0)


def split_heads(x: Tensor2, n_heads: int, head_dim: int) -> list[Tensor2]:
    if x.rows != n_heads * head_dim:
        raise ShapeError(f"cannot split {x.rows} rows into {n_heads} heads of {head_dim}")
    if n_heads == 1:
        return [x]
    return [slice_rows(x, h * head_dim, (h + 1) * head_dim) for h in range(n_heads)]


def segment_attention(
    x: Tensor2,
    stream: SegmentStream,
    params: AttentionParams,
    cache: KvCache,
    rope: RopeConfig | None = None,
) -> tuple[Tensor2, KvCache]:
    """Block-wise attention with an append-only cache.

    Per block: project queries/keys/values, rotate them at their absolute
    positions when ``rope`` is given, attend against everything cached so far
    plus the block itself (causally), then append the block's keys/values to
    the cache. Returns the concatenated per-block outputs (before any output
    projection) and the grown cache.
    """
    if cache.live_entries != 0:
        raise CacheError("segment_attention requires an empty starting cache")
    if len(stream) != x.cols:
        raise ShapeError(f"stream has {len(stream)} tokens but input has {x.cols} columns")
    n_heads, head_dim = params.n_heads, params.head_dim
    outs = []
    for start, stop, positions in stream.blocks():
        xb = slice_cols(x, start, stop)
        q, k, v = project_qkv(xb, params)
        if rope is not None:
            q = vstack([apply_rope(h, positions, rope) for h in split_heads(q, n_heads, head_dim)])
            k = vstack([apply_rope(h, positions, rope) for h in split_heads(k, n_heads, head_dim)])
        n_cached = cache.live_entries
        head_outs = []
        for qh, kh, vh, ck, cv in zip(
            split_heads(q, n_heads, head_dim),
            split_heads(k, n_heads, head_dim),
            split_heads(v, n_heads, head_dim),
            split_heads(cache.keys, n_heads, head_dim),
            split_heads(cache.values, n_heads, head_dim),
        ):
            head_outs.append(attend(qh, hstack([ck, kh]), hstack([cv, vh]), n_cached))
        outs.append(head_outs[0] if n_heads == 1 else vstack(head_outs))
        cache = update_concat(cache, k, v)
    return hstack(outs), cache
