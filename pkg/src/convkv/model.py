"""Tiny byte-level decoder-only transformer that hosts the cache policies.

Pre-norm residual blocks with rotary attention and a ReLU MLP, a byte
vocabulary of 256, and a tied input/output embedding. Long inputs are
processed block by block against per-layer KV caches, so the attention
working set stays at block x (cache + block) regardless of sequence length;
which cache columns survive between blocks is entirely the policy's call.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import (
    AttentionParams,
    RopeConfig,
    SegmentStream,
    apply_rope,
    attend,
    project_qkv,
    split_heads,
)
from .cache import CacheError, KvCache
from .compressor import ConvHead, new_conv_head
from .numerics import (
    ShapeError,
    Tensor2,
    add,
    cross_entropy_cols,
    embedding_lookup,
    hstack,
    matmul,
    relu,
    rms_norm_cols,
    slice_cols,
    transpose,
    vstack,
)
from .policies import LayerPolicy, PolicySpec

BYTE_VOCAB = 256


@dataclass(frozen=True)
class ModelConfig:
    """Architecture knobs; defaults are the desk-scale test model."""

    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 2
    head_dim: int = 32
    vocab_size: int = BYTE_VOCAB
    max_context: int = 4096
    mlp_ratio: int = 4
    rope_base: float = 10000.0
    interpolation_scale: float = 1.0

    def __post_init__(self):
        if self.vocab_size != BYTE_VOCAB:
            raise ValueError(f"vocab is byte-level, must be {BYTE_VOCAB}")
        if self.d_model != self.n_heads * self.head_dim:
            raise ValueError(
                f"d_model ({self.d_model}) must equal n_heads*head_dim "
                f"({self.n_heads}*{self.head_dim})"
            )
        if self.head_dim % 2 != 0:
            raise ValueError("head_dim must be even for rotary embedding")
        if min(self.n_layers, self.max_context, self.mlp_ratio) < 1:
            raise ValueError("n_layers, max_context and mlp_ratio must be positive")
        if self.interpolation_scale < 1.0:
            raise ValueError("interpolation_scale must be >= 1")

    @property
    def rope(self) -> RopeConfig:
        return RopeConfig(self.rope_base, self.interpolation_scale)

    @property
    def context_limit(self) -> int:
        return int(self.max_context * self.interpolation_scale)

    def to_dict(self) -> dict:
        return {
            "d_model": self.d_model,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "head_dim": self.head_dim,
            "vocab_size": self.vocab_size,
            "max_context": self.max_context,
            "mlp_ratio": self.mlp_ratio,
            "rope_base": self.rope_base,
            "interpolation_scale": self.interpolation_scale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class LayerParams:
    attn: AttentionParams
    attn_gain: Tensor2
    mlp_gain: Tensor2
    mlp_in: Tensor2
    mlp_out: Tensor2


@dataclass
class ModelParams:
    """All weights, plus the optional per-layer compression heads."""

    config: ModelConfig
    embed: Tensor2
    layers: list[LayerParams]
    final_gain: Tensor2
    conv_heads: list[ConvHead] | None = None

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "ModelParams":
        rng = np.random.default_rng(seed)
        scale = 0.02

        def w(rows, cols):
            return Tensor2(rng.normal(0.0, scale, size=(rows, cols)))

        def gain(rows):
            return Tensor2(np.ones((rows, 1)))

        d, hidden = config.d_model, config.d_model * config.mlp_ratio
        layers = []
        for _ in range(config.n_layers):
            attn = AttentionParams(
                w(d, d), w(d, d), w(d, d), w(d, d),
                n_heads=config.n_heads, head_dim=config.head_dim,
            )
            layers.append(LayerParams(attn, gain(d), gain(d), w(hidden, d), w(d, hidden)))
        return cls(config, w(d, config.vocab_size), layers, gain(d))

    def named_base(self) -> list[tuple[str, Tensor2]]:
        """Deterministic (name, tensor) listing of the base weights."""
        out = [("embed", self.embed)]
        for i, layer in enumerate(self.layers):
            prefix = f"layers.{i}"
            out.append((f"{prefix}.attn_gain", layer.attn_gain))
            for name, tensor in layer.attn.tensors():
                out.append((f"{prefix}.attn.{name}", tensor))
            out.append((f"{prefix}.mlp_gain", layer.mlp_gain))
            out.append((f"{prefix}.mlp_in", layer.mlp_in))
            out.append((f"{prefix}.mlp_out", layer.mlp_out))
        out.append(("final_gain", self.final_gain))
        return out

    def named_conv(self) -> list[tuple[str, Tensor2]]:
        if self.conv_heads is None:
            return []
        return [
            (f"conv_heads.{i}.kernels", head.kernels.weights)
            for i, head in enumerate(self.conv_heads)
        ]

    def base_fingerprint(self) -> bytes:
        return b"".join(t.data.tobytes() for _, t in self.named_base())

    def set_trainable(self, which: str) -> list[tuple[str, Tensor2]]:
        """Mark 'base', 'conv', or 'none' tensors trainable; returns that set."""
        for _, t in self.named_base():
            t.requires_grad = False
        for _, t in self.named_conv():
            t.requires_grad = False
        chosen: list[tuple[str, Tensor2]] = []
        if which == "base":
            chosen = self.named_base()
        elif which == "conv":
            if self.conv_heads is None:
                raise CacheError("no conv heads to train")
            chosen = self.named_conv()
        elif which != "none":
            raise ValueError(f"unknown trainable set {which!r}")
        for _, t in chosen:
            t.requires_grad = True
        return chosen

    def install_conv_heads(
        self,
        slots: int,
        kernel_size: int,
        seed: int = 0,
        relu_position: str = "post",
    ) -> None:
        rng = np.random.default_rng(seed)
        self.conv_heads = [
            new_conv_head(
                self.config.d_model, slots, kernel_size,
                rng=rng, relu_position=relu_position, layer_index=i,
            )
            for i in range(self.config.n_layers)
        ]

    def drop_conv_heads(self) -> None:
        self.conv_heads = None


def build_layer_policies(params: ModelParams, spec: PolicySpec) -> list[LayerPolicy]:
    if spec.needs_conv_head:
        if params.conv_heads is None:
            raise CacheError(
                f"policy {spec.name!r} needs conv heads but the model has none; "
                "calibrate first or pick an eviction policy"
            )
        return [spec.build(head) for head in params.conv_heads]
    return [spec.build() for _ in range(params.config.n_layers)]


def _layer_step(
    layer: LayerParams,
    h: Tensor2,
    cache: KvCache,
    positions: np.ndarray,
    rope: RopeConfig,
    policy: LayerPolicy,
    detach_cache: bool,
) -> tuple[Tensor2, KvCache, int]:
    """One residual block over one token block; returns attn matrix entries."""
    n_heads, head_dim = layer.attn.n_heads, layer.attn.head_dim
    b = h.cols
    n_cached = cache.live_entries

    normed = rms_norm_cols(h, layer.attn_gain)
    q, k, v = project_qkv(normed, layer.attn)

    if policy.slot_relative_positions:
        # rolling positions: everything is rotated by its cache slot index
        q_pos = k_pos = n_cached + np.arange(b)
        if n_cached:
            cached_pos = np.arange(n_cached)
            cached_keys = vstack(
                [apply_rope(hk, cached_pos, rope)
                 for hk in split_heads(cache.keys, n_heads, head_dim)]
            )
        else:
            cached_keys = cache.keys
        k_rot = vstack(
            [apply_rope(hk, k_pos, rope) for hk in split_heads(k, n_heads, head_dim)]
        )
        k_for_cache = k  # unrotated; slots get fresh positions every block
    else:
        q_pos = positions
        cached_keys = cache.keys  # already rotated at their absolute positions
        k_rot = vstack(
            [apply_rope(hk, positions, rope) for hk in split_heads(k, n_heads, head_dim)]
        )
        k_for_cache = k_rot
    q_rot = vstack(
        [apply_rope(hq, q_pos, rope) for hq in split_heads(q, n_heads, head_dim)]
    )

    head_outs = []
    probs_sum = None
    for qh, kh, vh, ck, cv in zip(
        split_heads(q_rot, n_heads, head_dim),
        split_heads(k_rot, n_heads, head_dim),
        split_heads(v, n_heads, head_dim),
        split_heads(cached_keys, n_heads, head_dim),
        split_heads(cache.values, n_heads, head_dim),
    ):
        kv_k = hstack([ck, kh])
        kv_v = hstack([cv, vh])
        if policy.needs_probs:
            out, probs = attend(qh, kv_k, kv_v, n_cached, return_probs=True)
            probs_sum = probs.data if probs_sum is None else probs_sum + probs.data
        else:
            out = attend(qh, kv_k, kv_v, n_cached)
        head_outs.append(out)
    attn_out = matmul(layer.attn.w_o, head_outs[0] if n_heads == 1 else vstack(head_outs))
    h = add(h, attn_out)

    mlp_normed = rms_norm_cols(h, layer.mlp_gain)
    h = add(h, matmul(layer.mlp_out, relu(matmul(layer.mlp_in, mlp_normed))))

    new_cache = policy.update(cache, k_for_cache, v, attn_probs=probs_sum)
    if detach_cache:
        new_cache = new_cache.detach()
    return h, new_cache, (n_cached + b) * b


def forward_segmented(
    params: ModelParams,
    tokens: np.ndarray,
    policy: PolicySpec,
    block_size: int,
    *,
    position_base: int = 0,
    caches: list[KvCache] | None = None,
    trace=None,
    block_offset: int = 0,
    detach_cache: bool = False,
    require_exact_blocks: bool = False,
) -> tuple[Tensor2, list[KvCache]]:
    """Run the model over ``tokens`` in blocks, returning logits per position.

    ``caches`` continues an existing decoding session (fresh per-policy caches
    otherwise). When ``trace`` is given, one record per (block, layer) of live
    cache entries and allocated attention-score entries is appended via its
    ``record_block`` hook. ``detach_cache`` cuts the gradient graph at block
    boundaries during calibration.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size and tokens.max() >= params.config.vocab_size:
        raise ValueError(f"token id {tokens.max()} out of range for byte vocab")
    if tokens.size and tokens.min() < 0:
        raise ValueError("negative token id")
    stream = SegmentStream(
        tokens, block_size, position_base, allow_short_final=not require_exact_blocks
    )
    layer_policies = build_layer_policies(params, policy)
    if caches is None:
        caches = [lp.empty_cache(params.config.d_model) for lp in layer_policies]
    else:
        if len(caches) != params.config.n_layers:
            raise ShapeError(f"need {params.config.n_layers} caches, got {len(caches)}")
        caches = list(caches)

    rope = params.config.rope
    logit_blocks = []
    tokens_seen = position_base
    for block_index, (start, stop, positions) in enumerate(stream.blocks()):
        h = embedding_lookup(params.embed, tokens[start:stop])
        attn_entries = []
        for li, (layer, lp) in enumerate(zip(params.layers, layer_policies)):
            h, caches[li], entries = _layer_step(
                layer, h, caches[li], positions, rope, lp, detach_cache
            )
            attn_entries.append(entries)
        final = rms_norm_cols(h, params.final_gain)
        logit_blocks.append(matmul(transpose(params.embed), final))
        tokens_seen += stop - start
        if trace is not None:
            trace.record_block(block_offset + block_index, caches, attn_entries, tokens_seen)
    logits = logit_blocks[0] if len(logit_blocks) == 1 else hstack(logit_blocks)
    return logits, caches


def sequence_loss(
    params: ModelParams,
    tokens: np.ndarray,
    policy: PolicySpec,
    block_size: int,
    *,
    detach_cache: bool = False,
    require_exact_blocks: bool = False,
) -> Tensor2:
    """Mean next-token cross entropy over one sequence."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size < 2:
        raise ValueError("need at least two tokens for a next-token loss")
    logits, _ = forward_segmented(
        params, tokens, policy, block_size,
        detach_cache=detach_cache, require_exact_blocks=require_exact_blocks,
    )
    return cross_entropy_cols(slice_cols(logits, 0, tokens.size - 1), tokens[1:])


def generate(
    params: ModelParams,
    prompt: np.ndarray,
    n_new: int,
    policy: PolicySpec,
    block_size: int,
) -> np.ndarray:
    """Greedy decoding: pre-fill the prompt in blocks, then one token at a time.

    Ties in the argmax resolve to the lowest byte, so decoding is
    deterministic. The total context must fit max_context * interpolation_scale.
    """
    prompt = np.asarray(prompt, dtype=np.int64)
    if prompt.size < 1:
        raise ValueError("prompt must not be empty")
    if n_new < 0:
        raise ValueError("n_new must be nonnegative")
    if prompt.size + n_new > params.config.context_limit:
        raise ValueError(
            f"context {prompt.size + n_new} exceeds limit {params.config.context_limit}"
        )
    if n_new == 0:
        return prompt.copy()
    logits, caches = forward_segmented(params, prompt, policy, block_size)
    out = list(prompt)
    next_id = int(np.argmax(logits.data[:, -1]))
    out.append(next_id)
    for _ in range(n_new - 1):
        logits, caches = forward_segmented(
            params,
            np.array([out[-1]]),
            policy,
            block_size=1,
            position_base=len(out) - 1,
            caches=caches,
        )
        out.append(int(np.argmax(logits.data[:, -1])))
    return np.array(out, dtype=np.int64)


def perplexity(
    params: ModelParams,
    corpus_ids: np.ndarray,
    policy: PolicySpec,
    eval_context_length: int,
    block_size: int,
    *,
    trace=None,
) -> float:
    """exp(mean next-token NLL) over non-overlapping windows of the corpus."""
    ids = np.asarray(corpus_ids, dtype=np.int64)
    if ids.size == 0:
        raise ValueError("empty corpus")
    if eval_context_length < 2:
        raise ValueError("eval_context_length must be at least 2")
    n_windows = ids.size // eval_context_length
    if n_windows == 0:
        raise ValueError(
            f"corpus of {ids.size} tokens is shorter than one window of {eval_context_length}"
        )
    total_nll = 0.0
    total_predictions = 0
    block_offset = 0
    for w in range(n_windows):
        window = ids[w * eval_context_length:(w + 1) * eval_context_length]
        logits, _ = forward_segmented(
            params, window, policy, block_size, trace=trace, block_offset=block_offset
        )
        block_offset += SegmentStream(window, block_size).n_blocks
        d = logits.data[:, :-1]
        targets = window[1:]
        m = d.max(axis=0)
        nll = np.log(np.exp(d - m).sum(axis=0)) + m - d[targets, np.arange(targets.size)]
        total_nll += nll.sum()
        total_predictions += targets.size
    return float(np.exp(total_nll / total_predictions))
