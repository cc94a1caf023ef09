"""One orientation-specific vision transformer.

Pipeline per view: zero-pad and cut into P x P patches (channels ride
along), linearly embed, prepend a learned class token, add position
embeddings, run L pre-norm encoder layers, and regress a scalar from the
final class-token state through a two-layer head.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from trivit.errors import ConfigError, ShapeMismatchError
from trivit.numerics import (
    Tensor,
    add,
    concat,
    dropout,
    gelu,
    layer_norm,
    linear,
    matmul,
    permute,
    scale,
    softmax,
    split,
)
from trivit.volume import ViewTensor


@dataclass
class ViTConfig:
    patch_size: int = 7
    embed_dim: int = 768
    num_heads: int = 12
    num_layers: int = 10
    dropout: float = 0.1
    mlp_hidden: int = 3072
    head_hidden: int | None = None       # None -> mlp_hidden
    attn_output_projection: bool = True  # post-concat D x D mix; off = strict concat

    def __post_init__(self):
        if self.patch_size < 1 or self.num_layers < 1 or self.num_heads < 1:
            raise ConfigError("patch_size, num_layers and num_heads must be >= 1")
        if self.embed_dim % self.num_heads != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout {self.dropout} outside [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def head_hidden_dim(self) -> int:
        return self.head_hidden if self.head_hidden is not None else self.mlp_hidden


def padded_extent(extent: int, patch: int) -> int:
    return ((extent + patch - 1) // patch) * patch


def patch_grid(height: int, width: int, patch: int) -> tuple[int, int]:
    return padded_extent(height, patch) // patch, padded_extent(width, patch) // patch


def num_patches(height: int, width: int, patch: int) -> int:
    gh, gw = patch_grid(height, width, patch)
    return gh * gw


def patchify(view_data: np.ndarray, patch: int) -> np.ndarray:
    """(H, W, C) -> (N, P*P*C): zero-pad to multiples of P, then flatten
    each P x P x C block in raster order. Bijective onto the padded grid."""
    h, w, c = view_data.shape
    hp, wp = padded_extent(h, patch), padded_extent(w, patch)
    padded = view_data
    if (hp, wp) != (h, w):
        padded = np.zeros((hp, wp, c), dtype=view_data.dtype)
        padded[:h, :w, :] = view_data
    gh, gw = hp // patch, wp // patch
    blocks = padded.reshape(gh, patch, gw, patch, c)
    blocks = blocks.transpose(0, 2, 1, 3, 4)  # (gh, gw, P, P, C)
    return np.ascontiguousarray(blocks.reshape(gh * gw, patch * patch * c))


def unpatchify(patches: np.ndarray, height: int, width: int, channels: int, patch: int) -> np.ndarray:
    """Inverse of patchify, returning the padded (H_pad, W_pad, C) grid."""
    hp, wp = padded_extent(height, patch), padded_extent(width, patch)
    gh, gw = hp // patch, wp // patch
    blocks = patches.reshape(gh, gw, patch, patch, channels).transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(blocks.reshape(hp, wp, channels))


@dataclass
class EncoderLayerParams:
    ln1_gain: Tensor
    ln1_bias: Tensor
    qkv_w: Tensor
    qkv_b: Tensor
    out_w: Tensor
    out_b: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor


@dataclass
class ViTParams:
    """All learnable arrays of one view encoder, shapes fixed by (view, config)."""

    patch_proj: Tensor    # (P*P*C, D)
    class_token: Tensor   # (1, D)
    pos_embed: Tensor     # (N+1, D)
    layers: list[EncoderLayerParams]
    head_w1: Tensor
    head_b1: Tensor
    head_w2: Tensor
    head_b2: Tensor

    def named(self):
        yield "patch_proj", self.patch_proj
        yield "class_token", self.class_token
        yield "pos_embed", self.pos_embed
        for i, lp in enumerate(self.layers):
            for fname in (
                "ln1_gain", "ln1_bias", "qkv_w", "qkv_b", "out_w", "out_b",
                "ln2_gain", "ln2_bias", "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2",
            ):
                yield f"layers.{i}.{fname}", getattr(lp, fname)
        yield "head_w1", self.head_w1
        yield "head_b1", self.head_b1
        yield "head_w2", self.head_w2
        yield "head_b2", self.head_b2


@dataclass
class AttentionRecord:
    layer: int
    head: int
    weights: np.ndarray  # (N+1, N+1), rows sum to 1


def _he(rng, fan_in, shape, dtype):
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)


def init_vit_params(
    view_shape: tuple[int, int, int],
    cfg: ViTConfig,
    rng: np.random.Generator,
    dtype=np.float32,
) -> ViTParams:
    """He-initialized weights, zero biases, N(0, 0.02) class/position tokens."""
    h, w, c = view_shape
    n = num_patches(h, w, cfg.patch_size)
    d = cfg.embed_dim
    patch_row = cfg.patch_size * cfg.patch_size * c

    def param(arr):
        return Tensor(arr, requires_grad=True, dtype=dtype)

    def zeros(*shape):
        return param(np.zeros(shape, dtype=dtype))

    def ones(*shape):
        return param(np.ones(shape, dtype=dtype))

    layers = []
    for _ in range(cfg.num_layers):
        layers.append(
            EncoderLayerParams(
                ln1_gain=ones(d),
                ln1_bias=zeros(d),
                qkv_w=param(_he(rng, d, (d, 3 * d), dtype)),
                qkv_b=zeros(3 * d),
                out_w=param(_he(rng, d, (d, d), dtype)),
                out_b=zeros(d),
                ln2_gain=ones(d),
                ln2_bias=zeros(d),
                mlp_w1=param(_he(rng, d, (d, cfg.mlp_hidden), dtype)),
                mlp_b1=zeros(cfg.mlp_hidden),
                mlp_w2=param(_he(rng, cfg.mlp_hidden, (cfg.mlp_hidden, d), dtype)),
                mlp_b2=zeros(d),
            )
        )
    hh = cfg.head_hidden_dim
    return ViTParams(
        patch_proj=param(_he(rng, patch_row, (patch_row, d), dtype)),
        class_token=param((rng.standard_normal((1, d)) * 0.02).astype(dtype)),
        pos_embed=param((rng.standard_normal((n + 1, d)) * 0.02).astype(dtype)),
        layers=layers,
        head_w1=param(_he(rng, d, (d, hh), dtype)),
        head_b1=zeros(hh),
        head_w2=param(_he(rng, hh, (hh, 1), dtype)),
        head_b2=zeros(1),
    )


def embed(patches: Tensor, params: ViTParams) -> Tensor:
    """Token matrix z_0: class token row, then projected patches, plus
    position embeddings."""
    if patches.shape[1] != params.patch_proj.shape[0]:
        raise ShapeMismatchError(
            f"embed: patch row width {patches.shape[1]} != projection input "
            f"{params.patch_proj.shape[0]}"
        )
    if params.pos_embed.shape[0] != patches.shape[0] + 1:
        raise ShapeMismatchError(
            f"embed: position table has {params.pos_embed.shape[0]} rows, "
            f"expected {patches.shape[0] + 1}"
        )
    projected = matmul(patches, params.patch_proj)
    tokens = concat([params.class_token, projected], axis=0)
    return add(tokens, params.pos_embed)


def multi_head_attention(
    z: Tensor,
    lp: EncoderLayerParams,
    cfg: ViTConfig,
    layer_index: int,
    records: list[AttentionRecord] | None,
) -> Tensor:
    qkv = linear(z, lp.qkv_w, lp.qkv_b)
    d = cfg.embed_dim
    q, k, v = split(qkv, [d, d, d], axis=1)
    q_heads = split(q, cfg.num_heads, axis=1)
    k_heads = split(k, cfg.num_heads, axis=1)
    v_heads = split(v, cfg.num_heads, axis=1)
    inv_sqrt_d = 1.0 / math.sqrt(cfg.head_dim)
    head_outs = []
    for h in range(cfg.num_heads):
        scores = scale(matmul(q_heads[h], permute(k_heads[h], (1, 0))), inv_sqrt_d)
        attn = softmax(scores, axis=-1)
        if records is not None:
            records.append(
                AttentionRecord(layer=layer_index, head=h, weights=attn.data.copy())
            )
        head_outs.append(matmul(attn, v_heads[h]))
    merged = concat(head_outs, axis=1)
    if cfg.attn_output_projection:
        merged = linear(merged, lp.out_w, lp.out_b)
    return merged


def encoder_layer(
    z: Tensor,
    lp: EncoderLayerParams,
    cfg: ViTConfig,
    layer_index: int = 0,
    train: bool = False,
    rng: np.random.Generator | None = None,
    records: list[AttentionRecord] | None = None,
) -> Tensor:
    """Pre-norm residual block: z' = MSA(LN(z)) + z; out = MLP(LN(z')) + z'."""
    attn_out = multi_head_attention(
        layer_norm(z, lp.ln1_gain, lp.ln1_bias), lp, cfg, layer_index, records
    )
    attn_out = dropout(attn_out, cfg.dropout, rng, train)
    z_mid = add(z, attn_out)
    hidden = gelu(linear(layer_norm(z_mid, lp.ln2_gain, lp.ln2_bias), lp.mlp_w1, lp.mlp_b1))
    hidden = dropout(hidden, cfg.dropout, rng, train)
    mlp_out = linear(hidden, lp.mlp_w2, lp.mlp_b2)
    mlp_out = dropout(mlp_out, cfg.dropout, rng, train)
    return add(z_mid, mlp_out)


@dataclass
class ViewForward:
    prediction: Tensor          # (1, 1) scalar, years
    class_state: Tensor         # (1, D) final class-token row
    records: list[AttentionRecord] = field(default_factory=list)


def forward_view(
    view: ViewTensor | np.ndarray,
    params: ViTParams,
    cfg: ViTConfig,
    train: bool = False,
    rng: np.random.Generator | None = None,
    record_attention: bool = False,
) -> ViewForward:
    data = view.data if isinstance(view, ViewTensor) else view
    patches = Tensor(patchify(np.asarray(data, dtype=params.patch_proj.dtype), cfg.patch_size))
    z = embed(patches, params)
    z = dropout(z, cfg.dropout, rng, train)
    records: list[AttentionRecord] | None = [] if record_attention else None
    for i, lp in enumerate(params.layers):
        z = encoder_layer(z, lp, cfg, layer_index=i, train=train, rng=rng, records=records)
    class_row = split(z, [1, z.shape[0] - 1], axis=0)[0]
    hidden = gelu(linear(class_row, params.head_w1, params.head_b1))
    pred = linear(hidden, params.head_w2, params.head_b2)
    return ViewForward(prediction=pred, class_state=class_row, records=records or [])
