"""Tiny timestep-conditioned denoiser over patch tokens.

This is deliberately not a faithful transformer: the contribution being
studied lives in the latent pipeline and the loss suite, and the architecture
study is out of scope. What matters is that the network (a) consumes patch
tokens, (b) is conditioned on the timestep per block, (c) exposes intermediate
per-block features for the dispersion term, and (d) is smooth end to end so
every gradient can be checked against finite differences (hence tanh, not
relu).

Structure per block, on tokens x of shape (B, N, K):

    e      = tanh(sin-cos timestep embedding @ w1 + b1)
    u      = x * (1 + e @ scale_w + scale_b) + (e @ shift_w + shift_b)
    u      = u + mix(u)          token mixing: learned N x N matrix
    x_out  = u + tanh(u @ w1 + b1) @ w2 + b2

The output head is zero-initialized, so an untrained network predicts an
input-independent constant; modulation weights start at zero as well (the
identity modulation), which keeps early training stable.

The prediction adds a gated copy of the input to the head's output:

    prediction = g(x) * x + unpatchify(head(tokens))
    g(x)       = tanh(4 * (mean-pooled final tokens @ gate_w + gate_b))

with the gate parameters zero-initialized too (so the init-time prediction is
still an input-independent constant). Reconstruction at these noise levels
lives near the identity map, so the gate saturating toward 1 keeps iterated
sampling from drifting on in-distribution inputs, while the per-sample
conditioning lets the network suppress the copy for inputs it recognizes and
rewrite them through the head. The tanh(4 * raw) parametrization reaches its
working range within a short run.

The pretrained encoder/decoder pair around the trunk is replaced by a
configurable latent mapper. ``identity`` (default) feeds patches straight
through; ``tiny-ae`` adds a jointly trained one-layer autoencoder around the
trunk, exercising the interface without pretrained weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .codec import PatchLayout, patchify, unpatchify
from .errors import DomainError, NumericError, ShapeError
from .rng import RandomSource

LATENT_MAPPERS = ("identity", "tiny-ae")

Parameters = dict[str, Tensor]


@dataclass(frozen=True)
class DenoiserConfig:
    layout: PatchLayout
    token_dim: int = 48
    blocks: int = 2
    feature_block: int = 1  # 1-based index of the block whose output is pooled
    latent_mapper: str = "identity"
    init_seed: int = 0

    def __post_init__(self):
        if self.token_dim < 4:
            raise DomainError(f"token_dim must be >= 4, got {self.token_dim}")
        if self.blocks < 1:
            raise DomainError(f"blocks must be >= 1, got {self.blocks}")
        if not 1 <= self.feature_block <= self.blocks:
            raise DomainError(
                f"feature_block must be in [1, {self.blocks}], got {self.feature_block}"
            )
        if self.latent_mapper not in LATENT_MAPPERS:
            raise DomainError(f"unknown latent mapper {self.latent_mapper!r}")


@dataclass
class ForwardTrace:
    """One forward pass: prediction plus the per-block token features."""

    prediction: Tensor
    block_tokens: list[Tensor]
    pooled: Tensor  # (B, token_dim) mean over tokens at the configured block


def timestep_embedding(t: int, dim: int) -> np.ndarray:
    """Sinusoidal embedding of an integer timestep, shape (1, dim)."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half, dtype=np.float64) / max(1, half))
    ang = t * freqs
    emb = np.concatenate([np.sin(ang), np.cos(ang)])
    if emb.size < dim:
        emb = np.concatenate([emb, np.zeros(dim - emb.size)])
    return emb.reshape(1, dim)


def init_params(config: DenoiserConfig, seed: int | None = None) -> Parameters:
    """Deterministic parameter initialization for a fixed seed.

    The output projection (and the tiny-ae decoder, when enabled) starts at
    zero: the untrained network predicts a constant regardless of input.
    """
    rng = RandomSource(config.init_seed if seed is None else seed).derive("denoiser-init")
    k = config.token_dim
    dp = config.layout.patch_dim
    n = config.layout.n_patches
    h = 2 * k

    def normal(shape, scale):
        return Tensor(rng.normal(shape) * scale)

    def zeros(shape):
        return Tensor(np.zeros(shape))

    params: Parameters = {}
    if config.latent_mapper == "tiny-ae":
        # the *final* projection is the zero-initialized one; with a zero
        # decoder the head must carry signal or no gradient reaches either
        params["mapper.enc.w"] = normal((dp, dp), 1.0 / math.sqrt(dp))
        params["mapper.enc.b"] = zeros((dp,))
        params["mapper.dec.w"] = zeros((dp, dp))
        params["mapper.dec.b"] = zeros((dp,))
    params["embed.w"] = normal((dp, k), 1.0 / math.sqrt(dp))
    params["embed.b"] = zeros((k,))
    params["pos"] = normal((n, k), 0.02)
    for i in range(1, config.blocks + 1):
        pre = f"block{i}."
        params[pre + "tmod.w1"] = normal((k, k), 1.0 / math.sqrt(k))
        params[pre + "tmod.b1"] = zeros((k,))
        params[pre + "scale.w"] = zeros((k, k))
        params[pre + "scale.b"] = zeros((k,))
        params[pre + "shift.w"] = zeros((k, k))
        params[pre + "shift.b"] = zeros((k,))
        params[pre + "mix"] = normal((n, n), 0.02)
        params[pre + "mlp.w1"] = normal((k, h), 1.0 / math.sqrt(k))
        params[pre + "mlp.b1"] = zeros((h,))
        params[pre + "mlp.w2"] = normal((h, k), 0.5 / math.sqrt(h))
        params[pre + "mlp.b2"] = zeros((k,))
    if config.latent_mapper == "tiny-ae":
        params["head.w"] = normal((k, dp), 1.0 / math.sqrt(k))
    else:
        params["head.w"] = zeros((k, dp))
    params["head.b"] = zeros((dp,))
    params["gate.w"] = zeros((k, 1))
    params["gate.b"] = zeros((1,))
    return params


def param_count(params: Parameters) -> int:
    return sum(p.size for p in params.values())


def forward(params: Parameters, images, t: int, config: DenoiserConfig) -> ForwardTrace:
    """Predict the clean image for a batch of (possibly noisy) images.

    ``images`` is (B, H, W, C) or (H, W, C), numpy or tensor. Pure: identical
    (params, input, t) give identical traces. Raises NumericError naming the
    block if activations go non-finite.
    """
    layout = config.layout
    x_in = images if isinstance(images, Tensor) else Tensor(images)
    single = x_in.ndim == 3
    if single:
        x_in = x_in.reshape((1,) + layout.image_shape)
    if x_in.shape[1:] != layout.image_shape:
        raise ShapeError(f"input shape {x_in.shape} does not match layout {layout.image_shape}")
    if not 0 <= int(t) <= 10**9:
        raise DomainError(f"timestep must be a non-negative integer, got {t}")

    patches = patchify(x_in, layout)  # (B, N, Dp)
    if config.latent_mapper == "tiny-ae":
        patches = ad.tanh(patches @ params["mapper.enc.w"] + params["mapper.enc.b"])

    tokens = patches @ params["embed.w"] + params["embed.b"]
    tokens = tokens + params["pos"]

    temb = Tensor(timestep_embedding(int(t), config.token_dim))  # (1, K)
    block_tokens: list[Tensor] = []
    for i in range(1, config.blocks + 1):
        pre = f"block{i}."
        try:
            e = ad.tanh(temb @ params[pre + "tmod.w1"] + params[pre + "tmod.b1"])
            scale = (e @ params[pre + "scale.w"] + params[pre + "scale.b"]).reshape((1, 1, -1))
            shift = (e @ params[pre + "shift.w"] + params[pre + "shift.b"]).reshape((1, 1, -1))
            u = tokens * (1.0 + scale) + shift
            mixed = (u.transpose((0, 2, 1)) @ params[pre + "mix"]).transpose((0, 2, 1))
            u = u + mixed
            hidden = ad.tanh(u @ params[pre + "mlp.w1"] + params[pre + "mlp.b1"])
            tokens = u + hidden @ params[pre + "mlp.w2"] + params[pre + "mlp.b2"]
        except NumericError as err:
            raise NumericError(f"block {i}: {err}") from err
        block_tokens.append(tokens)

    pooled = block_tokens[config.feature_block - 1].mean(axis=1)

    out_patches = tokens @ params["head.w"] + params["head.b"]
    if config.latent_mapper == "tiny-ae":
        out_patches = out_patches @ params["mapper.dec.w"] + params["mapper.dec.b"]
    final_pooled = tokens.mean(axis=1)  # (B, K)
    gate = ad.tanh((final_pooled @ params["gate.w"] + params["gate.b"]) * 4.0)
    gate = gate.reshape((x_in.shape[0], 1, 1, 1))
    prediction = x_in * gate + unpatchify(out_patches, layout)
    if single:
        prediction = prediction.reshape(layout.image_shape)
    return ForwardTrace(prediction=prediction, block_tokens=block_tokens, pooled=pooled)
