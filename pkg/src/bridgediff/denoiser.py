"""Conditional UNet noise predictor and the pixel-space condition encoder.

The network consumes the channel-wise concatenation of the latent state and
an optional condition map, plus a sinusoidal time embedding, and predicts
the combined training target. Resolution changes use explicit 2x average
pooling / nearest upsampling; one self-attention block sits at the lowest
resolution by default.

Parameters live in an ordered name -> Tensor mapping so the optimizer and
checkpoint code can treat them uniformly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .rng import Rng
from .tensor import (
    Tensor, add, attention, avg_pool2, bilinear_resize, broadcast_to, concat,
    conv2d, constant, div, matmul, mul, reshape, silu, sqrt, sub, tmean,
    transpose, upsample_nearest2,
)


@dataclass(frozen=True)
class DenoiserConfig:
    in_channels: int                      # latent + condition channels
    out_channels: int                     # latent channels (prediction target)
    cond_channels: int = 0                # 0 disables the condition pathway
    cond_source_channels: int = 3         # channels of the pixel-space source
    base_channels: int = 32
    channel_mults: tuple[int, ...] = (1, 2, 4)
    attention_level: int | None = None    # None -> lowest resolution
    time_dim: int = 64
    groups: int = 8

    def __post_init__(self):
        if len(self.channel_mults) < 2:
            raise ValueError("need at least 2 resolution levels")
        if self.base_channels % self.groups:
            raise ValueError("base_channels must be divisible by groups")
        if self.time_dim % 2:
            raise ValueError("time_dim must be even")
        if self.in_channels - self.cond_channels != self.out_channels:
            raise ValueError("in_channels must equal out_channels + cond_channels")

    @property
    def levels(self) -> int:
        return len(self.channel_mults)

    @property
    def attn_level(self) -> int:
        return self.levels - 1 if self.attention_level is None else self.attention_level

    def level_channels(self, i: int) -> int:
        return self.base_channels * self.channel_mults[i]


@dataclass
class DenoiserParams:
    """Config plus the ordered tensor collection holding every weight."""
    config: DenoiserConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self.tensors[name]
        except KeyError:
            raise KeyError(f"denoiser parameter {name!r} missing") from None

    def param_count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def trainable(self) -> dict[str, Tensor]:
        return self.tensors


@dataclass
class ConditionEncoderParams:
    """1x1 convolution applied after resizing the source to latent dims."""
    weight: Tensor   # (cond_channels, source_channels, 1, 1)
    bias: Tensor     # (cond_channels,)

    def __post_init__(self):
        if self.weight.shape[2:] != (1, 1):
            raise ValueError("condition encoder kernel must be exactly 1x1")


def time_embed(t: int, dim: int, T: int, dtype=np.float32) -> Tensor:
    """Sinusoidal embedding of a timestep; pure function of (t, dim).

    Half the dims carry sines, half cosines, with angular frequencies
    geometric between 1 and 1e-4 so embeddings stay distinct for t up to
    10^4. ``T`` only bounds the valid timestep range.
    """
    if dim % 2:
        raise ValueError("embedding dim must be even")
    if not (0 <= t <= T):
        raise ValueError(f"timestep {t} outside [0, {T}]")
    half = dim // 2
    k = np.arange(half, dtype=np.float64)
    freqs = np.power(10000.0, -k / max(half - 1, 1))
    ang = t * freqs
    emb = np.concatenate([np.sin(ang), np.cos(ang)])
    return constant(emb.astype(dtype))


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    out = matmul(x, w)
    return add(out, broadcast_to(reshape(b, (1, b.shape[0])), out.shape))


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, groups: int,
               eps: float = 1e-5) -> Tensor:
    """Per-group normalization over (C/G, H, W) with learned scale/offset."""
    n, c, h, w = x.shape
    if c % groups:
        raise ValueError(f"channels {c} not divisible by groups {groups}")
    g = reshape(x, (n, groups, (c // groups) * h * w))
    mu = tmean(g, axis=2, keepdims=True)
    centered = sub(g, broadcast_to(mu, g.shape))
    var = tmean(mul(centered, centered), axis=2, keepdims=True)
    denom = broadcast_to(sqrt(add(var, eps)), g.shape)
    normed = reshape(div(centered, denom), (n, c, h, w))
    gamma4 = broadcast_to(reshape(gamma, (1, c, 1, 1)), normed.shape)
    beta4 = broadcast_to(reshape(beta, (1, c, 1, 1)), normed.shape)
    return add(mul(normed, gamma4), beta4)


def encode_condition(source_pixels: Tensor, latent_h: int, latent_w: int,
                     params: ConditionEncoderParams) -> Tensor:
    """Bilinear resize of the source image to latent dims, then 1x1 conv."""
    if latent_h < 1 or latent_w < 1:
        raise ValueError("latent dims must be >= 1")
    resized = bilinear_resize(source_pixels, latent_h, latent_w)
    return conv2d(resized, params.weight, params.bias, pad=0)


def _iter_blocks(cfg: DenoiserConfig):
    """Yield (kind, prefix, in_ch, out_ch) for every block, in forward order."""
    chans = [cfg.level_channels(i) for i in range(cfg.levels)]
    yield "conv_in", "in_conv", cfg.in_channels, chans[0]
    prev = chans[0]
    for i in range(cfg.levels):
        yield "res", f"down{i}", prev, chans[i]
        if i == cfg.attn_level and i != cfg.levels - 1:
            yield "attn", f"down{i}_attn", chans[i], chans[i]
        prev = chans[i]
    yield "res", "mid0", prev, prev
    yield "attn", "mid_attn", prev, prev
    yield "res", "mid1", prev, prev
    for i in reversed(range(cfg.levels)):
        yield "res", f"up{i}", prev + chans[i], chans[i]
        if i == cfg.attn_level and i != cfg.levels - 1:
            yield "attn", f"up{i}_attn", chans[i], chans[i]
        prev = chans[i]
    yield "conv_out", "out", chans[0], cfg.out_channels


def denoiser_init(cfg: DenoiserConfig, rng: Rng, dtype=np.float32) -> DenoiserParams:
    """Kaiming fan-in init; the output conv and attention projections start
    at zero so the initial prediction is exactly zero."""
    params = DenoiserParams(cfg)
    dt = np.dtype(dtype)

    def put(name, arr):
        params.tensors[name] = Tensor(arr.astype(dt), requires_grad=True)

    def conv_w(name, o, i, k):
        std = np.sqrt(2.0 / (i * k * k))
        put(name, rng.child(name).normal((o, i, k, k)) * std)

    def zeros(name, shape):
        put(name, np.zeros(shape))

    def ones(name, shape):
        put(name, np.ones(shape))

    if cfg.cond_channels:
        conv_w("cond.w", cfg.cond_channels, cfg.cond_source_channels, 1)
        zeros("cond.b", (cfg.cond_channels,))

    td = cfg.time_dim
    put("temb.l0.w", rng.child("temb.l0.w").normal((td, td)) * np.sqrt(2.0 / td))
    zeros("temb.l0.b", (td,))
    put("temb.l1.w", rng.child("temb.l1.w").normal((td, td)) * np.sqrt(2.0 / td))
    zeros("temb.l1.b", (td,))

    for kind, prefix, cin, cout in _iter_blocks(cfg):
        if kind == "conv_in":
            conv_w(f"{prefix}.w", cout, cin, 3)
            zeros(f"{prefix}.b", (cout,))
        elif kind == "conv_out":
            ones(f"{prefix}.n.g", (cin,))
            zeros(f"{prefix}.n.b", (cin,))
            zeros(f"{prefix}.w", (cout, cin, 3, 3))
            zeros(f"{prefix}.b", (cout,))
        elif kind == "res":
            ones(f"{prefix}.n1.g", (cin,))
            zeros(f"{prefix}.n1.b", (cin,))
            conv_w(f"{prefix}.c1.w", cout, cin, 3)
            zeros(f"{prefix}.c1.b", (cout,))
            put(f"{prefix}.t.w", rng.child(f"{prefix}.t.w").normal((td, cout)) * np.sqrt(1.0 / td))
            zeros(f"{prefix}.t.b", (cout,))
            ones(f"{prefix}.n2.g", (cout,))
            zeros(f"{prefix}.n2.b", (cout,))
            conv_w(f"{prefix}.c2.w", cout, cout, 3)
            zeros(f"{prefix}.c2.b", (cout,))
            if cin != cout:
                conv_w(f"{prefix}.cs.w", cout, cin, 1)
                zeros(f"{prefix}.cs.b", (cout,))
        elif kind == "attn":
            ones(f"{prefix}.n.g", (cin,))
            zeros(f"{prefix}.n.b", (cin,))
            for proj in ("q", "k", "v"):
                conv_w(f"{prefix}.{proj}.w", cin, cin, 1)
                zeros(f"{prefix}.{proj}.b", (cin,))
            zeros(f"{prefix}.o.w", (cin, cin, 1, 1))
            zeros(f"{prefix}.o.b", (cin,))
    return params


def _res_block(p: DenoiserParams, prefix: str, x: Tensor, temb: Tensor,
               cin: int, cout: int, groups: int) -> Tensor:
    h = group_norm(x, p[f"{prefix}.n1.g"], p[f"{prefix}.n1.b"], groups)
    h = conv2d(silu(h), p[f"{prefix}.c1.w"], p[f"{prefix}.c1.b"], pad=1)
    shift = _linear(silu(temb), p[f"{prefix}.t.w"], p[f"{prefix}.t.b"])
    n = h.shape[0]
    shift4 = broadcast_to(reshape(shift, (n, cout, 1, 1)), h.shape)
    h = add(h, shift4)
    h = group_norm(h, p[f"{prefix}.n2.g"], p[f"{prefix}.n2.b"], groups)
    h = conv2d(silu(h), p[f"{prefix}.c2.w"], p[f"{prefix}.c2.b"], pad=1)
    if cin != cout:
        x = conv2d(x, p[f"{prefix}.cs.w"], p[f"{prefix}.cs.b"], pad=0)
    return add(h, x)


def _attn_block(p: DenoiserParams, prefix: str, x: Tensor, groups: int) -> Tensor:
    n, c, hh, ww = x.shape
    h = group_norm(x, p[f"{prefix}.n.g"], p[f"{prefix}.n.b"], groups)
    q = conv2d(h, p[f"{prefix}.q.w"], p[f"{prefix}.q.b"], pad=0)
    k = conv2d(h, p[f"{prefix}.k.w"], p[f"{prefix}.k.b"], pad=0)
    v = conv2d(h, p[f"{prefix}.v.w"], p[f"{prefix}.v.b"], pad=0)

    def tokens(t):
        return transpose(reshape(t, (n, c, hh * ww)), (0, 2, 1))

    att = attention(tokens(q), tokens(k), tokens(v))
    att = reshape(transpose(att, (0, 2, 1)), (n, c, hh, ww))
    out = conv2d(att, p[f"{prefix}.o.w"], p[f"{prefix}.o.b"], pad=0)
    return add(out, x)


def denoiser_forward(params: DenoiserParams, x_t: Tensor,
                     cond: Optional[Tensor], t: int) -> Tensor:
    """Prediction for one timestep; output shape equals the latent shape."""
    cfg = params.config
    if cond is not None:
        if cfg.cond_channels == 0:
            raise ValueError("model was built without a condition pathway")
        if cond.shape[2:] != x_t.shape[2:]:
            raise ValueError(f"condition spatial dims {cond.shape[2:]} != latent {x_t.shape[2:]}")
        if cond.shape[1] != cfg.cond_channels:
            raise ValueError(f"condition has {cond.shape[1]} channels, expected {cfg.cond_channels}")
        h = concat([x_t, cond], axis=1)
    else:
        if cfg.cond_channels:
            raise ValueError("model expects a condition input")
        h = x_t
    if h.shape[1] != cfg.in_channels:
        raise ValueError(f"input has {h.shape[1]} channels, expected {cfg.in_channels}")

    n = x_t.shape[0]
    emb = time_embed(t, cfg.time_dim, t, dtype=x_t.dtype)
    temb = broadcast_to(reshape(emb, (1, cfg.time_dim)), (n, cfg.time_dim))
    temb = _linear(temb, params["temb.l0.w"], params["temb.l0.b"])
    temb = _linear(silu(temb), params["temb.l1.w"], params["temb.l1.b"])

    g = cfg.groups
    skips: list[Tensor] = []
    for kind, prefix, cin, cout in _iter_blocks(cfg):
        if kind == "conv_in":
            h = conv2d(h, params[f"{prefix}.w"], params[f"{prefix}.b"], pad=1)
        elif kind == "res" and prefix.startswith("down"):
            h = _res_block(params, prefix, h, temb, cin, cout, g)
            level = int(prefix[4:])
            attn_follows = level == cfg.attn_level and level != cfg.levels - 1
            if not attn_follows:  # otherwise the attn block saves the skip and pools
                skips.append(h)
                if level < cfg.levels - 1:
                    h = avg_pool2(h)
        elif kind == "attn" and prefix.startswith("down"):
            h = _attn_block(params, prefix, h, g)
            skips.append(h)
            level = int(prefix[4:prefix.index("_")])
            if level < cfg.levels - 1:
                h = avg_pool2(h)
        elif kind == "res" and prefix.startswith("mid"):
            h = _res_block(params, prefix, h, temb, cin, cout, g)
        elif kind == "attn" and prefix.startswith("mid"):
            h = _attn_block(params, prefix, h, g)
        elif kind == "res" and prefix.startswith("up"):
            level = int(prefix[2:])
            if level < cfg.levels - 1:
                h = upsample_nearest2(h)
            h = concat([h, skips.pop()], axis=1)
            h = _res_block(params, prefix, h, temb, cin, cout, g)
        elif kind == "attn" and prefix.startswith("up"):
            h = _attn_block(params, prefix, h, g)
        elif kind == "conv_out":
            h = group_norm(h, params[f"{prefix}.n.g"], params[f"{prefix}.n.b"], g)
            h = conv2d(silu(h), params[f"{prefix}.w"], params[f"{prefix}.b"], pad=1)
    return h


def make_denoiser_fn(params: DenoiserParams):
    """Bind params into the ``denoiser(x_t, cond, t)`` callable used by the
    diffusion losses and samplers."""
    def fn(x_t: Tensor, cond: Optional[Tensor], t: int) -> Tensor:
        return denoiser_forward(params, x_t, cond, t)
    return fn
