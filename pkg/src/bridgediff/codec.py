"""Pixel <-> latent codecs with 4x per-axis spatial compression.

The default codec is an exactly invertible space-to-depth rearrangement
(block 4, so 16x channel expansion). A small trained convolutional
autoencoder is available for the lossy-latent regime, and an identity
codec for debugging.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import optim
from .rng import Rng
from .tensor import Tensor, avg_pool2, backward, conv2d, constant, mul, no_grad, silu, sub, tmean, upsample_nearest2

KINDS = ("identity", "space_to_depth", "tiny_ae")


class CodecError(ValueError):
    pass


@dataclass
class CodecSpec:
    kind: str = "space_to_depth"
    block: int = 4
    latent_channels: int = 48
    ae_params: Optional[dict[str, Tensor]] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise CodecError(f"unknown codec kind {self.kind!r}")
        if self.kind == "space_to_depth" and self.block != 4:
            raise CodecError("space_to_depth uses a fixed block of 4")

    def spatial_factor(self) -> int:
        return 1 if self.kind == "identity" else self.block

    def latent_channels_for(self, image_channels: int) -> int:
        if self.kind == "identity":
            return image_channels
        if self.kind == "space_to_depth":
            return image_channels * self.block * self.block
        return self.latent_channels


def _check_divisible(h: int, w: int, block: int) -> None:
    if h % block or w % block:
        raise CodecError(f"spatial dims {h}x{w} not divisible by block {block}")


def space_to_depth(x: np.ndarray, block: int) -> np.ndarray:
    n, c, h, w = x.shape
    _check_divisible(h, w, block)
    z = x.reshape(n, c, h // block, block, w // block, block)
    z = z.transpose(0, 1, 3, 5, 2, 4)
    return np.ascontiguousarray(z.reshape(n, c * block * block, h // block, w // block))


def depth_to_space(z: np.ndarray, block: int, channels: int) -> np.ndarray:
    n, cb, hh, ww = z.shape
    if cb != channels * block * block:
        raise CodecError(f"latent channels {cb} inconsistent with {channels} image channels")
    x = z.reshape(n, channels, block, block, hh, ww)
    x = x.transpose(0, 1, 4, 2, 5, 3)
    return np.ascontiguousarray(x.reshape(n, channels, hh * block, ww * block))


def encode(spec: CodecSpec, image: Tensor) -> Tensor:
    if image.data.ndim != 4:
        raise CodecError("encode expects NCHW input")
    if spec.kind == "identity":
        return constant(image.data.copy())
    if spec.kind == "space_to_depth":
        return constant(space_to_depth(image.data, spec.block))
    _check_divisible(image.shape[2], image.shape[3], spec.block)
    if spec.ae_params is None:
        raise CodecError("tiny_ae codec has no trained parameters")
    with no_grad():
        return _ae_encode(spec.ae_params, image)


def decode(spec: CodecSpec, latent: Tensor, image_channels: int = 3) -> Tensor:
    if spec.kind == "identity":
        return constant(latent.data.copy())
    if spec.kind == "space_to_depth":
        return constant(depth_to_space(latent.data, spec.block, image_channels))
    if spec.ae_params is None:
        raise CodecError("tiny_ae codec has no trained parameters")
    with no_grad():
        return _ae_decode(spec.ae_params, latent)


# --- tiny convolutional autoencoder (stands in for a learned latent codec) ---

_AE_HIDDEN = 32


@dataclass
class AeTrainConfig:
    steps: int = 300
    lr: float = 1e-2
    image_channels: int = 3
    latent_channels: int = 12
    seed: int = 0


def tiny_ae_init(image_channels: int, latent_channels: int, rng: Rng) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}

    def conv_w(name, o, i, k):
        std = np.sqrt(2.0 / (i * k * k))
        params[name] = Tensor((rng.child(name).normal((o, i, k, k)) * std).astype(np.float32),
                              requires_grad=True)
        params[name + ".b"] = Tensor(np.zeros(o, dtype=np.float32), requires_grad=True)

    conv_w("enc0", _AE_HIDDEN, image_channels, 3)
    conv_w("enc1", _AE_HIDDEN, _AE_HIDDEN, 3)
    conv_w("enc2", latent_channels, _AE_HIDDEN, 3)
    conv_w("dec0", _AE_HIDDEN, latent_channels, 3)
    conv_w("dec1", _AE_HIDDEN, _AE_HIDDEN, 3)
    conv_w("dec2", image_channels, _AE_HIDDEN, 3)
    return params


def _ae_encode(p: dict[str, Tensor], x: Tensor) -> Tensor:
    h = silu(conv2d(x, p["enc0"], p["enc0.b"], pad=1))
    h = avg_pool2(h)
    h = silu(conv2d(h, p["enc1"], p["enc1.b"], pad=1))
    h = avg_pool2(h)
    return conv2d(h, p["enc2"], p["enc2.b"], pad=1)


def _ae_decode(p: dict[str, Tensor], z: Tensor) -> Tensor:
    h = silu(conv2d(z, p["dec0"], p["dec0.b"], pad=1))
    h = upsample_nearest2(h)
    h = silu(conv2d(h, p["dec1"], p["dec1.b"], pad=1))
    h = upsample_nearest2(h)
    return conv2d(h, p["dec2"], p["dec2.b"], pad=1)


def train_tiny_ae(images: list[np.ndarray], cfg: AeTrainConfig,
                  rng: Optional[Rng] = None) -> tuple[dict[str, Tensor], float]:
    """Fit the autoencoder by plain reconstruction MSE with Adam.

    Returns (params, final training MSE). Deterministic for a given seed.
    """
    if not images:
        raise CodecError("empty training set")
    if rng is None:
        rng = Rng(cfg.seed)
    params = tiny_ae_init(cfg.image_channels, cfg.latent_channels, rng.child("init"))
    state = optim.adam_init(params)
    ocfg = optim.AdamConfig(lr=cfg.lr)
    order_rng = rng.child("order")
    final = float("nan")
    for step in range(cfg.steps):
        img = images[int(order_rng.integers(0, len(images)))]
        x = constant(img[None].astype(np.float32))
        z = _ae_encode(params, x)
        recon = _ae_decode(params, z)
        diff = sub(recon, x)
        loss = tmean(mul(diff, diff))
        for p in params.values():
            p.grad = None
        grads = backward(loss)
        optim.adam_step(params, {k: grads.get(p, np.zeros_like(p.data)) for k, p in params.items()},
                        state, ocfg)
        final = loss.item()
    return params, final


def reconstruction_mse(spec: CodecSpec, images: list[np.ndarray],
                       image_channels: int = 3) -> float:
    """Mean round-trip MSE of a codec over a set of CHW images."""
    total = 0.0
    for img in images:
        x = constant(img[None].astype(np.float32))
        z = encode(spec, x)
        r = decode(spec, z, image_channels=image_channels)
        total += float(np.mean((r.data - x.data) ** 2))
    return total / len(images)
