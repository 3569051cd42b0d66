"""Training loop, validation-based checkpoint selection, and the binary
checkpoint format.

One optimization step per sample (minibatch of 1 by default). Validation
runs at a fixed step interval on a non-augmented pass with frozen
(timestep, noise) draws per validation item, so the validation loss is a
deterministic function of the parameters; the checkpoint with the minimal
validation loss is retained.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import codec as codec_mod
from . import diffusion, optim
from .data import PairedSample, hflip_augment
from .denoiser import (ConditionEncoderParams, DenoiserConfig, DenoiserParams,
                       denoiser_init, encode_condition, make_denoiser_fn)
from .rng import Rng
from .schedule import build_bridge_schedule, build_gaussian_schedule
from .tensor import NonFiniteError, Tensor, backward, constant

# re-exported: the optimizer lives with the trainer from the caller's view
AdamConfig = optim.AdamConfig
AdamState = optim.AdamState
adam_init = optim.adam_init
adam_step = optim.adam_step


@dataclass
class TrainConfig:
    process: str = "bridge"            # "bridge" or "gaussian"
    conditional: bool = True
    epochs: int = 1
    batch_size: int = 1
    lr: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    T: int = 100
    weighting: str = "simplified"      # bridge loss weighting
    beta_start: float = 1e-4           # gaussian baseline schedule
    beta_end: float = 0.02
    t_sampling: str = "uniform"        # "uniform" or "stratified"
    flip_prob: float = 0.5
    val_interval: int = 200
    ema: float = 0.0                   # 0 disables weight averaging
    seed: int = 0

    def __post_init__(self):
        if self.process not in ("bridge", "gaussian"):
            raise ValueError(f"unknown process {self.process!r}")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.weighting not in ("simplified", "elbo"):
            raise ValueError(f"unknown weighting {self.weighting!r}")
        if self.t_sampling not in ("uniform", "stratified"):
            raise ValueError(f"unknown t_sampling {self.t_sampling!r}")


@dataclass
class Checkpoint:
    config: dict
    codec_kind: str
    step: int
    val_history: list[tuple[int, float]]
    tensors: dict[str, np.ndarray]

    def denoiser_params(self) -> DenoiserParams:
        cfg = DenoiserConfig(**self.config["denoiser"])
        params = DenoiserParams(cfg)
        prefix = "denoiser."
        for name, arr in self.tensors.items():
            if name.startswith(prefix):
                params.tensors[name[len(prefix):]] = Tensor(arr.copy(), requires_grad=True)
        return params


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    curves: list[tuple[int, float, Optional[float]]]   # (step, train, val)
    val_batch_hashes: list[str]
    diverged: bool = False


class CheckpointError(Exception):
    pass


CKPT_MAGIC = b"CBBDM1"
_DTYPE_TAGS = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    directory = {}
    io_parts = []
    offset = 0
    for name, arr in ckpt.tensors.items():
        arr = np.ascontiguousarray(arr)
        tag = "f32" if arr.dtype == np.float32 else "f64"
        raw = arr.astype(_DTYPE_TAGS[tag], copy=False).tobytes()
        directory[name] = {"offset": offset, "shape": list(arr.shape), "dtype": tag}
        io_parts.append(raw)
        offset += len(raw)
    header = {
        "version": 1,
        "config": ckpt.config,
        "codec_kind": ckpt.codec_kind,
        "step": ckpt.step,
        "val_history": [[int(s), float(v)] for s, v in ckpt.val_history],
        "tensors": directory,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(hbytes)))
        fh.write(hbytes)
        for part in io_parts:
            fh.write(part)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:6] != CKPT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic in {path}")
    if len(raw) < 10:
        raise CheckpointError("truncated checkpoint header")
    (hlen,) = struct.unpack_from("<I", raw, 6)
    hstart = 10
    if len(raw) < hstart + hlen:
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(raw[hstart:hstart + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    payload = raw[hstart + hlen:]
    tensors = {}
    for name, meta in header["tensors"].items():
        dtype = _DTYPE_TAGS.get(meta["dtype"])
        if dtype is None:
            raise CheckpointError(f"unknown tensor dtype {meta['dtype']!r}")
        count = int(np.prod(meta["shape"])) if meta["shape"] else 1
        start = meta["offset"]
        end = start + count * dtype.itemsize
        if end > len(payload):
            raise CheckpointError(f"tensor {name!r} extends past payload end")
        arr = np.frombuffer(payload[start:end], dtype=dtype).reshape(meta["shape"])
        tensors[name] = arr.astype(dtype.newbyteorder("="), copy=True)
    return Checkpoint(config=header["config"], codec_kind=header["codec_kind"],
                      step=header["step"],
                      val_history=[(int(s), float(v)) for s, v in header["val_history"]],
                      tensors=tensors)


def select_best(history: list[tuple[int, float]]) -> int:
    """Index of the retained evaluation: smallest loss, earliest on ties."""
    if not history:
        raise ValueError("empty validation history")
    losses = [v for _, v in history]
    return int(np.argmin(losses))


def make_denoiser_config(latent_channels: int, conditional: bool,
                         base_channels: int = 32,
                         channel_mults: tuple[int, ...] = (1, 2, 4),
                         time_dim: int = 64, groups: int = 8,
                         cond_channels: int = 3,
                         cond_source_channels: int = 3) -> DenoiserConfig:
    cc = cond_channels if conditional else 0
    return DenoiserConfig(
        in_channels=latent_channels + cc,
        out_channels=latent_channels,
        cond_channels=cc,
        cond_source_channels=cond_source_channels,
        base_channels=base_channels,
        channel_mults=tuple(channel_mults),
        time_dim=time_dim,
        groups=groups,
    )


def condition_encoder(params: DenoiserParams) -> ConditionEncoderParams:
    return ConditionEncoderParams(weight=params["cond.w"], bias=params["cond.b"])


def _latents(sample: PairedSample, spec: codec_mod.CodecSpec) -> tuple[Tensor, Tensor]:
    x0 = codec_mod.encode(spec, constant(sample.target[None]))
    y = codec_mod.encode(spec, constant(sample.source[None]))
    return x0, y


def _sample_loss(denoiser_fn, params: DenoiserParams, sample: PairedSample,
                 spec: codec_mod.CodecSpec, cfg: TrainConfig, sched, rng: Rng,
                 t: Optional[int]):
    x0, y = _latents(sample, spec)
    cond = None
    if cfg.conditional:
        src = constant(sample.source[None])
        cond = encode_condition(src, x0.shape[2], x0.shape[3], condition_encoder(params))
    if cfg.process == "bridge":
        return diffusion.bridge_loss(denoiser_fn, x0, y, cond, sched, rng,
                                     weighting=cfg.weighting, t=t)
    return diffusion.gaussian_loss(denoiser_fn, x0, cond, sched, rng, t=t)


def _val_hash(val_set: list[PairedSample]) -> str:
    h = hashlib.sha256()
    for s in val_set:
        h.update(s.source.tobytes())
        h.update(s.target.tobytes())
    return h.hexdigest()


def train(cfg: TrainConfig, train_set: list[PairedSample], val_set: list[PairedSample],
          codec_spec: codec_mod.CodecSpec, dcfg: DenoiserConfig,
          log_every: int = 0) -> TrainResult:
    """Run the optimization and return the best-validation checkpoint.

    Deterministic: (seed, config, data) fixes the parameter trajectory.
    A non-finite loss aborts the run and returns the best checkpoint so far.
    """
    if not train_set:
        raise ValueError("empty training set")
    if not val_set:
        raise ValueError("empty validation set")
    if cfg.conditional != (dcfg.cond_channels > 0):
        raise ValueError("conditional flag does not match the denoiser config")
    train_lons = {s.longitude for s in train_set}
    val_lons = {s.longitude for s in val_set}
    if train_lons & val_lons or max(train_lons) >= min(val_lons):
        raise ValueError("train/val longitudes are not disjoint")

    root = Rng(cfg.seed)
    params = denoiser_init(dcfg, root.child("init"))
    denoiser_fn = make_denoiser_fn(params)
    state = adam_init(params.tensors)
    ocfg = AdamConfig(lr=cfg.lr, beta1=cfg.adam_beta1, beta2=cfg.adam_beta2, eps=cfg.adam_eps)

    if cfg.process == "bridge":
        sched = build_bridge_schedule(cfg.T)
    else:
        sched = build_gaussian_schedule(cfg.T, cfg.beta_start, cfg.beta_end)

    ema_tensors: dict[str, np.ndarray] = {}
    if cfg.ema > 0:
        ema_tensors = {k: p.data.copy() for k, p in params.tensors.items()}

    def snapshot(step: int, history) -> Checkpoint:
        tensors = {f"denoiser.{k}": p.data.copy() for k, p in params.tensors.items()}
        for k, m in state.m.items():
            tensors[f"adam.m.{k}"] = m.copy()
            tensors[f"adam.v.{k}"] = state.v[k].copy()
        for k, e in ema_tensors.items():
            tensors[f"ema.{k}"] = e.copy()
        return Checkpoint(
            config={"train": asdict(cfg), "denoiser": asdict(dcfg)},
            codec_kind=codec_spec.kind,
            step=step,
            val_history=list(history),
            tensors=tensors,
        )

    def validate(vrng_seed: Rng) -> float:
        total = 0.0
        for i, s in enumerate(val_set):
            vrng = vrng_seed.child(f"val{i}")
            t = int(vrng.child("t").integers(1, cfg.T + 1))
            loss = _sample_loss(denoiser_fn, params, s, codec_spec, cfg, sched, vrng, t)
            total += loss.item()
        return total / len(val_set)

    val_rng = root.child("val")   # fixed: same draws at every evaluation
    expected_hash = _val_hash(val_set)
    history: list[tuple[int, float]] = []
    curves: list[tuple[int, float, Optional[float]]] = []
    val_hashes: list[str] = []
    best: Optional[Checkpoint] = None
    best_loss = float("inf")
    diverged = False

    step = 0
    total_steps = cfg.epochs * len(train_set)
    for epoch in range(cfg.epochs):
        order = root.child(f"order.e{epoch}").permutation(len(train_set))
        flip_rng = root.child(f"flip.e{epoch}")
        loss_rng = root.child(f"loss.e{epoch}")
        for idx in order:
            sample = hflip_augment(train_set[int(idx)], flip_rng, p=cfg.flip_prob)
            srng = loss_rng.child(f"s{step}")
            forced_t = None
            if cfg.t_sampling == "stratified":
                forced_t = (step % cfg.T) + 1
            try:
                loss = _sample_loss(denoiser_fn, params, sample, codec_spec, cfg,
                                    sched, srng, forced_t)
            except NonFiniteError:
                diverged = True
                break
            loss_val = loss.item()
            if not np.isfinite(loss_val):
                diverged = True
                break
            for p in params.tensors.values():
                p.grad = None
            grads = backward(loss)
            gmap = {k: grads.get(p, np.zeros_like(p.data)) for k, p in params.tensors.items()}
            adam_step(params.tensors, gmap, state, ocfg)
            if cfg.ema > 0:
                for k, p in params.tensors.items():
                    ema_tensors[k] = cfg.ema * ema_tensors[k] + (1 - cfg.ema) * p.data
            step += 1
            is_val_step = step % cfg.val_interval == 0 or step == total_steps
            val_loss = None
            if is_val_step:
                current = _val_hash(val_set)
                if current != expected_hash:
                    raise RuntimeError("validation set mutated during training")
                val_hashes.append(current)
                val_loss = validate(val_rng)
                history.append((step, val_loss))
                if val_loss < best_loss:
                    best_loss = val_loss
                    best = snapshot(step, history)
            curves.append((step, loss_val, val_loss))
            if log_every and step % log_every == 0:
                print(f"step {step}/{total_steps} loss {loss_val:.5f}"
                      + (f" val {val_loss:.5f}" if val_loss is not None else ""))
        if diverged:
            break

    if best is None:  # no validation point reached (short run or divergence)
        history.append((step, float("inf")))
        best = snapshot(step, history)
    else:
        best.val_history = list(history)
    return TrainResult(checkpoint=best, curves=curves,
                       val_batch_hashes=val_hashes, diverged=diverged)


def curves_csv(curves: list[tuple[int, float, Optional[float]]]) -> str:
    lines = ["step,train_loss,val_loss"]
    for step, tr, vl in curves:
        lines.append(f"{step},{tr:.8g}," + (f"{vl:.8g}" if vl is not None else ""))
    return "\n".join(lines) + "\n"
