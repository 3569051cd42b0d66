"""Batch command-line front end.

Subcommands: gen-data, preprocess, train, translate, eval, schedule-dump.
Every command is deterministic given (flags, config, seed). Exit codes:
0 success, 1 runtime failure, 2 invalid input, with a single-line summary
on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import jsonschema
import numpy as np

from . import codec as codec_mod
from . import data as data_mod
from . import diffusion, metrics, trainer
from .denoiser import DenoiserConfig, encode_condition
from .rng import Rng
from .schedule import ScheduleError, build_bridge_schedule, schedule_csv
from .tensor import constant
from .tensor_io import TensorFileError

_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["version"],
    "properties": {
        "version": {"const": 1},
        "data": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "image_size": {"type": "integer", "minimum": 8},
                "shape_count": {"type": "array", "items": {"type": "integer"}, "minItems": 2, "maxItems": 2},
                "looks": {"type": "integer", "minimum": 1},
                "background_cells": {"type": "integer", "minimum": 1},
                "seed": {"type": "integer"},
            },
        },
        "codec": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": list(codec_mod.KINDS)},
                "block": {"type": "integer", "minimum": 1},
                "latent_channels": {"type": "integer", "minimum": 1},
            },
        },
        "denoiser": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "base_channels": {"type": "integer", "minimum": 4},
                "channel_mults": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 2},
                "time_dim": {"type": "integer", "minimum": 4},
                "groups": {"type": "integer", "minimum": 1},
                "cond_channels": {"type": "integer", "minimum": 1},
                "attention_level": {"type": ["integer", "null"]},
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "process": {"enum": ["bridge", "gaussian"]},
                "conditional": {"type": "boolean"},
                "epochs": {"type": "integer", "minimum": 1},
                "batch_size": {"type": "integer", "minimum": 1},
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "T": {"type": "integer", "minimum": 2},
                "weighting": {"enum": ["simplified", "elbo"]},
                "beta_start": {"type": "number"},
                "beta_end": {"type": "number"},
                "t_sampling": {"enum": ["uniform", "stratified"]},
                "flip_prob": {"type": "number", "minimum": 0, "maximum": 1},
                "val_interval": {"type": "integer", "minimum": 1},
                "ema": {"type": "number", "minimum": 0, "maximum": 1},
                "seed": {"type": "integer"},
            },
        },
        "split": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "train_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "buffer_deg": {"type": "number", "minimum": 0},
            },
        },
        "translate": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "stride": {"type": "integer", "minimum": 1},
                "deterministic": {"type": "boolean"},
                "seed": {"type": "integer"},
            },
        },
    },
}


class InputError(Exception):
    """Invalid input (config, manifest, file contents): exit code 2."""


def load_run_config(path: str | None) -> dict:
    if path is None:
        cfg = {"version": 1}
    else:
        try:
            cfg = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise InputError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise InputError(f"config is not valid JSON: {exc}") from None
    try:
        jsonschema.validate(cfg, _SCHEMA)
    except jsonschema.ValidationError as exc:
        loc = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise InputError(f"config invalid at {loc}: {exc.message}") from None
    return cfg


def _synth_config(cfg: dict) -> data_mod.SynthConfig:
    d = cfg.get("data", {})
    return data_mod.SynthConfig(
        image_size=d.get("image_size", 64),
        shape_count=tuple(d.get("shape_count", (3, 8))),
        looks=d.get("looks", 1),
        background_cells=d.get("background_cells", 8),
        seed=d.get("seed", 0),
    )


def _codec_spec(cfg: dict) -> codec_mod.CodecSpec:
    c = cfg.get("codec", {})
    return codec_mod.CodecSpec(
        kind=c.get("kind", "space_to_depth"),
        block=c.get("block", 4),
        latent_channels=c.get("latent_channels", 48),
    )


def _train_config(cfg: dict, args) -> trainer.TrainConfig:
    t = dict(cfg.get("train", {}))
    for key in ("process", "epochs", "lr", "T", "seed", "weighting", "val_interval"):
        v = getattr(args, key.replace("-", "_"), None)
        if v is not None:
            t[key] = v
    if getattr(args, "conditional", None) is not None:
        t["conditional"] = args.conditional
    return trainer.TrainConfig(**t)


def _denoiser_config(cfg: dict, latent_channels: int, conditional: bool,
                     source_channels: int = 3) -> DenoiserConfig:
    d = cfg.get("denoiser", {})
    return trainer.make_denoiser_config(
        latent_channels=latent_channels,
        conditional=conditional,
        base_channels=d.get("base_channels", 32),
        channel_mults=tuple(d.get("channel_mults", (1, 2, 4))),
        time_dim=d.get("time_dim", 64),
        groups=d.get("groups", 8),
        cond_channels=d.get("cond_channels", 3),
        cond_source_channels=source_channels,
    )


def _resolve(base: Path, rel: str) -> Path:
    p = Path(rel)
    return p if p.is_absolute() else base / p


def _load_pairs(manifest_path: str, want_split: str | None = None) -> list[data_mod.PairedSample]:
    base = Path(manifest_path).parent
    pairs = []
    for rec in data_mod.read_manifest(manifest_path):
        if want_split is not None and rec.get("split") != want_split:
            continue
        if "longitude" not in rec:
            raise InputError(f"manifest record {rec.get('id', '?')!r} is missing longitude")
        source = data_mod.load_image(_resolve(base, rec["source_path"]))
        target = data_mod.load_image(_resolve(base, rec["target_path"]))
        pairs.append(data_mod.PairedSample(source=source, target=target,
                                           longitude=float(rec["longitude"]), id=rec["id"]))
    return pairs


# ---- commands -------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = load_run_config(args.config)
    if args.n < 1:
        raise InputError(f"--n must be >= 1, got {args.n}")
    scfg = _synth_config(cfg)
    if args.seed is not None:
        scfg = data_mod.SynthConfig(image_size=scfg.image_size, shape_count=scfg.shape_count,
                                    looks=scfg.looks, background_cells=scfg.background_cells,
                                    seed=args.seed)
    out = Path(args.out)
    img_dir = out / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    ext = ".png" if args.format == "png" else ".ndt"
    records = []
    for pair in data_mod.synth_generate(scfg, args.n):
        sp = f"images/{pair.id}_src{ext}"
        tp = f"images/{pair.id}_tgt{ext}"
        data_mod.save_image(pair.source, out / sp)
        data_mod.save_image(pair.target, out / tp)
        records.append({"id": pair.id, "source_path": sp, "target_path": tp,
                        "longitude": pair.longitude})
    data_mod.write_manifest(records, out / "manifest.jsonl")
    print(f"wrote {len(records)} pairs to {out}")
    return 0


def cmd_preprocess(args) -> int:
    base = Path(args.manifest).parent
    out = Path(args.out) if args.out else base
    img_dir = out / "processed"
    records = data_mod.read_manifest(args.manifest)
    if not records:
        raise InputError("manifest is empty")

    processed = []
    for rec in records:
        if "longitude" not in rec:
            raise InputError(f"manifest record {rec.get('id', '?')!r} is missing longitude")
        rid = rec["id"]
        if {"vv_path", "vh_path", "hh_path"} <= rec.keys():
            chans = [data_mod.load_image(_resolve(base, rec[k]))[0]
                     for k in ("vv_path", "vh_path", "hh_path")]
            source = data_mod.false_color_composite(*chans)
            source = np.stack([data_mod.clahe(source[c], tiles=args.clahe_tiles)
                               for c in range(3)]).astype(np.float32)
            target = data_mod.load_image(_resolve(base, rec["target_path"]))
        else:
            source = data_mod.load_image(_resolve(base, rec["source_path"]))
            target = data_mod.load_image(_resolve(base, rec["target_path"]))
            if args.clahe:
                source = np.stack([data_mod.clahe(source[c], tiles=args.clahe_tiles)
                                   for c in range(3)]).astype(np.float32)
        if args.crop:
            src_crops = data_mod.extract_crops(source, args.crop)
            tgt_crops = data_mod.extract_crops(target, args.crop, max_zero_fraction=1.1)
            n = min(len(src_crops), len(tgt_crops))
            for k in range(n):
                processed.append(data_mod.PairedSample(
                    source=src_crops[k].astype(np.float32),
                    target=tgt_crops[k].astype(np.float32),
                    longitude=float(rec["longitude"]), id=f"{rid}_c{k}"))
        else:
            processed.append(data_mod.PairedSample(
                source=source.astype(np.float32), target=target.astype(np.float32),
                longitude=float(rec["longitude"]), id=rid))

    spec = data_mod.SplitSpec(train_fraction=args.split_fraction, buffer_deg=args.buffer)
    train_set, val_set = data_mod.split_by_longitude(processed, spec)
    split_of = {s.id: "train" for s in train_set}
    split_of.update({s.id: "val" for s in val_set})

    img_dir.mkdir(parents=True, exist_ok=True)
    out_records = []
    for s in processed:
        if s.id not in split_of:
            continue  # dropped by the buffer
        sp = f"processed/{s.id}_src.png"
        tp = f"processed/{s.id}_tgt.png"
        data_mod.save_image(s.source, out / sp)
        data_mod.save_image(s.target, out / tp)
        out_records.append({"id": s.id, "source_path": sp, "target_path": tp,
                            "longitude": s.longitude, "split": split_of[s.id]})
    data_mod.write_manifest(out_records, out / "manifest_split.jsonl")
    print(f"split: {len(train_set)} train / {len(val_set)} val -> {out / 'manifest_split.jsonl'}")
    return 0


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    tcfg = _train_config(cfg, args)
    spec = _codec_spec(cfg)
    if spec.kind == "tiny_ae":
        if not args.codec_params:
            raise InputError("tiny_ae codec requires --codec-params")
        ck = trainer.load_checkpoint(args.codec_params)
        spec.ae_params = {k: _to_tensor(v) for k, v in ck.tensors.items()}

    pairs = _load_pairs(args.data)
    by_split = {"train": [], "val": []}
    records = data_mod.read_manifest(args.data)
    have_split = all("split" in r for r in records)
    if have_split:
        for rec, pair in zip(records, pairs):
            if rec["split"] in by_split:
                by_split[rec["split"]].append(pair)
        train_set, val_set = by_split["train"], by_split["val"]
    else:
        s = cfg.get("split", {})
        split_spec = data_mod.SplitSpec(train_fraction=s.get("train_fraction", 0.8),
                                        buffer_deg=s.get("buffer_deg", 0.0))
        train_set, val_set = data_mod.split_by_longitude(pairs, split_spec)
    if not train_set or not val_set:
        raise InputError("need non-empty train and val sets")

    latent_channels = spec.latent_channels_for(train_set[0].source.shape[0])
    dcfg = _denoiser_config(cfg, latent_channels, tcfg.conditional,
                            source_channels=train_set[0].source.shape[0])
    result = trainer.train(tcfg, train_set, val_set, spec, dcfg,
                           log_every=args.log_every)
    trainer.save_checkpoint(result.checkpoint, args.out)
    if args.curves:
        Path(args.curves).write_text(trainer.curves_csv(result.curves))
    status = "diverged (best checkpoint retained)" if result.diverged else "done"
    print(f"{status}: step {result.checkpoint.step}, "
          f"best val {min(v for _, v in result.checkpoint.val_history):.6g}, "
          f"checkpoint -> {args.out}")
    return 0


def _to_tensor(arr):
    from .tensor import Tensor
    return Tensor(arr.copy(), requires_grad=False)


def cmd_translate(args) -> int:
    try:
        ckpt = trainer.load_checkpoint(args.checkpoint)
    except trainer.CheckpointError as exc:
        raise InputError(str(exc)) from None
    tdict = ckpt.config["train"]
    dcfg = DenoiserConfig(**ckpt.config["denoiser"])
    if args.codec and args.codec != ckpt.codec_kind:
        raise InputError(f"checkpoint was trained with codec {ckpt.codec_kind!r}, "
                         f"but --codec {args.codec!r} was requested")
    spec = codec_mod.CodecSpec(kind=ckpt.codec_kind)
    if spec.kind == "tiny_ae":
        if not args.codec_params:
            raise InputError("tiny_ae codec requires --codec-params")
        ck = trainer.load_checkpoint(args.codec_params)
        spec.ae_params = {k: _to_tensor(v) for k, v in ck.tensors.items()}

    pairs = _load_pairs(args.manifest, want_split="val")
    if not pairs:
        raise InputError("manifest has no val rows")
    latent_channels = spec.latent_channels_for(pairs[0].source.shape[0])
    if latent_channels != dcfg.out_channels:
        raise InputError(f"checkpoint predicts {dcfg.out_channels} latent channels but the "
                         f"data produces {latent_channels}; wrong codec or dataset")

    params = ckpt.denoiser_params()
    from .denoiser import make_denoiser_fn
    fn = make_denoiser_fn(params)
    T = tdict["T"]
    if tdict["process"] == "bridge":
        sched = build_bridge_schedule(T)
    else:
        sched = trainer.build_gaussian_schedule(T, tdict["beta_start"], tdict["beta_end"])
    if T % args.stride:
        raise InputError(f"stride {args.stride} does not divide T={T}")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = Rng(args.seed)
    for pair in pairs:
        src = constant(pair.source[None])
        y = codec_mod.encode(spec, src)
        cond = None
        if tdict["conditional"]:
            cond = encode_condition(src, y.shape[2], y.shape[3],
                                    trainer.condition_encoder(params))
        srng = rng.child(pair.id)
        if tdict["process"] == "bridge":
            z = diffusion.bridge_sample_loop(fn, y, cond, sched, stride=args.stride,
                                             rng=srng, deterministic=args.deterministic)
        else:
            z = diffusion.gaussian_sample_loop(fn, y.shape, cond, sched, stride=args.stride,
                                               rng=srng, deterministic=args.deterministic)
        img = codec_mod.decode(spec, z, image_channels=pair.source.shape[0])
        arr = np.clip(img.data[0], 0.0, 1.0)
        data_mod.save_image(arr, out / f"{pair.id}.png")
    print(f"translated {len(pairs)} images -> {out}")
    return 0


def cmd_eval(args) -> int:
    pairs = _load_pairs(args.manifest, want_split=args.split if args.split != "all" else None)
    if not pairs:
        raise InputError("no rows selected from manifest")
    pred_dir = Path(args.pred)
    report = metrics.MetricReport()
    for pair in pairs:
        ppath = pred_dir / f"{pair.id}.png"
        if not ppath.exists():
            ppath = pred_dir / f"{pair.id}.ndt"
        if not ppath.exists():
            raise InputError(f"no prediction found for id {pair.id!r} in {pred_dir}")
        pred = data_mod.load_image(ppath)
        report.add(pair.id, metrics.evaluate_pair(pred, pair.target))
    csv = metrics.report_csv(report)
    if args.out:
        Path(args.out).write_text(csv)
        print(f"wrote metrics for {report.count} images -> {args.out}")
    else:
        print(csv, end="")
    return 0


def cmd_schedule_dump(args) -> int:
    try:
        csv = schedule_csv(build_bridge_schedule(args.T))
    except ScheduleError as exc:
        raise InputError(str(exc)) from None
    if args.format != "csv":
        raise InputError(f"unsupported format {args.format!r}")
    if args.out:
        Path(args.out).write_text(csv)
        print(f"wrote schedule table -> {args.out}")
    else:
        print(csv, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bridgediff",
                                 description="Brownian-bridge image translation pipeline")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic paired dataset")
    g.add_argument("--config", default=None)
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--format", choices=("png", "ndt"), default="png")
    g.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("preprocess", help="composite/CLAHE/crop and split by longitude")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--split-fraction", type=float, default=0.8)
    p.add_argument("--buffer", type=float, default=0.0)
    p.add_argument("--crop", type=int, default=0)
    p.add_argument("--clahe", action="store_true", help="apply CLAHE to paired-source rows")
    p.add_argument("--clahe-tiles", type=int, default=8)
    p.set_defaults(fn=cmd_preprocess)

    t = sub.add_parser("train", help="train a model and save the best checkpoint")
    t.add_argument("--config", default=None)
    t.add_argument("--data", required=True, help="manifest path")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--curves", default=None, help="loss-curve CSV path")
    t.add_argument("--codec-params", default=None)
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--lr", type=float, default=None)
    t.add_argument("--T", type=int, default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--process", choices=("bridge", "gaussian"), default=None)
    t.add_argument("--weighting", choices=("simplified", "elbo"), default=None)
    t.add_argument("--val-interval", dest="val_interval", type=int, default=None)
    cond = t.add_mutually_exclusive_group()
    cond.add_argument("--conditional", dest="conditional", action="store_true", default=None)
    cond.add_argument("--no-conditional", dest="conditional", action="store_false")
    t.add_argument("--log-every", type=int, default=0)
    t.set_defaults(fn=cmd_train)

    tr = sub.add_parser("translate", help="run the reverse chain on every val row")
    tr.add_argument("--checkpoint", required=True)
    tr.add_argument("--manifest", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--stride", type=int, default=5)
    tr.add_argument("--deterministic", action="store_true")
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--codec", default=None)
    tr.add_argument("--codec-params", default=None)
    tr.set_defaults(fn=cmd_translate)

    e = sub.add_parser("eval", help="compute metrics CSV for predictions")
    e.add_argument("--pred", required=True, help="directory of predicted images")
    e.add_argument("--manifest", required=True)
    e.add_argument("--split", default="val", choices=("val", "train", "all"))
    e.add_argument("--out", default=None)
    e.set_defaults(fn=cmd_eval)

    s = sub.add_parser("schedule-dump", help="emit the bridge schedule table")
    s.add_argument("--T", type=int, required=True)
    s.add_argument("--format", default="csv")
    s.add_argument("--out", default=None)
    s.set_defaults(fn=cmd_schedule_dump)
    return ap


_INPUT_ERRORS = (InputError, data_mod.SplitError, codec_mod.CodecError,
                 trainer.CheckpointError, TensorFileError, ScheduleError,
                 ValueError, FileNotFoundError)


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.fn(args)
    except _INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
