"""Paired-domain data: synthetic generation, radar-style preprocessing,
longitude-disjoint splitting, and flip augmentation.

The synthetic generator produces co-registered pairs at desk scale: the
target is a colored scene of ellipses and boxes over a textured background,
the source is a structure-preserving grayscale rendering of the same scene
(bright edges, material-dependent backscatter levels) corrupted by
multiplicative speckle. Material identity is recoverable from the source
brightness, so the translation task is well-posed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rng import Rng


@dataclass
class PairedSample:
    source: np.ndarray    # (3, H, W) float32 in [0, 1]
    target: np.ndarray    # (3, H, W) float32 in [0, 1]
    longitude: float
    id: str

    def __post_init__(self):
        if self.source.shape != self.target.shape:
            raise ValueError("source/target dims differ")


@dataclass
class SynthConfig:
    image_size: int = 64
    shape_count: tuple[int, int] = (3, 8)
    looks: int = 1                  # speckle looks; larger = cleaner
    background_cells: int = 8       # texture scale: cells per image side
    seed: int = 0

    def __post_init__(self):
        if self.image_size % 4:
            raise ValueError("image_size must be divisible by 4 (codec block)")
        if self.looks < 1:
            raise ValueError("looks must be >= 1")


@dataclass
class SplitSpec:
    train_fraction: float = 0.8
    buffer_deg: float = 0.0

    def __post_init__(self):
        if not (0.0 < self.train_fraction < 1.0):
            raise ValueError("train fraction must be in (0, 1)")


# material palette: (target RGB, source backscatter level)
_MATERIALS = (
    ((0.75, 0.22, 0.18), 0.85),   # red roof, strong return
    ((0.22, 0.45, 0.20), 0.45),   # vegetation, medium
    ((0.55, 0.55, 0.58), 0.65),   # pavement
    ((0.16, 0.28, 0.55), 0.15),   # water, dark
    ((0.78, 0.70, 0.45), 0.55),   # bare soil
)
_BACKGROUND = ((0.35, 0.42, 0.28), 0.30)


def speckle_field(shape: tuple[int, ...], looks: int, rng: Rng) -> np.ndarray:
    """Unit-mean multiplicative speckle: Gamma(L, 1/L) intensity."""
    return rng.gamma(float(looks), size=shape) / looks


def _smooth_noise(size: int, cells: int, rng: Rng) -> np.ndarray:
    """Smooth field in [-1, 1]: low-res noise, bilinearly upsampled."""
    coarse = rng.uniform((cells + 1, cells + 1)) * 2.0 - 1.0
    idx = np.linspace(0, cells, size)
    lo = np.minimum(idx.astype(int), cells - 1)
    frac = idx - lo
    rows = coarse[lo, :] * (1 - frac)[:, None] + coarse[lo + 1, :] * frac[:, None]
    out = rows[:, lo] * (1 - frac)[None, :] + rows[:, lo + 1] * frac[None, :]
    return out


def _paint_shapes(size: int, rng: Rng, count: int):
    """Rasterize random ellipses/boxes; returns (material index map, edge map)."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    mat = np.full((size, size), -1, dtype=np.int64)
    for k in range(count):
        r = rng.child(f"shape{k}")
        cy, cx = r.uniform() * size, r.uniform() * size
        ry = size * (0.06 + 0.18 * r.uniform())
        rx = size * (0.06 + 0.18 * r.uniform())
        m = int(r.integers(0, len(_MATERIALS)))
        if r.uniform() < 0.5:
            mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        else:
            mask = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
        mat[mask] = m
    inner = mat.copy()
    edge = np.zeros((size, size), dtype=bool)
    edge[1:, :] |= inner[1:, :] != inner[:-1, :]
    edge[:, 1:] |= inner[:, 1:] != inner[:, :-1]
    return mat, edge


def synth_pair(cfg: SynthConfig, index: int) -> PairedSample:
    """Deterministic pair for (cfg.seed, index)."""
    rng = Rng(cfg.seed).child(f"sample{index}")
    size = cfg.image_size
    lo, hi = cfg.shape_count
    count = int(rng.child("count").integers(lo, hi + 1))
    mat, edge = _paint_shapes(size, rng.child("shapes"), count)
    tex = _smooth_noise(size, cfg.background_cells, rng.child("texture"))

    target = np.empty((3, size, size), dtype=np.float64)
    bg_color, bg_level = _BACKGROUND
    for c in range(3):
        target[c] = bg_color[c] * (1.0 + 0.25 * tex)
    structural = bg_level * (1.0 + 0.25 * tex)
    for m, (color, level) in enumerate(_MATERIALS):
        mask = mat == m
        jitter = 1.0 + 0.15 * tex[mask]
        for c in range(3):
            target[c][mask] = color[c] * jitter
        structural[mask] = level * jitter
    structural[edge] = np.minimum(structural[edge] * 2.5 + 0.15, 1.0)

    speckle = speckle_field((size, size), cfg.looks, rng.child("speckle"))
    noisy = np.clip(structural * speckle, 0.0, 1.0)
    source = np.repeat(noisy[None], 3, axis=0)
    target = np.clip(target, 0.0, 1.0)

    longitude = -120.0 + 0.01 * index
    return PairedSample(source=source.astype(np.float32),
                        target=target.astype(np.float32),
                        longitude=longitude, id=f"synth{index:05d}")


def synth_generate(cfg: SynthConfig, n: int) -> list[PairedSample]:
    if n < 1:
        raise ValueError("n must be >= 1")
    return [synth_pair(cfg, i) for i in range(n)]


def structural_image(cfg: SynthConfig, index: int) -> np.ndarray:
    """Clean (speckle-free) source rendering, for structure checks."""
    noiseless = SynthConfig(image_size=cfg.image_size, shape_count=cfg.shape_count,
                            looks=10 ** 6, background_cells=cfg.background_cells,
                            seed=cfg.seed)
    return synth_pair(noiseless, index).source[0]


def gradient_orientation_gap(a: np.ndarray, b: np.ndarray, mag_floor: float = 0.05) -> float:
    """Mean absolute gradient-orientation difference (mod pi) where both
    images have meaningful gradients; small values mean shared structure."""
    gya, gxa = np.gradient(a)
    gyb, gxb = np.gradient(b)
    maga = np.hypot(gya, gxa)
    magb = np.hypot(gyb, gxb)
    mask = (maga > mag_floor) & (magb > mag_floor)
    if not mask.any():
        raise ValueError("no overlapping gradient support")
    da = np.arctan2(gya, gxa)[mask]
    db = np.arctan2(gyb, gxb)[mask]
    diff = np.abs(da - db) % np.pi
    return float(np.mean(np.minimum(diff, np.pi - diff)))


def false_color_composite(vv: np.ndarray, vh: np.ndarray, hh: np.ndarray) -> np.ndarray:
    """Stack polarization intensities as channels (VV, VH, HH), each min-max
    scaled to [0, 1]; a constant channel maps to 0."""
    if not (vv.shape == vh.shape == hh.shape):
        raise ValueError("polarization channel dims differ")
    out = np.empty((3,) + vv.shape, dtype=np.float64)
    for i, ch in enumerate((vv, vh, hh)):
        lo, hi = float(ch.min()), float(ch.max())
        out[i] = 0.0 if hi == lo else (ch - lo) / (hi - lo)
    return out


def _clahe_validate(img: np.ndarray, tiles: int, clip: float) -> None:
    if img.ndim != 2:
        raise ValueError("clahe expects a single-channel image")
    if tiles < 1:
        raise ValueError("tiles must be >= 1")
    if not (clip >= 1.0):
        raise ValueError("clip must be >= 1 (bin-height multiples)")
    h, w = img.shape
    if h < tiles or w < tiles:
        raise ValueError(f"image {h}x{w} smaller than {tiles}x{tiles} tile grid")


def _tile_edges(length: int, tiles: int) -> np.ndarray:
    return np.linspace(0, length, tiles + 1).astype(int)


def clahe_luts(img: np.ndarray, tiles: int = 8, clip: float = 2.0,
               bins: int = 256) -> np.ndarray:
    """Per-tile clipped-equalization lookup tables, shape (tiles, tiles, bins).

    Each table is a nondecreasing map from bin index to [0, 1]. Tiles with
    no dynamic range get a bin-center identity table, which makes constant
    regions fixed points of the transform.
    """
    _clahe_validate(img, tiles, clip)
    h, w = img.shape
    b = np.clip((img * bins).astype(np.int64), 0, bins - 1)
    y_edges = _tile_edges(h, tiles)
    x_edges = _tile_edges(w, tiles)
    identity = (np.arange(bins) + 0.5) / bins
    luts = np.empty((tiles, tiles, bins))
    for i in range(tiles):
        for j in range(tiles):
            tile = b[y_edges[i]:y_edges[i + 1], x_edges[j]:x_edges[j + 1]]
            if tile.min() == tile.max():
                luts[i, j] = identity
                continue
            hist = np.bincount(tile.reshape(-1), minlength=bins).astype(np.float64)
            npix = tile.size
            if math.isfinite(clip):
                limit = clip * npix / bins
                excess = np.maximum(hist - limit, 0.0).sum()
                hist = np.minimum(hist, limit) + excess / bins
            luts[i, j] = np.cumsum(hist) / npix
    return luts


def clahe(img: np.ndarray, tiles: int = 8, clip: float = 2.0, bins: int = 256) -> np.ndarray:
    """Contrast-limited adaptive histogram equalization on a [0, 1] image.

    Per-tile histograms are clipped at ``clip`` times the uniform bin height
    (excess redistributed uniformly), turned into CDF lookup tables, and
    blended across the tile grid by bilinear interpolation of the mappings.
    """
    luts = clahe_luts(img, tiles=tiles, clip=clip, bins=bins)
    h, w = img.shape
    b = np.clip((img * bins).astype(np.int64), 0, bins - 1)
    y_edges = _tile_edges(h, tiles)
    x_edges = _tile_edges(w, tiles)
    centers_y = (y_edges[:-1] + y_edges[1:]) / 2.0 - 0.5
    centers_x = (x_edges[:-1] + x_edges[1:]) / 2.0 - 0.5

    def axis_blend(coords, centers):
        lo = np.clip(np.searchsorted(centers, coords, side="right") - 1, 0, tiles - 1)
        hi = np.clip(lo + 1, 0, tiles - 1)
        span = centers[hi] - centers[lo]
        frac = np.where(span > 0, (coords - centers[lo]) / np.where(span > 0, span, 1.0), 0.0)
        return lo, hi, np.clip(frac, 0.0, 1.0)

    yi0, yi1, fy = axis_blend(np.arange(h, dtype=np.float64), centers_y)
    xj0, xj1, fx = axis_blend(np.arange(w, dtype=np.float64), centers_x)
    fy = fy[:, None]
    fx = fx[None, :]
    Y0 = yi0[:, None]
    Y1 = yi1[:, None]
    X0 = xj0[None, :]
    X1 = xj1[None, :]
    out = ((1 - fy) * (1 - fx) * luts[Y0, X0, b]
           + (1 - fy) * fx * luts[Y0, X1, b]
           + fy * (1 - fx) * luts[Y1, X0, b]
           + fy * fx * luts[Y1, X1, b])
    return np.clip(out, 0.0, 1.0)


def extract_crops(tile: np.ndarray, crop: int = 512, max_zero_fraction: float = 0.01) -> list[np.ndarray]:
    """Corner-grid crops from a CHW tile, keeping those whose zero-intensity
    fraction (all channels exactly zero) is below the threshold."""
    c, h, w = tile.shape
    if crop > h or crop > w:
        raise ValueError(f"crop {crop} exceeds tile dims {h}x{w}")
    ys = sorted({0, h - crop})
    xs = sorted({0, w - crop})
    kept = []
    for y in ys:
        for x in xs:
            window = tile[:, y:y + crop, x:x + crop]
            zero_frac = np.mean(np.all(window == 0, axis=0))
            if zero_frac < max_zero_fraction:
                kept.append(window.copy())
    return kept


class SplitError(ValueError):
    pass


def split_by_longitude(samples: list, spec: SplitSpec) -> tuple[list, list]:
    """Sort west to east, cut at the train fraction, drop anything within
    the buffer of the cut. Guarantees max(train) < min(val) or raises."""
    if not samples:
        raise SplitError("no samples to split")
    lons = [s.longitude for s in samples]
    if min(lons) == max(lons):
        raise SplitError("all samples share one longitude; cannot guarantee disjoint split")
    order = sorted(range(len(samples)), key=lambda i: (lons[i], getattr(samples[i], "id", i)))
    n_train = int(len(samples) * spec.train_fraction)
    if n_train < 1 or n_train >= len(samples):
        raise SplitError(f"fraction {spec.train_fraction} leaves an empty side for n={len(samples)}")
    train = [samples[i] for i in order[:n_train]]
    val = [samples[i] for i in order[n_train:]]
    cut = (train[-1].longitude + val[0].longitude) / 2.0
    if spec.buffer_deg > 0:
        train = [s for s in train if abs(s.longitude - cut) >= spec.buffer_deg]
        val = [s for s in val if abs(s.longitude - cut) >= spec.buffer_deg]
        if not train or not val:
            raise SplitError("buffer removed one entire side of the split")
    if max(s.longitude for s in train) >= min(s.longitude for s in val):
        raise SplitError("longitude ranges overlap at the cut; cannot guarantee disjoint split")
    return train, val


def hflip_augment(pair: PairedSample, rng: Rng, p: float = 0.5) -> PairedSample:
    """Flip source and target together with probability p."""
    if p > 0 and rng.uniform() < p:
        return PairedSample(source=np.ascontiguousarray(pair.source[:, :, ::-1]),
                            target=np.ascontiguousarray(pair.target[:, :, ::-1]),
                            longitude=pair.longitude, id=pair.id)
    return pair


# ---- manifest I/O --------------------------------------------------------

def write_manifest(records: list[dict], path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_manifest(path) -> list[dict]:
    records = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def save_image(arr: np.ndarray, path) -> None:
    """CHW float [0,1] image to 8-bit PNG or an .ndt tensor file."""
    path = Path(path)
    if path.suffix == ".png":
        from PIL import Image
        hwc = np.clip(np.round(arr.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(hwc, mode="RGB").save(path)
    elif path.suffix == ".ndt":
        from .tensor_io import save_tensor
        save_tensor(path, arr.astype(np.float32))
    else:
        raise ValueError(f"unsupported image format {path.suffix!r}")


def load_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".png":
        from PIL import Image
        hwc = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
        return np.ascontiguousarray(hwc.transpose(2, 0, 1))
    if path.suffix == ".ndt":
        from .tensor_io import load_tensor
        return load_tensor(path).astype(np.float32)
    raise ValueError(f"unsupported image format {path.suffix!r}")
