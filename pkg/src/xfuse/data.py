"""Synthetic fundus phantoms, preprocessing, augmentation and dataset splits.

A phantom is a bright retinal disc on a dark field with a radial intensity
falloff, sinusoidal dark vessel streaks, a whitish optic disc (a distractor
that is *not* a lesion), pixel noise, and ``k`` soft-edged yellowish lesion
blobs. The mask is the union of the blob supports and the label is 1 when
the lesion area reaches a fraction ``tau`` of the disc area.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .errors import ConfigError, ValidationError
from .rng import stream

IMAGENET_MEAN = np.array([0.485, 0.456, 0.406])
IMAGENET_STD = np.array([0.229, 0.224, 0.225])

# Screening-population reference: train/val/test image counts and the
# positive (referable) count in the training split.
SCREENING_SPLIT_COUNTS = (35126, 10906, 42670)
SCREENING_TRAIN_POSITIVE = 6873
DEFAULT_SPLITS = (0.396, 0.123, 0.481)

LESION_COLOR = np.array([0.30, 0.22, -0.10])
OPTIC_DISC_COLOR = np.array([0.35, 0.35, 0.35])


@dataclass(frozen=True)
class SynthConfig:
    size: int = 64
    disc_radius: float = 0.42  # fraction of size
    lesion_mean: float = 2.25  # Poisson mean of the lesion count
    lesion_radius: tuple[float, float] = (1.2, 2.8)  # pixels at size 64, scaled with size
    lesion_intensity: float = 1.0  # multiplies LESION_COLOR
    intensity_jitter: float = 0.35
    color_jitter: float = 0.05  # per-channel multiplicative jitter of the retina colour
    noise: float = 0.03
    tau: float = 0.02
    label_margin: float = 0.25
    positive_rate: float = SCREENING_TRAIN_POSITIVE / SCREENING_SPLIT_COUNTS[0]
    splits: tuple[float, float, float] = DEFAULT_SPLITS
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.tau < 1:
            raise ConfigError(f"tau must lie in (0, 1), got {self.tau}")
        if len(self.splits) != 3 or any(f < 0 for f in self.splits) or abs(sum(self.splits) - 1) > 1e-9:
            raise ConfigError(f"split fractions must be non-negative and sum to 1, got {self.splits}")
        if self.size < 8:
            raise ConfigError("size must be >= 8")
        if self.label_margin < 0:
            raise ConfigError("label_margin must be non-negative")

    @classmethod
    def image_labeled(cls, **kw) -> "SynthConfig":
        """Screening-population analog: ~19.6% referable."""
        return cls(**kw)

    @classmethod
    def pixel_labeled(cls, **kw) -> "SynthConfig":
        """Lesion-annotated analog: every image carries several lesions."""
        kw.setdefault("lesion_mean", 4.0)
        kw.setdefault("lesion_radius", (1.2, 3.2))
        kw.setdefault("splits", (0.8, 0.1, 0.1))
        return cls(**kw)


@dataclass
class Sample:
    image: np.ndarray  # [3, S, S] in [0, 1]
    mask: np.ndarray | None  # [1, S, S] binary
    label: int
    id: str

    def __post_init__(self):
        if self.mask is not None and self.mask.shape[-2:] != self.image.shape[-2:]:
            raise ValidationError(f"mask {self.mask.shape} does not match image {self.image.shape}")


def _grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    c = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    return yy - c, xx - c


def disc_mask(size: int, disc_radius: float) -> np.ndarray:
    yy, xx = _grid(size)
    return (yy * yy + xx * xx) <= (disc_radius * size) ** 2


def lesion_fraction(mask: np.ndarray, disc: np.ndarray) -> float:
    """Lesion pixels as a fraction of disc pixels."""
    return float(np.count_nonzero(mask.reshape(disc.shape) & disc)) / float(np.count_nonzero(disc))


def label_from_mask(mask: np.ndarray, disc: np.ndarray, tau: float) -> int:
    return int(lesion_fraction(mask > 0.5, disc) >= tau)


def _draw_lesions(rng: np.random.Generator, cfg: SynthConfig, k: int):
    s = cfg.size
    scale = s / 64.0
    r_disc = cfg.disc_radius * s
    blobs = []
    for _ in range(k):
        rad = rng.uniform(*cfg.lesion_radius) * scale
        rho = r_disc * 0.85 * math.sqrt(rng.uniform())
        ang = rng.uniform(0, 2 * math.pi)
        strength = 1.0 + cfg.intensity_jitter * rng.uniform(-1, 1)
        blobs.append((rho * math.sin(ang), rho * math.cos(ang), rad, strength))
    return blobs


def synth_sample(rng: np.random.Generator, cfg: SynthConfig, sample_id: str = "", k: int | None = None) -> Sample:
    """Draw one phantom. ``k`` forces the lesion count."""
    s = cfg.size
    yy, xx = _grid(s)
    r = np.sqrt(yy * yy + xx * xx)
    r_disc = cfg.disc_radius * s
    disc = r <= r_disc

    # background: radial falloff inside a soft-edged disc
    base = np.array([0.75, 0.38, 0.18]) * rng.uniform(1 - cfg.color_jitter, 1 + cfg.color_jitter, size=3)
    falloff = 1.0 - 0.45 * (r / r_disc) ** 2
    edge = 1.0 / (1.0 + np.exp((r - r_disc) / 0.7))
    img = base[:, None, None] * (falloff * edge)[None]

    # vessels: dark sinusoidal streaks
    for _ in range(int(rng.integers(3, 6))):
        theta = rng.uniform(0, math.pi)
        freq = rng.uniform(0.5, 1.5) * 2 * math.pi / s
        phase = rng.uniform(0, 2 * math.pi)
        amp = rng.uniform(2, 6) * s / 64.0
        offset = rng.uniform(-0.6, 0.6) * r_disc
        u = xx * math.cos(theta) + yy * math.sin(theta)
        v = -xx * math.sin(theta) + yy * math.cos(theta)
        dist = np.abs(v - offset - amp * np.sin(freq * u + phase))
        width = rng.uniform(0.6, 1.2) * s / 64.0
        vessel = np.exp(-((dist / width) ** 2)) * edge
        img = img - 0.12 * vessel[None] * np.array([1.0, 0.8, 0.5])[:, None, None]

    # optic disc: bright, larger than any lesion, not part of the mask
    ang = rng.uniform(0, 2 * math.pi)
    oy, ox = 0.55 * r_disc * math.sin(ang), 0.55 * r_disc * math.cos(ang)
    od_r = 0.16 * r_disc
    od = 1.0 / (1.0 + np.exp((np.sqrt((yy - oy) ** 2 + (xx - ox) ** 2) - od_r) / 0.8))
    img = img + OPTIC_DISC_COLOR[:, None, None] * od[None]

    # lesions; resample until the area fraction clears the label margin band
    k_draw = int(rng.poisson(cfg.lesion_mean)) if k is None else int(k)
    lo, hi = cfg.tau / (1 + cfg.label_margin), cfg.tau * (1 + cfg.label_margin)
    for _ in range(100):
        blobs = _draw_lesions(rng, cfg, k_draw)
        mask = np.zeros((s, s), dtype=bool)
        for by, bx, rad, _ in blobs:
            mask |= (yy - by) ** 2 + (xx - bx) ** 2 <= rad * rad
        frac = lesion_fraction(mask, disc)
        if not lo <= frac < hi:
            break
    else:  # pragma: no cover - the band is narrow relative to the radius range
        raise ValidationError("could not draw lesions outside the label margin band")
    for by, bx, rad, strength in blobs:
        d = np.sqrt((yy - by) ** 2 + (xx - bx) ** 2)
        soft = 1.0 / (1.0 + np.exp((d - rad) / 0.35))
        img = img + (cfg.lesion_intensity * strength * LESION_COLOR)[:, None, None] * soft[None]

    img = img + cfg.noise * rng.standard_normal(img.shape)
    img = np.clip(img, 0.0, 1.0)
    label = int(frac >= cfg.tau)
    return Sample(image=img, mask=mask[None].astype(np.float64), label=label, id=sample_id)


def sample_id(index: int) -> str:
    return f"img-{index:06d}"


def generate(cfg: SynthConfig, index: int, name: str = "synth") -> Sample:
    """Pure function of ``(cfg.seed, name, index)``."""
    sid = sample_id(index)
    return synth_sample(stream(cfg.seed, name, sid), cfg, sid)


# ------------------------------------------------------------- preprocessing


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of the last two axes, half-pixel centres, edge clamped."""
    h, w = img.shape[-2:]
    if (h, w) == (out_h, out_w):
        return img.copy()

    def coords(n_out, n_in):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        i0 = np.floor(src).astype(int)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, src - i0

    y0, y1, fy = coords(out_h, h)
    x0, x1, fx = coords(out_w, w)
    top = img[..., y0, :] * (1 - fy)[:, None] + img[..., y1, :] * fy[:, None]
    return top[..., x0] * (1 - fx) + top[..., x1] * fx


def resize_nearest(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = img.shape[-2:]
    ys = np.minimum(((np.arange(out_h) + 0.5) * h / out_h).astype(int), h - 1)
    xs = np.minimum(((np.arange(out_w) + 0.5) * w / out_w).astype(int), w - 1)
    return img[..., ys[:, None], xs[None, :]]


def center_crop(img: np.ndarray, size: int) -> np.ndarray:
    h, w = img.shape[-2:]
    top, left = (h - size) // 2, (w - size) // 2
    return img[..., top : top + size, left : left + size]


def resize_target(size: int) -> int:
    """Pre-crop resize edge: 1.15 * size rounded to the nearest even integer."""
    return 2 * int(round(1.15 * size / 2))


def normalize(img: np.ndarray) -> np.ndarray:
    return (img - IMAGENET_MEAN[:, None, None]) / IMAGENET_STD[:, None, None]


def preprocess(raw, size: int = 64) -> np.ndarray:
    """Raw [3,H,W] grid -> resized, center-cropped, normalised [3,size,size].

    Inputs that already have the target geometry skip resize and crop.
    """
    img = np.asarray(raw, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3 or min(img.shape) == 0:
        raise ValidationError(f"expected a non-empty [3,H,W] image, got shape {img.shape}")
    if img.shape[1:] != (size, size):
        big = resize_target(size)
        img = center_crop(resize_bilinear(img, big, big), size)
    return normalize(img)


# --------------------------------------------------------------- augmentation


@dataclass(frozen=True)
class AugmentParams:
    rot90: int = 0
    hflip: bool = False
    vflip: bool = False
    brightness: float = 1.0
    contrast: float = 1.0
    crop: tuple[int, int] | None = None  # top-left of the 0.9*S crop

    @property
    def is_identity(self) -> bool:
        return self == AugmentParams()


def draw_augment(rng: np.random.Generator, size: int) -> AugmentParams:
    c = crop_size(size)
    return AugmentParams(
        rot90=int(rng.integers(0, 4)),
        hflip=bool(rng.random() < 0.5),
        vflip=bool(rng.random() < 0.5),
        brightness=float(rng.uniform(0.8, 1.2)),
        contrast=float(rng.uniform(0.8, 1.2)),
        crop=(int(rng.integers(0, size - c + 1)), int(rng.integers(0, size - c + 1))),
    )


def crop_size(size: int) -> int:
    return int(round(0.9 * size))


def apply_spatial(arr: np.ndarray, a: AugmentParams) -> np.ndarray:
    """Rotation, flips and crop-resize (nearest) on the last two axes."""
    out = np.rot90(arr, a.rot90, axes=(-2, -1))
    if a.hflip:
        out = out[..., ::-1]
    if a.vflip:
        out = out[..., ::-1, :]
    if a.crop is not None:
        s = arr.shape[-1]
        c = crop_size(s)
        top, left = a.crop
        out = resize_nearest(out[..., top : top + c, left : left + c], s, s)
    return np.ascontiguousarray(out)


def apply_color(img: np.ndarray, a: AugmentParams) -> np.ndarray:
    if a.brightness == 1.0 and a.contrast == 1.0:
        return img
    mean = img.mean()
    return np.clip((img - mean) * a.contrast + mean * a.brightness, 0.0, 1.0)


def augment(rng: np.random.Generator, sample: Sample, extra: Sequence[np.ndarray] = (), params=None):
    """Jointly augment a sample (and any extra spatial maps such as lesion maps).

    Returns the augmented sample, or ``(sample, extras)`` when ``extra`` is given.
    """
    a = params if params is not None else draw_augment(rng, sample.image.shape[-1])
    img = apply_color(apply_spatial(sample.image, a), a)
    mask = None if sample.mask is None else apply_spatial(sample.mask, a)
    out = Sample(image=img, mask=mask, label=sample.label, id=sample.id)
    if extra:
        return out, [apply_spatial(e, a) for e in extra]
    return out


# --------------------------------------------------------------------- splits


def split_sizes(n: int, fractions: Sequence[float]) -> list[int]:
    """Largest-remainder apportionment of ``n`` items."""
    raw = [f * n for f in fractions]
    sizes = [int(math.floor(x + 1e-9)) for x in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - sizes[i]), i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    return sizes


def make_splits(n: int, fractions: Sequence[float] = DEFAULT_SPLITS, seed: int = 0) -> dict[str, list[int]]:
    """Disjoint, exhaustive train/val/test index lists, shuffled by ``seed``."""
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1) > 1e-9:
        raise ConfigError(f"split fractions must be three non-negative numbers summing to 1, got {fractions}")
    sizes = split_sizes(n, fractions)
    for name, f, k in zip(("train", "val", "test"), fractions, sizes):
        if f > 0 and k == 0 and n > 0:
            raise ConfigError(f"split {name!r} has fraction {f} but receives no samples out of {n}")
    perm = stream(seed, "splits").permutation(n)
    out, start = {}, 0
    for name, k in zip(("train", "val", "test"), sizes):
        out[name] = sorted(int(i) for i in perm[start : start + k])
        start += k
    return out


def with_size(cfg: SynthConfig, size: int, seed: int) -> SynthConfig:
    return replace(cfg, size=size, seed=seed)
