"""Two-domain phantom data pipeline.

Generates deterministic synthetic slices standing in for multi-contrast
brain MRI (large diffuse blobs, four distinct channels) and thoracic CT
(small bright nodules on textured background, one channel replicated to
four), plus the preprocessing, augmentation, balanced batch sampling and
the USEG1 on-disk sample format.

Every generator output is a pure function of (spec, domain, index); all
augmentation randomness comes from an explicitly passed generator.
"""

from __future__ import annotations

import csv
import hashlib
import math
import struct
from dataclasses import dataclass, field, replace
from enum import IntEnum
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .tensor import Tensor

USEG_MAGIC = b"USEG1\x00"
USEG_VERSION = 1


class Domain(IntEnum):
    """Image source regime; values double as the USEG1 wire encoding."""

    MRI_LIKE = 0
    CT_LIKE = 1

    @property
    def tag(self) -> str:
        return "mri" if self is Domain.MRI_LIKE else "ct"

    @classmethod
    def from_tag(cls, tag: str) -> "Domain":
        try:
            return {"mri": cls.MRI_LIKE, "ct": cls.CT_LIKE}[tag.lower()]
        except KeyError:
            raise ValueError(f"unknown domain tag {tag!r}") from None


@dataclass
class Sample:
    image: np.ndarray  # (4, S, S) float64 in [0, 1]
    mask: np.ndarray  # (1, S, S) uint8 in {0, 1}
    domain: Domain
    id: str


@dataclass
class PhantomSpec:
    image_size: int = 128
    lesion_count: tuple[int, int] = (1, 3)
    lesion_radius: tuple[float, float] = (8.0, 24.0)  # half-max radius, px
    texture_scale: float = 16.0  # background smoothing length, px
    contrast: tuple[float, float] = (0.5, 1.0)
    seed: int = 0

    def validate(self):
        if self.image_size < 8:
            raise ValueError(f"image_size too small: {self.image_size}")
        lo, hi = self.lesion_count
        if lo < 0 or hi < lo:
            raise ValueError(f"bad lesion_count range {self.lesion_count}")
        rlo, rhi = self.lesion_radius
        if rlo <= 0 or rhi < rlo or rhi >= self.image_size / 2:
            raise ValueError(
                f"lesion radii {self.lesion_radius} must be positive and < image_size/2"
            )
        clo, chi = self.contrast
        if clo <= 0 or chi < clo:
            raise ValueError(f"bad contrast range {self.contrast}")
        if self.texture_scale <= 0:
            raise ValueError(f"texture_scale must be positive, got {self.texture_scale}")
        return self


def mri_spec(image_size: int = 128, seed: int = 0) -> PhantomSpec:
    """Diffuse multi-channel blobs; radii scale with image size."""
    k = image_size / 128.0
    return PhantomSpec(
        image_size=image_size,
        lesion_count=(1, 3),
        lesion_radius=(max(2.0, 8.0 * k), max(4.0, 24.0 * k)),
        texture_scale=max(12.0, 16.0 * k),
        contrast=(0.7, 1.0),
        seed=seed,
    )


def ct_spec(image_size: int = 128, seed: int = 0) -> PhantomSpec:
    """Small compact high-intensity nodules on textured background."""
    k = image_size / 128.0
    return PhantomSpec(
        image_size=image_size,
        lesion_count=(1, 3),
        lesion_radius=(max(1.0, 2.0 * k), max(2.0, 6.0 * k)),
        texture_scale=max(2.0, 2.0 * k),
        contrast=(0.8, 1.2),
        seed=seed,
    )


def _lesion_field(spec: PhantomSpec, rng: np.random.Generator, s: int):
    """Sum of radially Gaussian lesions plus the union of their half-max
    supports as the mask. One contrast amplitude is drawn per slice so the
    half-max contour corresponds to a consistent intensity level."""
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    field = np.zeros((s, s))
    mask = np.zeros((s, s), dtype=bool)
    count = int(rng.integers(spec.lesion_count[0], spec.lesion_count[1] + 1))
    amp = rng.uniform(*spec.contrast)
    half_max = math.sqrt(2.0 * math.log(2.0))
    for _ in range(count):
        r = rng.uniform(*spec.lesion_radius)
        margin = min(r + 2.0, (s - 2) / 2.0)
        cy = rng.uniform(margin, s - 1 - margin)
        cx = rng.uniform(margin, s - 1 - margin)
        d2 = (yy - cy) ** 2 + (xx - cx) ** 2
        sigma = r / half_max  # profile crosses half its peak at distance r
        field += amp * np.exp(-d2 / (2.0 * sigma * sigma))
        mask |= d2 <= r * r
    return field, mask


def _smooth_noise(rng: np.random.Generator, s: int, sigma: float) -> np.ndarray:
    tex = gaussian_filter(rng.standard_normal((s, s)), sigma=sigma)
    lo, hi = tex.min(), tex.max()
    return (tex - lo) / (hi - lo) if hi > lo else np.zeros_like(tex)


def _one_phantom(spec: PhantomSpec, domain: Domain, index: int) -> Sample:
    rng = np.random.default_rng([spec.seed, int(domain), index])
    s = spec.image_size
    field, mask = _lesion_field(spec, rng, s)

    if domain is Domain.MRI_LIKE:
        bg = _smooth_noise(rng, s, spec.texture_scale)
        channels = []
        for _ in range(4):
            gain = rng.uniform(0.7, 1.3)
            jitter = rng.uniform(0.9, 1.1)
            noise = 0.008 * rng.standard_normal((s, s))
            channels.append(0.2 * gain * bg + jitter * field + noise)
        image = normalize_slice(np.stack(channels))
    else:
        bg = 0.3 * _smooth_noise(rng, s, spec.texture_scale)
        noise = 0.015 * rng.standard_normal((s, s))
        plane = normalize_slice((bg + field + noise)[None])
        image = np.repeat(plane, 4, axis=0)

    image = image.astype(np.float32).astype(np.float64)  # survive USEG1 round trips
    return Sample(
        image=image,
        mask=mask[None].astype(np.uint8),
        domain=domain,
        id=f"{domain.tag}-{spec.seed}-{index:05d}",
    )


def generate_phantom(spec: PhantomSpec, domain: Domain, n: int) -> list[Sample]:
    """Deterministic phantom samples; sample i depends only on (spec, domain, i)."""
    if n < 1:
        raise ValueError(f"need n >= 1, got {n}")
    spec.validate()
    return [_one_phantom(spec, domain, i) for i in range(n)]


def normalize_slice(image: np.ndarray) -> np.ndarray:
    """Min-max normalize each channel to [0, 1]; constant channels map to zeros."""
    arr = np.asarray(image, dtype=np.float64)
    if not np.isfinite(arr).all():
        raise ValueError("normalize_slice: input has non-finite values")
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[None]
    flat = arr.reshape(arr.shape[0], -1)
    lo = flat.min(axis=1, keepdims=True)
    hi = flat.max(axis=1, keepdims=True)
    span = np.where(hi > lo, hi - lo, 1.0)
    out = ((flat - lo) / span).reshape(arr.shape)
    return out[0] if squeeze else out


def resize_bilinear(image: np.ndarray, size: int) -> np.ndarray:
    """Corner-aligned bilinear resize of a (C, H, W) image to (C, size, size)."""
    if size < 2:
        raise ValueError(f"target size must be >= 2, got {size}")
    arr = np.asarray(image, dtype=np.float64)
    c, h, w = arr.shape
    if (h, w) == (size, size):
        return arr.copy()
    ys = np.linspace(0.0, h - 1.0, size)
    xs = np.linspace(0.0, w - 1.0, size)
    y0 = np.floor(ys).astype(int).clip(0, h - 2)
    x0 = np.floor(xs).astype(int).clip(0, w - 2)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    tl = arr[:, y0[:, None], x0[None, :]]
    tr = arr[:, y0[:, None], x0[None, :] + 1]
    bl = arr[:, y0[:, None] + 1, x0[None, :]]
    br = arr[:, y0[:, None] + 1, x0[None, :] + 1]
    top = tl + (tr - tl) * fx
    bot = bl + (br - bl) * fx
    return top + (bot - top) * fy


def resize_nearest(mask: np.ndarray, size: int) -> np.ndarray:
    """Nearest-neighbor resize of a (C, H, W) mask; preserves binarity."""
    if size < 2:
        raise ValueError(f"target size must be >= 2, got {size}")
    arr = np.asarray(mask)
    c, h, w = arr.shape
    if (h, w) == (size, size):
        return arr.copy()
    ys = np.rint(np.linspace(0.0, h - 1.0, size)).astype(int)
    xs = np.rint(np.linspace(0.0, w - 1.0, size)).astype(int)
    return arr[:, ys[:, None], xs[None, :]]


def _sample_bilinear(plane: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample a (H, W) plane at fractional coordinates; outside maps to 0."""
    h, w = plane.shape
    valid = (ys >= 0) & (ys <= h - 1) & (xs >= 0) & (xs <= w - 1)
    yc = ys.clip(0, h - 1)
    xc = xs.clip(0, w - 1)
    y0 = np.floor(yc).astype(int).clip(0, h - 2)
    x0 = np.floor(xc).astype(int).clip(0, w - 2)
    fy = yc - y0
    fx = xc - x0
    tl = plane[y0, x0]
    tr = plane[y0, x0 + 1]
    bl = plane[y0 + 1, x0]
    br = plane[y0 + 1, x0 + 1]
    out = (tl + (tr - tl) * fx) + ((bl + (br - bl) * fx) - (tl + (tr - tl) * fx)) * fy
    return np.where(valid, out, 0.0)


def _sample_nearest(plane: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    h, w = plane.shape
    valid = (ys >= -0.5) & (ys < h - 0.5) & (xs >= -0.5) & (xs < w - 0.5)
    yi = np.rint(ys).astype(int).clip(0, h - 1)
    xi = np.rint(xs).astype(int).clip(0, w - 1)
    out = plane[yi, xi]
    return np.where(valid, out, 0)


def _warp(image: np.ndarray, mask: np.ndarray, ys: np.ndarray, xs: np.ndarray):
    """Resample image (bilinear) and mask (nearest, re-binarized) at the same
    source coordinates."""
    warped_img = np.stack([_sample_bilinear(ch, ys, xs) for ch in image])
    warped_mask = np.stack([_sample_nearest(ch, ys, xs) for ch in mask])
    return warped_img.clip(0.0, 1.0), (warped_mask > 0.5).astype(np.uint8)


def rotate_sample(image: np.ndarray, mask: np.ndarray, degrees: float):
    """Rotate image and mask jointly about the center; out-of-frame fills 0."""
    s = image.shape[-1]
    c = (s - 1) / 2.0
    theta = math.radians(degrees)
    cos, sin = math.cos(theta), math.sin(theta)
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    dy, dx = yy - c, xx - c
    src_y = c + cos * dy - sin * dx
    src_x = c + sin * dy + cos * dx
    return _warp(image, mask, src_y, src_x)


def elastic_deform(
    image: np.ndarray,
    mask: np.ndarray,
    rng: np.random.Generator,
    alpha: float = 6.0,
    sigma: float = 4.0,
    grid: int = 8,
):
    """Warp by a smoothed random displacement field drawn on a coarse grid."""
    s = image.shape[-1]
    coarse = rng.standard_normal((2, grid, grid)) * alpha
    disp = resize_bilinear(coarse, s)
    disp = np.stack([gaussian_filter(d, sigma=sigma) for d in disp])
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    return _warp(image, mask, yy + disp[0], xx + disp[1])


@dataclass
class AugmentConfig:
    flip_p: float = 0.5  # horizontal and vertical, decided independently
    rotate_p: float = 0.5
    rotate_deg: float = 15.0
    elastic_p: float = 0.3
    elastic_alpha: float = 6.0
    elastic_sigma: float = 4.0
    elastic_grid: int = 8
    photometric_p: float = 0.5
    brightness: float = 0.2
    contrast: float = 0.2
    coarse_dropout_p: float = 0.3
    dropout_rects: tuple[int, int] = (1, 3)
    dropout_frac: tuple[float, float] = (0.08, 0.25)

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(flip_p=0.0, rotate_p=0.0, elastic_p=0.0, photometric_p=0.0, coarse_dropout_p=0.0)


def augment(sample: Sample, rng: np.random.Generator, config: AugmentConfig) -> Sample:
    """Apply each transform independently with its configured probability.

    Geometric transforms hit image and mask identically (mask resampled
    nearest-neighbor and re-binarized); photometric adjustments and coarse
    dropout touch the image only, clamped to [0, 1].
    """
    image, mask = sample.image, sample.mask

    if rng.random() < config.flip_p:
        image, mask = image[:, :, ::-1].copy(), mask[:, :, ::-1].copy()
    if rng.random() < config.flip_p:
        image, mask = image[:, ::-1, :].copy(), mask[:, ::-1, :].copy()
    if rng.random() < config.rotate_p:
        deg = rng.uniform(-config.rotate_deg, config.rotate_deg)
        image, mask = rotate_sample(image, mask, deg)
    if rng.random() < config.elastic_p:
        image, mask = elastic_deform(
            image, mask, rng, config.elastic_alpha, config.elastic_sigma, config.elastic_grid
        )
    if rng.random() < config.photometric_p:
        gain = 1.0 + rng.uniform(-config.contrast, config.contrast)
        shift = rng.uniform(-config.brightness, config.brightness)
        image = ((image - 0.5) * gain + 0.5 + shift).clip(0.0, 1.0)
    if rng.random() < config.coarse_dropout_p:
        s = image.shape[-1]
        k = int(rng.integers(config.dropout_rects[0], config.dropout_rects[1] + 1))
        image = image.copy()
        for _ in range(k):
            rh = int(rng.uniform(*config.dropout_frac) * s)
            rw = int(rng.uniform(*config.dropout_frac) * s)
            y0 = int(rng.integers(0, max(1, s - rh)))
            x0 = int(rng.integers(0, max(1, s - rw)))
            image[:, y0 : y0 + rh, x0 : x0 + rw] = 0.0

    return Sample(image=image, mask=mask, domain=sample.domain, id=sample.id)


def balanced_batches(
    mri: list[Sample],
    ct: list[Sample],
    batch_size: int,
    rng: np.random.Generator,
) -> list[list[Sample]]:
    """Batches holding exactly batch_size/2 samples per domain.

    One epoch exhausts the longer domain once (a shuffled pass, padded by
    resampling for a ragged final batch); the shorter domain is resampled
    with replacement. Within-batch order is shuffled.
    """
    if batch_size % 2:
        raise ValueError(f"batch_size must be even, got {batch_size}")
    if not mri or not ct:
        raise ValueError("both domains must be non-empty")
    half = batch_size // 2
    n_batches = -(-max(len(mri), len(ct)) // half)  # ceil
    needed = n_batches * half

    def domain_order(items):
        idx = list(rng.permutation(len(items))[: min(len(items), needed)])
        while len(idx) < needed:
            idx.append(int(rng.integers(0, len(items))))
        return [items[i] for i in idx]

    mri_stream = domain_order(mri)
    ct_stream = domain_order(ct)
    batches = []
    for b in range(n_batches):
        batch = mri_stream[b * half : (b + 1) * half] + ct_stream[b * half : (b + 1) * half]
        order = rng.permutation(batch_size)
        batches.append([batch[i] for i in order])
    return batches


def stack_batch(samples: list[Sample], dtype=np.float64):
    """Samples -> (images Tensor [N,4,S,S], masks [N,1,S,S] float, domain list)."""
    images = np.stack([s.image for s in samples]).astype(dtype)
    masks = np.stack([s.mask for s in samples]).astype(dtype)
    domains = [s.domain for s in samples]
    return Tensor(images), masks, domains


def write_sample(path, sample: Sample):
    """Serialize one sample in the USEG1 format (float32 image, uint8 mask)."""
    c, h, w = sample.image.shape
    with open(path, "wb") as f:
        f.write(USEG_MAGIC)
        f.write(struct.pack("<HBHHH", USEG_VERSION, int(sample.domain), c, h, w))
        f.write(sample.image.astype("<f4").tobytes())
        f.write(sample.mask.astype(np.uint8).tobytes())


def read_sample(path) -> Sample:
    """Parse a USEG1 file; malformed input raises naming the byte offset."""
    path = Path(path)
    blob = path.read_bytes()

    def fail(offset, why):
        raise ValueError(f"bad sample file {path}: {why} at offset {offset}")

    if blob[: len(USEG_MAGIC)] != USEG_MAGIC:
        fail(0, f"magic {blob[:len(USEG_MAGIC)]!r} != {USEG_MAGIC!r}")
    pos = len(USEG_MAGIC)
    header = struct.calcsize("<HBHHH")
    if len(blob) < pos + header:
        fail(pos, "truncated header")
    version, domain_code, c, h, w = struct.unpack_from("<HBHHH", blob, pos)
    if version != USEG_VERSION:
        fail(pos, f"unsupported version {version}")
    if domain_code not in (0, 1):
        fail(pos + 2, f"unknown domain code {domain_code}")
    pos += header
    n_img = c * h * w
    if len(blob) < pos + 4 * n_img:
        fail(pos, f"declared dims {(c, h, w)} exceed payload (image truncated)")
    image = np.frombuffer(blob, dtype="<f4", count=n_img, offset=pos).reshape(c, h, w)
    pos += 4 * n_img
    if len(blob) < pos + h * w:
        fail(pos, "mask truncated")
    mask = np.frombuffer(blob, dtype=np.uint8, count=h * w, offset=pos).reshape(1, h, w)
    return Sample(
        image=image.astype(np.float64),
        mask=mask.copy(),
        domain=Domain(domain_code),
        id=path.stem,
    )


def assign_splits(ids: list[str], fractions=(0.70, 0.15, 0.15)) -> dict[str, str]:
    """Deterministic 70/15/15 split by id hash: ids are ranked by their MD5
    digest, then sliced. Val/test get at least one id each once n >= 3."""
    order = sorted(ids, key=lambda i: (hashlib.md5(i.encode()).hexdigest(), i))
    n = len(order)
    if n == 1:
        return {order[0]: "train"}
    if n == 2:
        return {order[0]: "train", order[1]: "val"}
    n_val = max(1, round(fractions[1] * n))
    n_test = max(1, round(fractions[2] * n))
    n_train = n - n_val - n_test
    out = {}
    for i, sid in enumerate(order):
        out[sid] = "train" if i < n_train else ("val" if i < n_train + n_val else "test")
    return out


def write_dataset(out_dir, samples: list[Sample]) -> Path:
    """Write samples plus a manifest CSV (id, path, domain, split); splits
    are assigned per domain so each split covers both domains."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    splits = {}
    for domain in Domain:
        ids = [s.id for s in samples if s.domain is domain]
        if ids:
            splits.update(assign_splits(ids))
    manifest = out / "manifest.csv"
    with open(manifest, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["id", "path", "domain", "split"])
        for s in samples:
            fname = f"{s.id}.useg"
            write_sample(out / fname, s)
            writer.writerow([s.id, fname, s.domain.tag, splits[s.id]])
    return manifest


def load_dataset(data_dir) -> dict[str, list[Sample]]:
    """Read a dataset directory back into {'train'|'val'|'test': [Sample]}."""
    data = Path(data_dir)
    manifest = data / "manifest.csv"
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest.csv in {data}")
    out: dict[str, list[Sample]] = {"train": [], "val": [], "test": []}
    with open(manifest, newline="") as f:
        for row in csv.DictReader(f):
            sample = read_sample(data / row["path"])
            expect = Domain.from_tag(row["domain"])
            if sample.domain is not expect:
                raise ValueError(
                    f"manifest says {row['id']} is {row['domain']} but file stores "
                    f"{sample.domain.tag}"
                )
            if row["split"] not in out:
                raise ValueError(f"unknown split {row['split']!r} for {row['id']}")
            out[row["split"]].append(sample)
    return out


def split_by_domain(samples: list[Sample]) -> dict[Domain, list[Sample]]:
    out = {Domain.MRI_LIKE: [], Domain.CT_LIKE: []}
    for s in samples:
        out[s.domain].append(s)
    return out
