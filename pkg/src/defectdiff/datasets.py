"""Mask-image pair datasets: disk loading, procedural synthesis, and splits.

A dataset is a flat collection of (image, mask, category) triples.  Images are
channel-first float32 arrays in [-1, 1]; masks are float32 {0, 1} maps of the
same spatial size.  The synthetic generator produces steel-like textures with
three defect appearances (inclusion / patches / scratches) and is a pure
function of (seed, category, resolution), which makes every downstream
training run reproducible without fixture files.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .util import sha256_bytes

CATEGORIES = ("inclusion", "patches", "scratches")
SOURCES = ("real", "synthetic", "generated")
IMAGE_EXTENSIONS = (".png", ".bmp", ".jpg", ".jpeg")

# Synthetic defects must occupy between 0.5% and 20% of the pixels; the band
# keeps masks visible to the detector without dominating the texture.
MASK_AREA_BAND = (0.005, 0.20)


@dataclass(frozen=True)
class MaskImagePair:
    """One defect image with its binary saliency mask and category label."""

    image: np.ndarray  # (C, H, W) float32 in [-1, 1]
    mask: np.ndarray  # (H, W) float32 in {0, 1}
    category: str
    source: str = "synthetic"

    def __post_init__(self):
        if self.image.ndim != 3:
            raise ValueError(f"image must be (C, H, W), got shape {self.image.shape}")
        if self.mask.ndim != 2:
            raise ValueError(f"mask must be (H, W), got shape {self.mask.shape}")
        if self.image.shape[1:] != self.mask.shape:
            raise ValueError(
                f"image {self.image.shape[1:]} and mask {self.mask.shape} disagree"
            )
        if self.source not in SOURCES:
            raise ValueError(f"unknown source {self.source!r}")

    @property
    def resolution(self) -> int:
        return self.mask.shape[0]

    def checksum(self) -> str:
        payload = self.image.astype("<f4").tobytes() + self.mask.astype("<f4").tobytes()
        return sha256_bytes(payload + self.category.encode())


@dataclass
class PairSet:
    """Immutable ordered collection of pairs sharing one resolution."""

    pairs: list[MaskImagePair] = field(default_factory=list)
    resolution: int = 0

    def __post_init__(self):
        for p in self.pairs:
            if p.resolution != self.resolution:
                raise ValueError(
                    f"pair resolution {p.resolution} != set resolution {self.resolution}"
                )

    def __len__(self):
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    def __getitem__(self, i) -> MaskImagePair:
        return self.pairs[i]

    def categories(self) -> list[str]:
        return sorted({p.category for p in self.pairs})

    def count(self, category: str | None = None) -> int:
        if category is None:
            return len(self.pairs)
        return sum(1 for p in self.pairs if p.category == category)

    def by_category(self, category: str) -> "PairSet":
        return PairSet([p for p in self.pairs if p.category == category], self.resolution)

    def subset(self, indices) -> "PairSet":
        return PairSet([self.pairs[i] for i in indices], self.resolution)

    def images(self) -> np.ndarray:
        return np.stack([p.image for p in self.pairs])

    def masks(self) -> np.ndarray:
        return np.stack([p.mask for p in self.pairs])


@dataclass(frozen=True)
class SplitSpec:
    """Train/test ratio expressed in integer parts, e.g. (9, 1) or (1, 5)."""

    train_parts: int
    test_parts: int
    seed: int = 0

    def __post_init__(self):
        if self.train_parts <= 0 or self.test_parts <= 0:
            raise ValueError(
                f"ratio parts must be positive, got {self.train_parts}:{self.test_parts}"
            )


def _category_key(category: str) -> int:
    return zlib.crc32(category.encode("utf-8"))


def _pair_rng(seed: int, category: str, resolution: int) -> np.random.Generator:
    ss = np.random.SeedSequence(
        [int(seed) & 0xFFFFFFFF, _category_key(category), int(resolution)]
    )
    return np.random.default_rng(ss)


def _background(rng: np.random.Generator, res: int) -> np.ndarray:
    """Brushed steel-like texture, kept inside [-0.7, 0.3] so defects never saturate.

    The grain magnitude is bounded away from zero so the pixel deviations from
    the image median have max deviation < 2x their MAD; a 2x-MAD threshold then
    flags no background pixels, which keeps deviation-based defect
    localization clean on this data.
    """
    base = rng.uniform(-0.45, -0.15)
    sign = rng.choice([-1.0, 1.0], size=(res, res))
    magnitude = rng.uniform(0.6, 1.0, size=(res, res))
    grain = 0.04 * sign * magnitude
    rows = np.arange(res, dtype=np.float64)[:, None]
    freq = rng.uniform(2.0, 5.0)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    banding = np.sin(2.0 * np.pi * freq * rows / res + phase) * np.ones((1, res))
    bg = base + grain + 0.015 * banding
    return np.clip(bg, -0.7, 0.3)


def _inclusion_delta(rng: np.random.Generator, res: int) -> np.ndarray:
    """Small dark elongated blobs."""
    delta = np.zeros((res, res))
    yy, xx = np.mgrid[0:res, 0:res]
    for _ in range(int(rng.integers(1, 3))):
        cy, cx = rng.uniform(0.2 * res, 0.8 * res, size=2)
        theta = rng.uniform(0.0, np.pi)
        s_long = rng.uniform(0.05, 0.11) * res
        s_short = s_long * rng.uniform(0.3, 0.55)
        dy, dx = yy - cy, xx - cx
        u = dx * np.cos(theta) + dy * np.sin(theta)
        v = -dx * np.sin(theta) + dy * np.cos(theta)
        q = (u / s_long) ** 2 + (v / s_short) ** 2
        amp = rng.uniform(-0.85, -0.55)
        blob = amp * np.exp(-q)
        blob[np.abs(blob) < 0.18] = 0.0
        delta = np.where(np.abs(blob) > np.abs(delta), blob, delta)
    return delta


def _patches_delta(rng: np.random.Generator, res: int) -> np.ndarray:
    """One broad irregular brightness-shifted region."""
    fld = ndimage.gaussian_filter(rng.standard_normal((res, res)), sigma=res / 7.0)
    target = rng.uniform(0.05, 0.14)
    level = np.quantile(fld, 1.0 - target)
    region = fld > level
    amp = rng.choice([-1.0, 1.0]) * rng.uniform(0.35, 0.6)
    inner = 0.06 * ndimage.gaussian_filter(rng.standard_normal((res, res)), sigma=1.0)
    return np.where(region, amp + inner, 0.0)


def _scratches_delta(rng: np.random.Generator, res: int) -> np.ndarray:
    """Thin curved bright or dark lines (quadratic Bezier strokes)."""
    delta = np.zeros((res, res))
    yy, xx = np.mgrid[0:res, 0:res]
    for _ in range(int(rng.integers(1, 4))):
        p0, p1, p2 = (rng.uniform(0.1 * res, 0.9 * res, size=2) for _ in range(3))
        t = np.linspace(0.0, 1.0, 6 * res)[:, None]
        pts = (1 - t) ** 2 * p0 + 2 * t * (1 - t) * p1 + t**2 * p2
        width = rng.uniform(0.6, 1.6) * max(res / 64.0, 1.0)
        amp = rng.choice([-1.0, 1.0]) * rng.uniform(0.45, 0.8)
        hit = np.zeros((res, res), dtype=bool)
        for cy, cx in pts:
            hit |= (yy - cy) ** 2 + (xx - cx) ** 2 <= width**2
        delta = np.where(hit, amp, delta)
    return delta


_DELTA_FNS = {
    "inclusion": _inclusion_delta,
    "patches": _patches_delta,
    "scratches": _scratches_delta,
}


def synth_pair(seed: int, category: str, resolution: int) -> MaskImagePair:
    """Procedural stand-in pair; pure function of (seed, category, resolution).

    The mask is exactly the set of pixels whose rendering deviates from the
    background, and its area always lands inside MASK_AREA_BAND (the delta is
    redrawn from the same stream until it does).
    """
    if category not in _DELTA_FNS:
        raise ValueError(f"unknown category {category!r}; expected one of {sorted(_DELTA_FNS)}")
    if resolution < 16:
        raise ValueError(f"resolution must be >= 16, got {resolution}")
    rng = _pair_rng(seed, category, resolution)
    bg = _background(rng, resolution)
    lo, hi = MASK_AREA_BAND
    for _ in range(64):
        delta = _DELTA_FNS[category](rng, resolution)
        rendered = np.clip(bg + delta, -1.0, 1.0)
        mask = (rendered != bg).astype(np.float32)
        frac = float(mask.mean())
        if lo <= frac <= hi:
            image = rendered.astype(np.float32)[None, :, :]
            return MaskImagePair(image=image, mask=mask, category=category)
    raise RuntimeError(
        f"could not draw a {category} mask inside the area band for seed {seed}"
    )


def synth_set(
    seed: int,
    per_category: int,
    resolution: int,
    categories=CATEGORIES,
) -> PairSet:
    """Balanced synthetic dataset: `per_category` pairs for each category."""
    pairs = []
    for cat in categories:
        for i in range(per_category):
            pairs.append(synth_pair(seed + i, cat, resolution))
    return PairSet(pairs, resolution)


def split(pair_set: PairSet, spec: SplitSpec) -> tuple[PairSet, PairSet]:
    """Deterministic stratified partition by the spec ratio.

    Per category, floor(n * train_parts / (train_parts + test_parts)) pairs go
    to train and the rest to test; the assignment is shuffled by the spec seed.
    """
    if len(pair_set) == 0:
        raise ValueError("cannot split an empty pair set")
    total = spec.train_parts + spec.test_parts
    train_idx: list[int] = []
    test_idx: list[int] = []
    for cat in pair_set.categories():
        idx = [i for i, p in enumerate(pair_set.pairs) if p.category == cat]
        rng = np.random.default_rng(
            np.random.SeedSequence([spec.seed & 0xFFFFFFFF, _category_key(cat)])
        )
        perm = rng.permutation(len(idx))
        n_train = len(idx) * spec.train_parts // total
        chosen = {idx[j] for j in perm[:n_train]}
        train_idx.extend(i for i in idx if i in chosen)
        test_idx.extend(i for i in idx if i not in chosen)
    return pair_set.subset(sorted(train_idx)), pair_set.subset(sorted(test_idx))


def _load_raster(path: Path, mode: str) -> np.ndarray:
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert(mode))
    except (OSError, ValueError) as exc:
        raise ValueError(f"unreadable raster file: {path}") from exc


def _resize(arr: np.ndarray, resolution: int, resample) -> np.ndarray:
    if arr.shape[0] == resolution and arr.shape[1] == resolution:
        return arr
    img = Image.fromarray(arr)
    return np.asarray(img.resize((resolution, resolution), resample=resample))


def load_pairs(root_path, resolution: int, channels: int = 1) -> PairSet:
    """Load `<root>/<category>/images/*` paired with `<root>/<category>/masks/<stem>.png`.

    Images resize bilinearly and normalize to [-1, 1]; masks resize with
    nearest-neighbor and binarize at 0.5 so they stay exactly {0, 1}.
    """
    root = Path(root_path)
    if not root.is_dir():
        raise ValueError(f"dataset root is not a directory: {root}")
    categories = sorted(d.name for d in root.iterdir() if d.is_dir())
    if not categories:
        raise ValueError(f"dataset root has no category subdirectories: {root}")
    mode = "L" if channels == 1 else "RGB"
    pairs: list[MaskImagePair] = []
    for cat in categories:
        image_dir = root / cat / "images"
        mask_dir = root / cat / "masks"
        if not image_dir.is_dir():
            raise ValueError(f"missing images directory: {image_dir}")
        stems = sorted(
            p.stem for p in image_dir.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS
        )
        for stem in stems:
            image_path = next(
                p
                for p in sorted(image_dir.iterdir())
                if p.stem == stem and p.suffix.lower() in IMAGE_EXTENSIONS
            )
            mask_path = mask_dir / f"{stem}.png"
            if not mask_path.is_file():
                raise ValueError(
                    f"image {stem!r} in category {cat!r} has no mask at {mask_path}"
                )
            raw_img = _resize(_load_raster(image_path, mode), resolution, Image.BILINEAR)
            raw_mask = _resize(_load_raster(mask_path, "L"), resolution, Image.NEAREST)
            image = raw_img.astype(np.float32) / 127.5 - 1.0
            if image.ndim == 2:
                image = image[None, :, :]
            else:
                image = image.transpose(2, 0, 1)
            mask = (raw_mask.astype(np.float32) / 255.0 > 0.5).astype(np.float32)
            pairs.append(
                MaskImagePair(image=image, mask=mask, category=cat, source="real")
            )
    if not pairs:
        raise ValueError(f"no mask-image pairs found under {root}")
    return PairSet(pairs, resolution)


def save_pairs(pair_set: PairSet, root_path, source: str | None = None) -> Path:
    """Write a pair set to disk in the load_pairs layout, plus a JSONL manifest.

    Returns the manifest path.  Images map [-1, 1] -> 8-bit; masks map {0, 1}
    -> {0, 255}.
    """
    root = Path(root_path)
    counters: dict[str, int] = {}
    records = []
    for pair in pair_set:
        i = counters.get(pair.category, 0)
        counters[pair.category] = i + 1
        stem = f"{pair.category}_{i:05d}"
        image_dir = root / pair.category / "images"
        mask_dir = root / pair.category / "masks"
        image_dir.mkdir(parents=True, exist_ok=True)
        mask_dir.mkdir(parents=True, exist_ok=True)
        img8 = np.clip((pair.image + 1.0) * 127.5, 0, 255).astype(np.uint8)
        img8 = img8[0] if img8.shape[0] == 1 else img8.transpose(1, 2, 0)
        Image.fromarray(img8).save(image_dir / f"{stem}.png")
        Image.fromarray((pair.mask * 255).astype(np.uint8)).save(mask_dir / f"{stem}.png")
        records.append(
            {
                "stem": stem,
                "category": pair.category,
                "source": source or pair.source,
                "image_path": str(image_dir / f"{stem}.png"),
                "mask_path": str(mask_dir / f"{stem}.png"),
                "checksum": pair.checksum(),
            }
        )
    manifest = root / "manifest.jsonl"
    with open(manifest, "w") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    return manifest
