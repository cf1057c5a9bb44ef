"""Patch datasets and a seeded synthetic texture generator.

The generator produces square texture patches whose appearance is driven
entirely by a per-category row of latent attribute values, so categories
with equal rows are statistically indistinguishable by construction.
Latent slots, all in [0, 1]:

    0 warm      base hue from cool blue toward warm orange
    1 striped   amplitude of an oriented sinusoidal pattern
    2 slanted   orientation of the stripes (0 = horizontal, 1 = 60 deg)
    3 speckled  rate of small bright specular spots
    4 smooth    low-pass filtering of the fine luminance noise
    5 bright    overall luminance level
"""

from __future__ import annotations

import colorsys
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .errors import InputError

MIN_PATCH_SIDE = 16
N_LATENT = 6

# Binary-ish latent rows for up to 10 categories; neighbouring rows share
# attributes so the generated world has overlapping appearance.
_DEFAULT_ROWS = np.array(
    [
        [1.0, 0.0, 0.0, 0.0, 0.0, 1.0],
        [1.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        [0.0, 1.0, 1.0, 0.0, 0.0, 0.0],
        [0.0, 0.0, 0.0, 1.0, 0.0, 0.0],
        [0.0, 0.0, 0.0, 1.0, 1.0, 0.5],
        [1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
        [0.0, 1.0, 0.5, 0.0, 0.0, 1.0],
        [0.0, 0.0, 1.0, 1.0, 0.0, 1.0],
        [1.0, 1.0, 1.0, 0.0, 0.5, 0.5],
        [0.5, 0.0, 0.0, 0.5, 0.0, 0.25],
    ]
)


@dataclass(frozen=True)
class Patch:
    """One square image patch with its category label (1..K)."""

    id: str
    source_image: str
    bbox: tuple[int, int, int, int]  # x, y, w, h with w == h
    category: int
    pixels: np.ndarray  # (side, side, 3) floats in [0, 1]

    @property
    def side(self) -> int:
        return self.bbox[2]


@dataclass
class PatchDataset:
    patches: list[Patch]
    category_names: list[str]

    def __len__(self) -> int:
        return len(self.patches)

    @property
    def num_categories(self) -> int:
        return len(self.category_names)

    def categories(self) -> np.ndarray:
        return np.array([p.category for p in self.patches], dtype=int)

    def by_category(self, k: int) -> list[Patch]:
        return [p for p in self.patches if p.category == k]


@dataclass
class SyntheticSpec:
    """Parameters of the synthetic texture world.

    latent rows drive all per-category appearance; two categories with
    equal rows draw their patches from the same distribution.
    """

    num_categories: int
    latent: np.ndarray  # (K, N_LATENT) values in [0, 1]
    patch_side: int = 32
    seed: int = 0
    noise_sigma: float = 0.13
    stripe_amp: float = 0.22
    max_blur: float = 2.2
    speckle_rate: float = 6.0

    def __post_init__(self) -> None:
        self.latent = np.asarray(self.latent, dtype=float)
        if self.num_categories < 2:
            raise InputError("synthetic spec needs at least 2 categories")
        if self.latent.shape != (self.num_categories, N_LATENT):
            raise InputError(
                f"latent matrix must be {self.num_categories}x{N_LATENT}, "
                f"got {self.latent.shape}"
            )
        if self.latent.min() < 0 or self.latent.max() > 1:
            raise InputError("latent attribute values must lie in [0, 1]")

    def category_names(self) -> list[str]:
        return [f"cat{k:02d}" for k in range(1, self.num_categories + 1)]


def make_spec(num_categories: int, seed: int = 0, patch_side: int = 32,
              latent: np.ndarray | None = None) -> SyntheticSpec:
    """Build a spec with the default overlapping latent rows."""
    if latent is None:
        if num_categories > len(_DEFAULT_ROWS):
            raise InputError(
                f"default latent table covers up to {len(_DEFAULT_ROWS)} categories"
            )
        latent = _DEFAULT_ROWS[:num_categories].copy()
    return SyntheticSpec(num_categories=num_categories, latent=latent,
                         patch_side=patch_side, seed=seed)


def latent_similarity(spec: SyntheticSpec, scale: float = 1.2) -> np.ndarray:
    """Ground-truth probability that a category-c patch is judged similar
    to a category-k sample, derived from latent row distance."""
    rows = spec.latent
    d2 = ((rows[:, None, :] - rows[None, :, :]) ** 2).sum(axis=2)
    return np.exp(-d2 / scale)


def render_texture(spec: SyntheticSpec, category: int, side: int,
                   rng: np.random.Generator) -> np.ndarray:
    """Render one texture image for a category (1..K)."""
    warm, striped, slanted, speckled, smooth, bright = spec.latent[category - 1]

    hue = (1 - warm) * 0.58 + warm * 0.07 + rng.normal(0.0, 0.015)
    sat = 0.45 + 0.10 * rng.random()
    val = 0.35 + 0.45 * bright + rng.normal(0.0, 0.03)

    noise = rng.normal(0.0, spec.noise_sigma, size=(side, side))
    if smooth > 0:
        noise = gaussian_filter(noise, sigma=spec.max_blur * smooth, mode="reflect")

    yy, xx = np.mgrid[0:side, 0:side].astype(float)
    theta = slanted * (np.pi / 3.0) + rng.normal(0.0, 0.06)
    freq = rng.uniform(0.18, 0.22)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    stripes = spec.stripe_amp * striped * np.sin(
        2.0 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase
    )

    vmap = np.clip(val + noise + stripes, 0.05, 1.0)
    base = np.array(colorsys.hsv_to_rgb(hue % 1.0, np.clip(sat, 0, 1), 1.0))
    img = vmap[:, :, None] * base[None, None, :]

    n_spots = rng.poisson(spec.speckle_rate * speckled * (side / 32.0) ** 2)
    for _ in range(n_spots):
        cy, cx = rng.uniform(0, side, size=2)
        r = rng.uniform(0.8, 1.8)
        dy = np.arange(side)[:, None] - cy
        dx = np.arange(side)[None, :] - cx
        bump = 0.9 * np.exp(-(dy ** 2 + dx ** 2) / (2.0 * r ** 2))
        img = img + bump[:, :, None] * (1.0 - img)

    return np.clip(img, 0.0, 1.0)


def generate_synthetic(spec: SyntheticSpec, n_per_category: int
                       ) -> tuple[list[Patch], np.ndarray]:
    """Generate n patches per category plus the latent row each exhibits.

    Reproducible from spec.seed; per-patch RNG streams are derived from
    (seed, category, index) so output does not depend on generation order.
    """
    if n_per_category < 1:
        raise InputError("n_per_category must be >= 1")
    patches = []
    truth = []
    for k in range(1, spec.num_categories + 1):
        for i in range(n_per_category):
            rng = np.random.default_rng([spec.seed, k, i])
            pix = render_texture(spec, k, spec.patch_side, rng)
            pid = f"cat{k:02d}-{i:05d}"
            patches.append(Patch(
                id=pid,
                source_image=f"synthetic://{pid}",
                bbox=(0, 0, spec.patch_side, spec.patch_side),
                category=k,
                pixels=pix,
            ))
            truth.append(spec.latent[k - 1])
    return patches, np.array(truth)


def sample_patches(image: np.ndarray, n: int, side: int,
                   rng: np.random.Generator, prefix: str = "p",
                   category: int = 1) -> list[Patch]:
    """Sample n square windows uniformly inside an image."""
    h, w = image.shape[:2]
    if h < side or w < side:
        raise InputError(f"image {w}x{h} smaller than patch side {side}")
    out = []
    for i in range(n):
        y = int(rng.integers(0, h - side + 1))
        x = int(rng.integers(0, w - side + 1))
        out.append(Patch(
            id=f"{prefix}-{i:04d}",
            source_image=prefix,
            bbox=(x, y, side, side),
            category=category,
            pixels=image[y:y + side, x:x + side, :].copy(),
        ))
    return out


def composite_image(spec: SyntheticSpec, cat_left: int, cat_right: int,
                    size: int, seed: int = 0) -> np.ndarray:
    """Two-texture image: left half from one category, right from another."""
    rng_l = np.random.default_rng([spec.seed, seed, cat_left, 0])
    rng_r = np.random.default_rng([spec.seed, seed, cat_right, 1])
    left = render_texture(spec, cat_left, size, rng_l)
    right = render_texture(spec, cat_right, size, rng_r)
    out = left.copy()
    out[:, size // 2:, :] = right[:, size // 2:, :]
    return out


# ---------------------------------------------------------------------------
# Dataset files: images/ directory plus a JSON-lines index
# ---------------------------------------------------------------------------

def write_dataset(root: str | Path, patches: list[Patch],
                  category_names: list[str]) -> Path:
    """Materialize patches as PNGs plus an index.jsonl; returns index path."""
    root = Path(root)
    img_dir = root / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    index_path = root / "index.jsonl"
    with open(index_path, "w", encoding="utf-8") as fh:
        for p in patches:
            rel = f"images/{p.id}.png"
            arr = np.clip(p.pixels * 255.0 + 0.5, 0, 255).astype(np.uint8)
            Image.fromarray(arr).save(img_dir / f"{p.id}.png")
            rec = {
                "id": p.id,
                "image": rel,
                "bbox": [0, 0, p.side, p.side],
                "category": category_names[p.category - 1],
            }
            fh.write(json.dumps(rec) + "\n")
    return index_path


def load_dataset(index_path: str | Path) -> PatchDataset:
    """Load a patch dataset from a JSON-lines index.

    Each record: {"id": str, "image": relative path, "bbox": [x,y,w,h],
    "category": str}.  Categories are numbered 1..K in sorted name order.
    """
    index_path = Path(index_path)
    if not index_path.exists():
        raise InputError(f"index file not found: {index_path}")
    root = index_path.parent

    records = []
    with open(index_path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise InputError(f"{index_path}:{lineno}: malformed JSON: {exc}") from exc
            for key in ("id", "image", "bbox", "category"):
                if key not in rec:
                    raise InputError(f"{index_path}:{lineno}: missing field '{key}'")
            records.append((lineno, rec))

    names = sorted({rec["category"] for _, rec in records})
    cat_of = {name: i + 1 for i, name in enumerate(names)}

    image_cache: dict[str, np.ndarray] = {}
    patches = []
    for lineno, rec in records:
        img_path = root / rec["image"]
        if rec["image"] not in image_cache:
            if not img_path.exists():
                raise InputError(
                    f"patch '{rec['id']}': image file not found: {img_path}"
                )
            arr = np.asarray(Image.open(img_path).convert("RGB"), dtype=float) / 255.0
            image_cache[rec["image"]] = arr
        img = image_cache[rec["image"]]

        x, y, w, h = (int(v) for v in rec["bbox"])
        if w != h:
            raise InputError(f"patch '{rec['id']}': bbox must be square, got w={w} h={h}")
        if w < 1 or x < 0 or y < 0 or x + w > img.shape[1] or y + h > img.shape[0]:
            raise InputError(
                f"patch '{rec['id']}': bbox ({x},{y},{w},{h}) out of range for "
                f"image {img.shape[1]}x{img.shape[0]}"
            )
        patches.append(Patch(
            id=rec["id"],
            source_image=rec["image"],
            bbox=(x, y, w, h),
            category=cat_of[rec["category"]],
            pixels=img[y:y + h, x:x + w, :].copy(),
        ))

    return PatchDataset(patches=patches, category_names=names)
