"""Hand-crafted local patch descriptor and feature-file formats.

The descriptor concatenates four L2-normalized blocks computed from an
RGB patch in [0, 1]:

    color_hist    3x3x3 joint histogram in CIELAB            (27)
    orient_stats  mean/variance of 8-orientation x 3-scale
                  even Gabor responses                        (48)
    scale_energy  orientation-pooled per-scale energies       (6)
    grad_hist     16-bin gradient-magnitude histogram,
                  zero-magnitude pixels excluded              (16)
    lbp_hist      59-bin uniform local binary patterns        (59)

color_hist, scale_energy, grad_hist and lbp-independent statistics do not
depend on absolute orientation; orient_stats is deliberately covariant
with 90-degree rotations (the bank permutes).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.ndimage import sobel

from .errors import InputError, ShapeError
from .patches import Patch

MAGIC = b"PATFEAT1"

BLOCKS = (
    ("color_hist", 27),
    ("orient_stats", 48),
    ("scale_energy", 6),
    ("grad_hist", 16),
    ("lbp_hist", 59),
)
ROTATION_INVARIANT_BLOCKS = ("color_hist", "scale_energy", "grad_hist")


def block_slices() -> dict[str, slice]:
    out = {}
    start = 0
    for name, width in BLOCKS:
        out[name] = slice(start, start + width)
        start += width
    return out


FEATURE_DIM = sum(width for _, width in BLOCKS)


@dataclass(frozen=True)
class DescriptorConfig:
    min_side: int = 16
    n_orientations: int = 8
    scales: tuple[float, ...] = (1.0, 2.0, 4.0)
    grad_bins: int = 16
    grad_range: float = 1.5

    @property
    def descriptor_id(self) -> str:
        return (f"lab27-gabor{self.n_orientations}x{len(self.scales)}"
                f"-grad{self.grad_bins}-lbpu59/v1")


@dataclass(frozen=True)
class FeatureVector:
    patch_id: str
    values: np.ndarray
    descriptor_id: str


@dataclass
class FeatureSet:
    ids: list[str]
    values: np.ndarray  # (N, D)
    descriptor_id: str

    def __post_init__(self) -> None:
        if len(self.ids) != self.values.shape[0]:
            raise ShapeError("feature set ids and rows disagree")


# ---------------------------------------------------------------------------
# Color
# ---------------------------------------------------------------------------

def rgb_to_lab(rgb: np.ndarray) -> np.ndarray:
    """sRGB in [0,1] to CIELAB (D65)."""
    srgb = np.clip(rgb, 0.0, 1.0)
    lin = np.where(srgb <= 0.04045, srgb / 12.92, ((srgb + 0.055) / 1.055) ** 2.4)
    m = np.array([
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ])
    xyz = lin @ m.T
    white = np.array([0.95047, 1.0, 1.08883])
    t = xyz / white
    f = np.where(t > (6 / 29) ** 3, np.cbrt(t), t / (3 * (6 / 29) ** 2) + 4 / 29)
    lab = np.empty_like(f)
    lab[..., 0] = 116.0 * f[..., 1] - 16.0
    lab[..., 1] = 500.0 * (f[..., 0] - f[..., 1])
    lab[..., 2] = 200.0 * (f[..., 1] - f[..., 2])
    return lab


def _color_hist(rgb: np.ndarray) -> np.ndarray:
    lab = rgb_to_lab(rgb)
    li = np.clip((lab[..., 0] / 100.0 * 3).astype(int), 0, 2)
    ai = np.clip(((lab[..., 1] + 110.0) / 220.0 * 3).astype(int), 0, 2)
    bi = np.clip(((lab[..., 2] + 110.0) / 220.0 * 3).astype(int), 0, 2)
    idx = (li * 9 + ai * 3 + bi).ravel()
    hist = np.bincount(idx, minlength=27).astype(float)
    return hist / idx.size


# ---------------------------------------------------------------------------
# Oriented filter bank
# ---------------------------------------------------------------------------

@lru_cache(maxsize=8)
def _gabor_bank(n_orientations: int, scales: tuple[float, ...]
                ) -> tuple[tuple[np.ndarray, ...], ...]:
    """Zero-mean even Gabor kernels, bank[scale][orientation]."""
    bank = []
    for sigma in scales:
        half = int(np.ceil(2.5 * sigma))
        y, x = np.mgrid[-half:half + 1, -half:half + 1].astype(float)
        kernels = []
        for j in range(n_orientations):
            theta = j * np.pi / n_orientations
            xr = x * np.cos(theta) + y * np.sin(theta)
            yr = -x * np.sin(theta) + y * np.cos(theta)
            wavelength = 4.0 * sigma
            k = np.exp(-(xr ** 2 + 0.25 * yr ** 2) / (2 * sigma ** 2)) \
                * np.cos(2 * np.pi * xr / wavelength)
            k -= k.mean()
            k /= np.abs(k).sum()
            kernels.append(k)
        bank.append(tuple(kernels))
    return tuple(bank)


def _luma(rgb: np.ndarray) -> np.ndarray:
    return 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]


# FFT plans per (patch shape, bank config); the kernels are centrally
# symmetric so convolution equals correlation and no flip is needed.
_FFT_PLANS: dict[tuple, list] = {}


def _fft_plan(shape: tuple[int, int], cfg: DescriptorConfig) -> list:
    key = (shape, cfg.n_orientations, cfg.scales)
    plan = _FFT_PLANS.get(key)
    if plan is None:
        plan = []
        for kernels in _gabor_bank(cfg.n_orientations, cfg.scales):
            half = kernels[0].shape[0] // 2
            ph, pw = shape[0] + 2 * half, shape[1] + 2 * half
            kffts = []
            for k in kernels:
                kpad = np.zeros((ph, pw))
                kpad[:k.shape[0], :k.shape[1]] = k
                kpad = np.roll(kpad, (-half, -half), axis=(0, 1))
                kffts.append(np.fft.rfft2(kpad))
            plan.append((half, kffts))
        _FFT_PLANS[key] = plan
    return plan


def _filter_stats(gray: np.ndarray, cfg: DescriptorConfig
                  ) -> tuple[np.ndarray, np.ndarray]:
    stats = []
    energy = []
    h, w = gray.shape
    for half, kffts in _fft_plan(gray.shape, cfg):
        padded = np.pad(gray, half, mode="symmetric")
        gfft = np.fft.rfft2(padded)
        abs_means = []
        variances = []
        for kfft in kffts:
            resp = np.fft.irfft2(gfft * kfft, s=padded.shape)[half:half + h,
                                                              half:half + w]
            stats.extend((resp.mean(), resp.var()))
            abs_means.append(np.abs(resp).mean())
            variances.append(resp.var())
        energy.extend((float(np.mean(abs_means)), float(np.mean(variances))))
    return np.array(stats), np.array(energy)


# ---------------------------------------------------------------------------
# Gradients and local binary patterns
# ---------------------------------------------------------------------------

def _grad_hist(gray: np.ndarray, cfg: DescriptorConfig) -> np.ndarray:
    gx = sobel(gray, axis=1, mode="reflect") / 4.0
    gy = sobel(gray, axis=0, mode="reflect") / 4.0
    mag = np.hypot(gx, gy).ravel()
    nonzero = mag[mag > 0.0]
    hist = np.zeros(cfg.grad_bins)
    if nonzero.size:
        idx = np.minimum(
            (nonzero / cfg.grad_range * cfg.grad_bins).astype(int),
            cfg.grad_bins - 1,
        )
        hist = np.bincount(idx, minlength=cfg.grad_bins).astype(float)
    return hist / mag.size


@lru_cache(maxsize=1)
def _uniform_lbp_table() -> np.ndarray:
    """Map 8-bit LBP codes to 59 bins: 58 uniform patterns + 1 catch-all."""
    table = np.full(256, 58, dtype=int)
    next_bin = 0
    for code in range(256):
        bits = [(code >> i) & 1 for i in range(8)]
        transitions = sum(bits[i] != bits[(i + 1) % 8] for i in range(8))
        if transitions <= 2:
            table[code] = next_bin
            next_bin += 1
    assert next_bin == 58
    return table


# neighbor offsets clockwise from top-left; bit i has weight 2**i
_LBP_OFFSETS = ((-1, -1), (-1, 0), (-1, 1), (0, 1),
                (1, 1), (1, 0), (1, -1), (0, -1))


def _lbp_hist(gray: np.ndarray) -> np.ndarray:
    center = gray[1:-1, 1:-1]
    codes = np.zeros(center.shape, dtype=int)
    for bit, (dy, dx) in enumerate(_LBP_OFFSETS):
        nb = gray[1 + dy:gray.shape[0] - 1 + dy, 1 + dx:gray.shape[1] - 1 + dx]
        codes |= (nb >= center).astype(int) << bit
    bins = _uniform_lbp_table()[codes.ravel()]
    hist = np.bincount(bins, minlength=59).astype(float)
    return hist / codes.size


# ---------------------------------------------------------------------------
# Full descriptor
# ---------------------------------------------------------------------------

def _l2(block: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(block)
    return block / norm if norm > 0 else block


def extract_features(patch: Patch, recipe: DescriptorConfig | None = None
                     ) -> FeatureVector:
    """Compute the descriptor for one patch.

    Pure function: identical patch and recipe give a bit-identical vector.
    """
    recipe = recipe or DescriptorConfig()
    pix = patch.pixels
    if pix.shape[0] < recipe.min_side or pix.shape[1] < recipe.min_side:
        raise InputError(
            f"patch '{patch.id}' side {pix.shape[0]} below minimum {recipe.min_side}"
        )
    gray = _luma(pix)
    orient_stats, scale_energy = _filter_stats(gray, recipe)
    blocks = [
        _color_hist(pix),
        orient_stats,
        scale_energy,
        _grad_hist(gray, recipe),
        _lbp_hist(gray),
    ]
    values = np.concatenate([_l2(b) for b in blocks])
    return FeatureVector(patch_id=patch.id, values=values,
                         descriptor_id=recipe.descriptor_id)


def extract_set(patches: list[Patch], recipe: DescriptorConfig | None = None
                ) -> FeatureSet:
    """Extract features for a list of patches, ordered by patch id."""
    recipe = recipe or DescriptorConfig()
    ordered = sorted(patches, key=lambda p: p.id)
    vecs = [extract_features(p, recipe) for p in ordered]
    return FeatureSet(
        ids=[v.patch_id for v in vecs],
        values=np.stack([v.values for v in vecs]) if vecs else np.zeros((0, FEATURE_DIM)),
        descriptor_id=recipe.descriptor_id,
    )


# ---------------------------------------------------------------------------
# Feature files
# ---------------------------------------------------------------------------

def write_features(path: str | Path, fs: FeatureSet) -> None:
    """Binary feature file: magic, u32 count, u32 D, then per record a
    u16 id length, the UTF-8 id, and D little-endian f32 values."""
    values = np.ascontiguousarray(fs.values, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", len(fs.ids), values.shape[1]))
        for pid, row in zip(fs.ids, values):
            ident = pid.encode("utf-8")
            fh.write(struct.pack("<H", len(ident)))
            fh.write(ident)
            fh.write(row.tobytes())


def read_features(path: str | Path) -> FeatureSet:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != MAGIC:
            raise InputError(f"{path}: bad magic {magic!r}")
        count, dim = struct.unpack("<II", fh.read(8))
        ids = []
        rows = np.empty((count, dim), dtype="<f4")
        for i in range(count):
            (idlen,) = struct.unpack("<H", fh.read(2))
            ids.append(fh.read(idlen).decode("utf-8"))
            rows[i] = np.frombuffer(fh.read(4 * dim), dtype="<f4")
    return FeatureSet(ids=ids, values=rows.astype(float), descriptor_id="")


def write_features_csv(path: str | Path, fs: FeatureSet) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        cols = ",".join(f"v{i}" for i in range(fs.values.shape[1]))
        fh.write(f"id,{cols}\n")
        for pid, row in zip(fs.ids, fs.values):
            fh.write(pid + "," + ",".join(repr(float(v)) for v in row) + "\n")
