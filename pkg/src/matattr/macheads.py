"""Auxiliary attribute heads on a small multi-level patch encoder.

A three-level convolutional extractor (each level: 3x3 conv bank, ReLU,
2x average pooling, globally average-pooled per level) feeds one clamped
affine attribute head per level plus a clamped affine combiner that mixes
the per-level predictions into the final attribute output.  Training
jointly minimizes category cross-entropy, a per-level L1 mean-matching
loss against the category-attribute matrix (weak learners: each level
predicts what it can, errors stay sparse), and the Beta-distribution
constraint on the final attribute layer only.  The learning rate drops by
10x whenever validation error increases and training stops below 1e-8.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attrspace import KdeConfig, beta_kl, beta_kl_grad
from .errors import InputError, NumericsError, ShapeError


def clamp(z: np.ndarray) -> np.ndarray:
    return np.clip(z, 0.0, 1.0)


def _clamp_active(z: np.ndarray) -> np.ndarray:
    return ((z >= 0.0) & (z <= 1.0)).astype(float)


# ---------------------------------------------------------------------------
# Convolution plumbing (im2col)
# ---------------------------------------------------------------------------

def _im2col(x: np.ndarray) -> np.ndarray:
    """(B, C, H, W) -> (B, H*W, C*9) patches of the 1-padded input."""
    b, c, h, w = x.shape
    padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    windows = np.lib.stride_tricks.sliding_window_view(padded, (3, 3), axis=(2, 3))
    # windows: (B, C, H, W, 3, 3)
    return windows.transpose(0, 2, 3, 1, 4, 5).reshape(b, h * w, c * 9)


def _col2im(dcols: np.ndarray, shape: tuple[int, int, int, int]) -> np.ndarray:
    """Adjoint of _im2col: scatter-add (B, H*W, C*9) back to (B, C, H, W)."""
    b, c, h, w = shape
    dpad = np.zeros((b, c, h + 2, w + 2))
    dwin = dcols.reshape(b, h, w, c, 3, 3).transpose(0, 3, 1, 2, 4, 5)
    for dy in range(3):
        for dx in range(3):
            dpad[:, :, dy:dy + h, dx:dx + w] += dwin[:, :, :, :, dy, dx]
    return dpad[:, :, 1:-1, 1:-1]


def _conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    bsz, c, h, ww = x.shape
    cols = _im2col(x)
    wmat = w.reshape(w.shape[0], -1)
    out = cols @ wmat.T + b
    return out.reshape(bsz, h, ww, w.shape[0]).transpose(0, 3, 1, 2), cols


def _conv_backward(dout: np.ndarray, cols: np.ndarray, w: np.ndarray,
                   x_shape: tuple[int, int, int, int]):
    bsz, cout, h, ww = dout.shape
    dflat = dout.transpose(0, 2, 3, 1).reshape(bsz, h * ww, cout)
    wmat = w.reshape(cout, -1)
    dw = np.einsum("bpo,bpi->oi", dflat, cols).reshape(w.shape)
    db = dflat.sum(axis=(0, 1))
    dcols = dflat @ wmat
    return _col2im(dcols, x_shape), dw, db


def _pool2(x: np.ndarray) -> np.ndarray:
    b, c, h, w = x.shape
    return x.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def _pool2_backward(dout: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(dout, 2, axis=2), 2, axis=3) / 4.0


# ---------------------------------------------------------------------------
# Extractor and heads
# ---------------------------------------------------------------------------

@dataclass
class MacConfig:
    channels: tuple[int, ...] = (8, 16, 32)
    patch_side: int = 48
    batch_size: int = 32
    learning_rate: float = 0.01
    momentum: float = 0.9
    lr_decay: float = 0.1
    lr_floor: float = 1e-8
    lr_patience: int = 3  # consecutive worse-than-best epochs before decay
    epochs: int = 60
    seed: int = 0
    val_fraction: float = 0.15
    clip_norm: float = 5.0
    u_weight: float = 1.0
    d_weight: float = 1e-3
    attribute_heads: bool = True  # False trains the category path alone

    @property
    def levels(self) -> int:
        return len(self.channels)

    def __post_init__(self) -> None:
        if self.patch_side % (2 ** self.levels) != 0:
            raise InputError(
                f"patch side {self.patch_side} not divisible by "
                f"{2 ** self.levels} for {self.levels} pooling levels"
            )


class ToyExtractor:
    """Multi-level convolutional encoder with a category softmax head."""

    def __init__(self, num_categories: int, cfg: MacConfig):
        rng = np.random.default_rng(cfg.seed)
        self.cfg = cfg
        self.num_categories = num_categories
        self.conv_w = []
        self.conv_b = []
        c_in = 3
        for c_out in cfg.channels:
            scale = math.sqrt(2.0 / (c_in * 9))
            self.conv_w.append(rng.normal(0.0, scale, (c_out, c_in, 3, 3)))
            self.conv_b.append(np.zeros(c_out))
            c_in = c_out
        self.cat_w = rng.normal(0.0, 1.0 / math.sqrt(c_in), (num_categories, c_in))
        self.cat_b = np.zeros(num_categories)

    @property
    def level_dims(self) -> list[int]:
        return list(self.cfg.channels)

    def parameters(self) -> dict[str, np.ndarray]:
        params = {"cat_w": self.cat_w, "cat_b": self.cat_b}
        for i, (w, b) in enumerate(zip(self.conv_w, self.conv_b)):
            params[f"conv_w{i}"] = w
            params[f"conv_b{i}"] = b
        return params

    def forward(self, x: np.ndarray):
        """x: (B, side, side, 3) in [0, 1].  Returns (pyramid, logits, cache)."""
        if x.ndim != 4 or x.shape[3] != 3:
            raise ShapeError(f"expected (B, side, side, 3) input, got {x.shape}")
        act = x.transpose(0, 3, 1, 2)
        pyramid = []
        cache = []
        for w, b in zip(self.conv_w, self.conv_b):
            z, cols = _conv_forward(act, w, b)
            relu = np.maximum(z, 0.0)
            pooled = _pool2(relu)
            gap = pooled.mean(axis=(2, 3))
            cache.append((act.shape, cols, z, pooled.shape))
            pyramid.append(gap)
            act = pooled
        logits = pyramid[-1] @ self.cat_w.T + self.cat_b
        return pyramid, logits, (cache, act, pyramid)

    def backward(self, fwd_cache, dpyramid: list[np.ndarray],
                 dlogits: np.ndarray) -> dict[str, np.ndarray]:
        cache, _, pyramid = fwd_cache
        grads = {
            "cat_w": dlogits.T @ pyramid[-1],
            "cat_b": dlogits.sum(axis=0),
        }
        dpyr = [g.copy() for g in dpyramid]
        dpyr[-1] += dlogits @ self.cat_w
        dact = None
        for i in reversed(range(len(self.conv_w))):
            x_shape, cols, z, pooled_shape = cache[i]
            _, c, ph, pw = pooled_shape
            dpool = dpyr[i][:, :, None, None] / (ph * pw) * np.ones(pooled_shape)
            if dact is not None:
                dpool = dpool + dact
            drelu = _pool2_backward(dpool)
            dz = drelu * (z > 0)
            dact, dw, db = _conv_backward(dz, cols, self.conv_w[i], x_shape)
            grads[f"conv_w{i}"] = dw
            grads[f"conv_b{i}"] = db
        return grads

    def category_probs(self, x: np.ndarray) -> np.ndarray:
        _, logits, _ = self.forward(x)
        return _softmax(logits)


class HeadStack:
    """Per-level clamped affine attribute heads plus a clamped combiner."""

    def __init__(self, level_dims: list[int], num_attributes: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.num_attributes = num_attributes
        self.level_w = [np.zeros((d, num_attributes)) for d in level_dims]
        self.level_b = [np.full(num_attributes, 0.5) for _ in level_dims]
        n_mix = len(level_dims) * num_attributes
        self.comb_w = rng.normal(0.0, 0.2 / math.sqrt(n_mix), (n_mix, num_attributes))
        self.comb_b = np.full(num_attributes, 0.5)

    def parameters(self) -> dict[str, np.ndarray]:
        params = {"comb_w": self.comb_w, "comb_b": self.comb_b}
        for i, (w, b) in enumerate(zip(self.level_w, self.level_b)):
            params[f"head_w{i}"] = w
            params[f"head_b{i}"] = b
        return params

    def forward(self, pyramid: list[np.ndarray]):
        if len(pyramid) != len(self.level_w):
            raise ShapeError("pyramid level count does not match head stack")
        zs = []
        outs = []
        for h, w, b in zip(pyramid, self.level_w, self.level_b):
            if h.shape[1] != w.shape[0]:
                raise ShapeError(
                    f"level dim {h.shape[1]} does not match head dim {w.shape[0]}"
                )
            z = h @ w + b
            zs.append(z)
            outs.append(clamp(z))
        mix = np.concatenate(outs, axis=1)
        zf = mix @ self.comb_w + self.comb_b
        final = clamp(zf)
        return outs, final, (pyramid, zs, outs, mix, zf)

    def backward(self, cache, dlevel: list[np.ndarray], dfinal: np.ndarray):
        pyramid, zs, outs, mix, zf = cache
        m = self.num_attributes
        dzf = dfinal * _clamp_active(zf)
        grads = {"comb_w": mix.T @ dzf, "comb_b": dzf.sum(axis=0)}
        dmix = dzf @ self.comb_w.T
        dpyramid = []
        for i, (h, w, z) in enumerate(zip(pyramid, self.level_w, zs)):
            dout = dlevel[i] + dmix[:, i * m:(i + 1) * m]
            dz = dout * _clamp_active(z)
            grads[f"head_w{i}"] = h.T @ dz
            grads[f"head_b{i}"] = dz.sum(axis=0)
            dpyramid.append(dz @ w.T)
        return grads, dpyramid


def head_forward(stack: HeadStack, pyramid: list[np.ndarray]
                 ) -> tuple[list[np.ndarray], np.ndarray]:
    """Per-level attribute predictions and the combined final prediction."""
    outs, final, _ = stack.forward(pyramid)
    return outs, final


# ---------------------------------------------------------------------------
# Loss terms
# ---------------------------------------------------------------------------

def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, cats: np.ndarray
                          ) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and gradient w.r.t. logits."""
    probs = _softmax(logits)
    n = logits.shape[0]
    idx = (np.arange(n), cats - 1)
    ce = float(-np.log(np.maximum(probs[idx], 1e-300)).mean())
    dlogits = probs.copy()
    dlogits[idx] -= 1.0
    return ce, dlogits / n


def aux_loss_u(level_out: np.ndarray, cats: np.ndarray, amat: np.ndarray) -> float:
    """Per-level L1 mean-matching loss, averaged over categories."""
    k = amat.shape[0]
    total = 0.0
    for cat in range(1, k + 1):
        sel = cats == cat
        if not sel.any():
            raise InputError(f"no samples for category {cat} in this batch")
        mean = level_out[sel].mean(axis=0)
        total += float(np.abs(amat[cat - 1] - mean).sum())
    return total / k


def aux_loss_u_grad(level_out: np.ndarray, cats: np.ndarray,
                    amat: np.ndarray) -> np.ndarray:
    """Subgradient: sign of the residual; zero exactly at the L1 kink."""
    k = amat.shape[0]
    g = np.zeros_like(level_out)
    for cat in range(1, k + 1):
        sel = cats == cat
        if not sel.any():
            raise InputError(f"no samples for category {cat} in this batch")
        mean = level_out[sel].mean(axis=0)
        g[sel] = -np.sign(amat[cat - 1] - mean) / (k * sel.sum())
    return g


def aux_loss_d(final_out: np.ndarray, kde_cfg: KdeConfig | None = None) -> float:
    """Distribution constraint on the final attribute layer; shared
    definition with the attribute-matrix regularizer."""
    return beta_kl(np.asarray(final_out).ravel(), kde_cfg)


def aux_loss_d_grad(final_out: np.ndarray,
                    kde_cfg: KdeConfig | None = None) -> np.ndarray:
    return beta_kl_grad(final_out, kde_cfg)


# ---------------------------------------------------------------------------
# Joint training
# ---------------------------------------------------------------------------

def mac_batch_loss_and_grads(extractor: ToyExtractor, heads: HeadStack | None,
                             x: np.ndarray, cats: np.ndarray,
                             amat: np.ndarray | None, cfg: MacConfig,
                             kde_cfg: KdeConfig):
    pyramid, logits, ex_cache = extractor.forward(x)
    ce, dlogits = softmax_cross_entropy(logits, cats)
    parts = {"ce": ce}
    if heads is None:
        zeros = [np.zeros_like(p) for p in pyramid]
        ex_grads = extractor.backward(ex_cache, zeros, dlogits)
        parts["total"] = ce
        return parts, ex_grads, {}

    level_outs, final, head_cache = heads.forward(pyramid)
    u_vals = []
    dlevels = []
    for i, out in enumerate(level_outs):
        u_vals.append(aux_loss_u(out, cats, amat))
        dlevels.append(cfg.u_weight * aux_loss_u_grad(out, cats, amat))
        parts[f"u{i + 1}"] = u_vals[i]
    # the combiner is the last attribute layer: it gets the mean-matching
    # term too, and the distribution term applies only to it
    u_final = aux_loss_u(final, cats, amat)
    parts["u_final"] = u_final
    d_val = aux_loss_d(final, kde_cfg)
    parts["d"] = d_val
    parts["total"] = (ce + cfg.u_weight * (sum(u_vals) + u_final)
                      + cfg.d_weight * d_val)
    dfinal = (cfg.u_weight * aux_loss_u_grad(final, cats, amat)
              + cfg.d_weight * aux_loss_d_grad(final, kde_cfg))
    head_grads, dpyramid = heads.backward(head_cache, dlevels, dfinal)
    ex_grads = extractor.backward(ex_cache, dpyramid, dlogits)
    return parts, ex_grads, head_grads


def _stratified_batches(cats: np.ndarray, batch_size: int,
                        rng: np.random.Generator) -> list[np.ndarray]:
    k = cats.max()
    per_cat = [np.flatnonzero(cats == c) for c in range(1, k + 1)]
    n_batches = max(1, min(len(cats) // max(batch_size, 1),
                           min(len(p) for p in per_cat)))
    parts: list[list[np.ndarray]] = [[] for _ in range(n_batches)]
    for idx in per_cat:
        shuffled = rng.permutation(idx)
        for b, chunk in enumerate(np.array_split(shuffled, n_batches)):
            parts[b].append(chunk)
    return [rng.permutation(np.concatenate(p)) for p in parts]


def train_mac(pixels: np.ndarray, cats: np.ndarray, amat: np.ndarray | None,
              cfg: MacConfig | None = None, kde_cfg: KdeConfig | None = None
              ) -> tuple[ToyExtractor, HeadStack | None, list[dict[str, float]]]:
    """Jointly train the extractor, category head, and attribute heads.

    pixels: (N, side, side, 3) in [0, 1].  With cfg.attribute_heads False
    (the ablation) only the category path is trained and amat may be None.
    """
    cfg = cfg or MacConfig()
    kde_cfg = kde_cfg or KdeConfig()
    pixels = np.asarray(pixels, dtype=float)
    cats = np.asarray(cats, dtype=int)
    if pixels.shape[0] != cats.shape[0]:
        raise ShapeError("pixels and categories disagree")
    k = int(cats.max())
    if not np.array_equal(np.unique(cats), np.arange(1, k + 1)):
        raise InputError(f"dataset must cover categories 1..{k}")
    if cfg.attribute_heads:
        amat = np.asarray(amat, dtype=float)
        if amat.shape[0] != k:
            raise ShapeError(f"attribute matrix has {amat.shape[0]} rows, need {k}")

    rng = np.random.default_rng(cfg.seed)
    extractor = ToyExtractor(k, cfg)
    heads = (HeadStack(extractor.level_dims, amat.shape[1], seed=cfg.seed)
             if cfg.attribute_heads else None)
    trace: list[dict[str, float]] = []
    if cfg.epochs == 0:
        return extractor, heads, trace

    if cfg.val_fraction > 0:
        tr_idx, val_idx = [], []
        for c in np.unique(cats):
            idx = rng.permutation(np.flatnonzero(cats == c))
            n_val = min(max(1, int(round(cfg.val_fraction * idx.size))), idx.size - 1)
            val_idx.append(idx[:n_val])
            tr_idx.append(idx[n_val:])
        tr_idx = np.concatenate(tr_idx)
        val_idx = np.concatenate(val_idx)
    else:
        tr_idx, val_idx = np.arange(len(cats)), np.array([], dtype=int)

    params = dict(extractor.parameters())
    if heads is not None:
        params.update(heads.parameters())
    velocity = {name: np.zeros_like(p) for name, p in params.items()}

    lr = cfg.learning_rate
    best_val_err = math.inf
    worse_streak = 0
    for epoch in range(cfg.epochs):
        if lr < cfg.lr_floor:
            break
        sums: dict[str, float] = {}
        batches = _stratified_batches(cats[tr_idx], cfg.batch_size, rng)
        for batch in batches:
            sel = tr_idx[batch]
            parts, ex_grads, head_grads = mac_batch_loss_and_grads(
                extractor, heads, pixels[sel], cats[sel], amat, cfg, kde_cfg
            )
            if not math.isfinite(parts["total"]):
                raise NumericsError(f"loss diverged at epoch {epoch}")
            grads = dict(ex_grads)
            grads.update(head_grads)
            if cfg.clip_norm > 0:
                gnorm = math.sqrt(sum(float((g ** 2).sum()) for g in grads.values()))
                if gnorm > cfg.clip_norm:
                    scale = cfg.clip_norm / gnorm
                    grads = {n: g * scale for n, g in grads.items()}
            for name, g in grads.items():
                velocity[name] *= cfg.momentum
                velocity[name] -= lr * g
                params[name] += velocity[name]
            for key, val in parts.items():
                sums[key] = sums.get(key, 0.0) + val
        entry = {key: val / len(batches) for key, val in sums.items()}
        entry["lr"] = lr
        if val_idx.size:
            probs = extractor.category_probs(pixels[val_idx])
            val_err = float((probs.argmax(axis=1) + 1 != cats[val_idx]).mean())
            entry["val_error"] = val_err
            # the 10x drop fires only on a sustained increase; at desk
            # scale a single-epoch blip is validation noise.  The baseline
            # resets after a decay so a plateau sitting just above an old
            # best cannot drain the rate to the floor.
            if val_err > best_val_err:
                worse_streak += 1
                if worse_streak >= cfg.lr_patience:
                    lr *= cfg.lr_decay
                    best_val_err = val_err
                    worse_streak = 0
            else:
                best_val_err = val_err
                worse_streak = 0
        trace.append(entry)
    return extractor, heads, trace


def mac_attributes(extractor: ToyExtractor, heads: HeadStack,
                   pixels: np.ndarray) -> np.ndarray:
    """Final combined attribute predictions for a batch of patches."""
    pyramid, _, _ = extractor.forward(np.asarray(pixels, dtype=float))
    _, final, _ = heads.forward(pyramid)
    return final


def mac_category_probs(extractor: ToyExtractor, pixels: np.ndarray) -> np.ndarray:
    return extractor.category_probs(np.asarray(pixels, dtype=float))


# ---------------------------------------------------------------------------
# Bundle file
# ---------------------------------------------------------------------------

def save_bundle(path: str | Path, extractor: ToyExtractor,
                heads: HeadStack | None, config: dict | None = None) -> None:
    payload = {
        "num_categories": extractor.num_categories,
        "channels": list(extractor.cfg.channels),
        "patch_side": extractor.cfg.patch_side,
        "conv_w": [w.tolist() for w in extractor.conv_w],
        "conv_b": [b.tolist() for b in extractor.conv_b],
        "cat_w": extractor.cat_w.tolist(),
        "cat_b": extractor.cat_b.tolist(),
        "config": config or {},
    }
    if heads is not None:
        payload["heads"] = {
            "level_w": [w.tolist() for w in heads.level_w],
            "level_b": [b.tolist() for b in heads.level_b],
            "comb_w": heads.comb_w.tolist(),
            "comb_b": heads.comb_b.tolist(),
        }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)
        fh.write("\n")


def load_bundle(path: str | Path) -> tuple[ToyExtractor, HeadStack | None]:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    try:
        cfg = MacConfig(channels=tuple(payload["channels"]),
                        patch_side=payload["patch_side"])
        extractor = ToyExtractor(payload["num_categories"], cfg)
        extractor.conv_w = [np.array(w, dtype=float) for w in payload["conv_w"]]
        extractor.conv_b = [np.array(b, dtype=float) for b in payload["conv_b"]]
        extractor.cat_w = np.array(payload["cat_w"], dtype=float)
        extractor.cat_b = np.array(payload["cat_b"], dtype=float)
        heads = None
        if "heads" in payload:
            hp = payload["heads"]
            m = len(hp["comb_b"])
            heads = HeadStack(extractor.level_dims, m)
            heads.level_w = [np.array(w, dtype=float) for w in hp["level_w"]]
            heads.level_b = [np.array(b, dtype=float) for b in hp["level_b"]]
            heads.comb_w = np.array(hp["comb_w"], dtype=float)
            heads.comb_b = np.array(hp["comb_b"], dtype=float)
        return extractor, heads
    except KeyError as exc:
        raise InputError(f"{path}: missing bundle field {exc}") from exc
