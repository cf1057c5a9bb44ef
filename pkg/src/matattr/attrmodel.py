"""Two-layer clamped attribute predictor.

f(x) = h(W2 h(W1 x + b1) + b2) with h(z) = min(max(z, 0), 1), trained by
mini-batch SGD against the discovered category-attribute matrix with
three terms: a per-category mean-matching loss, a Beta-distribution
constraint on prediction values, and a weighted cross-category
separation term that is subtracted from the objective.  Training masks
a random fraction of the weights per batch; the reported model is the
unmasked one.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attrspace import KdeConfig, beta_kl, beta_kl_grad
from .errors import InputError, NumericsError, ShapeError


@dataclass
class TwoLayerModel:
    w1: np.ndarray  # (H, D)
    b1: np.ndarray  # (H,)
    w2: np.ndarray  # (M, H)
    b2: np.ndarray  # (M,)

    def __post_init__(self) -> None:
        h, d = self.w1.shape
        m, h2 = self.w2.shape
        if h2 != h or self.b1.shape != (h,) or self.b2.shape != (m,):
            raise ShapeError("inconsistent model parameter shapes")
        for p in (self.w1, self.b1, self.w2, self.b2):
            if not np.isfinite(p).all():
                raise NumericsError("non-finite model parameters")

    @property
    def input_dim(self) -> int:
        return self.w1.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def output_dim(self) -> int:
        return self.w2.shape[0]


@dataclass
class TrainConfig:
    hidden: int = 64
    w1: float = 1e-3
    w2: float = 1e-5
    mask_fraction: float = 0.5
    batch_size: int = 256
    learning_rate: float = 0.03
    lr_decay: float = 0.5
    epochs: int = 100
    seed: int = 0
    separation: str = "signed"  # or "squared", the literal printed form
    val_fraction: float = 0.15
    clip_norm: float = 1.0  # global gradient-norm clip; 0 disables

    def __post_init__(self) -> None:
        if not 0.0 <= self.mask_fraction < 1.0:
            raise InputError("mask_fraction must lie in [0, 1)")
        if self.w1 < 0 or self.w2 < 0:
            raise InputError("loss weights must be non-negative")
        if self.separation not in ("signed", "squared"):
            raise InputError(f"unknown separation variant '{self.separation}'")


def clamp(z: np.ndarray) -> np.ndarray:
    return np.clip(z, 0.0, 1.0)


def _clamp_active(z: np.ndarray) -> np.ndarray:
    # subgradient 1 inside [0, 1] (one-sided inside value at the boundary)
    return ((z >= 0.0) & (z <= 1.0)).astype(float)


def init_model(input_dim: int, hidden: int, output_dim: int, seed: int = 0,
               input_scale: float = 1.0) -> TwoLayerModel:
    """Biases start at 0.5 and the output weights at zero, so every unit
    begins alive at the middle of the clamp's linear region; random first
    -layer weights break hidden-unit symmetry.

    input_scale should be the RMS norm of the training feature vectors.
    """
    rng = np.random.default_rng(seed)
    return TwoLayerModel(
        w1=rng.normal(0.0, 0.3 / max(input_scale, 1e-12), (hidden, input_dim)),
        b1=np.full(hidden, 0.5),
        w2=np.zeros((output_dim, hidden)),
        b2=np.full(output_dim, 0.5),
    )


def forward(model: TwoLayerModel, x: np.ndarray,
            masks: dict[str, np.ndarray] | None = None) -> np.ndarray:
    """Predict attribute probabilities; accepts one vector or a batch."""
    single = x.ndim == 1
    out, _ = _forward_cache(model, np.atleast_2d(x), masks)
    return out[0] if single else out


def _effective(model: TwoLayerModel, masks: dict[str, np.ndarray] | None
               ) -> tuple[np.ndarray, np.ndarray]:
    if not masks:
        return model.w1, model.w2
    return model.w1 * masks["w1"], model.w2 * masks["w2"]


def _forward_cache(model: TwoLayerModel, x: np.ndarray,
                   masks: dict[str, np.ndarray] | None = None):
    if x.shape[1] != model.input_dim:
        raise ShapeError(f"input dim {x.shape[1]} vs model {model.input_dim}")
    w1, w2 = _effective(model, masks)
    z1 = x @ w1.T + model.b1
    h1 = clamp(z1)
    z2 = h1 @ w2.T + model.b2
    out = clamp(z2)
    return out, (x, z1, h1, z2)


def _backward(model: TwoLayerModel, cache, dout: np.ndarray,
              masks: dict[str, np.ndarray] | None = None) -> dict[str, np.ndarray]:
    x, z1, h1, z2 = cache
    _, w2 = _effective(model, masks)
    dz2 = dout * _clamp_active(z2)
    grads = {
        "w2": dz2.T @ h1,
        "b2": dz2.sum(axis=0),
    }
    dh1 = dz2 @ w2
    dz1 = dh1 * _clamp_active(z1)
    grads["w1"] = dz1.T @ x
    grads["b1"] = dz1.sum(axis=0)
    if masks:
        grads["w1"] *= masks["w1"]
        grads["w2"] *= masks["w2"]
    return grads


# ---------------------------------------------------------------------------
# Loss terms over a batch of predictions
# ---------------------------------------------------------------------------

def _category_index(cats: np.ndarray, k: int) -> list[np.ndarray]:
    idx = []
    for cat in range(1, k + 1):
        sel = np.flatnonzero(cats == cat)
        if sel.size == 0:
            raise InputError(f"no predictions for category {cat} in this batch")
        idx.append(sel)
    return idx


def loss_unary(preds: np.ndarray, cats: np.ndarray, amat: np.ndarray) -> float:
    """Sum over categories of squared distance between the category's mean
    prediction and its attribute row."""
    k = amat.shape[0]
    total = 0.0
    for cat, sel in enumerate(_category_index(cats, k)):
        mean = preds[sel].mean(axis=0)
        total += float(((amat[cat] - mean) ** 2).sum())
    return total


def loss_unary_grad(preds: np.ndarray, cats: np.ndarray,
                    amat: np.ndarray) -> np.ndarray:
    k = amat.shape[0]
    g = np.zeros_like(preds)
    for cat, sel in enumerate(_category_index(cats, k)):
        mean = preds[sel].mean(axis=0)
        g[sel] = 2.0 * (mean - amat[cat]) / sel.size
    return g


def loss_distribution(preds: np.ndarray, kde_cfg: KdeConfig | None = None) -> float:
    """Beta-distribution constraint: shared definition with the attribute
    matrix regularizer, applied to the flattened prediction values."""
    return beta_kl(np.asarray(preds).ravel(), kde_cfg)


def loss_distribution_grad(preds: np.ndarray,
                           kde_cfg: KdeConfig | None = None) -> np.ndarray:
    return beta_kl_grad(preds, kde_cfg)


def _separation_weights(amat: np.ndarray, variant: str) -> np.ndarray:
    w = 2.0 * np.abs(amat[:, None, :] - amat[None, :, :]) - 1.0  # (K, K, M)
    return w ** 2 if variant == "squared" else w


def loss_separation(preds: np.ndarray, cats: np.ndarray, amat: np.ndarray,
                    variant: str = "signed") -> float:
    """Weighted separation over ordered cross-category pairs.

    Per attribute the weight is 2|a_ci - a_cj| - 1: positive where the
    matrix says the categories differ (separation helps), negative where
    they agree (separation is penalized).  The printed squared form is
    available as variant="squared".  Batches without cross-category pairs
    contribute zero.
    """
    k = amat.shape[0]
    w = _separation_weights(amat, variant)
    sums, sqsums, counts = _group_moments(preds, cats, k)
    total = 0.0
    for a in range(k):
        if counts[a] == 0:
            continue
        for b in range(k):
            if b == a or counts[b] == 0:
                continue
            per_m = (counts[b] * sqsums[a] + counts[a] * sqsums[b]
                     - 2.0 * sums[a] * sums[b])
            total += float((w[a, b] * per_m).sum())
    return total


def _group_moments(preds: np.ndarray, cats: np.ndarray, k: int):
    m = preds.shape[1]
    sums = np.zeros((k, m))
    sqsums = np.zeros((k, m))
    counts = np.zeros(k, dtype=int)
    for cat in range(1, k + 1):
        sel = cats == cat
        counts[cat - 1] = sel.sum()
        if counts[cat - 1]:
            sums[cat - 1] = preds[sel].sum(axis=0)
            sqsums[cat - 1] = (preds[sel] ** 2).sum(axis=0)
    return sums, sqsums, counts


def loss_separation_grad(preds: np.ndarray, cats: np.ndarray, amat: np.ndarray,
                         variant: str = "signed") -> np.ndarray:
    k = amat.shape[0]
    w = _separation_weights(amat, variant)
    sums, _, counts = _group_moments(preds, cats, k)
    g = np.zeros_like(preds)
    for cat in range(1, k + 1):
        sel = cats == cat
        if not sel.any():
            continue
        other = [b for b in range(k) if b != cat - 1 and counts[b] > 0]
        if not other:
            continue
        # ordered pairs double every unordered term, hence the factor 4
        coef_self = 4.0 * (w[cat - 1, other] * counts[other, None]).sum(axis=0)
        coef_cross = 4.0 * (w[cat - 1, other] * sums[other]).sum(axis=0)
        g[sel] = coef_self * preds[sel] - coef_cross
    return g


# ---------------------------------------------------------------------------
# Combined objective through the model
# ---------------------------------------------------------------------------

def batch_loss_and_grads(model: TwoLayerModel, x: np.ndarray, cats: np.ndarray,
                         amat: np.ndarray, cfg: TrainConfig,
                         kde_cfg: KdeConfig,
                         masks: dict[str, np.ndarray] | None = None):
    """Total objective r + w1*kappa - w2*pi and its parameter gradients."""
    preds, cache = _forward_cache(model, x, masks)
    r = loss_unary(preds, cats, amat)
    kl = loss_distribution(preds, kde_cfg)
    sep = loss_separation(preds, cats, amat, cfg.separation)
    total = r + cfg.w1 * kl - cfg.w2 * sep
    dpred = (loss_unary_grad(preds, cats, amat)
             + cfg.w1 * loss_distribution_grad(preds, kde_cfg)
             - cfg.w2 * loss_separation_grad(preds, cats, amat, cfg.separation))
    grads = _backward(model, cache, dpred, masks)
    parts = {"total": total, "unary": r, "distribution": kl, "separation": sep}
    return parts, grads


def single_loss_and_grads(model: TwoLayerModel, x: np.ndarray, cats: np.ndarray,
                          amat: np.ndarray, which: str,
                          kde_cfg: KdeConfig | None = None,
                          variant: str = "signed"):
    """One loss term and its parameter gradients (for gradient checks)."""
    preds, cache = _forward_cache(model, x)
    if which == "unary":
        value = loss_unary(preds, cats, amat)
        dpred = loss_unary_grad(preds, cats, amat)
    elif which == "distribution":
        value = loss_distribution(preds, kde_cfg)
        dpred = loss_distribution_grad(preds, kde_cfg)
    elif which == "separation":
        value = loss_separation(preds, cats, amat, variant)
        dpred = loss_separation_grad(preds, cats, amat, variant)
    else:
        raise InputError(f"unknown loss '{which}'")
    return value, _backward(model, cache, dpred)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def _stratified_batches(cats: np.ndarray, batch_size: int,
                        rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled batches that each contain every category."""
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


def _split_validation(cats: np.ndarray, fraction: float,
                      rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    train_idx, val_idx = [], []
    for c in np.unique(cats):
        idx = rng.permutation(np.flatnonzero(cats == c))
        n_val = max(1, int(round(fraction * idx.size))) if fraction > 0 else 0
        n_val = min(n_val, idx.size - 1)
        val_idx.append(idx[:n_val])
        train_idx.append(idx[n_val:])
    return np.concatenate(train_idx), np.concatenate(val_idx)


def train(x: np.ndarray, cats: np.ndarray, amat: np.ndarray,
          cfg: TrainConfig | None = None, kde_cfg: KdeConfig | None = None
          ) -> tuple[TwoLayerModel, list[dict[str, float]]]:
    """Train the predictor; returns the unmasked model and per-epoch trace.

    Bit-reproducible for a fixed seed.  Raises NumericsError with the
    epoch index if the loss diverges.
    """
    cfg = cfg or TrainConfig()
    kde_cfg = kde_cfg or KdeConfig()
    x = np.asarray(x, dtype=float)
    cats = np.asarray(cats, dtype=int)
    amat = np.asarray(amat, dtype=float)
    k = amat.shape[0]
    if x.shape[0] != cats.shape[0]:
        raise ShapeError("features and categories disagree")
    present = np.unique(cats)
    if not np.array_equal(present, np.arange(1, k + 1)):
        raise InputError(
            f"dataset must cover categories 1..{k}, found {present.tolist()}"
        )

    rng = np.random.default_rng(cfg.seed)
    input_scale = float(np.sqrt((x ** 2).sum(axis=1).mean())) or 1.0
    model = init_model(x.shape[1], cfg.hidden, amat.shape[1], seed=cfg.seed,
                       input_scale=input_scale)
    trace: list[dict[str, float]] = []
    if cfg.epochs == 0:
        return model, trace

    if cfg.val_fraction > 0:
        tr_idx, val_idx = _split_validation(cats, cfg.val_fraction, rng)
    else:
        tr_idx, val_idx = np.arange(len(cats)), np.array([], dtype=int)

    lr = cfg.learning_rate
    prev_val = math.inf
    for epoch in range(cfg.epochs):
        sums = {"total": 0.0, "unary": 0.0, "distribution": 0.0, "separation": 0.0}
        batches = _stratified_batches(cats[tr_idx], cfg.batch_size, rng)
        for batch in batches:
            sel = tr_idx[batch]
            masks = None
            if cfg.mask_fraction > 0:
                masks = {
                    "w1": (rng.random(model.w1.shape) >= cfg.mask_fraction).astype(float),
                    "w2": (rng.random(model.w2.shape) >= cfg.mask_fraction).astype(float),
                }
            parts, grads = batch_loss_and_grads(
                model, x[sel], cats[sel], amat, cfg, kde_cfg, masks
            )
            if not math.isfinite(parts["total"]):
                raise NumericsError(f"loss diverged at epoch {epoch}")
            if cfg.clip_norm > 0:
                gnorm = math.sqrt(sum(float((g ** 2).sum())
                                      for g in grads.values()))
                if gnorm > cfg.clip_norm:
                    scale = cfg.clip_norm / gnorm
                    grads = {k_: g * scale for k_, g in grads.items()}
            model.w1 -= lr * grads["w1"]
            model.b1 -= lr * grads["b1"]
            model.w2 -= lr * grads["w2"]
            model.b2 -= lr * grads["b2"]
            for key in sums:
                sums[key] += parts[key]
        entry = {key: val / len(batches) for key, val in sums.items()}
        entry["lr"] = lr
        if val_idx.size:
            val_parts, _ = batch_loss_and_grads(
                model, x[val_idx], cats[val_idx], amat, cfg, kde_cfg, None
            )
            entry["val_total"] = val_parts["total"]
            if val_parts["total"] > prev_val:
                lr *= cfg.lr_decay
            prev_val = val_parts["total"]
        trace.append(entry)
    return model, trace


def predict(model: TwoLayerModel, x: np.ndarray) -> np.ndarray:
    return forward(model, np.asarray(x, dtype=float))


# ---------------------------------------------------------------------------
# Model files
# ---------------------------------------------------------------------------

def save_model(path: str | Path, model: TwoLayerModel,
               config: dict | None = None, seed: int | None = None) -> None:
    payload = {
        "D": model.input_dim,
        "H": model.hidden_dim,
        "M": model.output_dim,
        "W1": model.w1.tolist(),
        "b1": model.b1.tolist(),
        "W2": model.w2.tolist(),
        "b2": model.b2.tolist(),
        "config": config or {},
        "seed": seed,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)
        fh.write("\n")


def load_model(path: str | Path) -> TwoLayerModel:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    try:
        return TwoLayerModel(
            w1=np.array(payload["W1"], dtype=float),
            b1=np.array(payload["b1"], dtype=float),
            w2=np.array(payload["W2"], dtype=float),
            b2=np.array(payload["b2"], dtype=float),
        )
    except KeyError as exc:
        raise InputError(f"{path}: missing model field {exc}") from exc
