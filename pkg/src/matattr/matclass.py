"""Material classification from attribute histograms, per-pixel maps,
and one-shot novel-category evaluation.

Regions are summarized by per-attribute histograms of predicted attribute
probabilities; a one-vs-rest SVM with the histogram intersection kernel,
trained by SMO-style pairwise dual updates, classifies the materials.
Per-pixel maps average overlapping sliding-window predictions.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import InputError, ShapeError


@dataclass
class AttributeHistogram:
    region_id: str
    values: np.ndarray  # (M * bins,) concatenated per-attribute histograms
    bins: int
    patch_count: int

    def __post_init__(self) -> None:
        if self.patch_count < 1:
            raise InputError("histogram needs at least one patch")


def region_histogram(predictions: np.ndarray, bins: int = 10,
                     region_id: str = "") -> AttributeHistogram:
    """Per-attribute histogram of predicted probabilities over a region.

    Each attribute's histogram is normalized to sum to one; value 1.0
    falls in the last bin.  Invariant to patch order.
    """
    predictions = np.asarray(predictions, dtype=float)
    if predictions.ndim != 2 or predictions.shape[0] == 0:
        raise InputError("predictions must be a non-empty (patches, M) array")
    if predictions.min() < 0 or predictions.max() > 1:
        raise InputError("predictions must lie in [0, 1]")
    n, m = predictions.shape
    out = np.empty((m, bins))
    for j in range(m):
        counts, _ = np.histogram(predictions[:, j], bins=bins, range=(0.0, 1.0))
        out[j] = counts / n
    return AttributeHistogram(region_id=region_id, values=out.ravel(),
                              bins=bins, patch_count=n)


def hik(h1: np.ndarray, h2: np.ndarray) -> float:
    """Histogram intersection kernel: sum of elementwise minima."""
    h1 = np.asarray(h1, dtype=float)
    h2 = np.asarray(h2, dtype=float)
    if h1.shape != h2.shape:
        raise ShapeError(f"histogram lengths differ: {h1.shape} vs {h2.shape}")
    if h1.min() < 0 or h2.min() < 0:
        raise InputError("histogram entries must be non-negative")
    return float(np.minimum(h1, h2).sum())


def hik_gram(a: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """Pairwise intersection kernel between rows of a and rows of b."""
    a = np.asarray(a, dtype=float)
    b = a if b is None else np.asarray(b, dtype=float)
    if a.min() < 0 or b.min() < 0:
        raise InputError("histogram entries must be non-negative")
    out = np.empty((a.shape[0], b.shape[0]))
    for i in range(a.shape[0]):
        out[i] = np.minimum(a[i], b).sum(axis=1)
    return out


# ---------------------------------------------------------------------------
# Kernel SVM trained by SMO-style pairwise dual coordinate ascent
# ---------------------------------------------------------------------------

def _smo_binary(gram: np.ndarray, y: np.ndarray, c: float, tol: float,
                seed: int, max_passes: int = 10) -> tuple[np.ndarray, float]:
    """Dual coefficients and bias for one binary problem, y in {-1, +1}."""
    n = gram.shape[0]
    alpha = np.zeros(n)
    bias = 0.0
    rng = np.random.default_rng(seed)
    passes = 0
    while passes < max_passes:
        changed = 0
        for i in range(n):
            err_i = float(alpha * y @ gram[i]) + bias - y[i]
            if not ((y[i] * err_i < -tol and alpha[i] < c)
                    or (y[i] * err_i > tol and alpha[i] > 0)):
                continue
            j = int(rng.integers(n - 1))
            if j >= i:
                j += 1
            err_j = float(alpha * y @ gram[j]) + bias - y[j]
            ai_old, aj_old = alpha[i], alpha[j]
            if y[i] != y[j]:
                low, high = max(0.0, aj_old - ai_old), min(c, c + aj_old - ai_old)
            else:
                low, high = max(0.0, ai_old + aj_old - c), min(c, ai_old + aj_old)
            if high - low < 1e-12:
                continue
            eta = 2.0 * gram[i, j] - gram[i, i] - gram[j, j]
            if eta >= 0:
                continue
            aj = np.clip(aj_old - y[j] * (err_i - err_j) / eta, low, high)
            if abs(aj - aj_old) < 1e-7:
                continue
            ai = ai_old + y[i] * y[j] * (aj_old - aj)
            alpha[i], alpha[j] = ai, aj
            b1 = (bias - err_i - y[i] * (ai - ai_old) * gram[i, i]
                  - y[j] * (aj - aj_old) * gram[i, j])
            b2 = (bias - err_j - y[i] * (ai - ai_old) * gram[i, j]
                  - y[j] * (aj - aj_old) * gram[j, j])
            if 0 < ai < c:
                bias = b1
            elif 0 < aj < c:
                bias = b2
            else:
                bias = (b1 + b2) / 2.0
            changed += 1
        passes = passes + 1 if changed == 0 else 0
        if changed == 0:
            break
    return alpha, bias


@dataclass
class KernelClassifier:
    """One-vs-rest histogram intersection SVM."""

    train_histograms: np.ndarray
    labels: np.ndarray
    dual_coef: np.ndarray  # (num_classes, n) alpha_i * y_i per class
    biases: np.ndarray
    classes: np.ndarray

    def decision(self, histograms: np.ndarray) -> np.ndarray:
        gram = hik_gram(np.asarray(histograms, dtype=float), self.train_histograms)
        return gram @ self.dual_coef.T + self.biases

    def predict(self, histograms: np.ndarray) -> np.ndarray:
        return self.classes[self.decision(histograms).argmax(axis=1)]


def fit_hik_classifier(train_histograms: np.ndarray, labels: np.ndarray,
                       c: float = 10.0, tol: float = 1e-4,
                       seed: int = 0) -> KernelClassifier:
    train_histograms = np.asarray(train_histograms, dtype=float)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if classes.size < 2:
        raise InputError("training set must contain at least two classes")
    gram = hik_gram(train_histograms)
    dual = np.empty((classes.size, labels.size))
    biases = np.empty(classes.size)
    for idx, cls in enumerate(classes):
        y = np.where(labels == cls, 1.0, -1.0)
        alpha, bias = _smo_binary(gram, y, c, tol, seed=seed + idx)
        dual[idx] = alpha * y
        biases[idx] = bias
    return KernelClassifier(
        train_histograms=train_histograms, labels=labels,
        dual_coef=dual, biases=biases, classes=classes,
    )


def fit_predict_material(train_histograms: np.ndarray, train_labels: np.ndarray,
                         test_histograms: np.ndarray,
                         test_labels: np.ndarray | None = None,
                         c: float = 10.0, tol: float = 1e-4, seed: int = 0):
    """Train the one-vs-rest HIK SVM and predict test labels.

    Returns (predictions, report); report holds overall and per-class
    accuracy when test labels are supplied.
    """
    clf = fit_hik_classifier(train_histograms, train_labels, c=c, tol=tol,
                             seed=seed)
    preds = clf.predict(np.asarray(test_histograms, dtype=float))
    report: dict = {"classes": clf.classes.tolist()}
    if test_labels is not None:
        test_labels = np.asarray(test_labels)
        report["accuracy"] = float((preds == test_labels).mean())
        report["per_class"] = {
            str(cls): float((preds[test_labels == cls] == cls).mean())
            for cls in clf.classes
        }
    return preds, report


def nearest_centroid_baseline(train_x: np.ndarray, train_labels: np.ndarray,
                              test_x: np.ndarray) -> np.ndarray:
    """Raw-feature nearest-centroid reference classifier."""
    classes = np.unique(train_labels)
    centroids = np.stack([train_x[train_labels == cls].mean(axis=0)
                          for cls in classes])
    d = ((test_x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    return classes[d.argmin(axis=1)]


# ---------------------------------------------------------------------------
# Sliding-window per-pixel maps
# ---------------------------------------------------------------------------

@dataclass
class AttributeMap:
    image_id: str
    planes: np.ndarray  # (M, H, W) in [0, 1]
    stride: int
    patch_side: int

    @property
    def num_planes(self) -> int:
        return self.planes.shape[0]


def sliding_window_maps(image: np.ndarray, predict_fn, patch_side: int,
                        stride: int = 8, image_id: str = "",
                        border: str = "reflect") -> AttributeMap:
    """Average overlapping window predictions into per-pixel planes.

    With border="reflect" the image is reflect-padded by half the window
    so border pixels see full window support; output planes always match
    the image size.  predict_fn maps a stack of (side, side, 3) windows
    to an (n, M) array of values in [0, 1].
    """
    image = np.asarray(image, dtype=float)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"expected (H, W, 3) image, got {image.shape}")
    if border not in ("reflect", "none"):
        raise InputError(f"unknown border policy '{border}'")
    h, w = image.shape[:2]
    if h < patch_side or w < patch_side:
        raise InputError(
            f"image {w}x{h} smaller than window side {patch_side}"
        )
    pad = patch_side // 2 if border == "reflect" else 0
    padded = np.pad(image, ((pad, pad), (pad, pad), (0, 0)), mode="symmetric")
    ph, pw = padded.shape[:2]

    def positions(limit: int) -> np.ndarray:
        pos = list(range(0, limit + 1, stride))
        if pos[-1] != limit:
            pos.append(limit)
        return np.array(pos)

    ys = positions(ph - patch_side)
    xs = positions(pw - patch_side)
    windows = np.stack([
        padded[y:y + patch_side, x:x + patch_side]
        for y in ys for x in xs
    ])
    preds = np.asarray(predict_fn(windows), dtype=float)
    if preds.ndim != 2 or preds.shape[0] != windows.shape[0]:
        raise ShapeError("predict_fn must return one row per window")

    m = preds.shape[1]
    acc = np.zeros((m, ph, pw))
    count = np.zeros((ph, pw))
    i = 0
    for y in ys:
        for x in xs:
            acc[:, y:y + patch_side, x:x + patch_side] += preds[i][:, None, None]
            count[y:y + patch_side, x:x + patch_side] += 1.0
            i += 1
    planes = acc[:, pad:pad + h, pad:pad + w] / count[pad:pad + h, pad:pad + w]
    return AttributeMap(image_id=image_id, planes=np.clip(planes, 0.0, 1.0),
                        stride=stride, patch_side=patch_side)


def save_map(path: str | Path, amap: AttributeMap) -> None:
    """Raw little-endian f32 planes plus a JSON sidecar, written atomically."""
    from .manifest import atomic_write

    path = Path(path)
    planes = np.ascontiguousarray(amap.planes, dtype="<f4")
    with atomic_write(path, "wb") as fh:
        fh.write(planes.tobytes())
    sidecar = {
        "width": int(amap.planes.shape[2]),
        "height": int(amap.planes.shape[1]),
        "M": int(amap.planes.shape[0]),
        "stride": amap.stride,
        "patch_side": amap.patch_side,
        "image_id": amap.image_id,
    }
    with atomic_write(path.with_suffix(path.suffix + ".json")) as fh:
        json.dump(sidecar, fh, indent=2)
        fh.write("\n")


def load_map(path: str | Path) -> AttributeMap:
    path = Path(path)
    sidecar_path = path.with_suffix(path.suffix + ".json")
    if not sidecar_path.exists():
        raise InputError(f"missing map sidecar {sidecar_path}")
    with open(sidecar_path, "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    raw = np.frombuffer(Path(path).read_bytes(), dtype="<f4")
    m, h, w = meta["M"], meta["height"], meta["width"]
    if raw.size != m * h * w:
        raise ShapeError(f"{path}: expected {m * h * w} floats, got {raw.size}")
    return AttributeMap(image_id=meta.get("image_id", ""),
                        planes=raw.reshape(m, h, w).astype(float),
                        stride=meta["stride"], patch_side=meta["patch_side"])


def export_map_pngs(path_prefix: str | Path, amap: AttributeMap) -> list[Path]:
    """8-bit grayscale PNG per plane for quick inspection."""
    out = []
    for i, plane in enumerate(amap.planes):
        arr = np.clip(plane * 255.0 + 0.5, 0, 255).astype(np.uint8)
        p = Path(f"{path_prefix}-{i:02d}.png")
        Image.fromarray(arr).save(p)
        out.append(p)
    return out


# ---------------------------------------------------------------------------
# One-shot novel-category recognition
# ---------------------------------------------------------------------------

def _linear_svm(x: np.ndarray, y: np.ndarray, lam: float = 1e-3,
                epochs: int = 200, lr: float = 0.5, seed: int = 0
                ) -> tuple[np.ndarray, float]:
    """Full-batch subgradient descent on L2-regularized hinge loss."""
    n, d = x.shape
    w = np.zeros(d)
    b = 0.0
    for t in range(epochs):
        margin = y * (x @ w + b)
        active = margin < 1.0
        step = lr / (1.0 + 0.1 * t)
        gw = lam * w - (y[active, None] * x[active]).sum(axis=0) / n
        gb = -y[active].sum() / n
        w -= step * gw
        b -= step * gb
    return w, b


def one_shot_eval(features: dict[str, np.ndarray], image_cats: np.ndarray,
                  heldout_cat: int, shot_counts: list[int], seed: int = 0,
                  repeats: int = 5, lam: float = 1e-3
                  ) -> dict[str, list[float]]:
    """Accuracy-vs-shots curves for each feature set.

    features maps a feature-set name (e.g. "attributes", "materials",
    "both") to per-image feature matrices over the same images.  For each
    shot count a balanced binary task is built: n positives from the
    held-out category vs n negatives sampled from the remaining
    categories, evaluated on a balanced held-back test split, averaged
    over `repeats` resamplings.  All feature sets see identical splits.
    """
    image_cats = np.asarray(image_cats, dtype=int)
    pos_pool = np.flatnonzero(image_cats == heldout_cat)
    neg_pool = np.flatnonzero(image_cats != heldout_cat)
    max_shots = max(shot_counts)
    if pos_pool.size < max_shots + 2:
        raise InputError(
            f"need at least {max_shots + 2} held-out-category images, "
            f"have {pos_pool.size}"
        )
    curves: dict[str, list[float]] = {name: [] for name in features}
    for shots in shot_counts:
        accs: dict[str, list[float]] = {name: [] for name in features}
        for rep in range(repeats):
            rng = np.random.default_rng([seed, shots, rep])
            pos = rng.permutation(pos_pool)
            neg = rng.permutation(neg_pool)
            pos_train, pos_test = pos[:shots], pos[shots:]
            n_test = min(pos_test.size, neg.size - shots)
            neg_train, neg_test = neg[:shots], neg[shots:shots + n_test]
            pos_test = pos_test[:n_test]
            train_idx = np.concatenate([pos_train, neg_train])
            test_idx = np.concatenate([pos_test, neg_test])
            y_train = np.where(image_cats[train_idx] == heldout_cat, 1.0, -1.0)
            y_test = np.where(image_cats[test_idx] == heldout_cat, 1.0, -1.0)
            for name, mat in features.items():
                w, b = _linear_svm(mat[train_idx], y_train, lam=lam,
                                   seed=seed)
                pred = np.sign(mat[test_idx] @ w + b)
                pred[pred == 0] = 1.0
                accs[name].append(float((pred == y_test).mean()))
        for name in features:
            curves[name].append(float(np.mean(accs[name])))
    return curves
