"""Category-attribute matrix discovery.

Finds a K x M matrix of category-to-attribute probabilities, entries in
[0, 1], whose row distances reproduce the perceptual distance matrix
while the distribution of entries stays close to a Beta(0.5, 0.5) target
(strongly present or strongly absent, rarely in between).  The objective
is

    stress(A; D) + w * kl_to_beta(A)

minimized by projected gradient with backtracking line search; an
L-BFGS-B path is available behind ``method="lbfgsb"``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InputError, NumericsError, ShapeError
from .perception import DistanceMatrix


@dataclass
class CategoryAttributeMatrix:
    values: np.ndarray  # (K, M), entries in [0, 1]
    category_names: list[str] | None = None

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2:
            raise ShapeError("attribute matrix must be 2-D")
        if self.values.min() < 0 or self.values.max() > 1:
            raise InputError("attribute matrix entries must lie in [0, 1]")

    @property
    def num_categories(self) -> int:
        return self.values.shape[0]

    @property
    def num_attributes(self) -> int:
        return self.values.shape[1]

    def row(self, category: int) -> np.ndarray:
        return self.values[category - 1]


def default_sample_points() -> np.ndarray:
    return np.round(np.linspace(0.01, 0.99, 99), 10)


@dataclass
class KdeConfig:
    bandwidth: float = 0.05
    sample_points: np.ndarray = field(default_factory=default_sample_points)
    beta_a: float = 0.5
    beta_b: float = 0.5

    def __post_init__(self) -> None:
        self.sample_points = np.asarray(self.sample_points, dtype=float)
        if self.bandwidth <= 0:
            raise InputError("bandwidth must be positive")
        if self.sample_points.size == 0:
            raise InputError("sample points must be non-empty")
        if self.sample_points.min() <= 0 or self.sample_points.max() >= 1:
            raise InputError("sample points must lie strictly inside (0, 1)")
        if self.beta_a <= 0 or self.beta_b <= 0:
            raise InputError("beta shape parameters must be positive")


@dataclass
class AttrSpaceConfig:
    n_attributes: int = 30
    weight: float = 0.1
    max_iter: int = 1000
    tol: float = 1e-10
    seed: int = 0
    method: str = "projgrad"  # or "lbfgsb"
    init_low: float = 0.25
    init_high: float = 0.75
    step0: float = 0.5

    def __post_init__(self) -> None:
        if self.n_attributes < 1:
            raise InputError("need at least one attribute")
        if self.weight < 0:
            raise InputError("weight must be non-negative")
        if self.method not in ("projgrad", "lbfgsb"):
            raise InputError(f"unknown optimizer method '{self.method}'")


# ---------------------------------------------------------------------------
# Stress
# ---------------------------------------------------------------------------

def _row_distances(a: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - a[None, :, :]
    return np.sqrt((diff ** 2).sum(axis=2))


def stress(a: np.ndarray, d: np.ndarray) -> float:
    """Sum over ordered pairs (k, k') of (||a_k - a_k'|| - D_kk')^2."""
    a = np.asarray(a, dtype=float)
    d = np.asarray(d, dtype=float)
    if a.shape[0] != d.shape[0] or d.shape[0] != d.shape[1]:
        raise ShapeError(f"A has {a.shape[0]} rows but D is {d.shape}")
    r = _row_distances(a)
    return float(((r - d) ** 2).sum())


def stress_grad(a: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Gradient of stress w.r.t. A; coincident rows get a zero subgradient."""
    a = np.asarray(a, dtype=float)
    d = np.asarray(d, dtype=float)
    r = _row_distances(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        coef = np.where(r > 0, (r - d) / np.where(r > 0, r, 1.0), 0.0)
    np.fill_diagonal(coef, 0.0)
    diff = a[:, None, :] - a[None, :, :]
    # ordered pairs double each unordered term, hence the factor 4
    return 4.0 * (coef[:, :, None] * diff).sum(axis=1)


# ---------------------------------------------------------------------------
# Kernel density estimate and KL to the Beta target
# ---------------------------------------------------------------------------

def kde(p: float | np.ndarray, values: np.ndarray, bandwidth: float) -> np.ndarray | float:
    """Gaussian kernel density estimate of `values` evaluated at p."""
    values = np.asarray(values, dtype=float).ravel()
    if values.size == 0:
        raise InputError("kde needs at least one value")
    if bandwidth <= 0:
        raise InputError("bandwidth must be positive")
    pts = np.atleast_1d(np.asarray(p, dtype=float))
    z = (values[None, :] - pts[:, None]) / bandwidth
    dens = np.exp(-0.5 * z ** 2).sum(axis=1) / (
        values.size * bandwidth * math.sqrt(2.0 * math.pi)
    )
    return float(dens[0]) if np.isscalar(p) or np.asarray(p).ndim == 0 else dens


def kde_grad(p: float, values: np.ndarray, bandwidth: float) -> np.ndarray:
    """Gradient of kde(p, values, bandwidth) w.r.t. each value."""
    values = np.asarray(values, dtype=float)
    shape = values.shape
    vals = values.ravel()
    z = (vals - p) / bandwidth
    g = -z * np.exp(-0.5 * z ** 2) / (
        vals.size * bandwidth ** 2 * math.sqrt(2.0 * math.pi)
    )
    return g.reshape(shape)


def beta_pdf(p: np.ndarray, a: float, b: float) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    log_b = math.lgamma(a) + math.lgamma(b) - math.lgamma(a + b)
    return np.exp((a - 1) * np.log(p) + (b - 1) * np.log1p(-p) - log_b)


def beta_kl(values: np.ndarray, cfg: KdeConfig | None = None) -> float:
    """Discretized KL from the Beta target to the KDE of `values`.

    Plain sum over the sample points, no bin widths.  Used both for the
    attribute matrix and for classifier output distributions.
    """
    cfg = cfg or KdeConfig()
    pts = cfg.sample_points
    q = kde(pts, values, cfg.bandwidth)
    beta = beta_pdf(pts, cfg.beta_a, cfg.beta_b)
    return float((beta * (np.log(beta) - np.log(q))).sum())


def beta_kl_grad(values: np.ndarray, cfg: KdeConfig | None = None) -> np.ndarray:
    """Gradient of beta_kl w.r.t. each value, same shape as `values`."""
    cfg = cfg or KdeConfig()
    shape = np.asarray(values).shape
    vals = np.asarray(values, dtype=float).ravel()
    pts = cfg.sample_points
    h = cfg.bandwidth
    n = vals.size
    z = (vals[None, :] - pts[:, None]) / h  # (P, n)
    phi = np.exp(-0.5 * z ** 2) / (h * math.sqrt(2.0 * math.pi))
    q = phi.sum(axis=1) / n
    beta = beta_pdf(pts, cfg.beta_a, cfg.beta_b)
    # d q_p / d v_j = -phi * (v_j - p) / (n h^2); d kl / d q_p = -beta_p / q_p
    w = (beta / q)[:, None] * phi * (vals[None, :] - pts[:, None]) / (n * h ** 2)
    return w.sum(axis=0).reshape(shape)


# ---------------------------------------------------------------------------
# Optimization
# ---------------------------------------------------------------------------

def attr_objective(a: np.ndarray, d: np.ndarray, weight: float,
                   kde_cfg: KdeConfig) -> float:
    return stress(a, d) + weight * beta_kl(a, kde_cfg)


def attr_gradient(a: np.ndarray, d: np.ndarray, weight: float,
                  kde_cfg: KdeConfig) -> np.ndarray:
    return stress_grad(a, d) + weight * beta_kl_grad(a, kde_cfg)


def optimize_A(d: DistanceMatrix | np.ndarray, cfg: AttrSpaceConfig | None = None,
               kde_cfg: KdeConfig | None = None
               ) -> tuple[CategoryAttributeMatrix, list[float]]:
    """Minimize stress + w * beta_kl over box-constrained matrices.

    Returns the optimized matrix (entries exactly inside [0, 1]) and the
    objective trace, one entry per accepted iterate starting with the
    initialization.
    """
    cfg = cfg or AttrSpaceConfig()
    kde_cfg = kde_cfg or KdeConfig()
    if isinstance(d, DistanceMatrix):
        names = d.names
        dv = d.values
    else:
        names = None
        dv = np.asarray(d, dtype=float)
    k = dv.shape[0]
    if dv.shape != (k, k):
        raise ShapeError(f"distance matrix must be square, got {dv.shape}")

    rng = np.random.default_rng(cfg.seed)
    a = rng.uniform(cfg.init_low, cfg.init_high, size=(k, cfg.n_attributes))

    if cfg.method == "lbfgsb":
        a_opt, trace = _run_lbfgsb(a, dv, cfg, kde_cfg)
        return CategoryAttributeMatrix(a_opt, category_names=names), trace

    f = attr_objective(a, dv, cfg.weight, kde_cfg)
    if not math.isfinite(f):
        raise NumericsError("non-finite objective at initialization")
    trace = [f]
    step = cfg.step0
    for it in range(cfg.max_iter):
        g = attr_gradient(a, dv, cfg.weight, kde_cfg)
        if not np.isfinite(g).all():
            raise NumericsError(f"non-finite gradient at iteration {it}")
        accepted = False
        while step >= 1e-14:
            a_new = np.clip(a - step * g, 0.0, 1.0)
            f_new = attr_objective(a_new, dv, cfg.weight, kde_cfg)
            if not math.isfinite(f_new):
                raise NumericsError(f"non-finite objective at iteration {it}")
            dx = a_new - a
            if f_new <= f + 1e-4 * float((g * dx).sum()):
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        moved = float(np.abs(a_new - a).max())
        rel_drop = (f - f_new) / max(abs(f), 1.0)
        a, f = a_new, f_new
        trace.append(f)
        step = min(step * 1.3, 10.0)
        if moved < cfg.tol or rel_drop < cfg.tol:
            break
    return CategoryAttributeMatrix(np.clip(a, 0.0, 1.0), category_names=names), trace


def _run_lbfgsb(a0: np.ndarray, dv: np.ndarray, cfg: AttrSpaceConfig,
                kde_cfg: KdeConfig) -> tuple[np.ndarray, list[float]]:
    from scipy.optimize import minimize

    shape = a0.shape
    trace = [attr_objective(a0, dv, cfg.weight, kde_cfg)]

    def fun(x):
        v = attr_objective(x.reshape(shape), dv, cfg.weight, kde_cfg)
        if not math.isfinite(v):
            raise NumericsError("non-finite objective in L-BFGS-B")
        return v

    def jac(x):
        return attr_gradient(x.reshape(shape), dv, cfg.weight, kde_cfg).ravel()

    res = minimize(
        fun, a0.ravel(), jac=jac, method="L-BFGS-B",
        bounds=[(0.0, 1.0)] * a0.size,
        callback=lambda x: trace.append(fun(x)),
        options={"maxiter": cfg.max_iter, "ftol": cfg.tol},
    )
    return np.clip(res.x.reshape(shape), 0.0, 1.0), trace


# ---------------------------------------------------------------------------
# Files: K x M CSV plus a JSON sidecar
# ---------------------------------------------------------------------------

def write_attribute_matrix(path: str | Path, mat: CategoryAttributeMatrix,
                           config: dict | None = None) -> None:
    """K x M CSV plus a JSON sidecar; both written atomically."""
    from .manifest import atomic_write

    path = Path(path)
    with atomic_write(path) as fh:
        for row in mat.values:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    sidecar = {
        "K": mat.num_categories,
        "M": mat.num_attributes,
        "category_names": mat.category_names
        or [f"cat{i:02d}" for i in range(1, mat.num_categories + 1)],
        "config": config or {},
    }
    with atomic_write(path.with_suffix(path.suffix + ".json")) as fh:
        json.dump(sidecar, fh, indent=2)
        fh.write("\n")


def read_attribute_matrix(path: str | Path) -> CategoryAttributeMatrix:
    path = Path(path)
    values = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                values.append([float(v) for v in line.split(",")])
            except ValueError as exc:
                raise InputError(f"{path}:{lineno}: bad float: {exc}") from exc
    names = None
    sidecar = path.with_suffix(path.suffix + ".json")
    if sidecar.exists():
        with open(sidecar, "r", encoding="utf-8") as fh:
            names = json.load(fh).get("category_names")
    return CategoryAttributeMatrix(np.array(values), category_names=names)
