"""Perceptual distances from binary pairwise similarity votes.

Each annotation task shows a reference patch next to one sample patch per
category in randomized display order; annotators mark the ones that look
similar.  Votes are aggregated per task by an at-least-m-of-n rule, the
aggregated vectors are averaged into per-category prototypes, and the
pairwise Euclidean distances between prototypes form the K x K perceptual
distance matrix.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InputError, ShapeError

DEFAULT_QUORUM = 10
DEFAULT_MIN_AGREE = 5


@dataclass(frozen=True)
class SimilarityTask:
    """One voting task.  order[slot] is the category (1..K) whose sample
    is displayed at that slot; the reference category is never shown to
    annotators."""

    task_id: str
    reference_patch: str
    reference_category: int
    order: tuple[int, ...]
    shown_patches: tuple[str, ...] = ()

    @property
    def num_categories(self) -> int:
        return len(self.order)


@dataclass(frozen=True)
class AnnotationRecord:
    """One annotator's decisions for one task, in display order."""

    task_id: str
    annotator_id: str
    decisions: tuple[int, ...]
    order: tuple[int, ...]


@dataclass
class CategoryPrototype:
    category: int
    vector: np.ndarray  # length K, entries in [0, 1]
    support: int

    def __post_init__(self) -> None:
        self.vector = np.asarray(self.vector, dtype=float)
        if self.support < 1:
            raise InputError(f"prototype for category {self.category} has no records")
        if self.vector.min() < 0 or self.vector.max() > 1:
            raise InputError("prototype entries must lie in [0, 1]")


@dataclass
class DistanceMatrix:
    names: list[str]
    values: np.ndarray  # (K, K), symmetric, zero diagonal

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=float)
        k = len(self.names)
        if self.values.shape != (k, k):
            raise ShapeError(f"distance matrix shape {self.values.shape} vs {k} names")

    @property
    def num_categories(self) -> int:
        return len(self.names)


def aggregate_votes(records: list[AnnotationRecord], quorum: int = DEFAULT_QUORUM,
                    min_agree: int = DEFAULT_MIN_AGREE) -> np.ndarray:
    """Aggregate one task's records into a binary similarity vector.

    s[k-1] = 1 iff at least min_agree annotators marked the slot showing
    category k.  Display order is undone per record, so the result is in
    category order and invariant to how slots were randomized.
    """
    if not records:
        raise InputError("no records supplied")
    task_ids = {r.task_id for r in records}
    if len(task_ids) != 1:
        raise InputError(f"records span multiple tasks: {sorted(task_ids)}")
    if len(records) < quorum:
        raise InputError(
            f"task '{records[0].task_id}': {len(records)} records below quorum {quorum}"
        )
    k = len(records[0].order)
    counts = np.zeros(k, dtype=int)
    for rec in records:
        if len(rec.decisions) != k or len(rec.order) != k:
            raise ShapeError(
                f"task '{rec.task_id}': decision vector length mismatch"
            )
        for slot, cat in enumerate(rec.order):
            if rec.decisions[slot]:
                counts[cat - 1] += 1
    return (counts >= min_agree).astype(float)


def aggregate_log(tasks: list[SimilarityTask], records: list[AnnotationRecord],
                  quorum: int = DEFAULT_QUORUM, min_agree: int = DEFAULT_MIN_AGREE,
                  ) -> tuple[np.ndarray, np.ndarray]:
    """Aggregate a full annotation log.

    Returns (categories, S): reference category c_n per task and the
    N x K matrix of aggregated binary similarity vectors.  Duplicate
    (task, annotator) submissions keep the last record.
    """
    by_task: dict[str, dict[str, AnnotationRecord]] = defaultdict(dict)
    for rec in records:
        by_task[rec.task_id][rec.annotator_id] = rec

    cats = []
    rows = []
    for task in tasks:
        recs = list(by_task.get(task.task_id, {}).values())
        if not recs:
            continue
        rows.append(aggregate_votes(recs, quorum=quorum, min_agree=min_agree))
        cats.append(task.reference_category)
    if not rows:
        raise InputError("no tasks with submissions in the log")
    return np.array(cats, dtype=int), np.stack(rows)


def category_prototypes(categories: np.ndarray, s_vectors: np.ndarray
                        ) -> list[CategoryPrototype]:
    """Per-category mean of aggregated similarity vectors."""
    s_vectors = np.asarray(s_vectors, dtype=float)
    categories = np.asarray(categories, dtype=int)
    if s_vectors.ndim != 2 or len(categories) != s_vectors.shape[0]:
        raise ShapeError("categories and similarity vectors disagree")
    k = s_vectors.shape[1]
    protos = []
    for cat in range(1, k + 1):
        mask = categories == cat
        n_k = int(mask.sum())
        if n_k == 0:
            raise InputError(f"no records for category {cat}")
        protos.append(CategoryPrototype(
            category=cat, vector=s_vectors[mask].mean(axis=0), support=n_k
        ))
    return protos


def distance_matrix(prototypes: list[CategoryPrototype],
                    names: list[str] | None = None) -> DistanceMatrix:
    """Pairwise Euclidean distances between category prototypes."""
    ks = {p.vector.shape[0] for p in prototypes}
    if len(ks) != 1:
        raise ShapeError(f"prototypes have mixed dimensionality: {sorted(ks)}")
    p = np.stack([pr.vector for pr in sorted(prototypes, key=lambda q: q.category)])
    diff = p[:, None, :] - p[None, :, :]
    d = np.sqrt((diff ** 2).sum(axis=2))
    np.fill_diagonal(d, 0.0)
    if names is None:
        names = [f"cat{i:02d}" for i in range(1, p.shape[0] + 1)]
    return DistanceMatrix(names=list(names), values=d)


def convergence_curve(categories: np.ndarray, s_vectors: np.ndarray,
                      checkpoints: list[int]) -> list[tuple[int, float]]:
    """Relative Frobenius difference between the distance matrix from the
    first n records and from all N records, per checkpoint.

    Callers fix the record order (seeded shuffle) before calling.
    """
    n_total = len(categories)
    for n in checkpoints:
        if n > n_total:
            raise InputError(f"checkpoint {n} exceeds record count {n_total}")
        if n < 1:
            raise InputError("checkpoints must be positive")
    d_full = distance_matrix(category_prototypes(categories, s_vectors)).values
    denom = np.linalg.norm(d_full)
    out = []
    for n in checkpoints:
        d_n = distance_matrix(
            category_prototypes(categories[:n], s_vectors[:n])
        ).values
        num = np.linalg.norm(d_n - d_full)
        out.append((n, float(num / denom) if denom > 0 else 0.0))
    return out


def simulate_annotations(pi: np.ndarray, n_tasks: int, annotators_per_task: int,
                         seed: int = 0
                         ) -> tuple[list[SimilarityTask], list[AnnotationRecord]]:
    """Simulated-annotator oracle.

    pi[c-1, k-1] is the probability that an annotator marks the category-k
    sample similar when the reference is category c.  Reference categories
    cycle through 1..K; display order is shuffled per task; each annotator
    votes independently.  Per-task RNG streams derive from (seed, task
    index) so results do not depend on evaluation order.
    """
    pi = np.asarray(pi, dtype=float)
    if pi.ndim != 2 or pi.shape[0] != pi.shape[1]:
        raise ShapeError(f"pi must be square, got {pi.shape}")
    if pi.min() < 0 or pi.max() > 1:
        raise InputError("pi entries must lie in [0, 1]")
    k = pi.shape[0]
    tasks = []
    records = []
    for t in range(n_tasks):
        rng = np.random.default_rng([seed, t])
        c_ref = (t % k) + 1
        order = rng.permutation(k) + 1
        task = SimilarityTask(
            task_id=f"task-{t:06d}",
            reference_patch=f"ref-{t:06d}",
            reference_category=c_ref,
            order=tuple(int(c) for c in order),
        )
        tasks.append(task)
        probs = pi[c_ref - 1, order - 1]
        draws = rng.random((annotators_per_task, k)) < probs
        for a in range(annotators_per_task):
            records.append(AnnotationRecord(
                task_id=task.task_id,
                annotator_id=f"sim-{a:03d}",
                decisions=tuple(int(v) for v in draws[a]),
                order=task.order,
            ))
    return tasks, records


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------

def write_annotation_log(path: str | Path, records: list[AnnotationRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps({
                "task": rec.task_id,
                "annotator": rec.annotator_id,
                "decisions": list(rec.decisions),
                "order": list(rec.order),
            }) + "\n")


def read_annotation_log(path: str | Path) -> list[AnnotationRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise InputError(f"{path}:{lineno}: malformed JSON: {exc}") from exc
            try:
                records.append(AnnotationRecord(
                    task_id=rec["task"],
                    annotator_id=rec["annotator"],
                    decisions=tuple(int(v) for v in rec["decisions"]),
                    order=tuple(int(v) for v in rec["order"]),
                ))
            except (KeyError, TypeError, ValueError) as exc:
                raise InputError(f"{path}:{lineno}: bad record: {exc}") from exc
    return records


def write_task_pool(path: str | Path, tasks: list[SimilarityTask]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in tasks:
            fh.write(json.dumps({
                "task_id": t.task_id,
                "reference_patch": t.reference_patch,
                "reference_category": t.reference_category,
                "order": list(t.order),
                "shown_patches": list(t.shown_patches),
            }) + "\n")


def read_task_pool(path: str | Path) -> list[SimilarityTask]:
    tasks = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                tasks.append(SimilarityTask(
                    task_id=rec["task_id"],
                    reference_patch=rec["reference_patch"],
                    reference_category=int(rec["reference_category"]),
                    order=tuple(int(v) for v in rec["order"]),
                    shown_patches=tuple(rec.get("shown_patches", ())),
                ))
            except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
                raise InputError(f"{path}:{lineno}: bad task: {exc}") from exc
    return tasks


def write_distance_csv(path: str | Path, dm: DistanceMatrix) -> None:
    """CSV with a header row of category names and K rows of K floats."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(dm.names) + "\n")
        for row in dm.values:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def read_distance_csv(path: str | Path) -> DistanceMatrix:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines:
        raise InputError(f"{path}: empty distance file")
    names = lines[0].split(",")
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            rows.append([float(v) for v in line.split(",")])
        except ValueError as exc:
            raise InputError(f"{path}:{lineno}: bad float: {exc}") from exc
    values = np.array(rows)
    if values.shape != (len(names), len(names)):
        raise ShapeError(f"{path}: matrix shape {values.shape} vs {len(names)} names")
    return DistanceMatrix(names=names, values=values)
