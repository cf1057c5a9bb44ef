"""Boolean-tree linkage from binarized attributes to semantic traits.

Trees combine attribute literals with AND/OR/NOT.  Fitting minimizes the
best-achievable misclassification of the tree's binary partition via
simulated annealing (grow / prune / swap-operator / swap-leaf moves with
a seeded geometric schedule); exhaustive enumeration over small formulas
doubles as an oracle and as the exact mode for tiny instances.  A fitted
tree maps its 0/1 output to a probability through Laplace-smoothed class
rates.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import InputError, ShapeError


@dataclass(frozen=True)
class Leaf:
    index: int
    negated: bool = False


@dataclass(frozen=True)
class Node:
    op: str  # "and" | "or" | "not"
    args: tuple


Tree = Leaf | Node


@dataclass
class BinarizedAttributes:
    values: np.ndarray  # (N, M) in {0, 1}
    threshold: float


def binarize(predictions: np.ndarray, threshold: float = 0.5) -> BinarizedAttributes:
    """Entry = 1 iff prediction >= threshold (boundary counts as present)."""
    predictions = np.asarray(predictions, dtype=float)
    if predictions.min() < 0 or predictions.max() > 1:
        raise InputError("predictions must lie in [0, 1]")
    return BinarizedAttributes(
        values=(predictions >= threshold).astype(np.uint8),
        threshold=threshold,
    )


def validate_tree(tree: Tree, num_attributes: int) -> None:
    if isinstance(tree, Leaf):
        if not 0 <= tree.index < num_attributes:
            raise InputError(
                f"leaf index {tree.index} out of range for {num_attributes} attributes"
            )
        return
    if tree.op == "not":
        if len(tree.args) != 1:
            raise InputError("NOT takes exactly one argument")
    elif tree.op in ("and", "or"):
        if len(tree.args) != 2:
            raise InputError(f"{tree.op.upper()} takes exactly two arguments")
    else:
        raise InputError(f"unknown operator '{tree.op}'")
    for arg in tree.args:
        validate_tree(arg, num_attributes)


def tree_eval(tree: Tree, x: np.ndarray) -> np.ndarray:
    """Evaluate on an (N, M) binary matrix; returns (N,) booleans."""
    x = np.asarray(x)
    if isinstance(tree, Leaf):
        col = x[:, tree.index].astype(bool)
        return ~col if tree.negated else col
    if tree.op == "not":
        return ~tree_eval(tree.args[0], x)
    a = tree_eval(tree.args[0], x)
    b = tree_eval(tree.args[1], x)
    return a & b if tree.op == "and" else a | b


def tree_depth(tree: Tree) -> int:
    if isinstance(tree, Leaf):
        return 0
    return 1 + max(tree_depth(a) for a in tree.args)


def _leaves(tree: Tree) -> list[Leaf]:
    if isinstance(tree, Leaf):
        return [tree]
    return [leaf for arg in tree.args for leaf in _leaves(arg)]


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------

@dataclass
class LogicFitConfig:
    max_depth: int = 3
    moves: int = 10000
    cooling: float = 0.999
    initial_temperature: float = 0.2
    restart_patience: int = 1500
    seed: int = 0
    method: str = "auto"  # auto | anneal | exhaustive


@dataclass
class LogicFitResult:
    tree: Tree
    accuracy: float
    p0: float  # P(trait | tree output 0), Laplace-smoothed
    p1: float  # P(trait | tree output 1)
    constant: bool = False  # degenerate targets: tree output is uninformative

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        out = tree_eval(self.tree, x)
        return np.where(out, self.p1, self.p0)

    def predict(self, x: np.ndarray) -> np.ndarray:
        return (self.predict_proba(x) >= 0.5).astype(np.uint8)


def _partition_error(out: np.ndarray, y: np.ndarray) -> int:
    """Best-achievable misclassifications when each side of the partition
    predicts its own majority class."""
    err = 0
    for side in (False, True):
        sel = out == side
        n1 = int(y[sel].sum())
        err += min(n1, int(sel.sum()) - n1)
    return err


def _rates(out: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    p = []
    for side in (False, True):
        sel = out == side
        p.append((float(y[sel].sum()) + 1.0) / (float(sel.sum()) + 2.0))
    return p[0], p[1]


def _result_from_tree(tree: Tree, x: np.ndarray, y: np.ndarray,
                      constant: bool = False) -> LogicFitResult:
    out = tree_eval(tree, x)
    p0, p1 = _rates(out, y)
    pred = np.where(out, p1 >= 0.5, p0 >= 0.5)
    return LogicFitResult(tree=tree, accuracy=float((pred == y).mean()),
                          p0=p0, p1=p1, constant=constant)


def enumerate_trees(num_attributes: int):
    """All formulas of up to three distinct literals (negations on leaves;
    NOT on inner nodes is redundant by De Morgan)."""
    for i in range(num_attributes):
        for neg in (False, True):
            yield Leaf(i, neg)
    lits = [Leaf(i, n) for i in range(num_attributes) for n in (False, True)]
    for op in ("and", "or"):
        for a in range(num_attributes):
            for b in range(a + 1, num_attributes):
                for la in (Leaf(a, False), Leaf(a, True)):
                    for lb in (Leaf(b, False), Leaf(b, True)):
                        yield Node(op, (la, lb))
    for outer_op in ("and", "or"):
        for inner_op in ("and", "or"):
            for i in range(num_attributes):
                for a in range(num_attributes):
                    if a == i:
                        continue
                    for b in range(a + 1, num_attributes):
                        if b == i:
                            continue
                        for li in (Leaf(i, False), Leaf(i, True)):
                            for la in (Leaf(a, False), Leaf(a, True)):
                                for lb in (Leaf(b, False), Leaf(b, True)):
                                    yield Node(outer_op, (li, Node(inner_op, (la, lb))))


def _fit_exhaustive(x: np.ndarray, y: np.ndarray) -> Tree:
    best_tree = None
    best_err = None
    for tree in enumerate_trees(x.shape[1]):
        err = _partition_error(tree_eval(tree, x), y)
        if best_err is None or err < best_err:
            best_tree, best_err = tree, err
            if err == 0:
                break
    return best_tree


def _random_leaf(m: int, rng: np.random.Generator) -> Leaf:
    return Leaf(int(rng.integers(m)), bool(rng.integers(2)))


def _mutate(tree: Tree, m: int, max_depth: int,
            rng: np.random.Generator) -> Tree:
    """One of grow / prune / swap-operator / swap-leaf, applied at a random
    admissible site."""
    moves = ["grow", "swap_leaf"]
    if isinstance(tree, Node):
        moves += ["prune", "swap_op"]
    move = moves[rng.integers(len(moves))]

    if move == "grow":
        sites = _leaves(tree)
        target = sites[rng.integers(len(sites))]
        op = "and" if rng.integers(2) else "or"
        grown = Node(op, (target, _random_leaf(m, rng)))
        candidate = _replace_first(tree, target, grown)
        return candidate if tree_depth(candidate) <= max_depth else tree
    if move == "swap_leaf":
        sites = _leaves(tree)
        target = sites[rng.integers(len(sites))]
        return _replace_first(tree, target, _random_leaf(m, rng))
    if move == "prune":
        nodes = _binary_nodes(tree)
        target = nodes[rng.integers(len(nodes))]
        child = target.args[rng.integers(2)]
        return _replace_first(tree, target, child)
    nodes = _binary_nodes(tree)
    target = nodes[rng.integers(len(nodes))]
    swapped = Node("or" if target.op == "and" else "and", target.args)
    return _replace_first(tree, target, swapped)


def _binary_nodes(tree: Tree) -> list[Node]:
    if isinstance(tree, Leaf):
        return []
    own = [tree] if tree.op in ("and", "or") else []
    return own + [n for arg in tree.args for n in _binary_nodes(arg)]


def _replace_first(tree: Tree, target: Tree, replacement: Tree) -> Tree:
    """Replace the first occurrence (identity comparison) of target."""
    if tree is target:
        return replacement
    if isinstance(tree, Leaf):
        return tree
    new_args = []
    replaced = False
    for arg in tree.args:
        if not replaced:
            new_arg = _replace_first(arg, target, replacement)
            replaced = new_arg is not arg
            new_args.append(new_arg)
        else:
            new_args.append(arg)
    return Node(tree.op, tuple(new_args)) if replaced else tree


def _fit_anneal(x: np.ndarray, y: np.ndarray, cfg: LogicFitConfig) -> Tree:
    rng = np.random.default_rng(cfg.seed)
    m = x.shape[1]
    n = x.shape[0]
    current = _random_leaf(m, rng)
    cur_err = _partition_error(tree_eval(current, x), y)
    best, best_err = current, cur_err
    temp = cfg.initial_temperature
    stale = 0
    for _ in range(cfg.moves):
        if best_err == 0:
            break
        candidate = _mutate(current, m, cfg.max_depth, rng)
        cand_err = _partition_error(tree_eval(candidate, x), y)
        delta = (cand_err - cur_err) / n
        if delta <= 0 or rng.random() < math.exp(-delta / max(temp, 1e-12)):
            current, cur_err = candidate, cand_err
        if cur_err < best_err:
            best, best_err = current, cur_err
            stale = 0
        else:
            stale += 1
            if stale >= cfg.restart_patience:
                current = _random_leaf(m, rng)
                cur_err = _partition_error(tree_eval(current, x), y)
                temp = cfg.initial_temperature
                stale = 0
        temp *= cfg.cooling
    return best


def fit_tree(binarized: BinarizedAttributes | np.ndarray, y: np.ndarray,
             cfg: LogicFitConfig | None = None) -> LogicFitResult:
    """Fit one boolean tree predicting binary trait labels.

    Degenerate targets (a single class) return a constant result with the
    `constant` flag set.
    """
    cfg = cfg or LogicFitConfig()
    x = binarized.values if isinstance(binarized, BinarizedAttributes) else \
        np.asarray(binarized)
    y = np.asarray(y).astype(np.uint8)
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ShapeError("attributes and labels disagree")
    if x.shape[0] < 1:
        raise InputError("need at least one sample")
    if np.unique(y).size < 2:
        return _result_from_tree(Leaf(0), x, y, constant=True)

    if cfg.method == "exhaustive" or (
        cfg.method == "auto" and x.shape[1] <= 6 and cfg.max_depth <= 3
    ):
        tree = _fit_exhaustive(x, y)
    else:
        tree = _fit_anneal(x, y, cfg)
    return _result_from_tree(tree, x, y)


# ---------------------------------------------------------------------------
# Per-pixel trait maps
# ---------------------------------------------------------------------------

def trait_maps(planes: np.ndarray, trees: list[Tree | LogicFitResult],
               threshold: float = 0.5) -> np.ndarray:
    """Binarize attribute planes per pixel and evaluate each tree.

    Bare trees output their raw 0/1 evaluation; fitted results map the
    output through their class-rate probabilities.
    """
    planes = np.asarray(planes, dtype=float)
    if planes.ndim != 3:
        raise ShapeError("expected (M, H, W) attribute planes")
    m, h, w = planes.shape
    flat = (planes.reshape(m, h * w).T >= threshold).astype(np.uint8)
    out = np.empty((len(trees), h, w))
    for t, tree in enumerate(trees):
        if isinstance(tree, LogicFitResult):
            validate_tree(tree.tree, m)
            vals = tree.predict_proba(flat)
        else:
            validate_tree(tree, m)
            vals = tree_eval(tree, flat).astype(float)
        out[t] = vals.reshape(h, w)
    return out


# ---------------------------------------------------------------------------
# JSON s-expressions
# ---------------------------------------------------------------------------

def tree_to_json(tree: Tree) -> dict:
    if isinstance(tree, Leaf):
        plain = {"leaf": tree.index}
        return {"op": "not", "args": [plain]} if tree.negated else plain
    return {"op": tree.op, "args": [tree_to_json(a) for a in tree.args]}


def tree_from_json(obj: dict) -> Tree:
    if "leaf" in obj:
        return Leaf(int(obj["leaf"]))
    try:
        op = obj["op"]
        args = [tree_from_json(a) for a in obj["args"]]
    except (KeyError, TypeError) as exc:
        raise InputError(f"malformed tree node: {obj!r}") from exc
    if op == "not" and len(args) == 1 and isinstance(args[0], Leaf) \
            and not args[0].negated:
        return Leaf(args[0].index, negated=True)
    return Node(op, tuple(args))


def save_trees(path: str | Path, results: dict[str, LogicFitResult]) -> None:
    payload = {
        name: {
            "tree": tree_to_json(res.tree),
            "p0": res.p0,
            "p1": res.p1,
            "accuracy": res.accuracy,
            "constant": res.constant,
        }
        for name, res in results.items()
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def load_trees(path: str | Path) -> dict[str, LogicFitResult]:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    out = {}
    for name, rec in payload.items():
        out[name] = LogicFitResult(
            tree=tree_from_json(rec["tree"]),
            accuracy=float(rec.get("accuracy", 0.0)),
            p0=float(rec["p0"]),
            p1=float(rec["p1"]),
            constant=bool(rec.get("constant", False)),
        )
    return out
