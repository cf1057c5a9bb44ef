"""Pipeline command-line interface.

Composable subcommands over the shared file formats; every stage writes
its outputs atomically, renders report figures next to the delimited
files, and records a digest-chained manifest.  Exit codes: 1 malformed
input, 2 dimension/config mismatch, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import attrmodel, attrspace, features, logicreg, macheads, matclass, \
    patches, perception
from .errors import InputError, NumericsError, ShapeError
from .figures import (
    save_curve,
    save_matrix_heatmap,
    save_plane_grid,
    save_shot_curves,
    save_trace,
)
from .manifest import StageRun, atomic_move, atomic_write


def _args_config(args) -> dict:
    return {k: v for k, v in vars(args).items() if k != "func"}


def _seed(args) -> int:
    env = os.environ.get("PERCEPT_SEED")
    return int(env) if env else args.seed


def _data_dir(value: str | None) -> Path:
    if value:
        return Path(value)
    return Path(os.environ.get("PERCEPT_DATA_DIR", "."))


def _write_stage(run: StageRun, out_dir: Path, stage: str) -> None:
    run.write(out_dir / f"{stage}.manifest.json")


# ---------------------------------------------------------------------------
# simulate: synthetic dataset, task pool, simulated annotation log
# ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    seed = _seed(args)
    out = _data_dir(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run = StageRun("simulate", _args_config(args) | {"seed": seed}, seed)

    spec = patches.make_spec(args.categories, seed=seed,
                             patch_side=args.patch_side)
    plist, latent = patches.generate_synthetic(spec, args.per_category)
    index_path = patches.write_dataset(out, plist, spec.category_names())

    with atomic_write(out / "traits.csv") as fh:
        names = [f"latent{j}" for j in range(latent.shape[1])]
        fh.write("id," + ",".join(names) + "\n")
        for p, row in zip(plist, latent):
            fh.write(p.id + "," + ",".join(str(int(v >= 0.5)) for v in row) + "\n")

    pi = patches.latent_similarity(spec)
    tasks, records = perception.simulate_annotations(
        pi, args.tasks, args.annotators, seed=seed
    )
    by_cat = {}
    for p in plist:
        by_cat.setdefault(p.category, []).append(p.id)
    rng = np.random.default_rng([seed, 777])
    tasks = [
        perception.SimilarityTask(
            task_id=t.task_id,
            reference_patch=by_cat[t.reference_category][
                int(rng.integers(len(by_cat[t.reference_category])))
            ],
            reference_category=t.reference_category,
            order=t.order,
            shown_patches=tuple(
                by_cat[cat][int(rng.integers(len(by_cat[cat])))]
                for cat in t.order
            ),
        )
        for t in tasks
    ]
    atomic_move(lambda p: perception.write_task_pool(p, tasks),
                out / "tasks.jsonl")
    atomic_move(lambda p: perception.write_annotation_log(p, records),
                out / "annotations.jsonl")
    save_matrix_heatmap(out / "latent-similarity.png", pi,
                        labels=spec.category_names(),
                        title="ground-truth similarity probabilities")
    for path in (index_path, out / "tasks.jsonl", out / "annotations.jsonl",
                 out / "traits.csv"):
        run.add_output(path)
    _write_stage(run, out, "simulate")
    print(f"wrote {len(plist)} patches, {len(tasks)} tasks, "
          f"{len(records)} annotation records to {out}")
    return 0


# ---------------------------------------------------------------------------
# aggregate: annotation log -> aggregated votes + convergence curve
# ---------------------------------------------------------------------------

def _write_votes_csv(path: Path, cats: np.ndarray, s: np.ndarray) -> None:
    with atomic_write(path) as fh:
        k = s.shape[1]
        fh.write("category," + ",".join(f"s{i + 1:02d}" for i in range(k)) + "\n")
        for c, row in zip(cats, s):
            fh.write(str(int(c)) + "," + ",".join(str(int(v)) for v in row) + "\n")


def _read_votes_csv(path: Path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if len(lines) < 2:
        raise InputError(f"{path}: no aggregated vote rows")
    rows = []
    cats = []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        try:
            cats.append(int(parts[0]))
            rows.append([int(v) for v in parts[1:]])
        except ValueError as exc:
            raise InputError(f"{path}:{lineno}: bad vote row: {exc}") from exc
    return np.array(cats), np.array(rows, dtype=float)


def cmd_aggregate(args) -> int:
    seed = _seed(args)
    out = _data_dir(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run = StageRun("aggregate", _args_config(args) | {"seed": seed}, seed)
    run.add_input(args.tasks)
    run.add_input(args.log)

    tasks = perception.read_task_pool(args.tasks)
    records = perception.read_annotation_log(args.log)
    cats, s = perception.aggregate_log(tasks, records, quorum=args.quorum,
                                       min_agree=args.min_agree)
    _write_votes_csv(out / "votes.csv", cats, s)

    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(cats))
    checkpoints = [n for n in args.checkpoints if n <= len(cats)]
    curve = perception.convergence_curve(cats[perm], s[perm], checkpoints)
    with atomic_write(out / "convergence.csv") as fh:
        fh.write("n,relative_frobenius\n")
        for n, v in curve:
            fh.write(f"{n},{v!r}\n")
    save_curve(out / "convergence.png", [n for n, _ in curve],
               [v for _, v in curve], "records used",
               "relative Frobenius difference",
               title="distance matrix convergence")
    run.add_output(out / "votes.csv")
    run.add_output(out / "convergence.csv")
    _write_stage(run, out, "aggregate")
    print(f"aggregated {len(cats)} tasks -> {out / 'votes.csv'}")
    return 0


# ---------------------------------------------------------------------------
# distances: aggregated votes -> distance matrix CSV + heatmap
# ---------------------------------------------------------------------------

def cmd_distances(args) -> int:
    seed = _seed(args)
    out = _data_dir(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run = StageRun("distances", _args_config(args) | {"seed": seed}, seed)
    run.add_input(args.votes)

    cats, s = _read_votes_csv(Path(args.votes))
    protos = perception.category_prototypes(cats, s)
    names = args.names.split(",") if args.names else None
    dm = perception.distance_matrix(protos, names=names)
    atomic_move(lambda p: perception.write_distance_csv(p, dm),
                out / "distances.csv")
    save_matrix_heatmap(out / "distances.png", dm.values, labels=dm.names,
                        title="perceptual distance matrix")
    run.add_output(out / "distances.csv")
    _write_stage(run, out, "distances")
    print(f"wrote {dm.num_categories}x{dm.num_categories} distance matrix")
    return 0


# ---------------------------------------------------------------------------
# embed: distance matrix -> category-attribute matrix
# ---------------------------------------------------------------------------

def cmd_embed(args) -> int:
    seed = _seed(args)
    out = _data_dir(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run = StageRun("embed", _args_config(args) | {"seed": seed}, seed)
    run.add_input(args.distances)

    dm = perception.read_distance_csv(args.distances)
    cfg = attrspace.AttrSpaceConfig(
        n_attributes=args.attributes, weight=args.weight,
        max_iter=args.max_iter, seed=seed, method=args.method,
    )
    kde_cfg = attrspace.KdeConfig(bandwidth=args.bandwidth)
    mat, trace = attrspace.optimize_A(dm, cfg, kde_cfg)
    attrspace.write_attribute_matrix(
        out / "attributes.csv", mat,
        config={"weight": cfg.weight, "seed": seed, "method": cfg.method,
                "bandwidth": args.bandwidth},
    )
    save_curve(out / "embed-objective.png", range(len(trace)), trace,
               "iteration", "objective", title="embedding objective",
               logy=True)
    save_matrix_heatmap(out / "attributes.png", mat.values,
                        title="category-attribute matrix", annotate=False)
    run.add_output(out / "attributes.csv")
    _write_stage(run, out, "embed")
    final_stress = attrspace.stress(mat.values, dm.values)
    print(f"embedded K={mat.num_categories} into M={mat.num_attributes} "
          f"attributes; final stress {final_stress:.6f}")
    return 0


# ---------------------------------------------------------------------------
# extract: dataset -> feature file
# ---------------------------------------------------------------------------

def cmd_extract(args) -> int:
    out = _data_dir(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run = StageRun("extract", _args_config(args), None)
    run.add_input(args.dataset)

    ds = patches.load_dataset(args.dataset)
    fs = features.extract_set(ds.patches)
    atomic_move(lambda p: features.write_features(p, fs), out / "features.bin")
    if args.csv:
        atomic_move(lambda p: features.write_features_csv(p, fs),
                    out / "features.csv")
        run.add_output(out / "features.csv")
    run.add_output(out / "features.bin")
    _write_stage(run, out, "extract")
    print(f"extracted {len(fs.ids)} x {fs.values.shape[1]} features")
    return 0


def _dataset_categories(ds: patches.PatchDataset,
                        ids: list[str]) -> np.ndarray:
    cat_of = {p.id: p.category for p in ds.patches}
    missing = [i for i in ids if i not in cat_of]
    if missing:
        raise InputError(f"feature ids missing from dataset: {missing[:3]}")
    return np.array([cat_of[i] for i in ids], dtype=int)


# ---------------------------------------------------------------------------
# train: features + dataset labels + A -> two-layer model
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    seed = _seed(args)
    out = _data_dir(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run = StageRun("train", _args_config(args) | {"seed": seed}, seed)
    for p in (args.features, args.dataset, args.attributes):
        run.add_input(p)

    fs = features.read_features(args.features)
    ds = patches.load_dataset(args.dataset)
    cats = _dataset_categories(ds, fs.ids)
    amat = attrspace.read_attribute_matrix(args.attributes)
    cfg = attrmodel.TrainConfig(
        hidden=args.hidden, epochs=args.epochs, seed=seed,
        batch_size=args.batch_size, learning_rate=args.learning_rate,
        w1=args.w1, w2=args.w2, mask_fraction=args.mask_fraction,
    )
    model, trace = attrmodel.train(fs.values, cats, amat.values, cfg)
    atomic_move(
        lambda p: attrmodel.save_model(p, model, config=vars(cfg), seed=seed),
        out / "model.json",
    )
    if trace:
        save_trace(out / "train-loss.png", trace,
                   ["total", "unary", "distribution"], title="training loss")
    run.add_output(out / "model.json")
    _write_stage(run, out, "train")
    print(f"trained model D={model.input_dim} H={model.hidden_dim} "
          f"M={model.output_dim} over {len(trace)} epochs")
    return 0


# ---------------------------------------------------------------------------
# mac: dataset + A -> multi-level extractor bundle
# ---------------------------------------------------------------------------

def cmd_mac(args) -> int:
    seed = _seed(args)
    out = _data_dir(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run = StageRun("mac", _args_config(args) | {"seed": seed}, seed)
    run.add_input(args.dataset)
    run.add_input(args.attributes)

    ds = patches.load_dataset(args.dataset)
    amat = attrspace.read_attribute_matrix(args.attributes)
    sides = {p.side for p in ds.patches}
    if len(sides) != 1:
        raise ShapeError(f"mixed patch sides {sorted(sides)}")
    side = sides.pop()
    pixels = np.stack([p.pixels for p in ds.patches])
    cats = ds.categories()
    cfg = macheads.MacConfig(
        patch_side=side, epochs=args.epochs, seed=seed,
        batch_size=args.batch_size, learning_rate=args.learning_rate,
        u_weight=args.u_weight, d_weight=args.d_weight,
        attribute_heads=not args.no_heads,
    )
    extractor, heads, trace = macheads.train_mac(
        pixels, cats, amat.values if not args.no_heads else None, cfg
    )
    atomic_move(
        lambda p: macheads.save_bundle(p, extractor, heads,
                                       config={"seed": seed}),
        out / "mac.json",
    )
    if trace:
        keys = ["ce"] if args.no_heads else ["ce", "u1", "u2", "u3", "u_final"]
        save_trace(out / "mac-loss.png", trace, keys, title="mac training loss")
    run.add_output(out / "mac.json")
    _write_stage(run, out, "mac")
    print(f"trained mac bundle on {len(cats)} patches ({len(trace)} epochs)")
    return 0


# ---------------------------------------------------------------------------
# classify: regions + model -> attribute histograms + HIK SVM report
# ---------------------------------------------------------------------------

def _predict_for_patches(model_path: str, plist: list[patches.Patch]) -> np.ndarray:
    model = attrmodel.load_model(model_path)
    fs = features.extract_set(plist)
    order = {pid: i for i, pid in enumerate(fs.ids)}
    preds = attrmodel.predict(model, fs.values)
    # restore caller order
    return np.stack([preds[order[p.id]] for p in plist])


def cmd_classify(args) -> int:
    seed = _seed(args)
    out = _data_dir(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run = StageRun("classify", _args_config(args) | {"seed": seed}, seed)
    run.add_input(args.regions)
    run.add_input(args.model)

    ds = patches.load_dataset(args.regions)
    rng = np.random.default_rng(seed)
    hists = []
    labels = []
    region_ids = []
    for region in ds.patches:
        sampled = patches.sample_patches(
            region.pixels, args.patches_per_region, args.patch_side, rng,
            prefix=region.id, category=region.category,
        )
        preds = _predict_for_patches(args.model, sampled)
        hists.append(matclass.region_histogram(preds, bins=args.bins,
                                               region_id=region.id).values)
        labels.append(region.category)
        region_ids.append(region.id)
    hists = np.stack(hists)
    labels = np.array(labels)

    train_mask = np.zeros(len(labels), dtype=bool)
    for cat in np.unique(labels):
        idx = np.flatnonzero(labels == cat)
        n_train = max(1, int(round(args.train_fraction * idx.size)))
        train_mask[idx[:n_train]] = True
    preds, report = matclass.fit_predict_material(
        hists[train_mask], labels[train_mask], hists[~train_mask],
        labels[~train_mask], c=args.svm_c, seed=seed,
    )
    with atomic_write(out / "classify.csv") as fh:
        fh.write("region_id,label,predicted,split\n")
        test_ids = np.array(region_ids)[~train_mask]
        test_labels = labels[~train_mask]
        for rid, lab, pred in zip(test_ids, test_labels, preds):
            fh.write(f"{rid},{lab},{pred},test\n")
    with atomic_write(out / "classify-report.json") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")

    k = int(labels.max())
    confusion = np.zeros((k, k))
    for lab, pred in zip(labels[~train_mask], preds):
        confusion[lab - 1, pred - 1] += 1
    save_matrix_heatmap(out / "confusion.png", confusion,
                        labels=ds.category_names,
                        title=f"accuracy {report.get('accuracy', 0):.3f}")
    run.add_output(out / "classify.csv")
    run.add_output(out / "classify-report.json")
    _write_stage(run, out, "classify")
    print(f"classified {int((~train_mask).sum())} regions; "
          f"accuracy {report.get('accuracy')}")
    return 0


# ---------------------------------------------------------------------------
# maps: image + model -> per-pixel attribute planes
# ---------------------------------------------------------------------------

def cmd_maps(args) -> int:
    seed = _seed(args)
    out = _data_dir(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run = StageRun("maps", _args_config(args) | {"seed": seed}, seed)
    run.add_input(args.image)
    run.add_input(args.model)

    from PIL import Image

    img = np.asarray(Image.open(args.image).convert("RGB"), dtype=float) / 255.0
    model = attrmodel.load_model(args.model)

    def predict_fn(windows):
        plist = [
            patches.Patch(id=f"w{i:05d}", source_image="window",
                          bbox=(0, 0, windows.shape[1], windows.shape[1]),
                          category=1, pixels=win)
            for i, win in enumerate(windows)
        ]
        fs = features.extract_set(plist)
        return attrmodel.predict(model, fs.values)

    amap = matclass.sliding_window_maps(
        img, predict_fn, patch_side=args.patch_side, stride=args.stride,
        image_id=Path(args.image).stem,
    )
    matclass.save_map(out / "attributes.f32", amap)
    matclass.export_map_pngs(out / "plane", amap)
    save_plane_grid(out / "maps.png", amap.planes,
                    title=f"per-pixel attribute probabilities ({amap.image_id})")

    if args.trees:
        run.add_input(args.trees)
        trees = logicreg.load_trees(args.trees)
        planes = logicreg.trait_maps(amap.planes, list(trees.values()),
                                     threshold=args.threshold)
        tmap = matclass.AttributeMap(image_id=amap.image_id, planes=planes,
                                     stride=amap.stride,
                                     patch_side=amap.patch_side)
        matclass.save_map(out / "traits.f32", tmap)
        save_plane_grid(out / "trait-maps.png", planes,
                        names=list(trees.keys()),
                        title="per-pixel trait probabilities")
        run.add_output(out / "traits.f32")
    run.add_output(out / "attributes.f32")
    _write_stage(run, out, "maps")
    print(f"wrote {amap.num_planes} attribute planes "
          f"({amap.planes.shape[2]}x{amap.planes.shape[1]})")
    return 0


# ---------------------------------------------------------------------------
# logicfit: model predictions + trait labels -> boolean trees
# ---------------------------------------------------------------------------

def cmd_logicfit(args) -> int:
    seed = _seed(args)
    out = _data_dir(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run = StageRun("logicfit", _args_config(args) | {"seed": seed}, seed)
    for p in (args.dataset, args.model, args.traits):
        run.add_input(p)

    ds = patches.load_dataset(args.dataset)
    preds = _predict_for_patches(args.model, ds.patches)
    binarized = logicreg.binarize(preds, threshold=args.threshold)

    trait_rows: dict[str, dict[str, int]] = {}
    with open(args.traits, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        if header[0] != "id":
            raise InputError(f"{args.traits}: first column must be 'id'")
        trait_names = header[1:]
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != len(header):
                raise InputError(f"{args.traits}:{lineno}: column count mismatch")
            trait_rows[parts[0]] = {
                name: int(v) for name, v in zip(trait_names, parts[1:])
            }
    missing = [p.id for p in ds.patches if p.id not in trait_rows]
    if missing:
        raise InputError(f"traits file lacks rows for: {missing[:3]}")

    results = {}
    for t_idx, name in enumerate(trait_names):
        y = np.array([trait_rows[p.id][name] for p in ds.patches], dtype=np.uint8)
        cfg = logicreg.LogicFitConfig(max_depth=args.max_depth,
                                      seed=seed + t_idx, method=args.method)
        results[name] = logicreg.fit_tree(binarized, y, cfg)
    atomic_move(lambda p: logicreg.save_trees(p, results), out / "trees.json")
    with atomic_write(out / "logicfit.csv") as fh:
        fh.write("trait,accuracy,constant\n")
        for name, res in results.items():
            fh.write(f"{name},{res.accuracy!r},{int(res.constant)}\n")
    save_curve(out / "logicfit.png", range(len(results)),
               [r.accuracy for r in results.values()], "trait index",
               "training accuracy", title="logic regression accuracy")
    run.add_output(out / "trees.json")
    run.add_output(out / "logicfit.csv")
    _write_stage(run, out, "logicfit")
    print(f"fit {len(results)} trait trees; accuracies "
          f"{[round(r.accuracy, 3) for r in results.values()]}")
    return 0


# ---------------------------------------------------------------------------
# oneshot: held-out-category curves over attribute/material features
# ---------------------------------------------------------------------------

def cmd_oneshot(args) -> int:
    seed = _seed(args)
    out = _data_dir(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run = StageRun("oneshot", _args_config(args) | {"seed": seed}, seed)
    run.add_input(args.dataset)

    ds = patches.load_dataset(args.dataset)
    amat = attrspace.read_attribute_matrix(args.attributes) if args.attributes \
        else None
    if amat is None:
        raise InputError("--attributes is required")
    run.add_input(args.attributes)

    shot_counts = [int(v) for v in args.shots.split(",")]
    curves, images_per_cat = _run_oneshot(
        ds, amat.values, args.heldout, shot_counts, seed,
        epochs=args.epochs, repeats=args.repeats,
    )
    with atomic_write(out / "oneshot.csv") as fh:
        names = list(curves.keys())
        fh.write("shots," + ",".join(names) + "\n")
        for i, n in enumerate(shot_counts):
            fh.write(str(n) + "," + ",".join(repr(curves[m][i]) for m in names) + "\n")
    save_shot_curves(out / "oneshot.png", shot_counts, curves,
                     title=f"novel category {args.heldout} "
                           f"({images_per_cat} images/cat)")
    run.add_output(out / "oneshot.csv")
    _write_stage(run, out, "oneshot")
    print(f"one-shot curves: {json.dumps(curves)}")
    return 0


def _run_oneshot(ds: patches.PatchDataset, amat: np.ndarray, heldout: int,
                 shot_counts: list[int], seed: int, epochs: int = 100,
                 repeats: int = 5):
    """Train the mac bundle with one category held out, then build
    per-image attribute/material features and evaluate detection curves.

    The negative pool uses unseen examples of the training categories:
    each seen category is split 70/30 into mac-training and evaluation
    images; the held-out category goes entirely to evaluation.
    """
    sides = {p.side for p in ds.patches}
    side = sides.pop()
    k = ds.num_categories
    if not 1 <= heldout <= k:
        raise InputError(f"held-out category {heldout} outside 1..{k}")

    rng = np.random.default_rng([seed, 101])
    train_ids = set()
    for cat in range(1, k + 1):
        if cat == heldout:
            continue
        members = sorted(p.id for p in ds.patches if p.category == cat)
        order = rng.permutation(len(members))
        n_train = max(1, int(round(0.7 * len(members))))
        train_ids.update(members[i] for i in order[:n_train])

    seen = [p for p in ds.patches if p.id in train_ids]
    remap = {c: i + 1 for i, c in enumerate(
        sorted({p.category for p in seen})
    )}
    pixels = np.stack([p.pixels for p in seen])
    cats = np.array([remap[p.category] for p in seen])
    reduced_amat = np.delete(amat, heldout - 1, axis=0)

    cfg = macheads.MacConfig(patch_side=side, epochs=epochs, seed=seed,
                             learning_rate=0.005, u_weight=2.0,
                             clip_norm=2.0, lr_patience=8)
    extractor, heads, _ = macheads.train_mac(pixels, cats, reduced_amat, cfg)

    evaluation = [p for p in ds.patches if p.id not in train_ids]
    eval_pixels = np.stack([p.pixels for p in evaluation])
    attrs = macheads.mac_attributes(extractor, heads, eval_pixels)
    mats = macheads.mac_category_probs(extractor, eval_pixels)
    feats = {
        "attributes": attrs,
        "materials": mats,
        "both": np.hstack([attrs, mats]),
    }
    image_cats = np.array([p.category for p in evaluation])
    curves = matclass.one_shot_eval(feats, image_cats, heldout,
                                    shot_counts, seed=seed, repeats=repeats)
    return curves, int((image_cats == heldout).sum())


# ---------------------------------------------------------------------------
# serve: annotation backend
# ---------------------------------------------------------------------------

def cmd_serve(args) -> int:
    from .server import AnnotationServer

    data_dir = _data_dir(args.data)
    tasks = perception.read_task_pool(args.tasks)
    missing = [
        t.task_id for t in tasks
        if not (data_dir / "images" / f"{t.reference_patch}.png").exists()
    ]
    if missing:
        raise InputError(
            f"task pool references missing images, e.g. {missing[:3]}"
        )
    server = AnnotationServer(
        tasks, data_dir=data_dir, log_path=args.log, port=args.port,
        ui_dir=args.ui_dir, votes_per_task=args.votes_per_task,
    )
    print(f"serving {len(tasks)} tasks on http://127.0.0.1:{server.port} "
          f"(log: {args.log})")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        server.shutdown()
    return 0


# ---------------------------------------------------------------------------
# argument wiring
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="matattr",
        description="material attribute discovery pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="synthetic dataset + annotation oracle")
    p.add_argument("--out", default=None)
    p.add_argument("--categories", type=int, default=4)
    p.add_argument("--per-category", type=int, default=50)
    p.add_argument("--patch-side", type=int, default=32)
    p.add_argument("--tasks", type=int, default=2000)
    p.add_argument("--annotators", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("aggregate", help="vote aggregation + convergence")
    p.add_argument("--tasks", required=True)
    p.add_argument("--log", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--quorum", type=int, default=perception.DEFAULT_QUORUM)
    p.add_argument("--min-agree", type=int, default=perception.DEFAULT_MIN_AGREE)
    p.add_argument("--checkpoints", type=int, nargs="+",
                   default=[100, 500, 1000, 5000])
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_aggregate)

    p = sub.add_parser("distances", help="prototypes -> distance matrix")
    p.add_argument("--votes", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--names", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_distances)

    p = sub.add_parser("embed", help="distance matrix -> attribute matrix")
    p.add_argument("--distances", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--attributes", type=int, default=30, dest="attributes")
    p.add_argument("--weight", type=float, default=0.1)
    p.add_argument("--bandwidth", type=float, default=0.05)
    p.add_argument("--max-iter", type=int, default=1000)
    p.add_argument("--method", choices=["projgrad", "lbfgsb"],
                   default="projgrad")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("extract", help="dataset -> feature file")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--csv", action="store_true")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train", help="train the two-layer attribute model")
    p.add_argument("--features", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--attributes", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--learning-rate", type=float, default=0.03)
    p.add_argument("--w1", type=float, default=1e-3)
    p.add_argument("--w2", type=float, default=1e-5)
    p.add_argument("--mask-fraction", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("mac", help="train the multi-level extractor + heads")
    p.add_argument("--dataset", required=True)
    p.add_argument("--attributes", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--epochs", type=int, default=80)
    p.add_argument("--batch-size", type=int, default=48)
    p.add_argument("--learning-rate", type=float, default=0.005)
    p.add_argument("--u-weight", type=float, default=2.0)
    p.add_argument("--d-weight", type=float, default=1e-3)
    p.add_argument("--no-heads", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_mac)

    p = sub.add_parser("classify", help="attribute-histogram material SVM")
    p.add_argument("--regions", required=True,
                   help="dataset index of region images")
    p.add_argument("--model", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--patches-per-region", type=int, default=60)
    p.add_argument("--patch-side", type=int, default=32)
    p.add_argument("--bins", type=int, default=10)
    p.add_argument("--train-fraction", type=float, default=0.6)
    p.add_argument("--svm-c", type=float, default=10.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("maps", help="per-pixel attribute (and trait) maps")
    p.add_argument("--image", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--patch-side", type=int, default=32)
    p.add_argument("--stride", type=int, default=8)
    p.add_argument("--trees", default=None)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_maps)

    p = sub.add_parser("logicfit", help="boolean trees from attributes to traits")
    p.add_argument("--dataset", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--traits", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--max-depth", type=int, default=3)
    p.add_argument("--method", choices=["auto", "anneal", "exhaustive"],
                   default="auto")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_logicfit)

    p = sub.add_parser("oneshot", help="held-out-category detection curves")
    p.add_argument("--dataset", required=True)
    p.add_argument("--attributes", required=True)
    p.add_argument("--heldout", type=int, required=True)
    p.add_argument("--shots", default="1,2,5,10,20,50")
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_oneshot)

    p = sub.add_parser("serve", help="annotation task server")
    p.add_argument("--tasks", required=True)
    p.add_argument("--data", default=None, help="dataset dir with images/")
    p.add_argument("--log", required=True)
    p.add_argument("--port", type=int, default=8765)
    p.add_argument("--ui-dir", default=None)
    p.add_argument("--votes-per-task", type=int, default=1)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ShapeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
