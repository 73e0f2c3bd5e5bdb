"""Command-line entry point: gen | train | eval | suite | inspect | export-heatmap.

Every subcommand reads a flat JSON config (unknown keys are hard errors so a
typo cannot silently change an ablation) and writes its artifacts under
--out. All randomness flows from the single run seed recorded in every
output file. Exit codes: 0 ok, 1 usage or config error, 2 unsupported data.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .data import (
    DatasetError,
    Kind,
    NoiseFlag,
    SynthConfig,
    load_dataset_dir,
    load_test_jsonl,
    synth_generate,
    write_jsonl,
)
from .evaluate import accuracy, noise_auc, run_suite
from .memory import from_snapshot, snapshot
from .model import encode, model_from_snapshot, model_snapshot
from .trainer import (
    ABLATION_NAMES,
    TrainConfig,
    TrainingDiverged,
    apply_ablation,
    predict_with_model,
    train,
)


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


_SYNTH_KEYS = {f.name for f in fields(SynthConfig)}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)}


def _load_config(path: str, allowed: set[str], required: set[str]) -> dict:
    p = Path(path)
    if not p.exists():
        raise CliError(1, f"config file not found: {path}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise CliError(1, f"{path}: invalid JSON ({exc.msg})")
    if not isinstance(data, dict):
        raise CliError(1, f"{path}: config must be a JSON object")
    unknown = set(data) - allowed
    if unknown:
        raise CliError(1, f"{path}: unknown config keys {sorted(unknown)}")
    missing = required - set(data)
    if missing:
        raise CliError(1, f"{path}: missing config keys {sorted(missing)}")
    return data


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen(args) -> int:
    raw = _load_config(args.config, _SYNTH_KEYS, set())
    if args.seed is not None:
        raw["seed"] = args.seed
    cfg = SynthConfig(**raw)
    dataset = synth_generate(cfg)
    out = _out_dir(args)
    counts = write_jsonl(dataset, out)

    n_imgs = n_noisy = 0
    for bag in dataset.bags:
        for inst in bag.instances:
            if inst.kind is Kind.IMAGE:
                n_imgs += 1
                if inst.noise_flag is NoiseFlag.LABEL_NOISE:
                    n_noisy += 1
    print(f"wrote {out}/train.jsonl test.jsonl flags.json")
    print(
        f"classes={cfg.C} images={counts['images']} "
        f"proposals={counts['proposals']} test_images={counts['test_images']}"
    )
    print(
        f"label-noise images: {n_noisy}/{n_imgs} ({100.0 * n_noisy / n_imgs:.1f}%)"
    )
    return 0


def _train_config(args) -> tuple[TrainConfig, str]:
    raw = _load_config(
        args.config, _TRAIN_KEYS | {"dataset_dir"}, {"dataset_dir"}
    )
    dataset_dir = raw.pop("dataset_dir")
    if args.seed is not None:
        raw["seed"] = args.seed
    try:
        cfg = TrainConfig(**raw)
    except ValueError as exc:
        raise CliError(1, f"{args.config}: {exc}")
    if args.ablation:
        cfg = apply_ablation(cfg, args.ablation)
    return cfg, dataset_dir


def _final_weights_doc(state) -> list[dict]:
    return [
        {
            "label": int(bag.label),
            "ids": [inst.instance_id for inst in bag.instances],
            "weights": [float(v) for v in w],
        }
        for bag, w in zip(state.work.bags, state.weights)
    ]


def cmd_train(args) -> int:
    cfg, dataset_dir = _train_config(args)
    dataset = load_dataset_dir(dataset_dir, n_g=cfg.n_g, seed=cfg.seed)
    out = _out_dir(args)
    try:
        state, report = train(dataset, cfg)
    except TrainingDiverged as exc:
        (out / "diagnostic.json").write_text(json.dumps(exc.snapshot, indent=2))
        raise CliError(1, f"training diverged: {exc}")
    (out / "model.json").write_text(json.dumps(model_snapshot(state.model)))
    (out / "memory.json").write_text(json.dumps(snapshot(state.memory)))
    (out / "run_report.json").write_text(json.dumps(report.to_dict(), indent=2))
    (out / "final_weights.json").write_text(
        json.dumps(_final_weights_doc(state))
    )
    auc = "n/a" if report.noise_auc is None else f"{report.noise_auc:.4f}"
    top1 = "n/a" if report.test_top1 is None else f"{report.test_top1:.4f}"
    print(f"run {report.run_id}: top1={top1} noise_auc={auc}")
    return 0


def _recomputed_auc(run_dir: Path, dataset_dir: Path) -> float | None:
    weights_path = run_dir / "final_weights.json"
    flags_path = dataset_dir / "flags.json"
    if not weights_path.exists() or not flags_path.exists():
        return None
    flags = json.loads(flags_path.read_text())
    scores, clean = [], []
    for entry in json.loads(weights_path.read_text()):
        for inst_id, w in zip(entry["ids"], entry["weights"]):
            if inst_id in flags:
                scores.append(w)
                clean.append(flags[inst_id] == NoiseFlag.CLEAN.value)
    if not scores or len(set(clean)) < 2:
        return None
    return noise_auc(np.array(scores), np.array(clean))


def cmd_eval(args) -> int:
    raw = _load_config(args.config, {"dataset_dir", "run_dir"}, {"dataset_dir", "run_dir"})
    run_dir = Path(raw["run_dir"])
    dataset_dir = Path(raw["dataset_dir"])
    model_path = run_dir / "model.json"
    if not model_path.exists():
        raise CliError(1, f"missing model checkpoint: {model_path}")
    model = model_from_snapshot(json.loads(model_path.read_text()))
    test = load_test_jsonl(dataset_dir / "test.jsonl")
    preds = predict_with_model(model, test)
    labels = np.array([y for _, y in test])
    num_classes = model.num_classes
    per_class = [
        float(np.mean(preds[labels == c] == c)) if np.any(labels == c) else 0.0
        for c in range(num_classes)
    ]
    report = {
        "top1": accuracy(preds, labels),
        "per_class_accuracy": per_class,
        "noise_auc": _recomputed_auc(run_dir, dataset_dir),
        "num_test": len(test),
        "predictions": [int(v) for v in preds],
        "run_dir": str(run_dir),
    }
    out = _out_dir(args)
    (out / "eval_report.json").write_text(json.dumps(report, indent=2))
    print(f"top1={report['top1']:.4f} on {len(test)} test images")
    return 0


def cmd_suite(args) -> int:
    raw = _load_config(
        args.config,
        _TRAIN_KEYS | {"dataset_dir", "num_seeds"},
        {"dataset_dir"},
    )
    num_seeds = int(raw.pop("num_seeds", 5))
    dataset_dir = raw.pop("dataset_dir")
    if args.seed is not None:
        raw["seed"] = args.seed
    cfg = TrainConfig(**raw)
    dataset = load_dataset_dir(dataset_dir, n_g=cfg.n_g, seed=cfg.seed)
    seeds = [cfg.seed + i for i in range(num_seeds)]
    result = run_suite(dataset, cfg, seeds=seeds)
    out = _out_dir(args)
    result.write_csv(out / "suite.csv")
    result.write_json(out / "suite.json")
    for row in result.rows:
        auc = "n/a" if row.noise_auc is None else f"{row.noise_auc:.4f}"
        print(
            f"{row.name:<12} top1={row.top1:.4f} auc={auc} "
            f"dead_keys={row.dead_key_fraction:.4f}"
        )
    return 0


def cmd_inspect(args) -> int:
    raw = _load_config(
        args.config,
        {"memory_path", "category", "k", "dataset_dir", "model_path"},
        {"memory_path", "category", "k"},
    )
    mem_path = Path(raw["memory_path"])
    if not mem_path.exists():
        raise CliError(1, f"missing memory checkpoint: {mem_path}")
    memory = from_snapshot(json.loads(mem_path.read_text()))
    y = int(raw["category"])
    if not 0 <= y < memory.num_classes:
        raise CliError(
            1, f"unknown category {y}; memory has {memory.num_classes} classes"
        )
    k = int(raw["k"])
    if k > memory.num_slots:
        print(
            f"warning: k={k} clamped to L={memory.num_slots}", file=sys.stderr
        )
        k = memory.num_slots

    model = None
    if raw.get("model_path"):
        model = model_from_snapshot(json.loads(Path(raw["model_path"]).read_text()))

    s_row = memory.D[y] * memory.R[y]
    top = np.argsort(-s_row, kind="stable")[:k]

    nearest: dict[int, list[str]] = {}
    if raw.get("dataset_dir"):
        ds = load_dataset_dir(raw["dataset_dir"], n_g=1, seed=0)
        ids, feats = [], []
        for bag in ds.bags:
            for inst in bag.instances:
                ids.append(inst.instance_id)
                feats.append(inst.feature)
        X = np.stack(feats)
        if model is not None:
            X = encode(model, X)
        Xn = X / np.linalg.norm(X, axis=1, keepdims=True)
        Kn = memory.K / np.linalg.norm(memory.K, axis=0, keepdims=True)
        sims = Xn @ Kn
        for z in top:
            best = np.argsort(-sims[:, z], kind="stable")[:5]
            nearest[int(z)] = [ids[i] for i in best]

    slots = []
    for z in top:
        z = int(z)
        slots.append(
            {
                "slot": z,
                "grid": [z // memory.grid_w, z % memory.grid_w],
                "d_score": float(memory.D[y, z]),
                "r_score": float(memory.R[y, z]),
                "s_score": float(s_row[z]),
                "category_distribution": [float(v) for v in memory.D[:, z]],
                "nearest": nearest.get(z, []),
            }
        )
    doc = {"category": y, "slots": slots}
    out = _out_dir(args)
    (out / "inspect.json").write_text(json.dumps(doc, indent=2))
    best = slots[0]
    print(
        f"category {y}: best slot {best['slot']} "
        f"d={best['d_score']:.3f} r={best['r_score']:.3f} s={best['s_score']:.3f}"
    )
    return 0


def _heatmap_grids(
    entries: list[tuple[str, tuple, float]],
    image_boxes: dict[str, tuple | None],
    raster: int,
) -> dict[str, np.ndarray]:
    """Accumulate ROI weights over boxes, one raster per parent image."""
    grids: dict[str, np.ndarray] = {}
    for image_id, img_box in image_boxes.items():
        boxes = [(b, w) for pid, b, w in entries if pid == image_id]
        if img_box is not None:
            x0, y0, bw, bh = img_box
            extent = (x0, y0, x0 + bw, y0 + bh)
        else:
            xs0 = min(b[0] for b, _ in boxes)
            ys0 = min(b[1] for b, _ in boxes)
            xs1 = max(b[0] + b[2] for b, _ in boxes)
            ys1 = max(b[1] + b[3] for b, _ in boxes)
            extent = (xs0, ys0, xs1, ys1)
        grid = np.zeros((raster, raster))
        ex0, ey0, ex1, ey1 = extent
        cw = (ex1 - ex0) / raster
        ch = (ey1 - ey0) / raster
        for (bx, by, bw, bh), w in boxes:
            for i in range(raster):
                cy = ey0 + (i + 0.5) * ch
                if not (by <= cy < by + bh):
                    continue
                for j in range(raster):
                    cx = ex0 + (j + 0.5) * cw
                    if bx <= cx < bx + bw:
                        grid[i, j] += w
        grids[image_id] = grid
    return grids


def cmd_export_heatmap(args) -> int:
    raw = _load_config(
        args.config,
        {"run_dir", "dataset_dir", "bag_index", "raster"},
        {"run_dir", "dataset_dir", "bag_index"},
    )
    raster = int(raw.get("raster", 32))
    run_dir = Path(raw["run_dir"])
    weights_path = run_dir / "final_weights.json"
    if not weights_path.exists():
        raise CliError(1, f"missing weights file: {weights_path}")
    bags = json.loads(weights_path.read_text())
    bag_index = int(raw["bag_index"])
    if not 0 <= bag_index < len(bags):
        raise CliError(1, f"bag_index {bag_index} out of range (0..{len(bags)-1})")
    entry = bags[bag_index]

    records: dict[str, dict] = {}
    with open(Path(raw["dataset_dir"]) / "train.jsonl") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                records[rec["id"]] = rec

    entries = []  # (parent image id, box, weight)
    image_boxes: dict[str, tuple | None] = {}
    for inst_id, w in zip(entry["ids"], entry["weights"]):
        rec = records.get(inst_id)
        if rec is None:
            raise CliError(1, f"instance {inst_id} not found in dataset")
        if rec["bbox"] is None:
            raise CliError(
                2, "synthetic data has no geometry (bbox missing); "
                "heatmap export needs ingested boxes",
            )
        if rec["kind"] == "image":
            image_boxes[inst_id] = tuple(rec["bbox"])
            entries.append((inst_id, tuple(rec["bbox"]), float(w)))
        else:
            entries.append((rec["parent"], tuple(rec["bbox"]), float(w)))
            image_boxes.setdefault(rec["parent"], None)

    grids = _heatmap_grids(entries, image_boxes, raster)
    out = _out_dir(args)
    with open(out / "heatmap.csv", "w") as fh:
        fh.write("image_id,row,col,value\n")
        for image_id, grid in grids.items():
            for i in range(raster):
                for j in range(raster):
                    fh.write(f"{image_id},{i},{j},{grid[i, j]:.9g}\n")
    with open(out / "heatmap_hist.csv", "w") as fh:
        fh.write("image_id,bin_left,bin_right,count\n")
        for image_id, grid in grids.items():
            top = max(float(grid.max()), 1e-12)
            counts, edges = np.histogram(grid.ravel(), bins=20, range=(0.0, top))
            for c, lo, hi in zip(counts, edges[:-1], edges[1:]):
                fh.write(f"{image_id},{lo:.9g},{hi:.9g},{int(c)}\n")
    print(f"wrote heatmaps for {len(grids)} images to {out}/heatmap.csv")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sombag",
        description="Noise-robust bag training with a self-organizing memory",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {
        "gen": cmd_gen,
        "train": cmd_train,
        "eval": cmd_eval,
        "suite": cmd_suite,
        "inspect": cmd_inspect,
        "export-heatmap": cmd_export_heatmap,
    }
    for name, func in commands.items():
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="flat JSON config file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="seed override")
        if name in ("train", "suite"):
            p.add_argument(
                "--ablation",
                choices=ABLATION_NAMES,
                default=None,
                help="named variant to apply on top of the config",
            )
        p.set_defaults(func=func)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (DatasetError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
