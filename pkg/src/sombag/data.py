"""Instances, bags, datasets: ingestion, synthetic generation, initial weights.

An instance is one ROI (a whole image or one of its region proposals),
represented by a fixed-length feature vector. Bags group ``n_g`` same-label
images together with all their proposals, so every bag holds
``n_b = n_g * (n_p + 1)`` instances.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict
from enum import Enum
from pathlib import Path

import numpy as np


class DatasetError(ValueError):
    """Raised for malformed dataset files or invalid bag construction."""


class Kind(str, Enum):
    IMAGE = "image"
    PROPOSAL = "proposal"


class NoiseFlag(str, Enum):
    CLEAN = "clean"
    LABEL_NOISE = "label_noise"
    BACKGROUND_NOISE = "background_noise"


@dataclass
class Instance:
    """One ROI: feature vector plus bookkeeping.

    ``area`` is in raw area units (pixels squared for real proposals); it may
    be absent for synthetic images. Proposals must carry both ``area`` and
    ``parent_image_id``. ``noise_flag`` holds synthetic ground truth only.
    """

    instance_id: str
    feature: np.ndarray
    kind: Kind
    area: float | None = None
    parent_image_id: str | None = None
    noise_flag: NoiseFlag | None = None
    bbox: tuple[float, float, float, float] | None = None


@dataclass
class Bag:
    """Fixed-size group of instances sharing one category label."""

    instances: list[Instance]
    label: int
    weights: np.ndarray

    @property
    def size(self) -> int:
        return len(self.instances)


@dataclass
class ImageGroup:
    """An image together with its region proposals."""

    image: Instance
    proposals: list[Instance]


@dataclass
class Dataset:
    bags: list[Bag]
    test_images: list[tuple[np.ndarray, int]]
    num_classes: int
    feature_dim: int
    metadata: dict = field(default_factory=dict)


@dataclass
class SynthConfig:
    """Configuration for the synthetic webly-noisy generator."""

    C: int = 10
    d: int = 32
    images_per_class: int = 100
    n_g: int = 2
    n_p: int = 20
    label_noise_rate: float = 0.25
    background_proposal_rate: float = 0.5
    class_separation: float = 4.5
    seed: int = 0
    test_images_per_class: int | None = None

    def __post_init__(self):
        if self.C < 2:
            raise DatasetError(f"C must be >= 2, got {self.C}")
        if self.n_g < 1:
            raise DatasetError(f"n_g must be >= 1, got {self.n_g}")
        for name in ("label_noise_rate", "background_proposal_rate"):
            rate = getattr(self, name)
            if not 0.0 <= rate <= 1.0:
                raise DatasetError(f"{name} must be in [0, 1], got {rate}")


# Synthetic proposal jitter is this multiple of class_separation; proposals
# correlate with their source image without being exact copies.
JITTER_STD_FACTOR = 0.3

# Fraction of label-noise images drawn from the most similar other class
# (the rest come from a uniformly random other class). Crawled noise is
# dominated by related categories; fully uniform sources average out into
# damage a linear classifier barely notices.
NEAREST_CONFUSION = 0.4

AREA_LOW, AREA_HIGH = 1000.0, 10000.0


def init_weights(bag: Bag, n_g: int) -> np.ndarray:
    """Initial ROI weights: images uniform at 1/n_g, proposals zero."""
    w = np.zeros(bag.size)
    for i, inst in enumerate(bag.instances):
        if inst.kind is Kind.IMAGE:
            w[i] = 1.0 / n_g
    return w


def area_score(instance: Instance, bag: Bag) -> float:
    """Relative-size score in (0, 1].

    Images score 1. A proposal scores its area divided by the maximum area
    over all proposals of the same parent image present in the bag.
    """
    if instance.kind is Kind.IMAGE:
        return 1.0
    siblings = [
        inst.area
        for inst in bag.instances
        if inst.kind is Kind.PROPOSAL
        and inst.parent_image_id == instance.parent_image_id
    ]
    max_area = max(siblings)
    if max_area <= 0:
        raise DatasetError(
            f"proposal {instance.instance_id}: zero max sibling area"
        )
    return float(instance.area) / float(max_area)


def area_scores(bag: Bag) -> np.ndarray:
    """Vector of area scores for every instance in the bag."""
    max_by_parent: dict[str, float] = {}
    for inst in bag.instances:
        if inst.kind is Kind.PROPOSAL:
            prev = max_by_parent.get(inst.parent_image_id, 0.0)
            max_by_parent[inst.parent_image_id] = max(prev, float(inst.area))
    out = np.ones(bag.size)
    for i, inst in enumerate(bag.instances):
        if inst.kind is Kind.PROPOSAL:
            max_area = max_by_parent[inst.parent_image_id]
            if max_area <= 0:
                raise DatasetError(
                    f"proposal {inst.instance_id}: zero max sibling area"
                )
            out[i] = float(inst.area) / max_area
    return out


def _enforce_proposal_count(group: ImageGroup, n_p: int) -> list[Instance]:
    """Pad (duplicate largest-area) or truncate (drop smallest-area) to n_p."""
    props = sorted(group.proposals, key=lambda p: -float(p.area))
    if len(props) > n_p:
        props = props[:n_p]
    elif len(props) < n_p:
        if not props:
            raise DatasetError(
                f"image {group.image.instance_id} has no proposals to pad from"
            )
        props = props + [props[0]] * (n_p - len(props))
    return props


def build_bags(
    images_by_class: dict[int, list[ImageGroup]],
    n_g: int,
    n_p: int,
    seed: int = 0,
) -> list[Bag]:
    """Partition each class's images into bags of n_g images plus proposals.

    The partition is a seeded random shuffle within each class; leftover
    images (fewer than n_g) are dropped. Every image contributes exactly n_p
    proposals, padded or truncated by area. Each bag therefore holds
    ``n_g * (n_p + 1)`` instances with initial weights on the images.
    """
    rng = np.random.default_rng(seed)
    bags: list[Bag] = []
    for label in sorted(images_by_class):
        groups = images_by_class[label]
        if len(groups) < n_g:
            raise DatasetError(
                f"class {label} has {len(groups)} images, needs at least {n_g}"
            )
        order = rng.permutation(len(groups))
        n_full = len(groups) // n_g
        for b in range(n_full):
            chunk = [groups[i] for i in order[b * n_g : (b + 1) * n_g]]
            instances: list[Instance] = []
            for g in chunk:
                instances.append(g.image)
                if n_p > 0:
                    instances.extend(_enforce_proposal_count(g, n_p))
            bag = Bag(instances=instances, label=label, weights=np.array([]))
            bag.weights = init_weights(bag, n_g)
            bags.append(bag)
    return bags


def regroup(bags: list[Bag]) -> dict[int, list[ImageGroup]]:
    """Recover per-class image groups from existing bags.

    Used for re-partitioning bags between epochs and for rebuilding
    image-only bags. Padding duplicates are collapsed by instance id.
    """
    by_class: dict[int, list[ImageGroup]] = {}
    for bag in bags:
        images = [i for i in bag.instances if i.kind is Kind.IMAGE]
        for img in images:
            seen: set[str] = set()
            props = []
            for inst in bag.instances:
                if (
                    inst.kind is Kind.PROPOSAL
                    and inst.parent_image_id == img.instance_id
                    and inst.instance_id not in seen
                ):
                    seen.add(inst.instance_id)
                    props.append(inst)
            by_class.setdefault(bag.label, []).append(ImageGroup(img, props))
    return by_class


def synth_generate(cfg: SynthConfig) -> Dataset:
    """Generate a synthetic webly-noisy dataset with ground-truth flags.

    Each class gets a random unit-norm direction; clean image features are
    that direction scaled by ``class_separation`` plus isotropic unit
    Gaussian noise. A ``label_noise_rate`` fraction of images per class is
    drawn from another class's distribution instead (flag LABEL_NOISE,
    inherited by their proposals), biased toward the most similar class by
    ``NEAREST_CONFUSION``. Proposals of clean images are background draws
    with probability ``background_proposal_rate`` (a shared off-class
    direction, flag BACKGROUND_NOISE) and jittered copies of the image
    otherwise. Proposal areas are uniform in [1000, 10000]. Deterministic
    given seed.
    """
    rng = np.random.default_rng(cfg.seed)
    C, d, sep = cfg.C, cfg.d, cfg.class_separation

    dirs = rng.normal(size=(C, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    bg_dir = rng.normal(size=d)
    bg_dir /= np.linalg.norm(bg_dir)
    sim = dirs @ dirs.T
    np.fill_diagonal(sim, -2.0)
    nearest = np.argmax(sim, axis=1)
    jitter_std = JITTER_STD_FACTOR * sep

    images_by_class: dict[int, list[ImageGroup]] = {c: [] for c in range(C)}
    for c in range(C):
        for i in range(cfg.images_per_class):
            img_id = f"img_{c}_{i}"
            is_noisy = rng.random() < cfg.label_noise_rate
            if is_noisy:
                if rng.random() < NEAREST_CONFUSION:
                    src = int(nearest[c])
                else:
                    src = int(rng.integers(C - 1))
                    if src >= c:
                        src += 1
            else:
                src = c
            feat = dirs[src] * sep + rng.normal(size=d)
            img_flag = NoiseFlag.LABEL_NOISE if is_noisy else NoiseFlag.CLEAN
            image = Instance(img_id, feat, Kind.IMAGE, noise_flag=img_flag)
            props: list[Instance] = []
            for j in range(cfg.n_p):
                area = float(rng.uniform(AREA_LOW, AREA_HIGH))
                if is_noisy:
                    pfeat = feat + rng.normal(scale=jitter_std, size=d)
                    pflag = NoiseFlag.LABEL_NOISE
                elif rng.random() < cfg.background_proposal_rate:
                    pfeat = bg_dir * sep + rng.normal(size=d)
                    pflag = NoiseFlag.BACKGROUND_NOISE
                else:
                    pfeat = feat + rng.normal(scale=jitter_std, size=d)
                    pflag = NoiseFlag.CLEAN
                props.append(
                    Instance(
                        f"prop_{c}_{i}_{j}",
                        pfeat,
                        Kind.PROPOSAL,
                        area=area,
                        parent_image_id=img_id,
                        noise_flag=pflag,
                    )
                )
            images_by_class[c].append(ImageGroup(image, props))

    n_test = cfg.test_images_per_class
    if n_test is None:
        n_test = max(10, cfg.images_per_class // 4)
    test_images = []
    for c in range(C):
        for _ in range(n_test):
            test_images.append((dirs[c] * sep + rng.normal(size=d), c))

    bags = build_bags(images_by_class, cfg.n_g, cfg.n_p, seed=cfg.seed)
    meta = asdict(cfg)
    meta["generator"] = "synthetic"
    return Dataset(
        bags=bags,
        test_images=test_images,
        num_classes=C,
        feature_dim=d,
        metadata=meta,
    )


# ---------------------------------------------------------------------------
# JSONL interchange
# ---------------------------------------------------------------------------

_RECORD_KEYS = {"id", "kind", "parent", "label", "area", "feature", "bbox"}


def _parse_record(line: str, lineno: int, path: str) -> dict:
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}:{lineno}: malformed JSON ({exc.msg})")
    if not isinstance(rec, dict):
        raise DatasetError(f"{path}:{lineno}: record is not an object")
    unknown = set(rec) - _RECORD_KEYS
    if unknown:
        raise DatasetError(
            f"{path}:{lineno}: unknown keys {sorted(unknown)}"
        )
    for key in ("id", "kind", "label", "feature"):
        if key not in rec:
            raise DatasetError(f"{path}:{lineno}: missing key '{key}'")
    if rec["kind"] not in ("image", "proposal"):
        raise DatasetError(f"{path}:{lineno}: bad kind {rec['kind']!r}")
    if not isinstance(rec["label"], int) or rec["label"] < 0:
        raise DatasetError(f"{path}:{lineno}: label must be a nonnegative int")
    feat = rec["feature"]
    if not isinstance(feat, list) or not feat:
        raise DatasetError(f"{path}:{lineno}: feature must be a nonempty list")
    arr = np.asarray(feat, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise DatasetError(f"{path}:{lineno}: feature has non-finite entries")
    rec["feature"] = arr
    rec["_line"] = lineno
    return rec


def _iter_records(path: str | Path):
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"dataset file not found: {path}")
    count = 0
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            count += 1
            yield _parse_record(line, lineno, str(path))
    if count == 0:
        raise DatasetError(f"{path}: no records")


def ingest_jsonl(
    path: str | Path,
    n_g: int = 2,
    n_p: int | None = None,
    test_path: str | Path | None = None,
    flags_path: str | Path | None = None,
    seed: int = 0,
) -> Dataset:
    """Load a JSONL dataset and assemble training bags.

    ``n_p=None`` infers the proposal count as the maximum over images;
    smaller images are padded. Proposals must reference a known image of the
    same label. ``flags_path`` optionally attaches ground-truth noise flags.
    """
    records = list(_iter_records(path))
    d = records[0]["feature"].shape[0]

    images: dict[str, tuple[Instance, int]] = {}
    proposals: list[tuple[dict, Instance]] = []
    seen_ids: set[str] = set()
    for rec in records:
        if rec["feature"].shape[0] != d:
            raise DatasetError(
                f"{path}:{rec['_line']}: feature length "
                f"{rec['feature'].shape[0]} != {d}"
            )
        if rec["id"] in seen_ids:
            raise DatasetError(f"{path}:{rec['_line']}: duplicate id {rec['id']!r}")
        seen_ids.add(rec["id"])
        bbox = tuple(rec["bbox"]) if rec.get("bbox") else None
        if rec["kind"] == "image":
            if rec.get("parent"):
                raise DatasetError(
                    f"{path}:{rec['_line']}: image record has a parent"
                )
            inst = Instance(
                rec["id"], rec["feature"], Kind.IMAGE,
                area=rec.get("area"), bbox=bbox,
            )
            images[rec["id"]] = (inst, rec["label"])
        else:
            if not rec.get("parent"):
                raise DatasetError(
                    f"{path}:{rec['_line']}: proposal without parent"
                )
            if rec.get("area") is None or rec["area"] <= 0:
                raise DatasetError(
                    f"{path}:{rec['_line']}: proposal needs a positive area"
                )
            inst = Instance(
                rec["id"], rec["feature"], Kind.PROPOSAL,
                area=float(rec["area"]), parent_image_id=rec["parent"],
                bbox=bbox,
            )
            proposals.append((rec, inst))

    groups: dict[str, ImageGroup] = {
        img_id: ImageGroup(inst, []) for img_id, (inst, _) in images.items()
    }
    for rec, inst in proposals:
        parent = inst.parent_image_id
        if parent not in images:
            raise DatasetError(
                f"{path}:{rec['_line']}: proposal references unknown image "
                f"{parent!r}"
            )
        if rec["label"] != images[parent][1]:
            raise DatasetError(
                f"{path}:{rec['_line']}: proposal label {rec['label']} != "
                f"parent label {images[parent][1]}"
            )
        groups[parent].proposals.append(inst)

    if flags_path is not None:
        flags = json.loads(Path(flags_path).read_text())
        for img_id, group in groups.items():
            for inst in [group.image] + group.proposals:
                if inst.instance_id in flags:
                    inst.noise_flag = NoiseFlag(flags[inst.instance_id])

    labels = sorted({label for _, label in images.values()})
    num_classes = labels[-1] + 1
    missing = set(range(num_classes)) - set(labels)
    if missing:
        raise DatasetError(f"{path}: no images for classes {sorted(missing)}")

    by_class: dict[int, list[ImageGroup]] = {c: [] for c in range(num_classes)}
    for img_id, (inst, label) in images.items():
        by_class[label].append(groups[img_id])
    if n_p is None:
        n_p = max(len(g.proposals) for g in groups.values())
    bags = build_bags(by_class, n_g, n_p, seed=seed)

    test_images: list[tuple[np.ndarray, int]] = []
    if test_path is not None:
        for rec in _iter_records(test_path):
            if rec["kind"] != "image":
                raise DatasetError(
                    f"{test_path}:{rec['_line']}: test split must be images only"
                )
            if rec["feature"].shape[0] != d:
                raise DatasetError(
                    f"{test_path}:{rec['_line']}: feature length mismatch"
                )
            test_images.append((rec["feature"], rec["label"]))

    digest = hashlib.sha1(Path(path).read_bytes()).hexdigest()[:12]
    return Dataset(
        bags=bags,
        test_images=test_images,
        num_classes=num_classes,
        feature_dim=d,
        metadata={"source": str(path), "digest": digest, "n_g": n_g, "n_p": n_p},
    )


def _record_line(inst: Instance, label: int) -> str:
    rec = {
        "id": inst.instance_id,
        "kind": inst.kind.value,
        "parent": inst.parent_image_id,
        "label": label,
        "area": inst.area,
        "feature": [float(v) for v in inst.feature],
        "bbox": list(inst.bbox) if inst.bbox else None,
    }
    return json.dumps(rec)


def write_jsonl(dataset: Dataset, out_dir: str | Path) -> dict[str, int]:
    """Write train/test JSONL plus ground-truth flags; returns summary counts.

    Instances are written grouped per image (image line first, then its
    proposals) so that re-ingestion reproduces the same grouping.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    groups = regroup(dataset.bags)

    flags: dict[str, str] = {}
    counts = {"images": 0, "proposals": 0, "test_images": 0}
    flag_counts = {f.value: 0 for f in NoiseFlag}
    with open(out / "train.jsonl", "w") as fh:
        for label in sorted(groups):
            for g in groups[label]:
                fh.write(_record_line(g.image, label) + "\n")
                counts["images"] += 1
                for p in g.proposals:
                    fh.write(_record_line(p, label) + "\n")
                    counts["proposals"] += 1
                for inst in [g.image] + g.proposals:
                    if inst.noise_flag is not None:
                        flags[inst.instance_id] = inst.noise_flag.value
                        flag_counts[inst.noise_flag.value] += 1
    with open(out / "test.jsonl", "w") as fh:
        for i, (feat, label) in enumerate(dataset.test_images):
            inst = Instance(f"test_{i}", np.asarray(feat), Kind.IMAGE)
            fh.write(_record_line(inst, label) + "\n")
            counts["test_images"] += 1
    if flags:
        (out / "flags.json").write_text(json.dumps(flags, indent=0))
    meta = dict(dataset.metadata)
    meta["counts"] = {**counts, **flag_counts}
    (out / "dataset_meta.json").write_text(json.dumps(meta, indent=2))
    return meta["counts"]


def load_test_jsonl(path: str | Path) -> list[tuple[np.ndarray, int]]:
    """Load an images-only test split."""
    out: list[tuple[np.ndarray, int]] = []
    d = None
    for rec in _iter_records(path):
        if rec["kind"] != "image":
            raise DatasetError(
                f"{path}:{rec['_line']}: test split must be images only"
            )
        if d is None:
            d = rec["feature"].shape[0]
        elif rec["feature"].shape[0] != d:
            raise DatasetError(f"{path}:{rec['_line']}: feature length mismatch")
        out.append((rec["feature"], rec["label"]))
    return out


def load_dataset_dir(
    dataset_dir: str | Path, n_g: int, n_p: int | None = None, seed: int = 0
) -> Dataset:
    """Ingest a directory produced by ``write_jsonl`` (or hand-assembled)."""
    base = Path(dataset_dir)
    flags = base / "flags.json"
    test = base / "test.jsonl"
    return ingest_jsonl(
        base / "train.jsonl",
        n_g=n_g,
        n_p=n_p,
        test_path=test if test.exists() else None,
        flags_path=flags if flags.exists() else None,
        seed=seed,
    )


def validate_bag(bag: Bag, n_g: int, n_p: int) -> None:
    """Assert the structural bag invariants; used by tests and ingestion."""
    expected = n_g * (n_p + 1)
    if bag.size != expected:
        raise DatasetError(f"bag size {bag.size} != n_g(n_p+1) = {expected}")
    n_images = sum(1 for i in bag.instances if i.kind is Kind.IMAGE)
    if n_images != n_g:
        raise DatasetError(f"bag has {n_images} images, expected {n_g}")
    if bag.weights.size:
        if np.any(bag.weights < 0) or abs(bag.weights.sum() - 1.0) > 1e-9:
            raise DatasetError("bag weights are not a distribution")
