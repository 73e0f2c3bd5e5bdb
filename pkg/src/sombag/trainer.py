"""Training orchestration: warm-up, curriculum over p, joint updates.

The loop alternates three roles per mini-batch of bags: a momentum-SGD step
on the bag-level cross-entropy, and per-bag key/value memory steps on the
same bag features. Instance weights are refreshed from the memory once per
epoch and are constants inside both losses; the keep-fraction p grows stage
by stage, so early stages train on only the most prototypical ROIs.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .data import (
    Bag,
    Dataset,
    Kind,
    NoiseFlag,
    area_scores,
    build_bags,
    init_weights,
    regroup,
)
from .memory import (
    MemoryState,
    check_simplex_invariants,
    d_value_step,
    init_memory,
    memory_loss,
    r_value_step,
    som_key_step,
    winners_batch,
)
from .model import (
    ClassifierState,
    classify,
    cls_loss_and_grads,
    encode,
    init_classifier,
    sgd_step,
)


class TrainingDiverged(RuntimeError):
    """Raised when a loss goes non-finite; carries a diagnostic snapshot."""

    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


ABLATION_NAMES = (
    "full",
    "no_d_score",
    "no_r_score",
    "no_a_score",
    "no_som",
    "no_roi",
    "fixed_p",
    "uniform",
    "kmeans",
)


@dataclass
class TrainConfig:
    """Hyperparameters, schedules and ablation switches for one run."""

    n_g: int = 2
    n_p: int = 20
    grid_w: int | None = None   # None: smallest square grid with >= 10*C slots
    delta: int = 1
    p_start: float = 0.10
    p_step: float = 0.05
    p_end: float = 0.40
    warmup_epochs_cls: int = 5
    warmup_epochs_mem: int = 10
    epochs_per_stage: int = 6
    batch_size: int = 32
    lr_cls: float = 0.02
    momentum: float = 0.9
    lr_key: float = 0.10
    lr_value: float = 0.05
    stage_lr_decay: float = 0.8
    use_d_score: bool = True
    use_r_score: bool = True
    use_a_score: bool = True
    use_som: bool = True
    use_proposals: bool = True
    weight_mode: str = "memory"     # "memory" | "uniform"
    memory_mode: str = "som"        # "som" | "kmeans"
    kmeans_iters: int = 20
    encoder_dim: int | None = None
    repartition_each_epoch: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.p_start > self.p_end:
            raise ValueError("p_start must be <= p_end")
        if self.weight_mode not in ("memory", "uniform"):
            raise ValueError(f"bad weight_mode {self.weight_mode!r}")
        if self.memory_mode not in ("som", "kmeans"):
            raise ValueError(f"bad memory_mode {self.memory_mode!r}")
        for name in ("warmup_epochs_cls", "warmup_epochs_mem", "epochs_per_stage"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def effective_delta(self) -> int:
        return self.delta if self.use_som else 0


def apply_ablation(config: TrainConfig, name: str) -> TrainConfig:
    """Return a copy of the config with one named variant applied.

    ``fixed_p`` trains at the final keep-fraction from the start, with the
    stage epochs scaled up so the total epoch budget matches the curriculum.
    """
    if name not in ABLATION_NAMES:
        raise ValueError(f"unknown ablation {name!r}; choose from {ABLATION_NAMES}")
    cfg = dict(asdict(config))
    if name == "no_d_score":
        cfg["use_d_score"] = False
    elif name == "no_r_score":
        cfg["use_r_score"] = False
    elif name == "no_a_score":
        cfg["use_a_score"] = False
    elif name == "no_som":
        cfg["use_som"] = False
    elif name == "no_roi":
        cfg["use_proposals"] = False
    elif name == "fixed_p":
        n_stages = len(curriculum_stages(config))
        cfg["p_start"] = config.p_end
        cfg["epochs_per_stage"] = config.epochs_per_stage * n_stages
    elif name == "uniform":
        cfg["weight_mode"] = "uniform"
    elif name == "kmeans":
        cfg["memory_mode"] = "kmeans"
    return TrainConfig(**cfg)


def curriculum_stages(config: TrainConfig) -> list[float]:
    """Increasing keep-fractions from p_start to p_end in p_step increments."""
    if config.p_step <= 0:
        return [round(config.p_start, 10)]
    n = int(math.floor((config.p_end - config.p_start) / config.p_step + 1e-9)) + 1
    return [round(config.p_start + i * config.p_step, 10) for i in range(n)]


def default_grid_w(num_classes: int) -> int:
    """Smallest square grid giving at least ten slots per category."""
    return int(math.ceil(math.sqrt(10 * num_classes)))


def top_m_count(p: float, n_b: int) -> int:
    """Number of ROI weights kept per bag: ceil(p*n_b), at least one."""
    return max(1, int(math.ceil(p * n_b - 1e-9)))


def bag_feature(
    bag: Bag, weights: np.ndarray, model: ClassifierState | None = None
) -> np.ndarray:
    """Weighted average of (encoded) instance features."""
    if not np.any(weights):
        raise ValueError("bag feature with all-zero weights")
    feats = np.stack([inst.feature for inst in bag.instances])
    if model is not None:
        feats = encode(model, feats)
    return weights @ feats


def compute_roi_weights(
    bag: Bag,
    memory: MemoryState,
    p: float,
    model: ClassifierState | None = None,
    use_d: bool = True,
    use_r: bool = True,
    use_a: bool = True,
    encoded: np.ndarray | None = None,
    areas: np.ndarray | None = None,
) -> tuple[np.ndarray, bool]:
    """Memory-driven instance weights for one bag.

    Each instance scores the prototypical score of its winner key slot for
    the bag label, discounted by its area score; disabled factors are
    replaced by one. Only the top ceil(p*n_b) scores survive (ties broken by
    instance order) and are normalized to sum to one. Returns the weight
    vector and whether the all-zero fallback to initial weights fired.
    """
    n_b = bag.size
    if encoded is None:
        feats = np.stack([inst.feature for inst in bag.instances])
        encoded = encode(model, feats) if model is not None else feats
    z = winners_batch(encoded, memory.K)
    raw = np.ones(n_b)
    if use_d:
        raw = raw * memory.D[bag.label, z]
    if use_r:
        raw = raw * memory.R[bag.label, z]
    if use_a:
        raw = raw * (areas if areas is not None else area_scores(bag))

    m = top_m_count(p, n_b)
    order = np.argsort(-raw, kind="stable")
    w = np.zeros(n_b)
    keep = order[:m]
    w[keep] = raw[keep]
    total = w.sum()
    if total <= 0.0:
        n_images = sum(1 for i in bag.instances if i.kind is Kind.IMAGE)
        return init_weights(bag, n_images), True
    return w / total, False


@dataclass
class _Work:
    """Per-run arrays derived from the dataset (bags possibly rebuilt)."""

    bags: list[Bag]
    feats: list[np.ndarray]
    areas: list[np.ndarray]
    labels: np.ndarray
    groups: dict | None
    n_p: int


@dataclass
class TrainState:
    model: ClassifierState
    memory: MemoryState
    p: float
    weights: list[np.ndarray]
    epoch: int
    history: dict
    anomalies: dict[str, int]
    rng: np.random.Generator = field(repr=False, default=None)
    work: _Work = field(repr=False, default=None)


@dataclass
class RunReport:
    run_id: str
    seed: int
    config: dict
    p_trace: list[float]
    warmup_cls_loss: list[float]
    warmup_memory_loss: list[float]
    stages: list[dict]
    test_top1: float | None
    per_class_accuracy: list[float] | None
    noise_auc: float | None
    dead_key_fraction: float
    weight_mass_on_clean: float | None
    anomalies: dict[str, int]

    def to_dict(self) -> dict:
        return asdict(self)


def run_id_for(config: TrainConfig) -> str:
    blob = json.dumps(asdict(config), sort_keys=True).encode()
    return hashlib.sha1(blob).hexdigest()[:12]


def _prepare(dataset: Dataset, config: TrainConfig) -> _Work:
    bags = dataset.bags
    groups = None
    n_p = config.n_p
    if not config.use_proposals:
        groups = regroup(dataset.bags)
        bags = build_bags(groups, config.n_g, 0, seed=config.seed)
        n_p = 0
    elif config.repartition_each_epoch:
        groups = regroup(dataset.bags)
    if bags:
        sizes = {b.size for b in bags}
        if len(sizes) != 1:
            raise ValueError(f"bags have inconsistent sizes: {sorted(sizes)}")
    return _Work(
        bags=bags,
        feats=[np.stack([i.feature for i in b.instances]) for b in bags],
        areas=[area_scores(b) for b in bags],
        labels=np.array([b.label for b in bags]),
        groups=groups,
        n_p=n_p,
    )


def _rebuild_bags(work: _Work, config: TrainConfig, seed: int) -> None:
    work.bags = build_bags(work.groups, config.n_g, work.n_p, seed=seed)
    work.feats = [np.stack([i.feature for i in b.instances]) for b in work.bags]
    work.areas = [area_scores(b) for b in work.bags]
    work.labels = np.array([b.label for b in work.bags])


def _initial_weights(work: _Work, config: TrainConfig) -> list[np.ndarray]:
    if config.weight_mode == "uniform":
        return [np.full(b.size, 1.0 / b.size) for b in work.bags]
    return [init_weights(b, config.n_g) for b in work.bags]


def _encoded_feats(work: _Work, model: ClassifierState) -> list[np.ndarray]:
    if not model.has_encoder:
        return work.feats
    return [encode(model, f) for f in work.feats]


def _bag_features(
    work: _Work, weights: list[np.ndarray], model: ClassifierState
) -> np.ndarray:
    enc = _encoded_feats(work, model)
    return np.stack([w @ h for w, h in zip(weights, enc)])


def _refresh_weights(
    state: TrainState, config: TrainConfig, p: float
) -> list[np.ndarray]:
    work = state.work
    enc = _encoded_feats(work, state.model)
    out = []
    for i, bag in enumerate(work.bags):
        w, fell_back = compute_roi_weights(
            bag,
            state.memory,
            p,
            use_d=config.use_d_score,
            use_r=config.use_r_score,
            use_a=config.use_a_score,
            encoded=enc[i],
            areas=work.areas[i],
        )
        if fell_back:
            state.anomalies["weight_fallbacks"] += 1
        out.append(w)
    return out


def _memory_batch_update(
    state: TrainState, xbars: np.ndarray, labels: np.ndarray
) -> np.ndarray:
    """Apply the three memory steps for each bag; returns winner indices.

    Winners are assigned once against the batch-start keys, then the
    per-bag steps run sequentially.
    """
    memory = state.memory
    z_batch = winners_batch(xbars, memory.K)
    C, L = memory.num_classes, memory.num_slots
    for xbar, y, z in zip(xbars, labels, z_batch):
        som_key_step(xbar, int(z), memory)
        y_onehot = np.zeros(C)
        y_onehot[y] = 1.0
        d_value_step(y_onehot, int(z), memory)
        z_onehot = np.zeros(L)
        z_onehot[int(z)] = 1.0
        r_value_step(z_onehot, int(y), memory)
    return z_batch


def _epoch_batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def _guard_finite(value: float, context: dict) -> float:
    if not np.isfinite(value):
        raise TrainingDiverged(
            f"non-finite loss at {context}", dict(context, loss=float(value))
        )
    return value


def _cls_step(model: ClassifierState, batch, context: dict) -> float:
    """Classifier loss+step with the divergence guard applied."""
    try:
        loss, grads = cls_loss_and_grads(model, batch)
    except FloatingPointError as exc:
        raise TrainingDiverged(
            f"{exc} at {context}", dict(context, loss=float("nan"))
        )
    _guard_finite(loss, context)
    sgd_step(model, grads)
    return loss


def warmup(dataset: Dataset, config: TrainConfig) -> TrainState:
    """Initialize classifier then memory on the initial ROI weights.

    The classifier trains first on bag features built from the initial
    weights; the memory then clusters those same bag features with the
    classifier frozen.
    """
    rng = np.random.default_rng(config.seed)
    work = _prepare(dataset, config)
    grid_w = config.grid_w or default_grid_w(dataset.num_classes)
    model = init_classifier(
        dataset.feature_dim,
        dataset.num_classes,
        encoder_dim=config.encoder_dim,
        lr_cls=config.lr_cls,
        momentum=config.momentum,
        rng=rng,
    )
    enc_dim = config.encoder_dim or dataset.feature_dim
    memory = init_memory(
        enc_dim,
        dataset.num_classes,
        grid_w,
        delta=config.effective_delta,
        lr_key=config.lr_key,
        lr_value=config.lr_value,
        rng=rng,
    )
    state = TrainState(
        model=model,
        memory=memory,
        p=0.0,
        weights=[],
        epoch=0,
        history={"warmup_cls_loss": [], "warmup_memory_loss": [], "stages": []},
        anomalies={"weight_fallbacks": 0},
        rng=rng,
        work=work,
    )
    state.weights = _initial_weights(work, config)
    n_bags = len(work.bags)

    for _ in range(config.warmup_epochs_cls):
        losses = []
        for idx in _epoch_batches(n_bags, config.batch_size, rng):
            batch = [
                (work.feats[i], state.weights[i], int(work.labels[i])) for i in idx
            ]
            losses.append(_cls_step(model, batch, {"phase": "warmup_cls"}))
        state.history["warmup_cls_loss"].append(float(np.mean(losses)))

    if config.memory_mode == "kmeans":
        _fit_kmeans_memory(state, config)
        xbars = _bag_features(work, state.weights, model)
        pairs = list(zip(xbars, [int(y) for y in work.labels]))
        state.history["warmup_memory_loss"].append(
            memory_loss(memory, pairs) / n_bags
        )
    else:
        for _ in range(config.warmup_epochs_mem):
            losses = []
            for idx in _epoch_batches(n_bags, config.batch_size, rng):
                xbars = np.stack(
                    [
                        bag_feature(work.bags[i], state.weights[i], model)
                        for i in idx
                    ]
                )
                labels = work.labels[idx]
                pairs = list(zip(xbars, [int(y) for y in labels]))
                losses.append(
                    _guard_finite(
                        memory_loss(memory, pairs), {"phase": "warmup_mem"}
                    )
                )
                _memory_batch_update(state, xbars, labels)
            state.history["warmup_memory_loss"].append(
                float(np.sum(losses)) / n_bags
            )
    return state


def _fit_kmeans_memory(state: TrainState, config: TrainConfig) -> None:
    from .evaluate import kmeans_memory  # deferred: evaluate imports trainer

    work = state.work
    xbars = _bag_features(work, state.weights, state.model)
    K, D, R = kmeans_memory(
        xbars,
        work.labels,
        state.memory.num_slots,
        iters=config.kmeans_iters,
        seed=config.seed,
    )
    state.memory.K = K
    state.memory.D = D
    state.memory.R = R


def train(
    dataset: Dataset,
    config: TrainConfig,
    state: TrainState | None = None,
) -> tuple[TrainState, RunReport]:
    """Full curriculum training; returns the final state and its report."""
    if state is None:
        state = warmup(dataset, config)
    work = state.work
    rng = state.rng
    n_bags = len(work.bags)
    stages = curriculum_stages(config)
    use_memory_weights = config.weight_mode == "memory"

    for stage_idx, p in enumerate(stages):
        state.p = p
        decay = config.stage_lr_decay**stage_idx
        state.memory.lr_key = config.lr_key * decay
        state.memory.lr_value = config.lr_value * decay
        if config.memory_mode == "kmeans" and stage_idx > 0:
            _fit_kmeans_memory(state, config)
        stage_hist = {
            "p": p,
            "cls_loss": [],
            "memory_loss": [],
            "dead_key_fraction": [],
        }
        for epoch in range(config.epochs_per_stage):
            if config.repartition_each_epoch and work.groups is not None:
                _rebuild_bags(work, config, seed=int(rng.integers(2**31)))
                state.weights = _initial_weights(work, config)
                n_bags = len(work.bags)
            if use_memory_weights:
                state.weights = _refresh_weights(state, config, p)
            won: set[int] = set()
            cls_losses, mem_losses = [], []
            for idx in _epoch_batches(n_bags, config.batch_size, rng):
                batch = [
                    (work.feats[i], state.weights[i], int(work.labels[i]))
                    for i in idx
                ]
                xbars = np.stack(
                    [
                        bag_feature(work.bags[i], state.weights[i], state.model)
                        for i in idx
                    ]
                )
                labels = work.labels[idx]
                context = {"stage": stage_idx, "p": p, "epoch": epoch}
                pairs = list(zip(xbars, [int(y) for y in labels]))
                mem_losses.append(
                    _guard_finite(memory_loss(state.memory, pairs), context)
                )
                cls_losses.append(_cls_step(state.model, batch, context))
                if config.memory_mode == "som":
                    z_batch = _memory_batch_update(state, xbars, labels)
                else:
                    z_batch = winners_batch(xbars, state.memory.K)
                won.update(int(z) for z in z_batch)
            stage_hist["cls_loss"].append(float(np.mean(cls_losses)))
            stage_hist["memory_loss"].append(float(np.sum(mem_losses)) / n_bags)
            stage_hist["dead_key_fraction"].append(
                1.0 - len(won) / state.memory.num_slots
            )
            state.epoch += 1
        state.history["stages"].append(stage_hist)

    if use_memory_weights:
        state.weights = _refresh_weights(state, config, stages[-1])
    check_simplex_invariants(state.memory)
    report = _build_report(dataset, config, state, stages)
    return state, report


def predict(state: TrainState, test_images: list[tuple[np.ndarray, int]]) -> np.ndarray:
    """Classify image-level features; the memory plays no part here."""
    return predict_with_model(state.model, test_images)


def predict_with_model(
    model: ClassifierState, test_images: list[tuple[np.ndarray, int]]
) -> np.ndarray:
    preds = np.empty(len(test_images), dtype=int)
    for i, (feat, _) in enumerate(test_images):
        feat = np.asarray(feat, dtype=float)
        probs = classify(model, encode(model, feat))
        preds[i] = int(np.argmax(probs))
    return preds


def _build_report(
    dataset: Dataset,
    config: TrainConfig,
    state: TrainState,
    stages: list[float],
) -> RunReport:
    from .evaluate import accuracy, noise_auc  # deferred: evaluate imports trainer

    test_top1 = None
    per_class = None
    if dataset.test_images:
        preds = predict(state, dataset.test_images)
        labels = np.array([y for _, y in dataset.test_images])
        test_top1 = accuracy(preds, labels)
        per_class = [
            float(np.mean(preds[labels == c] == c)) if np.any(labels == c) else 0.0
            for c in range(dataset.num_classes)
        ]

    flat_weights, flags = [], []
    for bag, w in zip(state.work.bags, state.weights):
        for inst, wi in zip(bag.instances, w):
            if inst.noise_flag is not None:
                flat_weights.append(float(wi))
                flags.append(inst.noise_flag)
    auc = mass_on_clean = None
    if flags and len(set(flags)) > 1:
        clean = np.array([f is NoiseFlag.CLEAN for f in flags])
        auc = noise_auc(np.array(flat_weights), clean)
        total = float(np.sum(flat_weights))
        mass_on_clean = float(np.sum(np.array(flat_weights)[clean]) / total)

    final_dead = state.history["stages"][-1]["dead_key_fraction"][-1]
    return RunReport(
        run_id=run_id_for(config),
        seed=config.seed,
        config=asdict(config),
        p_trace=stages,
        warmup_cls_loss=state.history["warmup_cls_loss"],
        warmup_memory_loss=state.history["warmup_memory_loss"],
        stages=state.history["stages"],
        test_top1=test_top1,
        per_class_accuracy=per_class,
        noise_auc=auc,
        dead_key_fraction=final_dead,
        weight_mass_on_clean=mass_on_clean,
        anomalies=dict(state.anomalies),
    )
