"""Metrics, noise diagnostics, baselines and the ablation suite.

The suite re-trains one variant per ablation switch with shared seeds and
emits a comparison table (CSV + JSON). The k-means baseline swaps the
learned memory for spherical k-means centroids whose value slots are set
directly to the empirical category/cluster frequencies.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .data import Dataset
from .trainer import ABLATION_NAMES, TrainConfig, apply_ablation, train


def accuracy(preds, labels) -> float:
    """Fraction of exact matches."""
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape:
        raise ValueError("prediction/label length mismatch")
    if preds.size == 0:
        raise ValueError("empty input")
    return float(np.mean(preds == labels))


def _average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    order = np.argsort(x, kind="stable")
    sx = x[order]
    ranks = np.empty(x.size)
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def noise_auc(scores: np.ndarray, is_clean: np.ndarray) -> float:
    """ROC-AUC of a score for separating clean from noisy instances.

    Mann-Whitney rank statistic with average ranks for ties, so the value is
    exact and invariant under strictly monotone transforms of the scores.
    """
    scores = np.asarray(scores, dtype=float)
    is_clean = np.asarray(is_clean, dtype=bool)
    if scores.shape != is_clean.shape:
        raise ValueError("scores/flags length mismatch")
    n_pos = int(is_clean.sum())
    n_neg = int(is_clean.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ValueError("noise AUC needs both clean and noisy instances")
    ranks = _average_ranks(scores)
    pos_rank_sum = float(ranks[is_clean].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def spherical_centroids(
    X_unit: np.ndarray, assign: np.ndarray, L: int
) -> np.ndarray:
    """Normalized mean directions per cluster; empty clusters stay zero."""
    d = X_unit.shape[1]
    cent = np.zeros((L, d))
    for l in range(L):
        members = X_unit[assign == l]
        if len(members):
            m = members.mean(axis=0)
            norm = np.linalg.norm(m)
            if norm > 0:
                cent[l] = m / norm
    return cent


def kmeans_memory(
    bag_features: np.ndarray,
    labels: np.ndarray,
    L: int,
    iters: int = 20,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Spherical k-means replacement for the learned memory.

    Returns (K, D, R) in the memory layout: keys are L2-normalized centroid
    columns; D and R are the exact empirical frequency tables of the final
    assignment. Empty clusters are re-seeded from the points least similar
    to their current centroid.
    """
    X = np.asarray(bag_features, dtype=float)
    labels = np.asarray(labels, dtype=int)
    N = X.shape[0]
    if N < L:
        raise ValueError(f"need at least {L} bag features, got {N}")
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("zero-norm bag feature")
    Xn = X / norms

    rng = np.random.default_rng(seed)
    cent = Xn[rng.choice(N, size=L, replace=False)].copy()

    sims = Xn @ cent.T
    assign = np.argmax(sims, axis=1)
    for _ in range(iters):
        new_cent = spherical_centroids(Xn, assign, L)
        empty = np.where(np.all(new_cent == 0, axis=1))[0]
        if empty.size:
            # farthest-first re-seed: points least similar to their centroid
            own_sim = (Xn * new_cent[assign]).sum(axis=1)
            worst = np.argsort(own_sim, kind="stable")
            for slot, point in zip(empty, worst[: empty.size]):
                new_cent[slot] = Xn[point]
        cent = new_cent
        sims = Xn @ cent.T
        new_assign = np.argmax(sims, axis=1)
        if np.array_equal(new_assign, assign):
            assign = new_assign
            break
        assign = new_assign

    C = int(labels.max()) + 1
    counts = np.zeros((C, L))
    np.add.at(counts, (labels, assign), 1.0)
    col_tot = counts.sum(axis=0)
    D = np.where(col_tot > 0, counts / np.maximum(col_tot, 1.0), 1.0 / C)
    row_tot = counts.sum(axis=1, keepdims=True)
    if np.any(row_tot == 0):
        raise ValueError("a category has no bags")
    R = counts / row_tot
    return cent.T.copy(), D, R


@dataclass
class EvalReport:
    name: str
    seeds: list[int]
    top1: float
    noise_auc: float | None
    per_class_accuracy: list[float] | None
    dead_key_fraction: float
    weight_mass_on_clean: float | None
    baseline_delta: float | None = None


@dataclass
class SuiteResult:
    rows: list[EvalReport]
    per_seed: dict[str, list[dict]]

    def to_dict(self) -> dict:
        return {
            "rows": [asdict(r) for r in self.rows],
            "per_seed": self.per_seed,
        }

    def row(self, name: str) -> EvalReport:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["name", "seed", "top1", "auc", "dead_key_frac"])
            for r in self.rows:
                writer.writerow(
                    [
                        r.name,
                        ";".join(str(s) for s in r.seeds),
                        f"{r.top1:.6f}",
                        "" if r.noise_auc is None else f"{r.noise_auc:.6f}",
                        f"{r.dead_key_fraction:.6f}",
                    ]
                )

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def _mean_or_none(values: list) -> float | None:
    vals = [v for v in values if v is not None]
    if not vals:
        return None
    return float(np.mean(vals))


def run_suite(
    dataset: Dataset,
    base_config: TrainConfig,
    seeds: list[int] | None = None,
    variants: tuple[str, ...] = ABLATION_NAMES,
) -> SuiteResult:
    """Train every ablation variant with shared seeds; aggregate per variant.

    Each variant runs once per seed on the same dataset; rows report
    seed-mean metrics plus the accuracy delta against the uniform-weight
    baseline row.
    """
    if seeds is None:
        seeds = [base_config.seed]
    per_seed: dict[str, list[dict]] = {}
    for name in variants:
        per_seed[name] = []
        for seed in seeds:
            cfg = apply_ablation(base_config, name)
            cfg = TrainConfig(**{**asdict(cfg), "seed": seed})
            _, report = train(dataset, cfg)
            per_seed[name].append(
                {
                    "seed": seed,
                    "top1": report.test_top1,
                    "noise_auc": report.noise_auc,
                    "per_class_accuracy": report.per_class_accuracy,
                    "dead_key_fraction": report.dead_key_fraction,
                    "weight_mass_on_clean": report.weight_mass_on_clean,
                }
            )

    rows = []
    for name in variants:
        runs = per_seed[name]
        per_class = None
        if runs[0]["per_class_accuracy"] is not None:
            per_class = [
                float(np.mean([r["per_class_accuracy"][c] for r in runs]))
                for c in range(len(runs[0]["per_class_accuracy"]))
            ]
        rows.append(
            EvalReport(
                name=name,
                seeds=list(seeds),
                top1=float(np.mean([r["top1"] for r in runs])),
                noise_auc=_mean_or_none([r["noise_auc"] for r in runs]),
                per_class_accuracy=per_class,
                dead_key_fraction=float(
                    np.mean([r["dead_key_fraction"] for r in runs])
                ),
                weight_mass_on_clean=_mean_or_none(
                    [r["weight_mass_on_clean"] for r in runs]
                ),
            )
        )
    baseline = next((r for r in rows if r.name == "uniform"), None)
    if baseline is not None:
        for r in rows:
            r.baseline_delta = r.top1 - baseline.top1
    return SuiteResult(rows=rows, per_seed=per_seed)
