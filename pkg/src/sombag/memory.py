"""Self-organizing key/value memory.

Key slots are cluster centers arranged on a square grid and matched by
cosine similarity. Each key slot l has two per-category statistics: column l
of D approximates the category distribution inside cluster l, and row y of R
approximates how category y's bags spread over the clusters. All three are
trained by per-sample cosine-ascent steps; D columns and R rows are kept on
the probability simplex by clamping negatives and L1-normalizing after every
step, so they stay interpretable as distributions at all times.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

EPS_NORM = 1e-12


@dataclass
class WinnerResult:
    index: int
    similarity: float


@dataclass
class MemoryState:
    """Key matrix K (d x L, column per slot), value matrices D and R (C x L)."""

    K: np.ndarray
    D: np.ndarray
    R: np.ndarray
    grid_w: int
    delta: int = 1
    lr_key: float = 0.05
    lr_value: float = 0.05

    @property
    def num_slots(self) -> int:
        return self.K.shape[1]

    @property
    def num_classes(self) -> int:
        return self.D.shape[0]

    def copy(self) -> "MemoryState":
        return MemoryState(
            self.K.copy(), self.D.copy(), self.R.copy(),
            self.grid_w, self.delta, self.lr_key, self.lr_value,
        )


def init_memory(
    feature_dim: int,
    num_classes: int,
    grid_w: int,
    delta: int = 1,
    lr_key: float = 0.05,
    lr_value: float = 0.05,
    rng: np.random.Generator | None = None,
) -> MemoryState:
    """Random unit-norm keys on a grid_w x grid_w grid; uniform value slots."""
    rng = rng if rng is not None else np.random.default_rng(0)
    L = grid_w * grid_w
    K = rng.normal(size=(feature_dim, L))
    K /= np.linalg.norm(K, axis=0, keepdims=True)
    D = np.full((num_classes, L), 1.0 / num_classes)
    R = np.full((num_classes, L), 1.0 / L)
    return MemoryState(K, D, R, grid_w, delta, lr_key, lr_value)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity; rejects near-zero-norm inputs."""
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na <= EPS_NORM or nb <= EPS_NORM:
        raise ValueError("cosine of a near-zero vector is undefined")
    return float(np.dot(a, b) / (na * nb))


def winner(x: np.ndarray, K: np.ndarray) -> WinnerResult:
    """Key slot with maximal cosine similarity to x; ties go to the
    smallest index."""
    nx = np.linalg.norm(x)
    if nx <= EPS_NORM:
        raise ValueError("winner search on a near-zero vector")
    key_norms = np.linalg.norm(K, axis=0)
    if np.any(key_norms <= EPS_NORM):
        raise ValueError("memory contains a zero key slot")
    sims = (K.T @ x) / (key_norms * nx)
    z = int(np.argmax(sims))
    return WinnerResult(index=z, similarity=float(sims[z]))


def winners_batch(X: np.ndarray, K: np.ndarray) -> np.ndarray:
    """Winner indices for each row of X (vectorized exhaustive scan)."""
    norms = np.linalg.norm(X, axis=1)
    if np.any(norms <= EPS_NORM):
        raise ValueError("winner search on a near-zero vector")
    key_norms = np.linalg.norm(K, axis=0)
    if np.any(key_norms <= EPS_NORM):
        raise ValueError("memory contains a zero key slot")
    sims = (X @ K) / (norms[:, None] * key_norms[None, :])
    return np.argmax(sims, axis=1)


def grid_geo(i: int, j: int, grid_w: int) -> int:
    """Geodesic (Manhattan) distance between slots i and j on the grid."""
    L = grid_w * grid_w
    if not (0 <= i < L and 0 <= j < L):
        raise IndexError(f"slot index out of range for {grid_w}x{grid_w} grid")
    ri, ci = divmod(i, grid_w)
    rj, cj = divmod(j, grid_w)
    return abs(ri - rj) + abs(ci - cj)


def neighborhood(z: int, delta: int, grid_w: int) -> set[int]:
    """All slots within geodesic radius delta of z (always includes z)."""
    L = grid_w * grid_w
    if not 0 <= z < L:
        raise IndexError(f"slot index out of range for {grid_w}x{grid_w} grid")
    rz, cz = divmod(z, grid_w)
    out: set[int] = set()
    for dr in range(-delta, delta + 1):
        r = rz + dr
        if not 0 <= r < grid_w:
            continue
        rest = delta - abs(dr)
        for dc in range(-rest, rest + 1):
            c = cz + dc
            if 0 <= c < grid_w:
                out.add(r * grid_w + c)
    return out


def neighbor_weight(z: int, i: int, grid_w: int) -> float:
    """Update weight for slot i when z wins: inverse of 1 + geodesic distance."""
    return 1.0 / (1.0 + grid_geo(z, i, grid_w))


def cosine_grad(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Gradient of cos(x, k) with respect to k."""
    nx = np.linalg.norm(x)
    nk = np.linalg.norm(k)
    if nx <= EPS_NORM or nk <= EPS_NORM:
        raise ValueError("cosine gradient at a near-zero vector")
    c = np.dot(x, k) / (nx * nk)
    return x / (nx * nk) - c * k / (nk * nk)


def som_key_step(xbar: np.ndarray, z: int, state: MemoryState) -> None:
    """One ascent step on the neighborhood-weighted key similarity.

    The winner column and every grid neighbor within radius delta move along
    the cosine gradient, scaled by the inverse-distance weight. Keys outside
    the neighborhood are untouched.
    """
    for i in sorted(neighborhood(z, state.delta, state.grid_w)):
        eta = neighbor_weight(z, i, state.grid_w)
        g = cosine_grad(xbar, state.K[:, i])
        state.K[:, i] += state.lr_key * eta * g


def _simplex_project(v: np.ndarray) -> np.ndarray:
    """Clamp negatives to zero and L1-normalize."""
    v = np.maximum(v, 0.0)
    total = v.sum()
    assert total > 0.0, "projection produced an all-zero distribution"
    return v / total


def d_value_step(y_onehot: np.ndarray, z: int, state: MemoryState) -> None:
    """Push column z of D toward the label vector, staying on the simplex."""
    d = state.D[:, z]
    g = cosine_grad(y_onehot, d)
    state.D[:, z] = _simplex_project(d + state.lr_value * g)


def r_value_step(z_onehot: np.ndarray, y: int, state: MemoryState) -> None:
    """Push row y of R toward the cluster indicator, staying on the simplex."""
    r = state.R[y, :]
    g = cosine_grad(z_onehot, r)
    state.R[y, :] = _simplex_project(r + state.lr_value * g)


def prototypical_score(state: MemoryState, y: int, z: int) -> float:
    """How strongly slot z typifies category y: d-score times r-score."""
    return float(state.D[y, z] * state.R[y, z])


def memory_loss(
    state: MemoryState, batch: list[tuple[np.ndarray, int]]
) -> float:
    """Monitoring value: summed key, d-value and r-value losses on a batch.

    Each item is (bag feature, label). The per-term update steps above are
    the gradient steps of this quantity; it is never differentiated directly.
    """
    total = 0.0
    L = state.num_slots
    for xbar, y in batch:
        z = winner(xbar, state.K).index
        for i in neighborhood(z, state.delta, state.grid_w):
            total -= neighbor_weight(z, i, state.grid_w) * cosine(
                xbar, state.K[:, i]
            )
        y_onehot = np.zeros(state.num_classes)
        y_onehot[y] = 1.0
        total -= cosine(y_onehot, state.D[:, z])
        z_onehot = np.zeros(L)
        z_onehot[z] = 1.0
        total -= cosine(z_onehot, state.R[y, :])
    return total


def check_simplex_invariants(state: MemoryState, tol: float = 1e-6) -> None:
    """Raise if any D column or R row leaves the probability simplex."""
    if np.any(state.D < 0) or np.any(state.R < 0):
        raise AssertionError("negative value-slot entry")
    if np.any(np.abs(state.D.sum(axis=0) - 1.0) > tol):
        raise AssertionError("a D column does not sum to 1")
    if np.any(np.abs(state.R.sum(axis=1) - 1.0) > tol):
        raise AssertionError("an R row does not sum to 1")


def snapshot(state: MemoryState) -> dict:
    """JSON-ready export: grid width, column-major keys, value matrices."""
    return {
        "grid_w": state.grid_w,
        "K": [float(v) for v in state.K.flatten(order="F")],
        "D": [[float(v) for v in row] for row in state.D],
        "R": [[float(v) for v in row] for row in state.R],
    }


def from_snapshot(
    doc: dict, delta: int = 1, lr_key: float = 0.05, lr_value: float = 0.05
) -> MemoryState:
    grid_w = int(doc["grid_w"])
    L = grid_w * grid_w
    flat = np.asarray(doc["K"], dtype=float)
    d = flat.size // L
    K = flat.reshape((d, L), order="F")
    D = np.asarray(doc["D"], dtype=float)
    R = np.asarray(doc["R"], dtype=float)
    return MemoryState(K, D, R, grid_w, delta, lr_key, lr_value)
