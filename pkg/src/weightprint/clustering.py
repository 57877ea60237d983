"""K-Means over singular-value profiles, Query-anchored labels, clustering vector, PCA."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import PreconditionError
from .spectral import ProfileSet
from .taxonomy import KINDS


@dataclass(frozen=True)
class ClusterModel:
    k: int
    centroids: tuple[tuple[float, ...], ...]
    inertia: float
    seed: int
    restarts: int
    iterations_run: int
    restart: int = 0  # index of the winning restart


@dataclass(frozen=True)
class LloydRun:
    labels: np.ndarray
    centroids: np.ndarray
    inertia: float
    iterations: int
    history: tuple[float, ...]


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - c[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def kmeans_plusplus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    chosen = [int(rng.integers(n))]
    d2 = _sq_dists(x, x[chosen])[:, 0]
    for _ in range(1, k):
        total = float(d2.sum())
        if total > 0.0:
            r = rng.random() * total
            idx = int(np.searchsorted(np.cumsum(d2), r, side="right"))
            idx = min(idx, n - 1)
        else:
            idx = int(rng.integers(n))
        chosen.append(idx)
        d2 = np.minimum(d2, _sq_dists(x, x[idx : idx + 1])[:, 0])
    return x[chosen].copy()


def _partition_cost(x: np.ndarray, labels: np.ndarray, centroids: np.ndarray) -> float:
    diff = x - centroids[labels]
    return float(np.einsum("ij,ij->", diff, diff))


def lloyd(x: np.ndarray, k: int, seed: int, max_iter: int = 300, tol: float = 1e-6) -> LloydRun:
    """One seeded k-means++ / Lloyd run."""
    rng = np.random.default_rng(seed)
    n = len(x)
    centroids = kmeans_plusplus(x, k, rng)
    labels = None
    history: list[float] = []
    iterations = 0
    for iterations in range(1, max_iter + 1):
        d2 = _sq_dists(x, centroids)
        new = np.argmin(d2, axis=1)
        counts = np.bincount(new, minlength=k)
        # empty cluster: move the worst-served point (from a cluster that can spare it)
        for empty in np.flatnonzero(counts == 0):
            own = d2[np.arange(n), new]
            own = np.where(counts[new] > 1, own, -1.0)
            far = int(np.argmax(own))
            counts[new[far]] -= 1
            new[far] = empty
            counts[empty] = 1
            centroids[empty] = x[far]
            d2[far, empty] = 0.0
        inertia = float(d2[np.arange(n), new].sum())
        stable = labels is not None and np.array_equal(new, labels)
        small_gain = bool(history) and (history[-1] - inertia) <= tol * history[-1]
        labels = new
        history.append(inertia)
        if stable:
            break
        for j in range(k):
            centroids[j] = x[labels == j].mean(axis=0)
        if small_gain:
            break
    for j in range(k):
        centroids[j] = x[labels == j].mean(axis=0)
    return LloydRun(labels, centroids, _partition_cost(x, labels, centroids), iterations, tuple(history))


def kmeans_fit(
    profiles: ProfileSet | np.ndarray,
    k: int = 2,
    seed: int = 0,
    restarts: int = 10,
    max_iter: int = 300,
    tol: float = 1e-6,
) -> tuple[ClusterModel, np.ndarray]:
    """Best of ``restarts`` runs seeded ``seed + r``; ties go to the lowest restart."""
    x = profiles.normalized_matrix if isinstance(profiles, ProfileSet) else np.asarray(profiles, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if len(x) == 0:
        raise PreconditionError("cannot cluster an empty profile set")
    if not 1 <= k <= len(x):
        raise PreconditionError(f"k={k} must be between 1 and the number of profiles ({len(x)})")
    if restarts < 1 or max_iter < 1:
        raise PreconditionError("restarts and max_iter must be positive")
    best, best_r = None, -1
    for r in range(restarts):
        run = lloyd(x, k, seed + r, max_iter, tol)
        if best is None or run.inertia < best.inertia:
            best, best_r = run, r
    model = ClusterModel(
        k=k,
        centroids=tuple(tuple(c) for c in best.centroids.tolist()),
        inertia=best.inertia,
        seed=seed,
        restarts=restarts,
        iterations_run=best.iterations,
        restart=best_r,
    )
    return model, best.labels.astype(np.int64)


@dataclass(frozen=True)
class LabelGrid:
    """Rows are layers, columns kinds in canonical order. ``None`` marks an absent kind."""

    labels: tuple[tuple[int | None, ...], ...]
    aligned: bool

    @property
    def layers(self) -> int:
        return len(self.labels)

    def column(self, j: int) -> list[int | None]:
        return [row[j] for row in self.labels]

    def flatten(self) -> list[int | None]:
        return [v for row in self.labels for v in row]


def _to_grid(raw, layers: int, present: list[int]) -> list[list[int | None]]:
    raw = [int(v) for v in raw]
    if len(raw) != layers * len(present):
        raise PreconditionError(f"{len(raw)} labels do not fill {layers} layers x {len(present)} kinds")
    grid = [[None] * len(KINDS) for _ in range(layers)]
    it = iter(raw)
    for layer in range(layers):
        for j in present:
            grid[layer][j] = next(it)
    return grid


def raw_grid(raw_labels, layers: int, present: list[int] | None = None) -> LabelGrid:
    present = list(range(len(KINDS))) if present is None else present
    return LabelGrid(tuple(tuple(r) for r in _to_grid(raw_labels, layers, present)), aligned=False)


def align_labels(raw_labels, layers: int, present: list[int] | None = None) -> LabelGrid:
    """Relabel two clusters so the Query column's majority label is 1.

    A split Query column (possible for even layer counts) is settled by layer 0.
    """
    present = list(range(len(KINDS))) if present is None else present
    if 0 not in present:
        raise PreconditionError("label alignment needs the Q kind")
    raw = [int(v) for v in raw_labels]
    if any(v not in (0, 1) for v in raw):
        raise PreconditionError("label alignment is defined only for k=2 (labels 0/1)")
    grid = _to_grid(raw, layers, present)
    q = [row[0] for row in grid]
    ones = sum(q)
    flip = 2 * ones < layers or (2 * ones == layers and q[0] == 0)
    if flip:
        grid = [[None if v is None else 1 - v for v in row] for row in grid]
    return LabelGrid(tuple(tuple(r) for r in grid), aligned=True)


@dataclass(frozen=True)
class ClusteringVector:
    means: tuple[float | None, ...]
    rank: int
    k: int = 2


def clustering_vector(grid: LabelGrid, rank: int, k: int = 2) -> ClusteringVector:
    if not grid.aligned:
        raise PreconditionError("clustering vector requires an aligned label grid")
    means = []
    for j in range(len(KINDS)):
        col = grid.column(j)
        if any(v is None for v in col):
            means.append(None)
        else:
            means.append(sum(col) / len(col))
    return ClusteringVector(tuple(means), rank, k)


def heatmap_grid(grid: LabelGrid) -> list[list[int | None]]:
    return [list(row) for row in grid.labels]


@dataclass(frozen=True)
class ScatterProjection:
    points: np.ndarray  # (n, 2)
    explained: tuple[float, float]
    components: np.ndarray  # (2, rank)
    degenerate: bool = False


def pca_project(profiles: ProfileSet | np.ndarray) -> ScatterProjection:
    """Project mean-centered profiles onto their top two principal directions.

    Explained variances use the n-1 denominator. Each axis is oriented so its
    largest-magnitude loading is positive.
    """
    x = profiles.normalized_matrix if isinstance(profiles, ProfileSet) else np.asarray(profiles, dtype=np.float64)
    n, d = x.shape
    if n < 3 or d < 2:
        raise PreconditionError(f"PCA needs at least 3 profiles of rank >= 2 (got {n} x {d})")
    if float(np.ptp(x, axis=0).max()) == 0.0:
        return ScatterProjection(np.zeros((n, 2)), (0.0, 0.0), np.zeros((2, d)), degenerate=True)
    xc = x - x.mean(axis=0)
    _, s, vt = np.linalg.svd(xc, full_matrices=False)
    comps = vt[:2].copy()
    for i in range(2):
        j = int(np.argmax(np.abs(comps[i])))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    s2 = np.zeros(2)
    s2[: min(2, len(s))] = s[:2]
    explained = tuple(float(v) for v in s2**2 / (n - 1))
    return ScatterProjection(xc @ comps.T, explained, comps)
