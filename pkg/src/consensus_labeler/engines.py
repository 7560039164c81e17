"""Three clustering engines (k-means, Ward agglomerative, BIRCH) plus PCA.

All engines are pure functions, deterministic given (input, parameters,
seed), and label every sample with a cluster id in [0, k). Tie-breaking is
pinned: nearest-centroid ties resolve to the lowest cluster id, and equal
Ward merge costs resolve to the lexicographically smallest cluster-index
pair, so results are reproducible across runs.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError


@dataclass
class ClusterAssignment:
    algorithm: str  # kmeans | agg | birch
    k: int
    labels: np.ndarray  # int64, per-sample cluster id in [0, k)
    objective: float | None = None
    matched_count: int | None = None  # set by alignment; None means unaligned

    @property
    def n(self) -> int:
        return int(self.labels.shape[0])

    def validate(self) -> None:
        if self.labels.ndim != 1:
            raise ValidationError("labels must be 1-D")
        if self.n and (self.labels.min() < 0 or self.labels.max() >= self.k):
            raise ValidationError("labels outside [0, k)")


@dataclass
class KMeansModel:
    centroids: np.ndarray  # k x p
    inertia: float
    iterations_run: int
    inertia_history: list[float] = field(default_factory=list)


def _as_matrix(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValidationError("input must be an n x p matrix")
    if not np.isfinite(x).all():
        raise ValidationError("non-finite input")
    return x


def _sq_dists(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d = (
        (x * x).sum(axis=1)[:, None]
        + (centers * centers).sum(axis=1)[None, :]
        - 2.0 * (x @ centers.T)
    )
    return np.maximum(d, 0.0)


def _kmeans_pp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    first = int(rng.integers(n))
    centers[0] = x[first]
    closest = _sq_dists(x, centers[:1])[:, 0]
    for j in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            # D^2 sampling
            r = rng.random() * total
            idx = int(np.searchsorted(np.cumsum(closest), r))
            idx = min(idx, n - 1)
        centers[j] = x[idx]
        closest = np.minimum(closest, _sq_dists(x, centers[j : j + 1])[:, 0])
    return centers


def _lloyd(
    x: np.ndarray, centers: np.ndarray, max_iter: int, tol: float
) -> tuple[np.ndarray, np.ndarray, float, int, list[float]]:
    k = centers.shape[0]
    history: list[float] = []
    labels = np.zeros(x.shape[0], dtype=np.int64)
    inertia = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        dists = _sq_dists(x, centers)
        labels = np.argmin(dists, axis=1)  # ties -> lowest cluster id
        inertia = float(dists[np.arange(x.shape[0]), labels].sum())
        history.append(inertia)
        new_centers = centers.copy()
        counts = np.bincount(labels, minlength=k)
        for c in range(k):
            if counts[c] > 0:
                new_centers[c] = x[labels == c].mean(axis=0)
        # Reseed any empty cluster at the point farthest from its current centroid.
        taken: set[int] = set()
        for c in range(k):
            if counts[c] == 0:
                far = _sq_dists(x, new_centers[c : c + 1])[:, 0]
                for idx in taken:
                    far[idx] = -1.0
                pick = int(np.argmax(far))
                new_centers[c] = x[pick]
                taken.add(pick)
        shift = float(np.linalg.norm(new_centers - centers, axis=1).max())
        centers = new_centers
        if shift <= tol:
            break
    # Final assignment against the converged centroids.
    dists = _sq_dists(x, centers)
    labels = np.argmin(dists, axis=1)
    inertia = float(dists[np.arange(x.shape[0]), labels].sum())
    history.append(inertia)
    return labels, centers, inertia, it, history


def kmeans(
    x: np.ndarray,
    k: int,
    seed: int = 0,
    n_init: int = 10,
    max_iter: int = 300,
    tol: float = 1e-6,
) -> tuple[ClusterAssignment, KMeansModel]:
    """Best-of-n_init Lloyd runs with k-means++ seeding.

    Inertia is non-increasing across iterations within a run; the run with
    the lowest final inertia wins (first such run on ties).
    """
    x = _as_matrix(x)
    n = x.shape[0]
    if k < 1:
        raise ValidationError("k must be at least 1")
    if k > n:
        raise ValidationError(f"k={k} exceeds sample count n={n}")
    rng = np.random.default_rng(seed)
    best: tuple[np.ndarray, np.ndarray, float, int, list[float]] | None = None
    for _ in range(n_init):
        centers = _kmeans_pp_init(x, k, rng)
        run = _lloyd(x, centers, max_iter, tol)
        if best is None or run[2] < best[2]:
            best = run
    labels, centers, inertia, iters, history = best
    assignment = ClusterAssignment(
        algorithm="kmeans", k=k, labels=labels, objective=inertia
    )
    model = KMeansModel(
        centroids=centers, inertia=inertia, iterations_run=iters, inertia_history=history
    )
    return assignment, model


def agglomerative(x: np.ndarray, k: int) -> ClusterAssignment:
    """Bottom-up Ward merging via the Lance-Williams update.

    The merge cost between clusters A and B is the increase in total
    within-cluster sum of squares, |A||B|/(|A|+|B|) * ||mean_A - mean_B||^2.
    Greedy: at each step merge the globally cheapest active pair, ties going
    to the lexicographically smallest index pair. Final cluster ids are
    ordered by each cluster's smallest member index.
    """
    x = _as_matrix(x)
    n = x.shape[0]
    if k < 1 or k > n:
        raise ValidationError(f"k={k} out of range for n={n}")
    sizes = np.ones(n)
    active = np.ones(n, dtype=bool)
    # cost[i, j] = Ward merge cost; singletons: ||xi - xj||^2 / 2
    cost = _sq_dists(x, x) / 2.0
    np.fill_diagonal(cost, np.inf)
    parent = np.arange(n)

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    masked = cost.copy()
    remaining = n
    while remaining > k:
        flat = int(np.argmin(masked))  # row-major first occurrence = lexicographic
        i, j = divmod(flat, n)
        if i > j:
            i, j = j, i
        d_ij = cost[i, j]
        si, sj = sizes[i], sizes[j]
        # Lance-Williams for the Ward objective-increase costs.
        others = active.copy()
        others[i] = others[j] = False
        st = sizes[others]
        new_costs = (
            (si + st) * cost[i, others] + (sj + st) * cost[j, others] - st * d_ij
        ) / (si + sj + st)
        cost[i, others] = new_costs
        cost[others, i] = new_costs
        sizes[i] = si + sj
        active[j] = False
        parent[find(j)] = find(i)
        masked[i, :] = np.inf
        masked[:, i] = np.inf
        masked[i, others] = new_costs
        masked[others, i] = new_costs
        masked[j, :] = np.inf
        masked[:, j] = np.inf
        remaining -= 1

    roots = [find(i) for i in range(n)]
    order: dict[int, int] = {}
    for r in roots:
        if r not in order:
            order[r] = len(order)
    labels = np.array([order[r] for r in roots], dtype=np.int64)
    return ClusterAssignment(algorithm="agg", k=k, labels=labels)


@dataclass
class CFEntry:
    """Clustering feature: additive (count, linear sum, squared-norm sum)."""

    count_n: int
    linear_sum: np.ndarray
    square_sum: float

    @classmethod
    def of_point(cls, point: np.ndarray) -> "CFEntry":
        return cls(1, point.copy(), float(point @ point))

    def centroid(self) -> np.ndarray:
        return self.linear_sum / self.count_n

    def merged(self, other: "CFEntry") -> "CFEntry":
        return CFEntry(
            self.count_n + other.count_n,
            self.linear_sum + other.linear_sum,
            self.square_sum + other.square_sum,
        )

    def absorb(self, other: "CFEntry") -> None:
        self.count_n += other.count_n
        self.linear_sum += other.linear_sum
        self.square_sum += other.square_sum

    def radius_if_merged(self, other: "CFEntry") -> float:
        m = self.merged(other)
        centroid = m.centroid()
        var = m.square_sum / m.count_n - float(centroid @ centroid)
        return float(np.sqrt(max(var, 0.0)))


class _CFNode:
    __slots__ = ("is_leaf", "entries", "children")

    def __init__(self, is_leaf: bool):
        self.is_leaf = is_leaf
        self.entries: list[CFEntry] = []
        self.children: list["_CFNode"] = []  # parallel to entries when internal


@dataclass
class CFTree:
    """CF-tree built by single-pass insertion, nearest-entry descent."""

    branching_factor: int = 50
    threshold: float = 0.5
    root: _CFNode | None = None
    leaf_entries: list[CFEntry] = field(default_factory=list)

    def total_cf(self) -> CFEntry:
        if not self.leaf_entries:
            raise ValidationError("empty tree")
        total = CFEntry(0, np.zeros_like(self.leaf_entries[0].linear_sum), 0.0)
        for e in self.leaf_entries:
            total.absorb(e)
        return total


def _nearest_entry(entries: list[CFEntry], point_cf: CFEntry) -> int:
    target = point_cf.centroid()
    best = 0
    best_d = np.inf
    for i, e in enumerate(entries):
        d = float(np.sum((e.centroid() - target) ** 2))
        if d < best_d:
            best_d = d
            best = i
    return best


def _split_node(node: _CFNode) -> tuple[tuple[CFEntry, _CFNode], tuple[CFEntry, _CFNode]]:
    """Split an overflowing node around its two farthest-apart entries."""
    cents = np.stack([e.centroid() for e in node.entries])
    d = _sq_dists(cents, cents)
    np.fill_diagonal(d, -1.0)
    i, j = divmod(int(np.argmax(d)), d.shape[0])
    left = _CFNode(node.is_leaf)
    right = _CFNode(node.is_leaf)
    for idx, entry in enumerate(node.entries):
        di = float(np.sum((entry.centroid() - cents[i]) ** 2))
        dj = float(np.sum((entry.centroid() - cents[j]) ** 2))
        side = left if di <= dj else right
        side.entries.append(entry)
        if not node.is_leaf:
            side.children.append(node.children[idx])
    def summary(n: _CFNode) -> CFEntry:
        cf = CFEntry(0, np.zeros_like(n.entries[0].linear_sum), 0.0)
        for e in n.entries:
            cf.absorb(e)
        return cf
    return (summary(left), left), (summary(right), right)


def _insert(
    tree: CFTree, node: _CFNode, point_cf: CFEntry
) -> tuple[CFEntry, tuple[tuple[CFEntry, _CFNode], tuple[CFEntry, _CFNode]] | None]:
    """Insert into the subtree; returns (entry the point landed in, split or None)."""
    if node.is_leaf:
        if node.entries:
            idx = _nearest_entry(node.entries, point_cf)
            if node.entries[idx].radius_if_merged(point_cf) <= tree.threshold:
                node.entries[idx].absorb(point_cf)
                return node.entries[idx], None
        entry = CFEntry(point_cf.count_n, point_cf.linear_sum.copy(), point_cf.square_sum)
        node.entries.append(entry)
        tree.leaf_entries.append(entry)
        if len(node.entries) > tree.branching_factor:
            return entry, _split_node(node)
        return entry, None
    idx = _nearest_entry(node.entries, point_cf)
    landed, split = _insert(tree, node.children[idx], point_cf)
    if split is None:
        node.entries[idx].absorb(point_cf)
        return landed, None
    (cf_l, node_l), (cf_r, node_r) = split
    node.entries[idx] = cf_l
    node.children[idx] = node_l
    node.entries.append(cf_r)
    node.children.append(node_r)
    if len(node.entries) > tree.branching_factor:
        return landed, _split_node(node)
    return landed, None


def build_cf_tree(
    x: np.ndarray, threshold: float = 0.5, branching_factor: int = 50
) -> tuple[CFTree, list[CFEntry]]:
    """Phase-1 BIRCH: single-pass CF-tree build.

    Returns the tree and, per sample, the leaf entry that absorbed it (entry
    objects are stable across node splits, so the mapping survives).
    """
    x = _as_matrix(x)
    if threshold <= 0:
        raise ValidationError("threshold must be positive")
    if branching_factor < 2:
        raise ValidationError("branching factor must be at least 2")
    tree = CFTree(branching_factor=branching_factor, threshold=threshold)
    tree.root = _CFNode(is_leaf=True)
    sample_entry: list[CFEntry] = []
    for row in x:
        point_cf = CFEntry.of_point(row)
        landed, split = _insert(tree, tree.root, point_cf)
        if split is not None:
            (cf_l, node_l), (cf_r, node_r) = split
            new_root = _CFNode(is_leaf=False)
            new_root.entries = [cf_l, cf_r]
            new_root.children = [node_l, node_r]
            tree.root = new_root
        sample_entry.append(landed)
    return tree, sample_entry


def birch(
    x: np.ndarray,
    k: int,
    threshold: float = 0.5,
    branching_factor: int = 50,
) -> tuple[ClusterAssignment, CFTree]:
    """CF-tree condensation followed by Ward clustering of leaf centroids.

    Each sample inherits the global cluster of the leaf subcluster that
    absorbed it during the single-pass build.
    """
    x = _as_matrix(x)
    n = x.shape[0]
    if k < 1 or k > n:
        raise ValidationError(f"k={k} out of range for n={n}")
    tree, sample_entry = build_cf_tree(x, threshold, branching_factor)
    leaves = tree.leaf_entries
    if k > len(leaves):
        raise ValidationError(
            f"k={k} exceeds the {len(leaves)} leaf subclusters; lower the threshold"
        )
    centroids = np.stack([e.centroid() for e in leaves])
    global_assignment = agglomerative(centroids, k)
    entry_cluster = {id(e): int(c) for e, c in zip(leaves, global_assignment.labels)}
    labels = np.array([entry_cluster[id(e)] for e in sample_entry], dtype=np.int64)
    return ClusterAssignment(algorithm="birch", k=k, labels=labels), tree


@dataclass
class PcaModel:
    mean: np.ndarray
    components: np.ndarray  # q x p, orthonormal rows
    explained_variance: np.ndarray  # q, non-increasing


def pca_fit(x: np.ndarray, q: int) -> PcaModel:
    """Top-q principal axes of the sample covariance, via SVD of centered data."""
    x = _as_matrix(x)
    n, p = x.shape
    if q == 0:
        raise ValidationError("q must be at least 1")
    if q > min(n, p):
        raise ValidationError(f"q={q} exceeds min(n, p)={min(n, p)}")
    if n < 2:
        raise ValidationError("need at least 2 samples")
    mean = x.mean(axis=0)
    centered = x - mean
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    components = vt[:q]
    # Deterministic sign: largest-magnitude coordinate of each component positive.
    for row in components:
        pivot = np.argmax(np.abs(row))
        if row[pivot] < 0:
            row *= -1.0
    explained = (s[:q] ** 2) / (n - 1)
    if (explained < 1e-12).any():
        warnings.warn("rank-deficient input: near-zero explained variance", stacklevel=2)
    return PcaModel(mean=mean, components=components, explained_variance=explained)


def pca_transform(model: PcaModel, x: np.ndarray) -> np.ndarray:
    x = _as_matrix(x)
    if x.shape[1] != model.mean.shape[0]:
        raise ValidationError(
            f"dimension mismatch: input p={x.shape[1]}, model p={model.mean.shape[0]}"
        )
    return (x - model.mean) @ model.components.T
