"""Unsupervised disentanglement metric.

For each code component, traversal sequences are generated (one component
swept over a fixed grid, everything else held), flattened and unit-normalized
into columns of Y. If components map to distinct generative factors, each
component's samples concentrate on their own low-dimensional subspace, so a
sparse self-expression (each column written as a combination of a few other
columns, never itself) followed by spectral clustering should recover the
component grouping; that recovery is scored with normalized mutual
information. A second term asks that real observed samples lie close to the
span of the generated ones. The final score is
alpha * NMI + (1 - alpha) * (1 - mean_distance), averaged over independently
generated sample sets.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .latent import build_traversal, sample_prior
from .models import generate
from .seeding import stream

__all__ = [
    "MetricClusters",
    "ClusteringResult",
    "SubspaceScoreReport",
    "MetricParams",
    "DegenerateSampleError",
    "InvariantViolation",
    "generate_metric_clusters",
    "omp_self_expression",
    "affinity_from_coefficients",
    "cluster",
    "nmi",
    "projection_distance",
    "subspace_score",
    "score_from_parts",
]

TRAVERSAL_VALUES = (-2.0, -1.0, 0.0, 1.0, 2.0)


class DegenerateSampleError(RuntimeError):
    """A generated sample had (numerically) zero norm and cannot be normalized."""


class InvariantViolation(ValueError):
    """An input violates a structural invariant of the metric pipeline."""


@dataclass
class MetricClusters:
    """Unit-normalized generated samples as columns, grouped by factor."""

    data: np.ndarray          # [D x N]
    ground_truth: np.ndarray  # [N] factor index per column
    k: int
    sequences_per_factor: int
    samples_per_sequence: int
    values: tuple

    def __post_init__(self):
        n = self.k * self.sequences_per_factor * self.samples_per_sequence
        if self.data.shape[1] != n or self.ground_truth.shape != (n,):
            raise InvariantViolation(
                f"expected {n} columns (k * sequences * samples), got {self.data.shape[1]}")
        norms = np.linalg.norm(self.data, axis=0)
        if not np.allclose(norms, 1.0, atol=1e-9):
            raise InvariantViolation("columns must be unit-normalized")


@dataclass
class ClusteringResult:
    coefficients: np.ndarray  # U, [N x N], zero diagonal
    affinity: np.ndarray      # |U| + |U|^T
    labels: np.ndarray
    nmi: float
    n_components: int = 1     # connected components of the affinity graph
    disconnected: bool = False


@dataclass(frozen=True)
class MetricParams:
    alpha: float = 0.5
    n_sets: int = 5
    sequences_per_factor: int = 10
    samples_per_sequence: int = 5
    values: tuple = TRAVERSAL_VALUES
    sparsity: int = 0         # 0 -> samples_per_sequence - 1
    n_observed: int = 6400
    seed: int = 0

    def effective_sparsity(self):
        return self.sparsity if self.sparsity >= 1 else self.samples_per_sequence - 1


@dataclass
class SubspaceScoreReport:
    per_set: list            # of dicts: {nmi, mean_distance, score, disconnected}
    aggregate_score: float
    aggregate_nmi: float
    aggregate_distance: float
    alpha: float
    n_sets: int
    n_observed: int
    sparsity: int
    seed: int

    def to_json(self, indent=2):
        return json.dumps(asdict(self), indent=indent, sort_keys=True)


def score_from_parts(nmi_value, mean_distance, alpha):
    return alpha * nmi_value + (1.0 - alpha) * (1.0 - mean_distance)


# ---------------------------------------------------------------------------
# Cluster generation
# ---------------------------------------------------------------------------


def generate_metric_clusters(bundle, rng, sequences_per_factor=10,
                             samples_per_sequence=5,
                             values=TRAVERSAL_VALUES) -> MetricClusters:
    """Generate the grouped traversal samples Y = [Y_1, ..., Y_k].

    For each factor: `sequences_per_factor` base codes (and shared noises for
    the GAN family) are drawn from the prior, and each base emits one
    traversal over `values` in that factor's component. Images are generated
    in evaluation mode, flattened, and unit-normalized column-wise.
    """
    values = tuple(values)
    if len(values) != samples_per_sequence:
        raise ValueError(f"len(values)={len(values)} must equal "
                         f"samples_per_sequence={samples_per_sequence}")
    spec = bundle.latent_spec
    columns, labels = [], []
    for factor in range(spec.code_dim):
        for seq in range(sequences_per_factor):
            base, noise = sample_prior(spec, 1, rng)
            codes = build_traversal(base[0], factor, values).codes
            noises = np.tile(noise, (len(values), 1)) if spec.noise_dim else None
            images = generate(bundle, codes, noises)
            flat = np.asarray(images, dtype=np.float64).reshape(len(values), -1)
            norms = np.linalg.norm(flat, axis=1)
            if np.any(norms < 1e-12):
                raise DegenerateSampleError(
                    f"zero-norm sample in factor {factor}, sequence {seq}")
            columns.append(flat / norms[:, None])
            labels.extend([factor] * len(values))
    data = np.concatenate(columns, axis=0).T  # D x N
    return MetricClusters(
        data=data, ground_truth=np.asarray(labels, dtype=np.int64),
        k=spec.code_dim, sequences_per_factor=sequences_per_factor,
        samples_per_sequence=samples_per_sequence, values=values,
    )


# ---------------------------------------------------------------------------
# Sparse self-expression via orthogonal matching pursuit
# ---------------------------------------------------------------------------


def omp_self_expression(data, sparsity, tol=1e-6):
    """Express each column as a sparse combination of the *other* columns.

    Greedy pursuit: repeatedly pick the column most correlated with the
    residual (the column itself is excluded, which enforces the zero
    diagonal), refit least squares on the support, and stop early once the
    residual norm drops below `tol`. Returns U [N x N] with diag(U) = 0.
    """
    data = np.asarray(data, dtype=np.float64)
    n = data.shape[1]
    if n < 2:
        raise ValueError("self-expression needs at least two columns")
    if not (1 <= sparsity < n):
        raise ValueError(f"sparsity must be in [1, {n - 1}], got {sparsity}")
    coeffs = np.zeros((n, n))
    for j in range(n):
        y = data[:, j]
        support = []
        coef = None
        residual = y
        for _ in range(sparsity):
            corr = np.abs(data.T @ residual)
            corr[j] = -np.inf
            if support:
                corr[support] = -np.inf
            pick = int(np.argmax(corr))
            support.append(pick)
            coef, *_ = np.linalg.lstsq(data[:, support], y, rcond=None)
            residual = y - data[:, support] @ coef
            if np.linalg.norm(residual) < tol:
                break
        coeffs[support, j] = coef
    return coeffs


def affinity_from_coefficients(coeffs):
    return np.abs(coeffs) + np.abs(coeffs).T


# ---------------------------------------------------------------------------
# Spectral clustering
# ---------------------------------------------------------------------------


def _kmeans(points, k, rng, restarts=10, max_iter=300):
    """Seeded k-means with k-means++ starts; best inertia over restarts wins."""
    n = len(points)
    best_labels, best_inertia = None, np.inf
    for _ in range(restarts):
        centers = np.empty((k, points.shape[1]))
        centers[0] = points[rng.integers(n)]
        d2 = np.sum((points - centers[0]) ** 2, axis=1)
        for i in range(1, k):
            total = d2.sum()
            if total <= 0:
                centers[i] = points[rng.integers(n)]
            else:
                centers[i] = points[rng.choice(n, p=d2 / total)]
            d2 = np.minimum(d2, np.sum((points - centers[i]) ** 2, axis=1))
        labels = None
        for _ in range(max_iter):
            dists = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
            new_labels = dists.argmin(axis=1)
            if labels is not None and np.array_equal(new_labels, labels):
                break
            labels = new_labels
            for i in range(k):
                mask = labels == i
                if mask.any():
                    centers[i] = points[mask].mean(axis=0)
                else:  # re-seed an empty cluster at the worst-fit point
                    centers[i] = points[dists.min(axis=1).argmax()]
        inertia = float(((points - centers[labels]) ** 2).sum())
        if inertia < best_inertia:
            best_inertia, best_labels = inertia, labels.copy()
    return best_labels


def count_graph_components(affinity):
    graph = csr_matrix((affinity > 0).astype(np.int8))
    n_components, _ = connected_components(graph, directed=False)
    return int(n_components)


def cluster(affinity, k, seed=0, restarts=10):
    """Spectral clustering of a symmetric non-negative affinity into k groups.

    Embeds with the k bottom eigenvectors of the symmetric normalized
    Laplacian (rows re-normalized), then runs seeded k-means. A graph with
    more than k connected components is clustered anyway; callers can flag it
    via `count_graph_components`.
    """
    affinity = np.asarray(affinity, dtype=np.float64)
    if affinity.ndim != 2 or affinity.shape[0] != affinity.shape[1]:
        raise InvariantViolation(f"affinity must be square, got {affinity.shape}")
    if not np.allclose(affinity, affinity.T, atol=1e-8):
        raise InvariantViolation("affinity must be symmetric")
    if affinity.min() < 0:
        raise InvariantViolation("affinity must be non-negative")
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    degrees = affinity.sum(axis=1)
    inv_sqrt = np.where(degrees > 0, degrees, 1.0) ** -0.5
    lap = np.eye(len(affinity)) - inv_sqrt[:, None] * affinity * inv_sqrt[None, :]
    eigvals, eigvecs = np.linalg.eigh(lap)
    embedding = eigvecs[:, :k]
    norms = np.linalg.norm(embedding, axis=1, keepdims=True)
    embedding = np.divide(embedding, norms, out=np.zeros_like(embedding), where=norms > 0)
    return _kmeans(embedding, k, stream(seed, "spectral.kmeans"), restarts=restarts)


# ---------------------------------------------------------------------------
# Normalized mutual information
# ---------------------------------------------------------------------------


def nmi(labels_a, labels_b):
    """Mutual information normalized by the arithmetic mean of the entropies.

    Invariant to renaming of either labeling; 1.0 for identical partitions,
    and defined as 1.0 when both partitions are single-cluster (entropy 0).
    """
    a = np.asarray(labels_a).reshape(-1)
    b = np.asarray(labels_b).reshape(-1)
    if a.shape != b.shape or a.size == 0:
        raise ValueError(f"labelings must be nonempty and equal-length, "
                         f"got {a.shape} vs {b.shape}")
    n = a.size
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    contingency = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(contingency, (ai, bi), 1.0)
    pij = contingency / n
    pa, pb = pij.sum(axis=1), pij.sum(axis=0)
    h_a = float(-np.sum(pa[pa > 0] * np.log(pa[pa > 0])))
    h_b = float(-np.sum(pb[pb > 0] * np.log(pb[pb > 0])))
    mask = pij > 0
    mi = float(np.sum(pij[mask] * (np.log(pij[mask])
                                   - np.log(np.outer(pa, pb)[mask]))))
    mean_h = 0.5 * (h_a + h_b)
    if mean_h == 0.0:
        return 1.0
    return float(np.clip(mi / mean_h, 0.0, 1.0))


# ---------------------------------------------------------------------------
# Projection distance
# ---------------------------------------------------------------------------


def projection_distance(observed, data, rank_rtol=1e-10):
    """Mean distance from observed columns to the span of the generated ones.

    The span basis is orthonormalized once by SVD (singular values below
    rank_rtol * s_max are dropped; traversal samples can be nearly
    collinear). For unit-normalized observed columns each distance lies in
    [0, 1]: zero exactly when the sample sits in the span, one when it is
    orthogonal to it.
    """
    y = data.data if isinstance(data, MetricClusters) else np.asarray(data, dtype=np.float64)
    x = np.asarray(observed, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] != y.shape[0]:
        raise ValueError(f"dimension mismatch: observed {x.shape[0]} vs span {y.shape[0]}")
    u, s, _ = np.linalg.svd(y, full_matrices=False)
    basis = u[:, s > rank_rtol * s[0]]
    proj_sq = np.sum((basis.T @ x) ** 2, axis=0)
    norm_sq = np.sum(x ** 2, axis=0)
    dist = np.sqrt(np.maximum(norm_sq - proj_sq, 0.0))
    return float(dist.mean())


# ---------------------------------------------------------------------------
# Full metric
# ---------------------------------------------------------------------------


def _observed_matrix(observed_dataset, n_observed, rng):
    """Flatten and unit-normalize observed samples (drawn from the eval split)."""
    if hasattr(observed_dataset, "splits"):
        pool = observed_dataset.splits["eval"]
        take = min(n_observed, len(pool))
        rows = rng.choice(len(pool), size=take, replace=False)
        flat = pool[rows].reshape(take, -1).astype(np.float64).T
    else:
        flat = np.asarray(observed_dataset, dtype=np.float64)
        if flat.ndim != 2:
            raise ValueError("observed matrix must be 2-D [D x n]")
        if n_observed < flat.shape[1]:
            rows = rng.choice(flat.shape[1], size=n_observed, replace=False)
            flat = flat[:, rows]
    norms = np.linalg.norm(flat, axis=0)
    if np.any(norms < 1e-12):
        raise DegenerateSampleError("zero-norm observed sample")
    return flat / norms[None, :]


def subspace_score(bundle, observed_dataset, params: MetricParams = MetricParams()):
    """Run the full metric: n_sets independent generations, each scored as
    alpha * NMI + (1 - alpha) * (1 - mean distance), then averaged."""
    if not (0.0 <= params.alpha <= 1.0):
        raise ValueError(f"alpha must lie in [0,1], got {params.alpha}")
    sparsity = params.effective_sparsity()
    observed = _observed_matrix(observed_dataset, params.n_observed,
                                stream(params.seed, "metric.observed"))
    per_set = []
    for set_idx in range(params.n_sets):
        rng = stream(params.seed, f"metric.set{set_idx}")
        clusters = generate_metric_clusters(
            bundle, rng,
            sequences_per_factor=params.sequences_per_factor,
            samples_per_sequence=params.samples_per_sequence,
            values=params.values,
        )
        result = self_expressive_clustering(clusters, sparsity=sparsity,
                                            seed=params.seed * 1000 + set_idx)
        d_bar = projection_distance(observed, clusters)
        per_set.append({
            "nmi": result.nmi,
            "mean_distance": d_bar,
            "score": score_from_parts(result.nmi, d_bar, params.alpha),
            "disconnected": result.disconnected,
        })
    return SubspaceScoreReport(
        per_set=per_set,
        aggregate_score=float(np.mean([s["score"] for s in per_set])),
        aggregate_nmi=float(np.mean([s["nmi"] for s in per_set])),
        aggregate_distance=float(np.mean([s["mean_distance"] for s in per_set])),
        alpha=params.alpha, n_sets=params.n_sets, n_observed=params.n_observed,
        sparsity=sparsity, seed=params.seed,
    )


def self_expressive_clustering(clusters: MetricClusters, sparsity, seed=0) -> ClusteringResult:
    """OMP self-expression -> affinity -> spectral clustering -> NMI."""
    coeffs = omp_self_expression(clusters.data, sparsity=sparsity)
    affinity = affinity_from_coefficients(coeffs)
    n_comp = count_graph_components(affinity)
    labels = cluster(affinity, clusters.k, seed=seed)
    return ClusteringResult(
        coefficients=coeffs,
        affinity=affinity,
        labels=labels,
        nmi=nmi(labels, clusters.ground_truth),
        n_components=n_comp,
        disconnected=n_comp > clusters.k,
    )
