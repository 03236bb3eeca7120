"""Diagnostics over run artifacts: encoder divergence, gradient alignment,
context clustering and routing-context correlation."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from .autodiff import Tensor
from .errors import DegenerateInputError, InputError

DOMINANT_DIRECTION_METHOD = "normalized mean of per-step unit gradients"

_BLOCK = re.compile(r"^encoder\.blocks\.(\d+)\.")


# ---------------------------------------------------------------- divergence


@dataclass
class DistanceReport:
    blocks: list[float]  # one entry per encoder block
    other: float  # patch embedding, positions, prompts
    total: float

    def halves(self) -> tuple[float, float]:
        """Mean distance of the shallower and deeper half of the blocks."""
        mid = len(self.blocks) // 2
        return float(np.mean(self.blocks[:mid])), float(np.mean(self.blocks[mid:]))


def _as_array(v) -> np.ndarray:
    return v.data if isinstance(v, Tensor) else np.asarray(v, dtype=np.float64)


def encoder_l2_distance(a: Mapping, b: Mapping) -> DistanceReport:
    """Per-block Euclidean distance between two encoders' parameters."""
    keys_a = {k for k in a if k.startswith("encoder.")}
    keys_b = {k for k in b if k.startswith("encoder.")}
    if keys_a != keys_b:
        raise InputError(f"encoders differ in parameter names: {sorted(keys_a ^ keys_b)[:4]}")
    if not keys_a:
        raise InputError("no encoder parameters to compare")
    sq: dict[int, float] = {}
    other = 0.0
    for k in sorted(keys_a):
        x, y = _as_array(a[k]), _as_array(b[k])
        if x.shape != y.shape:
            raise InputError(f"shape mismatch for {k!r}: {x.shape} vs {y.shape}")
        d = float(np.sum((x - y) ** 2))
        m = _BLOCK.match(k)
        if m:
            sq[int(m.group(1))] = sq.get(int(m.group(1)), 0.0) + d
        else:
            other += d
    depth = max(sq) + 1 if sq else 0
    blocks = [float(np.sqrt(sq.get(i, 0.0))) for i in range(depth)]
    return DistanceReport(blocks, float(np.sqrt(other)), float(np.sqrt(sum(sq.values()) + other)))


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    x, y = np.asarray(x, float), np.asarray(y, float)
    if len(x) < 2 or np.ptp(x) == 0 or np.ptp(y) == 0:
        raise DegenerateInputError("spearman needs at least two non-constant series values")
    return float(stats.spearmanr(x, y).statistic)


# ---------------------------------------------------------------- gradient alignment


def _snapshot_matrix(snapshots) -> np.ndarray:
    rows = [s.vector if hasattr(s, "vector") else np.asarray(s, float) for s in snapshots]
    if len(rows) < 2:
        raise InputError("need at least two gradient snapshots")
    if len({r.shape for r in rows}) != 1:
        raise InputError("gradient snapshots differ in length")
    g = np.stack(rows).astype(np.float64)
    if not np.isfinite(g).all():
        raise InputError("gradient snapshots contain non-finite values")
    return g


def _unit_rows(g: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(g, axis=1)
    keep = norms > 0
    if not keep.any():
        raise DegenerateInputError("all gradient snapshots are zero")
    return g[keep] / norms[keep, None]


def dominant_direction(snapshots) -> np.ndarray:
    """Unit vector along the mean of the unit-normalised gradients (zero snapshots skipped)."""
    mean = _unit_rows(_snapshot_matrix(snapshots)).mean(axis=0)
    n = np.linalg.norm(mean)
    if n < 1e-12:
        raise DegenerateInputError("gradient directions cancel; no dominant direction")
    return mean / n


@dataclass
class CosineSeries:
    series: np.ndarray
    mean: float
    std: float


def grad_cosine_series(snapshots, direction: np.ndarray | None = None) -> CosineSeries:
    g = _snapshot_matrix(snapshots)
    d = dominant_direction(g) if direction is None else np.asarray(direction, float)
    norms = np.linalg.norm(g, axis=1)
    cos = np.where(norms > 0, g @ d / np.where(norms > 0, norms, 1.0), 0.0)
    cos = np.clip(cos, -1.0, 1.0)
    return CosineSeries(cos, float(cos.mean()), float(cos.std()))


# ---------------------------------------------------------------- clustering


@dataclass
class ClusterReport:
    assignments: np.ndarray
    centroids: np.ndarray
    inertia: float
    inertia_trace: list[float]
    iterations: int
    coords: np.ndarray | None = None
    similarity: dict = field(default_factory=dict)


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centers = [int(rng.integers(n))]
    closest = _sq_dists(x, x[centers]).ravel()
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:  # fewer distinct points than k: take unused indices in order
            idx = next(i for i in range(n) if i not in centers)
        else:
            idx = int(rng.choice(n, p=closest / total))
        centers.append(idx)
        closest = np.minimum(closest, _sq_dists(x, x[idx:idx + 1]).ravel())
    return x[centers].copy()


def _inertia(x: np.ndarray, centroids: np.ndarray, assign: np.ndarray) -> float:
    return float(((x - centroids[assign]) ** 2).sum())


def kmeans(x: np.ndarray, k: int, seed: int = 0, max_iter: int = 300, tol: float = 1e-6) -> ClusterReport:
    """Lloyd's algorithm from a seeded k-means++ start."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or len(x) == 0:
        raise InputError("kmeans expects a non-empty (n, d) array")
    n = len(x)
    if not 1 <= k <= n:
        raise InputError(f"k={k} must lie in 1..{n}")
    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp(x, k, rng)
    trace: list[float] = []
    it = 0
    for it in range(1, max_iter + 1):
        d = _sq_dists(x, centroids)
        assign = d.argmin(axis=1)
        trace.append(_inertia(x, centroids, assign))
        new = centroids.copy()
        for j in range(k):
            members = x[assign == j]
            if len(members):
                new[j] = members.mean(axis=0)
        shift = float(np.abs(new - centroids).max())
        centroids = new
        if shift <= tol:
            break
    d = _sq_dists(x, centroids)
    assign = d.argmin(axis=1)
    inertia = _inertia(x, centroids, assign)
    trace.append(inertia)
    if any(b > a * (1 + 1e-9) + 1e-9 for a, b in zip(trace, trace[1:])):
        raise AssertionError("k-means inertia increased between iterations")
    return ClusterReport(assign, centroids, inertia, trace, it)


def exemplars(x: np.ndarray, report: ClusterReport, m: int = 4) -> list[list[int]]:
    """Indices of the ``m`` members nearest to each centroid (fewer if the cluster is small)."""
    d = _sq_dists(np.asarray(x, float), report.centroids)
    out = []
    for j in range(len(report.centroids)):
        members = np.flatnonzero(report.assignments == j)
        order = members[np.argsort(d[members, j], kind="stable")]
        out.append([int(i) for i in order[:m]])
    return out


@dataclass
class PCAResult:
    coords: np.ndarray  # (n, 2)
    axes: np.ndarray  # (2, d), orthonormal rows
    variance: np.ndarray  # (2,)


def pca_2d(x: np.ndarray) -> PCAResult:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or len(x) < 2:
        raise InputError("pca needs at least two vectors")
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / (len(x) - 1)
    vals, vecs = np.linalg.eigh(cov)
    if vals[-1] <= 1e-15 * max(1.0, np.abs(x).max() ** 2):
        raise DegenerateInputError("all vectors are identical; no principal axis")
    order = np.argsort(vals)[::-1][:2]
    axes = vecs[:, order].T
    if axes.shape[0] < 2:
        axes = np.vstack([axes, np.zeros_like(axes)])
    # fix sign so the largest-magnitude loading of each axis is positive
    signs = np.sign(axes[np.arange(len(axes)), np.abs(axes).argmax(axis=1)])
    axes = axes * np.where(signs == 0, 1.0, signs)[:, None]
    variance = np.maximum(vals[order], 0.0)
    return PCAResult(centered @ axes.T, axes, variance)


def _pair_cosines(features: np.ndarray, assign: np.ndarray) -> tuple[float, float]:
    """Mean cosine over same-cluster pairs and over cross-cluster pairs (i < j)."""
    f = np.asarray(features, dtype=np.float64)
    norms = np.linalg.norm(f, axis=1)
    if (norms == 0).any():
        raise DegenerateInputError("zero feature vector has no cosine similarity")
    u = f / norms[:, None]
    n = len(u)
    total = u.sum(axis=0)
    all_pairs = (total @ total - n) / 2.0
    intra_sum, intra_n = 0.0, 0
    for j in np.unique(assign):
        s = u[assign == j]
        v = s.sum(axis=0)
        intra_sum += (v @ v - len(s)) / 2.0
        intra_n += len(s) * (len(s) - 1) // 2
    inter_n = n * (n - 1) // 2 - intra_n
    if intra_n == 0 or inter_n == 0:
        raise DegenerateInputError("clustering has no intra-cluster or no inter-cluster pairs")
    return float(intra_sum / intra_n), float((all_pairs - intra_sum) / inter_n)


def intra_inter_similarity(assignments: np.ndarray, visual: np.ndarray, text: np.ndarray) -> dict:
    """Intra- vs inter-cluster mean cosine of paired features, with the percentage lift."""
    assign = np.asarray(assignments)
    out = {}
    for name, feats in (("visual", visual), ("textual", text)):
        if len(feats) != len(assign):
            raise InputError(f"{name} features and assignments differ in length")
        intra, inter = _pair_cosines(feats, assign)
        lift = 100.0 * (intra - inter) / abs(inter) if inter != 0 else float("inf")
        out[name] = {"intra": intra, "inter": inter, "lift_pct": lift}
    return out


# ---------------------------------------------------------------- routing vs context


def _row_cos(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na, nb = np.linalg.norm(a, axis=1), np.linalg.norm(b, axis=1)
    if (na == 0).any() or (nb == 0).any():
        raise DegenerateInputError("zero vector in cosine pair")
    return np.clip((a * b).sum(axis=1) / (na * nb), -1.0, 1.0)


def sample_pairs(n: int, n_pairs: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded ordered pairs (i, j) with i != j."""
    if n < 2:
        raise InputError("need at least two samples to form pairs")
    rng = np.random.default_rng([seed, 0xC0DE])
    i = rng.integers(0, n, n_pairs)
    j = (i + rng.integers(1, n, n_pairs)) % n
    return i, j


def pearson(x: np.ndarray, y: np.ndarray) -> float:
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise DegenerateInputError("pearson correlation of a constant series")
    return float(np.clip(np.corrcoef(x, y)[0, 1], -1.0, 1.0))


@dataclass
class CorrelationReport:
    r: float
    null_r: float
    n_pairs: int
    x: np.ndarray
    y: np.ndarray


def routing_context_correlation(
    contexts: np.ndarray, routing: np.ndarray, n_pairs: int = 10_000, seed: int = 0
) -> CorrelationReport:
    """Pearson r between context cosine and routing cosine over seeded sample pairs.

    ``routing`` rows are the per-layer routing weights concatenated. The null
    pairs each context pair with the routing of an independently shuffled pair.
    """
    c, g = np.asarray(contexts, float), np.asarray(routing, float)
    if len(c) != len(g):
        raise InputError("contexts and routing traces differ in sample count")
    i, j = sample_pairs(len(c), n_pairs, seed)
    x = _row_cos(c[i], c[j])
    y = _row_cos(g[i], g[j])
    perm = np.random.default_rng([seed, 0x5417]).permutation(n_pairs)
    return CorrelationReport(pearson(x, y), pearson(x, y[perm]), n_pairs, x, y)
