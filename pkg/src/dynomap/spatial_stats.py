"""Spatial organization of attributions over a learned layout.

Moran's I with directed kNN weights, kNN coherence of the high-attribution
set, permutation nulls for both, and Procrustes comparison of layouts.
"""

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from itertools import combinations

import numpy as np

from .exceptions import DegenerateVariance, InputError, ShapeMismatch

DEFAULT_K = 10
DEFAULT_Q = 10.0
DEFAULT_PERMS = 1000


@dataclass
class KnnWeightMatrix:
    """Binary directed kNN weights stored as a neighbour index table."""

    neighbors: np.ndarray  # (N, k), ordered nearest first
    k: int

    @property
    def N(self):
        return self.neighbors.shape[0]

    def dense(self):
        W = np.zeros((self.N, self.N), dtype=np.int64)
        W[np.arange(self.N)[:, None], self.neighbors] = 1
        return W


def knn_weights(coords, k, chunk=512):
    """Euclidean kNN per row; equal distances are broken by smaller index."""
    coords = np.asarray(coords, dtype=np.float64)
    N = coords.shape[0]
    if not 1 <= k < N:
        raise InputError(f"k must satisfy 1 <= k < N (k={k}, N={N})")
    if not np.all(np.isfinite(coords)):
        raise InputError("coordinates must be finite")
    nbrs = np.empty((N, k), dtype=np.int64)
    for s in range(0, N, chunk):
        rows = np.arange(s, min(N, s + chunk))
        diff = coords[rows, None, :] - coords[None, :, :]
        d2 = (diff * diff).sum(axis=-1)
        d2[np.arange(rows.size), rows] = np.inf
        # stable sort keeps index order among equal distances
        nbrs[rows] = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return KnnWeightMatrix(nbrs, k)


def morans_i(a, W):
    """Global Moran's I of ``a`` under binary weights ``W``.

    ``W`` is a KnnWeightMatrix or a dense (N, N) array.
    """
    a = np.asarray(a, dtype=np.float64)
    z = a - a.mean()
    denom = float(z @ z)
    if np.ptp(a) == 0 or denom == 0:
        raise DegenerateVariance("Moran's I is undefined for a constant attribution vector")
    if isinstance(W, KnnWeightMatrix):
        if W.N != a.size:
            raise ShapeMismatch(f"{a.size} values for {W.N} weight rows")
        num = float(z @ z[W.neighbors].sum(axis=1))
        s0 = W.N * W.k
    else:
        W = np.asarray(W, dtype=np.float64)
        if W.shape != (a.size, a.size):
            raise ShapeMismatch(f"weight matrix {W.shape} does not match {a.size} values")
        num = float(z @ W @ z)
        s0 = float(W.sum())
    return a.size / s0 * num / denom


@dataclass
class NullSummary:
    observed: float
    null_mean: float
    null_std: float
    p_value: float
    n_perm: int
    seed: int
    null: np.ndarray = field(default=None, repr=False)

    def to_dict(self, include_null=False):
        d = {k: v for k, v in asdict(self).items() if k != "null"}
        if include_null and self.null is not None:
            d["null"] = self.null.tolist()
        return d

    def exceeds(self, n_std=3.0):
        return self.observed > self.null_mean + n_std * self.null_std


def permutation_null(statistic, a, n_perm, seed, min_perm=100):
    """Right-tailed permutation test of ``statistic(a)``.

    Each permutation draws from its own stream keyed by ``(seed, index)``,
    so results do not depend on evaluation order.
    """
    if n_perm < min_perm:
        raise InputError(f"n_perm must be at least {min_perm}")
    a = np.asarray(a, dtype=np.float64)
    observed = statistic(a)
    null = np.empty(n_perm)
    for b in range(n_perm):
        perm = np.random.default_rng([seed, b]).permutation(a.size)
        null[b] = statistic(a[perm])
    p = (1 + int(np.count_nonzero(null >= observed))) / (1 + n_perm)
    return NullSummary(float(observed), float(null.mean()), float(null.std()), p, n_perm, seed, null)


def morans_null(a, W, n_perm=DEFAULT_PERMS, seed=0):
    return permutation_null(lambda v: morans_i(v, W), a, n_perm, seed)


def high_set(a, q):
    """Indicator of the top ``ceil(q N / 100)`` values (ties: smaller index wins)."""
    a = np.asarray(a, dtype=np.float64)
    if not 0 < q < 100 + 1e-12:
        raise InputError("q must lie in (0, 100]")
    n_high = math.ceil(q * a.size / 100.0 - 1e-9)
    if n_high < 1:
        raise InputError("the top-q% set is empty")
    order = np.lexsort((np.arange(a.size), -a))
    z = np.zeros(a.size, dtype=bool)
    z[order[:n_high]] = True
    return z


def coherence_from_neighbors(neighbors, z):
    same = z[neighbors] == z[:, None]
    C_i = same.mean(axis=1)
    if not z.any():
        raise InputError("no high-attribution features")
    return float(C_i[z].mean())


def knn_coherence(coords, a, k=DEFAULT_K, q=DEFAULT_Q, W=None):
    """Mean same-label fraction among the k neighbours of high-attribution features."""
    W = W if W is not None else knn_weights(coords, k)
    return coherence_from_neighbors(W.neighbors, high_set(a, q))


def coherence_null(coords, a, k=DEFAULT_K, q=DEFAULT_Q, n_perm=DEFAULT_PERMS, seed=0):
    W = knn_weights(coords, k)
    return permutation_null(lambda v: coherence_from_neighbors(W.neighbors, high_set(v, q)), a, n_perm, seed)


# -- Procrustes ----------------------------------------------------------------


@dataclass
class ProcrustesResult:
    distance: float
    aligned: np.ndarray
    rotation: np.ndarray
    scale: float
    translation: np.ndarray


def procrustes_distance(coords_a, coords_b):
    """Align ``coords_b`` onto ``coords_a`` by translation, orthogonal map
    (rotation or reflection) and isotropic scale.

    The distance is the residual sum of squares divided by the centred sum
    of squares of ``coords_a``; it lies in [0, 1] and is symmetric in its
    arguments.
    """
    A = np.asarray(coords_a, dtype=np.float64)
    B = np.asarray(coords_b, dtype=np.float64)
    if A.shape != B.shape:
        raise ShapeMismatch(f"layouts differ in shape: {A.shape} vs {B.shape}")
    mu_a, mu_b = A.mean(axis=0), B.mean(axis=0)
    A0, B0 = A - mu_a, B - mu_b
    na, nb = float((A0 * A0).sum()), float((B0 * B0).sum())
    if na == 0 or nb == 0:
        raise DegenerateVariance("Procrustes alignment of a fully coincident layout")
    U, S, Vt = np.linalg.svd(B0.T @ A0)
    R = U @ Vt  # maps centred B onto centred A: B0 @ R
    scale = S.sum() / nb
    aligned = scale * B0 @ R + mu_a
    dist = 1.0 - S.sum() ** 2 / (na * nb)
    return ProcrustesResult(float(min(max(dist, 0.0), 1.0)), aligned, R, float(scale), mu_a - scale * mu_b @ R)


def consensus_layout(layouts, n_iter=20, tol=1e-12):
    """Generalized Procrustes mean: align every layout to the running mean
    and average, starting from the first layout."""
    layouts = [np.asarray(L, dtype=np.float64) for L in layouts]
    if not layouts:
        raise InputError("need at least one layout")
    mean = layouts[0]
    for _ in range(n_iter):
        aligned = [procrustes_distance(mean, L).aligned for L in layouts]
        new = np.mean(aligned, axis=0)
        if np.max(np.abs(new - mean)) < tol:
            mean = new
            break
        mean = new
    return mean, aligned


def pairwise_procrustes(layouts, labels=None):
    labels = labels or [str(i) for i in range(len(layouts))]
    rows = []
    for (i, a), (j, b) in combinations(enumerate(layouts), 2):
        rows.append((labels[i], labels[j], procrustes_distance(a, b).distance))
    return rows


def write_procrustes_csv(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run_a", "run_b", "procrustes_distance"])
        for a, b, d in rows:
            w.writerow([a, b, repr(float(d))])


def spatial_report(coords, a, k=DEFAULT_K, q=DEFAULT_Q, n_perm=DEFAULT_PERMS, seed=0):
    """Both permutation tests for one attribution vector."""
    W = knn_weights(coords, k)
    mor = morans_null(a, W, n_perm, seed)
    coh = permutation_null(lambda v: coherence_from_neighbors(W.neighbors, high_set(v, q)), a, n_perm, seed)
    return {"morans_i": mor, "knn_purity": coh, "k": k, "q": q, "n_perm": n_perm, "seed": seed}


def report_to_json(report):
    return {
        key: (val.to_dict() if isinstance(val, NullSummary) else val) for key, val in report.items()
    }
