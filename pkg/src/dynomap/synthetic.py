"""Synthetic classification tables with known structure, for tests and demos."""

import numpy as np

from .dataset import FeatureMatrix


def _matrix(X, y, prefix="f"):
    names = [f"{prefix}{i:03d}" for i in range(X.shape[1])]
    ids = [f"s{i:04d}" for i in range(X.shape[0])]
    classes = sorted({int(c) for c in y})
    return FeatureMatrix(X, names, ids, y, [str(c) for c in classes])


def separable_blobs(n=200, G=10, separation=6.0, seed=0):
    """Two isotropic Gaussian blobs whose means differ by ``separation`` along
    a random unit direction; a linear rule separates them almost surely."""
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    direction = rng.standard_normal(G)
    direction /= np.linalg.norm(direction)
    X = rng.standard_normal((n, G)) + np.outer(y - 0.5, direction) * separation
    return _matrix(X, y)


def signal_blocks(n=400, G=200, n_signal=20, shift=1.5, noise=0.5, seed=0):
    """Two correlated blocks of ``n_signal // 2`` features each carry class
    signal; the remaining columns are independent noise.

    Block A follows latent ``s1 = +shift*(2y-1) + N(0,1)``, block B follows
    ``s2 = -shift*(2y-1) + N(0,1)``; each member adds ``noise * N(0,1)``.
    Signal columns are the first ``n_signal`` features.
    """
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    sign = 2.0 * y - 1.0
    X = rng.standard_normal((n, G))
    half = n_signal // 2
    s1 = shift * sign + rng.standard_normal(n)
    s2 = -shift * sign + rng.standard_normal(n)
    X[:, :half] = s1[:, None] + noise * rng.standard_normal((n, half))
    X[:, half:n_signal] = s2[:, None] + noise * rng.standard_normal((n, n_signal - half))
    return _matrix(X, y)
