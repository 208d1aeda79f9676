"""Learnable 2D feature coordinates, their regularizers, and the freeze rule."""

import csv
from dataclasses import dataclass

import numpy as np

from .exceptions import InputError, ShapeMismatch

CENTER_WEIGHT = 0.01
SPREAD_WEIGHT = 0.01
REPEL_WEIGHT = 0.05
REPEL_EPS = 1e-4
REPEL_EXACT_MAX_G = 2048
REPEL_PAIRS_PER_FEATURE = 2048


def init_coords(G, seed):
    if G < 1:
        raise InputError("G must be at least 1")
    rng = np.random.default_rng([seed, 0x10])
    return rng.uniform(-1.0, 1.0, size=(G, 2))


def center_loss(coords, return_grad=False):
    """Squared norm of the mean coordinate."""
    G = coords.shape[0]
    mean = coords.mean(axis=0)
    loss = float(mean @ mean)
    if not return_grad:
        return loss
    grad = np.broadcast_to(2.0 * mean / G, coords.shape).copy()
    return loss, grad


def pooled_std(coords):
    centered = coords - coords.mean(axis=0)
    return float(np.sqrt(np.mean(centered**2))), centered


def spread_loss(coords, return_grad=False):
    """``(s - 1)**2`` with ``s`` the population std of all 2G centered entries."""
    G = coords.shape[0]
    if G < 2:
        raise InputError("spread_loss needs at least two coordinates")
    s, centered = pooled_std(coords)
    loss = (s - 1.0) ** 2
    if not return_grad:
        return loss
    if s == 0.0:
        return loss, np.zeros_like(coords)
    # centering contributes nothing: sum of centered entries is zero per axis
    grad = 2.0 * (s - 1.0) * centered / (2 * G * s)
    return loss, grad


def _sample_pairs(G, n_pairs, rng):
    i = rng.integers(0, G, size=n_pairs)
    j = (i + rng.integers(1, G, size=n_pairs)) % G
    return i, j


def repel_loss(coords, eps=REPEL_EPS, return_grad=False, rng=None, exact_max_g=REPEL_EXACT_MAX_G):
    """Mean of ``1 / (|c_i - c_j|^2 + eps)`` over distinct pairs.

    Above ``exact_max_g`` features the mean is estimated from
    ``REPEL_PAIRS_PER_FEATURE * G`` uniformly drawn pairs (``rng`` required).
    """
    G = coords.shape[0]
    if G < 2:
        raise InputError("repel_loss needs at least two coordinates")
    if G <= exact_max_g:
        diff = coords[:, None, :] - coords[None, :, :]
        d2 = np.einsum("ijk,ijk->ij", diff, diff)
        kern = 1.0 / (d2 + eps)
        np.fill_diagonal(kern, 0.0)
        n_pairs = G * (G - 1)
        loss = float(kern.sum() / n_pairs)
        if not return_grad:
            return loss
        # each unordered pair counted twice in the ordered sum
        w = kern**2
        grad = -2.0 * 2.0 / n_pairs * np.einsum("ij,ijk->ik", w, diff)
        return loss, grad
    if rng is None:
        raise InputError("sampled repulsion requires an rng")
    i, j = _sample_pairs(G, REPEL_PAIRS_PER_FEATURE * G, rng)
    diff = coords[i] - coords[j]
    d2 = np.einsum("pk,pk->p", diff, diff)
    kern = 1.0 / (d2 + eps)
    loss = float(kern.mean())
    if not return_grad:
        return loss
    coef = (-2.0 / i.size) * (kern**2)[:, None] * diff
    grad = np.zeros_like(coords)
    np.add.at(grad, i, coef)
    np.add.at(grad, j, -coef)
    return loss, grad


def layout_total_loss(coords, eps=REPEL_EPS, return_grad=False, rng=None):
    """``0.01 center + 0.01 spread + 0.05 repel``."""
    if not return_grad:
        return (
            CENTER_WEIGHT * center_loss(coords)
            + SPREAD_WEIGHT * spread_loss(coords)
            + REPEL_WEIGHT * repel_loss(coords, eps, rng=rng)
        )
    lc, gc = center_loss(coords, True)
    ls, gs = spread_loss(coords, True)
    lr, gr = repel_loss(coords, eps, True, rng=rng)
    loss = CENTER_WEIGHT * lc + SPREAD_WEIGHT * ls + REPEL_WEIGHT * lr
    return loss, CENTER_WEIGHT * gc + SPREAD_WEIGHT * gs + REPEL_WEIGHT * gr


def velocity(coords_t, coords_prev):
    """Mean Euclidean displacement per feature."""
    if coords_t.shape != coords_prev.shape:
        raise ShapeMismatch(f"layouts differ in shape: {coords_t.shape} vs {coords_prev.shape}")
    return float(np.mean(np.linalg.norm(coords_t - coords_prev, axis=1)))


@dataclass
class LayoutState:
    coords: np.ndarray
    prev_coords: np.ndarray = None
    frozen: bool = False
    below_threshold_streak: int = 0
    velocity_threshold: float = 0.002
    patience: int = 15
    repel_epsilon: float = REPEL_EPS
    frozen_epoch: int = None

    def __post_init__(self):
        if self.prev_coords is None:
            self.prev_coords = np.array(self.coords, copy=True)


def stabilization_update(state, v, epoch=None):
    """Advance the freeze rule by one epoch with observed velocity ``v``.

    Strictly-below-threshold epochs extend the streak; anything else resets
    it. Reaching ``patience`` freezes the layout for good.
    """
    if state.frozen:
        return state
    if v < state.velocity_threshold:
        state.below_threshold_streak += 1
    else:
        state.below_threshold_streak = 0
    if state.below_threshold_streak >= state.patience:
        state.below_threshold_streak = state.patience
        state.frozen = True
        state.frozen_epoch = epoch
    return state


def export_layout_csv(path, feature_names, coords, frozen_epoch=None):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["feature_name", "x", "y", "frozen_epoch"])
        fe = "" if frozen_epoch is None else str(frozen_epoch)
        for name, (x, y) in zip(feature_names, coords):
            w.writerow([name, repr(float(x)), repr(float(y)), fe])


def read_layout_csv(path):
    names, xy, frozen_epoch = [], [], None
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            names.append(row["feature_name"])
            xy.append((float(row["x"]), float(row["y"])))
            if row.get("frozen_epoch"):
                frozen_epoch = int(row["frozen_epoch"])
    return names, np.asarray(xy, dtype=np.float64).reshape(-1, 2), frozen_epoch
