"""Sigmoid feature gate: x_gated = x * sigmoid(W x + b)."""

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .exceptions import ShapeMismatch


@dataclass
class GatedVector:
    gates: np.ndarray
    values: np.ndarray


def _pre_activation(x, W, b):
    if W.ndim == 1:  # diagonal gate
        return x * W + b
    return x @ W.T + b


def gate_forward(x, W, b):
    """Gate a feature vector (or a batch of rows).

    ``W`` is either a ``G x G`` matrix or a length-``G`` diagonal.
    """
    x = np.asarray(x)
    G = x.shape[-1]
    if b.shape != (G,) or W.shape not in ((G, G), (G,)):
        raise ShapeMismatch(f"gate shapes W{W.shape}, b{b.shape} incompatible with G={G}")
    g = expit(_pre_activation(x, W, b))
    return GatedVector(g, x * g)


def gate_vjp(dxt, x, W, gated):
    """Gradients of ``sum(dxt * x_gated)`` w.r.t. ``x``, ``W`` and ``b``.

    Batched inputs (``x`` of shape ``B x G``) sum the parameter gradients
    over the batch.
    """
    g = gated.gates
    dz = dxt * x * g * (1.0 - g)
    dx = dxt * g
    if W.ndim == 1:
        dx = dx + dz * W
        dW = (dz * x).sum(axis=0) if x.ndim == 2 else dz * x
    else:
        dx = dx + dz @ W
        dW = dz.T @ x if x.ndim == 2 else np.outer(dz, x)
    db = dz.sum(axis=0) if x.ndim == 2 else dz
    return dx, dW, db
