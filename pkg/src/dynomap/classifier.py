"""Small CNN over rendered images plus a dense head with a tabular skip path.

Activations are channel-last, ``(B, H, W, C)``. Every op has a matching
``*_backward`` that takes the upstream gradient and the forward cache.
"""

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import log_softmax, softmax

from .exceptions import NumericalError, ShapeMismatch


@dataclass(frozen=True)
class ConvBackboneConfig:
    filters: tuple = (16, 32, 64)
    pool_after: tuple = (True, True, True)
    kernel_size: int = 3

    def __post_init__(self):
        if len(self.pool_after) != len(self.filters):
            object.__setattr__(self, "pool_after", tuple(True for _ in self.filters))

    @property
    def embedding_dim(self):
        return self.filters[-1]

    def output_sizes(self, P):
        sizes = []
        for pool in self.pool_after:
            if pool:
                P = P // 2
            sizes.append(P)
        return sizes


@dataclass(frozen=True)
class HeadConfig:
    n_classes: int
    hidden: int = 64
    dropout: float = 0.5


# -- convolution ---------------------------------------------------------------


def conv2d(x, W, b):
    """Same-padded stride-1 convolution. ``W`` is (k, k, Cin, Cout)."""
    B, H, Wd, C = x.shape
    k = W.shape[0]
    if W.shape[2] != C:
        raise ShapeMismatch(f"conv expects {W.shape[2]} input channels, got {C}")
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    # (B, H, W, C, k, k) -> (B*H*W, k*k*C) ordered (ki, kj, c)
    win = sliding_window_view(xp, (k, k), axis=(1, 2))
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(B * H * Wd, k * k * C)
    out = cols @ W.reshape(k * k * C, -1) + b
    return out.reshape(B, H, Wd, -1), cols


def conv2d_backward(dout, cols, x_shape, W):
    B, H, Wd, C = x_shape
    k = W.shape[0]
    p = k // 2
    d2 = dout.reshape(B * H * Wd, -1)
    dW = (cols.T @ d2).reshape(W.shape)
    db = d2.sum(axis=0)
    dcols = (d2 @ W.reshape(k * k * C, -1).T).reshape(B, H, Wd, k, k, C)
    dxp = np.zeros((B, H + 2 * p, Wd + 2 * p, C), dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, i : i + H, j : j + Wd, :] += dcols[:, :, :, i, j, :]
    return dxp[:, p : p + H, p : p + Wd, :], dW, db


def relu(x):
    return np.maximum(x, 0)


def maxpool2(x):
    """2x2 max pool, stride 2; odd trailing rows/cols are dropped.

    Ties route the gradient to the first maximum in (0,0), (0,1), (1,0),
    (1,1) order.
    """
    H, W = x.shape[1] // 2 * 2, x.shape[2] // 2 * 2
    q = [x[:, i:H:2, j:W:2] for i in (0, 1) for j in (0, 1)]
    out = np.maximum(np.maximum(q[0], q[1]), np.maximum(q[2], q[3]))
    taken = np.zeros(out.shape, dtype=bool)
    masks = []
    for part in q[:3]:
        m = (part == out) & ~taken
        taken |= m
        masks.append(m)
    masks.append(~taken)
    return out, (masks, x.shape)


def maxpool2_backward(dout, cache):
    masks, shape = cache
    dx = np.zeros(shape, dtype=dout.dtype)
    H, W = shape[1] // 2 * 2, shape[2] // 2 * 2
    for (i, j), m in zip(((0, 0), (0, 1), (1, 0), (1, 1)), masks):
        dx[:, i:H:2, j:W:2] = dout * m
    return dx


def cnn_forward(img, params, config):
    """Embed standardized images (B, P, P) into (B, filters[-1]) vectors."""
    if img.ndim == 2:
        img = img[None]
    h = img[..., None]
    caches = []
    for layer, pool in enumerate(config.pool_after):
        W = params[f"conv{layer}_W"]
        b = params[f"conv{layer}_b"]
        z, cols = conv2d(h, W, b)
        a = relu(z)
        pc = None
        if pool:
            a, pc = maxpool2(a)
        caches.append((h.shape, cols, z, pc))
        h = a
    emb = h.mean(axis=(1, 2))
    return emb, (caches, h.shape)


def cnn_backward(d_emb, cache, params, config):
    """Returns ``(d_img, grads)`` with ``d_img`` shaped (B, P, P)."""
    caches, last_shape = cache
    B, H, W, C = last_shape
    dh = np.broadcast_to(d_emb[:, None, None, :] / (H * W), last_shape).astype(d_emb.dtype)
    grads = {}
    for layer in reversed(range(len(caches))):
        in_shape, cols, z, pc = caches[layer]
        if pc is not None:
            dh = maxpool2_backward(dh, pc)
        dz = dh * (z > 0)
        dh, dW, db = conv2d_backward(dz, cols, in_shape, params[f"conv{layer}_W"])
        grads[f"conv{layer}_W"] = dW
        grads[f"conv{layer}_b"] = db
    return dh[..., 0], grads


# -- head ----------------------------------------------------------------------


def dropout_masks(n, width, rate, keys, dtype=np.float64):
    """Inverted-dropout masks, one counter-keyed stream per sample.

    ``keys`` is a sequence of integer tuples; each row's mask depends only
    on its key, never on batch composition.
    """
    keep = 1.0 - rate
    masks = np.empty((n, width), dtype=dtype)
    for r, key in enumerate(keys):
        rng = np.random.default_rng(list(key))
        masks[r] = (rng.random(width) < keep) / keep
    return masks


def head_forward(emb, xt, params, mask=None):
    """concat -> dropout (if ``mask``) -> dense + ReLU -> linear logits."""
    h0 = np.concatenate([emb, xt], axis=-1)
    if h0.shape[-1] != params["dense_W"].shape[0]:
        raise ShapeMismatch(f"head expects {params['dense_W'].shape[0]} inputs, got {h0.shape[-1]}")
    hd = h0 * mask if mask is not None else h0
    z1 = hd @ params["dense_W"] + params["dense_b"]
    h1 = relu(z1)
    logits = h1 @ params["out_W"] + params["out_b"]
    return logits, (hd, mask, z1, h1, emb.shape[-1])


def head_backward(dlogits, cache, params):
    """Returns ``(d_emb, d_xt, grads)``."""
    hd, mask, z1, h1, n_emb = cache
    grads = {"out_W": h1.T @ dlogits, "out_b": dlogits.sum(axis=0)}
    dz1 = (dlogits @ params["out_W"].T) * (z1 > 0)
    grads["dense_W"] = hd.T @ dz1
    grads["dense_b"] = dz1.sum(axis=0)
    dh0 = dz1 @ params["dense_W"].T
    if mask is not None:
        dh0 = dh0 * mask
    return dh0[:, :n_emb], dh0[:, n_emb:], grads


# -- loss ----------------------------------------------------------------------


def ce_label_smoothing(logits, y, smoothing=0.1, return_grad=False):
    """Cross-entropy against ``(1 - eps) one_hot(y) + eps / C``.

    Batched logits (B, C) give the mean loss; the gradient is w.r.t. the
    logits of that mean.
    """
    logits = np.asarray(logits)
    single = logits.ndim == 1
    lg = logits[None] if single else logits
    if not np.all(np.isfinite(lg)):
        raise NumericalError("non-finite logits")
    y = np.atleast_1d(np.asarray(y))
    B, C = lg.shape
    if C < 2:
        raise ShapeMismatch("need at least two classes")
    if not 0 <= smoothing < 1:
        raise ValueError("smoothing must lie in [0, 1)")
    q = np.full((B, C), smoothing / C, dtype=lg.dtype)
    q[np.arange(B), y] += 1.0 - smoothing
    logp = log_softmax(lg, axis=1)
    loss = float(-(q * logp).sum() / B)
    if not return_grad:
        return loss
    grad = (softmax(lg, axis=1) - q) / B
    return loss, (grad[0] if single else grad)


def total_loss(ce, layout):
    return ce + layout


# -- initialization ------------------------------------------------------------


def init_classifier_params(n_features, backbone, head, rng, dtype=np.float64):
    """He-uniform for convs and the hidden dense layer; zeros elsewhere."""
    params = {}
    cin = 1
    k = backbone.kernel_size
    for layer, cout in enumerate(backbone.filters):
        fan_in = k * k * cin
        lim = np.sqrt(6.0 / fan_in)
        params[f"conv{layer}_W"] = rng.uniform(-lim, lim, size=(k, k, cin, cout)).astype(dtype)
        params[f"conv{layer}_b"] = np.zeros(cout, dtype=dtype)
        cin = cout
    width = backbone.embedding_dim + n_features
    lim = np.sqrt(6.0 / width)
    params["dense_W"] = rng.uniform(-lim, lim, size=(width, head.hidden)).astype(dtype)
    params["dense_b"] = np.zeros(head.hidden, dtype=dtype)
    params["out_W"] = np.zeros((head.hidden, head.n_classes), dtype=dtype)
    params["out_b"] = np.zeros(head.n_classes, dtype=dtype)
    return params
