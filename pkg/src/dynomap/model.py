"""End-to-end network: gate -> render -> standardize -> CNN -> head.

``forward`` records what ``backward`` needs; ``backward`` maps an upstream
logit gradient to gradients for every parameter and for the raw input.
"""

from dataclasses import asdict, dataclass, field

import numpy as np

from . import classifier, gating, layout, renderer
from .diffcore import ParamSet


@dataclass(frozen=True)
class NetConfig:
    n_features: int
    n_classes: int
    pixels: int = renderer.DEFAULT_PIXELS
    padding: float = renderer.DEFAULT_PADDING
    filters: tuple = (16, 32, 64)
    hidden: int = 64
    dropout: float = 0.5
    diagonal_gate: bool = False
    standardize_images: bool = True
    image_std_eps: float = 0.0

    @property
    def backbone(self):
        return classifier.ConvBackboneConfig(filters=tuple(self.filters))

    @property
    def head(self):
        return classifier.HeadConfig(self.n_classes, self.hidden, self.dropout)

    def to_dict(self):
        d = asdict(self)
        d["filters"] = list(self.filters)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["filters"] = tuple(d["filters"])
        return cls(**d)


def init_params(config, seed, dtype=np.float64):
    G = config.n_features
    values = {}
    values["gate_W"] = np.zeros(G if config.diagonal_gate else (G, G))
    values["gate_b"] = np.zeros(G)
    values["coords"] = layout.init_coords(G, seed)
    rng = np.random.default_rng([seed, 0x20])
    values.update(classifier.init_classifier_params(G, config.backbone, config.head, rng))
    return ParamSet(values, dtype=dtype)


@dataclass
class ForwardCache:
    x: np.ndarray
    gated: gating.GatedVector
    render: renderer.RenderCache
    std: tuple
    cnn: tuple
    head: tuple
    grid: renderer.GridSpec


def forward(params, X, config, grid=None, masks=None):
    """Logits for a batch ``X`` (B, G). ``masks`` enables dropout (training).

    ``grid`` defaults to the bounding box of the current coordinates.
    """
    X = np.asarray(X, dtype=params.dtype)
    if X.ndim == 1:
        X = X[None]
    coords = params["coords"]
    if grid is None:
        grid = renderer.make_grid(coords, config.padding, config.pixels)
    gated = gating.gate_forward(X, params["gate_W"], params["gate_b"])
    img, rcache = renderer.render(gated.values, coords, grid, return_cache=True)
    if config.standardize_images:
        img, scache = renderer.standardize_image(img, eps=config.image_std_eps, return_cache=True)
    else:
        scache = None
    emb, ccache = classifier.cnn_forward(img, params, config.backbone)
    logits, hcache = classifier.head_forward(emb, gated.values, params, masks)
    return logits, ForwardCache(X, gated, rcache, scache, ccache, hcache, grid)


def backward(params, cache, dlogits, config):
    """Gradients of ``sum(dlogits * logits)``.

    Returns a dict with one entry per parameter plus ``"x"`` (B, G).
    """
    d_emb, d_xt_head, grads = classifier.head_backward(dlogits, cache.head, params)
    d_img, g_cnn = classifier.cnn_backward(d_emb, cache.cnn, params, config.backbone)
    grads.update(g_cnn)
    if cache.std is not None:
        d_img = renderer.standardize_image_vjp(d_img, cache.std)
    d_xt_render, d_coords = renderer.render_vjp(d_img, cache.render)
    d_xt = d_xt_head + d_xt_render
    dx, dW, db = gating.gate_vjp(d_xt, cache.x, params["gate_W"], cache.gated)
    grads["gate_W"] = dW
    grads["gate_b"] = db
    grads["coords"] = d_coords
    grads["x"] = dx
    return grads


def render_images(params, X, config, grid=None, standardized=True):
    """Rendered (optionally standardized) images for a batch, no classifier."""
    X = np.asarray(X, dtype=params.dtype)
    coords = params["coords"]
    if grid is None:
        grid = renderer.make_grid(coords, config.padding, config.pixels)
    gated = gating.gate_forward(np.atleast_2d(X), params["gate_W"], params["gate_b"])
    img = renderer.render(gated.values, coords, grid)
    if standardized and config.standardize_images:
        img = renderer.standardize_image(img, eps=config.image_std_eps)
    return img, grid


def predict_logits(params, X, config, batch_size=64):
    X = np.asarray(X)
    grid = renderer.make_grid(params["coords"], config.padding, config.pixels)
    out = [forward(params, X[s : s + batch_size], config, grid=grid)[0] for s in range(0, X.shape[0], batch_size)]
    return np.concatenate(out, axis=0) if out else np.empty((0, config.n_classes))
