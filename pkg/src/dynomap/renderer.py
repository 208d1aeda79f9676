"""Differentiable Gaussian splatting of gated feature vectors onto a P x P grid.

The isotropic kernel factorizes over axes,

    exp(-|p - c|^2 / 2s^2) = exp(-(u - cx)^2 / 2s^2) * exp(-(v - cy)^2 / 2s^2),

so a whole image is ``Ey.T @ diag(x) @ Ex``: 2*G*P exponentials and one
matrix product instead of G*P*P exponentials. Images are indexed
``[row = y, col = x]``.
"""

from dataclasses import dataclass

import numpy as np

from .exceptions import NumericalError, ShapeMismatch

SIGMA_MIN = 0.5
SIGMA_RANGE = 4.5
DEFAULT_PADDING = 1.0
DEFAULT_PIXELS = 64
STD_GUARD = 1e-8


def kernel_width(xt):
    return SIGMA_MIN + SIGMA_RANGE * np.tanh(np.abs(xt))


def kernel_width_grad(xt):
    # d sigma / d xt; subgradient 0 at exactly 0
    t = np.tanh(np.abs(xt))
    return SIGMA_RANGE * (1.0 - t * t) * np.sign(xt)


@dataclass(frozen=True)
class GridSpec:
    x_min: float
    x_max: float
    y_min: float
    y_max: float
    P: int

    @property
    def u(self):
        return np.linspace(self.x_min, self.x_max, self.P)

    @property
    def v(self):
        return np.linspace(self.y_min, self.y_max, self.P)

    def pixel_centers(self):
        uu, vv = np.meshgrid(self.u, self.v)
        return np.stack([uu, vv], axis=-1)

    def to_dict(self):
        return {"x_min": self.x_min, "x_max": self.x_max, "y_min": self.y_min, "y_max": self.y_max, "P": self.P}


def make_grid(coords, padding=DEFAULT_PADDING, P=DEFAULT_PIXELS):
    """Bounding box of ``coords`` widened by ``padding``, sampled at P points per axis.

    A box of zero extent on an axis becomes the interval of half-width 0.5
    around its centre.
    """
    coords = np.asarray(coords, dtype=np.float64)
    lo = coords.min(axis=0) - padding
    hi = coords.max(axis=0) + padding
    for a in range(2):
        if not hi[a] > lo[a]:
            mid = 0.5 * (lo[a] + hi[a])
            lo[a], hi[a] = mid - 0.5, mid + 0.5
    return GridSpec(float(lo[0]), float(hi[0]), float(lo[1]), float(hi[1]), int(P))


@dataclass
class RenderCache:
    order: np.ndarray
    xt: np.ndarray
    sigma: np.ndarray
    du: np.ndarray
    dv: np.ndarray
    Ex: np.ndarray
    Ey: np.ndarray


def render(xt, coords, grid, return_cache=False):
    """Sum of ``xt_i * exp(-|p - c_i|^2 / (2 sigma_i^2))`` at every pixel centre.

    ``xt`` may be a single vector (G,) or a batch (B, G); the result is
    (P, P) or (B, P, P). Features are summed in order of their coordinates,
    so permuting features (values and coords together) gives bit-identical
    images.
    """
    xt = np.asarray(xt)
    single = xt.ndim == 1
    xb = xt[None] if single else xt
    if coords.shape != (xb.shape[1], 2):
        raise ShapeMismatch(f"coords {coords.shape} incompatible with {xb.shape[1]} features")
    order = np.lexsort((coords[:, 1], coords[:, 0]))
    xb = xb[:, order]
    coords = coords[order]
    dtype = np.result_type(xb.dtype, coords.dtype)
    u = grid.u.astype(dtype)
    v = grid.v.astype(dtype)
    sigma = kernel_width(xb)  # (B, G)
    inv2s2 = 0.5 / (sigma * sigma)
    du = u[None, None, :] - coords[None, :, 0:1]  # (1, G, P)
    dv = v[None, None, :] - coords[None, :, 1:2]
    Ex = np.exp(-(du * du) * inv2s2[..., None])  # (B, G, P)
    Ey = np.exp(-(dv * dv) * inv2s2[..., None])
    img = np.matmul((Ey * xb[..., None]).transpose(0, 2, 1), Ex)  # (B, Pv, Pu)
    if not np.all(np.isfinite(img)):
        raise NumericalError("rendered image contains non-finite values")
    out = img[0] if single else img
    if return_cache:
        return out, RenderCache(order, xb, sigma, du, dv, Ex, Ey)
    return out


def render_vjp(upstream, cache):
    """Gradients of ``sum(upstream * image)`` w.r.t. gated values and coords.

    Returns ``(d_xt, d_coords)``; ``d_xt`` has the batch shape of the
    forward input and ``d_coords`` is summed over the batch. Grid placement
    is treated as constant.
    """
    up = np.asarray(upstream)
    single = up.ndim == 2
    up = up[None] if single else up
    xb, sigma, du, dv, Ex, Ey = cache.xt, cache.sigma, cache.du, cache.dv, cache.Ex, cache.Ey
    M = np.matmul(Ey, up)  # (B, G, Pu): M[i,u] = sum_v up[v,u] Ey[i,v]
    N = np.matmul(Ex, up.transpose(0, 2, 1))  # (B, G, Pv): N[i,v] = sum_u up[v,u] Ex[i,u]
    MEx = M * Ex
    NEy = N * Ey
    direct = MEx.sum(axis=-1)  # sum_uv up Ey Ex
    inv_s2 = 1.0 / (sigma * sigma)
    inv_s3 = inv_s2 / sigma
    d_sigma = xb * ((MEx * du * du).sum(-1) + (NEy * dv * dv).sum(-1)) * inv_s3
    d_xt = direct + d_sigma * kernel_width_grad(xb)
    dcx = (xb * (MEx * du).sum(-1) * inv_s2).sum(axis=0)
    dcy = (xb * (NEy * dv).sum(-1) * inv_s2).sum(axis=0)
    # back to caller's feature order
    inv = np.empty_like(cache.order)
    inv[cache.order] = np.arange(cache.order.size)
    d_xt = d_xt[:, inv]
    d_coords = np.stack([dcx, dcy], axis=-1)[inv]
    if not (np.all(np.isfinite(d_xt)) and np.all(np.isfinite(d_coords))):
        raise NumericalError("non-finite gradient in render_vjp")
    return (d_xt[0] if single else d_xt), d_coords


def standardize_image(img, eps=0.0, return_cache=False):
    """Per-image z-scoring over all pixels.

    With ``eps == 0`` the divisor is the population std, and an image whose
    std is below ``STD_GUARD`` maps to zeros. With ``eps > 0`` the divisor is
    ``sqrt(std^2 + eps^2)``, which is smooth through constant images.
    Works on (P, P) or (B, P, P).
    """
    img = np.asarray(img)
    axes = (-2, -1)
    mean = img.mean(axis=axes, keepdims=True)
    centered = img - mean
    var = np.mean(centered * centered, axis=axes, keepdims=True)
    if eps > 0:
        denom = np.sqrt(var + eps * eps)
        active = np.ones_like(denom, dtype=bool)
    else:
        std = np.sqrt(var)
        active = std >= STD_GUARD
        denom = np.where(active, std, 1.0)
    out = np.where(active, centered / denom, 0.0)
    if return_cache:
        return out, (out, denom, active, eps)
    return out


def standardize_image_vjp(upstream, cache):
    """Gradient of ``sum(upstream * standardized)`` w.r.t. the raw image.

    The same closed form holds for both divisor conventions since
    ``out = centered / d`` and ``d`` depends on ``centered`` only via its
    mean square. Constant images (exact mode) pass zero gradient.
    """
    out, denom, active, _ = cache
    axes = (-2, -1)
    g_mean = upstream.mean(axis=axes, keepdims=True)
    proj = np.mean(upstream * out, axis=axes, keepdims=True)
    grad = (upstream - g_mean - out * proj) / denom
    return np.where(active, grad, 0.0)
