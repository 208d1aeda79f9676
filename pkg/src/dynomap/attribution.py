"""Integrated Gradients from a zero baseline, class profiles and their differences."""

import csv
from dataclasses import dataclass, field

import numpy as np

from . import model, renderer
from .exceptions import EmptyClass, FeatureMismatch, InputError, NonFiniteGradient

DEFAULT_STEPS = 64


@dataclass
class AttributionVector:
    values: np.ndarray
    target_class: int
    steps: int
    f_input: float
    f_baseline: float
    sample_id: str = None

    @property
    def residual(self):
        """Completeness gap ``|sum(IG) - (f(x) - f(x'))|``."""
        return abs(float(self.values.sum()) - (self.f_input - self.f_baseline))


def midpoint_alphas(m):
    if m < 1:
        raise InputError("m must be at least 1")
    return (np.arange(1, m + 1) - 0.5) / m


def integrated_gradients_fn(f, grad_f, x, baseline=None, m=DEFAULT_STEPS):
    """Midpoint-rule IG for any scalar function.

    ``grad_f`` maps a batch of path points (m, G) to their gradients.
    Returns ``(ig, f(x), f(baseline))``.
    """
    x = np.asarray(x, dtype=np.float64)
    baseline = np.zeros_like(x) if baseline is None else np.asarray(baseline, dtype=np.float64)
    alphas = midpoint_alphas(m)
    path = baseline[None] + alphas[:, None] * (x - baseline)[None]
    grads = np.asarray(grad_f(path), dtype=np.float64)
    if not np.all(np.isfinite(grads)):
        raise NonFiniteGradient("non-finite gradient along the integration path")
    ig = (x - baseline) * grads.mean(axis=0)
    return ig, float(f(x)), float(f(baseline))


def _pipeline_fns(params, net_config, target, chunk):
    grid = renderer.make_grid(params["coords"], net_config.padding, net_config.pixels)

    def f(x):
        logits, _ = model.forward(params, np.atleast_2d(x), net_config, grid=grid)
        return float(logits[0, target])

    def grad_f(path):
        out = []
        for s in range(0, path.shape[0], chunk):
            batch = path[s : s + chunk]
            logits, cache = model.forward(params, batch, net_config, grid=grid)
            seed = np.zeros_like(logits)
            seed[:, target] = 1.0
            out.append(model.backward(params, cache, seed, net_config)["x"])
        return np.concatenate(out, axis=0)

    return f, grad_f, grid


def integrated_gradients(params, net_config, x, target_class=None, m=DEFAULT_STEPS, sample_id=None, chunk=64):
    """IG of one target logit w.r.t. the raw (pre-gate) input, zero baseline.

    The default target is the predicted class. Dropout is off and the
    rendering grid is fixed at the current layout's bounding box.
    """
    x = np.asarray(x, dtype=np.float64)
    if target_class is None:
        logits = model.predict_logits(params, x[None].astype(params.dtype), net_config)
        target_class = int(np.argmax(logits[0]))
    f, grad_f, _ = _pipeline_fns(params, net_config, target_class, chunk)
    ig, fx, fb = integrated_gradients_fn(
        lambda z: f(z.astype(params.dtype)), lambda p: grad_f(p.astype(params.dtype)), x, None, m
    )
    return AttributionVector(ig, int(target_class), m, fx, fb, sample_id)


@dataclass
class ClassProfile:
    values: np.ndarray
    mean_abs: np.ndarray
    class_index: int
    n_samples: int
    normalized: bool
    feature_names: list = None


def profile_from_attributions(ig_rows, class_index=None, feature_names=None):
    """Mean |IG| per feature scaled to a maximum of 1.

    An all-zero mean is returned unscaled with ``normalized=False``.
    """
    ig_rows = np.atleast_2d(np.asarray(ig_rows, dtype=np.float64))
    if ig_rows.shape[0] == 0:
        raise EmptyClass("no samples for class profile", label=class_index)
    mean_abs = np.abs(ig_rows).mean(axis=0)
    peak = mean_abs.max()
    if peak > 0:
        return ClassProfile(mean_abs / peak, mean_abs, class_index, ig_rows.shape[0], True, feature_names)
    return ClassProfile(mean_abs.copy(), mean_abs, class_index, ig_rows.shape[0], False, feature_names)


def class_profile(params, net_config, X_class, m=DEFAULT_STEPS, target_class=None, feature_names=None):
    """Normalized mean |IG| over the samples of one class.

    With ``target_class=None`` each sample is attributed to its predicted
    class; pass the class index to attribute every sample to that logit.
    """
    X_class = np.atleast_2d(np.asarray(X_class))
    if X_class.shape[0] == 0:
        raise EmptyClass("no samples for class profile", label=target_class)
    rows = [integrated_gradients(params, net_config, x, target_class, m).values for x in X_class]
    return profile_from_attributions(rows, target_class, feature_names)


@dataclass
class DeltaProfile:
    values: np.ndarray
    positive_class: object
    negative_class: object
    feature_names: list = None


def delta_profile(profile_a, profile_b, positive_class="a", negative_class="b"):
    """Per-feature ``profile_a - profile_b``; positive values favour ``positive_class``."""
    va = getattr(profile_a, "values", profile_a)
    vb = getattr(profile_b, "values", profile_b)
    na = getattr(profile_a, "feature_names", None)
    nb = getattr(profile_b, "feature_names", None)
    if na is not None and nb is not None and list(na) != list(nb):
        raise FeatureMismatch("profiles cover different features")
    va = np.asarray(va, dtype=np.float64)
    vb = np.asarray(vb, dtype=np.float64)
    if va.shape != vb.shape:
        raise FeatureMismatch(f"profile shapes differ: {va.shape} vs {vb.shape}")
    return DeltaProfile(va - vb, positive_class, negative_class, na if na is not None else nb)


def write_attributions_csv(path, feature_names, profiles, class_names):
    """``profiles`` is a list of ClassProfile, one per class."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["feature", "class", "mean_abs_ig", "normalized"])
        for prof in profiles:
            cname = class_names[prof.class_index]
            for name, raw, norm in zip(feature_names, prof.mean_abs, prof.values):
                w.writerow([name, cname, repr(float(raw)), repr(float(norm))])


def read_attributions_csv(path):
    """Returns ``{class_name: (feature_names, mean_abs, normalized)}`` in file order."""
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            names, raw, norm = out.setdefault(row["class"], ([], [], []))
            names.append(row["feature"])
            raw.append(float(row["mean_abs_ig"]))
            norm.append(float(row["normalized"]))
    return {k: (v[0], np.array(v[1]), np.array(v[2])) for k, v in out.items()}


def write_delta_csv(path, feature_names, delta):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["feature", "delta", "positive_class"])
        for name, d in zip(feature_names, delta.values):
            w.writerow([name, repr(float(d)), delta.positive_class])
