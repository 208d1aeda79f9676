"""Static PNG figures emitted by the command-line tools."""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image  # noqa: E402

# fixed metadata keeps PNG bytes reproducible across reruns
_PNG_META = {"Software": None}


def _save(fig, path):
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)


def save_image_png(path, img):
    """Grayscale PNG of one rendered image, min-max scaled to 0..255.

    Row 0 of ``img`` is the smallest y, so it is flipped to put +y up.
    """
    img = np.asarray(img, dtype=np.float64)
    lo, hi = float(img.min()), float(img.max())
    scaled = np.zeros_like(img) if hi == lo else (img - lo) / (hi - lo)
    Image.fromarray(np.round(scaled[::-1] * 255).astype(np.uint8), mode="L").save(path)


def layout_scatter(path, coords, values=None, labels=None, title="layout"):
    fig, ax = plt.subplots(figsize=(5, 5))
    if values is None:
        ax.scatter(coords[:, 0], coords[:, 1], s=12)
    else:
        sc = ax.scatter(coords[:, 0], coords[:, 1], c=values, s=12, cmap="viridis")
        fig.colorbar(sc, ax=ax, shrink=0.8)
    if labels is not None and len(labels) <= 40:
        for (x, y), name in zip(coords, labels):
            ax.annotate(str(name), (x, y), fontsize=6)
    ax.set_aspect("equal")
    ax.set_title(title)
    _save(fig, path)


def attribution_heatmap(path, profiles, feature_names, class_names, top=30):
    """Rows are classes, columns the ``top`` features by maximum profile value."""
    M = np.vstack(profiles)
    order = np.argsort(-M.max(axis=0), kind="stable")[:top]
    fig, ax = plt.subplots(figsize=(max(4, 0.3 * len(order) + 2), 1 + 0.5 * len(class_names)))
    im = ax.imshow(M[:, order], aspect="auto", cmap="magma", vmin=0, vmax=max(1.0, float(M.max())))
    ax.set_xticks(range(len(order)), [feature_names[i] for i in order], rotation=90, fontsize=6)
    ax.set_yticks(range(len(class_names)), class_names)
    fig.colorbar(im, ax=ax, label="normalized mean |IG|")
    fig.tight_layout()
    _save(fig, path)


def butterfly_bars(path, delta, feature_names, positive_class, negative_class, top=20):
    """Horizontal bars of the largest signed profile differences."""
    delta = np.asarray(delta)
    order = np.argsort(-np.abs(delta), kind="stable")[:top][::-1]
    fig, ax = plt.subplots(figsize=(5, 1 + 0.25 * len(order)))
    colors = ["tab:red" if d > 0 else "tab:blue" for d in delta[order]]
    ax.barh(range(len(order)), delta[order], color=colors)
    ax.set_yticks(range(len(order)), [feature_names[i] for i in order], fontsize=6)
    ax.axvline(0, color="k", lw=0.5)
    ax.set_xlabel(f"delta |IG|  (+ favours {positive_class}, - favours {negative_class})")
    fig.tight_layout()
    _save(fig, path)


def null_histogram(path, summary, label):
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.hist(summary.null, bins=40, color="0.6")
    ax.axvline(summary.observed, color="tab:red", label=f"observed {summary.observed:.3g}")
    ax.set_title(f"{label}  p={summary.p_value:.3g}")
    ax.legend(fontsize=7)
    fig.tight_layout()
    _save(fig, path)


def history_plot(path, history):
    ep = [h["epoch"] for h in history]
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(8, 3))
    a1.plot(ep, [h["train_loss"] for h in history], label="train loss")
    a1.plot(ep, [h["valid_acc"] for h in history], label="valid acc")
    a1.legend(fontsize=7)
    a2.semilogy(ep, [max(h["velocity"], 1e-8) for h in history])
    a2.set_title("layout velocity")
    fig.tight_layout()
    _save(fig, path)
