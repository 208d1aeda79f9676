"""Training loop, layout freezing, model selection, metrics, cross-validation."""

import csv
import logging
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy.special import softmax
from sklearn.metrics import precision_recall_curve, roc_curve

from . import classifier, layout, model, renderer
from .dataset import standardize, stratified_holdout
from .diffcore import AdamState, adam_step
from .exceptions import EmptyClass, InputError, NumericalError

log = logging.getLogger(__name__)

# counter-keyed random streams: [seed, purpose, ...]
_SHUFFLE = 1
_DROPOUT = 2
_REPEL = 3


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 16
    max_epochs: int = 1000
    patience: int = 15
    velocity_threshold: float = 0.002
    pixels: int = 64
    padding: float = 1.0
    label_smoothing: float = 0.1
    seed: int = 0
    folds: int = 5
    filters: tuple = (16, 32, 64)
    hidden: int = 64
    dropout: float = 0.5
    diagonal_gate: bool = False
    image_std_eps: float = 0.0
    repel_epsilon: float = layout.REPEL_EPS
    validation_fraction: float = 0.1
    post_freeze_epochs: int = None
    dtype: str = "float32"

    def __post_init__(self):
        self.filters = tuple(self.filters)
        for name in ("learning_rate", "batch_size", "max_epochs", "patience", "velocity_threshold", "pixels"):
            if not getattr(self, name) > 0:
                raise InputError(f"{name} must be positive")
        if not 0 <= self.label_smoothing < 1:
            raise InputError("label_smoothing must lie in [0, 1)")

    def net_config(self, n_features, n_classes):
        return model.NetConfig(
            n_features=n_features,
            n_classes=n_classes,
            pixels=self.pixels,
            padding=self.padding,
            filters=self.filters,
            hidden=self.hidden,
            dropout=self.dropout,
            diagonal_gate=self.diagonal_gate,
            image_std_eps=self.image_std_eps,
        )

    def to_dict(self):
        d = asdict(self)
        d["filters"] = list(self.filters)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class TrainResult:
    params: object
    net_config: model.NetConfig
    history: list
    freeze_epoch: int
    selected_epoch: int
    final_params: object = None

    @property
    def frozen(self):
        return self.freeze_epoch is not None


def _as_split(split):
    X, y = split
    return np.asarray(X), np.asarray(y, dtype=np.int64)


def train(config, train_split, valid_split, n_classes=None, on_epoch_end=None):
    """Jointly fit gate, layout, CNN and head with Adam.

    Selection keeps the best validation accuracy among epochs at or after
    the layout freeze (or over all epochs if it never froze). Training
    stops at ``max_epochs``, or ``post_freeze_epochs`` after the freeze when
    that is set. ``on_epoch_end(epoch, params, layout_state)`` is called
    after every epoch.
    """
    Xtr, ytr = _as_split(train_split)
    Xva, yva = _as_split(valid_split)
    n, G = Xtr.shape
    if n_classes is None:
        n_classes = int(max(ytr.max(), yva.max() if yva.size else 0)) + 1
    missing = sorted(set(range(n_classes)) - set(ytr.tolist()))
    if missing:
        raise EmptyClass(f"class {missing[0]} has no training samples", label=missing[0])
    if Xva.shape[0] == 0:
        raise InputError("validation split is empty")

    dtype = np.dtype(config.dtype)
    net = config.net_config(G, n_classes)
    params = model.init_params(net, config.seed, dtype=dtype)
    Xtr = Xtr.astype(dtype)
    Xva = Xva.astype(dtype)
    adam = AdamState.for_params(params, lr=config.learning_rate)
    state = layout.LayoutState(
        coords=params["coords"],
        velocity_threshold=config.velocity_threshold,
        patience=config.patience,
        repel_epsilon=config.repel_epsilon,
    )
    hidden_in = net.backbone.embedding_dim + G

    history = []
    best = None  # (valid_acc, epoch, params)
    best_post = None
    step = 0
    for epoch in range(1, config.max_epochs + 1):
        epoch_start = params["coords"].copy()
        order = np.random.default_rng([config.seed, _SHUFFLE, epoch]).permutation(n)
        loss_sum = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            step += 1
            masks = None
            if net.dropout > 0:
                keys = [(config.seed, _DROPOUT, epoch, int(i)) for i in idx]
                masks = classifier.dropout_masks(idx.size, hidden_in, net.dropout, keys, dtype=dtype)
            logits, cache = model.forward(params, Xtr[idx], net, masks=masks)
            ce, dlogits = classifier.ce_label_smoothing(logits, ytr[idx], config.label_smoothing, return_grad=True)
            grads = model.backward(params, cache, dlogits.astype(dtype, copy=False), net)
            repel_rng = np.random.default_rng([config.seed, _REPEL, step]) if G > layout.REPEL_EXACT_MAX_G else None
            coords64 = params["coords"].astype(np.float64)
            lay, g_lay = layout.layout_total_loss(coords64, config.repel_epsilon, return_grad=True, rng=repel_rng)
            grads["coords"] = grads["coords"] + g_lay.astype(dtype)
            total = classifier.total_loss(ce, lay)
            if not np.isfinite(total):
                raise NumericalError(f"non-finite loss at epoch {epoch}, step {step}", epoch=epoch, step=step)
            params.set_grads(grads)
            params.check_finite("grads")
            adam_step(params, adam)
            loss_sum += total * idx.size

        v = layout.velocity(params["coords"], epoch_start)
        state.prev_coords = epoch_start
        state.coords = params["coords"]
        was_frozen = state.frozen
        layout.stabilization_update(state, v, epoch=epoch)
        if state.frozen and not was_frozen:
            params.frozen.add("coords")
            log.info("layout frozen at epoch %d", epoch)

        valid_logits = model.predict_logits(params, Xva, net)
        valid_acc = float(np.mean(valid_logits.argmax(axis=1) == yva))
        history.append(
            {
                "epoch": epoch,
                "train_loss": loss_sum / n,
                "valid_acc": valid_acc,
                "velocity": v,
                "frozen": state.frozen,
            }
        )
        if best is None or valid_acc > best[0]:
            best = (valid_acc, epoch, params.copy())
        if state.frozen and (best_post is None or valid_acc > best_post[0]):
            best_post = (valid_acc, epoch, params.copy())
        if on_epoch_end is not None:
            on_epoch_end(epoch, params, state)
        if (
            state.frozen
            and config.post_freeze_epochs is not None
            and epoch - state.frozen_epoch >= config.post_freeze_epochs
        ):
            break

    chosen = best_post if best_post is not None else best
    return TrainResult(
        params=chosen[2],
        net_config=net,
        history=history,
        freeze_epoch=state.frozen_epoch,
        selected_epoch=chosen[1],
        final_params=params,
    )


def write_history_csv(path, history):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "valid_acc", "velocity", "frozen"])
        for h in history:
            w.writerow([h["epoch"], repr(float(h["train_loss"])), repr(h["valid_acc"]), repr(h["velocity"]), int(h["frozen"])])


# -- metrics -------------------------------------------------------------------


@dataclass
class Metrics:
    accuracy: float
    macro_f1: float
    macro_sensitivity: float
    macro_specificity: float
    confusion: np.ndarray
    precision: list
    recall: list
    f1: list
    specificity: list
    support: list
    zero_division: list
    pr_curves: dict = field(default_factory=dict)
    roc_curves: dict = field(default_factory=dict)

    def to_dict(self):
        d = asdict(self)
        d["confusion"] = np.asarray(self.confusion).tolist()
        return d


def _safe_div(num, den):
    return (num / den, False) if den > 0 else (0.0, True)


def compute_metrics(y_true, y_pred, n_classes, scores=None):
    """One-vs-rest rates from a confusion matrix (rows = true class).

    Undefined ratios (empty support, no predicted positives, no negatives)
    are set to 0 and the class is listed in ``zero_division``.
    """
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.size == 0:
        raise InputError("cannot evaluate an empty split")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    total = cm.sum()
    prec, rec, f1, spec, flags = [], [], [], [], []
    for c in range(n_classes):
        tp = cm[c, c]
        fn = cm[c].sum() - tp
        fp = cm[:, c].sum() - tp
        tn = total - tp - fn - fp
        p, zp = _safe_div(tp, tp + fp)
        r, zr = _safe_div(tp, tp + fn)
        s, zs = _safe_div(tn, tn + fp)
        f = 0.0 if (zp or zr or p + r == 0) else 2 * p * r / (p + r)
        if zp or zr or zs:
            flags.append(c)
        prec.append(float(p))
        rec.append(float(r))
        spec.append(float(s))
        f1.append(float(f))
    pr, roc = {}, {}
    if scores is not None:
        for c in range(n_classes):
            pos = y_true == c
            if pos.all() or not pos.any():
                continue
            pp, rr, _ = precision_recall_curve(pos, scores[:, c])
            fpr, tpr, _ = roc_curve(pos, scores[:, c])
            pr[str(c)] = {"precision": pp.tolist(), "recall": rr.tolist()}
            roc[str(c)] = {"fpr": fpr.tolist(), "tpr": tpr.tolist()}
    return Metrics(
        accuracy=float(np.trace(cm) / total),
        macro_f1=float(np.mean(f1)),
        macro_sensitivity=float(np.mean(rec)),
        macro_specificity=float(np.mean(spec)),
        confusion=cm,
        precision=prec,
        recall=rec,
        f1=f1,
        specificity=spec,
        support=cm.sum(axis=1).tolist(),
        zero_division=flags,
        pr_curves=pr,
        roc_curves=roc,
    )


def evaluate(params, net_config, split):
    X, y = _as_split(split)
    if X.shape[0] == 0:
        raise InputError("cannot evaluate an empty split")
    logits = model.predict_logits(params, X.astype(params.dtype), net_config)
    probs = softmax(logits.astype(np.float64), axis=1)
    return compute_metrics(y, logits.argmax(axis=1), net_config.n_classes, scores=probs)


# -- cross-validation ----------------------------------------------------------

SUMMARY_METRICS = ("accuracy", "macro_f1", "macro_sensitivity", "macro_specificity")


@dataclass
class FoldResult:
    fold: int
    train_index: np.ndarray
    test_index: np.ndarray
    valid_index: np.ndarray
    stats: object
    result: TrainResult
    metrics: Metrics


def summarize(metrics_list):
    """Mean and population std of the headline metrics across folds."""
    out = {}
    for name in SUMMARY_METRICS:
        vals = np.array([getattr(m, name) for m in metrics_list])
        out[name] = {"mean": float(vals.mean()), "std": float(vals.std())}
    return out


def fold_split(config, matrix, folds, k):
    """Train/valid/test index arrays for fold ``k``; valid is carved from train."""
    train_idx, test_idx = folds.split(k)
    keep, hold = stratified_holdout(matrix.labels[train_idx], config.validation_fraction, [config.seed, k])
    return train_idx[keep], train_idx[hold], test_idx


def run_fold(config, matrix, folds, k):
    fit_idx, valid_idx, test_idx = fold_split(config, matrix, folds, k)
    # scaling is fitted on the whole outer-train split (fit + valid)
    train_all = np.sort(np.concatenate([fit_idx, valid_idx]))
    _, stats = standardize(matrix.subset(train_all))
    tr, _ = standardize(matrix.subset(fit_idx), stats)
    va, _ = standardize(matrix.subset(valid_idx), stats)
    te, _ = standardize(matrix.subset(test_idx), stats)
    result = train(config, (tr.values, tr.labels), (va.values, va.labels), n_classes=matrix.n_classes)
    metrics = evaluate(result.params, result.net_config, (te.values, te.labels))
    return FoldResult(k, fit_idx, test_idx, valid_idx, stats, result, metrics)


def cross_validate(config, matrix, folds, on_fold_end=None):
    """Train and evaluate once per fold; returns ``(fold_results, summary)``."""
    results = []
    for k in range(folds.K):
        fr = run_fold(config, matrix, folds, k)
        log.info("fold %d: accuracy %.4f, freeze epoch %s", k, fr.metrics.accuracy, fr.result.freeze_epoch)
        if on_fold_end is not None:
            on_fold_end(fr)
        results.append(fr)
    return results, summarize([r.metrics for r in results])
