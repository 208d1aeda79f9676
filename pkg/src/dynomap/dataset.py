"""Tabular loading, feature selection, scaling and stratified folds."""

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .exceptions import (
    DegenerateVariance,
    DuplicateName,
    EmptyClass,
    InputError,
    MissingColumn,
    NonFiniteValue,
    NonNumericValue,
)


@dataclass
class FeatureMatrix:
    values: np.ndarray
    feature_names: list
    sample_ids: list
    labels: np.ndarray
    class_names: list
    standardized: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n, g = self.values.shape
        if len(self.feature_names) != g:
            raise InputError("feature_names length does not match columns")
        if len(set(self.feature_names)) != g:
            raise DuplicateName("feature names must be unique")
        if len(self.sample_ids) != n or len(self.labels) != n:
            raise InputError("sample_ids/labels length does not match rows")
        if not np.all(np.isfinite(self.values)):
            raise NonFiniteValue("feature matrix contains non-finite values")
        if n and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise InputError("labels outside [0, C)")

    @property
    def n_samples(self):
        return self.values.shape[0]

    @property
    def n_features(self):
        return self.values.shape[1]

    @property
    def n_classes(self):
        return len(self.class_names)

    def subset(self, rows):
        rows = np.asarray(rows)
        return replace(
            self,
            values=self.values[rows],
            sample_ids=[self.sample_ids[i] for i in rows],
            labels=self.labels[rows],
        )

    def select_columns(self, names):
        index = {name: i for i, name in enumerate(self.feature_names)}
        missing = [name for name in names if name not in index]
        if missing:
            raise MissingColumn(
                f"{len(missing)} feature(s) not present in data, e.g. {missing[0]!r}",
                missing=missing[:20],
            )
        cols = [index[name] for name in names]
        return replace(self, values=self.values[:, cols], feature_names=list(names))


def _sniff_delimiter(path):
    return "\t" if Path(path).suffix.lower() in (".tsv", ".tab") else ","


def load_table(path, label_column, delimiter=None, id_column=None):
    """Read a delimited table with a header row into a FeatureMatrix.

    Every column other than ``label_column`` and ``id_column`` must be
    numeric and finite. Class indices follow the sorted class names.
    """
    delimiter = delimiter or _sniff_delimiter(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise InputError(f"{path}: empty file") from None
        rows = [r for r in reader if r and any(cell.strip() for cell in r)]

    seen = set()
    for name in header:
        if name in seen:
            raise DuplicateName(f"duplicate header name {name!r}", column=name)
        seen.add(name)
    if label_column not in header:
        raise MissingColumn(f"label column {label_column!r} not found", column=label_column)
    if id_column is not None and id_column not in header:
        raise MissingColumn(f"id column {id_column!r} not found", column=id_column)

    label_idx = header.index(label_column)
    id_idx = header.index(id_column) if id_column is not None else None
    feat_idx = [i for i in range(len(header)) if i not in (label_idx, id_idx)]
    feature_names = [header[i] for i in feat_idx]

    values = np.empty((len(rows), len(feat_idx)))
    raw_labels = []
    sample_ids = []
    for r, row in enumerate(rows):
        if len(row) != len(header):
            raise InputError(f"row {r + 2} has {len(row)} cells, expected {len(header)}", row=r + 2)
        for c, i in enumerate(feat_idx):
            cell = row[i].strip()
            try:
                v = float(cell)
            except ValueError:
                raise NonNumericValue(
                    f"non-numeric value {cell!r} in column {header[i]!r}, row {r + 2}",
                    column=header[i], row=r + 2,
                ) from None
            if not math.isfinite(v):
                raise NonFiniteValue(
                    f"non-finite value {cell!r} in column {header[i]!r}, row {r + 2}",
                    column=header[i], row=r + 2,
                )
            values[r, c] = v
        raw_labels.append(row[label_idx].strip())
        sample_ids.append(row[id_idx].strip() if id_idx is not None else f"row{r}")

    if len(set(sample_ids)) != len(sample_ids):
        # repeated recordings per subject: disambiguate by occurrence
        counts = {}
        unique_ids = []
        for sid in sample_ids:
            counts[sid] = counts.get(sid, 0) + 1
            unique_ids.append(sid if counts[sid] == 1 else f"{sid}_{counts[sid] - 1}")
        sample_ids = unique_ids

    class_names = sorted(set(raw_labels))
    lookup = {name: i for i, name in enumerate(class_names)}
    labels = np.array([lookup[v] for v in raw_labels], dtype=np.int64)
    return FeatureMatrix(values, feature_names, sample_ids, labels, class_names)


def select_hvg(m, n):
    """Keep the ``n`` columns of largest population variance.

    Zero-variance columns are dropped first; ties keep original column order.
    """
    if m.standardized:
        raise InputError("select_hvg expects raw (unstandardized) values")
    var = m.values.var(axis=0)
    nonzero = np.flatnonzero(var > 0)
    if n < 1 or n > nonzero.size:
        raise InputError(f"requested {n} features but only {nonzero.size} have nonzero variance")
    order = nonzero[np.argsort(-var[nonzero], kind="stable")][:n]
    return replace(m, values=m.values[:, order], feature_names=[m.feature_names[i] for i in order])


@dataclass
class ScalingStats:
    feature_names: list
    mu: np.ndarray
    sigma: np.ndarray

    def to_json(self):
        return json.dumps(
            {"feature_names": list(self.feature_names), "mu": self.mu.tolist(), "sigma": self.sigma.tolist()}
        )

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls(d["feature_names"], np.asarray(d["mu"], float), np.asarray(d["sigma"], float))

    def save(self, path):
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path):
        return cls.from_json(Path(path).read_text())


def standardize(m, stats_from=None):
    """Z-score columns with population std. Returns ``(matrix, stats)``.

    When ``stats_from`` is given its statistics are applied instead of
    being fitted, so held-out data never informs the scaling.
    """
    if stats_from is None:
        mu = m.values.mean(axis=0)
        sigma = m.values.std(axis=0)
        zero = np.flatnonzero(sigma == 0)
        if zero.size:
            raise DegenerateVariance(
                f"column {m.feature_names[zero[0]]!r} has zero standard deviation",
                column=m.feature_names[zero[0]],
            )
        stats = ScalingStats(list(m.feature_names), mu, sigma)
    else:
        stats = stats_from
        if list(stats.feature_names) != list(m.feature_names):
            m = m.select_columns(stats.feature_names)
    values = (m.values - stats.mu) / stats.sigma
    return replace(m, values=values, standardized=True), stats


@dataclass
class FoldAssignment:
    fold_of_sample: np.ndarray
    K: int
    seed: int

    def split(self, k):
        test = np.flatnonzero(self.fold_of_sample == k)
        train = np.flatnonzero(self.fold_of_sample != k)
        return train, test

    def membership(self, k):
        return np.flatnonzero(self.fold_of_sample == k)


def stratified_folds(labels, K, seed):
    """Assign samples to ``K`` folds, dealing each shuffled class round-robin.

    The dealing position carries over between classes so fold sizes stay
    within one sample of each other.
    """
    labels = np.asarray(labels)
    if K < 2:
        raise InputError("K must be at least 2")
    rng = np.random.default_rng(seed)
    fold = np.full(labels.shape[0], -1, dtype=np.int64)
    offset = 0
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if idx.size < K:
            raise EmptyClass(f"class {int(c)} has {idx.size} samples, fewer than K={K}", label=int(c))
        idx = rng.permutation(idx)
        fold[idx] = (offset + np.arange(idx.size)) % K
        offset = (offset + idx.size) % K
    return FoldAssignment(fold, K, seed)


def stratified_holdout(labels, fraction, seed):
    """Split indices into (keep, holdout) with ~``fraction`` of each class held out.

    Every class with at least two members contributes one or more held-out
    samples and keeps at least one.
    """
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    keep, hold = [], []
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        n_hold = 0 if idx.size < 2 else min(idx.size - 1, max(1, int(round(fraction * idx.size))))
        hold.append(idx[:n_hold])
        keep.append(idx[n_hold:])
    return np.sort(np.concatenate(keep)), np.sort(np.concatenate(hold))


class HVGSelector(TransformerMixin, BaseEstimator):
    """Keep the ``n_features`` highest-variance columns (fit on raw values)."""

    def __init__(self, n_features=4000):
        self.n_features = n_features

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        var = X.var(axis=0)
        nonzero = np.flatnonzero(var > 0)
        if self.n_features > nonzero.size:
            raise InputError(
                f"requested {self.n_features} features but only {nonzero.size} have nonzero variance"
            )
        self.support_ = nonzero[np.argsort(-var[nonzero], kind="stable")][: self.n_features]
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "support_")
        X = check_array(X, dtype=np.float64)
        return X[:, self.support_]


class Standardizer(TransformerMixin, BaseEstimator):
    """Population z-scoring that refuses zero-variance columns."""

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        sigma = X.std(axis=0)
        if np.any(sigma == 0):
            raise DegenerateVariance(f"column {int(np.argmax(sigma == 0))} has zero standard deviation")
        self.mean_ = X.mean(axis=0)
        self.scale_ = sigma
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "scale_")
        X = check_array(X, dtype=np.float64)
        return (X - self.mean_) / self.scale_
