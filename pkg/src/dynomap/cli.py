"""Command-line entry point: ``dynomap {train,render,attribute,stats,compare-layouts}``.

Every subcommand writes ``run_config.json`` into its output directory before
doing any work; ``dynomap <cmd> --config <dir>/run_config.json --out <new>``
re-executes it. Exit codes: 0 success, 2 input or usage error, 3 numerical
failure. ``DYNOMAP_NUM_THREADS`` caps BLAS threads.
"""

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__, attribution, layout, plots, spatial_stats
from .checkpoint import Checkpoint
from .dataset import load_table, select_hvg, standardize, stratified_folds
from .exceptions import DynomapError, FeatureMismatch, InputError, MissingColumn, NumericalError
from .model import render_images
from .trainer import TrainConfig, run_fold, summarize, write_history_csv

log = logging.getLogger("dynomap")

THREADS_ENV = "DYNOMAP_NUM_THREADS"
EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3

# flag name -> TrainConfig field
_TRAIN_FLAGS = {
    "seed": "seed",
    "folds": "folds",
    "pixels": "pixels",
    "padding": "padding",
    "batch": "batch_size",
    "epochs": "max_epochs",
    "lr": "learning_rate",
    "label_smoothing": "label_smoothing",
    "patience": "patience",
    "velocity_threshold": "velocity_threshold",
    "post_freeze_epochs": "post_freeze_epochs",
    "validation_fraction": "validation_fraction",
    "diagonal_gate": "diagonal_gate",
    "image_std_eps": "image_std_eps",
    "dtype": "dtype",
}


@dataclass
class RunConfig:
    command: str
    out: str
    data: str = None
    label: str = None
    id_column: str = None
    hvg: int = None
    train: dict = field(default_factory=dict)
    options: dict = field(default_factory=dict)
    version: str = __version__

    def save(self, path):
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path):
        d = json.loads(Path(path).read_text())
        d.pop("version", None)
        return cls(**d)


def _dump_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _abs(path):
    return None if path is None else str(Path(path).resolve())


# -- train ----------------------------------------------------------------------


def _load_for_training(rc):
    matrix = load_table(rc.data, rc.label, id_column=rc.id_column)
    if rc.hvg is not None:
        matrix = select_hvg(matrix, rc.hvg)
    return matrix


def cmd_train(rc):
    cfg = TrainConfig.from_dict(rc.train)
    matrix = _load_for_training(rc)
    folds = stratified_folds(matrix.labels, cfg.folds, cfg.seed)
    out = Path(rc.out)
    data_hash = _file_sha256(rc.data)
    fold_rows = []
    layouts = []
    metrics = []
    for k in range(cfg.folds):
        key = json.dumps(
            {"train": cfg.to_dict(), "data": data_hash, "label": rc.label, "hvg": rc.hvg, "fold": k},
            sort_keys=True,
        )
        fdir = out / "folds" / f"fold{k}-{hashlib.sha256(key.encode()).hexdigest()[:12]}"
        fdir.mkdir(parents=True, exist_ok=True)
        fr = run_fold(cfg, matrix, folds, k)
        res = fr.result
        Checkpoint(
            res.params, res.net_config, matrix.feature_names, matrix.class_names, fr.stats,
            res.freeze_epoch, res.selected_epoch, cfg.to_dict(),
        ).save(fdir / "checkpoint")
        fr.stats.save(fdir / "scaler.json")
        write_history_csv(fdir / "history.csv", res.history)
        coords = res.params["coords"].astype(np.float64)
        layout.export_layout_csv(fdir / "layout.csv", matrix.feature_names, coords, res.freeze_epoch)
        m = fr.metrics.to_dict()
        m.update(fold=k, freeze_epoch=res.freeze_epoch, selected_epoch=res.selected_epoch,
                 epochs_run=len(res.history), class_names=matrix.class_names)
        _dump_json(fdir / "metrics.json", m)
        _dump_json(fdir / "split.json", {
            name: [matrix.sample_ids[i] for i in idx]
            for name, idx in (("train", fr.train_index), ("valid", fr.valid_index), ("test", fr.test_index))
        })
        plots.layout_scatter(fdir / "layout.png", coords, labels=matrix.feature_names, title=f"fold {k} layout")
        plots.history_plot(fdir / "history.png", res.history)
        log.info("fold %d: accuracy %.4f, freeze epoch %s", k, fr.metrics.accuracy, res.freeze_epoch)
        fold_rows.append({"fold": k, "dir": str(fdir.relative_to(out)), "accuracy": fr.metrics.accuracy,
                          "macro_f1": fr.metrics.macro_f1, "freeze_epoch": res.freeze_epoch})
        layouts.append(coords)
        metrics.append(fr.metrics)
    summary = {"folds": fold_rows, "metrics": summarize(metrics),
               "n_features": matrix.n_features, "n_samples": matrix.n_samples, "class_names": matrix.class_names}
    if len(layouts) > 1:
        rows = spatial_stats.pairwise_procrustes(layouts, [f"fold{k}" for k in range(len(layouts))])
        spatial_stats.write_procrustes_csv(out / "procrustes.csv", rows)
        summary["procrustes_median"] = float(np.median([d for _, _, d in rows]))
    _dump_json(out / "summary.json", summary)
    return EXIT_OK


# -- helpers shared by render / attribute -----------------------------------------


def _checkpoint_dir(path):
    """Accept a fold directory or its ``checkpoint`` subdirectory."""
    p = Path(path)
    return p / "checkpoint" if (p / "checkpoint" / "manifest.json").exists() else p


def _aligned_data(rc, ckpt):
    matrix = load_table(rc.data, rc.label, id_column=rc.id_column)
    try:
        matrix = matrix.select_columns(ckpt.feature_names)
    except MissingColumn as exc:
        raise FeatureMismatch("data does not contain the checkpoint's features", **exc.details) from None
    if ckpt.stats is not None:
        matrix, _ = standardize(matrix, ckpt.stats)
    return matrix


def _class_index(ckpt, name):
    try:
        return ckpt.class_names.index(name)
    except ValueError:
        raise InputError(f"class {name!r} is not known to the checkpoint", label=name) from None


def _safe_name(text):
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in str(text))


# -- render -----------------------------------------------------------------------


def cmd_render(rc):
    ckpt = Checkpoint.load(_checkpoint_dir(rc.options["checkpoint"]))
    matrix = _aligned_data(rc, ckpt)
    samples = rc.options.get("samples")
    if samples is not None:
        lookup = {sid: i for i, sid in enumerate(matrix.sample_ids)}
        unknown = [s for s in samples if s not in lookup]
        if unknown:
            raise InputError(f"unknown sample id {unknown[0]!r}", missing=unknown[:20])
        rows = [lookup[s] for s in samples]
    else:
        per_class = rc.options.get("per_class", 4)
        rows = []
        for c in range(matrix.n_classes):
            rows.extend(np.flatnonzero(matrix.labels == c)[:per_class].tolist())
    if not rows:
        return EXIT_OK
    params = ckpt.params
    imgs, _ = render_images(params, matrix.values[rows].astype(params.dtype), ckpt.net_config)
    out = Path(rc.out)
    for r, img in zip(rows, imgs):
        cdir = out / _safe_name(matrix.class_names[matrix.labels[r]])
        cdir.mkdir(parents=True, exist_ok=True)
        stem = _safe_name(matrix.sample_ids[r])
        plots.save_image_png(cdir / f"{stem}.png", img)
        np.savetxt(cdir / f"{stem}.csv", img.astype(np.float64), delimiter=",", fmt="%.9g")
    return EXIT_OK


# -- attribute ----------------------------------------------------------------------


def cmd_attribute(rc):
    opts = rc.options
    ckpt = Checkpoint.load(_checkpoint_dir(opts["checkpoint"]))
    matrix = _aligned_data(rc, ckpt)
    steps = opts.get("ig_steps", attribution.DEFAULT_STEPS)
    wanted = opts.get("classes") or matrix.class_names
    out = Path(rc.out)
    profiles = []
    sample_rows = []
    for name in wanted:
        if name not in matrix.class_names:
            raise InputError(f"class {name!r} has no samples in the data", label=name)
        cidx = _class_index(ckpt, name)
        rows = np.flatnonzero(matrix.labels == matrix.class_names.index(name))
        target = cidx if opts.get("target") == "true" else None
        vecs = []
        for r in rows:
            av = attribution.integrated_gradients(ckpt.params, ckpt.net_config, matrix.values[r], target, steps,
                                                  sample_id=matrix.sample_ids[r])
            vecs.append(av.values)
            sample_rows.append([av.sample_id, name, ckpt.class_names[av.target_class], av.f_input,
                                av.f_baseline, float(av.values.sum()), av.residual])
        profiles.append(attribution.profile_from_attributions(vecs, cidx, ckpt.feature_names))
    attribution.write_attributions_csv(out / "attributions.csv", ckpt.feature_names, profiles, ckpt.class_names)
    with open(out / "samples.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "class", "target_class", "f_input", "f_baseline", "sum_ig", "residual"])
        for row in sample_rows:
            w.writerow(row[:3] + [repr(float(v)) for v in row[3:]])
    names = list(wanted)
    plots.attribution_heatmap(out / "heatmap.png", [p.values for p in profiles], ckpt.feature_names, names)
    if len(profiles) == 2:
        delta = attribution.delta_profile(profiles[0], profiles[1], names[0], names[1])
        attribution.write_delta_csv(out / "delta.csv", ckpt.feature_names, delta)
        plots.butterfly_bars(out / "butterfly.png", delta.values, ckpt.feature_names, names[0], names[1])
    _dump_json(out / "attribution_meta.json", {"steps": steps, "rule": "midpoint", "baseline": "zero",
                                               "target": opts.get("target", "predicted"),
                                               "normalization": "per-profile max"})
    return EXIT_OK


# -- stats --------------------------------------------------------------------------


def cmd_stats(rc):
    opts = rc.options
    if opts.get("layout"):
        names, coords, _ = layout.read_layout_csv(opts["layout"])
    else:
        ckpt = Checkpoint.load(_checkpoint_dir(opts["checkpoint"]))
        names, coords = ckpt.feature_names, ckpt.params["coords"].astype(np.float64)
    table = attribution.read_attributions_csv(opts["attributions"])
    if not table:
        raise InputError("attribution file has no rows")
    k = opts.get("k", spatial_stats.DEFAULT_K)
    q = opts.get("q", spatial_stats.DEFAULT_Q)
    n_perm = opts.get("perms", spatial_stats.DEFAULT_PERMS)
    seed = opts.get("seed", 0)
    out = Path(rc.out)
    report = {}
    for cname, (fnames, _, normalized) in table.items():
        if list(fnames) != list(names):
            raise FeatureMismatch(f"attributions for class {cname!r} are not aligned with the layout features")
        rep = spatial_stats.spatial_report(coords, normalized, k, q, n_perm, seed)
        report[cname] = spatial_stats.report_to_json(rep)
        stem = _safe_name(cname)
        plots.null_histogram(out / f"null_{stem}_morans_i.png", rep["morans_i"], f"{cname}: Moran's I")
        plots.null_histogram(out / f"null_{stem}_knn_purity.png", rep["knn_purity"], f"{cname}: kNN purity")
    _dump_json(out / "spatial_stats.json", report)
    return EXIT_OK


# -- compare-layouts ----------------------------------------------------------------


def cmd_compare_layouts(rc):
    paths = rc.options["layouts"]
    if len(paths) < 2:
        raise InputError("need at least two layouts to compare")
    loaded = [layout.read_layout_csv(p) for p in paths]
    names0 = loaded[0][0]
    for p, (names, _, _) in zip(paths, loaded):
        if list(names) != list(names0):
            raise FeatureMismatch(f"{p} lists different features from {paths[0]}")
    coords = [c for _, c, _ in loaded]
    out = Path(rc.out)
    rows = spatial_stats.pairwise_procrustes(coords, [str(p) for p in paths])
    spatial_stats.write_procrustes_csv(out / "procrustes.csv", rows)
    mean, _ = spatial_stats.consensus_layout(coords)
    layout.export_layout_csv(out / "consensus_layout.csv", names0, mean)
    plots.layout_scatter(out / "consensus_layout.png", mean, labels=names0, title="consensus layout")
    _dump_json(out / "procrustes_summary.json", {"median": float(np.median([d for _, _, d in rows])),
                                                 "n_layouts": len(paths)})
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "render": cmd_render,
    "attribute": cmd_attribute,
    "stats": cmd_stats,
    "compare-layouts": cmd_compare_layouts,
}


# -- argument parsing -----------------------------------------------------------------


def _csv_list(text):
    return [t for t in (s.strip() for s in text.split(",")) if t]


def build_parser():
    S = argparse.SUPPRESS
    p = argparse.ArgumentParser(prog="dynomap", description="Learned image layouts for tabular classification.")
    p.add_argument("--version", action="version", version=f"dynomap {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        sp.add_argument("--config", help="re-run from a saved run_config.json")
        sp.add_argument("--out", default=S, help="output directory")
        if data:
            sp.add_argument("--data", default=S, help="CSV/TSV table, one row per sample")
            sp.add_argument("--label", default=S, help="label column")
            sp.add_argument("--id-column", dest="id_column", default=S, help="sample id column")

    t = sub.add_parser("train", help="cross-validated training")
    common(t)
    t.add_argument("--hvg", type=int, default=S, help="keep the N most variable features")
    t.add_argument("--folds", type=int, default=S)
    t.add_argument("--seed", type=int, default=S)
    t.add_argument("--pixels", type=int, default=S)
    t.add_argument("--padding", type=float, default=S)
    t.add_argument("--batch", type=int, default=S)
    t.add_argument("--epochs", type=int, default=S)
    t.add_argument("--lr", type=float, default=S)
    t.add_argument("--label-smoothing", dest="label_smoothing", type=float, default=S)
    t.add_argument("--patience", type=int, default=S)
    t.add_argument("--velocity-threshold", dest="velocity_threshold", type=float, default=S)
    t.add_argument("--post-freeze-epochs", dest="post_freeze_epochs", type=int, default=S,
                   help="stop this many epochs after the layout freezes")
    t.add_argument("--validation-fraction", dest="validation_fraction", type=float, default=S)
    t.add_argument("--diagonal-gate", dest="diagonal_gate", action="store_true", default=S)
    t.add_argument("--image-std-eps", dest="image_std_eps", type=float, default=S)
    t.add_argument("--dtype", choices=["float32", "float64"], default=S)

    r = sub.add_parser("render", help="render samples with a trained checkpoint")
    common(r)
    r.add_argument("--checkpoint", default=S, help="fold directory or its checkpoint/ subdirectory")
    r.add_argument("--samples", type=_csv_list, default=S, help="comma-separated sample ids")
    r.add_argument("--per-class", dest="per_class", type=int, default=S, help="first N samples of each class")

    a = sub.add_parser("attribute", help="Integrated Gradients class profiles")
    common(a)
    a.add_argument("--checkpoint", default=S)
    a.add_argument("--ig-steps", dest="ig_steps", type=int, default=S)
    a.add_argument("--classes", type=_csv_list, default=S, help="restrict to these class names")
    a.add_argument("--target", choices=["predicted", "true"], default=S)

    s = sub.add_parser("stats", help="spatial statistics of attributions over the layout")
    common(s, data=False)
    s.add_argument("--checkpoint", default=S)
    s.add_argument("--layout", default=S, help="layout CSV instead of a checkpoint")
    s.add_argument("--attributions", default=S)
    s.add_argument("--k", type=int, default=S)
    s.add_argument("--q", type=float, default=S)
    s.add_argument("--perms", type=int, default=S)
    s.add_argument("--seed", type=int, default=S)

    c = sub.add_parser("compare-layouts", help="pairwise Procrustes distances between layout CSVs")
    common(c, data=False)
    c.add_argument("--layouts", nargs="+", default=S)
    return p


_REQUIRED = {
    "train": ("data", "label"),
    "render": ("data", "label", "checkpoint"),
    "attribute": ("data", "label", "checkpoint"),
    "stats": ("attributions",),
    "compare-layouts": ("layouts",),
}
_PATH_OPTIONS = ("checkpoint", "layout", "attributions")


def resolve_run_config(ns):
    """Merge saved config (if any) with explicitly given flags."""
    given = {k: v for k, v in vars(ns).items() if k not in ("command", "config", "verbose")}
    if ns.config:
        rc = RunConfig.load(ns.config)
        if rc.command != ns.command:
            raise InputError(f"config is for {rc.command!r}, not {ns.command!r}")
    else:
        rc = RunConfig(command=ns.command, out=None)
        if ns.command == "train":
            rc.train = TrainConfig().to_dict()
    for key in ("out", "data", "label", "id_column", "hvg"):
        if key in given:
            setattr(rc, key, given.pop(key))
    if ns.command == "train":
        for flag, name in _TRAIN_FLAGS.items():
            if flag in given:
                rc.train[name] = given.pop(flag)
        TrainConfig.from_dict(rc.train)  # validates
    for key, val in given.items():
        rc.options[key] = _abs(val) if key in _PATH_OPTIONS else val
    if "layouts" in rc.options:
        rc.options["layouts"] = [_abs(p) for p in rc.options["layouts"]]
    rc.data = _abs(rc.data)
    if rc.out is None:
        raise InputError("--out is required")
    if ns.command == "stats" and not (rc.options.get("checkpoint") or rc.options.get("layout")):
        raise InputError("stats needs --checkpoint or --layout")
    for key in _REQUIRED[ns.command]:
        if getattr(rc, key, None) is None and rc.options.get(key) is None:
            raise InputError(f"--{key.replace('_', '-')} is required")
    return rc


def _report_error(exc, out_dir, code):
    payload = exc.to_dict() if isinstance(exc, DynomapError) else {"error": type(exc).__name__, "message": str(exc)}
    payload["exit_code"] = code
    text = json.dumps(payload, sort_keys=True)
    print(text, file=sys.stderr)
    if out_dir is not None and Path(out_dir).is_dir():
        Path(out_dir, "error.json").write_text(text + "\n")


def main(argv=None):
    parser = build_parser()
    ns = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING, format="%(message)s")
    rc = None
    threads = os.environ.get(THREADS_ENV)
    try:
        rc = resolve_run_config(ns)
        Path(rc.out).mkdir(parents=True, exist_ok=True)
        rc.save(Path(rc.out) / "run_config.json")
        with threadpool_limits(limits=int(threads) if threads else None):
            return COMMANDS[rc.command](rc)
    except (InputError, FileNotFoundError, NotADirectoryError, json.JSONDecodeError) as exc:
        _report_error(exc, rc.out if rc else None, EXIT_INPUT)
        return EXIT_INPUT
    except (NumericalError, FloatingPointError) as exc:
        _report_error(exc, rc.out if rc else None, EXIT_NUMERIC)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
