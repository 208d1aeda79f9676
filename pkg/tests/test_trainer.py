import numpy as np
import pytest

from dynomap import dataset, layout, synthetic, trainer
from dynomap.exceptions import EmptyClass, InputError
from dynomap.trainer import TrainConfig, compute_metrics, summarize

# P=16 keeps the unit suite fast; the acceptance runs use larger images
FAST = dict(pixels=16, dtype="float64")


class TestConfig:
    def test_defaults(self):
        c = TrainConfig()
        assert (c.learning_rate, c.batch_size, c.max_epochs, c.patience, c.velocity_threshold, c.pixels) == (
            1e-3, 16, 1000, 15, 0.002, 64)

    @pytest.mark.parametrize("field", ["learning_rate", "batch_size", "max_epochs", "patience", "pixels"])
    def test_positive(self, field):
        with pytest.raises(InputError):
            TrainConfig(**{field: 0})

    def test_roundtrip_ignores_unknown(self):
        c = TrainConfig(seed=4, filters=(2, 3))
        d = c.to_dict()
        d["unknown"] = 1
        assert TrainConfig.from_dict(d) == c


class TestMetrics:
    def test_perfect(self):
        m = compute_metrics([0, 1, 2, 1], [0, 1, 2, 1], 3)
        assert m.accuracy == m.macro_f1 == m.macro_sensitivity == m.macro_specificity == 1.0
        assert m.zero_division == []

    def test_all_ones_confusion(self):
        m = compute_metrics([0, 0, 1, 1], [0, 1, 0, 1], 2)
        np.testing.assert_array_equal(m.confusion, [[1, 1], [1, 1]])
        assert (m.accuracy, m.macro_f1, m.macro_sensitivity, m.macro_specificity) == (0.5, 0.5, 0.5, 0.5)

    def test_all_predicted_zero(self):
        m = compute_metrics([0] * 8 + [1] * 2, [0] * 10, 2)
        assert m.accuracy == pytest.approx(0.8)
        assert m.macro_sensitivity == pytest.approx(0.5)
        assert m.f1[1] == 0.0 and 1 in m.zero_division
        assert m.confusion.sum(axis=1).tolist() == [8, 2]

    def test_absent_class(self):
        m = compute_metrics([0, 0, 1], [0, 0, 1], 3)
        assert m.f1[2] == 0.0 and m.zero_division == [2]
        assert m.support == [2, 1, 0]

    def test_rates_in_unit_interval(self, rng):
        y = rng.integers(0, 4, 50)
        p = rng.integers(0, 4, 50)
        scores = rng.dirichlet(np.ones(4), 50)
        m = compute_metrics(y, p, 4, scores=scores)
        for v in m.precision + m.recall + m.f1 + m.specificity:
            assert 0 <= v <= 1
        assert set(m.roc_curves) == {"0", "1", "2", "3"}

    def test_empty(self):
        with pytest.raises(InputError):
            compute_metrics([], [], 2)

    def test_summary_population_std(self):
        ms = [compute_metrics([0, 1], [0, 1], 2), compute_metrics([0, 1], [1, 0], 2)]
        s = summarize(ms)
        assert s["accuracy"] == {"mean": 0.5, "std": 0.5}
        same = summarize([ms[0]] * 5)
        assert all(v["std"] == 0 for v in same.values())


def _blob_fold(seed=0, **kw):
    m = synthetic.separable_blobs(seed=seed)
    folds = dataset.stratified_folds(m.labels, 5, seed)
    cfg = TrainConfig(seed=seed, **{**FAST, **kw})
    return cfg, m, folds


def _fold_data(cfg, m, folds, k=0):
    fit, va, _ = trainer.fold_split(cfg, m, folds, k)
    _, stats = dataset.standardize(m.subset(np.sort(np.concatenate([fit, va]))))
    tr, _ = dataset.standardize(m.subset(fit), stats)
    v, _ = dataset.standardize(m.subset(va), stats)
    return (tr.values, tr.labels), (v.values, v.labels)


class TestTrain:
    def test_bit_identical_history(self):
        cfg, m, folds = _blob_fold(max_epochs=4)
        tr, va = _fold_data(cfg, m, folds)
        a = trainer.train(cfg, tr, va)
        b = trainer.train(cfg, tr, va)
        assert a.history == b.history
        for name in a.params:
            assert a.params[name].tobytes() == b.params[name].tobytes()

    def test_empty_class(self):
        cfg, m, folds = _blob_fold(max_epochs=1)
        tr, va = _fold_data(cfg, m, folds)
        keep = tr[1] == 0
        with pytest.raises(EmptyClass):
            trainer.train(cfg, (tr[0][keep], tr[1][keep]), va, n_classes=2)

    def test_post_freeze_layout_is_constant(self, tmp_path):
        # a loose threshold forces an early freeze
        cfg, m, folds = _blob_fold(max_epochs=8, velocity_threshold=10.0, patience=2)
        tr, va = _fold_data(cfg, m, folds)
        names = [f"f{i}" for i in range(10)]
        exported = {}

        def hook(epoch, params, state):
            if state.frozen:
                path = tmp_path / f"e{epoch}.csv"
                layout.export_layout_csv(path, names, params["coords"], state.frozen_epoch)
                exported[epoch] = path.read_bytes()

        res = trainer.train(cfg, tr, va, on_epoch_end=hook)
        assert res.freeze_epoch == 2
        assert sorted(exported) == list(range(2, 9))
        assert len(set(exported.values())) == 1
        assert res.selected_epoch >= res.freeze_epoch
        assert [h["frozen"] for h in res.history] == [False] + [True] * 7

    def test_post_freeze_epochs_stops(self):
        cfg, m, folds = _blob_fold(max_epochs=50, velocity_threshold=10.0, patience=2, post_freeze_epochs=3)
        tr, va = _fold_data(cfg, m, folds)
        res = trainer.train(cfg, tr, va)
        assert len(res.history) == 5

    def test_history_csv(self, tmp_path):
        cfg, m, folds = _blob_fold(max_epochs=2)
        tr, va = _fold_data(cfg, m, folds)
        res = trainer.train(cfg, tr, va)
        trainer.write_history_csv(tmp_path / "h.csv", res.history)
        lines = (tmp_path / "h.csv").read_text().splitlines()
        assert lines[0] == "epoch,train_loss,valid_acc,velocity,frozen"
        assert len(lines) == 3


class TestSyntheticOracles:
    def test_blobs_reach_perfect_validation(self):
        cfg, m, folds = _blob_fold(max_epochs=200)
        tr, va = _fold_data(cfg, m, folds)
        res = trainer.train(cfg, tr, va)
        assert max(h["valid_acc"] for h in res.history) >= 0.99

    @pytest.mark.slow
    def test_blobs_cross_validation(self):
        cfg, m, folds = _blob_fold(max_epochs=200)
        _, summary = trainer.cross_validate(cfg, m, folds)
        assert summary["accuracy"]["mean"] >= 0.99

    def test_loss_mostly_decreases_early(self):
        votes = 0
        for seed in range(5):
            cfg, m, folds = _blob_fold(seed=seed, max_epochs=51)
            tr, va = _fold_data(cfg, m, folds)
            loss = np.array([h["train_loss"] for h in trainer.train(cfg, tr, va).history])
            votes += np.mean(np.diff(loss) <= 0) >= 0.8
        assert votes >= 3

    def test_permuted_labels_stay_at_chance(self):
        accs = []
        for seed in range(5):
            cfg, m, folds = _blob_fold(seed=seed, max_epochs=50)
            m.labels = np.random.default_rng([seed, 77]).permutation(m.labels)
            tr, va = _fold_data(cfg, m, folds)
            res = trainer.train(cfg, tr, va)
            # final params: the validation split took no part in choosing them
            accs.append(trainer.evaluate(res.final_params, res.net_config, va).accuracy)
        assert abs(np.mean(accs) - 0.5) <= 0.15
