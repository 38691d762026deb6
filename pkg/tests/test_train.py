import csv
from dataclasses import replace

import numpy as np
import pytest

from tchorizon import filters, train
from tchorizon.cells import HorizonNet, HorizonNetConfig
from tchorizon.errors import DivergedLoss
from tchorizon.geometry import HorizonParams
from tchorizon.synth import SynthConfig, make_dataset
from tchorizon.train import AblationCell, TrainConfig

NET = HorizonNetConfig(stages=[(4, 2), (4, 2)], cell="residual_dense")
FAST = TrainConfig(epochs=2, seq_len=4, batch_size=2)


@pytest.fixture(scope="module")
def ds():
    return make_dataset(SynthConfig(width=16, height=16, seq_len=8, n_train=2, n_val=2, n_test=2, seed=5))


class TestSchedule:
    def test_learning_rate_points(self):
        cfg = TrainConfig(epochs=30)
        assert train.learning_rate(0, cfg) == 0.1
        assert train.learning_rate(30, cfg) == pytest.approx(1e-3, abs=1e-17)
        assert train.learning_rate(15, cfg) == pytest.approx(0.0505, abs=1e-15)

    def test_huber_only_pins_lambda(self):
        cfg = TrainConfig(epochs=10, loss_mode="huber_only")
        assert all(train._lambda(e, cfg) == 1.0 for e in range(11))
        assert train._lambda(10, replace(cfg, loss_mode="adaptive")) == 0.0

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(loss_mode="l2")
        with pytest.raises(ValueError):
            TrainConfig(epochs=-1)
        assert TrainConfig.from_json(FAST.to_json()) == FAST
        assert TrainConfig().frames_per_batch == 128


class TestWindows:
    def test_non_overlapping(self, ds):
        w = train._windows(ds.splits["train"], 4, 0)
        assert len(w) == 4
        seq = ds.splits["train"][0]
        assert np.array_equal(w[1][0], seq.frames[4:8]) and np.all(w[1][3] == 1)

    def test_context_masked(self, ds):
        w = train._windows(ds.splits["train"], 4, 2)
        first, second = w[0], w[1]
        assert first[0].shape[0] == 6 and first[3].tolist() == [0, 0, 1, 1, 1, 1]
        seq = ds.splits["train"][0]
        assert np.array_equal(first[0][0], seq.frames[0]) and np.array_equal(second[0][0], seq.frames[2])


class TestTrain:
    def test_zero_epochs_is_init(self, ds):
        res = train.train(NET, replace(FAST, epochs=0), ds)
        init = HorizonNet.create(NET, seed=FAST.seed).state_dict()
        assert res.history == []
        assert all(np.array_equal(res.checkpoint[k], init[k]) for k in init)

    def test_deterministic(self, ds):
        a, b = train.train(NET, FAST, ds), train.train(NET, FAST, ds)
        assert a.history == b.history
        assert all(np.array_equal(a.checkpoint[k], b.checkpoint[k]) for k in a.checkpoint)
        c = train.train(NET, replace(FAST, seed=1), ds)
        assert c.history != a.history

    def test_history_rows(self, ds, tmp_path):
        res = train.train(NET, FAST, ds)
        assert [r["epoch"] for r in res.history] == [0, 1]
        assert all(set(r) == set(train.HISTORY_COLUMNS) for r in res.history)
        train.write_history(res.history, tmp_path / "h.csv")
        rows = list(csv.DictReader(open(tmp_path / "h.csv")))
        assert tuple(rows[0]) == train.HISTORY_COLUMNS and float(rows[1]["lr"]) == res.history[1]["lr"]

    def test_tcn_trains(self, ds):
        res = train.train(replace(NET, cell="tcn", tcn_lengths=(2, 2)), FAST, ds)
        assert len(res.history) == 2 and np.isfinite(res.history[-1]["train_loss"])

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_reports_epoch(self, ds):
        with pytest.raises(DivergedLoss) as info:
            train.train(NET, replace(FAST, lr_max=1e200, lr_min=1e200), ds)
        assert info.value.epoch == 0

    def test_adaptive_equals_huber_only_at_start(self, ds):
        model = HorizonNet.create(NET, 0)
        seqs = ds.splits["val"]
        a = train.sequence_loss(model, seqs, 0, FAST, ds.dims)
        b = train.sequence_loss(model, seqs, 0, replace(FAST, loss_mode="huber_only"), ds.dims)
        assert a == b


class TestEvaluate:
    def test_oracle_predictions(self, ds):
        seqs = ds.splits["test"]
        preds = {s.annotation.sequence_id: [f.params for f in s.annotation.frames] for s in seqs}
        r = train.evaluate_predictions(preds, seqs, ds.dims, ds.camera)
        assert (r.horizon_auc, r.mse, r.a_tv) == (1.0, 0.0, 0.0)

    def test_mean_baseline_below_oracle(self, ds):
        seqs = ds.splits["test"]
        m = filters.mean_baseline([s.annotation for s in ds.splits["train"]])
        preds = {s.annotation.sequence_id: [m] * len(s.annotation) for s in seqs}
        assert train.evaluate_predictions(preds, seqs, ds.dims, ds.camera).horizon_auc < 1.0

    def test_order_invariance(self, ds):
        model = HorizonNet.create(NET, 0)
        seqs = ds.splits["test"]
        assert train.evaluate_model(model, seqs, ds.dims, ds.camera) == \
            train.evaluate_model(model, seqs[::-1], ds.dims, ds.camera)

    def test_predictions_wrapped(self, ds):
        model = HorizonNet.create(NET, 0)
        preds = train.predict_sequence(model, ds.splits["test"][0], ds.dims)
        assert all(isinstance(p, HorizonParams) and -np.pi / 2 < p.theta <= np.pi / 2 for p in preds)


class TestAblation:
    def test_table_shape_and_aggregate(self, ds, tmp_path):
        cells = [AblationCell("temporal", "residual_dense"), AblationCell("twin", "residual_dense")]
        table = train.run_ablation(cells, [0, 1, 2, 3], ds, NET, replace(FAST, epochs=1))
        assert len(table.rows) == 8 and set(table.by_config()) == {"temporal", "twin"}
        # identical configs and seeds give identical rows
        assert [r.flat() | {"config": 0} for r in table.by_config()["temporal"]] == \
            [r.flat() | {"config": 0} for r in table.by_config()["twin"]]
        agg = table.aggregate()["temporal"]
        vals = list(table.metric("temporal", "test_a_tv").values())
        assert agg["test_a_tv"][0] == pytest.approx(np.mean(vals), abs=1e-15)
        assert agg["test_a_tv"][1] == pytest.approx(np.std(vals, ddof=1), abs=1e-15)
        best = table.best("temporal")
        assert best.val.horizon_auc == max(r.val.horizon_auc for r in table.by_config()["temporal"])
        table.write_csv(tmp_path / "a.csv")
        rows = list(csv.DictReader(open(tmp_path / "a.csv")))
        assert len(rows) == 8 + 4 and [r["seed"] for r in rows[8:10]] == ["mean", "std"]


def test_adaptive_training_halves_loss():
    """Smoke property on a small synthetic set.

    The logged per-epoch loss mixes different blends of the two terms, so the
    decrease is measured on a fixed objective: the same schedule point for the
    initial and the trained weights, at both ends of the schedule.
    """
    data = make_dataset(SynthConfig(width=32, height=32, seq_len=16, n_train=2, n_val=1, n_test=1))
    net = HorizonNetConfig(stages=[(8, 2), (8, 2)], cell="residual_dense")
    cfg = TrainConfig(epochs=60, seq_len=8, batch_size=2)
    init = HorizonNet.create(net, seed=cfg.seed)
    trained = train.train(net, cfg, data).model
    for t in (0, cfg.epochs):
        before = train.sequence_loss(init, data.splits["train"], t, cfg, data.dims)
        after = train.sequence_loss(trained, data.splits["train"], t, cfg, data.dims)
        assert after <= 0.5 * before, (t, before, after)
