import json

import numpy as np
import pytest

from app.core.errors import GraphMismatchError, TrainingDivergedError, VersionMismatchError
from app.core.graph import build_shift
from app.ml.datagen import FilterModel, SourceModel, make_dataset
from app.ml.graphs import gen_graph
from app.ml.slog_net import FIELD_ORDER, init_model
from app.ml.train import (
    MODEL_FILE,
    PARAMS_FILE,
    TrainingLog,
    infer,
    load_checkpoint,
    save_checkpoint,
    train,
    validation_loss,
)
from app.models.records import TrainConfig


def split(sg, size, seed, name):
    return make_dataset(
        sg,
        SourceModel(n_nodes=sg.n_nodes, sparsity=0.2, seed=seed),
        FilterModel(order=3, impulsiveness=0.5, seed=seed + 1),
        size=size,
        batch=4,
        split=name,
    )


@pytest.fixture
def data(er8):
    return split(er8, 8, 1, "train"), split(er8, 4, 5, "val")


class TestTrainingLog:
    def test_ties_keep_earlier_snapshot(self):
        log = TrainingLog()
        log.record_validation(1, 0.5, np.array([1.0]))
        log.record_validation(2, 0.5, np.array([2.0]))
        assert log.best_step == 1
        np.testing.assert_array_equal(log.best_params, [1.0])


class TestTrain:
    def test_one_epoch_runs_one_step_per_batch(self, er8, data):
        model = init_model(8, 2, 2, seed=0, sg=er8)
        _, log = train(model, *data, cfg=TrainConfig(epochs=1, val_every_batches=1))
        assert len(log.steps) == 2
        assert sorted(entry["batch"] for entry in log.steps) == [0, 1]
        assert len(log.validations) == 2

    def test_best_model_has_lowest_validation_loss(self, er8, data):
        model = init_model(8, 2, 2, seed=0, sg=er8)
        best, log = train(model, *data, cfg=TrainConfig(epochs=3, val_every_batches=1, learning_rate=1e-2))
        losses = [entry["loss"] for entry in log.validations]
        assert log.best_val_loss == min(losses)
        np.testing.assert_array_equal(best.flatten(), log.best_params)
        assert validation_loss(best, data[1], seed=7) == pytest.approx(log.best_val_loss, abs=1e-12)

    def test_final_step_is_always_validated(self, er8, data):
        model = init_model(8, 2, 2, seed=0, sg=er8)
        _, log = train(model, *data, cfg=TrainConfig(epochs=1, val_every_batches=50))
        assert [entry["step"] for entry in log.validations] == [2]

    def test_training_is_deterministic(self, er8, data):
        cfg = TrainConfig(epochs=2, val_every_batches=1)
        a, _ = train(init_model(8, 2, 2, seed=0, sg=er8), *data, cfg=cfg)
        b, _ = train(init_model(8, 2, 2, seed=0, sg=er8), *data, cfg=cfg)
        np.testing.assert_array_equal(a.flatten(), b.flatten())

    def test_divergence_is_reported(self, er8, data):
        model = init_model(8, 2, 2, seed=0, sg=er8)
        flat = model.flatten()
        flat[FIELD_ORDER.index("alpha1")] = np.inf
        model.load_flat(flat)
        with pytest.raises(TrainingDivergedError) as info:
            train(model, *data, cfg=TrainConfig(epochs=1))
        assert info.value.log["steps"] == []

    def test_checkpoints_on_improvement(self, er8, data, tmp_path):
        model = init_model(8, 2, 2, seed=0, sg=er8)
        train(model, *data, cfg=TrainConfig(epochs=1, checkpoint_dir=str(tmp_path / "ckpt")))
        assert (tmp_path / "ckpt" / MODEL_FILE).exists()
        assert (tmp_path / "ckpt" / PARAMS_FILE).exists()


class TestCheckpoint:
    def test_round_trip(self, er8, tmp_path):
        model = init_model(8, 2, 3, seed=4, sg=er8)
        save_checkpoint(model, tmp_path, best_val_loss=0.25)
        back, manifest = load_checkpoint(tmp_path, er8)
        np.testing.assert_array_equal(back.flatten(), model.flatten())
        assert manifest.field_order == list(FIELD_ORDER)
        assert manifest.best_val_loss == 0.25
        assert (manifest.n_layers, manifest.constraint_dim) == (3, 2)

    def test_other_graph_is_rejected(self, er8, tmp_path):
        save_checkpoint(init_model(8, 2, 2, seed=0, sg=er8), tmp_path)
        other = build_shift(gen_graph("er", {"n": 8, "p": 0.5}, seed=12))
        with pytest.raises(GraphMismatchError):
            load_checkpoint(tmp_path, other)

    def test_unknown_format_version(self, er8, tmp_path):
        save_checkpoint(init_model(8, 2, 2, seed=0, sg=er8), tmp_path)
        raw = json.loads((tmp_path / MODEL_FILE).read_text())
        raw["format_version"] = 2
        (tmp_path / MODEL_FILE).write_text(json.dumps(raw))
        with pytest.raises(VersionMismatchError):
            load_checkpoint(tmp_path, er8)


def test_infer_is_deterministic(er8, rng):
    model = init_model(8, 2, 2, seed=0, sg=er8)
    Y = rng.standard_normal((8, 5))
    x1, g1, seconds = infer(model, Y, seed=3)
    x2, g2, _ = infer(model, Y, seed=3)
    np.testing.assert_array_equal(x1, x2)
    np.testing.assert_array_equal(g1, g2)
    assert seconds >= 0
