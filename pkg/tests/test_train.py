import math
from dataclasses import replace

import numpy as np
import pytest

from sdgnn import numcore as nc
from sdgnn.data import synth_corpus
from sdgnn.graphbuild import collate
from sdgnn.model import SDGNNConfig
from sdgnn.numcore import Parameter
from sdgnn.train import (
    AdamState, CheckpointError, TrainConfig, TrainingError, adam_step, bce, l2_penalty,
    load_checkpoint, save_checkpoint, snapshot, train, weighted_bce,
)


def test_weighted_bce_hand_values():
    assert abs(weighted_bce([0.5], [1], 0.05).value - math.log(2)) <= 1e-12
    assert abs(weighted_bce([0.5], [1], 3.0).value - math.log(2)) <= 1e-12
    assert abs(weighted_bce([0.5], [0], 0.05).value - 0.05 * math.log(2)) <= 1e-12


def test_eta_one_is_plain_bce_bitwise():
    rng = nc.make_rng(0)
    p = rng.uniform(0.01, 0.99, size=50)
    y = rng.integers(0, 2, size=50)
    assert weighted_bce(p, y, 1.0).value == bce(p, y).value


def test_weighted_bce_nonnegative_and_clamped():
    assert weighted_bce([1.0, 0.0], [1, 0], 1.0).value == 0.0
    worst = weighted_bce([0.0], [1], 1.0).value
    assert worst == pytest.approx(-math.log(1e-12))
    rng = nc.make_rng(1)
    assert weighted_bce(rng.uniform(size=20), rng.integers(0, 2, 20), 0.3).value > 0


def test_l2_examples():
    ones = {"gnn1.W": Parameter(np.ones((2, 2)))}
    assert l2_penalty(ones, 0.0).value == 0.0
    assert l2_penalty(ones, 0.5).value == 2.0
    biases = {"gnn1.b": Parameter(np.ones(3)), "cls.b": Parameter(np.ones(1)),
              "lstm.fwd.b": Parameter(np.ones(4)), "embedding.word": Parameter(np.ones((3, 2))),
              "gnn1.rel_emb": Parameter(np.ones((3, 2)))}
    assert l2_penalty(biases, 1.0).value == 0.0


def test_adam_zero_gradient_leaves_params():
    p = Parameter(np.array([1.0, -2.0]), "p")
    state = AdamState()
    adam_step([p], state, 0.1)
    assert p.value.tolist() == [1.0, -2.0] and state.t == 1


def test_adam_first_step_is_signed_lr():
    p = Parameter(np.array([0.0, 0.0, 0.0]), "p")
    p.grad = np.array([3.0, -0.02, 1e-3])
    adam_step([p], AdamState(), 0.01)
    np.testing.assert_allclose(p.value, [-0.01, 0.01, -0.01], rtol=1e-4)


def test_adam_nan_gradient_names_parameter():
    p = Parameter(np.zeros(2), "gnn1.W")
    p.grad = np.array([np.nan, 0.0])
    with pytest.raises(TrainingError, match="gnn1.W"):
        adam_step([p], AdamState(), 0.01)


def small(**kw):
    return replace(SDGNNConfig(d=8, d_word=8, dropout=0.0), **kw)


def test_lr_zero_keeps_parameters_and_metric():
    tr, va = synth_corpus(20, 0), synth_corpus(10, 1)
    res = train(tr, va, small(), TrainConfig(lr=0.0, max_epochs=3, patience=5, seed=2))
    # best is the epoch-1 snapshot, final the epoch-3 one
    for n, v in res.final.params.items():
        assert np.array_equal(v, res.best.params[n])
    assert len({e["val_auroc"] for e in res.log}) == 1


def test_patience_one_stops_after_two_evaluations():
    # with lr = 0 every later evaluation ties the first, which is not an improvement
    tr, va = synth_corpus(20, 0), synth_corpus(10, 1)
    res = train(tr, va, small(), TrainConfig(lr=0.0, max_epochs=10, patience=1))
    assert len(res.log) == 2
    res = train(tr, va, small(), TrainConfig(lr=0.0, max_epochs=10, patience=3))
    assert len(res.log) == 4


def test_loss_decreases_over_first_five_epochs_default_config():
    res = train(synth_corpus(200, 0), synth_corpus(100, 1000), SDGNNConfig(),
                TrainConfig(max_epochs=5, patience=10))
    losses = [e["train_loss"] for e in res.log]
    violations = sum(b >= a for a, b in zip(losses, losses[1:]))
    assert violations <= 1, losses


def test_training_log_fields_and_determinism():
    tr, va = synth_corpus(20, 0), synth_corpus(10, 1)
    cfg = TrainConfig(max_epochs=3, batch_size=8, seed=5)
    a = train(tr, va, small(dropout=0.5), cfg)
    b = train(tr, va, small(dropout=0.5), cfg)
    assert set(a.log[0]) >= {"epoch", "train_loss", "val_auroc", "val_f1", "seconds"}
    strip = lambda log: [{k: v for k, v in e.items() if k != "seconds"} for e in log]  # noqa: E731
    assert strip(a.log) == strip(b.log)
    for n, v in a.final.params.items():
        assert np.array_equal(v, b.final.params[n])


def test_empty_split_is_an_error():
    with pytest.raises(TrainingError):
        train([], synth_corpus(4, 0), small(), TrainConfig())


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(eta=0)
    with pytest.raises(ValueError):
        TrainConfig(l2=-1)


@pytest.fixture
def trained(tmp_path):
    tr, va = synth_corpus(20, 0), synth_corpus(10, 1)
    res = train(tr, va, small(), TrainConfig(max_epochs=2, seed=1))
    path = tmp_path / "m.ckpt"
    save_checkpoint(res.final, path)
    return res, path, va


def test_checkpoint_round_trip_bitwise(trained, tmp_path):
    res, path, _ = trained
    loaded = load_checkpoint(path)
    assert loaded.config == res.final.config
    assert loaded.relations == res.final.relations and loaded.words == res.final.words
    for n, v in res.final.params.items():
        assert np.array_equal(loaded.params[n], v)
    for n, v in res.final.adam.m.items():
        assert np.array_equal(loaded.adam.m[n], v)
        assert np.array_equal(loaded.adam.v[n], res.final.adam.v[n])
    assert loaded.adam.t == res.final.adam.t and loaded.rng_state == res.final.rng_state
    again = tmp_path / "again.ckpt"
    save_checkpoint(loaded, again)
    assert again.read_bytes() == path.read_bytes()


def test_checkpoint_forward_outputs_identical(trained):
    res, path, va = trained
    batch = collate(va, res.vocabs)
    original = res.final.model()(batch).probs
    restored = load_checkpoint(path).model()(batch).probs
    assert np.array_equal(original, restored)


@pytest.mark.parametrize("cut", [0, 5, 20, -1])
def test_truncated_checkpoint_is_rejected(trained, tmp_path, cut):
    _, path, _ = trained
    data = path.read_bytes()
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(data[:cut] if cut >= 0 else data[:-1])
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)


def test_wrong_version_is_rejected(trained, tmp_path):
    _, path, _ = trained
    data = bytearray(path.read_bytes())
    data[8] = 9
    bad = tmp_path / "v9.ckpt"
    bad.write_bytes(bytes(data))
    with pytest.raises(CheckpointError, match="version 9"):
        load_checkpoint(bad)


def test_snapshot_is_a_copy(tiny_setup):
    model, _, _, vocabs = tiny_setup()
    snap = snapshot(model, vocabs)
    model.params["cls.w"].value += 1.0
    assert not np.array_equal(snap.params["cls.w"], model.params["cls.w"].value)
