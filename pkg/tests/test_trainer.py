import math

import numpy as np
import pytest

from mcmask import numerics as nx
from mcmask.beamforming import linear_array
from mcmask.masking import init_model
from mcmask.mixture import SimulationConfig, simulate
from mcmask.numerics import make_rng
from mcmask.trainer import (
    Adam,
    TrainConfig,
    TrainingDiverged,
    batch_gradients,
    fit_length,
    loss_graph,
    mean_sdr,
    sdr_loss,
    train,
    write_log,
)


@pytest.fixture
def ref():
    return make_rng(0).standard_normal(500)


class TestSdrLoss:
    def test_perfect_estimate_hits_stabiliser(self, ref):
        expected = -10 * math.log10(float(ref @ ref) / 1e-9)
        assert float(sdr_loss(ref, ref)) == pytest.approx(expected)
        assert float(sdr_loss(ref, ref)) < -85

    def test_silent_estimate(self, ref):
        e = float(ref @ ref)
        assert float(sdr_loss(np.zeros_like(ref), ref)) == pytest.approx(-10 * math.log10(e / (e + 1e-9)))
        assert abs(float(sdr_loss(np.zeros_like(ref), ref))) < 1e-9

    def test_tenth_energy_error(self, ref):
        e = make_rng(1).standard_normal(ref.size)
        e *= np.sqrt((ref @ ref) / 10 / (e @ e))
        assert float(sdr_loss(ref + e, ref)) == pytest.approx(-10.0, abs=1e-8)

    def test_gradient_check(self, ref):
        g = nx.Graph()
        est = g.leaf(ref + 0.2 * make_rng(2).standard_normal(ref.size), trainable=True)
        loss = sdr_loss(est, ref)
        assert nx.grad_check(g, est, 1e-5, loss=loss) < 1e-4


def test_fit_length():
    x = np.arange(10.0)
    np.testing.assert_array_equal(fit_length(x, 4), x[:4])
    np.testing.assert_array_equal(fit_length(x, 12), np.r_[x, 0, 0])
    assert fit_length(np.ones((3, 5)), 8).shape == (3, 8)


def test_adam_first_step_moves_by_learning_rate():
    p = {"w": np.array([1.0, -2.0])}
    out = Adam(p, 0.1).step(p, {"w": np.array([3.0, -0.5])})
    np.testing.assert_allclose(out["w"], [0.9, -1.9], atol=1e-8)


def test_batched_loss_equals_mean_of_single_losses():
    rng = make_rng(3)
    model = init_model(rng, 2, 8, 8, hidden=[6])
    mixes, refs = rng.standard_normal((3, 2, 40)), rng.standard_normal((3, 40))
    batch, _ = batch_gradients(model, mixes, refs)
    singles = [batch_gradients(model, mixes[i:i + 1], refs[i:i + 1])[0] for i in range(3)]
    assert batch == pytest.approx(np.mean(singles), rel=1e-12)


def test_pipeline_gradients_small():
    rng = make_rng(4)
    model = init_model(rng, 2, 6, 4, hidden=[5])
    g, loss, params = loss_graph(model, rng.standard_normal((2, 2, 18)), rng.standard_normal((2, 18)))
    for name, var in params.items():
        assert nx.grad_check(g, var, 1e-5, loss=loss) < 1e-4, name


@pytest.fixture(scope="module")
def toy_data():
    cfg = SimulationConfig(n_scenes=24, seed=1, duration_s=0.1, noise_duration_s=0.2, snr_db=5.0)
    pairs = [s.training_pair() for s in simulate(cfg, linear_array(2, 0.08))]
    return pairs[:16], pairs[16:20], pairs[20:]


def small_cfg(**kw):
    base = dict(epochs=2, batch_size=8, segment_seconds=0.1, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def test_zero_learning_rate_leaves_parameters_unchanged(toy_data):
    tr, va, _ = toy_data
    model = init_model(make_rng(0), 2, 16, 16)
    before = {k: v.copy() for k, v in model.parameters().items()}
    train(model, tr, va, small_cfg(epochs=1, learning_rate=0.0))
    for k, v in model.parameters().items():
        assert np.array_equal(v, before[k]), k


def test_same_seed_same_trajectory(toy_data):
    tr, va, _ = toy_data
    runs = []
    for _ in range(2):
        ck = train(init_model(make_rng(0), 2, 16, 16), tr, va, small_cfg())
        runs.append([(h["train_loss"], h["val_loss"]) for h in ck.history])
    assert runs[0] == runs[1]


def test_best_checkpoint_is_minimum(toy_data):
    tr, va, te = toy_data
    ck = train(init_model(make_rng(0), 2, 16, 16), tr, va, small_cfg(epochs=4))
    assert all(ck.validation_loss <= h["val_loss"] for h in ck.history)
    assert ck.history[ck.epoch]["val_loss"] == ck.validation_loss
    assert mean_sdr(ck.model, te) > mean_sdr(init_model(make_rng(0), 2, 16, 16), te)


def test_zero_epochs_returns_initialisation(toy_data):
    tr, va, _ = toy_data
    model = init_model(make_rng(0), 2, 16, 16)
    ck = train(model, tr, va, small_cfg(epochs=0))
    assert ck.epoch == 0
    for k, v in ck.model.parameters().items():
        assert np.array_equal(v, model.parameters()[k])


def test_divergence_reports_epoch(toy_data):
    tr, va, _ = toy_data
    model = init_model(make_rng(0), 2, 16, 16)
    with pytest.raises(TrainingDiverged, match="epoch 1"):
        train(model, tr, va, small_cfg(learning_rate=1e306))


def test_rejects_bad_inputs(toy_data):
    tr, va, _ = toy_data
    with pytest.raises(ValueError):
        train(init_model(make_rng(0), 2, 16, 16), [], va, small_cfg())
    with pytest.raises(ValueError):
        train(init_model(make_rng(0), 3, 16, 16), tr, va, small_cfg())
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)


def test_default_hyperparameters():
    cfg = TrainConfig()
    assert (cfg.learning_rate, cfg.epochs, cfg.batch_size, cfg.segment_seconds) == (3e-3, 50, 8, 3.0)
    assert cfg.segment_length == 48000


def test_log_lines(tmp_path):
    write_log(tmp_path / "log.jsonl", [{"epoch": 0, "train_loss": None, "val_loss": 1.0}])
    assert (tmp_path / "log.jsonl").read_text().strip() == '{"epoch": 0, "train_loss": null, "val_loss": 1.0}'
