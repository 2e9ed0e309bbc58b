import numpy as np
import pytest

from softmerge import datazoo as dz
from softmerge import mergenet as mn
from softmerge import netgraph as ng
from softmerge import trainer as tr


@pytest.fixture(scope="module")
def data():
    d = dz.gen_blobs(4, 8, 900, 6.0, seed=0)
    return d.subset(slice(0, 600)), d.subset(slice(600, 900), "val")


@pytest.fixture(scope="module")
def pair(data):
    # index 0 randomized, index 1 trained
    return dz.build_zoo(ng.mlp([8, 16, 4]), data[0], ["randomize", "base"], 0, base_epochs=20)


class TestConfig:
    @pytest.mark.parametrize("kwargs", [dict(lr=0.0), dict(lam=-1.0), dict(epochs=-1), dict(batch_size=0)])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            tr.TrainConfig(**kwargs)

    def test_defaults(self):
        cfg = tr.TrainConfig()
        assert (cfg.lr, cfg.epochs, cfg.batch_size, cfg.lam, cfg.sigma_init) == (0.001, 150, 32, 5.0, 0.01)


class TestEvaluate:
    def test_zero_model(self, data):
        # zero weights give uniform logits: loss ln 4, predictions all class 0
        loss, acc = tr.evaluate(ng.mlp([8, 16, 4]), data[1])
        assert loss == pytest.approx(np.log(4), rel=1e-14)
        assert acc == np.mean(data[1].y == 0)

    def test_merged_uses_deterministic_gates(self, pair, data):
        spec = mn.MergeSpec.build("model", pair)
        m = mn.MergedModel(pair, spec, mn.one_hot_bank(spec, [1]), mode="stochastic")
        assert tr.evaluate(m, data[1]) == tr.evaluate(pair[1], data[1])


class TestTrainGates:
    def test_single_model_gate_stays_open(self, pair, data):
        cfg = tr.TrainConfig(lr=0.001, epochs=5, lam=5.0, seed=0)
        bank, report = tr.train_gates(pair[1:], data[0], data[1], cfg)
        assert bank.log_alpha.shape == (1, 1)
        assert bank.log_alpha[0, 0] > report.init_bank.log_alpha[0, 0]
        assert report.val_acc[-1] == tr.evaluate(pair[1], data[1])[1]

    def test_good_beats_bad(self, pair, data):
        cfg = tr.TrainConfig(lr=0.001, epochs=10, lam=5.0, seed=1)
        bank, report = tr.train_gates(pair, data[0], data[1], cfg)
        assert mn.winners(bank) == [1]
        assert bank.log_alpha[0, 1] > report.init_bank.log_alpha[0, 1]
        assert bank.log_alpha[0, 0] < report.init_bank.log_alpha[0, 0]

    def test_weights_frozen(self, pair, data):
        before = [m.checksum() for m in pair]
        tr.train_gates(pair, data[0], data[1], tr.TrainConfig(epochs=2, seed=0))
        assert [m.checksum() for m in pair] == before

    def test_repeatable(self, pair, data):
        cfg = tr.TrainConfig(epochs=3, seed=7, level="model")
        b1, r1 = tr.train_gates(pair, data[0], data[1], cfg)
        b2, r2 = tr.train_gates(pair, data[0], data[1], cfg)
        assert r1 == r2
        assert b1.log_alpha.tobytes() == b2.log_alpha.tobytes()
        assert r1.to_csv() == r2.to_csv()

    def test_seed_changes_run(self, pair, data):
        r1 = tr.train_gates(pair, data[0], data[1], tr.TrainConfig(epochs=1, seed=0))[1]
        r2 = tr.train_gates(pair, data[0], data[1], tr.TrainConfig(epochs=1, seed=1))[1]
        assert r1 != r2

    def test_zero_epochs_returns_init(self, pair, data):
        bank, report = tr.train_gates(pair, data[0], data[1], tr.TrainConfig(epochs=0, seed=3))
        assert np.array_equal(bank.log_alpha, report.init_bank.log_alpha)
        assert report.epochs == 0

    def test_beta_frozen_by_default(self, pair, data):
        bank, _ = tr.train_gates(pair, data[0], data[1], tr.TrainConfig(epochs=1))
        np.testing.assert_allclose(bank.beta, 0.5, atol=1e-15)

    def test_beta_trains_when_enabled(self, pair, data):
        bank, _ = tr.train_gates(pair, data[0], data[1], tr.TrainConfig(epochs=1, train_beta=True))
        assert not np.allclose(bank.beta, 0.5)

    def test_given_bank_not_mutated(self, pair, data):
        spec = mn.MergeSpec.build("model", pair)
        start = mn.init_gates(spec, 0)
        snap = start.log_alpha.copy()
        bank, _ = tr.train_gates(pair, data[0], data[1], tr.TrainConfig(epochs=1), bank=start)
        assert np.array_equal(start.log_alpha, snap)
        assert not np.array_equal(bank.log_alpha, snap)

    def test_single_step_matches_hand_gradient(self, pair, data):
        # lam only, no task signal: one step moves log_alpha by -lr*lam*dg/dla
        tiny = data[0].subset(slice(0, 4))
        cfg = tr.TrainConfig(lr=0.01, epochs=1, batch_size=4, lam=1.0, mode="deterministic", sigma_init=0.0)
        zero = [ng.mlp([8, 16, 4]), ng.mlp([8, 16, 4])]
        bank, _ = tr.train_gates(zero, tiny, tiny, cfg)
        # zero models give constant logits, so the task gradient is 0; dg/dla = 1.2 * 0.25 at la=0
        np.testing.assert_allclose(bank.log_alpha, -0.01 * 1.0 * 1.2 * 0.25, rtol=1e-12)

    def test_divergence_raised(self, pair, data):
        bad = [m.copy() for m in pair]
        # output layer: relu upstream would map NaN to 0
        bad[0].layers[2].weight[:] = np.nan
        with pytest.raises(dz.DivergenceError):
            tr.train_gates(bad, data[0], data[1], tr.TrainConfig(epochs=1, sigma_init=0.0, mode="deterministic"))

    def test_arch_mismatch(self, pair, data):
        with pytest.raises(ng.ArchitectureMismatch):
            tr.train_gates([pair[0], ng.mlp([8, 4])], data[0], data[1], tr.TrainConfig(epochs=1))

    def test_report_csv_columns(self, pair, data):
        _, report = tr.train_gates(pair, data[0], data[1], tr.TrainConfig(epochs=2))
        lines = report.to_csv().splitlines()
        assert lines[0] == "epoch,train_loss,val_loss,val_acc,log_alpha_s0_m0,log_alpha_s0_m1"
        assert len(lines) == 3 and lines[2].startswith("2,")


@pytest.mark.parametrize("level", ["module", "layer"])
def test_statistical_invariants(level, data):
    """Over seeds: gates stay finite, the trained model wins every site, val loss falls."""
    tmpl = ng.mlp([8, 16, 16, 4])
    tmpl = ng.ModelDef(tmpl.layers, ng.split_groups(tmpl, 2))
    zoo = dz.build_zoo(tmpl, data[0], ["base", "randomize"], 0, base_epochs=20)
    for seed in range(3):
        bank, report = tr.train_gates(zoo, data[0], data[1], tr.TrainConfig(epochs=10, seed=seed, level=level, batch_size=16))
        assert np.all(np.isfinite(bank.log_alpha))
        assert mn.winners(bank) == [0] * len(bank.sites)
        assert report.val_loss[-1] < report.val_loss[0]
