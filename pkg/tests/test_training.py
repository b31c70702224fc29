import math

import numpy as np
import pytest
import torch

from deepvlf.channel import ChannelParams
from deepvlf.codec import CodecConfig, init_params
from deepvlf.core import StoppingRecord
from deepvlf.training import (
    LossConfig,
    TrainConfig,
    TrainingDiverged,
    loss_equal_weight,
    loss_exp_weight,
    loss_single,
    relative_errors,
    round_weights,
    train,
)

TABLE_LOSS = LossConfig("exp_weight", 10.0, 9.0, 1)


def _record(tau_star):
    ts = np.asarray(tau_star)
    return StoppingRecord(ts, np.zeros(ts.shape, dtype=bool))


def _random_history(rng, R, Q, A):
    P = rng.dirichlet(np.ones(A), size=(R, Q))
    return P, rng.integers(0, A, Q), _record(rng.integers(1, R + 1, Q))


class TestWeights:
    def test_table_values(self):
        w = round_weights(TABLE_LOSS, 10)
        assert [w[t - 1] for t in (5, 7, 9, 10)] == [1e-4, 1e-2, 1.0, 10.0]

    def test_gate_zeroes_early_rounds(self):
        w = round_weights(LossConfig(tau_plus=5), 8)
        assert not w[:4].any() and np.all(w[4:] > 0)

    def test_vartheta_below_one_rejected(self):
        with pytest.raises(ValueError):
            LossConfig("exp_weight", 0.5)


class TestExpWeight:
    def test_perfect_beliefs(self):
        P = np.zeros((6, 2, 4))
        P[..., 1] = 1.0
        assert loss_exp_weight(P, [1, 1], _record([6, 4]), LossConfig(tau_plus=3)) == 0.0

    def test_unit_example(self):
        P = np.full((9, 1, 2), 0.5)
        P[8, 0] = [math.exp(-1), 1 - math.exp(-1)]
        cfg = LossConfig(tau_plus=9)
        assert loss_exp_weight(P, [0], _record([9]), cfg) == pytest.approx(1.0, abs=1e-14)

    def test_round_seven_weight(self):
        P = np.full((7, 1, 2), 0.5)
        P[6, 0] = [math.exp(-1), 1 - math.exp(-1)]
        cfg = LossConfig(tau_plus=7)
        assert loss_exp_weight(P, [0], _record([7]), cfg) == pytest.approx(1e-2, rel=1e-13)

    def test_gate(self):
        rng = np.random.default_rng(0)
        P, labels, rec = _random_history(rng, 8, 3, 4)
        rec = _record([8, 6, 7])
        cfg = LossConfig(tau_plus=5)
        base = loss_exp_weight(P, labels, rec, cfg)
        P2 = P.copy()
        P2[:4] = rng.dirichlet(np.ones(4), size=(4, 3))
        assert loss_exp_weight(P2, labels, rec, cfg) == base
        P2[4, 0] = np.roll(P2[4, 0], 1)
        assert loss_exp_weight(P2, labels, rec, cfg) != base

    def test_zero_belief_clamped(self):
        P = np.array([[[0.0, 1.0]]])
        loss = loss_exp_weight(P, [0], _record([1]), LossConfig("exp_weight", 1.0, 0.0, 1))
        assert loss == pytest.approx(-math.log(1e-12))

    def test_history_too_short(self):
        with pytest.raises(ValueError):
            loss_exp_weight(np.full((2, 1, 2), 0.5), [0], _record([3]), TABLE_LOSS)


class TestEqualAndSingle:
    def test_uniform_log8(self):
        assert loss_equal_weight(np.full((1, 1, 8), 1 / 8), [5], _record([1])) == \
            pytest.approx(math.log(8), abs=1e-12)

    def test_perfect(self):
        P = np.zeros((3, 2, 2))
        P[..., 0] = 1.0
        assert loss_equal_weight(P, [0, 0], _record([3, 2])) == 0.0
        assert loss_single(P, [0, 0], _record([3, 2])) == 0.0

    def test_degeneration(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            P, labels, rec = _random_history(rng, 6, 4, 8)
            eq = loss_equal_weight(P, labels, rec)
            ex = loss_exp_weight(P, labels, rec, LossConfig("exp_weight", 1.0, 0.0, 1))
            assert abs(eq - ex) <= 1e-12

    def test_single_example(self):
        P = np.zeros((3, 2, 4))
        P[2, 0] = [0.5, 0.5, 0, 0]
        P[1, 1] = [0.25, 0.25, 0.25, 0.25]
        loss = loss_single(P, [0, 3], _record([3, 2]))
        assert loss == pytest.approx(math.log(2) + math.log(4), abs=1e-12)

    def test_single_ignores_earlier_rounds(self):
        rng = np.random.default_rng(2)
        P, labels, _ = _random_history(rng, 5, 3, 4)
        rec = _record([5, 5, 5])
        base = loss_single(P, labels, rec)
        P[:4] = rng.dirichlet(np.ones(4), size=(4, 3))
        assert loss_single(P, labels, rec) == base


class TestTrainLoop:
    CC = CodecConfig(Q=2, m=1, T_max=8, d_latent=8)

    def _run(self, steps=2, seed=5):
        codec = init_params(self.CC, 0)
        cfg = TrainConfig(batch_size=16, pretrain_steps=steps, finetune_steps=0, log_every=1,
                          val_every=0, seed=seed)
        res = train(cfg, codec, ChannelParams(3.0), phases=("pretrain",))
        return [r["loss"] for r in res.metrics if r["kind"] == "train"]

    def test_step_zero_and_one_deterministic(self):
        a, b = self._run(), self._run()
        assert len(a) == 2
        assert a == b

    def test_seed_matters(self):
        assert self._run(seed=5) != self._run(seed=6)

    def test_metrics_fields(self):
        codec = init_params(self.CC, 0)
        lines = []
        cfg = TrainConfig(batch_size=8, pretrain_steps=2, finetune_steps=1, log_every=1,
                          val_every=0, target_gamma=0.9)
        train(cfg, codec, ChannelParams(3.0), log_sink=lines.append)
        assert [r["phase"] for r in lines] == ["pretrain", "pretrain", "finetune"]
        assert lines[-1]["gamma"] == 0.9
        for r in lines:
            assert {"step", "phase", "gamma", "loss", "bler_estimate", "avg_rate",
                    "avg_power"} <= set(r)

    def test_validation_and_best_checkpoint(self, tmp_path):
        codec = init_params(self.CC, 0)
        seen = []

        def val(c, gamma):
            seen.append(gamma)
            return {"bler_estimate": 0.5, "avg_rate": 0.1, "avg_power": 1.0}

        cfg = TrainConfig(batch_size=8, pretrain_steps=4, finetune_steps=0, log_every=10,
                          val_every=2, target_gamma=0.95)
        res = train(cfg, codec, ChannelParams(3.0), phases=("pretrain",), val_fn=val,
                    checkpoint_path=tmp_path / "best.ckpt")
        assert seen == [0.95, 0.95]
        assert res.best_state is not None
        assert (tmp_path / "best.ckpt").exists()

    def test_divergence_keeps_last_good(self):
        codec = init_params(self.CC, 0)
        with torch.no_grad():
            codec.decoder.classifier.bias.fill_(float("nan"))
        cfg = TrainConfig(batch_size=8, pretrain_steps=3, finetune_steps=0, val_every=0)
        with pytest.raises(TrainingDiverged) as exc:
            train(cfg, codec, ChannelParams(3.0), phases=("pretrain",))
        assert exc.value.step == 0

    @pytest.mark.parametrize("field, value", [("batch_size", 0), ("lr", 0.0), ("loss", "dwa"),
                                              ("gamma_grid", ())])
    def test_config_validation(self, field, value):
        with pytest.raises(ValueError):
            TrainConfig(**{field: value})

    def test_table_defaults(self):
        cfg = TrainConfig()
        assert (cfg.batch_size, cfg.lr, cfg.weight_decay, cfg.vartheta, cfg.epsilon) == \
            (8192, 1e-3, 1e-3, 10.0, 9.0)


def test_relative_error_floor():
    rel = relative_errors(np.array([0.0, 1.0, 1e-12]), np.array([0.0, 1.0 + 1e-6, 0.0]))
    assert rel[0] == 0.0
    assert rel[1] == pytest.approx(1e-6 / (1 + 1e-6))
    assert rel[2] == pytest.approx(1e-4)
