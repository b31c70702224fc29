import dataclasses
import math

import numpy as np
import pytest

from deepvlf.channel import ChannelParams, measure_avg_power
from deepvlf.codec import CodecConfig
from deepvlf.core import compute_code_rate
from deepvlf.protocol import (
    OracleCodec,
    ProtocolConfig,
    UniformCodec,
    compute_tau_plus,
    mu_schedule,
    read_transcripts,
    replay_verify,
    run_session,
    run_sessions,
    write_transcripts,
)

from conftest import loose_protocol

TABLE = CodecConfig()                   # Q=17, m=3, T_max=15


def _proto(gamma=1 - 1e-5, snr=1.0, **kw):
    return ProtocolConfig(gamma=gamma, T_max=TABLE.T_max, m=TABLE.m, channel=ChannelParams(snr),
                          **kw)


class TestTauPlus:
    @pytest.mark.parametrize("snr, gamma, expected", [
        (1.0, 1 - 1e-5, 5),
        (0.0, 1 - 1e-5, 6),
        (1.0, 1 - 1e-7, 7),
    ])
    def test_examples(self, snr, gamma, expected):
        assert compute_tau_plus(3, snr, gamma) == expected

    @pytest.mark.parametrize("gamma, mu", [(1 - 1e-3, 5), (1 - 1e-5, 5), (1 - 1e-6, 6),
                                           (1 - 1e-7, 7)])
    def test_mu(self, gamma, mu):
        assert mu_schedule(gamma) == mu

    def test_high_snr_floor_is_mu(self):
        assert compute_tau_plus(3, 40.0, 1 - 1e-3) == 5

    def test_tau_plus_beyond_tmax_rejected(self):
        with pytest.raises(ValueError):
            ProtocolConfig(gamma=1 - 1e-7, T_max=6, m=3, channel=ChannelParams(1.0))

    @pytest.mark.parametrize("gamma", [0.0, 1.0, -0.5])
    def test_gamma_range(self, gamma):
        with pytest.raises(ValueError):
            _proto(gamma=gamma)


class TestOracleStub:
    def test_infinite_snr_earliest_stop(self):
        cfg = _proto(snr=math.inf, tau_plus_override=5)
        for tr in run_sessions(OracleCodec(TABLE), cfg, seed=0, count=20):
            assert np.all(tr.record.tau_star == 5)
            assert tr.rate == pytest.approx(51 / 85, abs=0) and tr.rate == 0.6
            np.testing.assert_array_equal(tr.decoded, tr.message)
            assert not tr.record.forced.any()

    def test_derived_tau_plus(self):
        cfg = _proto(gamma=1 - 1e-7)
        tr = run_sessions(OracleCodec(TABLE), cfg, seed=1, count=1)[0]
        assert np.all(tr.record.tau_star == 7)
        assert tr.rate == 51 / (17 * 7)

    def test_uniform_stub_forces_everything(self):
        tr = run_sessions(UniformCodec(TABLE), _proto(), seed=0, count=1)[0]
        assert np.all(tr.record.tau_star == TABLE.T_max)
        assert tr.record.forced.all()
        # argmax of a uniform belief is the lowest index: the all-zero group
        assert not tr.decoded.any()

    def test_message_length_checked(self):
        with pytest.raises(ValueError):
            run_session(np.zeros(50, dtype=int), _proto(), OracleCodec(TABLE), seed=0)


@pytest.fixture(scope="module")
def transcripts(small_codec):
    cfg = loose_protocol(small_codec.config, tau_plus=2)
    return cfg, run_sessions(small_codec, cfg, seed=7, count=200)


class TestInvariants:
    def test_stopping_rounds_varied(self, transcripts):
        _, trs = transcripts
        assert len({int(t) for tr in trs for t in tr.record.tau_star}) >= 3

    def test_no_decode_before_tau_plus(self, transcripts):
        cfg, trs = transcripts
        for tr in trs:
            assert tr.record.tau_star.min() >= cfg.tau_plus
            assert tr.record.tau_star.max() <= cfg.T_max

    def test_masks_monotone_and_symbols_match(self, transcripts):
        _, trs = transcripts
        for tr in trs:
            prev = np.ones_like(tr.rounds[0].mask)
            for r in tr.rounds:
                assert np.all(r.mask <= prev)
                assert r.transmitted.size == int(prev.sum())   # active groups at this round
                np.testing.assert_array_equal(r.groups, np.flatnonzero(prev))
                prev = r.mask
            assert not prev.any()

    def test_simplex(self, transcripts):
        _, trs = transcripts
        for tr in trs:
            for r in tr.rounds:
                assert np.all(r.beliefs >= 0)
                np.testing.assert_allclose(r.beliefs.sum(-1), 1.0, atol=1e-6)

    def test_channel_use_accounting(self, transcripts):
        _, trs = transcripts
        for tr in trs:
            assert tr.all_transmitted().size == tr.record.tau_star.sum()
            assert compute_code_rate(tr.record, tr.K) == tr.K / tr.all_transmitted().size

    def test_frozen_beliefs_constant(self, transcripts):
        _, trs = transcripts
        for tr in trs:
            for q, ts in enumerate(tr.record.tau_star):
                for r in tr.rounds[ts:]:
                    np.testing.assert_array_equal(r.beliefs[q], tr.rounds[ts - 1].beliefs[q])

    def test_block_error_is_or_of_groups(self, transcripts):
        _, trs = transcripts
        assert any(tr.block_error for tr in trs)
        for tr in trs:
            assert tr.block_error == bool(tr.group_errors.any())

    def test_decoded_is_argmax_at_stop(self, transcripts):
        _, trs = transcripts
        for tr in trs:
            Q = tr.record.tau_star.size
            picks = [np.argmax(tr.rounds[ts - 1].beliefs[q]) for q, ts in enumerate(tr.record.tau_star)]
            bits = ((np.array(picks)[:, None] >> np.arange(tr.m)[::-1]) & 1).reshape(-1)
            np.testing.assert_array_equal(bits, tr.decoded)
            assert Q * tr.m == tr.K

    def test_power_from_transcripts(self, transcripts):
        _, trs = transcripts
        p = measure_avg_power([tr.all_transmitted() for tr in trs])
        assert np.isfinite(p) and p > 0
        assert measure_avg_power(trs) == p
        x = trs[0].all_transmitted()
        assert measure_avg_power(trs[0]) == pytest.approx(float(np.mean(x * x)), rel=1e-15)


class TestDeterminismAndReplay:
    def test_identical_transcripts(self, small_codec, tmp_path):
        cfg = loose_protocol(small_codec.config)
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        write_transcripts(run_sessions(small_codec, cfg, seed=3, count=10), a)
        write_transcripts(run_sessions(small_codec, cfg, seed=3, count=10), b)
        assert a.read_bytes() == b.read_bytes()

    def test_single_session_run(self, small_codec):
        cfg = loose_protocol(small_codec.config)
        msg = np.array([1, 0, 1, 1, 0, 0, 1, 0])
        a = run_session(msg, cfg, small_codec, seed=4, session=2)
        b = run_session(msg, cfg, small_codec, seed=4, session=2)
        np.testing.assert_array_equal(a.message, msg)
        assert a.to_lines() == b.to_lines()
        assert replay_verify(a, cfg, small_codec)

    def test_untouched_passes(self, small_codec, tmp_path):
        cfg = loose_protocol(small_codec.config)
        trs = run_sessions(small_codec, cfg, seed=3, count=6)
        path = tmp_path / "t.jsonl"
        write_transcripts(trs, path)
        for tr in read_transcripts(path):
            assert replay_verify(tr, cfg, small_codec).ok

    def test_perturbed_symbol_fails_at_round(self, small_codec):
        cfg = loose_protocol(small_codec.config, gamma=0.999999, tau_plus=6)
        tr = run_sessions(small_codec, cfg, seed=3, count=1)[0]
        tr.rounds[2].transmitted[1] += 1e-9
        res = replay_verify(tr, cfg, small_codec)
        assert not res.ok
        assert (res.round, res.field) == (3, "transmitted")

    def test_other_gamma_fails_at_first_gated_round(self):
        low = _proto(gamma=1 - 1e-5)          # tau_plus = 5
        high = _proto(gamma=1 - 1e-7)         # tau_plus = 7
        tr = run_sessions(OracleCodec(TABLE), low, seed=0, count=1)[0]
        res = replay_verify(tr, high, OracleCodec(TABLE))
        assert not res.ok
        assert res.round == low.tau_plus
        assert res.field == "mask"

    def test_chunk_position_recorded(self, small_codec):
        cfg = loose_protocol(small_codec.config)
        trs = run_sessions(small_codec, cfg, seed=3, start=4, count=5, chunk_size=2)
        assert [t.chunk for t in trs] == [(4, 2), (4, 2), (6, 2), (6, 2), (8, 1)]
        assert all(replay_verify(t, cfg, small_codec) for t in trs)

    def test_replay_detects_other_seed(self, small_codec):
        cfg = loose_protocol(small_codec.config)
        tr = run_sessions(small_codec, cfg, seed=3, count=1)[0]
        tr = dataclasses.replace(tr, seed=4)
        assert not replay_verify(tr, cfg, small_codec).ok
