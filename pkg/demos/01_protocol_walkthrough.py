"""One session of the variable-length protocol, printed round by round.

Uses the oracle test double so the output is short and predictable, then a
network trained for a few seconds so you can see groups stop at different rounds.
"""
import numpy as np

from deepvlf import ChannelParams, CodecConfig, ProtocolConfig, TrainConfig, init_params, train
from deepvlf.protocol import OracleCodec, compute_tau_plus, run_session
from deepvlf.training import calibrate_power

cc = CodecConfig(Q=4, m=2, T_max=8, d_latent=16)
message = np.array([1, 0, 1, 1, 0, 0, 1, 0])

# earliest round at which any group may stop: 2m/log2(1+snr) vs the gamma floor
for snr in (0.0, 1.0, 10.0):
    print(f"tau_plus at {snr:4.1f} dB, gamma=1-1e-5:", compute_tau_plus(cc.m, snr, 1 - 1e-5))

proto = ProtocolConfig(gamma=1 - 1e-5, T_max=cc.T_max, m=cc.m, channel=ChannelParams(1.0))
tr = run_session(message, proto, OracleCodec(cc), seed=0)
print("\noracle decoder:", "tau* =", tr.record.tau_star, "rate =", tr.rate)

# a barely trained network: 150 small steps at 1 dB, threshold 0.9, decoding allowed from round 2
channel = ChannelParams(1.0)
codec = init_params(cc, seed=1)
train(TrainConfig(batch_size=128, pretrain_steps=150, finetune_steps=0, gamma_grid=(0.9,),
                  target_gamma=0.9, val_every=0), codec, channel, phases=("pretrain",))
calibrate_power(codec, channel, 0.9, n_sessions=4096)
loose = ProtocolConfig(gamma=0.9, T_max=cc.T_max, m=cc.m, channel=channel, tau_plus_override=2)
tr = run_session(message, loose, codec, seed=0)
for r in tr.rounds:
    print(f"round {r.tau}: active groups {r.groups.tolist()}, "
          f"symbols {np.round(r.transmitted, 3).tolist()}, mask after {r.mask.tolist()}")
print("tau* =", tr.record.tau_star, "forced =", tr.record.forced, "rate =", round(tr.rate, 4))
print("decoded", tr.decoded, "block error:", tr.block_error)
