"""Train the small 6-bit code from configs/smoke.toml and evaluate it at two SNRs.

    python demos/03_smoke_training.py            # full smoke schedule
    python demos/03_smoke_training.py 300 100    # quicker, weaker model
"""
import sys
from dataclasses import replace
from pathlib import Path

import torch

from deepvlf import ChannelParams, config, estimate, init_params, train
from deepvlf.training import calibrate_power

torch.set_num_threads(1)
cfg = config.load(Path(__file__).resolve().parent.parent / "configs" / "smoke.toml")
tc = cfg.train_config()
if len(sys.argv) == 3:
    tc = replace(tc, pretrain_steps=int(sys.argv[1]), finetune_steps=int(sys.argv[2]))

codec = init_params(cfg.codec_config(), cfg.seed)


def show(rec):
    if rec["step"] % 250 == 0:
        print(f"step {rec['step']:5d} {rec['phase']:8s} gamma={rec['gamma']:.7f} "
              f"loss={rec['loss']:.3e} bler={rec['bler_estimate']:.4f} rate={rec['avg_rate']:.4f}")


train(replace(tc, val_every=0), codec, cfg.channel, log_sink=show)
calibrate_power(codec, cfg.channel, tc.target_gamma, seed=cfg.seed)

for snr in (10.0, 0.0):
    proto = cfg.protocol_config(tc.target_gamma, ChannelParams(snr))
    r = estimate(codec, proto, 20_000, seed=1)
    print(f"{snr:4.1f} dB: bler={r.bler:.2e} [{r.bler_ci_low:.1e}, {r.bler_ci_high:.1e}] "
          f"rate={r.avg_code_rate:.5f} rounds/group={r.avg_rounds:.4f} power={r.avg_power:.4f}")
