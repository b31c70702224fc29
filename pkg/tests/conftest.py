import numpy as np
import pytest
import torch

from deepvlf.channel import ChannelParams
from deepvlf.codec import CodecConfig, init_params
from deepvlf.protocol import ProtocolConfig


class SpyCodec:
    """Wraps a codec and keeps a copy of the knowledge vectors seen at every round."""

    def __init__(self, codec):
        self.codec = codec
        self.config = codec.config
        self.enc = {}
        self.dec = {}
        self.x = {}

    def eval(self):
        self.codec.eval()

    def encode_round(self, state, tau):
        self.enc[tau] = state.enc_know.detach().clone()
        x = self.codec.encode_round(state, tau)
        self.x[tau] = x.detach().clone()
        return x

    def decode_round(self, state, y, tau):
        log_p, know = self.codec.decode_round(state, y, tau)
        self.dec[tau] = know.detach().clone()
        return log_p, know


@pytest.fixture
def spy_factory():
    return SpyCodec


def sharpened_codec(config: CodecConfig, seed: int, gain: float = 3.0):
    """A random codec with inflated weight matrices.

    Fresh initialisations produce nearly uniform, nearly identical beliefs; the
    gain spreads them out so that sessions stop at a variety of rounds.
    """
    codec = init_params(config, seed)
    with torch.no_grad():
        for p in codec.parameters():
            if p.ndim == 2:
                p.mul_(gain)
    return codec


@pytest.fixture(scope="session")
def small_codec():
    return sharpened_codec(CodecConfig(Q=4, m=2, T_max=6, d_latent=16), seed=3)


def loose_protocol(cc: CodecConfig, gamma=0.9, tau_plus=1, snr=3.0, feedback="noiseless"):
    """A low threshold under which the sharpened codec decodes at varied rounds."""
    return ProtocolConfig(gamma=gamma, T_max=cc.T_max, m=cc.m,
                          channel=ChannelParams(snr, feedback, 20.0), tau_plus_override=tau_plus)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
    np.seterr(all="warn")
