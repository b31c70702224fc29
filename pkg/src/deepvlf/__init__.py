"""Deep-learning-aided variable-length feedback codes over AWGN channels."""
from .channel import ChannelParams, NoiseStream, snr_db_to_sigma2
from .codec import CodecConfig, DeepVLFCodec, init_params, load_checkpoint, save_checkpoint
from .core import (
    DecodeMask,
    StoppingRecord,
    compute_code_rate,
    group_to_index,
    index_to_group,
    partition_message,
    threshold_check,
    update_mask,
)
from .evaluation import EvalResult, SweepSpec, baseline_uncoded, emit_csv, estimate, sweep
from .protocol import (
    ProtocolConfig,
    SessionTranscript,
    compute_tau_plus,
    replay_verify,
    run_session,
    run_sessions,
)
from .training import LossConfig, TrainConfig, grad_check, train

__version__ = "0.1.0"
