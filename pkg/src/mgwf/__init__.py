"""Multi-tab website fingerprinting: slot featurization, multi-granularity
attention model, training, and top-K evaluation on synthetic traffic."""

from .core import LabelVector, PacketEvent, RngHandle, ScoreVector, Trace, rng_fork, validate_trace
from .featurize import FeatureChannelMask, FeatureMatrix, featurize, slot_count, slot_index
from .metrics import EvalResult, compute_eval, map_at_k, precision_at_k, top_k
from .model import ModelConfig, MultiGranularityClassifier, build_model, center_index, window_indices
from .synth import FrontParams, SiteProfile, front_pad, gen_site_profile, gen_trace, mix_tabs
from .train import TrainConfig, TrainReport, grad_check, loss_multi, loss_single, train_loop

__version__ = "0.1.0"
