"""Variable-rate learned image codec driven by per-rate prompt networks.

One pretrained window-attention backbone plus a small PromptSet per target
rate: prompts join attention as extra key/value tokens, steering bit
allocation without touching a single backbone weight.  Ships with a real
range-coded bitstream, two-stage training, and rate/quality analytics.
"""

from .attention import (
    AttentionParams,
    AttentionRecorder,
    expand_bias,
    prompt_window_attention,
    swin_attention,
    window_partition,
    window_reverse,
)
from .autodiff import Tensor, tensor
from .backbone import Backbone, ModelConfig, ParamDict, model_id
from .codec import CoderTables, decode_image, encode_image, latent_stats, reconstruct
from .dataio import (
    load_ppm,
    save_pgm,
    save_ppm,
    synthetic_images,
    write_toy_dataset,
)
from .entropy import FactorizedDensity, gaussian_likelihood, quantize, rate_bits
from .formats import (
    BitstreamContainer,
    ConfigError,
    ContainerError,
    ModelIdError,
    RunConfig,
    TrainConfig,
    load_backbone,
    load_promptset,
    load_run_config,
    parse_run_config,
    save_backbone,
    save_promptset,
    serialize_run_config,
)
from .metrics import RDPoint, attention_map, bd_rate, bit_allocation_map, ms_ssim, psnr
from .prompts import PromptSet
from .rangecoder import CorruptStreamError, decode_symbols, encode_symbols
from .training import (
    Adam,
    LossReport,
    loss_stage1,
    loss_stage2,
    rd_loss,
    rd_sweep,
    train_stage1,
    train_stage2,
)

__version__ = "0.1.0"
