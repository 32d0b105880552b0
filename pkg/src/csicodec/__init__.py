"""Heterogeneous multi-user CSI feedback codec.

Synthetic multipath channel generation, a shape-flexible MoE transformer
autoencoder, dynamic-rate mu-law quantized feedback, joint multi-user
decoding, self-supervised pre-training, and link-level evaluation.
"""

from .autodiff import (DifferentiableArray, Parameter, Tape, backward,
                       finite_difference_check)
from .channel import (ArrayGeometry, DatasetManifest, MultiUserSample,
                      ScenarioConfig, achievable_rate, generate_dataset,
                      generate_sample_group, load_dataset, zf_precode)
from .metrics import LinkBudget, MetricsRecord, bit_sweep, ese, nmse, se_from_feedback
from .model import (FeedbackCodec, ModelConfig, load_checkpoint,
                    save_checkpoint)
from .optim import AdamState, adam_step, cosine_lr
from .quantizer import (Bitstream, QuantizerConfig, dequantize_vector,
                        mu_compress, mu_expand, quantize_vector, ste_quantize)
from .training import (PretrainConfig, ablation_toggles, desk_profile,
                       finetune, load_balance_loss, pretrain,
                       reconstruction_loss, total_loss)

__version__ = "0.1.0"
