"""Blockwise SFT for masked discrete diffusion models, at desk scale."""
from .core import (BlockPartition, DiffusionSchedule, Example, NoisedState, RngStream, Vocab, partition,
                   region_sizes)
from .masking import (MODES, MaskSpec, build_blockwise_mask, build_classical_mask, build_leaky_suffix_mask,
                      build_mask, build_noisy_prefix_mask, ensure_min_one, mismatch_probabilities, sample_masks)
from .model import (AdamW, DenoiserConfig, TabularDenoiser, TinyDenoiser, load_checkpoint, save_checkpoint)
from .diffusion import (block_importance_gradient, block_local_loss, blockwise_loss_fullsum, classical_loss,
                        forward_noise, single_t_estimate)
from .decode import DecodeConfig, decode_block, decode_sequence, elbo_bound_check, exact_block_nll
from .analysis import bias_curve, certify_unbiasedness, clean_block_gradient

__version__ = "0.1.0"
