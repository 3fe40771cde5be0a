"""Desk-scale vision-language model with iterative latent cross-attention.

A latent array of size N reads a multimodal input array of size M through
k blocks of cross-attention + latent self-attention (O(kMN + klN^2) instead
of O(klM^2)), with LayerDrop on cross-attention for on-demand depth, a
query-array decoder for VTM / MLM / QA, three retrieval topologies with
latent caching, and an exact MAC cost model verified against an
instrumented autodiff engine.
"""

from .config import RunConfig, reference_encoder_config
from .encoder import EncoderConfig, sample_layerdrop_mask
from .embedding import ByteTokenizer, EmbedConfig, TextInput, VisionInput
from .model import ModelConfig, VisionLanguageModel
from .rng import RngStream
from .tensor import ParamStore, Tape, Tensor, backward, grad_check, no_grad

__version__ = "0.1.0"

__all__ = [
    "ByteTokenizer", "EmbedConfig", "EncoderConfig", "ModelConfig",
    "ParamStore", "RngStream", "RunConfig", "Tape", "Tensor", "TextInput",
    "VisionInput", "VisionLanguageModel", "backward", "grad_check",
    "no_grad", "reference_encoder_config", "sample_layerdrop_mask",
]
