from .config import ModelConfig
from .masking import MaskPlan, allocate_counts, full_plan, sample_mask_plan
from .network import (
    Batch,
    MultiModalMAE,
    collate,
    forward,
    kl_divergence,
    masked_mse_loss,
    tokenize_sample,
)
from .pretrain import vae_loss, vae_pretrain
from .tokens import TokenSet, patchify, posenc_sincos, unpatchify

__all__ = [
    "Batch",
    "MaskPlan",
    "ModelConfig",
    "MultiModalMAE",
    "TokenSet",
    "allocate_counts",
    "collate",
    "forward",
    "full_plan",
    "kl_divergence",
    "masked_mse_loss",
    "patchify",
    "posenc_sincos",
    "sample_mask_plan",
    "tokenize_sample",
    "unpatchify",
    "vae_loss",
    "vae_pretrain",
]
