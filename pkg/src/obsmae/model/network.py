"""Multi-modal masked autoencoder: VAE patch tokenizers, shared backbone,
per-modality cross-attention decoders."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..core import ModalitySpec, ObservationCube
from .config import ModelConfig
from .masking import MaskPlan
from .tokens import TokenSet, patchify, posenc_sincos, token_index, unpatchify


def attention(q, k, v, key_mask=None):
    """Scaled dot-product attention; ``key_mask`` (B, Nk) is True for usable keys.

    Rows whose keys are all masked get uniform weights instead of NaN, so
    padded query rows stay finite.
    """
    scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    if key_mask is not None:
        scores = scores.masked_fill(~key_mask[:, None, None, :], torch.finfo(scores.dtype).min)
    return scores.softmax(dim=-1) @ v


class MultiHeadAttention(nn.Module):
    def __init__(self, dim, heads, kv_dim=None):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(kv_dim or dim, 2 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, ctx=None, key_mask=None):
        ctx = x if ctx is None else ctx
        B, N, D = x.shape
        h = self.heads
        q = self.q(x).view(B, N, h, D // h).transpose(1, 2)
        k, v = self.kv(ctx).view(B, ctx.shape[1], 2, h, D // h).permute(2, 0, 3, 1, 4)
        out = attention(q, k, v, key_mask)
        return self.proj(out.transpose(1, 2).reshape(B, N, D))


class Mlp(nn.Module):
    def __init__(self, dim, ratio):
        super().__init__()
        hidden = int(dim * ratio)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim, heads, mlp_ratio=4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio)

    def forward(self, x, key_mask=None):
        x = x + self.attn(self.norm1(x), key_mask=key_mask)
        return x + self.mlp(self.norm2(x))


class DecoderBlock(nn.Module):
    """Cross-attention to context, then self-attention among queries, then MLP."""

    def __init__(self, dim, heads, mlp_ratio=4.0):
        super().__init__()
        self.norm_q = nn.LayerNorm(dim)
        self.norm_ctx = nn.LayerNorm(dim)
        self.cross = MultiHeadAttention(dim, heads)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio)

    def forward(self, x, ctx, ctx_mask=None):
        x = x + self.cross(self.norm_q(x), self.norm_ctx(ctx), key_mask=ctx_mask)
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class PatchVAE(nn.Module):
    """Patch tokenizer: linear patch embedding (a conv with kernel == stride)
    plus one transformer block, Gaussian latent, mirrored decoder."""

    def __init__(self, patch_dim, dim, latent_dim, heads, mlp_ratio=4.0):
        super().__init__()
        self.embed = nn.Linear(patch_dim, dim)
        self.enc_block = Block(dim, heads, mlp_ratio)
        self.enc_norm = nn.LayerNorm(dim)
        self.to_stats = nn.Linear(dim, 2 * latent_dim)
        self.from_latent = nn.Linear(latent_dim, dim)
        self.dec_block = Block(dim, heads, mlp_ratio)
        self.dec_norm = nn.LayerNorm(dim)
        self.to_patch = nn.Linear(dim, patch_dim)

    def encode(self, x, pos, mask=None):
        h = self.enc_block(self.embed(x) + pos, key_mask=mask)
        mu, logvar = self.to_stats(self.enc_norm(h)).chunk(2, dim=-1)
        return mu, logvar

    def decode(self, z, pos, mask=None):
        h = self.dec_block(self.from_latent(z) + pos, key_mask=mask)
        return self.to_patch(self.dec_norm(h))


def kl_divergence(mu, logvar):
    """KL(N(mu, exp(logvar)) || N(0, I)) summed over the last axis."""
    return 0.5 * (mu**2 + logvar.exp() - 1.0 - logvar).sum(dim=-1)


def _gather(x, idx):
    return torch.gather(x, 1, idx[..., None].expand(-1, -1, x.shape[-1]))


@dataclass
class Batch:
    """Collated token tensors for a list of samples.

    ``vis_idx``/``vis_mask`` are padded to the largest visible count per
    modality; ``vis_flag`` marks visible positions in the full token grid.
    """

    tokens: dict[str, torch.Tensor]
    valid: dict[str, torch.Tensor]
    vis_idx: dict[str, torch.Tensor]
    vis_mask: dict[str, torch.Tensor]
    vis_flag: dict[str, torch.Tensor]
    shapes: dict[str, tuple]
    origins: list

    @property
    def names(self):
        return list(self.tokens)


def collate(tokensets: Sequence[Mapping[str, TokenSet]], plans: Sequence[MaskPlan], names=None, dtype=torch.float32, origins=None) -> Batch:
    names = list(names or tokensets[0])
    B = len(tokensets)
    out = Batch({}, {}, {}, {}, {}, {}, list(origins or [None] * B))
    for n in names:
        out.tokens[n] = torch.as_tensor(np.stack([ts[n].tokens for ts in tokensets]), dtype=dtype)
        out.valid[n] = torch.as_tensor(np.stack([ts[n].valid for ts in tokensets]))
        N = len(tokensets[0][n])
        vis = [np.asarray(p.visible.get(n, np.empty(0, int)), dtype=np.int64) for p in plans]
        kmax = max(len(v) for v in vis)
        idx = np.zeros((B, kmax), dtype=np.int64)
        mask = np.zeros((B, kmax), dtype=bool)
        flag = np.zeros((B, N), dtype=bool)
        for b, v in enumerate(vis):
            idx[b, : len(v)] = v
            mask[b, : len(v)] = True
            flag[b, v] = True
        out.vis_idx[n] = torch.as_tensor(idx)
        out.vis_mask[n] = torch.as_tensor(mask)
        out.vis_flag[n] = torch.as_tensor(flag)
        out.shapes[n] = tokensets[0][n].shape
    return out


class MultiModalMAE(nn.Module):
    def __init__(self, config: ModelConfig, modalities: Sequence[ModalitySpec]):
        super().__init__()
        self.config = config
        self.specs = {m.name: m for m in modalities}
        for name in self.specs:
            if not name.isidentifier():
                raise ValueError(f"modality name {name!r} must be a valid identifier")
        c = config
        p = c.patch_side
        self.tokenizers = nn.ModuleDict()
        self.in_proj = nn.ModuleDict()
        self.ctx_proj = nn.ModuleDict()
        self.decoders = nn.ModuleDict()
        self.dec_norm = nn.ModuleDict()
        self.out_proj = nn.ModuleDict()
        self.modality_embed = nn.ParameterDict()
        self.context_embed = nn.ParameterDict()
        self.query_token = nn.ParameterDict()
        for name, spec in self.specs.items():
            patch_dim = spec.channels * p * p
            self.tokenizers[name] = PatchVAE(patch_dim, c.token_dim, c.vae_latent_dim, c.tokenizer_heads, c.mlp_ratio)
            self.in_proj[name] = nn.Linear(c.vae_latent_dim, c.token_dim)
            self.ctx_proj[name] = nn.Linear(c.token_dim, c.context_dim)
            self.decoders[name] = nn.ModuleList(
                DecoderBlock(c.context_dim, c.decoder_heads, c.mlp_ratio) for _ in range(c.decoder_blocks)
            )
            self.dec_norm[name] = nn.LayerNorm(c.context_dim)
            self.out_proj[name] = nn.Linear(c.context_dim, c.vae_latent_dim)
            self.modality_embed[name] = nn.Parameter(torch.zeros(c.token_dim))
            self.context_embed[name] = nn.Parameter(torch.zeros(c.context_dim))
            self.query_token[name] = nn.Parameter(torch.zeros(c.context_dim))
            idx = self.token_index(name)
            axes = idx if spec.temporal else idx[:, 1:]
            self.register_buffer(f"pos_tok_{name}", torch.as_tensor(posenc_sincos(axes, c.token_dim), dtype=torch.float32), persistent=False)
            self.register_buffer(f"pos_ctx_{name}", torch.as_tensor(posenc_sincos(axes, c.context_dim), dtype=torch.float32), persistent=False)
        self.global_token = nn.Parameter(torch.zeros(c.token_dim))
        self.backbone = nn.ModuleList(Block(c.token_dim, c.backbone_heads, c.mlp_ratio) for _ in range(c.backbone_blocks))
        self.backbone_norm = nn.LayerNorm(c.token_dim)
        self.reset_parameters()

    def reset_parameters(self):
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.trunc_normal_(m.weight, std=0.02)
                nn.init.zeros_(m.bias)
            elif isinstance(m, nn.LayerNorm):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)
        for group in (self.modality_embed, self.context_embed, self.query_token):
            for prm in group.values():
                nn.init.normal_(prm, std=0.02)
        nn.init.normal_(self.global_token, std=0.02)

    def token_index(self, name) -> np.ndarray:
        T = self.config.hours if self.specs[name].temporal else 1
        return token_index(T, self.config.grid_side)

    def n_tokens(self, name) -> int:
        return len(self.token_index(name))

    def pos_tok(self, name):
        return getattr(self, f"pos_tok_{name}")

    def pos_ctx(self, name):
        return getattr(self, f"pos_ctx_{name}")

    def encode(self, batch: Batch, inputs=None):
        """Backbone over [global token, visible tokens of ``inputs``]."""
        inputs = batch.names if inputs is None else list(inputs)
        some = next(iter(batch.tokens.values()))
        B = some.shape[0]
        parts = [self.global_token.expand(B, 1, -1)]
        masks = [torch.ones(B, 1, dtype=torch.bool)]
        for n in inputs:
            idx, mask = batch.vis_idx[n], batch.vis_mask[n]
            if idx.shape[1] == 0:
                continue
            x = _gather(batch.tokens[n], idx)
            pos = self.pos_tok(n).to(x.dtype)[idx]
            mu, _ = self.tokenizers[n].encode(x, pos, mask)
            parts.append(self.in_proj[n](mu) + pos + self.modality_embed[n])
            masks.append(mask)
        seq = torch.cat(parts, dim=1)
        key_mask = torch.cat(masks, dim=1)
        for blk in self.backbone:
            seq = blk(seq, key_mask)
        return self.backbone_norm(seq), key_mask

    def decode(self, name, context, key_mask):
        ctx = self.ctx_proj[name](context) + self.context_embed[name]
        pos = self.pos_ctx(name).to(ctx.dtype)
        q = (self.query_token[name] + pos).expand(ctx.shape[0], -1, -1)
        for blk in self.decoders[name]:
            q = blk(q, ctx, key_mask)
        z = self.out_proj[name](self.dec_norm[name](q))
        return self.tokenizers[name].decode(z, self.pos_tok(name).to(z.dtype).expand(ctx.shape[0], -1, -1))

    def forward(self, batch: Batch, inputs=None, outputs=None) -> dict[str, torch.Tensor]:
        """Predicted raw patches (B, N_m, C_m*p*p) for every token of each output modality."""
        context, key_mask = self.encode(batch, inputs)
        outputs = batch.names if outputs is None else list(outputs)
        return {n: self.decode(n, context, key_mask) for n in outputs}


def masked_mse_loss(pred: Mapping[str, torch.Tensor], batch: Batch, names=None, return_terms=False):
    """MSE over cells of tokens that are valid and not visible, pooled over modalities."""
    names = list(pred if names is None else names)
    total = None
    count = 0
    terms = {}
    for n in names:
        target = batch.tokens[n]
        qual = batch.valid[n] & ~batch.vis_flag[n]
        k = int(qual.sum())
        if k == 0:
            continue
        se = ((pred[n] - target) ** 2)[qual].sum()
        cells = k * target.shape[-1]
        terms[n] = (se.detach(), cells)
        total = se if total is None else total + se
        count += cells
    if count == 0:
        raise ValueError("no masked valid cells to score; resample the batch")
    loss = total / count
    return (loss, terms) if return_terms else loss


def tokenize_sample(sample, patch: int, names=None) -> dict[str, TokenSet]:
    names = sample.names if names is None else names
    return {n: patchify(sample[n], patch) for n in names}


@torch.no_grad()
def forward(sample, plan: MaskPlan, model: MultiModalMAE, outputs=None) -> dict[str, ObservationCube]:
    """Single normalized sample -> dense normalized prediction cube per modality."""
    model.eval()
    names = [n for n in sample.names if n in model.specs]
    ts = tokenize_sample(sample, model.config.patch_side, names)
    dtype = next(model.parameters()).dtype
    batch = collate([ts], [plan], names, dtype=dtype)
    inputs = [n for n in names if len(plan.visible.get(n, ())) > 0]
    pred = model(batch, inputs=inputs, outputs=outputs or names)
    out = {}
    for n, p in pred.items():
        shape = ts[n].shape
        vals = unpatchify(p[0].cpu().numpy().astype(np.float32), shape, model.config.patch_side)
        cube = sample[n]
        out[n] = ObservationCube(n, cube.times, vals, np.ones(vals.shape, dtype=bool))
    return out
