"""VAE pretraining of a single modality's patch tokenizer."""
from __future__ import annotations

import logging
from typing import Iterable, Sequence

import numpy as np
import torch

from .network import MultiModalMAE, PatchVAE, kl_divergence
from .tokens import TokenSet

log = logging.getLogger(__name__)


def collate_valid(tokensets: Sequence[TokenSet], pos: torch.Tensor, max_tokens: int, rng: np.random.Generator):
    """Up to ``max_tokens`` random valid patches per sample, padded."""
    picks = []
    for ts in tokensets:
        pool = np.flatnonzero(ts.valid)
        if len(pool) > max_tokens:
            pool = np.sort(rng.choice(pool, max_tokens, replace=False))
        picks.append(pool)
    kmax = max((len(p) for p in picks), default=0)
    if kmax == 0:
        return None
    B, D = len(tokensets), tokensets[0].tokens.shape[1]
    x = torch.zeros(B, kmax, D, dtype=pos.dtype)
    p = torch.zeros(B, kmax, pos.shape[1], dtype=pos.dtype)
    mask = torch.zeros(B, kmax, dtype=torch.bool)
    for b, (ts, sel) in enumerate(zip(tokensets, picks)):
        x[b, : len(sel)] = torch.as_tensor(ts.tokens[sel], dtype=pos.dtype)
        p[b, : len(sel)] = pos[sel]
        mask[b, : len(sel)] = True
    return x, p, mask


def vae_loss(vae: PatchVAE, x, pos, mask, kl_weight: float, generator: torch.Generator | None = None, sample=True):
    """Reconstruction MSE over real tokens + kl_weight * mean per-token KL."""
    mu, logvar = vae.encode(x, pos, mask)
    if sample:
        eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
        z = mu + (0.5 * logvar).exp() * eps
    else:
        z = mu
    recon = vae.decode(z, pos, mask)
    m = mask[..., None].to(x.dtype)
    mse = (((recon - x) ** 2) * m).sum() / (m.sum() * x.shape[-1])
    kl = (kl_divergence(mu, logvar) * mask).sum() / mask.sum()
    loss = mse + kl_weight * kl
    if not torch.isfinite(loss):
        raise FloatingPointError(
            f"non-finite VAE loss (mse={float(mse)}, kl={float(kl)}, |mu|max={float(mu.abs().max())}, "
            f"logvar range=({float(logvar.min())}, {float(logvar.max())}))"
        )
    return loss, mse.detach(), kl.detach()


def vae_pretrain(
    model: MultiModalMAE,
    name: str,
    batches: Iterable[Sequence[TokenSet]],
    steps: int,
    lr: float = 1e-3,
    betas=(0.5, 0.9),
    eps: float = 1e-8,
    seed: int = 0,
    max_tokens: int | None = None,
    on_step=None,
):
    """Train ``model.tokenizers[name]`` on valid patches; returns per-step losses."""
    vae = model.tokenizers[name]
    cfg = model.config
    max_tokens = max_tokens or cfg.mask_budget
    pos = model.pos_tok(name)
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(vae.parameters(), lr=lr, betas=tuple(betas), eps=eps)
    history = []
    it = iter(batches)
    vae.train()
    for step in range(steps):
        packed = collate_valid(next(it), pos, max_tokens, rng)
        if packed is None:
            continue
        loss, mse, kl = vae_loss(vae, *packed, cfg.kl_weight, gen)
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append({"step": step + 1, "loss": float(loss.detach()), "mse": float(mse), "kl": float(kl)})
        if on_step is not None:
            on_step(history[-1])
    return history
