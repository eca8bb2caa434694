"""Fusion of image-encoder tokens with autoencoder latents.

Each latent channel is 2x2 max-pooled, flattened and projected to ``d`` by
``first``; the projected channels are stacked under the image tokens and a
second linear map mixes along the token axis only, giving ``n_u`` rows.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


class FusionModule(nn.Module):
    def __init__(
        self,
        n_image_tokens: int,
        latent_channels: int,
        latent_size: int,
        d: int,
        n_u: int = 4,
        bias: bool = True,
    ):
        super().__init__()
        if latent_size % 2:
            raise ValueError("latent size must be even")
        self.latent_channels = latent_channels
        self.first = nn.Linear((latent_size // 2) ** 2, d)
        n_in = n_image_tokens + latent_channels
        bound = 1.0 / math.sqrt(n_in)
        self.mix_weight = nn.Parameter(torch.empty(n_u, n_in).uniform_(-bound, bound))
        self.mix_bias = nn.Parameter(torch.empty(n_u).uniform_(-bound, bound)) if bias else None

    def project_latent(self, latent: torch.Tensor) -> torch.Tensor:
        """(B, c, h, w) -> (B, c, d); row i sees only channel i."""
        squeeze = latent.dim() == 3
        if squeeze:
            latent = latent.unsqueeze(0)
        h, w = latent.shape[-2:]
        if h % 2 or w % 2:
            raise ValueError(f"latent spatial size {h}x{w} must be even")
        pooled = F.max_pool2d(latent, kernel_size=2, stride=2)
        out = self.first(pooled.flatten(2))
        return out[0] if squeeze else out

    def forward(self, tokens: torch.Tensor, latent: torch.Tensor) -> torch.Tensor:
        """Fused feature (B, n_u, d) from image tokens (B, l, d) and latents."""
        squeeze = tokens.dim() == 2
        if squeeze:
            tokens, latent = tokens.unsqueeze(0), latent.unsqueeze(0)
        proj = self.project_latent(latent)
        if tokens.shape[-1] != proj.shape[-1]:
            raise ValueError(f"token dim {tokens.shape[-1]} != projected latent dim {proj.shape[-1]}")
        stacked = torch.cat([tokens, proj], dim=1)
        if stacked.shape[1] != self.mix_weight.shape[1]:
            raise ValueError(f"expected {self.mix_weight.shape[1]} stacked rows, got {stacked.shape[1]}")
        fused = torch.einsum("ul,bld->bud", self.mix_weight, stacked)
        if self.mix_bias is not None:
            fused = fused + self.mix_bias[None, :, None]
        return fused[0] if squeeze else fused

    fuse = forward


def mean_repeat_vu(fused: torch.Tensor, n_rows: int) -> torch.Tensor:
    """Average fused rows and tile the mean ``n_rows`` times: (..., n_u, d) -> (..., n_rows, d)."""
    mean = fused.mean(dim=-2, keepdim=True)
    return mean.expand(*fused.shape[:-2], n_rows, fused.shape[-1])
