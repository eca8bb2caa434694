"""Toy networks: patch-transformer image encoder, causal text encoder,
convolutional latent autoencoder, and a cross-attention conditioned UNet.

Trainable parameters are the image and text encoders, the fusion module,
the temperature logit, and the UNet cross-attention projections. Everything
else is frozen when a :class:`ModelBundle` is built.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import EOS_ID, PAD_ID, BOS_ID, MAX_LEN, Vocabulary
from .fusion import FusionModule


@dataclass(frozen=True)
class ModelConfig:
    d: int = 32
    disc_size: int = 32
    patch: int = 8
    vision_layers: int = 2
    vision_heads: int = 4
    vocab_size: int = len(Vocabulary.default())
    max_len: int = MAX_LEN
    text_layers: int = 2
    text_heads: int = 4
    gen_size: int = 64
    latent_channels: int = 4
    latent_size: int = 8
    ae_width: int = 16
    unet_channels: tuple[int, int] = (32, 64)
    xattn_heads: int = 4
    n_u: int = 4
    fusion_bias: bool = True
    init_tau: float = 0.07
    min_tau: float = 0.01
    seed: int = 0

    @property
    def n_patches(self) -> int:
        return (self.disc_size // self.patch) ** 2

    @property
    def n_image_tokens(self) -> int:
        return self.n_patches + 1

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["unet_channels"] = list(self.unet_channels)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "unet_channels" in d:
            d["unet_channels"] = tuple(d["unet_channels"])
        return cls(**d)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


class VisualFeatures(NamedTuple):
    tokens: torch.Tensor  # (B, l, d), row 0 is CLS
    global_: torch.Tensor  # (B, d), unit norm


class TextFeatures(NamedTuple):
    tokens: torch.Tensor  # (B, m, d)
    global_: torch.Tensor  # (B, d), unit norm
    eos_index: torch.Tensor  # (B,)


def _groups(ch: int) -> int:
    for g in (8, 4, 2):
        if ch % g == 0:
            return g
    return 1


class Attention(nn.Module):
    """Multi-head attention; keys/values come from ``context`` when given."""

    def __init__(self, dim: int, heads: int, context_dim: int | None = None):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by {heads} heads")
        context_dim = context_dim or dim
        self.heads = heads
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(context_dim, dim, bias=False)
        self.to_v = nn.Linear(context_dim, dim, bias=False)
        self.to_out = nn.Linear(dim, dim)

    def forward(self, x, context=None, mask=None):
        context = x if context is None else context
        b, n, dim = x.shape
        h = self.heads
        q = self.to_q(x).view(b, n, h, -1).transpose(1, 2)
        k = self.to_k(context).view(b, context.shape[1], h, -1).transpose(1, 2)
        v = self.to_v(context).view(b, context.shape[1], h, -1).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
        if mask is not None:
            scores = scores.masked_fill(~mask, float("-inf"))
        out = scores.softmax(dim=-1) @ v
        return self.to_out(out.transpose(1, 2).reshape(b, n, dim))


class Block(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim))

    def forward(self, x, mask=None):
        x = x + self.attn(self.ln1(x), mask=mask)
        return x + self.mlp(self.ln2(x))


class VisionEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.size = cfg.disc_size
        self.patch_embed = nn.Conv2d(3, cfg.d, cfg.patch, stride=cfg.patch)
        self.cls = nn.Parameter(torch.randn(cfg.d) * 0.02)
        self.pos = nn.Parameter(torch.randn(cfg.n_image_tokens, cfg.d) * 0.02)
        self.blocks = nn.ModuleList(Block(cfg.d, cfg.vision_heads) for _ in range(cfg.vision_layers))
        self.ln_post = nn.LayerNorm(cfg.d)

    def forward(self, images: torch.Tensor) -> VisualFeatures:
        if images.dim() != 4 or images.shape[1:] != (3, self.size, self.size):
            raise ValueError(f"expected (B, 3, {self.size}, {self.size}) images, got {tuple(images.shape)}")
        x = self.patch_embed(images).flatten(2).transpose(1, 2)
        cls = self.cls.expand(x.shape[0], 1, -1)
        x = torch.cat([cls, x], dim=1) + self.pos
        for blk in self.blocks:
            x = blk(x)
        x = self.ln_post(x)
        return VisualFeatures(x, F.normalize(x[:, 0], dim=-1))


class TextEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.max_len = cfg.max_len
        self.tok = nn.Embedding(cfg.vocab_size, cfg.d)
        self.pos = nn.Parameter(torch.randn(cfg.max_len, cfg.d) * 0.02)
        self.blocks = nn.ModuleList(Block(cfg.d, cfg.text_heads) for _ in range(cfg.text_layers))
        self.ln_final = nn.LayerNorm(cfg.d)
        causal = torch.tril(torch.ones(cfg.max_len, cfg.max_len, dtype=torch.bool))
        self.register_buffer("causal", causal, persistent=False)

    def forward(self, ids: torch.Tensor) -> TextFeatures:
        if ids.dim() == 1:
            ids = ids.unsqueeze(0)
        m = ids.shape[1]
        if m > self.max_len:
            raise ValueError(f"sequence length {m} exceeds context {self.max_len}")
        n_eos = (ids == EOS_ID).sum(dim=1)
        if bool((n_eos != 1).any()):
            raise ValueError("each token sequence needs exactly one EOS")
        x = self.tok(ids) + self.pos[:m]
        mask = self.causal[:m, :m]
        for blk in self.blocks:
            x = blk(x, mask=mask)
        x = self.ln_final(x)
        eos = (ids == EOS_ID).to(torch.long).argmax(dim=1)
        pooled = x[torch.arange(x.shape[0]), eos]
        return TextFeatures(x, F.normalize(pooled, dim=-1), eos)


class Autoencoder(nn.Module):
    """Deterministic conv autoencoder; ``encode`` returns scaled latents."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        factor = cfg.gen_size // cfg.latent_size
        n_down = int(round(math.log2(factor)))
        if 2 ** n_down != factor or cfg.latent_size * factor != cfg.gen_size:
            raise ValueError("gen_size / latent_size must be a power of two")
        if cfg.latent_size % 2:
            raise ValueError("latent size must be even for 2x2 pooling")
        w = cfg.ae_width
        self.size = cfg.gen_size
        enc = [nn.Conv2d(3, w, 3, padding=1)]
        for _ in range(n_down):
            enc += [nn.SiLU(), nn.Conv2d(w, w, 4, stride=2, padding=1)]
        enc += [nn.SiLU(), nn.Conv2d(w, cfg.latent_channels, 3, padding=1)]
        self.encoder = nn.Sequential(*enc)
        dec = [nn.Conv2d(cfg.latent_channels, w, 3, padding=1)]
        for _ in range(n_down):
            dec += [nn.SiLU(), nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(w, w, 3, padding=1)]
        dec += [nn.SiLU(), nn.Conv2d(w, 3, 3, padding=1)]
        self.decoder = nn.Sequential(*dec)
        self.register_buffer("latent_scale", torch.ones(()))

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        if images.dim() != 4 or images.shape[1:] != (3, self.size, self.size):
            raise ValueError(f"expected (B, 3, {self.size}, {self.size}) images, got {tuple(images.shape)}")
        return self.encoder(images) * self.latent_scale

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return self.decoder(z / self.latent_scale)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([args.cos(), args.sin()], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, tdim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(tdim, cout)
        self.norm2 = nn.GroupNorm(_groups(cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class CrossAttnBlock(nn.Module):
    """Spatial tokens attend to text tokens. Only ``attn`` is trainable."""

    def __init__(self, ch: int, context_dim: int, heads: int):
        super().__init__()
        self.norm = nn.GroupNorm(_groups(ch), ch)
        self.proj_in = nn.Conv2d(ch, ch, 1)
        self.ln = nn.LayerNorm(ch)
        self.attn = Attention(ch, heads, context_dim=context_dim)
        self.proj_out = nn.Conv2d(ch, ch, 1)

    def forward(self, x, context):
        b, c, h, w = x.shape
        y = self.proj_in(self.norm(x)).flatten(2).transpose(1, 2)
        y = y + self.attn(self.ln(y), context=context)
        y = y.transpose(1, 2).reshape(b, c, h, w)
        return x + self.proj_out(y)


class UNet(nn.Module):
    """Two-resolution U-shape with one cross-attention block per resolution."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c0, c1 = cfg.unet_channels
        c = cfg.latent_channels
        self.tdim = 4 * c0
        self.latent_shape = (c, cfg.latent_size, cfg.latent_size)
        self.context_dim = cfg.d
        self.time_mlp = nn.Sequential(nn.Linear(c0, self.tdim), nn.SiLU(), nn.Linear(self.tdim, self.tdim))
        self.time_freq_dim = c0
        self.conv_in = nn.Conv2d(c, c0, 3, padding=1)
        self.res_hi = ResBlock(c0, c0, self.tdim)
        self.xattn_hi = CrossAttnBlock(c0, cfg.d, cfg.xattn_heads)
        self.down = nn.Conv2d(c0, c0, 3, stride=2, padding=1)
        self.res_lo = ResBlock(c0, c1, self.tdim)
        self.xattn_lo = CrossAttnBlock(c1, cfg.d, cfg.xattn_heads)
        self.res_mid = ResBlock(c1, c1, self.tdim)
        self.up = nn.Sequential(nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(c1, c1, 3, padding=1))
        self.res_out = ResBlock(c1 + c0, c0, self.tdim)
        self.norm_out = nn.GroupNorm(_groups(c0), c0)
        self.conv_out = nn.Conv2d(c0, c, 3, padding=1)

    def forward(self, x: torch.Tensor, t: torch.Tensor | int, context: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or tuple(x.shape[1:]) != self.latent_shape:
            raise ValueError(f"latent shape {tuple(x.shape[1:])} != {self.latent_shape}")
        if context.dim() != 3 or context.shape[-1] != self.context_dim or context.shape[0] != x.shape[0]:
            raise ValueError(f"context must be (B, m, {self.context_dim}), got {tuple(context.shape)}")
        if not isinstance(t, torch.Tensor) or t.dim() == 0:
            t = torch.full((x.shape[0],), int(t), dtype=torch.long)
        temb = self.time_mlp(timestep_embedding(t, self.time_freq_dim).to(x.dtype))
        h0 = self.res_hi(self.conv_in(x), temb)
        h0 = self.xattn_hi(h0, context)
        h = self.res_lo(self.down(h0), temb)
        h = self.xattn_lo(h, context)
        h = self.res_mid(h, temb)
        h = self.res_out(torch.cat([self.up(h), h0], dim=1), temb)
        return self.conv_out(F.silu(self.norm_out(h)))


def is_trainable(name: str) -> bool:
    """Freezing policy, by parameter name inside a :class:`ModelBundle`."""
    top = name.split(".", 1)[0]
    if top in ("vision", "text", "fusion", "logit_scale"):
        return True
    if top == "unet":
        return ".attn." in name
    return False


class ModelBundle(nn.Module):
    def __init__(self, cfg: ModelConfig = ModelConfig()):
        super().__init__()
        self.config = cfg
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            self.vision = VisionEncoder(cfg)
            self.text = TextEncoder(cfg)
            self.autoencoder = Autoencoder(cfg)
            self.unet = UNet(cfg)
            self.fusion = FusionModule(
                n_image_tokens=cfg.n_image_tokens,
                latent_channels=cfg.latent_channels,
                latent_size=cfg.latent_size,
                d=cfg.d,
                n_u=cfg.n_u,
                bias=cfg.fusion_bias,
            )
        self.logit_scale = nn.Parameter(torch.tensor(math.log(1.0 / cfg.init_tau)))
        self.apply_freezing()

    def apply_freezing(self) -> None:
        for name, p in self.named_parameters():
            p.requires_grad_(is_trainable(name))

    # -- encoders ---------------------------------------------------------
    def encode_image(self, images: torch.Tensor) -> VisualFeatures:
        return self.vision(images)

    def encode_text(self, ids: torch.Tensor) -> TextFeatures:
        return self.text(ids)

    @torch.no_grad()
    def encode_latent(self, images: torch.Tensor) -> torch.Tensor:
        return self.autoencoder.encode(images)

    @torch.no_grad()
    def decode_latent(self, z: torch.Tensor) -> torch.Tensor:
        return self.autoencoder.decode(z)

    def predict_eps(self, x_t: torch.Tensor, t, context: torch.Tensor) -> torch.Tensor:
        return self.unet(x_t, t, context)

    def temperature(self) -> torch.Tensor:
        # tau = 1 / exp(logit_scale), floored at min_tau
        return torch.exp(-self.logit_scale).clamp(min=self.config.min_tau)

    def null_tokens(self, batch: int = 1) -> torch.Tensor:
        ids = torch.full((batch, self.config.max_len), PAD_ID, dtype=torch.long)
        ids[:, 0] = BOS_ID
        ids[:, 1] = EOS_ID
        return ids

    def null_condition(self, batch: int = 1) -> torch.Tensor:
        """Token features of the empty caption; the unconditional branch."""
        return self.encode_text(self.null_tokens(1)).tokens.expand(batch, -1, -1)


def trainable_parameters(bundle: ModelBundle) -> dict[str, nn.Parameter]:
    return {n: p for n, p in bundle.named_parameters() if is_trainable(n)}


def frozen_parameters(bundle: ModelBundle) -> dict[str, nn.Parameter]:
    return {n: p for n, p in bundle.named_parameters() if not is_trainable(n)}
