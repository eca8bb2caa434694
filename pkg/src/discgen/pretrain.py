"""Stand-ins for pre-trained base weights.

* ``pretrain_autoencoder`` fits the latent autoencoder by reconstruction and
  sets its latent scale so encoded latents have unit standard deviation.
* ``pretrain_unet`` fits the whole UNet unconditionally (empty-caption
  context) with the noise-prediction loss, giving a generic denoiser whose
  cross-attention is later specialised by fine-tuning.
"""

from __future__ import annotations

import logging

import numpy as np
import torch
import torch.nn.functional as F

from .losses import is_loss
from .models import ModelBundle
from .schedule import NoiseSchedule, q_sample

log = logging.getLogger(__name__)


def _windows_mean(values: list[float], frac: float = 0.1) -> tuple[float, float]:
    k = max(1, int(len(values) * frac))
    return float(np.mean(values[:k])), float(np.mean(values[-k:]))


def pretrain_autoencoder(
    bundle: ModelBundle,
    images: torch.Tensor,
    steps: int = 1000,
    batch_size: int = 16,
    lr: float = 2e-3,
    seed: int = 0,
    val_images: torch.Tensor | None = None,
) -> dict:
    ae = bundle.autoencoder
    gen = torch.Generator().manual_seed(seed)
    params = list(ae.parameters())
    for p in params:
        p.requires_grad_(True)
    opt = torch.optim.Adam(params, lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(1, steps))
    ae.latent_scale.fill_(1.0)
    losses = []
    try:
        for step in range(steps):
            idx = torch.randint(0, len(images), (batch_size,), generator=gen)
            x = images[idx]
            recon = ae.decoder(ae.encoder(x))
            loss = F.mse_loss(recon, x)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sched.step()
            losses.append(loss.item())
            if step % 200 == 0:
                log.info("ae step %d mse %.5f", step, losses[-1])
    finally:
        bundle.apply_freezing()
    with torch.no_grad():
        z = torch.cat([ae.encoder(c) for c in images.split(128)])
        ae.latent_scale.fill_(1.0 / float(z.std()))
        val = images if val_images is None or len(val_images) == 0 else val_images
        val_mse = float(F.mse_loss(ae.decode(ae.encode(val)), val))
    first, last = _windows_mean(losses)
    return {
        "loss_first": first,
        "loss_last": last,
        "val_mse": val_mse,
        "recon_tolerance": 1.5 * val_mse,
        "latent_scale": float(ae.latent_scale),
        "losses": losses,
    }


def pretrain_unet(
    bundle: ModelBundle,
    images: torch.Tensor,
    sched: NoiseSchedule,
    steps: int = 3000,
    batch_size: int = 32,
    lr: float = 1e-3,
    seed: int = 0,
) -> dict:
    unet = bundle.unet
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        latents = torch.cat([bundle.encode_latent(c) for c in images.split(128)])
        null = bundle.null_condition(1).detach()
    params = list(unet.parameters())
    for p in params:
        p.requires_grad_(True)
    opt = torch.optim.AdamW(params, lr=lr, weight_decay=0.0)
    lr_sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(1, steps))
    losses = []
    try:
        for step in range(steps):
            idx = torch.randint(0, len(latents), (batch_size,), generator=gen)
            x0 = latents[idx]
            t = torch.randint(0, sched.T, (batch_size,), generator=gen)
            eps = torch.randn(x0.shape, generator=gen)
            eps_hat = unet(q_sample(x0, t, eps, sched), t, null.expand(batch_size, -1, -1))
            loss = is_loss(eps, eps_hat)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            lr_sched.step()
            losses.append(loss.item())
            if step % 500 == 0:
                log.info("unet step %d loss %.5f", step, losses[-1])
    finally:
        bundle.apply_freezing()
    first, last = _windows_mean(losses)
    return {"loss_first": first, "loss_last": last, "losses": losses}
