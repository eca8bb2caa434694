"""Deterministic DDIM sampling with classifier-free guidance."""

from __future__ import annotations

from typing import Callable

import torch

from .schedule import NoiseSchedule, extract, predict_x0

EpsFn = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


def cfg_eps(eps_cond: torch.Tensor, eps_uncond: torch.Tensor, scale: float) -> torch.Tensor:
    if eps_cond.shape != eps_uncond.shape:
        raise ValueError("conditional and unconditional predictions differ in shape")
    # lerp is exact at both ends (scale 0 -> uncond, scale 1 -> cond)
    return torch.lerp(eps_uncond, eps_cond, float(scale))


def ddim_timesteps(T: int, steps: int) -> list[int]:
    """Floor-spaced decreasing timesteps ending at 0."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if steps > T:
        raise ValueError(f"steps={steps} exceeds schedule length T={T}")
    return [(i * T) // steps for i in range(steps)][::-1]


def ddim_step(
    x_t: torch.Tensor,
    eps_hat: torch.Tensor,
    t: int,
    t_prev: int,
    sched: NoiseSchedule,
    eta: float = 0.0,
) -> torch.Tensor:
    """One eta=0 DDIM update from ``t`` to ``t_prev``.

    ``t_prev = -1`` targets the clean end point (alpha_bar = 1) and returns
    the one-step ``x0`` estimate.
    """
    if eta != 0:
        raise NotImplementedError("only deterministic DDIM (eta = 0) is supported")
    if not t_prev < t:
        raise ValueError(f"t_prev={t_prev} must be < t={t}")
    if t_prev < -1:
        raise IndexError("t_prev must be >= -1")
    x0_hat = predict_x0(x_t, t, eps_hat, sched)
    if t_prev == -1:
        return x0_hat
    ab = sched.alpha_bars
    return extract(ab.sqrt(), t_prev, x_t) * x0_hat + extract((1 - ab).sqrt(), t_prev, x_t) * eps_hat


@torch.no_grad()
def ddim_sample_latent(
    eps_fn: EpsFn,
    x_T: torch.Tensor,
    sched: NoiseSchedule,
    steps: int = 50,
) -> torch.Tensor:
    """Run DDIM from ``x_T`` with ``eps_fn(x_t, t_batch) -> eps``."""
    ts = ddim_timesteps(sched.T, steps)
    x = x_T
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else -1
        t_batch = torch.full((x.shape[0],), t, dtype=torch.long)
        x = ddim_step(x, eps_fn(x, t_batch), t, t_prev, sched)
    return x


def guided_eps_fn(bundle, context: torch.Tensor, scale: float) -> EpsFn:
    """Classifier-free guided noise predictor for a batch of token features."""
    null = bundle.null_condition(context.shape[0])

    def fn(x, t):
        both = bundle.predict_eps(torch.cat([x, x]), torch.cat([t, t]), torch.cat([context, null]))
        eps_c, eps_u = both.chunk(2)
        return cfg_eps(eps_c, eps_u, scale)

    return fn


def to_uint8(images: torch.Tensor) -> torch.Tensor:
    """(B, 3, H, W) in [-1, 1] -> (B, H, W, 3) uint8."""
    x = ((images.clamp(-1, 1) + 1) * 127.5).round().to(torch.uint8)
    return x.permute(0, 2, 3, 1).contiguous()


@torch.no_grad()
def sample(
    bundle,
    sched: NoiseSchedule,
    token_ids: torch.Tensor,
    seed: int,
    steps: int = 50,
    scale: float = 5.0,
    return_latent: bool = False,
):
    """Generate images for a batch of caption token ids.

    The start latent is drawn from a generator seeded with ``seed``; output is
    a float image batch in [-1, 1].
    """
    if token_ids.dim() == 1:
        token_ids = token_ids.unsqueeze(0)
    ddim_timesteps(sched.T, steps)  # validate before any work
    was_training = bundle.training
    bundle.eval()
    try:
        gen = torch.Generator().manual_seed(int(seed))
        shape = (token_ids.shape[0], *bundle.unet.latent_shape)
        x_T = torch.randn(shape, generator=gen, dtype=next(bundle.parameters()).dtype)
        context = bundle.encode_text(token_ids).tokens
        z = ddim_sample_latent(guided_eps_fn(bundle, context, scale), x_T, sched, steps)
        images = bundle.decode_latent(z)
    finally:
        bundle.train(was_training)
    return (images, z) if return_latent else images
