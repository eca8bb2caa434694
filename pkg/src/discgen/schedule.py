"""Discrete DDPM noise schedule and its closed-form quantities.

Timesteps are 0-indexed: ``t`` runs over ``0..T-1``. Tables are kept in
float64 and cast to the dtype of the array they scale.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import torch

Timestep = Union[int, torch.Tensor]


@dataclass(frozen=True)
class NoiseSchedule:
    betas: torch.Tensor
    alphas: torch.Tensor
    alpha_bars: torch.Tensor

    @property
    def T(self) -> int:
        return int(self.betas.shape[0])

    @classmethod
    def from_betas(cls, betas: Sequence[float] | torch.Tensor) -> "NoiseSchedule":
        betas = torch.as_tensor(betas, dtype=torch.float64).flatten().clone()
        if betas.numel() == 0:
            raise ValueError("schedule needs at least one step")
        if not bool(((betas > 0) & (betas < 1)).all()):
            raise ValueError("every beta must lie in (0, 1)")
        alphas = 1.0 - betas
        alpha_bars = torch.cumprod(alphas, dim=0)
        if betas.numel() > 1 and not bool((alpha_bars[1:] < alpha_bars[:-1]).all()):
            raise ValueError("alpha_bars must be strictly decreasing")
        if not bool((alpha_bars > 0).all()):
            raise ValueError("alpha_bars underflowed to zero")
        return cls(betas=betas, alphas=alphas, alpha_bars=alpha_bars)

    def validate_t(self, t: Timestep) -> None:
        if isinstance(t, torch.Tensor):
            if t.dtype.is_floating_point:
                raise TypeError("timesteps must be integers")
            bad = (t < 0) | (t >= self.T)
            if bool(bad.any()):
                raise IndexError(f"timestep out of range [0, {self.T})")
        elif not 0 <= int(t) < self.T:
            raise IndexError(f"timestep {t} out of range [0, {self.T})")


def linear_beta_schedule(
    T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02
) -> NoiseSchedule:
    """Betas spaced linearly from ``beta_start`` to ``beta_end`` inclusive."""
    if int(T) < 1:
        raise ValueError("T must be >= 1")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    betas = torch.linspace(beta_start, beta_end, int(T), dtype=torch.float64)
    return NoiseSchedule.from_betas(betas)


def extract(table: torch.Tensor, t: Timestep, like: torch.Tensor) -> torch.Tensor:
    """Gather ``table[t]`` shaped to broadcast against ``like``.

    A tensor ``t`` of shape (B,) indexes the leading batch dimension of ``like``.
    """
    if isinstance(t, torch.Tensor) and t.dim() > 0:
        vals = table[t.to(torch.long)]
        vals = vals.reshape(-1, *([1] * (like.dim() - 1)))
    else:
        vals = table[int(t)]
    return vals.to(dtype=like.dtype, device=like.device)


def q_sample(x0: torch.Tensor, t: Timestep, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Noised sample ``sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps``."""
    if x0.shape != eps.shape:
        raise ValueError(f"x0 {tuple(x0.shape)} and eps {tuple(eps.shape)} differ in shape")
    sched.validate_t(t)
    ab = sched.alpha_bars
    return extract(ab.sqrt(), t, x0) * x0 + extract((1.0 - ab).sqrt(), t, x0) * eps


def predict_x0(x_t: torch.Tensor, t: Timestep, eps_hat: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """One-step clean-signal estimate, the inverse of :func:`q_sample` in ``x0``."""
    if x_t.shape != eps_hat.shape:
        raise ValueError("x_t and eps_hat differ in shape")
    sched.validate_t(t)
    ab = sched.alpha_bars
    return (x_t - extract((1.0 - ab).sqrt(), t, x_t) * eps_hat) / extract(ab.sqrt(), t, x_t)


def posterior_mean(x_t: torch.Tensor, t: Timestep, eps_hat: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Mean of the ancestral reverse step from ``t`` given predicted noise."""
    if x_t.shape != eps_hat.shape:
        raise ValueError("x_t and eps_hat differ in shape")
    sched.validate_t(t)
    one_minus_ab = 1.0 - sched.alpha_bars
    sel = one_minus_ab[t.to(torch.long)] if isinstance(t, torch.Tensor) else one_minus_ab[int(t)]
    if bool((sel <= 0).any()):
        raise ZeroDivisionError("1 - alpha_bar_t is zero; posterior mean undefined")
    coef = (1.0 - sched.alphas) / one_minus_ab.sqrt()
    return (x_t - extract(coef, t, x_t) * eps_hat) / extract(sched.alphas.sqrt(), t, x_t)
