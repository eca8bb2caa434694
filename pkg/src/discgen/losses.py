"""Training objectives.

``itc_loss``      symmetric InfoNCE over the image/text similarity map
``is_loss``       noise-prediction mean squared error
``rsc_loss``      1 - mean cosine between (fused - recon) and (latent - recon)
``directional_clip_loss``  1 - cosine of two difference vectors
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F

from .schedule import NoiseSchedule, Timestep, predict_x0

log = logging.getLogger(__name__)

EPS_DIV = 1e-8
UNIT_TOL = 1e-4


@dataclass
class LossReport:
    itc: float
    is_: float
    rsc: float
    total: float
    i2t: float
    t2i: float
    tau: float
    rsc_excluded: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["is"] = d.pop("is_")
        return d


def itc_loss(image_g: torch.Tensor, text_g: torch.Tensor, tau) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Returns ``(i2t, t2i, itc)`` for matched rows of unit vectors."""
    if image_g.shape != text_g.shape or image_g.dim() != 2:
        raise ValueError("expected two (n, d) matrices of equal shape")
    if image_g.shape[0] < 1:
        raise ValueError("empty batch")
    tau = torch.as_tensor(tau, dtype=image_g.dtype)
    if bool((tau <= 0).any()):
        raise ValueError("temperature must be positive")
    with torch.no_grad():
        for name, m in (("image", image_g), ("text", text_g)):
            dev = (m.norm(dim=1) - 1).abs().max()
            if dev > UNIT_TOL:
                raise ValueError(f"{name} rows are not unit-norm (max deviation {float(dev):.2e})")
    logits = image_g @ text_g.T / tau
    labels = torch.arange(logits.shape[0])
    i2t = F.cross_entropy(logits, labels)
    t2i = F.cross_entropy(logits.T, labels)
    return i2t, t2i, (i2t + t2i) / 2


def is_loss(eps: torch.Tensor, eps_hat: torch.Tensor) -> torch.Tensor:
    if eps.shape != eps_hat.shape:
        raise ValueError(f"shape mismatch {tuple(eps.shape)} vs {tuple(eps_hat.shape)}")
    return ((eps - eps_hat) ** 2).mean()


def _row_cosines(a: torch.Tensor, b: torch.Tensor):
    """Cosine per row and a mask of rows whose differences are both non-degenerate."""
    aa = (a * a).sum(-1)
    bb = (b * b).sum(-1)
    # written as "not <= eps" so nan rows stay in and surface as a nan loss
    ok = ~((aa.detach().sqrt() <= EPS_DIV) | (bb.detach().sqrt() <= EPS_DIV))
    # sqrt of the product keeps parallel rows at exactly 1
    denom = torch.where(ok, aa * bb, torch.ones_like(aa)).sqrt()
    cos = ((a * b).sum(-1) / denom).clamp(-1.0, 1.0)
    return cos, ok


def rsc_loss(
    fused_bar: torch.Tensor,
    latent_proj: torch.Tensor,
    recon_proj: torch.Tensor,
    return_excluded: bool = False,
):
    """Reciprocal consistency over all ``n * c`` rows of (…, c, d) inputs.

    Rows where either difference has norm <= ``EPS_DIV`` are dropped from the
    mean; if every row is dropped a ``ValueError`` is raised.
    """
    if not (fused_bar.shape == latent_proj.shape == recon_proj.shape):
        raise ValueError("rsc inputs must share a shape")
    a = (fused_bar - recon_proj).reshape(-1, fused_bar.shape[-1])
    b = (latent_proj - recon_proj).reshape(-1, fused_bar.shape[-1])
    cos, ok = _row_cosines(a, b)
    kept = int(ok.sum())
    if kept == 0:
        raise ValueError("all rsc rows are degenerate")
    excluded = ok.numel() - kept
    if excluded:
        log.warning("rsc: excluded %d degenerate rows of %d", excluded, ok.numel())
    loss = 1.0 - cos[ok].mean()
    return (loss, excluded) if return_excluded else loss


def directional_clip_loss(v1, v2, t1, t2) -> torch.Tensor:
    dv = torch.as_tensor(v1) - torch.as_tensor(v2)
    dt = torch.as_tensor(t1) - torch.as_tensor(t2)
    if float(dv.norm()) == 0.0 or float(dt.norm()) == 0.0:
        raise ValueError("difference vectors must be nonzero")
    cos, _ = _row_cosines(dv.reshape(1, -1), dt.reshape(1, -1))
    return 1.0 - cos[0]


def reconstruct_vr(latent_t: torch.Tensor, t: Timestep, eps_hat: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """One-step latent reconstruction from the predicted noise."""
    return predict_x0(latent_t, t, eps_hat, sched)


def total_loss(
    itc: torch.Tensor,
    is_: torch.Tensor,
    rsc: torch.Tensor,
    weights: tuple[float, float, float] = (1.0, 1.0, 1.0),
    i2t: torch.Tensor | None = None,
    t2i: torch.Tensor | None = None,
    tau: float = float("nan"),
    rsc_excluded: int = 0,
) -> tuple[torch.Tensor, LossReport]:
    """Weighted sum ``w_itc*itc + w_is*is + w_rsc*rsc`` plus a float report.

    Terms whose weight is zero are omitted from the sum.
    """
    w_itc, w_is, w_rsc = (float(w) for w in weights)
    if min(w_itc, w_is, w_rsc) < 0:
        raise ValueError("loss weights must be non-negative")
    # zero-weight terms are left out so an undefined (nan) term cannot leak in
    terms = [w * x for w, x in ((w_itc, itc), (w_is, is_), (w_rsc, rsc)) if w != 0]
    total = sum(terms[1:], terms[0]) if terms else torch.zeros_like(torch.as_tensor(itc))

    def f(x):
        return float(x.detach()) if isinstance(x, torch.Tensor) else float(x)

    report = LossReport(
        itc=f(itc),
        is_=f(is_),
        rsc=f(rsc),
        total=f(total),
        i2t=f(i2t) if i2t is not None else math.nan,
        t2i=f(t2i) if t2i is not None else math.nan,
        tau=float(tau),
        rsc_excluded=int(rsc_excluded),
    )
    return total, report
