"""Joint fine-tuning loop.

Each call to :meth:`Trainer.train_step` processes one micro-batch: it computes
the contrastive, noise-prediction and reciprocal-consistency losses, scales
the weighted total by ``1 / grad_accum`` and accumulates gradients into the
trainable parameters. Every ``grad_accum`` micro-batches the optimizer steps
and the EMA shadow is updated.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import torch

from . import checkpoint as ckpt
from .fusion import mean_repeat_vu
from .losses import LossReport, is_loss, itc_loss, reconstruct_vr, rsc_loss, total_loss
from .models import ModelBundle, ModelConfig, trainable_parameters
from .schedule import NoiseSchedule, linear_beta_schedule, q_sample

log = logging.getLogger(__name__)

# Keys that only control run length or I/O; they may change on resume.
_RUN_KEYS = {"epochs", "max_steps", "checkpoint_every"}


@dataclass
class TrainConfig:
    batch_size: int = 6
    lr: float = 1e-4
    grad_accum: int = 8
    ema_decay: float = 0.9999
    ema_warmup: bool = True
    epochs: int = 200
    max_steps: int | None = None  # micro-steps; overrides epochs when reached first
    lambda_itc: float = 1.0
    lambda_is: float = 1.0
    lambda_rsc: float = 1.0
    cond_dropout_p: float = 0.1
    weight_decay: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    checkpoint_every: int = 0  # optimizer steps; 0 disables periodic checkpoints
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.grad_accum < 1:
            raise ValueError("grad_accum must be >= 1")
        if not 0 <= self.ema_decay <= 1:
            raise ValueError("ema_decay must be in [0, 1]")
        if not 0 <= self.cond_dropout_p < 1:
            raise ValueError("cond_dropout_p must be in [0, 1)")
        if min(self.lambda_itc, self.lambda_is, self.lambda_rsc) < 0:
            raise ValueError("loss weights must be non-negative")

    @property
    def weights(self) -> tuple[float, float, float]:
        return (self.lambda_itc, self.lambda_is, self.lambda_rsc)

    def schedule(self) -> NoiseSchedule:
        return linear_beta_schedule(self.T, self.beta_start, self.beta_end)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise KeyError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def config_hash(model_cfg: ModelConfig, train_cfg: TrainConfig) -> str:
    train = {k: v for k, v in train_cfg.to_dict().items() if k not in _RUN_KEYS}
    blob = json.dumps({"model": model_cfg.to_dict(), "train": train}, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def ema_update(shadow: dict[str, torch.Tensor], params: dict[str, torch.Tensor], decay: float) -> dict[str, torch.Tensor]:
    """``decay * shadow + (1 - decay) * params`` per entry."""
    if not 0 <= decay <= 1:
        raise ValueError("decay must be in [0, 1]")
    if shadow.keys() != params.keys():
        raise KeyError("shadow and params name different tensors")
    out = {}
    for k, s in shadow.items():
        p = params[k].detach()
        if s.shape != p.shape:
            raise ValueError(f"{k}: shadow {tuple(s.shape)} vs param {tuple(p.shape)}")
        out[k] = decay * s + (1 - decay) * p
    return out


def apply_cond_dropout(
    context: torch.Tensor, null_context: torch.Tensor, gen: torch.Generator, p: float
) -> torch.Tensor:
    """Replace each sample's token features by ``null_context`` with probability ``p``."""
    if not 0 <= p < 1:
        raise ValueError("p must be in [0, 1)")
    if p == 0:
        return context
    drop = torch.rand(context.shape[0], generator=gen) < p
    if not bool(drop.any()):
        return context
    null = null_context.expand_as(context)
    return torch.where(drop[:, None, None], null, context)


@dataclass
class Batch:
    gen: torch.Tensor  # (B, 3, 64, 64) in [-1, 1]
    disc: torch.Tensor  # (B, 3, 32, 32) in [-1, 1]
    tokens: torch.Tensor  # (B, m)
    latents: torch.Tensor | None = None  # cached autoencoder latents


EpsPredictor = Callable[[torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor]


def compute_losses(
    bundle: ModelBundle,
    batch: Batch,
    sched: NoiseSchedule,
    gen: torch.Generator,
    weights=(1.0, 1.0, 1.0),
    cond_dropout_p: float = 0.0,
    eps_predictor: EpsPredictor | None = None,
) -> tuple[torch.Tensor, LossReport]:
    vis = bundle.encode_image(batch.disc)
    txt = bundle.encode_text(batch.tokens)
    latents = batch.latents if batch.latents is not None else bundle.encode_latent(batch.gen)
    n = latents.shape[0]
    t = torch.randint(0, sched.T, (n,), generator=gen)
    eps = torch.randn(latents.shape, generator=gen, dtype=latents.dtype)
    latents_t = q_sample(latents, t, eps, sched)
    context = txt.tokens
    if cond_dropout_p > 0:
        context = apply_cond_dropout(context, bundle.null_condition(1), gen, cond_dropout_p)
    predict = eps_predictor or bundle.predict_eps
    eps_hat = predict(latents_t, t, context)
    l_is = is_loss(eps, eps_hat)

    recon = reconstruct_vr(latents_t, t, eps_hat, sched)
    latent_proj = bundle.fusion.project_latent(latents)
    recon_proj = bundle.fusion.project_latent(recon)
    fused = bundle.fusion(vis.tokens, latents)
    fused_bar = mean_repeat_vu(fused, latents.shape[1])
    try:
        l_rsc, excluded = rsc_loss(fused_bar, latent_proj, recon_proj, return_excluded=True)
    except ValueError:
        # every row degenerate (e.g. a perfect noise predictor); fatal only if the term counts
        if weights[2] != 0:
            raise
        l_rsc, excluded = torch.tensor(math.nan), fused_bar.numel() // fused_bar.shape[-1]

    tau = bundle.temperature()
    i2t, t2i, l_itc = itc_loss(vis.global_, txt.global_, tau)
    return total_loss(l_itc, l_is, l_rsc, weights, i2t=i2t, t2i=t2i, tau=float(tau.detach()), rsc_excluded=excluded)


class Trainer:
    def __init__(
        self,
        bundle: ModelBundle,
        cfg: TrainConfig,
        gen_images: torch.Tensor,
        disc_images: torch.Tensor,
        tokens: torch.Tensor,
        metrics_log: str | Path | None = None,
        eps_predictor: EpsPredictor | None = None,
        cache_latents: bool = True,
    ):
        if not (len(gen_images) == len(disc_images) == len(tokens)):
            raise ValueError("dataset tensors differ in length")
        if len(tokens) < cfg.batch_size:
            raise ValueError("dataset smaller than one batch")
        self.bundle = bundle
        self.cfg = cfg
        self.sched = cfg.schedule()
        self.gen_images, self.disc_images, self.tokens = gen_images, disc_images, tokens
        self.cache_latents = cache_latents
        self._latents = None
        self.eps_predictor = eps_predictor
        self.params = trainable_parameters(bundle)
        self.optimizer = torch.optim.AdamW(
            list(self.params.values()),
            lr=cfg.lr,
            betas=(cfg.adam_beta1, cfg.adam_beta2),
            weight_decay=cfg.weight_decay,
        )
        self.ema = {k: p.detach().clone() for k, p in self.params.items()}
        self.micro_step = 0
        self.global_step = 0
        self.skipped = 0
        self.torch_gen = torch.Generator().manual_seed(cfg.seed)
        self.data_rng = np.random.default_rng(cfg.seed)
        self.epoch = 0
        self.cursor = 0
        self.perm = self.data_rng.permutation(len(tokens))
        self.history: list[dict] = []
        self.metrics_log = Path(metrics_log) if metrics_log else None
        self.config_hash = config_hash(bundle.config, cfg)
        self.optimizer.zero_grad(set_to_none=True)

    # -- data ---------------------------------------------------------------
    @property
    def latents(self) -> torch.Tensor | None:
        # frozen encoder: latents are a fixed function of the images
        if self.cache_latents and self._latents is None:
            self._latents = torch.cat([self.bundle.encode_latent(c) for c in self.gen_images.split(64)])
        return self._latents

    def next_batch(self) -> Batch:
        bs = self.cfg.batch_size
        if self.cursor + bs > len(self.perm):
            self.epoch += 1
            self.cursor = 0
            self.perm = self.data_rng.permutation(len(self.tokens))
        idx = torch.from_numpy(self.perm[self.cursor:self.cursor + bs].copy())
        self.cursor += bs
        return Batch(
            gen=self.gen_images[idx],
            disc=self.disc_images[idx],
            tokens=self.tokens[idx],
            latents=self.latents[idx] if self.latents is not None else None,
        )

    @property
    def batches_per_epoch(self) -> int:
        return len(self.tokens) // self.cfg.batch_size

    # -- stepping -------------------------------------------------------------
    def ema_decay_now(self) -> float:
        d = self.cfg.ema_decay
        if self.cfg.ema_warmup:
            d = min(d, (1 + self.global_step) / (10 + self.global_step))
        return d

    def train_step(self, batch: Batch | None = None) -> LossReport:
        batch = batch or self.next_batch()
        self.bundle.train()
        total, report = compute_losses(
            self.bundle,
            batch,
            self.sched,
            self.torch_gen,
            self.cfg.weights,
            self.cfg.cond_dropout_p,
            self.eps_predictor,
        )
        if not math.isfinite(report.total):
            return self._abort(report, "non-finite loss")

        accumulated = self.micro_step % self.cfg.grad_accum != 0
        saved = None
        if accumulated:
            saved = {k: None if p.grad is None else p.grad.clone() for k, p in self.params.items()}
        (total / self.cfg.grad_accum).backward()
        if not all(p.grad is None or bool(torch.isfinite(p.grad).all()) for p in self.params.values()):
            for k, p in self.params.items():
                p.grad = saved[k] if saved is not None else None
            return self._abort(report, "non-finite gradient")

        self.micro_step += 1
        if self.micro_step % self.cfg.grad_accum == 0:
            self.optimizer.step()
            self.optimizer.zero_grad(set_to_none=True)
            with torch.no_grad():
                self.ema = ema_update(self.ema, self.params, self.ema_decay_now())
            self.global_step += 1
        self._record(report)
        return report

    def _abort(self, report: LossReport, why: str) -> LossReport:
        self.skipped += 1
        log.warning("micro-step %d aborted: %s (%s)", self.micro_step, why, report.to_dict())
        self._record(report, skipped=True)
        return report

    def _record(self, report: LossReport, skipped: bool = False) -> None:
        rec = {"micro_step": self.micro_step, "global_step": self.global_step, "skipped": skipped, **report.to_dict()}
        self.history.append(rec)
        if self.metrics_log is not None:
            self.metrics_log.parent.mkdir(parents=True, exist_ok=True)
            with open(self.metrics_log, "a") as f:
                f.write(json.dumps(rec) + "\n")

    def total_micro_steps(self) -> int:
        by_epochs = self.cfg.epochs * self.batches_per_epoch
        if self.cfg.max_steps is not None:
            return min(by_epochs, self.cfg.max_steps)
        return by_epochs

    def run(self, checkpoint_dir: str | Path | None = None) -> list[dict]:
        """Train until the micro-step budget is exhausted."""
        target = self.total_micro_steps()
        last_ckpt = -1
        if checkpoint_dir is not None and self.micro_step == 0:
            self.save(Path(checkpoint_dir) / "step_000000.safetensors")
        while self.micro_step < target:
            before = self.global_step
            self.train_step()
            every = self.cfg.checkpoint_every
            if checkpoint_dir is not None and every and self.global_step != before and self.global_step % every == 0:
                self.save(Path(checkpoint_dir) / f"step_{self.global_step:06d}.safetensors")
                last_ckpt = self.global_step
        if checkpoint_dir is not None:
            if last_ckpt != self.global_step:
                self.save(Path(checkpoint_dir) / f"step_{self.global_step:06d}.safetensors")
            self.save(Path(checkpoint_dir) / "last.safetensors")
        return self.history

    # -- evaluation snapshot ---------------------------------------------------
    def ema_bundle(self) -> ModelBundle:
        import copy

        snap = copy.deepcopy(self.bundle)
        with torch.no_grad():
            for name, p in snap.named_parameters():
                if name in self.ema:
                    p.copy_(self.ema[name])
        snap.eval()
        return snap

    # -- persistence --------------------------------------------------------
    def state_tensors(self) -> dict[str, torch.Tensor]:
        out = {}
        for k, v in self.bundle.state_dict().items():
            out["model/" + ckpt.dotted_to_key(k)] = v
        for k, v in self.ema.items():
            out["ema/" + ckpt.dotted_to_key(k)] = v
        names = list(self.params)
        for i, st in self.optimizer.state_dict()["state"].items():
            for key, val in st.items():
                out[f"optim/{ckpt.dotted_to_key(names[i])}/{key}"] = torch.as_tensor(val)
        # gradients of a half-finished accumulation window
        for k, p in self.params.items():
            if p.grad is not None:
                out["grad/" + ckpt.dotted_to_key(k)] = p.grad.detach()
        out["rng/torch"] = self.torch_gen.get_state()
        out["data/perm"] = torch.from_numpy(np.asarray(self.perm, dtype=np.int64))
        if self.history:
            for key in self.history[0]:
                out[f"history/{key}"] = torch.tensor([float(h[key]) for h in self.history], dtype=torch.float64)
        return out

    def state_meta(self) -> dict:
        return {
            "kind": "train_state",
            "model_config": self.bundle.config.to_dict(),
            "train_config": self.cfg.to_dict(),
            "config_hash": self.config_hash,
            "model_hash": self.bundle.config.hash(),
            "micro_step": self.micro_step,
            "global_step": self.global_step,
            "skipped": self.skipped,
            "epoch": self.epoch,
            "cursor": self.cursor,
            "data_rng": self.data_rng.bit_generator.state,
            "ema": True,
            "param_groups": [
                {k: v for k, v in g.items() if k != "params"} for g in self.optimizer.state_dict()["param_groups"]
            ],
        }

    def save(self, path: str | Path) -> Path:
        return ckpt.write(path, self.state_tensors(), self.state_meta())

    def load(self, path: str | Path) -> None:
        tensors, meta = ckpt.read(path)
        if meta.get("kind") != "train_state":
            raise ckpt.CheckpointError(f"{path}: not a training checkpoint (kind={meta.get('kind')!r})")
        if meta["config_hash"] != self.config_hash:
            raise ckpt.CheckpointError(
                f"{path}: config hash {meta['config_hash']} does not match current config {self.config_hash}"
            )
        model_sd = {ckpt.key_to_dotted(k[6:]): v for k, v in tensors.items() if k.startswith("model/")}
        self.bundle.load_state_dict(model_sd, strict=True)
        self._latents = None
        self.ema = {
            k: tensors["ema/" + ckpt.dotted_to_key(k)].clone() for k in self.params
        }
        names = list(self.params)
        opt_state = {}
        for i, name in enumerate(names):
            prefix = f"optim/{ckpt.dotted_to_key(name)}/"
            st = {k[len(prefix):]: v.clone() for k, v in tensors.items() if k.startswith(prefix)}
            if st:
                opt_state[i] = st
        groups = [dict(g, params=list(range(len(names)))) for g in meta["param_groups"]]
        self.optimizer.load_state_dict({"state": opt_state, "param_groups": groups})
        self.optimizer.zero_grad(set_to_none=True)
        for k, p in self.params.items():
            g = tensors.get("grad/" + ckpt.dotted_to_key(k))
            if g is not None:
                p.grad = g.clone()
        self.torch_gen.set_state(tensors["rng/torch"])
        self.data_rng.bit_generator.state = meta["data_rng"]
        self.perm = tensors["data/perm"].numpy().copy()
        self.micro_step = meta["micro_step"]
        self.global_step = meta["global_step"]
        self.skipped = meta.get("skipped", 0)
        self.epoch = meta["epoch"]
        self.cursor = meta["cursor"]
        keys = sorted(k[8:] for k in tensors if k.startswith("history/"))
        if keys:
            cols = {k: tensors["history/" + k].tolist() for k in keys}
            n = len(next(iter(cols.values())))
            ints = {"micro_step", "global_step", "rsc_excluded"}
            self.history = []
            for i in range(n):
                rec = {}
                for k in keys:
                    v = cols[k][i]
                    rec[k] = int(v) if k in ints else (bool(v) if k == "skipped" else v)
                self.history.append(rec)
        else:
            self.history = []


def read_train_checkpoint(path: str | Path) -> tuple[dict[str, torch.Tensor], dict]:
    tensors, meta = ckpt.read(path)
    if meta.get("kind") != "train_state":
        raise ckpt.CheckpointError(f"{path}: not a training checkpoint")
    return tensors, meta


def load_checkpoint(
    path: str | Path,
    gen_images: torch.Tensor,
    disc_images: torch.Tensor,
    tokens: torch.Tensor,
    expected_hash: str | None = None,
    **trainer_kwargs,
) -> Trainer:
    """Rebuild a :class:`Trainer` from a training checkpoint."""
    _, meta = read_train_checkpoint(path)
    if expected_hash is not None and meta["config_hash"] != expected_hash:
        raise ckpt.CheckpointError(f"{path}: config hash {meta['config_hash']} != expected {expected_hash}")
    model_cfg = ModelConfig.from_dict(meta["model_config"])
    train_cfg = TrainConfig.from_dict(meta["train_config"])
    trainer = Trainer(ModelBundle(model_cfg), train_cfg, gen_images, disc_images, tokens, **trainer_kwargs)
    trainer.load(path)
    return trainer


def save_checkpoint(trainer: Trainer, path: str | Path) -> Path:
    return trainer.save(path)


def load_bundle(path: str | Path, use_ema: bool = True) -> ModelBundle:
    """Model weights from a training checkpoint or a model fixture.

    With ``use_ema`` the trainable parameters are replaced by their EMA
    shadow when the file carries one.
    """
    tensors, meta = ckpt.read(path)
    if "model_config" not in meta:
        raise ckpt.CheckpointError(f"{path}: no model_config in metadata")
    bundle = ModelBundle(ModelConfig.from_dict(meta["model_config"]))
    load_model_tensors(bundle, tensors, strict=meta.get("kind") == "train_state")
    if use_ema and any(k.startswith("ema/") for k in tensors):
        with torch.no_grad():
            for name, p in bundle.named_parameters():
                key = "ema/" + ckpt.dotted_to_key(name)
                if key in tensors:
                    p.copy_(tensors[key])
    bundle.eval()
    return bundle


def load_model_tensors(bundle: ModelBundle, tensors: dict[str, torch.Tensor], strict: bool = False) -> list[str]:
    """Copy ``model/...`` tensors into ``bundle``; returns the names loaded."""
    sd = bundle.state_dict()
    loaded = []
    for k, v in tensors.items():
        if not k.startswith("model/"):
            continue
        name = ckpt.key_to_dotted(k[6:])
        if name not in sd:
            raise ckpt.CheckpointError(f"unexpected tensor {k}")
        if sd[name].shape != v.shape:
            raise ckpt.CheckpointError(f"{k}: shape {tuple(v.shape)} != {tuple(sd[name].shape)}")
        loaded.append(name)
    if strict and set(loaded) != set(sd):
        raise ckpt.CheckpointError(f"missing tensors: {sorted(set(sd) - set(loaded))[:5]}")
    bundle.load_state_dict({ckpt.key_to_dotted(k[6:]): v for k, v in tensors.items() if k.startswith("model/")}, strict=False)
    return loaded


def save_model(bundle: ModelBundle, path: str | Path, components: Iterable[str] | None = None, **meta) -> Path:
    """Write a model fixture holding the named top-level components (all by default)."""
    comps = set(components) if components is not None else None
    tensors = {
        "model/" + ckpt.dotted_to_key(k): v
        for k, v in bundle.state_dict().items()
        if comps is None or k.split(".", 1)[0] in comps
    }
    record = {
        "kind": "model",
        "model_config": bundle.config.to_dict(),
        "model_hash": bundle.config.hash(),
        "components": sorted(comps) if comps is not None else None,
        "ema": False,
        **meta,
    }
    return ckpt.write(path, tensors, record)
