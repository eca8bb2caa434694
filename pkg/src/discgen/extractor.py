"""Reference feature extractor for FID/KID/IS.

A small fixed-seed CNN classifier trained once on the synthetic classes.
Penultimate activations are the features; softmax outputs are the class
posteriors used by the Inception Score.
"""

from __future__ import annotations

import logging
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint as ckpt

log = logging.getLogger(__name__)


class Extractor(nn.Module):
    def __init__(self, n_classes: int, feat_dim: int = 32, image_size: int = 64):
        super().__init__()
        self.n_classes, self.feat_dim, self.image_size = n_classes, feat_dim, image_size
        self.body = nn.Sequential(
            nn.Conv2d(3, 16, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(16, 32, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(32, 64, 3, stride=2, padding=1), nn.SiLU(),
            # max, not mean: the objects are small and averaging drowns them in background
            nn.AdaptiveMaxPool2d(1), nn.Flatten(),
            nn.Linear(64, feat_dim), nn.Tanh(),
        )
        self.head = nn.Linear(feat_dim, n_classes)

    def forward(self, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        feats = self.body(images)
        return feats, self.head(feats)

    @torch.no_grad()
    def features_and_probs(self, images: torch.Tensor, batch: int = 128):
        """Features (n, k) and class posteriors (n, C) as float64 tensors."""
        self.eval()
        feats, probs = [], []
        for chunk in images.split(batch):
            f, logits = self(chunk.float())
            feats.append(f.double())
            probs.append(logits.double().softmax(dim=-1))
        return torch.cat(feats), torch.cat(probs)

    def hash(self) -> str:
        return ckpt.tensors_hash(self.state_dict())


def train_extractor(
    images: torch.Tensor,
    labels: torch.Tensor,
    n_classes: int,
    steps: int = 600,
    batch_size: int = 64,
    lr: float = 3e-3,
    seed: int = 0,
) -> tuple[Extractor, dict]:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = Extractor(n_classes)
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    losses = []
    for step in range(steps):
        idx = torch.randint(0, len(images), (batch_size,), generator=gen)
        _, logits = model(images[idx])
        loss = F.cross_entropy(logits, labels[idx])
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        losses.append(loss.item())
    model.eval()
    with torch.no_grad():
        acc = float((model(images)[1].argmax(-1) == labels).float().mean())
    return model, {"train_acc": acc, "loss_last": losses[-1] if losses else float("nan")}


def save_extractor(model: Extractor, path: str | Path, class_labels: list[str]) -> Path:
    tensors = {"extractor/" + ckpt.dotted_to_key(k): v for k, v in model.state_dict().items()}
    meta = {
        "kind": "extractor",
        "n_classes": model.n_classes,
        "feat_dim": model.feat_dim,
        "image_size": model.image_size,
        "class_labels": class_labels,
        "extractor_hash": model.hash(),
    }
    return ckpt.write(path, tensors, meta)


def load_extractor(path: str | Path) -> tuple[Extractor, dict]:
    if not Path(path).exists():
        raise FileNotFoundError(f"extractor file {path} not found")
    tensors, meta = ckpt.read(path)
    if meta.get("kind") != "extractor":
        raise ckpt.CheckpointError(f"{path}: not an extractor (kind={meta.get('kind')!r})")
    model = Extractor(meta["n_classes"], meta["feat_dim"], meta["image_size"])
    model.load_state_dict({ckpt.key_to_dotted(k[len("extractor/"):]): v for k, v in tensors.items()})
    model.eval()
    return model, meta
