"""Glue between models, sampler and metrics."""

from __future__ import annotations

import numpy as np
import torch

from .data import CaptionedImage, Vocabulary, to_tensors
from .extractor import Extractor
from .metrics import MetricReport, fid_from_features, inception_score, kid, recall_at_k
from .models import ModelBundle
from .sampler import sample
from .schedule import NoiseSchedule


@torch.no_grad()
def similarity_matrix(bundle: ModelBundle, disc: torch.Tensor, tokens: torch.Tensor) -> np.ndarray:
    bundle.eval()
    vg = torch.cat([bundle.encode_image(c).global_ for c in disc.split(128)])
    tg = torch.cat([bundle.encode_text(c).global_ for c in tokens.split(128)])
    return (vg @ tg.T).double().numpy()


def evaluate_retrieval(bundle: ModelBundle, items: list[CaptionedImage], ks=(1, 5, 10)) -> MetricReport:
    _, disc, tokens = to_tensors(items)
    sim = similarity_matrix(bundle, disc, tokens)
    return MetricReport(retrieval=recall_at_k(sim, ks), extra={"n": len(items)})


@torch.no_grad()
def generate(
    bundle: ModelBundle,
    sched: NoiseSchedule,
    captions: list[str],
    seed: int = 0,
    steps: int = 50,
    scale: float = 5.0,
    batch: int = 64,
    vocab: Vocabulary | None = None,
) -> torch.Tensor:
    """Images in [-1, 1] for each caption; chunk ``i`` uses seed ``seed + i``."""
    vocab = vocab or Vocabulary.default()
    ids = torch.tensor([vocab.tokenize(c, bundle.config.max_len) for c in captions], dtype=torch.long)
    out = [sample(bundle, sched, chunk, seed=seed + i, steps=steps, scale=scale) for i, chunk in enumerate(ids.split(batch))]
    return torch.cat(out)


def generation_metrics(
    extractor: Extractor,
    generated: torch.Tensor,
    reference: torch.Tensor,
    is_splits: int = 1,
    kid_subsets: int = 100,
    seed: int = 0,
) -> MetricReport:
    gf, gp = extractor.features_and_probs(generated)
    rf, _ = extractor.features_and_probs(reference)
    gf, rf = gf.numpy(), rf.numpy()
    kid_mean, kid_std = kid(gf, rf, n_subsets=kid_subsets, seed=seed)
    is_mean, is_std = inception_score(gp.numpy(), splits=is_splits)
    return MetricReport(
        fid=fid_from_features(gf, rf),
        kid_mean=kid_mean,
        kid_std=kid_std,
        is_mean=is_mean,
        is_std=is_std,
        extra={"n_generated": len(gf), "n_reference": len(rf), "extractor_hash": extractor.hash()},
    )
