"""Command-line entry point: ``discgen <command> [flags]``.

Commands: synth, pretrain-ae, pretrain-unet, train-extractor, train, sample,
eval-retrieval, eval-gen. Reports are JSON; logs go to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch
import yaml
from PIL import Image

from . import checkpoint as ckpt
from . import data
from .evaluate import evaluate_retrieval, generate, generation_metrics
from .extractor import load_extractor, save_extractor, train_extractor
from .models import ModelBundle, ModelConfig
from .pretrain import pretrain_autoencoder, pretrain_unet
from .sampler import ddim_timesteps, sample, to_uint8
from .trainer import (
    TrainConfig,
    Trainer,
    config_hash,
    load_bundle,
    load_checkpoint,
    load_model_tensors,
    save_model,
)

log = logging.getLogger("discgen")


class CLIError(Exception):
    pass


def _write_json(obj, out: str | None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text + "\n")
    else:
        print(text)


def _load_split(path: str, split: str | None):
    items = data.load_dataset(path)
    return data.split(items, split) if split else items


def _parse_value(raw: str):
    return yaml.safe_load(raw)


def load_train_config(path: str | None, overrides: dict) -> TrainConfig:
    """Defaults < config file < command-line overrides."""
    values: dict = {}
    if path:
        loaded = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(loaded, dict) or any(isinstance(v, (dict, list)) for v in loaded.values()):
            raise CLIError(f"{path}: config must be a flat key-value mapping")
        values.update(loaded)
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return TrainConfig.from_dict(values)
    except (KeyError, TypeError, ValueError) as e:
        raise CLIError(f"invalid training config: {e}") from e


def _schedule_for(meta: dict):
    cfg = TrainConfig.from_dict(meta["train_config"]) if "train_config" in meta else TrainConfig()
    return cfg.schedule()


# -- commands -----------------------------------------------------------------

def cmd_synth(args) -> None:
    try:
        items = data.generate_synthetic(args.classes, args.per_class, args.seed, args.test_per_class)
    except ValueError as e:
        raise CLIError(str(e)) from e
    data.save_dataset(items, args.out)
    log.info("wrote %d items to %s", len(items), args.out)


def cmd_pretrain_ae(args) -> None:
    items = data.load_dataset(args.data)
    gen, _, _ = data.to_tensors(data.split(items, "train"))
    val, _, _ = data.to_tensors(data.split(items, "test"))
    bundle = ModelBundle(ModelConfig(seed=args.seed))
    stats = pretrain_autoencoder(bundle, gen, steps=args.steps, batch_size=args.batch_size, seed=args.seed, val_images=val)
    stats.pop("losses")
    save_model(bundle, args.out, components=["autoencoder"], pretrain=stats)
    log.info("autoencoder: %s", stats)


def cmd_pretrain_unet(args) -> None:
    items = data.load_dataset(args.data)
    gen, _, _ = data.to_tensors(data.split(items, "train"))
    bundle = _bundle_from_fixture(args.ae, args.seed)
    stats = pretrain_unet(bundle, gen, TrainConfig().schedule(), steps=args.steps, batch_size=args.batch_size, seed=args.seed)
    stats.pop("losses")
    _, meta = ckpt.read(args.ae)
    save_model(bundle, args.out, pretrain={**meta.get("pretrain", {}), "unet": stats})
    log.info("unet: %s", stats)


def cmd_train_extractor(args) -> None:
    items = data.split(data.load_dataset(args.data), "train")
    labels = sorted({it.class_label for it in items})
    y = torch.tensor([labels.index(it.class_label) for it in items])
    gen, _, _ = data.to_tensors(items)
    model, stats = train_extractor(gen, y, len(labels), steps=args.steps, seed=args.seed)
    save_extractor(model, args.out, labels)
    log.info("extractor: %s", stats)


def _bundle_from_fixture(path: str | None, seed: int = 0) -> ModelBundle:
    if path is None:
        return ModelBundle(ModelConfig(seed=seed))
    tensors, meta = ckpt.read(path)
    cfg = ModelConfig.from_dict(meta["model_config"])
    bundle = ModelBundle(cfg)
    load_model_tensors(bundle, tensors)
    return bundle


def cmd_train(args) -> None:
    overrides = {"max_steps": args.max_steps, "seed": args.seed, "epochs": args.epochs}
    for item in args.set or []:
        if "=" not in item:
            raise CLIError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = _parse_value(v)
    cfg = load_train_config(args.config, overrides)
    items = data.split(data.load_dataset(args.data), "train")
    gen, disc, tokens = data.to_tensors(items)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics_log = out / "metrics.jsonl"
    if args.resume:
        _, meta = ckpt.read(args.resume)
        resumed = TrainConfig.from_dict(meta["train_config"])
        if (args.config or args.set) and config_hash(ModelConfig.from_dict(meta["model_config"]), cfg) != meta["config_hash"]:
            raise CLIError("--config/--set change hyperparameters of the run being resumed")
        for key in ("max_steps", "epochs", "checkpoint_every"):
            setattr(resumed, key, getattr(cfg, key))
        trainer = load_checkpoint(args.resume, gen, disc, tokens, metrics_log=metrics_log)
        trainer.cfg = resumed
        log.info("resumed at micro-step %d (global %d)", trainer.micro_step, trainer.global_step)
    else:
        if metrics_log.exists():
            metrics_log.unlink()
        bundle = _bundle_from_fixture(args.ae)
        trainer = Trainer(bundle, cfg, gen, disc, tokens, metrics_log=metrics_log)
    (out / "train_config.json").write_text(json.dumps(trainer.cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    trainer.run(checkpoint_dir=out / "checkpoints")
    log.info("done: %d micro-steps, %d optimizer steps, %d skipped", trainer.micro_step, trainer.global_step, trainer.skipped)


def cmd_sample(args) -> None:
    _, meta = ckpt.read(args.checkpoint)
    sched = _schedule_for(meta)
    try:
        ddim_timesteps(sched.T, args.steps)
    except ValueError as e:
        raise CLIError(str(e)) from e
    bundle = load_bundle(args.checkpoint, use_ema=args.use_ema)
    vocab = data.Vocabulary.default()
    try:
        ids = torch.tensor([vocab.tokenize(args.caption, bundle.config.max_len)] * args.n)
    except (KeyError, ValueError) as e:
        raise CLIError(f"caption rejected: {e}") from e
    images = to_uint8(sample(bundle, sched, ids, seed=args.seed, steps=args.steps, scale=args.scale)).numpy()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for i, im in enumerate(images):
        name = f"sample_{i:03d}.png"
        Image.fromarray(im, mode="RGB").save(out / name)
        files.append(name)
    sidecar = {
        "caption": args.caption,
        "seed": args.seed,
        "steps": args.steps,
        "scale": args.scale,
        "use_ema": args.use_ema,
        "checkpoint": str(args.checkpoint),
        "checkpoint_hash": ckpt.file_hash(args.checkpoint),
        "images": files,
    }
    _write_json(sidecar, str(out / "samples.json"))


def cmd_eval_retrieval(args) -> None:
    items = _load_split(args.data, args.split)
    bundle = load_bundle(args.checkpoint, use_ema=args.use_ema)
    report = evaluate_retrieval(bundle, items)
    report.extra.update({"checkpoint_hash": ckpt.file_hash(args.checkpoint), "use_ema": args.use_ema, "split": args.split})
    _write_json(report.to_dict(), args.out)


def cmd_eval_gen(args) -> None:
    if not Path(args.extractor).exists():
        raise CLIError(f"extractor file not found: {args.extractor}")
    extractor, ext_meta = load_extractor(args.extractor)
    ref_items = _load_split(args.data, args.reference_split)
    ref, _, _ = data.to_tensors(ref_items)
    if args.against_self:
        generated = ref
    else:
        if not args.checkpoint:
            raise CLIError("--checkpoint is required unless --against-self is given")
        _, meta = ckpt.read(args.checkpoint)
        sched = _schedule_for(meta)
        bundle = load_bundle(args.checkpoint, use_ema=args.use_ema)
        # evenly strided over the reference set so every class is represented
        captions = [ref_items[(i * len(ref_items)) // args.n_samples].caption for i in range(args.n_samples)]
        generated = generate(bundle, sched, captions, seed=args.seed, steps=args.steps, scale=args.scale)
        generated = to_uint8(generated).permute(0, 3, 1, 2).float().div(127.5).sub(1.0)
    report = generation_metrics(extractor, generated, ref, seed=args.seed)
    report.extra.update(
        {
            "against_self": args.against_self,
            "checkpoint": args.checkpoint,
            "extractor_hash": ext_meta["extractor_hash"],
        }
    )
    if args.features_out:
        feats, _ = extractor.features_and_probs(generated)
        ckpt.save_features(args.features_out, feats, ext_meta["extractor_hash"])
    _write_json(report.to_dict(), args.out)


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="discgen", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate the synthetic captioned dataset")
    s.add_argument("--classes", type=int, default=8)
    s.add_argument("--per-class", type=int, default=32)
    s.add_argument("--test-per-class", type=int, default=None)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("pretrain-ae", help="fit and freeze the latent autoencoder")
    s.add_argument("--data", required=True)
    s.add_argument("--steps", type=int, default=1000)
    s.add_argument("--batch-size", type=int, default=16)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_pretrain_ae)

    s = sub.add_parser("pretrain-unet", help="fit a generic (unconditional) base UNet")
    s.add_argument("--data", required=True)
    s.add_argument("--ae", required=True)
    s.add_argument("--steps", type=int, default=3000)
    s.add_argument("--batch-size", type=int, default=32)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_pretrain_unet)

    s = sub.add_parser("train-extractor", help="fit the reference feature extractor")
    s.add_argument("--data", required=True)
    s.add_argument("--steps", type=int, default=600)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_extractor)

    s = sub.add_parser("train", help="joint fine-tuning")
    s.add_argument("--config", default=None, help="flat YAML/JSON file of TrainConfig keys")
    s.add_argument("--data", required=True)
    s.add_argument("--ae", default=None, help="model fixture from pretrain-ae or pretrain-unet")
    s.add_argument("--out", required=True)
    s.add_argument("--resume", default=None)
    s.add_argument("--max-steps", type=int, default=None, help="micro-step budget")
    s.add_argument("--epochs", type=int, default=None)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    s.set_defaults(func=cmd_train)

    def ema_flags(s):
        s.add_argument("--use-ema", dest="use_ema", action="store_true", default=True)
        s.add_argument("--no-ema", dest="use_ema", action="store_false")

    s = sub.add_parser("sample", help="DDIM sampling with classifier-free guidance")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--caption", required=True)
    s.add_argument("--steps", type=int, default=50)
    s.add_argument("--scale", type=float, default=5.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n", type=int, default=1)
    s.add_argument("--out", required=True)
    ema_flags(s)
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("eval-retrieval", help="Recall@K image<->text retrieval")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="test")
    s.add_argument("--out", default=None)
    ema_flags(s)
    s.set_defaults(func=cmd_eval_retrieval)

    s = sub.add_parser("eval-gen", help="FID / KID / IS of generated images")
    s.add_argument("--checkpoint", default=None)
    s.add_argument("--data", required=True)
    s.add_argument("--extractor", required=True)
    s.add_argument("--reference-split", default="train")
    s.add_argument("--n-samples", type=int, default=64)
    s.add_argument("--steps", type=int, default=50)
    s.add_argument("--scale", type=float, default=5.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--against-self", action="store_true", help="score the reference set against itself")
    s.add_argument("--features-out", default=None)
    s.add_argument("--out", default=None)
    ema_flags(s)
    s.set_defaults(func=cmd_eval_gen)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
        stream=sys.stderr,
        force=True,
    )
    torch.use_deterministic_algorithms(True)
    try:
        args.func(args)
    except (CLIError, FileNotFoundError, ckpt.CheckpointError) as e:
        print(f"discgen {args.command}: error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
