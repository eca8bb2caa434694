import math

import pytest
import torch

from discgen import checkpoint as ckpt
from discgen import data
from discgen.models import ModelBundle, ModelConfig, frozen_parameters
from discgen.trainer import (
    Batch,
    TrainConfig,
    Trainer,
    apply_cond_dropout,
    compute_losses,
    config_hash,
    ema_update,
    load_bundle,
    load_checkpoint,
)


@pytest.fixture(scope="module")
def tensors():
    items = data.split(data.generate_synthetic(2, 6, seed=0), "train")
    return data.to_tensors(items)


def small_cfg(**kw):
    base = dict(batch_size=3, grad_accum=2, lr=1e-3, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def make_trainer(tensors, cfg=None, **kw):
    return Trainer(ModelBundle(ModelConfig()), cfg or small_cfg(), *tensors, **kw)


def params_of(trainer):
    return {k: v.detach().clone() for k, v in trainer.bundle.state_dict().items()}


# ---------------------------------------------------------------- ema / dropout


def test_ema_cases():
    s, p = {"w": torch.tensor([1.0, 2.0])}, {"w": torch.tensor([3.0, -2.0])}
    assert torch.equal(ema_update(s, p, 1.0)["w"], s["w"])
    assert torch.equal(ema_update(s, p, 0.0)["w"], p["w"])
    assert torch.allclose(ema_update(s, p, 0.75)["w"], torch.tensor([1.5, 1.0]))
    with pytest.raises(ValueError):
        ema_update(s, p, 1.5)
    with pytest.raises(KeyError):
        ema_update(s, {"v": p["w"]}, 0.5)


def test_ema_closed_form_on_constant_params():
    d, k = 0.9, 25
    shadow = {"w": torch.zeros((), dtype=torch.float64)}
    target = {"w": torch.ones((), dtype=torch.float64)}
    for _ in range(k):
        shadow = ema_update(shadow, target, d)
    assert float(shadow["w"]) == pytest.approx(1 - d**k, abs=1e-12)


def test_cond_dropout():
    ctx = torch.randn(4000, 2, 3)
    null = torch.zeros(1, 2, 3)
    g = torch.Generator().manual_seed(0)
    assert apply_cond_dropout(ctx, null, g, 0.0) is ctx
    out = apply_cond_dropout(ctx, null, g, 0.1)
    dropped = (out == 0).all(dim=(1, 2))
    n, p = len(ctx), 0.1
    assert abs(int(dropped.sum()) - n * p) <= 3 * math.sqrt(n * p * (1 - p))
    assert torch.equal(out[dropped], null.expand(int(dropped.sum()), -1, -1))
    assert torch.equal(out[~dropped], ctx[~dropped])
    with pytest.raises(ValueError):
        apply_cond_dropout(ctx, null, g, 1.0)


def test_config_validation_and_hash():
    with pytest.raises(ValueError):
        TrainConfig(grad_accum=0)
    with pytest.raises(ValueError):
        TrainConfig(lambda_rsc=-1)
    with pytest.raises(KeyError):
        TrainConfig.from_dict({"lr": 1e-4, "nope": 1})
    m = ModelConfig()
    assert config_hash(m, TrainConfig()) == config_hash(m, TrainConfig(max_steps=10, epochs=3))
    assert config_hash(m, TrainConfig()) != config_hash(m, TrainConfig(lr=2e-4))


# ---------------------------------------------------------------- losses pipeline


def test_perfect_predictor_gives_zero_is(tensors):
    bundle = ModelBundle(ModelConfig())
    gen, disc, tok = tensors
    latents = bundle.encode_latent(gen[:3]).double()
    sched = TrainConfig().schedule()
    ab = sched.alpha_bars

    def oracle(x_t, t, context):
        a = ab[t].view(-1, 1, 1, 1)
        return (x_t - a.sqrt() * latents) / (1 - a).sqrt()

    bundle.double()
    batch = Batch(gen[:3].double(), disc[:3].double(), tok[:3], latents=latents)
    total, rep = compute_losses(bundle, batch, sched, torch.Generator().manual_seed(0), (0, 1, 0), eps_predictor=oracle)
    assert rep.is_ <= 1e-20
    # nothing trainable feeds the weighted total, so every gradient is zero
    assert not total.requires_grad
    # with the term weighted in, an undefined reciprocal loss is an error
    with pytest.raises(ValueError):
        compute_losses(bundle, batch, sched, torch.Generator().manual_seed(0), (0, 1, 1), eps_predictor=oracle)


def test_frozen_parameters_unchanged(tensors):
    tr = make_trainer(tensors)
    before = {k: v.detach().clone() for k, v in frozen_parameters(tr.bundle).items()}
    trainable_before = {k: v.detach().clone() for k, v in tr.params.items()}
    for _ in range(4):
        tr.train_step()
    assert tr.global_step == 2
    for k, v in frozen_parameters(tr.bundle).items():
        assert torch.equal(v, before[k]), k
    assert any(not torch.equal(v, trainable_before[k]) for k, v in tr.params.items())


def test_optimizer_steps_once_per_accumulation(tensors):
    tr = make_trainer(tensors, small_cfg(grad_accum=3))
    calls = []
    real = tr.optimizer.step
    tr.optimizer.step = lambda *a, **k: (calls.append(tr.micro_step), real(*a, **k))[1]
    for _ in range(7):
        tr.train_step()
    assert calls == [3, 6] and tr.global_step == 2


def test_accumulated_gradient_is_mean_of_micro_gradients(tensors):
    a = make_trainer(tensors, small_cfg(grad_accum=2))
    b = make_trainer(tensors, small_cfg(grad_accum=1))
    batches = [a.next_batch(), a.next_batch()]
    seen_a, seen_b = [], []
    a.optimizer.step = lambda: seen_a.append({k: p.grad.clone() for k, p in a.params.items()})
    b.optimizer.step = lambda: seen_b.append({k: p.grad.clone() for k, p in b.params.items()})
    for batch in batches:
        a.train_step(batch)
        b.train_step(batch)
    assert len(seen_a) == 1 and len(seen_b) == 2
    for k in seen_a[0]:
        expect = (seen_b[0][k] + seen_b[1][k]) / 2
        assert torch.allclose(seen_a[0][k], expect, rtol=1e-5, atol=1e-8), k


def test_ten_steps_deterministic(tensors):
    runs = []
    for _ in range(2):
        tr = make_trainer(tensors)
        for _ in range(10):
            tr.train_step()
        runs.append((params_of(tr), [h["total"] for h in tr.history]))
    assert runs[0][1] == runs[1][1]
    for k in runs[0][0]:
        assert torch.equal(runs[0][0][k], runs[1][0][k]), k


def test_nan_loss_aborts_and_continues(tensors, caplog):
    bad = {"on": True}
    bundle = ModelBundle(ModelConfig())

    def pred(x, t, c):
        out = bundle.predict_eps(x, t, c)
        return out * float("nan") if bad["on"] else out

    tr = Trainer(bundle, small_cfg(), *tensors, eps_predictor=pred)
    before = params_of(tr)
    with caplog.at_level("WARNING"):
        tr.train_step()
    assert tr.skipped == 1 and tr.micro_step == 0
    assert "aborted" in caplog.text
    assert tr.history[-1]["skipped"] is True
    for k, v in params_of(tr).items():
        assert torch.equal(v, before[k])
    assert all(p.grad is None for p in tr.params.values())
    bad["on"] = False
    tr.train_step()
    assert tr.micro_step == 1 and tr.skipped == 1


# ---------------------------------------------------------------- persistence


def test_save_load_save_byte_identical(tensors, tmp_path):
    tr = make_trainer(tensors)
    for _ in range(3):
        tr.train_step()
    p1 = tr.save(tmp_path / "a.safetensors")
    tr2 = load_checkpoint(p1, *tensors)
    p2 = tr2.save(tmp_path / "b.safetensors")
    assert p1.read_bytes() == p2.read_bytes()


def test_resume_matches_unbroken_run(tensors, tmp_path):
    whole = make_trainer(tensors)
    for _ in range(10):
        whole.train_step()

    first = make_trainer(tensors)
    for _ in range(5):
        first.train_step()
    path = first.save(tmp_path / "mid.safetensors")
    resumed = load_checkpoint(path, *tensors)
    for _ in range(5):
        resumed.train_step()

    assert [h["total"] for h in resumed.history] == [h["total"] for h in whole.history]
    a, b = params_of(whole), params_of(resumed)
    for k in a:
        assert torch.equal(a[k], b[k]), k
    for k in whole.ema:
        assert torch.equal(whole.ema[k], resumed.ema[k]), k


def test_resume_rejects_config_mismatch(tensors, tmp_path):
    tr = make_trainer(tensors)
    path = tr.save(tmp_path / "x.safetensors")
    other = make_trainer(tensors, small_cfg(lr=5e-4))
    with pytest.raises(ckpt.CheckpointError, match="config hash"):
        other.load(path)
    with pytest.raises(ckpt.CheckpointError):
        load_checkpoint(path, *tensors, expected_hash="0" * 16)


def test_run_writes_checkpoints_and_ema_bundle(tensors, tmp_path):
    tr = make_trainer(tensors, small_cfg(max_steps=4, checkpoint_every=1), metrics_log=tmp_path / "m.jsonl")
    tr.run(tmp_path / "ck")
    names = sorted(p.name for p in (tmp_path / "ck").iterdir())
    assert names == ["last.safetensors", "step_000000.safetensors", "step_000001.safetensors", "step_000002.safetensors"]
    assert len((tmp_path / "m.jsonl").read_text().splitlines()) == 4
    ema_model = load_bundle(tmp_path / "ck" / "last.safetensors", use_ema=True)
    raw_model = load_bundle(tmp_path / "ck" / "last.safetensors", use_ema=False)
    for name, p in ema_model.named_parameters():
        if name in tr.ema:
            assert torch.equal(p, tr.ema[name])
    assert torch.equal(raw_model.state_dict()["text.pos"], tr.bundle.state_dict()["text.pos"])
