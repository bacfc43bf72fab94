import math

import numpy as np
import pytest
import torch

from acid.evaluation import auc
from acid.model import ACID, ModelConfig
from acid.synthgen import TEST_SEED_RANGE, ConfigError, ConfigSpace, balanced_corpus
from acid.trainer import (
    AdamState,
    NumericalError,
    TrainConfig,
    Trainer,
    adam_step,
    bce_loss,
    clip_grad_norm,
    finetune,
    grad_step,
    micro_batch_size,
    predict,
)

from oracles import adam_scalar

TINY = ModelConfig(e=4, h=2, L=1)
SPACE = ConfigSpace(n=(20,), dz=(1, 2))


def _cfg(**kw):
    base = dict(steps=3, batch_size=4, lr=1e-3, config_space=SPACE, telemetry_every=1, checkpoint_every=0, seed=1)
    return TrainConfig(**{**base, **kw})


def test_bce_examples():
    assert abs(float(bce_loss(torch.zeros(3), [0, 1, 1])) - math.log(2)) < 1e-7
    assert float(bce_loss(torch.tensor([20.0], dtype=torch.float64), [1])) < 1e-8


def test_bce_matches_naive_formula():
    g = torch.Generator().manual_seed(0)
    logits = torch.randn(50, generator=g, dtype=torch.float64) * 3
    labels = torch.randint(0, 2, (50,), generator=g).double()
    p = 1 / (1 + torch.exp(-logits))
    naive = -(labels * torch.log(p) + (1 - labels) * torch.log(1 - p)).mean()
    assert abs(float(bce_loss(logits, labels)) - float(naive)) < 1e-10


def test_bce_shape_mismatch():
    with pytest.raises(ValueError):
        bce_loss(torch.zeros(3), [0, 1])


def test_adam_zero_gradient_leaves_params():
    w = torch.tensor([1.0, -2.0])
    adam_step({"w": w}, {"w": torch.zeros(2)}, AdamState(), lr=0.1)
    assert w.tolist() == [1.0, -2.0]


def test_adam_first_step_is_signed_lr():
    w = torch.zeros(3, dtype=torch.float64)
    adam_step({"w": w}, {"w": torch.tensor([5.0, -3.0, 0.2], dtype=torch.float64)}, AdamState(), lr=0.01)
    np.testing.assert_allclose(w.numpy(), [-0.01, 0.01, -0.01], rtol=1e-6)


@pytest.mark.parametrize("seed", range(20))
def test_adam_matches_scalar_reference(seed):
    rng = np.random.default_rng(seed)
    w0, lr, steps = float(rng.normal()), float(rng.uniform(1e-3, 0.1)), int(rng.integers(1, 10))
    w = torch.tensor([w0], dtype=torch.float64)
    st = AdamState()
    for _ in range(steps):
        adam_step({"w": w}, {"w": 2 * w.clone()}, st, lr=lr)
    assert abs(w.item() - adam_scalar(w0, lambda v: 2 * v, steps, lr)) < 1e-12


def test_clip_grad_norm():
    grads = {"a": torch.tensor([3.0]), "b": torch.tensor([4.0])}
    assert clip_grad_norm(grads, 1.0) == 5.0
    assert abs(math.hypot(grads["a"].item(), grads["b"].item()) - 1.0) < 1e-6


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(lr=0)
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    cfg = _cfg()
    assert TrainConfig.from_dict(cfg.to_dict()).to_dict() == cfg.to_dict()


def test_one_step_smoke():
    model = ACID(TINY, seed=0)
    tr = Trainer(model, _cfg(batch_size=1, steps=1))
    loss = tr.train_on(tr.stream.batch(1))
    assert math.isfinite(loss)
    assert all(torch.isfinite(p.grad).all() for p in model.parameters() if p.grad is not None)
    assert tr.log[-1]["step"] == 1


def test_initial_probe_loss_near_ln2():
    model = ACID(ModelConfig(e=32, h=8, L=4), seed=0)
    probe = balanced_corpus(ConfigSpace(n=(30,), dz=(3,)), 32, seed=0)
    loss = float(bce_loss(torch.tensor(predict(model, probe)), [d.label for d in probe]))
    assert 0.6 <= loss <= 0.8


def test_training_is_reproducible_in_float64():
    traces = []
    for _ in range(2):
        model = ACID(TINY, seed=0).double()
        log = Trainer(model, _cfg(steps=4)).run()
        traces.append([r["loss"] for r in log])
    assert traces[0] == traces[1]


def test_telemetry_fields():
    log = Trainer(ACID(TINY, seed=0), _cfg(steps=2, batch_size=8)).run()
    rec = log[-1]
    assert set(rec) == {"step", "loss", "running_auc", "h0_logit_mean", "h1_logit_mean", "wallclock_ms"}


def test_telemetry_mirrors_to_jsonl(tmp_path):
    Trainer(ACID(TINY, seed=0), _cfg(steps=2), log_path=tmp_path / "log.jsonl").run()
    assert len((tmp_path / "log.jsonl").read_text().splitlines()) == 2


def test_training_never_uses_test_seeds():
    tr = Trainer(ACID(TINY, seed=0), _cfg(steps=5), forbidden_seed_ranges=[TEST_SEED_RANGE])
    tr.run()
    lo, hi = TEST_SEED_RANGE
    assert tr.stream.seeds_used and not any(lo <= s < hi for s in tr.stream.seeds_used)
    with pytest.raises(ConfigError):
        Trainer(ACID(TINY), _cfg(seed_range=(2**31 - 10, 2**31 + 10)), forbidden_seed_ranges=[TEST_SEED_RANGE])


def test_nonfinite_loss_aborts_with_context(tmp_path):
    model = ACID(TINY, seed=0)
    with torch.no_grad():
        model.classifier.b2.fill_(float("inf"))
    tr = Trainer(model, _cfg(), checkpoint_path=tmp_path / "c.ckpt")
    with pytest.raises(NumericalError) as err:
        tr.run(1)
    assert err.value.step == 1 and err.value.seeds


def test_micro_batching_matches_full_batch(monkeypatch):
    import acid.trainer as T

    model = ACID(TINY, seed=2).double()
    for mod in model.modules():
        if hasattr(mod, "rate"):
            mod.rate = 0.0
    data = Trainer(model, _cfg()).stream.batch(6)
    loss_full, _ = grad_step(model, data)
    full = [None if p.grad is None else p.grad.clone() for p in model.parameters()]
    for p in model.parameters():
        p.grad = None
    monkeypatch.setattr(T, "MICRO_BATCH_BUDGET", 1)  # one dataset per chunk
    assert micro_batch_size(data[0], TINY.h) == 1
    loss_chunked, _ = grad_step(model, data)
    assert abs(loss_full - loss_chunked) < 1e-12
    for g, p in zip(full, model.parameters()):
        assert (g is None) == (p.grad is None)
        if g is not None:
            assert torch.allclose(g, p.grad, atol=1e-12)


def test_probe_loss_drops_after_training():
    space = ConfigSpace(n=(20,), dz=(1,), models=("M3", "M4"))
    probe = balanced_corpus(space, 64, seed=5)
    labels = [d.label for d in probe]
    model = ACID(TINY, seed=0)
    before = float(bce_loss(torch.tensor(predict(model, probe)), labels))
    Trainer(model, _cfg(steps=2000, batch_size=8, config_space=space, telemetry_every=0)).run()
    after = float(bce_loss(torch.tensor(predict(model, probe)), labels))
    assert after < before


def test_finetune_zero_steps_is_identity():
    model = ACID(TINY, seed=0)
    before = [p.clone() for p in model.parameters()]
    corpus = balanced_corpus(SPACE, 8, seed=0)
    finetune(model, corpus, _cfg(steps=0))
    assert all(torch.equal(a, b) for a, b in zip(before, model.parameters()))


def test_finetune_rejects_unlabeled():
    corpus = balanced_corpus(SPACE, 4, seed=0)
    corpus[0].label = None
    with pytest.raises(ConfigError):
        finetune(ACID(TINY), corpus, _cfg())


def test_finetune_improves_shifted_auc():
    shifted = ConfigSpace(n=(60,), dz=(1,), models=("M3", "M4"), linear=True, noise_scale=1.0)
    corpus = balanced_corpus(shifted, 64, seed=0, seed_range=(0, 2**31))
    held = balanced_corpus(shifted, 100, seed=1)
    labels = [d.label for d in held]
    model = ACID(TINY, seed=0)
    before = auc(predict(model, held), labels)
    finetune(model, corpus, _cfg(steps=500, batch_size=8, telemetry_every=0), down_sample=50)
    assert auc(predict(model, held), labels) > before
