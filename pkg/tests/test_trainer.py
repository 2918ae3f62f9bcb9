import csv

import numpy as np
import pytest
import torch

from deaps.model import EncoderConfig, list_checkpoints, load_checkpoint
from deaps.objectives import LossConfig, total_loss
from deaps.sampling import BatchSampler, Corpus
from deaps.trainer import (
    PRESETS,
    TrainConfig,
    deaps_forward,
    ema_update,
    fit,
    init_state,
    preset,
    representation_std,
    restore_state,
    train_step,
)

TINY = EncoderConfig(n_blocks=1, n_heads=2, model_dim=32, hidden_dim=64, out_dim=32, mlp_ratio=2)


def tiny_config(**kw):
    base = dict(iterations=10, batch_size=8, n_selected=8, checkpoint_every=5, encoder=TINY)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def corpus():
    rng = np.random.default_rng(0)
    t = np.arange(15000) / 100
    arrays = {}
    for sid in range(3):
        f = 1 + 0.3 * sid
        arrays[sid] = [np.sin(2 * np.pi * f * t + r) + 0.1 * rng.standard_normal(t.size) for r in range(2)]
    return Corpus.from_arrays(arrays)


def params(net):
    return {k: v.detach().clone() for k, v in net.named_parameters()}


def test_ema_examples():
    assert ema_update(torch.tensor(2.0, dtype=torch.float64), torch.tensor(1.0, dtype=torch.float64), 0.995).item() == pytest.approx(1.995, abs=1e-12)
    x = torch.randn(5)
    torch.testing.assert_close(ema_update(x, x, 0.9), x)
    y = torch.randn(5)
    assert torch.equal(ema_update(x, y, 0.0), y)
    with pytest.raises(ValueError):
        ema_update(torch.zeros(3), torch.zeros(4), 0.5)


def test_ema_geometric_decay():
    xi0 = torch.randn(20, dtype=torch.float64)
    theta = torch.randn(20, dtype=torch.float64)
    xi = xi0.clone()
    for _ in range(10):
        xi = ema_update(xi, theta, 0.995)
    expected = 0.995**10 * (xi0 - theta).abs()
    assert torch.max(torch.abs((xi - theta).abs() - expected)).item() < 1e-10


def test_ema_module_shape_mismatch():
    a = init_state(tiny_config()).student
    b = init_state(tiny_config(encoder=EncoderConfig(n_blocks=1, n_heads=2, model_dim=16, hidden_dim=64, out_dim=32, mlp_ratio=2))).student
    with pytest.raises(ValueError):
        ema_update(a.make_teacher(), b, 0.5)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(tau=1.5)
    with pytest.raises(ValueError):
        TrainConfig(method="simclr")
    with pytest.raises(ValueError):
        TrainConfig(n_selected=0)
    with pytest.raises(ValueError):
        preset("huge")


def test_config_roundtrip_and_hash():
    cfg = tiny_config(seed=3)
    again = TrainConfig.from_dict(cfg.to_dict())
    assert again == cfg and again.hash() == cfg.hash()
    assert tiny_config(seed=4).hash() != cfg.hash()


def test_presets():
    assert PRESETS["paper"].iterations == 30000 and PRESETS["paper"].batch_size == 256
    assert PRESETS["paper"].lr == 3e-4 and PRESETS["paper"].weight_decay == 1.5e-6 and PRESETS["paper"].tau == 0.995
    smoke = preset("smoke")
    assert (smoke.iterations, smoke.batch_size, smoke.encoder.model_dim, smoke.encoder.n_blocks) == (2000, 32, 64, 3)


def test_init_teacher_is_copy():
    state = init_state(tiny_config())
    sp = dict(state.student.named_parameters())
    for name, p in state.teacher.named_parameters():
        assert torch.max(torch.abs(p - sp[name])).item() == 0
    assert not any(p.requires_grad for p in state.teacher.parameters())
    assert state.teacher.predictors is None


def test_init_deterministic_in_seed():
    a, b, c = (init_state(tiny_config(seed=s)).student for s in (1, 1, 2))
    assert all(torch.equal(x, y) for x, y in zip(a.parameters(), b.parameters()))
    assert any(not torch.equal(x, y) for x, y in zip(a.parameters(), c.parameters()))


def test_optimizer_covers_student_only():
    state = init_state(tiny_config())
    opt_ids = {id(p) for g in state.optimizer.param_groups for p in g["params"]}
    assert opt_ids == {id(p) for p in state.student.parameters()}
    assert opt_ids.isdisjoint(id(p) for p in state.teacher.parameters())
    no_decay = {id(p) for p in state.optimizer.param_groups[1]["params"]}
    assert id(state.student.encoder.pos_embed) in no_decay
    assert id(state.student.encoder.blocks[0].qkv.bias) in no_decay
    assert id(state.student.encoder.blocks[0].qkv.weight) not in no_decay


def test_contrastive_state_has_no_teacher():
    state = init_state(tiny_config(method="contrastive"))
    assert state.teacher is None and not state.student.has_predictors


def test_train_step_tau_one_freezes_teacher(corpus):
    state = init_state(tiny_config(tau=1.0))
    before = params(state.teacher)
    student_before = params(state.student)
    state, _ = train_step(state, BatchSampler(corpus, 8, 0).next_batch())
    assert all(torch.equal(before[k], v) for k, v in params(state.teacher).items())
    assert any(not torch.equal(student_before[k], v) for k, v in params(state.student).items())
    assert state.iteration == 1


def test_train_step_deterministic(corpus):
    batch = BatchSampler(corpus, 8, 0).next_batch()
    a, ba = train_step(init_state(tiny_config()), batch)
    b, bb = train_step(init_state(tiny_config()), batch)
    assert ba == bb
    for (n, p), (_, q) in zip(a.student.named_parameters(), b.student.named_parameters()):
        assert torch.equal(p, q), n


def test_train_step_one_adam_one_ema(corpus):
    """Replays a single step by hand: Adam update from the same loss, then EMA."""
    cfg = tiny_config()
    batch = BatchSampler(corpus, 8, 1).next_batch()
    ref = init_state(cfg)
    state = init_state(cfg)

    out = deaps_forward(ref.student, ref.teacher, batch)
    loss, expected = total_loss(out, cfg.loss_config())
    ref.optimizer.zero_grad()
    loss.backward()
    ref.optimizer.step()
    teacher0 = params(state.teacher)

    state, breakdown = train_step(state, batch)
    assert abs(breakdown.total - expected.total) < 1e-8
    assert abs(breakdown.total - (breakdown.l_sim + breakdown.l_gra + 0.1 * breakdown.l_cov)) < 1e-6
    for (n, p), (_, q) in zip(state.student.named_parameters(), ref.student.named_parameters()):
        torch.testing.assert_close(p, q, atol=0, rtol=0)
    student = dict(state.student.named_parameters())
    for n, p in state.teacher.named_parameters():
        torch.testing.assert_close(p, 0.995 * teacher0[n] + 0.005 * student[n])
    assert all(s["step"].item() == 1 for s in state.optimizer.state.values())


def test_overfit_fixed_batch(corpus):
    state = init_state(tiny_config(lr=1e-3))
    batch = BatchSampler(corpus, 8, 2).next_batch()
    losses = []
    for _ in range(50):
        state, br = train_step(state, batch)
        losses.append(br.total)
    assert np.mean(losses[-5:]) < np.mean(losses[:5])


def test_nonfinite_loss_aborts(corpus, tmp_path):
    state = init_state(tiny_config())
    batch = BatchSampler(corpus, 8, 0).next_batch()
    batch.x1[:] = np.nan
    with pytest.raises(FloatingPointError, match="non-finite"):
        train_step(state, batch)


def _log_rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_fit_log_and_checkpoints(corpus, tmp_path):
    ckpt = fit(tiny_config(), corpus, tmp_path)
    rows = _log_rows(tmp_path / "loss_log.csv")
    assert len(rows) == 10
    assert list(rows[0]) == ["iter", "l_sim", "l_gra", "l_cov", "total"]
    assert [int(r["iter"]) for r in rows] == list(range(1, 11))
    assert [p.name for p in list_checkpoints(tmp_path)] == ["ckpt_000005.pt", "ckpt_000010.pt"]
    assert ckpt.name == "ckpt_000010.pt"
    _, meta = load_checkpoint(ckpt)
    assert meta["iteration"] == 10 and meta["seed"] == 0 and meta["config_hash"] == tiny_config().hash()
    assert (tmp_path / "config.json").exists()


def test_resume_matches_straight_run(corpus, tmp_path):
    cfg = tiny_config(iterations=10, checkpoint_every=100)
    straight = fit(cfg, corpus, tmp_path / "straight")
    partial = fit(cfg, corpus, tmp_path / "resumed", stop_at=5)
    assert partial.name == "ckpt_000005.pt"
    resumed = fit(cfg, corpus, tmp_path / "resumed", resume=partial)
    a, _ = load_checkpoint(straight)
    b, _ = load_checkpoint(resumed)
    for key in ("student", "teacher"):
        for name in a[key]:
            assert torch.equal(a[key][name], b[key][name]), (key, name)
    assert _log_rows(tmp_path / "straight" / "loss_log.csv") == _log_rows(tmp_path / "resumed" / "loss_log.csv")


def test_prefetch_matches_inline(corpus, tmp_path):
    a = fit(tiny_config(iterations=4), corpus, tmp_path / "a")
    b = fit(tiny_config(iterations=4, prefetch=2), corpus, tmp_path / "b")
    pa, pb = load_checkpoint(a)[0], load_checkpoint(b)[0]
    assert all(torch.equal(pa["student"][k], pb["student"][k]) for k in pa["student"])


def test_restore_state(corpus, tmp_path):
    ckpt = fit(tiny_config(iterations=5), corpus, tmp_path)
    state, payload = restore_state(ckpt)
    assert state.iteration == 5
    assert torch.equal(state.student.encoder.pos_embed, payload["student"]["encoder.pos_embed"])


@pytest.mark.parametrize("method", ["byol", "contrastive"])
def test_fit_baselines(corpus, tmp_path, method):
    fit(tiny_config(method=method, iterations=3), corpus, tmp_path)
    rows = _log_rows(tmp_path / "loss_log.csv")
    assert len(rows) == 3
    assert all(float(r["l_gra"]) == 0 for r in rows)


def test_representation_std(corpus):
    state = init_state(tiny_config())
    batch = BatchSampler(corpus, 8, 0).next_batch()
    sd = representation_std(state.student, batch.x_t)
    assert sd.shape == (32,) and np.all(sd > 1e-3)
    assert state.student.training


def test_loss_config_from_train_config():
    assert tiny_config(alpha=0.2).loss_config() == LossConfig(alpha=0.2, n_selected=8, proj_dim=32)
