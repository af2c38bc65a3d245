import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from geoflow import geometry as geo
from geoflow import net as N
from geoflow import train as T
from geoflow.errors import ConfigError, DataError
from geoflow.synth import default_mixture

TOY = N.NetConfig(embed_dim=3, hidden_dim=16, depth=1, gate_heads=2, rff_features=16)


def _full_scale():
    return T.TrainConfig()


def test_full_scale_defaults():
    c = _full_scale()
    assert (c.lr, c.weight_decay, c.grad_clip, c.warmup_steps, c.total_steps, c.batch_size) == (
        6e-4, 1e-3, 1.0, 4000, 120_000, 8192)
    assert c.p_uncond == 0.10 and c.curriculum.p_joint_target == 0.40
    assert (c.validation.every, c.validation.batches, c.validation.patience) == (2000, 5, 100)
    assert c.validation.min_rel_improve == 0.005 and c.validation.min_abs_improve == 1e-6


def test_config_errors():
    with pytest.raises(ConfigError):
        T.TrainConfig(lr=-1)
    with pytest.raises(ConfigError):
        T.TrainConfig(warmup_steps=10, total_steps=5)
    with pytest.raises(ConfigError):
        T.TrainConfig.from_dict({"lr": 1e-3, "bogus": 1})
    with pytest.raises(ConfigError):
        T.TrainConfig.from_dict({"curriculum": {"phase3_frac": 0.1}})
    c = T.TrainConfig.from_dict({"curriculum": {"phase1_frac": 0.2, "phase2_frac": 0.1, "p_joint_target": 0.4}})
    assert c.curriculum.phase1_frac == 0.2
    assert T.TrainConfig.from_dict(c.to_dict()) == c


def test_mask_probability_schedule():
    c = _full_scale()
    end1 = 0.15 * c.total_steps
    end2 = 0.30 * c.total_steps
    assert T.mask_probability(0, c) == (0.0, 0.5, 0.5)
    assert T.mask_probability(int(end2), c) == pytest.approx((0.40, 0.30, 0.30))
    assert T.mask_probability(int((end1 + end2) / 2), c) == pytest.approx((0.20, 0.40, 0.40))
    assert T.mask_probability(c.total_steps - 1, c) == pytest.approx((0.40, 0.30, 0.30))


@given(st.integers(0, 120_000))
def test_mask_probabilities_sum_to_one(step):
    p = T.mask_probability(step, _full_scale())
    assert min(p) >= 0 and sum(p) == pytest.approx(1.0, abs=1e-15)


def test_sample_kinds_frequencies(rng):
    kinds = T.sample_kinds(60_000, (0.4, 0.3, 0.3), rng=rng).numpy()
    freq = np.bincount(kinds, minlength=3) / kinds.size
    assert np.allclose(freq, (0.4, 0.3, 0.3), atol=0.01)
    assert not np.any(T.sample_kinds(1000, (0.0, 0.5, 0.5), rng=rng).numpy() == 0)


def test_sample_times(rng):
    ti, tt = T.sample_times(geo.JOINT, rng)
    assert ti == tt
    ti, tt = T.sample_times(geo.I2T, rng)
    assert ti == 0.0 and 0 <= tt <= 1
    ti, tt = T.sample_times(geo.T2I, rng)
    assert tt == 0.0 and 0 <= ti <= 1
    ti, tt = T.sample_times(geo.JOINT, rng, n=100_000)
    assert abs(ti.mean().item() - 0.5) < 0.01
    kinds = torch.tensor([0, 1, 2, 1])
    ti, tt = T.sample_times(kinds, None, uniforms=[0.3, 0.4, 0.5, 0.6])
    assert ti.tolist() == [0.3, 0.0, 0.5, 0.0] and tt.tolist() == [0.3, 0.4, 0.0, 0.6]


def test_lr_schedule():
    c = _full_scale()
    assert T.lr_at(0, c) == 0.0
    assert T.lr_at(c.warmup_steps, c) == pytest.approx(6e-4)
    assert T.lr_at(c.warmup_steps // 2, c) == pytest.approx(3e-4)
    assert T.lr_at(c.total_steps, c) == pytest.approx(0.0, abs=1e-18)
    mid = (c.warmup_steps + c.total_steps) // 2
    assert T.lr_at(mid, c) == pytest.approx(3e-4)


def test_cfg_dropout_swaps_only_conditioner(rng):
    z0 = torch.from_numpy(rng.standard_normal((6, 6)))
    z1 = torch.from_numpy(rng.standard_normal((6, 6)))
    kinds = torch.tensor([0, 1, 2, 0, 1, 2])
    out, drop = T.apply_cfg_dropout(z0, z1, kinds, 0.5, uniforms=[0.1, 0.1, 0.1, 0.9, 0.9, 0.9])
    assert drop.tolist() == [False, True, True, False, False, False]
    assert torch.equal(out[0], z1[0])
    assert torch.equal(out[1, :3], z0[1, :3]) and torch.equal(out[1, 3:], z1[1, 3:])
    assert torch.equal(out[2, 3:], z0[2, 3:]) and torch.equal(out[2, :3], z1[2, :3])
    assert torch.equal(out[3:], z1[3:])


def test_early_stopping_rules():
    s = T.EarlyStopping(3, 1e-6, 0.005)
    for v in np.linspace(1.0, 0.1, 20):
        assert s.update(float(v)) == (True, False)
    s = T.EarlyStopping(3, 1e-6, 0.005)
    results = [s.update(0.5) for _ in range(4)]
    assert results[-1] == (False, True) and not any(r[1] for r in results[:-1])
    s = T.EarlyStopping(3, 1e-6, 0.005)
    s.update(1e-4)
    improved, _ = s.update(1e-4 * (1 - 0.004))
    assert not improved
    s.update(1e-4 * (1 - 0.004) * (1 - 0.006))
    assert s.bad_count == 0
    s.reset()
    assert math.isinf(s.best) and s.bad_count == 0


def _toy_config(**kw):
    base = dict(lr=3e-3, warmup_steps=5, total_steps=10, batch_size=32,
                validation=T.ValidationConfig(every=5, batches=1, patience=5))
    base.update(kw)
    return T.TrainConfig(**base)


def test_bitwise_deterministic_trace():
    mix = default_mixture()
    traces = []
    for _ in range(2):
        net = N.VelocityNet(TOY, seed=0)
        res = T.train(net, mix.sampler(), _toy_config(log_every=1))
        traces.append([m["loss"] for m in res.history])
    assert len(traces[0]) == 10 and traces[0] == traces[1]


def test_train_writes_metrics_and_checkpoint(tmp_path, rng):
    data = default_mixture().sample(200, rng)[0]
    net = N.VelocityNet(TOY, seed=0)
    res = T.train(net, data, _toy_config(log_every=2), checkpoint_path=tmp_path / "best.ckpt",
                  metrics_path=tmp_path / "m.csv", header_comment="run=x")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "# run=x" and lines[1] == ",".join(T.METRIC_COLUMNS)
    back, header = N.load_checkpoint(tmp_path / "best.ckpt")
    assert header["extra"]["step"] == res.best_step
    z = data[:4]
    assert torch.equal(back(z, 0.5, 0.5, 0), res.net(z, 0.5, 0.5, 0))
    with pytest.raises(DataError):
        T.train(N.VelocityNet(TOY, seed=0), data[:, :4], _toy_config())


def test_only_joint_rows_are_coupled(rng):
    config = _toy_config()
    z0 = geo.uniform_product(40, 3, rng)
    z1 = torch.from_numpy(default_mixture().sample(40, rng)[0])
    kinds = torch.from_numpy(rng.integers(0, 3, 40))
    out = T.couple_joint_rows(z0, z1, kinds, config)
    cond = kinds != 0
    assert torch.equal(out[cond], z1[cond])
    joint = ~cond
    rows = {tuple(r) for r in z1[joint].tolist()}
    assert {tuple(r) for r in out[joint].tolist()} == rows
    cost = lambda a, b: geo.geodesic_distance(a[:, :3], b[:, :3]).pow(2) + geo.geodesic_distance(a[:, 3:], b[:, 3:]).pow(2)
    assert cost(z0[joint], out[joint]).sum() <= cost(z0[joint], z1[joint]).sum()


def test_validation_set_is_fixed():
    config = _toy_config()
    a = T.ValidationSet.build(default_mixture().sampler(), config, 3)
    b = T.ValidationSet.build(default_mixture().sampler(), config, 3)
    assert torch.equal(a.z0, b.z0) and torch.equal(a.z1, b.z1)
    net = N.VelocityNet(TOY, seed=0)
    assert a.loss(net, 0, config) == a.loss(net, 0, config)


def test_joint_only_reduces_to_plain_cfm(rng):
    # p_uncond = 0 and an all-joint curriculum: the step loss equals the unmasked CFM loss
    config = _toy_config(p_uncond=0.0, curriculum=T.CurriculumConfig(0.0, 0.0, 1.0))
    net = N.VelocityNet(TOY, seed=0)
    z1 = torch.from_numpy(default_mixture().sample(32, rng)[0])
    opt = T.make_optimizer(net, config)
    m = T.training_step(net, opt, z1, 0, config, np.random.default_rng(4))
    replay = np.random.default_rng(4)
    z0 = geo.uniform_product(32, 3, replay)
    kinds = T.sample_kinds(32, (1.0, 0.0, 0.0), rng=replay)
    t = torch.from_numpy(replay.random(32))
    z1c = T.couple_joint_rows(z0, z1, kinds, config)
    tgt = geo.masked_target(z0, z1c, geo.MaskKind.JOINT, t, t)
    assert m["loss"] == pytest.approx(tgt.pow(2).sum(-1).mean().item(), rel=1e-12)


def test_loss_halves_on_synthetic_oracle():
    config = _toy_config(total_steps=400, warmup_steps=40, batch_size=64, lr=5e-3,
                         validation=T.ValidationConfig(every=100, batches=2, patience=5))
    net = N.VelocityNet(N.NetConfig(hidden_dim=32, depth=1, rff_features=32), seed=0)
    val = T.ValidationSet.build(default_mixture().sampler(), config, 3)
    initial = val.loss(net, config.total_steps, config)
    T.train(net, default_mixture().sampler(), config)
    assert val.loss(net, config.total_steps, config) < 0.5 * initial
