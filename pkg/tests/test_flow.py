"""Flow matching: loss identities, Euler solver, gradient check."""

import numpy as np
import pytest

from paravox.engine import Rng, Tensor, grad_check
from paravox.flow import FlowConfig, SolverConfig, VelocityField, cfm_train_loss, sample_mel, time_features


def tiny_cfg(**kw):
    base = dict(mel_bins=6, feature_dim=8, speaker_dim=4, hidden_dim=16, n_hidden=2, time_feat_dim=4)
    base.update(kw)
    return FlowConfig(**base)


def test_loss_zero_for_perfect_field():
    # Build a field whose output is forced to (mel - x0) by pinning t and x0,
    # then checking against the closed form: loss = mean((v - (mel - x0))^2).
    rng = Rng(0)
    cfg = tiny_cfg()
    field = VelocityField(cfg, rng)
    mel = rng.normal((5, 6))
    feats = rng.normal((5, 8))
    spk = rng.normal((4,))
    t, x0 = 0.37, rng.normal((5, 6))
    loss = cfm_train_loss(field, mel, feats, spk, rng, t=t, x0=x0)
    x_t = (1 - t) * x0 + t * mel
    from paravox.engine import no_grad
    with no_grad():
        v = field(Tensor(x_t), Tensor(feats), Tensor(spk.reshape(1, -1)), t).data
    manual = ((v - (mel - x0)) ** 2).mean()
    assert loss.item() == pytest.approx(manual, rel=1e-6)


def test_one_step_sampler_is_x0_plus_v():
    rng = Rng(1)
    cfg = tiny_cfg()
    field = VelocityField(cfg, rng)
    feats = rng.normal((4, 8))
    spk = rng.normal((4,))
    out = sample_mel(field, feats, spk, SolverConfig(n_steps=1, seed=7))
    x0 = Rng(7).normal((4, 6), dtype=np.float32)
    from paravox.engine import no_grad
    with no_grad():
        v = field(Tensor(x0), Tensor(feats.astype(np.float32)), Tensor(spk.astype(np.float32).reshape(1, -1)), 0.0).data
    assert np.allclose(out, x0 + v, atol=1e-6)


def test_sampler_deterministic_given_seed():
    rng = Rng(2)
    field = VelocityField(tiny_cfg(), rng)
    feats = rng.normal((4, 8))
    spk = rng.normal((4,))
    a = sample_mel(field, feats, spk, SolverConfig(n_steps=8, seed=3))
    b = sample_mel(field, feats, spk, SolverConfig(n_steps=8, seed=3))
    c = sample_mel(field, feats, spk, SolverConfig(n_steps=8, seed=4))
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_vector_field_grad_check():
    rng = Rng(3)
    field = VelocityField(tiny_cfg(), rng, dtype=np.float64)
    mel = rng.normal((3, 6), dtype=np.float64)
    feats = rng.normal((3, 8), dtype=np.float64)
    spk = rng.normal((4,), dtype=np.float64)
    x0 = rng.normal((3, 6), dtype=np.float64)

    def loss():
        return cfm_train_loss(field, mel, feats, spk, rng, t=0.42, x0=x0)

    report = grad_check(loss, field.named_parameters(), tolerance=1e-6)
    assert report.passed, str(report)


def test_conditioning_tensor_receives_gradient():
    rng = Rng(4)
    field = VelocityField(tiny_cfg(), rng)
    mel = rng.normal((3, 6))
    feats = Tensor(rng.normal((3, 8)), requires_grad=True)
    spk = Tensor(rng.normal((1, 4)), requires_grad=True)
    loss = cfm_train_loss(field, mel, feats, spk, rng, t=0.5, x0=np.zeros((3, 6), dtype=np.float32))
    loss.backward()
    assert feats.grad is not None and np.any(feats.grad != 0)
    assert spk.grad is not None and np.any(spk.grad != 0)


def test_time_features_shape_and_distinct():
    a = time_features(0.2, 8)
    b = time_features(0.8, 8)
    assert a.shape == (8,)
    assert not np.allclose(a, b)


def test_solver_rejects_zero_steps():
    rng = Rng(5)
    field = VelocityField(tiny_cfg(), rng)
    with pytest.raises(ValueError, match="n_steps"):
        sample_mel(field, rng.normal((3, 8)), rng.normal((4,)), SolverConfig(n_steps=0))


def test_config_validation():
    with pytest.raises(ValueError, match="time_feat_dim"):
        tiny_cfg(time_feat_dim=5).validate()
    with pytest.raises(ValueError, match="hidden_dim"):
        tiny_cfg(hidden_dim=0).validate()
