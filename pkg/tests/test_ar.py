"""Tests for the dual-stream autoregressive generator."""

import math

import numpy as np
import pytest

from paravox.ar import ARConfig, DualStreamAR, tokens_from_parallel
from paravox.engine import Rng, Tensor, grad_check, gradients, no_grad
from paravox.tokenizer import ParallelTokens


def tiny_config(**kw):
    base = dict(text_vocab=12, streams=(("semantic", 8), ("acoustic", 8)),
                layers_per_stream=1, n_layers=2, model_dim=32, n_heads=2,
                max_text_len=16, max_speech_len=48, top_k=4, seed=0)
    base.update(kw)
    return ARConfig(**base)


def random_example(rng, cfg, n_text=4, n_ref=3, n_tgt=5):
    text = rng.integers(0, cfg.text_vocab, (n_text,))
    shape = (cfg.n_streams, cfg.layers_per_stream)
    ref = np.stack([rng.integers(0, k, (n_ref,) + (cfg.layers_per_stream,))
                    for _, k in cfg.streams], axis=1) if n_ref else \
        np.zeros((0,) + shape, dtype=np.int64)
    tgt = np.stack([rng.integers(0, k, (n_tgt,) + (cfg.layers_per_stream,))
                    for _, k in cfg.streams], axis=1)
    return text, ref, tgt


def test_config_validation():
    with pytest.raises(ValueError, match="streams"):
        ARConfig(streams=()).validate()
    with pytest.raises(ValueError, match="divide evenly"):
        tiny_config(model_dim=33, n_heads=3).validate()
    with pytest.raises(ValueError, match="n_heads"):
        tiny_config(n_heads=5).validate()
    with pytest.raises(ValueError, match="temperature"):
        tiny_config(temperature=0.0).validate()
    tiny_config().validate()


def test_assembly_layout():
    cfg = tiny_config()
    model = DualStreamAR(cfg, Rng(0))
    text, ref, tgt = random_example(Rng(1), cfg)
    asm = model.assemble(text, ref, tgt)
    assert asm.total == 4 + 3 + 5
    assert asm.boundary == 4 + 3 - 1
    assert asm.emb.shape == (12, cfg.model_dim)
    # Empty reference is allowed; boundary falls on the last text state.
    asm0 = model.assemble(text, np.zeros((0, 2, 1), dtype=np.int64), tgt)
    assert asm0.n_ref == 0 and asm0.boundary == 3


def test_assembly_validation():
    cfg = tiny_config()
    model = DualStreamAR(cfg, Rng(0))
    text, ref, tgt = random_example(Rng(1), cfg)
    with pytest.raises(ValueError, match="text ids"):
        model.assemble(np.array([0, cfg.text_vocab]), ref, tgt)
    with pytest.raises(ValueError, match="max_text_len"):
        model.assemble(np.zeros(17, dtype=np.int64), ref, tgt)
    with pytest.raises(ValueError, match="out of range"):
        bad = tgt.copy()
        bad[0, 0, 0] = 8
        model.assemble(text, ref, bad)
    with pytest.raises(ValueError, match="max_speech_len"):
        long = np.zeros((49, 2, 1), dtype=np.int64)
        model.assemble(text, ref, long)


def test_teacher_forced_shapes():
    cfg = tiny_config()
    model = DualStreamAR(cfg, Rng(0))
    text, ref, tgt = random_example(Rng(2), cfg, n_tgt=6)
    stream_logits, stop_logits = model.forward_teacher_forced(text, ref, tgt)
    assert len(stream_logits) == 2 and len(stream_logits[0]) == 1
    for s in range(2):
        assert stream_logits[s][0].shape == (6, 8)
    assert stop_logits.shape == (7,)


def test_causality_is_exact():
    """Changing an input token never changes logits at earlier positions."""
    cfg = tiny_config()
    model = DualStreamAR(cfg, Rng(0))
    rng = Rng(7)
    for _ in range(10):
        text, ref, tgt = random_example(rng, cfg, n_tgt=6)
        with no_grad():
            base = model.forward_states(model.assemble(text, ref, tgt).emb).data
        t_len = tgt.shape[0]
        pos = int(rng.integers(1, t_len))      # frame index to corrupt
        mutated = tgt.copy()
        s = int(rng.integers(0, 2))
        mutated[pos, s, 0] = (mutated[pos, s, 0] + 1) % cfg.streams[s][1]
        assert not np.array_equal(mutated, tgt)
        with no_grad():
            after = model.forward_states(model.assemble(text, ref, mutated).emb).data
        cut = 4 + 3 + pos  # absolute position of the corrupted frame
        assert np.array_equal(base[:cut], after[:cut])
        assert not np.array_equal(base[cut:], after[cut:])
        # States at or past the edit differ, so the block is actually live.
        for si in range(2):
            with no_grad():
                a = model._head_logits(Tensor(base[:cut]), si, 0).data
                b = model._head_logits(Tensor(after[:cut]), si, 0).data
            assert np.array_equal(a, b)


def test_loss_identities():
    """Uniform logits give ln K per stream; total is the exact float sum."""
    cfg = tiny_config()
    model = DualStreamAR(cfg, Rng(0))
    t = 5
    logits = [[Tensor(np.zeros((t, 8), dtype=np.float64))] for _ in range(2)]
    targets = [[np.arange(t) % 8] for _ in range(2)]
    stop_logits = Tensor(np.zeros(t + 1, dtype=np.float64))
    labels = np.zeros(t + 1)
    labels[-1] = 1.0
    out = model.ar_loss(logits, targets, stop_logits, labels)
    assert float(out["L_semantic"].data) == pytest.approx(math.log(8), abs=1e-12)
    assert float(out["L_acoustic"].data) == pytest.approx(math.log(8), abs=1e-12)
    assert float(out["L_stop"].data) == pytest.approx(math.log(2), abs=1e-12)
    exact = float(out["L_semantic"].data) + float(out["L_acoustic"].data)
    exact += float(out["L_stop"].data)
    assert float(out["total"].data) == exact


def test_real_loss_total_is_exact_sum():
    cfg = tiny_config()
    model = DualStreamAR(cfg, Rng(3))
    rng = Rng(4)
    batch = [random_example(rng, cfg, n_tgt=int(rng.integers(2, 7))) for _ in range(3)]
    sl, st, stop_l, stop_t = model.teacher_forced_batch(batch)
    out = model.ar_loss(sl, st, stop_l, stop_t)
    # Accumulate in the loss dtype and order: bitwise-exact identity.
    exact = (out["L_semantic"].data + out["L_acoustic"].data) + out["L_stop"].data
    assert float(out["total"].data) == float(exact)
    for key in ("L_semantic", "L_acoustic", "L_stop", "total"):
        assert np.isfinite(float(out[key].data))


def test_stop_labels_shape():
    cfg = tiny_config()
    model = DualStreamAR(cfg, Rng(0))
    rng = Rng(5)
    batch = [random_example(rng, cfg, n_tgt=3), random_example(rng, cfg, n_tgt=5)]
    _, _, stop_logits, stop_labels = model.teacher_forced_batch(batch)
    assert stop_logits.shape == (4 + 6,)
    expect = np.array([0, 0, 0, 1, 0, 0, 0, 0, 0, 1], dtype=np.float64)
    assert np.array_equal(stop_labels, expect)


def test_batched_matches_single():
    cfg = tiny_config()
    model = DualStreamAR(cfg, Rng(1))
    text, ref, tgt = random_example(Rng(6), cfg, n_tgt=4)
    with no_grad():
        single_logits, single_stop = model.forward_teacher_forced(text, ref, tgt)
        batch_logits, _, batch_stop, _ = model.teacher_forced_batch([(text, ref, tgt)])
    for s in range(2):
        np.testing.assert_allclose(batch_logits[s][0].data, single_logits[s][0].data,
                                   rtol=0, atol=1e-5)
    np.testing.assert_allclose(batch_stop.data, single_stop.data, rtol=0, atol=1e-5)


def test_padding_does_not_leak():
    """A short example's logits are identical whether batched with a long one or alone."""
    cfg = tiny_config()
    model = DualStreamAR(cfg, Rng(2))
    rng = Rng(8)
    short = random_example(rng, cfg, n_tgt=3)
    long = random_example(rng, cfg, n_tgt=9)
    with no_grad():
        alone, _, stop_alone, _ = model.teacher_forced_batch([short])
        both, _, stop_both, _ = model.teacher_forced_batch([short, long])
    for s in range(2):
        np.testing.assert_allclose(both[s][0].data[:3], alone[s][0].data,
                                   rtol=0, atol=1e-5)
    np.testing.assert_allclose(stop_both.data[:4], stop_alone.data, rtol=0, atol=1e-5)


def test_generation_deterministic_and_paired():
    cfg = tiny_config()
    model = DualStreamAR(cfg, Rng(9))
    model.stop_head.bias.data[:] = -25.0  # keep sampling live for 12 frames
    text, ref, _ = random_example(Rng(10), cfg)
    a = model.generate(text, ref, seed=123, max_frames=12)
    b = model.generate(text, ref, seed=123, max_frames=12)
    assert np.array_equal(a.tokens, b.tokens)
    assert a.terminated == b.terminated and a.truncated == b.truncated
    # Streams are emitted jointly: one frame always carries both tokens.
    assert a.stream(0).shape[0] == a.stream(1).shape[0] == a.n_frames


def test_generation_seed_sensitivity():
    cfg = tiny_config()
    model = DualStreamAR(cfg, Rng(9))
    model.stop_head.bias.data[:] = -25.0
    text, ref, _ = random_example(Rng(10), cfg)
    outs = [model.generate(text, ref, seed=s, max_frames=12).tokens for s in range(6)]
    assert any(not np.array_equal(outs[0], o) for o in outs[1:])


def test_greedy_matches_stepwise_oracle():
    """top_k=1 sampling reproduces an independent greedy re-forward loop."""
    cfg = tiny_config()
    model = DualStreamAR(cfg, Rng(11))
    model.stop_head.bias.data[:] = -4.0  # rarely stops; trace stays non-trivial
    text, ref, _ = random_example(Rng(12), cfg)
    got = model.generate(text, ref, seed=0, top_k=1, max_frames=10)

    frames = np.zeros((0, 2, 1), dtype=np.int64)
    terminated = False
    with no_grad():
        for _ in range(10 + 1):
            asm = model.assemble(text, ref, frames if frames.shape[0] else None)
            states = model.forward_states(asm.emb)
            last = states[asm.total - 1:asm.total]
            if float(model.stop_head(last).sigmoid().data.reshape(())) > 0.5:
                terminated = True
                break
            if frames.shape[0] >= 10:
                break
            step = np.zeros((1, 2, 1), dtype=np.int64)
            for s in range(2):
                step[0, s, 0] = int(np.argmax(model._head_logits(last, s, 0).data))
            frames = np.concatenate([frames, step], axis=0)
    assert np.array_equal(got.tokens, frames)
    assert got.terminated == terminated


def test_saturated_stop_yields_empty_generation():
    cfg = tiny_config()
    model = DualStreamAR(cfg, Rng(13))
    model.stop_head.bias.data[:] = 25.0
    text, ref, _ = random_example(Rng(14), cfg)
    out = model.generate(text, ref, seed=0)
    assert out.n_frames == 0 and out.terminated and not out.truncated


def test_suppressed_stop_truncates():
    cfg = tiny_config()
    model = DualStreamAR(cfg, Rng(13))
    model.stop_head.bias.data[:] = -25.0
    text, ref, _ = random_example(Rng(14), cfg)
    out = model.generate(text, ref, seed=0, max_frames=7)
    assert out.n_frames == 7 and out.truncated and not out.terminated
    # Without an explicit cap, generation stops at the position budget.
    full = model.generate(text, ref, seed=0)
    assert full.n_frames == cfg.max_speech_len - ref.shape[0]
    assert full.truncated


def test_merged_single_stream_variant():
    cfg = tiny_config(streams=(("merged", 10),))
    model = DualStreamAR(cfg, Rng(15))
    assert len(model.heads) == 1
    assert model.heads[0].weight.shape == (cfg.model_dim, 10)
    text = np.array([1, 2, 3])
    ref = Rng(16).integers(0, 10, (3, 1, 1))
    tgt = Rng(17).integers(0, 10, (4, 1, 1))
    sl, stop = model.forward_teacher_forced(text, ref, tgt)
    assert sl[0][0].shape == (4, 10)
    out = model.generate(text, ref, seed=1, max_frames=5)
    assert out.tokens.shape[1:] == (1, 1)
    loss = model.ar_loss(*model.teacher_forced_batch([(text, ref, tgt)]))
    assert set(loss) == {"L_merged", "L_stop", "total"}


def test_multi_layer_heads_variant():
    """Three prediction heads per stream emit every quantizer layer at once."""
    cfg = tiny_config(layers_per_stream=3)
    model = DualStreamAR(cfg, Rng(18))
    assert len(model.heads) == 6 and len(model.token_embs) == 6
    rng = Rng(19)
    text, ref, tgt = random_example(rng, cfg, n_tgt=4)
    assert tgt.shape == (4, 2, 3)
    sl, stop = model.forward_teacher_forced(text, ref, tgt)
    assert len(sl[0]) == 3 and sl[1][2].shape == (4, 8)
    out = model.generate(text, ref, seed=2, max_frames=5)
    assert out.tokens.shape[1:] == (2, 3)
    loss = model.ar_loss(*model.teacher_forced_batch([(text, ref, tgt)]))
    assert np.isfinite(float(loss["total"].data))


def test_loss_gradcheck_end_to_end():
    cfg = ARConfig(text_vocab=6, streams=(("semantic", 5), ("acoustic", 5)),
                   n_layers=1, model_dim=8, n_heads=2, max_text_len=8,
                   max_speech_len=12, seed=0)
    model = DualStreamAR(cfg, Rng(20), dtype=np.float64)
    rng = Rng(21)
    text = rng.integers(0, 6, (3,))
    ref = rng.integers(0, 5, (2, 2, 1))
    tgt = rng.integers(0, 5, (3, 2, 1))

    def loss_fn():
        out = model.ar_loss(*model.teacher_forced_batch([(text, ref, tgt)]))
        return out["total"]

    params = dict(model.named_parameters())
    report = grad_check(loss_fn, params, tolerance=1e-4, max_coords=4, rng=Rng(22))
    assert report.passed, str(report)


def test_short_training_reduces_loss():
    cfg = tiny_config(n_layers=1, model_dim=16, n_heads=2)
    model = DualStreamAR(cfg, Rng(23))
    rng = Rng(24)
    batch = [random_example(rng, cfg, n_tgt=4) for _ in range(2)]
    params = list(dict(model.named_parameters()).values())

    def step():
        out = model.ar_loss(*model.teacher_forced_batch(batch))
        loss = out["total"]
        grads = gradients(loss, params)
        for p, g in zip(params, grads):
            p.data -= (0.5 * g).astype(p.data.dtype)
        return float(loss.data)

    first = step()
    last = first
    for _ in range(40):
        last = step()
    assert last < 0.5 * first


def test_tokens_from_parallel():
    sem = np.arange(12).reshape(4, 3) % 8
    ac = (np.arange(12).reshape(4, 3) + 1) % 8
    pair = ParallelTokens(semantic=sem, acoustic=ac)
    top = tokens_from_parallel(pair, layers=1)
    assert top.shape == (4, 2, 1)
    assert np.array_equal(top[:, 0, 0], sem[:, 0])
    assert np.array_equal(top[:, 1, 0], ac[:, 0])
    full = tokens_from_parallel(pair, layers=3)
    assert full.shape == (4, 2, 3)
    assert np.array_equal(full[:, 1], ac)
