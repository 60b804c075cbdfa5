from __future__ import annotations

import math

import numpy as np
import pytest

import streamvit.autodiff as ad
from streamvit.autodiff import Parameter, Tape, Tensor, backward
from streamvit.backbone import (
    Backbone,
    VideoClip,
    bidirectional_temporal_attention,
    causal_mask,
    causal_temporal_attention,
    ffn,
    spatial_attention_lora,
)
from streamvit.config import ModelConfig, preset
from streamvit.errors import CapacityError, ConfigError, InputError, NormalizationError, ShapeError, StateError, UsageError

from conftest import random_clip, randomize
from oracles import gradcheck, mlp, patch_tokens, softmax_rows, spatial_block, two_pass_layer_norm


# ---------------------------------------------------------------------------
# configuration


def test_desk_preset_defaults():
    cfg = preset("desk")
    assert (cfg.image_size, cfg.patch_size, cfg.d_model, cfg.n_layers, cfg.n_heads) == (32, 8, 64, 4, 4)
    assert (cfg.lora_rank, cfg.max_frames, cfg.proj_dim, cfg.ffn_mult) == (8, 512, 32, 4)
    assert cfg.n_tokens == 16


def test_base_preset_is_available():
    cfg = preset("base")
    assert (cfg.patch_size, cfg.n_layers, cfg.lora_rank) == (16, 12, 32)


@pytest.mark.parametrize(
    "bad",
    [
        dict(image_size=30),  # not divisible by the patch
        dict(n_heads=5),  # d_model not divisible
        dict(lora_rank=0),
        dict(lora_rank=64),
        dict(temporal_mode="sideways"),
        dict(dtype="float16"),
    ],
)
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        ModelConfig(**bad)


def test_config_dict_round_trip():
    cfg = ModelConfig(d_model=32, temporal_mode="bidirectional", dtype="float64")
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


# ---------------------------------------------------------------------------
# patchify


def test_patchify_zero_clip_gives_position_tables(tiny_config):
    bb = Backbone(tiny_config, seed=1)
    bb.patch_w.data[:] = 0
    z = bb.patchify(np.zeros((3, 16, 16, 3), np.float32)).data
    expected = bb.pos_spatial.data[None] + bb.pos_temporal.data[:3, None]
    np.testing.assert_array_equal(z, expected)


def test_patchify_is_per_frame(tiny_config, rng):
    bb = Backbone(tiny_config, seed=1)
    a = random_clip(rng, 4, 16)
    b = a.copy()
    b[2] = rng.random((16, 16, 3))
    za, zb = bb.patchify(a).data, bb.patchify(b).data
    changed = np.abs(za - zb).max(axis=(1, 2)) > 0
    assert changed.tolist() == [False, False, True, False]


def test_patchify_token_count():
    bb = Backbone(preset("desk"), seed=0)
    assert bb.patchify(np.zeros((1, 32, 32, 3), np.float32)).shape == (1, 16, 64)


def test_patchify_matches_patch_oracle(tiny_config, rng):
    bb = Backbone(tiny_config, seed=2)
    clip = random_clip(rng, 2, 16)
    z = bb.patchify(clip).data
    for t in range(2):
        ref = patch_tokens(clip[t], 8) @ bb.patch_w.data + bb.patch_b.data + bb.pos_spatial.data + bb.pos_temporal.data[t]
        np.testing.assert_allclose(z[t], ref, atol=1e-5)


def test_patchify_capacity(tiny_config):
    bb = Backbone(tiny_config.replace(max_frames=4), seed=0)
    with pytest.raises(CapacityError):
        bb.patchify(np.zeros((5, 16, 16, 3), np.float32))


@pytest.mark.parametrize("shape", [(2, 16, 16, 4), (2, 16, 12, 3), (16, 16, 3)])
def test_clip_validation(shape):
    with pytest.raises(InputError):
        VideoClip(np.zeros(shape))


def test_clip_range_validation():
    with pytest.raises(InputError):
        VideoClip(np.full((1, 16, 16, 3), 1.5))


# ---------------------------------------------------------------------------
# temporal attention


def test_causal_mask_rows():
    m = causal_mask(3)
    assert m.tolist() == [[0, -np.inf, -np.inf], [0, 0, -np.inf], [0, 0, 0]]


def _time_params(bb: Backbone, layer: int = 0):
    return bb.blocks[layer].time


def test_zero_gate_is_identity(tiny_config, rng):
    bb = Backbone(tiny_config, seed=0)
    z = Tensor(rng.standard_normal((5, 4, 16)).astype(np.float32))
    for op in (causal_temporal_attention, bidirectional_temporal_attention):
        np.testing.assert_array_equal(op(z, _time_params(bb), 2).data, z.data)


def test_single_frame_attends_to_itself(tiny_config64, rng):
    bb = randomize(Backbone(tiny_config64, seed=0), rng)
    p = _time_params(bb)
    z = rng.standard_normal((1, 4, 16))
    out = causal_temporal_attention(Tensor(z), p, 2).data
    h = two_pass_layer_norm(z, p.ln_g.data, p.ln_b.data)
    ref = z + math.tanh(float(p.gate.data)) * (h @ p.wv.data) @ p.wo.data
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_causal_attention_matches_loop_oracle(tiny_config64, rng):
    bb = randomize(Backbone(tiny_config64, seed=3), rng)
    p = _time_params(bb)
    T, hw, d, H = 4, 4, 16, 2
    dh = d // H
    z = rng.standard_normal((T, hw, d))
    out = causal_temporal_attention(Tensor(z), p, H).data
    h = two_pass_layer_norm(z, p.ln_g.data, p.ln_b.data)
    q, k, v = h @ p.wq.data, h @ p.wk.data, h @ p.wv.data
    ref = np.empty_like(z)
    for s in range(hw):
        heads = []
        for i in range(H):
            sl = slice(i * dh, (i + 1) * dh)
            rows = []
            for t in range(T):
                w = softmax_rows(q[t, s, sl] @ k[: t + 1, s, sl].T / math.sqrt(dh))
                rows.append(w @ v[: t + 1, s, sl])
            heads.append(np.stack(rows))
        ref[:, s] = np.concatenate(heads, -1) @ p.wo.data
    ref = z + math.tanh(float(p.gate.data)) * ref
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_bidirectional_equals_causal_at_one_frame(tiny_config, rng):
    bb = randomize(Backbone(tiny_config, seed=0), rng)
    z = Tensor(rng.standard_normal((1, 4, 16)).astype(np.float32))
    p = _time_params(bb)
    np.testing.assert_array_equal(
        causal_temporal_attention(z, p, 2).data, bidirectional_temporal_attention(z, p, 2).data
    )


def test_bidirectional_sees_the_future(tiny_config, rng):
    bb = randomize(Backbone(tiny_config, seed=0), rng)
    p = _time_params(bb)
    z = rng.standard_normal((2, 4, 16)).astype(np.float32)
    z2 = z.copy()
    z2[1] = rng.standard_normal((4, 16))
    bi = lambda x: bidirectional_temporal_attention(Tensor(x), p, 2).data[0]
    ca = lambda x: causal_temporal_attention(Tensor(x), p, 2).data[0]
    assert np.abs(bi(z) - bi(z2)).max() > 1e-4
    np.testing.assert_array_equal(ca(z), ca(z2))
    assert np.abs(bi(z) - ca(z)).max() > 1e-4


def test_bidirectional_cannot_stream(tiny_config):
    bb = Backbone(tiny_config.replace(temporal_mode="bidirectional"), seed=0)
    with pytest.raises(UsageError):
        bb.stream_open()
    z = Tensor(np.zeros((1, 4, 16), np.float32))
    with pytest.raises(UsageError):
        bidirectional_temporal_attention(z, _time_params(bb), 2, cache=object())


def test_streaming_rejects_multi_frame_input(tiny_config, rng):
    bb = Backbone(tiny_config, seed=0)
    session = bb.stream_open()
    z = Tensor(rng.standard_normal((2, 4, 16)).astype(np.float32))
    with pytest.raises(UsageError):
        causal_temporal_attention(z, _time_params(bb), 2, cache=session.caches[0], t=0)


def test_cache_layout_mismatch_is_a_state_error(tiny_config, rng):
    bb = Backbone(tiny_config, seed=0)
    session = bb.stream_open()
    z = Tensor(rng.standard_normal((1, 4, 16)).astype(np.float32))
    with pytest.raises(StateError):
        causal_temporal_attention(z, _time_params(bb), 4, cache=session.caches[0], t=0)


# ---------------------------------------------------------------------------
# spatial attention with LoRA


def test_zero_lora_equals_frozen_base(tiny_config64, rng):
    bb = Backbone(tiny_config64, seed=4)
    p = bb.blocks[0].space
    x = rng.standard_normal((3, 4, 16))
    out = spatial_attention_lora(Tensor(x), p, 2).data
    np.testing.assert_allclose(out, np.stack([spatial_block(f, p, 2) for f in x]), atol=1e-12)


def test_single_token_spatial_attention(rng):
    cfg = ModelConfig(image_size=8, patch_size=8, d_model=16, n_layers=1, n_heads=2, lora_rank=4, dtype="float64")
    bb = randomize(Backbone(cfg, seed=0), rng)
    p = bb.blocks[0].space
    x = rng.standard_normal((2, 1, 16))
    h = two_pass_layer_norm(x, p.ln_g.data, p.ln_b.data)
    v = h @ p.wv.data + (h @ p.va.data) @ p.vb.data
    np.testing.assert_allclose(spatial_attention_lora(Tensor(x), p, 2).data, x + v @ p.wo.data, atol=1e-12)


def test_spatial_attention_is_frame_permutation_equivariant(tiny_config, rng):
    bb = randomize(Backbone(tiny_config, seed=0), rng)
    p = bb.blocks[1].space
    x = rng.standard_normal((5, 4, 16)).astype(np.float32)
    perm = rng.permutation(5)
    a = spatial_attention_lora(Tensor(x), p, 2).data[perm]
    b = spatial_attention_lora(Tensor(x[perm]), p, 2).data
    np.testing.assert_array_equal(a, b)


def test_lora_rank_mismatch(tiny_config):
    bb = Backbone(tiny_config, seed=0)
    p = bb.blocks[0].space
    p.qb = Parameter(np.zeros((3, 16), np.float32))
    with pytest.raises(ShapeError):
        spatial_attention_lora(Tensor(np.zeros((1, 4, 16), np.float32)), p, 2)


def test_base_spatial_weights_are_frozen(tiny_config):
    bb = Backbone(tiny_config, seed=0)
    for blk in bb.blocks:
        for name in ("wq", "wk", "wv", "wo"):
            assert getattr(blk.space, name).frozen
        for name in ("qa", "qb", "ka", "kb", "va", "vb"):
            assert not getattr(blk.space, name).frozen
    frozen = {n for n, p in bb.named_parameters() if p.frozen}
    assert frozen == {f"blocks.{i}.space.{w}" for i in range(2) for w in ("wq", "wk", "wv", "wo")}


def test_initialization_contract(tiny_config):
    bb = Backbone(tiny_config, seed=0)
    for blk in bb.blocks:
        assert float(blk.time.gate.data) == 0.0
        for name in ("qb", "kb", "vb"):
            assert not getattr(blk.space, name).data.any()
        assert getattr(blk.space, "qa").data.std() > 0


# ---------------------------------------------------------------------------
# FFN and block


def test_ffn_zero_weights_is_residual(tiny_config, rng):
    p = Backbone(tiny_config, seed=0).blocks[0].ffn
    for w in (p.w1, p.b1, p.w2, p.b2):
        w.data = np.zeros_like(w.data)
    x = rng.standard_normal((2, 4, 16)).astype(np.float32)
    np.testing.assert_array_equal(ffn(Tensor(x), p).data, x)


def test_ffn_is_tokenwise(tiny_config, rng):
    p = Backbone(tiny_config, seed=0).blocks[0].ffn
    x = rng.standard_normal((1, 4, 16)).astype(np.float32)
    x[0, 2] = x[0, 0]
    out = ffn(Tensor(x), p).data
    np.testing.assert_array_equal(out[0, 0], out[0, 2])


def test_ffn_matches_composed_oracle(tiny_config64, rng):
    p = Backbone(tiny_config64, seed=5).blocks[1].ffn
    x = rng.standard_normal((3, 4, 16))
    assert np.abs(ffn(Tensor(x), p).data - mlp(x, p)).max() <= 1e-6


def test_mode_none_skips_temporal_sublayer(tiny_config, rng):
    bb = randomize(Backbone(tiny_config, seed=0), rng)
    z = Tensor(rng.standard_normal((3, 4, 16)).astype(np.float32))
    blk = bb.blocks[0]
    expected = ffn(spatial_attention_lora(z, blk.space, 2), blk.ffn).data
    np.testing.assert_array_equal(bb.block_forward(z, 0, "none").data, expected)
    assert np.abs(bb.block_forward(z, 0, "causal").data - expected).max() > 1e-4


def test_unknown_mode(tiny_config):
    bb = Backbone(tiny_config, seed=0)
    with pytest.raises(UsageError):
        bb.block_forward(Tensor(np.zeros((1, 4, 16), np.float32)), 0, "sideways")


# ---------------------------------------------------------------------------
# heads


def test_forward_clip_shapes_and_global_feature(rng):
    bb = Backbone(preset("desk"), seed=0)
    _, feats = bb.forward_clip(random_clip(rng, 4, 32))
    assert feats.F.shape == (4, 4, 4, 32) and feats.f.shape == (4, 32) and feats.v.shape == (32,)
    np.testing.assert_array_equal(feats.v.data, feats.f.data[-1])
    for x in (feats.v.data, feats.f.data, feats.F.data):
        np.testing.assert_allclose(np.linalg.norm(x, axis=-1), 1.0, atol=1e-5)


def test_single_frame_clip(tiny_config, rng):
    bb = Backbone(tiny_config, seed=0)
    _, feats = bb.forward_clip(random_clip(rng, 1, 16))
    assert feats.f.shape == (1, 8)
    np.testing.assert_array_equal(feats.v.data, feats.f.data[0])


def test_duplicate_frame_at_init_gives_duplicate_rows(tiny_config, rng):
    # the temporal position table is the only per-frame term left at init;
    # with equal rows for t=1 and t=2 the two frames must encode identically
    bb = Backbone(tiny_config, seed=0)
    bb.pos_temporal.data[2] = bb.pos_temporal.data[1]
    clip = random_clip(rng, 2, 16)
    clip = np.concatenate([clip, clip[1:]])
    _, feats = bb.forward_clip(clip)
    np.testing.assert_array_equal(feats.f.data[1], feats.f.data[2])


def test_pool_single_token_is_mlp_of_value(rng):
    cfg = ModelConfig(image_size=8, patch_size=8, d_model=16, n_layers=1, n_heads=2, lora_rank=4, dtype="float64")
    bb = Backbone(cfg, seed=0)
    p = bb.pool
    hidden = rng.standard_normal((3, 1, 16))
    h = two_pass_layer_norm(hidden, p.ln_g.data, p.ln_b.data)
    ref = mlp((h @ p.wv.data)[:, 0], p.mlp)
    np.testing.assert_allclose(bb.attention_pool(Tensor(hidden)).data, ref, atol=1e-12)


def test_pool_uniform_tokens_weigh_uniformly(tiny_config64, rng):
    bb = Backbone(tiny_config64, seed=0)
    p = bb.pool
    tok = rng.standard_normal(16)
    hidden = np.tile(tok, (2, 4, 1))
    h = two_pass_layer_norm(tok, p.ln_g.data, p.ln_b.data)
    ref = mlp(h @ p.wv.data, p.mlp)
    out = bb.attention_pool(Tensor(hidden)).data
    np.testing.assert_allclose(out, np.tile(ref, (2, 1)), atol=1e-12)


def test_pool_is_per_frame(tiny_config, rng):
    bb = Backbone(tiny_config, seed=0)
    hidden = rng.standard_normal((4, 4, 16)).astype(np.float32)
    edited = hidden.copy()
    edited[1] *= -2
    a, b = bb.attention_pool(Tensor(hidden)).data, bb.attention_pool(Tensor(edited)).data
    diff = np.abs(a - b).max(axis=-1) > 0
    assert diff.tolist() == [False, True, False, False]


def test_project_unit_norm_and_scale_invariance(tiny_config, rng):
    bb = Backbone(tiny_config, seed=0)
    x = rng.standard_normal((3, 16)).astype(np.float32)
    a, b = bb.project(Tensor(x)).data, bb.project(Tensor(5 * x)).data
    np.testing.assert_allclose(np.linalg.norm(a, axis=-1), 1.0, atol=1e-5)
    np.testing.assert_allclose(a, b, atol=1e-5)


def test_project_identity_like(tiny_config):
    bb = Backbone(tiny_config, seed=0)
    bb.proj_w.data = np.eye(16, 8, dtype=np.float32)
    e = np.zeros(16, np.float32)
    e[3] = 1
    np.testing.assert_array_equal(bb.project(Tensor(e[None])).data[0], np.eye(8, dtype=np.float32)[3])


def test_project_zero_vector_guard(tiny_config):
    bb = Backbone(tiny_config, seed=0)
    with pytest.raises(NormalizationError):
        bb.project(Tensor(np.zeros((1, 16), np.float32)))


# ---------------------------------------------------------------------------
# streaming


def test_first_step_equals_single_frame_batch(tiny_config, rng):
    bb = randomize(Backbone(tiny_config, seed=0), rng)
    frame = random_clip(rng, 1, 16)
    _, batch = bb.forward_clip(frame)
    out = bb.stream_open().step(frame[0])
    np.testing.assert_allclose(out.v.data, batch.v.data, atol=1e-6)
    np.testing.assert_allclose(out.F.data, batch.F.data, atol=1e-6)


def test_stream_matches_batch_across_cache_growth(tiny_config, rng):
    # 20 frames forces the cache past its initial capacity
    bb = randomize(Backbone(tiny_config, seed=1), rng)
    clip = random_clip(rng, 20, 16)
    _, batch = bb.forward_clip(clip)
    session = bb.stream_open()
    for t in range(20):
        out = session.step(clip[t])
        assert np.abs(out.f.data[0] - batch.f.data[t]).max() <= 1e-5
        assert np.abs(out.F.data[0] - batch.F.data[t]).max() <= 1e-5
    assert session.t_so_far == 20


def test_cache_floats_formula(tiny_config, rng):
    bb = Backbone(tiny_config, seed=0)
    session = bb.stream_open()
    for t in range(1, 4):
        session.step(random_clip(rng, 1, 16)[0])
        assert session.cache_floats() == tiny_config.n_layers * 2 * t * tiny_config.n_tokens * tiny_config.d_model


def test_truncate_rewinds_the_stream(tiny_config, rng):
    bb = randomize(Backbone(tiny_config, seed=0), rng)
    clip = random_clip(rng, 3, 16)
    session = bb.stream_open()
    first = [session.step(f).v.data.copy() for f in clip]
    session.truncate(1)
    again = [session.step(f).v.data for f in clip[1:]]
    np.testing.assert_array_equal(np.stack(first[1:]), np.stack(again))
    with pytest.raises(StateError):
        session.truncate(9)


def test_step_after_close(tiny_config, rng):
    bb = Backbone(tiny_config, seed=0)
    session = bb.stream_open()
    session.close()
    with pytest.raises(StateError):
        session.step(random_clip(rng, 1, 16)[0])
    with pytest.raises(StateError):
        session.close()


def test_stream_overflow(tiny_config, rng):
    bb = Backbone(tiny_config.replace(max_frames=2), seed=0)
    session = bb.stream_open()
    frame = random_clip(rng, 1, 16)[0]
    session.step(frame)
    session.step(frame)
    with pytest.raises(CapacityError):
        session.step(frame)


def test_stream_refuses_active_tape(tiny_config, rng):
    bb = Backbone(tiny_config, seed=0)
    session = bb.stream_open()
    with Tape():
        with pytest.raises(UsageError):
            session.step(random_clip(rng, 1, 16)[0])


def test_stream_in_mode_none_is_per_frame(tiny_config, rng):
    bb = randomize(Backbone(tiny_config.replace(temporal_mode="none"), seed=0), rng)
    clip = random_clip(rng, 3, 16)
    _, batch = bb.forward_clip(clip)
    session = bb.stream_open()
    assert session.cache_floats() == 0
    for t in range(3):
        np.testing.assert_allclose(session.step(clip[t]).v.data, batch.f.data[t], atol=1e-6)


def test_independent_sessions_do_not_interfere(tiny_config, rng):
    bb = randomize(Backbone(tiny_config, seed=0), rng)
    a, b = random_clip(rng, 3, 16), random_clip(rng, 3, 16)
    s1, s2 = bb.stream_open(), bb.stream_open()
    for t in range(3):
        v1 = s1.step(a[t]).v.data
        s2.step(b[t])
    _, ref = bb.forward_clip(a)
    np.testing.assert_allclose(v1, ref.v.data, atol=1e-5)


# ---------------------------------------------------------------------------
# mode degeneracy at T = 1


def test_modes_coincide_at_one_frame_with_zero_gate(tiny_config, rng):
    bb = Backbone(tiny_config, seed=0)
    clip = random_clip(rng, 1, 16)
    outs = [bb.forward_clip(clip, mode)[0].data for mode in ("causal", "bidirectional", "none")]
    np.testing.assert_array_equal(outs[0], outs[1])
    np.testing.assert_array_equal(outs[0], outs[2])


def test_causal_and_bidirectional_coincide_at_one_frame_for_any_gate(tiny_config, rng):
    bb = randomize(Backbone(tiny_config, seed=0), rng)
    clip = random_clip(rng, 1, 16)
    np.testing.assert_array_equal(bb.forward_clip(clip, "causal")[0].data, bb.forward_clip(clip, "bidirectional")[0].data)
    # a live gate still adds the single frame's own value path, which "none" omits
    assert np.abs(bb.forward_clip(clip, "causal")[0].data - bb.forward_clip(clip, "none")[0].data).max() > 1e-4


# ---------------------------------------------------------------------------
# gradient checks through the sub-layers (f64)


def _sublayer_cases(bb: Backbone, rng):
    blk = bb.blocks[0]
    z = Parameter(rng.standard_normal((3, 4, 16)))
    w_out = Tensor(rng.standard_normal((3, 4, 16)))
    probe = lambda out: ad.sum(ad.mul(out, w_out))
    return {
        "causal_temporal": ([z, blk.time.wq, blk.time.wk, blk.time.wv, blk.time.wo, blk.time.gate, blk.time.ln_g],
                            lambda: probe(causal_temporal_attention(z, blk.time, 2))),
        "bidirectional_temporal": ([z, blk.time.wq, blk.time.gate],
                                   lambda: probe(bidirectional_temporal_attention(z, blk.time, 2))),
        "spatial_lora": ([z, blk.space.qa, blk.space.qb, blk.space.ka, blk.space.kb, blk.space.va, blk.space.vb, blk.space.ln_b],
                         lambda: probe(spatial_attention_lora(z, blk.space, 2))),
        "ffn": ([z, blk.ffn.w1, blk.ffn.b1, blk.ffn.w2, blk.ffn.ln_g], lambda: probe(ffn(z, blk.ffn))),
        "attention_pool": ([z, bb.pool.query, bb.pool.wk, bb.pool.wv, bb.pool.mlp.w1],
                           lambda: ad.sum(ad.mul(bb.attention_pool(z), Tensor(w_out.data[:, 0])))),
        "project": ([z, bb.proj_w], lambda: ad.sum(ad.mul(bb.project(z), Tensor(w_out.data[..., :8])))),
    }


@pytest.mark.parametrize(
    "name", ["causal_temporal", "bidirectional_temporal", "spatial_lora", "ffn", "attention_pool", "project"]
)
def test_gradcheck_sublayer(name, tiny_config64):
    rng = np.random.default_rng(21)
    bb = randomize(Backbone(tiny_config64, seed=0), rng)
    params, build = _sublayer_cases(bb, rng)[name]
    with Tape() as tape:
        loss = build()
    backward(tape, loss)
    grads = [p.grad.copy() for p in params]
    err = gradcheck(lambda: float(build().data), params, grads, rng)
    assert err <= 1e-4, f"{name}: {err:.2e}"


def test_gradcheck_full_clip(tiny_config64):
    rng = np.random.default_rng(3)
    bb = randomize(Backbone(tiny_config64, seed=0), rng)
    clip = random_clip(rng, 3, 16, np.float64)
    wf = Tensor(rng.standard_normal((3, 8)))
    wF = Tensor(rng.standard_normal((3, 2, 2, 8)))

    def build():
        _, feats = bb.forward_clip(clip)
        return ad.add(ad.sum(ad.mul(feats.f, wf)), ad.sum(ad.mul(feats.F, wF)))

    params = [p for p in bb.parameters() if not p.frozen]
    with Tape() as tape:
        loss = build()
    backward(tape, loss)
    grads = [p.grad.copy() for p in params]
    assert gradcheck(lambda: float(build().data), params, grads, rng) <= 1e-4
