from __future__ import annotations

import numpy as np
import pytest

from tempee.attention import AttentionConfig
from tempee.errors import ConfigError, ContractError, FormatError, ShapeError
from tempee.model import (
    FeatureVolume,
    ModelConfig,
    TempEE,
    extrapolate,
    load_checkpoint,
    rectify,
    save_checkpoint,
    unrectify,
)
from tempee.tensor import Tensor, grad_check, precision, tsum

from oracles import conv2d_loop, mhsa_loop


def toy_cfg(**kw) -> ModelConfig:
    base = dict(n_in=4, k_out=4, image_edge=24, patch=6, d_model=4, te_blocks=1, se_blocks=1, tsd_blocks=1,
                attention=AttentionConfig(heads=2, g=2, g_prime=2))
    base.update(kw)
    return ModelConfig(**base)


def test_config_validation():
    with pytest.raises(ConfigError):
        toy_cfg(image_edge=25)
    with pytest.raises(ConfigError):
        toy_cfg(attention=AttentionConfig(heads=3, g=2, g_prime=2))
    with pytest.raises(ConfigError):
        toy_cfg(temporal_mode="sideways")
    cfg = toy_cfg()
    assert ModelConfig.from_text(cfg.to_text()) == cfg


def test_reference_resolution_grid():
    cfg = ModelConfig(d_model=2, attention=AttentionConfig(heads=2, g=8, g_prime=2))
    assert cfg.grid == 16
    m = TempEE(cfg)
    vol = m.patch_embed(np.zeros((20, 192, 192)))
    assert vol.values.shape == (1, 2, 20, 16, 16)


def test_patch_one_is_pointwise_lift_and_zero_frames_embed_to_zero():
    m = TempEE(toy_cfg(patch=1, image_edge=4, attention=AttentionConfig(heads=1, g=2, g_prime=2)))
    frames = np.random.default_rng(0).uniform(0, 255, (4, 4, 4))
    vol = m.patch_embed(frames).values.data
    assert vol.shape == (1, 4, 4, 4, 4)
    w = m.params["embed.w"].data[0]
    assert np.allclose(vol[0], np.einsum("d,thw->dthw", w, frames / 255.0), atol=1e-5)
    assert not m.patch_embed(np.zeros((4, 4, 4))).values.data.any()
    with pytest.raises(ShapeError):
        TempEE(toy_cfg()).patch_embed(np.zeros((4, 25, 25)))


def test_rectify_layout_and_round_trip():
    x = np.arange(2 * 3 * 4 * 4, dtype=float).reshape(1, 2, 3, 4, 4)
    vol = FeatureVolume(Tensor(x), "temporal")
    r = rectify(vol)
    assert r.values.shape == (1, 6, 4, 4) and r.space == "rectified"
    assert np.array_equal(r.values.data[0, 1 * 3 + 2], x[0, 1, 2])
    assert np.array_equal(unrectify(r, 3).values.data, x)
    single = rectify(FeatureVolume(Tensor(x[:, :, :1]), "temporal"))
    assert np.array_equal(single.values.data, x[:, :, 0])


def test_zero_init_blocks_are_identity():
    m = TempEE(toy_cfg(te_blocks=2, se_blocks=2), zero_init_residual=True)
    rng = np.random.default_rng(0)
    t = FeatureVolume(Tensor(rng.normal(size=(1, 4, 4, 4, 4))), "temporal")
    assert np.allclose(m.te_forward(t).values.data, t.values.data)
    s = FeatureVolume(Tensor(rng.normal(size=(1, 16, 4, 4))), "spatial")
    assert np.allclose(m.se_forward(s).values.data, s.values.data)


def test_te_needs_time_axis_and_single_frame_works():
    m = TempEE(toy_cfg(n_in=1, k_out=1))
    with pytest.raises(ContractError):
        m.te_forward(FeatureVolume(Tensor(np.ones((1, 4, 4, 4))), "spatial"))
    x = FeatureVolume(Tensor(np.random.default_rng(0).normal(size=(1, 4, 1, 4, 4))), "temporal")
    assert m.te_forward(x).values.shape == (1, 4, 1, 4, 4)


@pytest.mark.parametrize("mode", ["per_position", "joint"])
def test_te_gradient_two_blocks(mode):
    cfg = toy_cfg(image_edge=8, patch=1, te_blocks=2, temporal_mode=mode, attention=AttentionConfig(heads=2, g=2, g_prime=2))
    m = TempEE(cfg, seed=3)
    x = np.random.default_rng(3).normal(size=(1, 4, 4, 8, 8))
    r = np.random.default_rng(4).normal(size=x.shape)
    f = lambda t: tsum(m.te_forward(FeatureVolume(t, "temporal")).values * Tensor(r))  # noqa: E731
    assert grad_check(f, x, max_entries=30) < 1e-3


def _ln(x, g, b, eps):
    mu = x.mean(0, keepdims=True)
    var = ((x - mu) ** 2).mean(0, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g[:, None, None] + b[:, None, None]


def test_se_block_matches_reference():
    cfg = toy_cfg(image_edge=48, patch=6, n_in=2, attention=AttentionConfig(heads=2, g=2, g_prime=2))
    with precision(np.float64):
        m = TempEE(cfg, seed=1)
        x = np.random.default_rng(1).normal(size=(8, 8, 8))
        got = m.se_forward(FeatureVolume(Tensor(x[None]), "spatial")).values.data[0]
    p = {k: v.data.astype(np.float64) for k, v in m.params.items()}
    y = _ln(x, p["se.0.ln1.g"], p["se.0.ln1.b"], cfg.ln_eps)
    z = mhsa_loop(y, *(p[f"se.0.attn.{k}"].tolist() for k in ("wq", "wk", "wv", "wp")), 2) - y + x
    y = np.maximum(_ln(z, p["se.0.ln2.g"], p["se.0.ln2.b"], cfg.ln_eps), 0)
    ref = z + conv2d_loop(y, p["se.0.ffn.w"], 1, 1) + p["se.0.ffn.b"][:, None, None]
    assert np.abs(got - ref).max() < 1e-5


def test_parallel_encoders_occupy_separate_channels():
    m = TempEE(toy_cfg(), seed=0)
    obs = np.random.default_rng(0).uniform(0, 255, (4, 24, 24))
    enc = m.encode(obs)
    cs = m.cfg.se_width
    m.params["se.0.attn.wp"].data[:] = 0.0
    m.params["se.0.ffn.w"].data[:] = 0.0
    enc2 = m.encode(obs)
    assert np.array_equal(enc["concat"].values.data[:, :cs], enc2["concat"].values.data[:, :cs])
    assert not np.allclose(enc["concat"].values.data[:, cs:], enc2["concat"].values.data[:, cs:])


def test_decoder_channel_mismatch_is_config_error():
    m = TempEE(toy_cfg())
    enc = FeatureVolume(Tensor(np.zeros((1, 8, 4, 4))), "rectified")
    prompts = m.embed_prompts(np.zeros((4, 24, 24)))
    with pytest.raises(ConfigError):
        m.tsd_forward(enc, prompts)


def test_forward_shapes_and_finiteness():
    m = TempEE(toy_cfg(k_out=1))
    out = m.forward(np.random.default_rng(0).uniform(0, 255, (2, 4, 24, 24)))
    assert out.shape == (2, 1, 24, 24)
    assert np.isfinite(out.data).all()
    assert m.forward_calls == 1


def test_extrapolate_reference_shapes():
    cfg = ModelConfig(d_model=2, te_blocks=1, se_blocks=1, tsd_blocks=1, attention=AttentionConfig(heads=2, g=8, g_prime=2))
    m = TempEE(cfg)
    out = extrapolate(m, np.zeros((20, 192, 192)))
    assert out.shape == (20, 192, 192)
    with pytest.raises(ContractError):
        extrapolate(m, np.zeros((19, 192, 192)))


def test_zero_observation_zero_head_gives_zero():
    m = TempEE(toy_cfg())
    m.params["head.w"].data[:] = 0.0
    m.params["head.b"].data[:] = 0.0
    assert not extrapolate(m, np.zeros((4, 24, 24))).any()


def test_extrapolate_clamps_to_pixel_range():
    m = TempEE(toy_cfg())
    m.params["head.b"].data[:] = 5.0
    assert np.all(extrapolate(m, np.zeros((4, 24, 24))) == 255.0)
    with pytest.raises(ContractError):
        extrapolate(m, np.full((4, 24, 24), 300.0))


def test_outputs_do_not_feed_back():
    m = TempEE(toy_cfg(), seed=2)
    obs = np.random.default_rng(2).uniform(0, 255, (4, 24, 24))
    first = extrapolate(m, obs)
    assert m.forward_calls == 1
    for i in range(4):
        edited = first.copy()
        edited[i] += 17.0
        again = extrapolate(m, obs)
        others = [j for j in range(4) if j != i]
        assert np.array_equal(again[others], first[others])
        assert np.array_equal(edited[others], first[others])
    assert m.forward_calls == 5


def test_checkpoint_round_trip(tmp_path):
    m = TempEE(toy_cfg(), seed=5)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, m)
    m2 = load_checkpoint(path)
    assert m2.cfg == m.cfg
    for k in m.params:
        assert np.array_equal(m.params[k].data, m2.params[k].data)
    save_checkpoint(tmp_path / "again.ckpt", m2)
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_corruption(tmp_path):
    m = TempEE(toy_cfg())
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, m)
    raw = path.read_bytes()
    (tmp_path / "magic.ckpt").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError, match="offset 0"):
        load_checkpoint(tmp_path / "magic.ckpt")
    (tmp_path / "short.ckpt").write_bytes(raw[:-3])
    with pytest.raises(FormatError, match="truncated"):
        load_checkpoint(tmp_path / "short.ckpt")
    (tmp_path / "long.ckpt").write_bytes(raw + b"\0")
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "long.ckpt")


@pytest.mark.parametrize("seed", range(2))
def test_end_to_end_gradient_sample(seed):
    cfg = toy_cfg(d_model=8)
    m = TempEE(cfg, seed=seed)
    rng = np.random.default_rng(seed)
    obs = rng.uniform(0, 255, (1, 4, 24, 24))
    r = rng.normal(size=(1, 4, 24, 24)) / 255
    for name in ("embed.w", "te.0.attn.wq", "se.0.ffn.w", "tsd.0.attn.q2", "head.w"):
        base = m.params[name]

        def f(w):
            m.params[name] = w
            try:
                return tsum(m.forward(obs) * Tensor(r))
            finally:
                m.params[name] = base

        assert grad_check(f, base, max_entries=3, seed=seed) < 1e-3
