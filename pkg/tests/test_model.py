import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import timepfn.autodiff as ad
from oracles import central_difference, enumerate_patch_starts, max_relative_error
from timepfn.errors import CorpusFormatError, ShapeMismatch
from timepfn.model import (
    ModelConfig, TimePFN, channel_segments, count_parameters, denormalize, forecast_split,
    load_checkpoint, normalize, positional_encoding_2d, read_checkpoint, save_checkpoint,
)


def test_paper_patch_count_and_pad():
    cfg = ModelConfig()
    assert cfg.num_patches == 12
    assert cfg.patch_pad == 8
    assert (cfg.num_patches - 1) * cfg.patch_stride + cfg.patch_len == cfg.context_len + 8


@settings(max_examples=40, deadline=None)
@given(L=st.integers(4, 200), P=st.integers(1, 64), S=st.integers(1, 32))
def test_patch_count_formula(L, P, S):
    if P > L:
        return
    cfg = ModelConfig(context_len=L, patch_len=P, patch_stride=S, embed_dim=8, num_heads=2)
    K = cfg.num_patches
    assert K == len(enumerate_patch_starts(L, P, S))
    # last patch covers the final real step and starts inside the series
    last = (K - 1) * S
    assert last + P >= L and last < L + S
    assert cfg.patch_pad >= 0


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(embed_dim=30, num_heads=4)
    with pytest.raises(ValueError):
        ModelConfig(embed_dim=6, num_heads=3)
    with pytest.raises(ValueError):
        ModelConfig(patch_len=200)
    with pytest.raises(ValueError):
        ModelConfig(dtype="float16")


def test_parameter_count_matches_hand_count():
    c = ModelConfig()
    C, k, D, F, Z, H = c.conv_rows, c.conv_kernel, c.embed_dim, c.ffn_dim, c.latent_dim, c.horizon
    conv = (C * k + C) + (C * C * k + C)
    embed = ((C + 1) * c.patch_len * D + D) + (D * D + D)
    layer = 4 * (D * D + D) + 2 * 2 * D + (D * F + F) + (F * D + D)
    head = (c.num_patches * D * Z + Z) + (Z * H + H)
    total = conv + embed + c.num_layers * layer + 2 * D + head
    assert count_parameters(c) == total == TimePFN(c).num_parameters()


def test_normalize_round_trip_and_constant_column():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((3, 40, 5)) * 7 + 3
    x[:, :, 2] = 4.25
    xn, st_ = normalize(x)
    assert np.all(np.isfinite(xn))
    np.testing.assert_array_equal(xn[:, :, 2], 0.0)
    np.testing.assert_allclose(xn.mean(axis=1)[:, [0, 1, 3]], 0.0, atol=1e-12)
    np.testing.assert_allclose(xn.std(axis=1)[:, [0, 1, 3]], 1.0, rtol=1e-12)
    np.testing.assert_allclose(denormalize(xn, st_), x, atol=1e-12)


def test_near_constant_column_round_trips():
    x = np.ones((30, 1)) + 1e-9 * np.arange(30)[:, None]
    xn, s = normalize(x, eps_std=1e-5)
    np.testing.assert_allclose(denormalize(xn, s), x, rtol=0, atol=1e-15)


def test_positional_encoding_layout():
    pe = positional_encoding_2d(3, 4, 8)
    assert pe.shape == (3, 4, 8)
    np.testing.assert_allclose(pe[0, 0], [0, 0, 1, 1, 0, 0, 1, 1])
    # quarter 1/2 depend on channel only, quarters 3/4 on patch only
    assert np.allclose(pe[:, 0, :4], pe[:, 3, :4])
    assert np.allclose(pe[0, :, 4:], pe[2, :, 4:])
    np.testing.assert_allclose(pe[1, 2, 1], np.sin(1 * 10000 ** (-4 / 8)))
    shifted = positional_encoding_2d(2, 4, 8, channel_positions=[5, 6])
    np.testing.assert_allclose(shifted[0], positional_encoding_2d(6, 4, 8)[5])
    with pytest.raises(ValueError):
        positional_encoding_2d(2, 2, 6)


def test_stage_shapes():
    cfg = ModelConfig.tiny()
    m = TimePFN(cfg)
    x = np.random.default_rng(1).standard_normal((2, cfg.context_len, 3))
    stack = m.conv_filter(x)
    assert stack.shape == (2, 3, cfg.conv_rows + 1, cfg.context_len)
    np.testing.assert_array_equal(stack.data[:, :, -1, :], x.transpose(0, 2, 1))
    tok = m.patch_and_embed(stack)
    assert tok.shape == (2, 3, cfg.num_patches, cfg.embed_dim)
    assert m.forward_normalized(x).shape == (2, cfg.horizon, 3)


def test_forecast_shapes_and_scale_equivariance():
    cfg = ModelConfig.tiny()
    m = TimePFN(cfg)
    x = np.random.default_rng(2).standard_normal((cfg.context_len, 4))
    y = m.forecast(x)
    assert y.shape == (cfg.horizon, 4)
    assert m(x[None]).shape == (1, cfg.horizon, 4)
    # affine change of a variate passes straight through normalization
    np.testing.assert_allclose(m.forecast(3 * x + 5), 3 * y + 5, rtol=1e-9, atol=1e-9)
    with pytest.raises(ShapeMismatch):
        m.forecast(x[:-1])


def test_encode_and_forecast_matches_forecast():
    cfg = ModelConfig.tiny()
    m = TimePFN(cfg)
    x = np.random.default_rng(3).standard_normal((1, cfg.context_len, 2))
    xn, state = normalize(x)
    tokens = m.patch_and_embed(m.conv_filter(xn))
    np.testing.assert_allclose(m.encode_and_forecast(tokens, state), m.forecast(x), rtol=1e-12)


def test_attention_maps_are_row_stochastic():
    cfg = ModelConfig.tiny()
    m = TimePFN(cfg)
    m.record_attention = True
    m.forecast(np.random.default_rng(4).standard_normal((cfg.context_len, 3)))
    assert len(m.attention_maps) == cfg.num_layers
    T = 3 * cfg.num_patches
    for a in m.attention_maps:
        assert a.shape == (1, cfg.num_heads, T, T)
        np.testing.assert_allclose(a.sum(-1), 1.0)


def test_channel_segments():
    assert [b - a for a, b in channel_segments(321, 160)] == [160, 160, 1]
    assert channel_segments(320, 160) == [(0, 160), (160, 320)]
    assert channel_segments(5, 160) == [(0, 5)]
    with pytest.raises(ValueError):
        channel_segments(0, 4)


def test_forecast_split_matches_segment_passes():
    cfg = ModelConfig.tiny(train_channels=3)
    m = TimePFN(cfg)
    x = np.random.default_rng(5).standard_normal((cfg.context_len, 7))
    out = forecast_split(x, m)
    assert out.shape == (cfg.horizon, 7)
    for a, b in channel_segments(7, 3):
        assert np.array_equal(out[:, a:b], m.forecast(x[:, a:b]))
    batched = forecast_split(np.stack([x, x]), m, batch_size=1)
    assert np.array_equal(batched[1], out)


def test_checkpoint_round_trip(tmp_path):
    cfg = ModelConfig.tiny(dtype="float32")
    m = TimePFN(cfg)
    save_checkpoint(m, tmp_path / "m.tpfn")
    m2 = load_checkpoint(tmp_path / "m.tpfn")
    assert m2.cfg == cfg
    for n in m.params:
        assert np.array_equal(m.params[n].data, m2.params[n].data)
    x = np.random.default_rng(6).standard_normal((cfg.context_len, 2))
    assert np.array_equal(m.forecast(x), m2.forecast(x))


def test_checkpoint_corruption_detected(tmp_path):
    p = tmp_path / "m.tpfn"
    save_checkpoint(TimePFN(ModelConfig.tiny()), p)
    raw = bytearray(p.read_bytes())
    raw[100] ^= 0xFF
    p.write_bytes(bytes(raw))
    with pytest.raises(CorpusFormatError, match="checksum"):
        read_checkpoint(p)
    p.write_bytes(b"junk" * 10)
    with pytest.raises(CorpusFormatError):
        read_checkpoint(p)


def test_parameter_set_must_match_config():
    m = TimePFN(ModelConfig.tiny())
    state = m.state_dict()
    with pytest.raises(ShapeMismatch):
        TimePFN(ModelConfig.tiny(embed_dim=8), params=state)


def test_head_and_embedding_gradients():
    """A cheap subset of the full-model gradient check."""
    cfg = ModelConfig.tiny(num_layers=1)
    m = TimePFN(cfg)
    rng = np.random.default_rng(7)
    x = rng.standard_normal((1, cfg.context_len, 2))
    y = rng.standard_normal((1, cfg.horizon, 2))
    names = ["conv1.bias", "embed.fc2.bias", "layers.0.norm2.weight", "head.fc2.bias"]

    def loss():
        return ad.mse_loss(m.forward_normalized(x), y)

    m.zero_grad()
    loss().backward()
    analytic = [m.params[n].grad.copy() for n in names]

    def f():
        with ad.no_grad():
            return loss().data

    numeric = central_difference(f, [m.params[n].data for n in names])
    for a, n in zip(analytic, numeric):
        assert max_relative_error(a, n, floor=1e-6) < 1e-4
