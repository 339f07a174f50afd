import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from trex.encoder import (
    NAMED_CONFIGS,
    Encoder,
    EncoderConfig,
    PatchMerge,
    SwinBlock,
    attention_mask,
    encode,
    named_config,
    stage_grids,
    window_partition,
    window_reverse,
)
from trex.nn_core import ConfigError, ShapeError


@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 4), st.integers(1, 3))
def test_window_partition_roundtrip(nh, nw, win, c):
    x = torch.arange(2 * nh * win * nw * win * c, dtype=torch.float64).reshape(2, nh * win, nw * win, c)
    parts = window_partition(x, win)
    assert parts.shape == (2, nh * nw, win * win, c)
    torch.testing.assert_close(window_reverse(parts, win, nh * win, nw * win), x, rtol=0, atol=0)


def test_window_partition_contents():
    x = torch.arange(16.0).reshape(4, 4, 1)
    parts = window_partition(x, 2)[..., 0]
    assert parts[0].tolist() == [0, 1, 4, 5]
    assert parts[1].tolist() == [2, 3, 6, 7]
    assert parts[3].tolist() == [10, 11, 14, 15]
    with pytest.raises(ShapeError):
        window_partition(torch.zeros(3, 4, 1), 2)


def mask_oracle(hs, ws, win, shift):
    """Brute force: allowed iff both tokens are real and no cyclic wrap separates them."""
    hp, wp = -(-hs // win) * win, -(-ws // win) * win
    nwh, nww = hp // win, wp // win
    out = np.zeros((nwh * nww, win * win, win * win), dtype=bool)
    for wi in range(nwh):
        for wj in range(nww):
            cells = [(wi * win + a, wj * win + b) for a in range(win) for b in range(win)]
            orig = [((r + shift) % hp, (c + shift) % wp) for r, c in cells]
            for q, (pq, oq) in enumerate(zip(cells, orig)):
                for k, (pk, ok) in enumerate(zip(cells, orig)):
                    wrapped = (oq[0] - ok[0] != pq[0] - pk[0]) or (oq[1] - ok[1] != pq[1] - pk[1])
                    padding = ok[0] >= hs or ok[1] >= ws
                    out[wi * nww + wj, q, k] = wrapped or padding
    return out


@pytest.mark.parametrize("hs,ws,win,shift", [(8, 8, 4, 2), (4, 8, 2, 1), (6, 6, 4, 0), (6, 10, 4, 2), (14, 14, 7, 3)])
def test_attention_mask_matches_bruteforce(hs, ws, win, shift):
    m = attention_mask(hs, ws, win, shift)
    blocked = mask_oracle(hs, ws, win, shift)
    assert m is not None
    np.testing.assert_array_equal(m.numpy() < 0, blocked)


def test_attention_mask_none_without_shift_or_pad():
    assert attention_mask(8, 8, 4, 0) is None


def test_shift_disabled_when_window_covers_grid():
    torch.manual_seed(0)
    shifted = SwinBlock(8, 2, 4, 2)
    plain = SwinBlock(8, 2, 4, 0)
    plain.load_state_dict(shifted.state_dict())
    x = torch.randn(2, 4, 4, 8)
    torch.testing.assert_close(shifted(x), plain(x), rtol=0, atol=0)
    # on a larger grid the shift matters
    y = torch.randn(1, 8, 8, 8)
    assert not torch.allclose(shifted(y), plain(y))


def test_padded_block_keeps_grid():
    # 6x6 is not divisible by the window: padded, masked, cropped back
    torch.manual_seed(1)
    blk = SwinBlock(8, 2, 4, 2)
    x = torch.randn(1, 6, 6, 8)
    y = blk(x)
    assert y.shape == x.shape and torch.isfinite(y).all()


def test_shifted_block_is_equivariant_to_window_aligned_translation():
    """Rolling by a whole window commutes with the unshifted block (periodic tiling)."""
    torch.manual_seed(2)
    blk = SwinBlock(8, 2, 2, 0)
    x = torch.randn(1, 8, 8, 8)
    rolled = torch.roll(x, shifts=(2, 2), dims=(1, 2))
    torch.testing.assert_close(blk(rolled), torch.roll(blk(x), shifts=(2, 2), dims=(1, 2)), rtol=1e-5, atol=1e-6)


def test_swin_block_rejects_bad_shift():
    with pytest.raises(ConfigError):
        SwinBlock(8, 2, 4, 4)


def test_patch_merge_shapes_and_order():
    pm = PatchMerge(3)
    x = torch.randn(2, 4, 6, 3)
    assert pm(x).shape == (2, 2, 3, 6)
    with pytest.raises(ShapeError):
        pm(torch.randn(1, 3, 4, 3))


def test_toy_encoder_shapes():
    cfg = named_config("toy")
    enc = Encoder(cfg)
    f = encode(enc, torch.randn(3, 64, 64, 3))
    assert f.grid == (2, 2) and f.channels == 128
    assert cfg.stage4_grid == (2, 2)
    assert list(stage_grids(cfg)) == [(16, 16), (8, 8), (4, 4), (2, 2)]


def test_swin_small_geometry():
    cfg = named_config("swin_small")
    assert cfg.stage4_grid == (7, 7) and cfg.out_dim == 768
    assert list(stage_grids(cfg)) == [(56, 56), (28, 28), (14, 14), (7, 7)]


@pytest.mark.parametrize("name", sorted(NAMED_CONFIGS))
def test_named_configs_validate(name):
    cfg = named_config(name)
    assert cfg.dims[-1] == cfg.out_dim


def test_encoder_config_errors():
    with pytest.raises(ConfigError):
        EncoderConfig(dims=(16, 32, 48, 96))
    with pytest.raises(ConfigError):
        EncoderConfig(heads=(3, 2, 4, 8))
    with pytest.raises(ConfigError):
        EncoderConfig(input_hw=(60, 60))
    with pytest.raises(ConfigError):
        named_config("huge")


def test_encoder_rejects_wrong_input_size():
    with pytest.raises(ShapeError):
        Encoder()(torch.zeros(1, 32, 32, 3))


def test_encoder_is_deterministic_per_seed():
    torch.manual_seed(4)
    a = Encoder()
    torch.manual_seed(4)
    b = Encoder()
    x = torch.randn(1, 64, 64, 3)
    torch.testing.assert_close(a(x), b(x), rtol=0, atol=0)
