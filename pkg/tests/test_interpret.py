import csv

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from trex.data.images import read_image
from trex.fusion import DualCrossAttention, ModelConfig, PairClassifier
from trex.interpret import (
    HeatMap,
    attn_heatmap,
    cam_from_gradients,
    grad_cam,
    max_normalize,
    overlay,
    overlay_export,
    peak_cell_box,
    peak_in_box,
    upsample_nearest,
    write_overlay_index,
)

from test_fusion import MICRO


@pytest.fixture
def micro_trex():
    torch.manual_seed(0)
    return PairClassifier(ModelConfig(encoder=MICRO, dca_heads=2, hidden=8))


def test_cam_hand_computed():
    a = torch.tensor([[[1.0, 0.0], [2.0, 1.0]], [[3.0, 1.0], [4.0, 0.0]]])  # [2, 2, C=2]
    g = torch.tensor([[[0.5, -2.0], [0.5, 0.0]], [[0.5, 0.0], [0.5, -2.0]]])
    # weights: mean grad per channel = (0.5, -1.0)
    want = torch.tensor([[0.5, 0.0], [0.5, 2.0]])
    assert torch.equal(cam_from_gradients(a, g), want)


def test_cam_relu_clamps_negative():
    a = torch.ones(2, 2, 3)
    g = -torch.ones(2, 2, 3)
    assert torch.equal(cam_from_gradients(a, g), torch.zeros(2, 2))


def test_max_normalize():
    v, deg = max_normalize(np.array([[0.0, 2.0], [1.0, 4.0]]))
    assert not deg and v.max() == 1.0 and v[0, 1] == 0.5
    v, deg = max_normalize(np.zeros((2, 2)))
    assert deg and not v.any()
    with pytest.raises(ValueError):
        max_normalize(np.array([-1.0]))


def test_grad_cam_nonnegative_and_normalized(micro_trex):
    torch.manual_seed(1)
    x_ref, x_later = torch.rand(3, 16, 16, 3), torch.rand(3, 16, 16, 3)
    micro_trex.train()
    maps = grad_cam(micro_trex, x_ref, x_later, torch.tensor([0.1, 0.5, 1.0]))
    assert micro_trex.training  # mode restored
    assert len(maps) == 3
    for hm in maps:
        assert hm.grid == (2, 2) and hm.source == "gradcam"
        assert (hm.values >= 0).all()
        assert hm.degenerate or hm.values.max() == 1.0
    assert all(p.grad is None for p in micro_trex.parameters())


def test_grad_cam_zero_head_is_degenerate(micro_trex):
    with torch.no_grad():
        for p in micro_trex.head.parameters():
            p.zero_()
    maps = grad_cam(micro_trex, torch.rand(1, 16, 16, 3), torch.rand(1, 16, 16, 3))
    assert maps[0].degenerate and not maps[0].values.any()
    assert not peak_in_box(maps[0], (0, 0, 15, 15), (16, 16))


@pytest.mark.parametrize("kind", ["si", "cat"])
def test_grad_cam_other_kinds(kind):
    torch.manual_seed(0)
    model = PairClassifier(ModelConfig(kind=kind, encoder=MICRO, hidden=8))
    ref = None if kind == "si" else torch.rand(2, 16, 16, 3)
    maps = grad_cam(model, ref, torch.rand(2, 16, 16, 3))
    assert all((m.values >= 0).all() and m.grid == (2, 2) for m in maps)


def numpy_attention(q_src, kv_src, w_q, w_k, heads):
    q = q_src @ w_q
    k = kv_src @ w_k
    d = q.shape[-1] // heads
    out = []
    for h in range(heads):
        logits = q[:, h * d : (h + 1) * d] @ k[:, h * d : (h + 1) * d].T / np.sqrt(d)
        e = np.exp(logits - logits.max(axis=-1, keepdims=True))
        out.append(e / e.sum(axis=-1, keepdims=True))
    return np.stack(out)  # [h, N, M]


def test_attention_heatmap_matches_recomputation():
    torch.manual_seed(3)
    dca = DualCrossAttention(16, heads=4).double()
    f_res, f_fup = torch.randn(1, 3, 3, 16, dtype=torch.float64), torch.randn(1, 3, 3, 16, dtype=torch.float64)
    out = dca(f_res, f_fup)
    a = numpy_attention(f_res[0].reshape(9, 16).numpy(), f_fup[0].reshape(9, 16).numpy(),
                        dca.ca_res.w_q.detach().numpy(), dca.ca_res.w_k.detach().numpy(), 4)
    for q in range(9):
        hm = attn_heatmap(out, q)
        want = a[:, q].mean(axis=0).reshape(3, 3)
        np.testing.assert_allclose(hm.values, want / want.max(), rtol=1e-12)
        heads = attn_heatmap(out, q, per_head=True)
        assert len(heads) == 4 and heads[2].detail["head"] == 2
        np.testing.assert_allclose(heads[2].values, a[2, q].reshape(3, 3) / a[2, q].max(), rtol=1e-12)
    rev = attn_heatmap(out, 0, "fup2res")
    assert rev.grid == (3, 3) and rev.detail["direction"] == "fup2res"


def test_attention_heatmap_independent_of_values_projection():
    torch.manual_seed(4)
    dca = DualCrossAttention(8, heads=2)
    f_res, f_fup = torch.randn(2, 2, 2, 8), torch.randn(2, 2, 2, 8)
    before = attn_heatmap(dca(f_res, f_fup), 1, batch_index=1).values
    with torch.no_grad():
        dca.ca_res.w_v.mul_(-3.0).add_(1.0)
    after = attn_heatmap(dca(f_res, f_fup), 1, batch_index=1).values
    np.testing.assert_array_equal(before, after)


def test_uniform_keys_give_uniform_map():
    dca = DualCrossAttention(8, heads=2)
    f_res = torch.randn(1, 2, 2, 8)
    f_fup = torch.randn(1, 1, 1, 8).expand(1, 2, 2, 8).contiguous()
    hm = attn_heatmap(dca(f_res, f_fup), 0)
    np.testing.assert_allclose(hm.values, np.ones((2, 2)), rtol=1e-6)


def test_attention_heatmap_errors():
    dca = DualCrossAttention(8, heads=2)
    out = dca(torch.randn(1, 2, 2, 8), torch.randn(1, 2, 2, 8))
    with pytest.raises(IndexError):
        attn_heatmap(out, 4)
    with pytest.raises(ValueError):
        attn_heatmap(out, 0, "sideways")


def test_overlay_alpha_zero_is_identity():
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, (16, 16, 3), dtype=np.uint8)
    hm = HeatMap(rng.random((2, 2)), "gradcam")
    assert np.array_equal(overlay(img, hm, 0.0), img)
    with pytest.raises(ValueError):
        overlay(img, hm, 1.5)


def test_overlay_one_hot_alpha_one_touches_one_block():
    img = np.full((16, 16, 3), 100, dtype=np.uint8)
    vals = np.zeros((2, 2))
    vals[1, 0] = 1.0
    out = overlay(img, HeatMap(vals, "gradcam"), 1.0)
    changed = (out != img).any(axis=-1)
    expect = np.zeros((16, 16), dtype=bool)
    expect[8:, :8] = True
    assert np.array_equal(changed, expect)
    # the hot block is the colour map's top colour (dark red)
    assert tuple(out[12, 3]) == (128, 0, 0)


@given(st.integers(1, 7), st.integers(1, 7), st.integers(8, 40), st.integers(8, 40))
def test_upsample_nearest_blocks(gh, gw, h, w):
    vals = np.arange(1, gh * gw + 1, dtype=float).reshape(gh, gw)
    up = upsample_nearest(vals, (h, w))
    assert up.shape == (h, w)
    assert set(np.unique(up)) == set(vals.ravel())
    # every grid cell's pixels lie inside its peak box
    i, j = divmod(int(np.argmax(vals)), gw)
    r0, c0, r1, c1 = peak_cell_box(HeatMap(vals / vals.max(), "x"), (h, w))
    rows, cols = np.nonzero(up == vals[i, j])
    assert rows.min() == r0 and rows.max() == r1 - 1 and cols.min() == c0 and cols.max() == c1 - 1


def test_peak_in_box_overlap_rule():
    vals = np.zeros((2, 2))
    vals[0, 1] = 1.0
    hm = HeatMap(vals, "gradcam")
    assert peak_cell_box(hm, (64, 64)) == (0, 32, 32, 64)
    assert peak_in_box(hm, (10, 40, 20, 50), (64, 64))
    assert peak_in_box(hm, (31, 31, 40, 40), (64, 64))  # shares one pixel corner
    assert not peak_in_box(hm, (32, 32, 40, 40), (64, 64))
    assert not peak_in_box(hm, (0, 0, 31, 31), (64, 64))


@pytest.mark.parametrize("suffix", [".png", ".ppm"])
def test_overlay_export_reparses(tmp_path, suffix):
    rng = np.random.default_rng(1)
    img = rng.integers(0, 256, (16, 16, 3), dtype=np.uint8)
    hm = HeatMap(rng.random((2, 2)), "attention")
    path = overlay_export(img, hm, tmp_path / f"o{suffix}", 0.6)
    assert np.array_equal(read_image(path), overlay(img, hm, 0.6))
    write_overlay_index([(path.name, "P001", 30, "attention", "query=0")], tmp_path / "index.csv")
    rows = list(csv.reader((tmp_path / "index.csv").open()))
    assert rows[0] == ["file", "patient_id", "date_days", "source", "detail"]
    assert rows[1] == [path.name, "P001", "30", "attention", "query=0"]
