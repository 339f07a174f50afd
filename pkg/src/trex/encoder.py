"""Swin-style hierarchical encoder producing Stage-4 features at 1/32 resolution."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import torch
from torch import Tensor, nn

from .nn_core import (
    MASK_VALUE,
    ConfigError,
    LayerNorm,
    Linear,
    ShapeError,
    gelu,
    multi_head_cross_attention,
    trunc_normal_,
)

NUM_STAGES = 4


@dataclass(frozen=True)
class EncoderConfig:
    input_hw: tuple[int, int] = (64, 64)
    patch: int = 4
    window: int = 4
    depths: tuple[int, ...] = (1, 1, 2, 1)
    dims: tuple[int, ...] = (16, 32, 64, 128)
    heads: tuple[int, ...] = (1, 2, 4, 8)
    mlp_ratio: int = 4

    def __post_init__(self):
        object.__setattr__(self, "input_hw", tuple(int(v) for v in self.input_hw))
        for name in ("depths", "dims", "heads"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        self.validate()

    def validate(self) -> None:
        h, w = self.input_hw
        if len(self.depths) != NUM_STAGES or len(self.dims) != NUM_STAGES or len(self.heads) != NUM_STAGES:
            raise ConfigError("encoder: depths, dims and heads need exactly 4 entries")
        if self.patch < 1 or self.window < 1:
            raise ConfigError("encoder: patch and window must be positive")
        if h % self.patch or w % self.patch:
            raise ConfigError(f"encoder: input {h}x{w} is not divisible by patch {self.patch}")
        gh, gw = h // self.patch, w // self.patch
        if gh % 8 or gw % 8:
            raise ConfigError(
                f"encoder: token grid {gh}x{gw} cannot be halved three times (input {h}x{w}, patch {self.patch})"
            )
        for i in range(NUM_STAGES - 1):
            if self.dims[i + 1] != 2 * self.dims[i]:
                raise ConfigError(f"encoder: dims must double per stage, got {self.dims}")
        for d, nh in zip(self.dims, self.heads):
            if nh < 1 or d % nh:
                raise ConfigError(f"encoder: width {d} not divisible by {nh} heads")

    @property
    def stage4_grid(self) -> tuple[int, int]:
        h, w = self.input_hw
        return h // (self.patch * 8), w // (self.patch * 8)

    @property
    def out_dim(self) -> int:
        return self.dims[-1]

    def to_dict(self) -> dict:
        return asdict(self)


NAMED_CONFIGS: dict[str, EncoderConfig] = {
    "toy": EncoderConfig(),
    "tiny": EncoderConfig(depths=(1, 1, 2, 1), dims=(24, 48, 96, 192), heads=(1, 2, 4, 8)),
    "small": EncoderConfig(depths=(1, 1, 3, 1), dims=(32, 64, 128, 256), heads=(1, 2, 4, 8)),
    # full-size geometry: 224 input, patch 4, window 7, Swin-S widths
    "swin_small": EncoderConfig(
        input_hw=(224, 224), patch=4, window=7, depths=(2, 2, 18, 2), dims=(96, 192, 384, 768), heads=(3, 6, 12, 24)
    ),
}


def named_config(name: str) -> EncoderConfig:
    try:
        return NAMED_CONFIGS[name]
    except KeyError:
        raise ConfigError(f"unknown encoder config {name!r}; choose from {sorted(NAMED_CONFIGS)}") from None


@dataclass
class StageFeatures:
    tensor: Tensor  # [..., Hs, Ws, C]
    grid: tuple[int, int] = field(init=False)
    channels: int = field(init=False)

    def __post_init__(self):
        self.grid = (int(self.tensor.shape[-3]), int(self.tensor.shape[-2]))
        self.channels = int(self.tensor.shape[-1])


# ---------------------------------------------------------------------------
# Window geometry
# ---------------------------------------------------------------------------


def window_partition(tokens: Tensor, window: int) -> Tensor:
    """``[..., Hs, Ws, C] -> [..., nw, window*window, C]`` in row-major window order."""
    *lead, hs, ws, c = tokens.shape
    if hs % window or ws % window:
        raise ShapeError(f"window_partition: grid {hs}x{ws} not divisible by window {window}")
    x = tokens.reshape(*lead, hs // window, window, ws // window, window, c)
    nd = len(lead)
    x = x.permute(*range(nd), nd, nd + 2, nd + 1, nd + 3, nd + 4)
    return x.reshape(*lead, (hs // window) * (ws // window), window * window, c)


def window_reverse(windows: Tensor, window: int, hs: int, ws: int) -> Tensor:
    """Inverse of :func:`window_partition`."""
    *lead, nw, n, c = windows.shape
    if nw != (hs // window) * (ws // window) or n != window * window:
        raise ShapeError(f"window_reverse: {tuple(windows.shape)} does not tile a {hs}x{ws} grid")
    x = windows.reshape(*lead, hs // window, ws // window, window, window, c)
    nd = len(lead)
    x = x.permute(*range(nd), nd, nd + 2, nd + 1, nd + 3, nd + 4)
    return x.reshape(*lead, hs, ws, c)


def _padded(n: int, window: int) -> int:
    return -(-n // window) * window


def attention_mask(hs: int, ws: int, window: int, shift: int) -> Tensor | None:
    """Additive ``[nw, w*w, w*w]`` mask for padded and/or cyclically shifted windows.

    Keys are switched off when they are padding or when, after the cyclic
    shift, they come from a different image region than the query.
    Returns ``None`` when every entry would pass.
    """
    hp, wp = _padded(hs, window), _padded(ws, window)
    if shift == 0 and hp == hs and wp == ws:
        return None
    region = torch.zeros(hp, wp)
    if shift:
        cuts = (slice(0, -window), slice(-window, -shift), slice(-shift, None))
        label = 0
        for hsl in cuts:
            for wsl in cuts:
                region[hsl, wsl] = label
                label += 1
    pad = torch.zeros(hp, wp, dtype=torch.bool)
    pad[hs:, :] = True
    pad[:, ws:] = True
    if shift:
        pad = torch.roll(pad, shifts=(-shift, -shift), dims=(0, 1))
    region_w = window_partition(region[..., None], window)[..., 0]  # [nw, n]
    pad_w = window_partition(pad[..., None].float(), window)[..., 0] > 0.5
    blocked = (region_w[:, :, None] != region_w[:, None, :]) | pad_w[:, None, :]
    return blocked.float() * MASK_VALUE


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


class PatchEmbed(nn.Module):
    """Non-overlapping ``patch x patch`` flattening followed by a linear projection."""

    def __init__(self, patch: int, dim: int, in_chans: int = 3):
        super().__init__()
        self.patch = patch
        self.proj = Linear(patch * patch * in_chans, dim)
        self.norm = LayerNorm(dim)

    def forward(self, images: Tensor) -> Tensor:
        *lead, h, w, c = images.shape
        p = self.patch
        if h % p or w % p:
            raise ConfigError(f"patch_embed: input {h}x{w} not divisible by patch {p}")
        x = window_partition(images, p)  # [..., (h/p)*(w/p), p*p, c]
        x = x.reshape(*lead, h // p, w // p, p * p * c)
        return self.norm(self.proj(x))


class WindowAttention(nn.Module):
    """Windowed multi-head self-attention with a learned per-window additive bias."""

    def __init__(self, dim: int, heads: int, window: int):
        super().__init__()
        n = window * window
        self.heads = heads
        self.w_q = nn.Parameter(trunc_normal_(torch.empty(dim, dim)))
        self.w_k = nn.Parameter(trunc_normal_(torch.empty(dim, dim)))
        self.w_v = nn.Parameter(trunc_normal_(torch.empty(dim, dim)))
        self.b_q = nn.Parameter(torch.zeros(dim))
        self.b_v = nn.Parameter(torch.zeros(dim))
        self.pos_bias = nn.Parameter(trunc_normal_(torch.empty(heads, n, n)))
        self.proj = Linear(dim, dim)

    def forward(self, windows: Tensor, mask: Tensor | None) -> Tensor:
        # windows: [..., nw, n, C]; mask: [nw, n, n] or None
        bias = self.pos_bias
        if mask is not None:
            bias = bias + mask[:, None, :, :]  # [nw, h, n, n]
        out, _ = multi_head_cross_attention(
            windows, windows, self.w_q, self.w_k, self.w_v, self.heads, bias=bias, b_q=self.b_q, b_v=self.b_v
        )
        return self.proj(out)


class SwinBlock(nn.Module):
    def __init__(self, dim: int, heads: int, window: int, shift: int, mlp_ratio: int = 4):
        super().__init__()
        if not 0 <= shift < window:
            raise ConfigError(f"swin_block: shift {shift} must be in [0, window={window})")
        self.window = window
        self.shift = shift
        self.norm1 = LayerNorm(dim)
        self.attn = WindowAttention(dim, heads, window)
        self.norm2 = LayerNorm(dim)
        self.fc1 = Linear(dim, mlp_ratio * dim)
        self.fc2 = Linear(mlp_ratio * dim, dim)
        self._masks: dict[tuple[int, int, int], Tensor | None] = {}

    def _mask(self, hs: int, ws: int, shift: int, like: Tensor) -> Tensor | None:
        key = (hs, ws, shift)
        if key not in self._masks:
            self._masks[key] = attention_mask(hs, ws, self.window, shift)
        m = self._masks[key]
        return None if m is None else m.to(like.dtype)

    def forward(self, x: Tensor) -> Tensor:
        *lead, hs, ws, c = x.shape
        win = self.window
        # a window that already covers the whole grid gains nothing from shifting
        shift = self.shift if min(hs, ws) > win else 0
        h = self.norm1(x)
        hp, wp = _padded(hs, win), _padded(ws, win)
        if hp != hs or wp != ws:
            pad = h.new_zeros(*lead, hp, wp, c)
            pad[..., :hs, :ws, :] = h
            h = pad
        if shift:
            h = torch.roll(h, shifts=(-shift, -shift), dims=(-3, -2))
        attn = self.attn(window_partition(h, win), self._mask(hs, ws, shift, h))
        h = window_reverse(attn, win, hp, wp)
        if shift:
            h = torch.roll(h, shifts=(shift, shift), dims=(-3, -2))
        x = x + h[..., :hs, :ws, :]
        return x + self.fc2(gelu(self.fc1(self.norm2(x))))


class PatchMerge(nn.Module):
    """2x2 neighbourhood concatenation (4C) and linear reduction to 2C."""

    def __init__(self, dim: int):
        super().__init__()
        self.norm = LayerNorm(4 * dim)
        self.reduce = Linear(4 * dim, 2 * dim, bias=False)

    def forward(self, x: Tensor) -> Tensor:
        *lead, hs, ws, c = x.shape
        if hs % 2 or ws % 2:
            raise ShapeError(f"patch_merge: grid {hs}x{ws} must be even")
        x = torch.cat(
            [x[..., 0::2, 0::2, :], x[..., 1::2, 0::2, :], x[..., 0::2, 1::2, :], x[..., 1::2, 1::2, :]], dim=-1
        )
        return self.reduce(self.norm(x))


class Encoder(nn.Module):
    """patch_embed -> [blocks, merge] x3 -> blocks -> LN; returns Stage-4 tokens ``[B, H/32, W/32, C]``."""

    def __init__(self, cfg: EncoderConfig = EncoderConfig()):
        super().__init__()
        self.cfg = cfg
        self.embed = PatchEmbed(cfg.patch, cfg.dims[0])
        self.stages = nn.ModuleList()
        self.merges = nn.ModuleList()
        for i in range(NUM_STAGES):
            blocks = [
                SwinBlock(cfg.dims[i], cfg.heads[i], cfg.window, 0 if j % 2 == 0 else cfg.window // 2, cfg.mlp_ratio)
                for j in range(cfg.depths[i])
            ]
            self.stages.append(nn.Sequential(*blocks))
            if i < NUM_STAGES - 1:
                self.merges.append(PatchMerge(cfg.dims[i]))
        self.norm = LayerNorm(cfg.dims[-1])

    def forward(self, images: Tensor) -> Tensor:
        if tuple(images.shape[-3:-1]) != self.cfg.input_hw:
            raise ShapeError(f"encoder: image {tuple(images.shape)} does not match input_hw {self.cfg.input_hw}")
        x = self.embed(images)
        for i in range(NUM_STAGES):
            x = self.stages[i](x)
            if i < NUM_STAGES - 1:
                x = self.merges[i](x)
        return self.norm(x)


def encode(encoder: Encoder, images: Tensor) -> StageFeatures:
    return StageFeatures(encoder(images))


def stage_grids(cfg: EncoderConfig) -> Sequence[tuple[int, int]]:
    h, w = cfg.input_hw
    return [(h // (cfg.patch * 2**i), w // (cfg.patch * 2**i)) for i in range(NUM_STAGES)]
