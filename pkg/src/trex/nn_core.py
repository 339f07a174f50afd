"""Differentiable kernels used by the encoder, the cross-attention fusion and the heads.

All kernels are written against :mod:`torch` primitives so reverse-mode
gradients come from autograd.  :func:`grad_check` verifies them against
central finite differences and does not share any code path with autograd.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import torch
from torch import Tensor, nn
from torch.nn import functional as F

# Additive logit used to switch attention entries off.  Finite so that a fully
# masked row degrades to a uniform distribution instead of NaN.
MASK_VALUE = -1e9


class ShapeError(ValueError):
    """Raised when tensor extents are incompatible."""


class ConfigError(ValueError):
    """Raised when a layer or model configuration is invalid."""


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``y = x @ weight + bias`` broadcast over the leading dims of ``x``.

    ``weight`` is stored as ``[in, out]``.
    """
    if weight.dim() != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(
            f"linear: input shape {tuple(x.shape)} incompatible with weight shape {tuple(weight.shape)}"
        )
    y = x @ weight
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise ShapeError(
                f"linear: bias shape {tuple(bias.shape)} does not match weight shape {tuple(weight.shape)}"
            )
        y = y + bias
    return y


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.dim() == 0:
        raise ShapeError("softmax: scalar input has no axis")
    if x.shape[axis] == 0:
        raise ShapeError(f"softmax: axis {axis} of shape {tuple(x.shape)} is empty")
    # fused max-subtracted softmax
    return torch.softmax(x, dim=axis)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape[axis] == 0:
        raise ShapeError(f"log_softmax: axis {axis} of shape {tuple(x.shape)} is empty")
    return torch.log_softmax(x, dim=axis)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the trailing dimension, then apply ``gamma * x_hat + beta``."""
    c = x.shape[-1] if x.dim() else 0
    if c == 0:
        raise ShapeError("layer_norm: normalized dimension is empty")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"layer_norm: affine shapes {tuple(gamma.shape)}/{tuple(beta.shape)} do not match C={c}"
        )
    # population variance, eps inside the square root
    return F.layer_norm(x, (c,), gamma, beta, eps)


def split_heads(x: Tensor, heads: int) -> Tensor:
    """``[..., N, C] -> [..., h, N, C/h]``."""
    *lead, n, c = x.shape
    return x.reshape(*lead, n, heads, c // heads).transpose(-3, -2)


def merge_heads(x: Tensor) -> Tensor:
    """``[..., h, N, d] -> [..., N, h*d]``."""
    *lead, h, n, d = x.shape
    return x.transpose(-3, -2).reshape(*lead, n, h * d)


def multi_head_cross_attention(
    q_src: Tensor,
    kv_src: Tensor,
    w_q: Tensor,
    w_k: Tensor,
    w_v: Tensor,
    heads: int,
    bias: Tensor | None = None,
    b_q: Tensor | None = None,
    b_k: Tensor | None = None,
    b_v: Tensor | None = None,
) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention of ``q_src`` tokens over ``kv_src`` tokens.

    Args:
        q_src: ``[..., N, C]`` query-side tokens.
        kv_src: ``[..., M, C]`` tokens supplying keys and values.
        w_q, w_k, w_v: ``[C, C]`` projections.
        heads: number of heads; must divide ``C``.
        bias: optional additive logit term broadcastable to ``[..., h, N, M]``
            (position bias and/or mask).

    Returns:
        ``(out, attn)`` with ``out`` of shape ``[..., N, C]`` (heads concatenated,
        no output projection) and ``attn`` of shape ``[..., h, N, M]``.
    """
    c = q_src.shape[-1]
    if kv_src.shape[-1] != c:
        raise ShapeError(
            f"attention: query channels {tuple(q_src.shape)} vs key/value channels {tuple(kv_src.shape)}"
        )
    if heads < 1 or c % heads:
        raise ConfigError(f"attention: C={c} is not divisible by heads={heads}")
    d_h = c // heads
    q = split_heads(linear(q_src, w_q, b_q), heads)
    k = split_heads(linear(kv_src, w_k, b_k), heads)
    v = split_heads(linear(kv_src, w_v, b_v), heads)
    logits = (q @ k.transpose(-2, -1)) / math.sqrt(d_h)
    if bias is not None:
        logits = logits + bias
    attn = softmax(logits, axis=-1)
    return merge_heads(attn @ v), attn


def global_avg_pool(f: Tensor) -> Tensor:
    """Spatial mean of ``[..., Hf, Wf, C]`` features -> ``[..., C]``."""
    if f.dim() < 3 or f.shape[-3] < 1 or f.shape[-2] < 1:
        raise ShapeError(f"global_avg_pool: expected [..., H, W, C], got {tuple(f.shape)}")
    return f.mean(dim=(-3, -2))


def gelu(x: Tensor) -> Tensor:
    return F.gelu(x)


def relu(x: Tensor) -> Tensor:
    return torch.clamp(x, min=0.0)


def trunc_normal_(t: Tensor, std: float = 0.02) -> Tensor:
    with torch.no_grad():
        return nn.init.trunc_normal_(t, std=std, a=-2 * std, b=2 * std)


# ---------------------------------------------------------------------------
# Parameter containers
# ---------------------------------------------------------------------------


class Linear(nn.Module):
    def __init__(self, d_in: int, d_out: int, bias: bool = True):
        super().__init__()
        self.weight = nn.Parameter(trunc_normal_(torch.empty(d_in, d_out)))
        self.bias = nn.Parameter(torch.zeros(d_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class LayerNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        if eps <= 0:
            raise ConfigError("layer_norm eps must be positive")
        self.eps = eps
        self.gamma = nn.Parameter(torch.ones(dim))
        self.beta = nn.Parameter(torch.zeros(dim))

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)


class CrossAttention(nn.Module):
    """Square ``W_q, W_k, W_v`` projections with ``heads`` heads and no output projection."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if heads < 1 or dim % heads:
            raise ConfigError(f"attention: C={dim} is not divisible by heads={heads}")
        self.heads = heads
        self.w_q = nn.Parameter(trunc_normal_(torch.empty(dim, dim)))
        self.w_k = nn.Parameter(trunc_normal_(torch.empty(dim, dim)))
        self.w_v = nn.Parameter(trunc_normal_(torch.empty(dim, dim)))

    @property
    def head_dim(self) -> int:
        return self.w_q.shape[0] // self.heads

    def forward(self, q_src: Tensor, kv_src: Tensor) -> tuple[Tensor, Tensor]:
        return multi_head_cross_attention(q_src, kv_src, self.w_q, self.w_k, self.w_v, self.heads)


# ---------------------------------------------------------------------------
# Finite-difference verification
# ---------------------------------------------------------------------------


class GradCheckError(RuntimeError):
    pass


def grad_check(
    op: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-6,
    floor: float = 1e-6,
    seed: int = 0,
) -> float:
    """Max relative error between autograd and central-difference gradients.

    ``op(*inputs)`` may return a tensor of any shape; it is reduced to a scalar
    with fixed random weights so that every output element is probed.  The
    inputs are perturbed in place (they may be module parameters) and restored.
    Relative error per element is ``|a - n| / max(|a|, |n|, floor)``.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"grad_check: eps={eps} outside [1e-7, 1e-3]")
    inputs = list(inputs)
    for t in inputs:
        if t.dtype != torch.float64:
            raise GradCheckError("grad_check requires float64 inputs")

    out = op(*inputs)
    if not torch.isfinite(out).all():
        raise GradCheckError("grad_check: non-finite output at the probe point")
    gen = torch.Generator().manual_seed(seed)
    weights = torch.randn(out.shape, generator=gen, dtype=torch.float64)

    def scalar() -> float:
        with torch.no_grad():
            y = op(*inputs)
            if not torch.isfinite(y).all():
                raise GradCheckError("grad_check: non-finite output while probing")
            return float((y * weights).sum())

    leaves = [t for t in inputs if t.requires_grad]
    analytic = torch.autograd.grad((out * weights).sum(), leaves, allow_unused=True)
    worst = 0.0
    for t, a in zip(leaves, analytic):
        a = torch.zeros_like(t) if a is None else a.detach()
        flat = t.data.view(-1)
        a_flat = a.reshape(-1)
        for i in range(flat.numel()):
            orig = float(flat[i])
            flat[i] = orig + eps
            up = scalar()
            flat[i] = orig - eps
            down = scalar()
            flat[i] = orig
            num = (up - down) / (2 * eps)
            ana = float(a_flat[i])
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            worst = max(worst, err)
    return worst
