"""Dual cross-attention fusion, temporal encoding and the TREX / CAT / single-image heads."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .encoder import Encoder, EncoderConfig, StageFeatures
from .nn_core import (
    ConfigError,
    CrossAttention,
    LayerNorm,
    Linear,
    ShapeError,
    global_avg_pool,
    relu,
    softmax,
)

MODEL_KINDS = ("trex", "cat", "si")
LR_INDEX = 1  # logit / probability index of the positive (regrowth) class


@dataclass
class DcaOutput:
    h_res: Tensor  # [..., Hs, Ws, C]
    h_fup: Tensor
    attn_res2fup: Tensor  # [..., h, N, N]; res queries over fup keys
    attn_fup2res: Tensor


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "trex"
    encoder: EncoderConfig = EncoderConfig()
    dca_heads: int = 8
    share_projections: bool = False
    share_layer_norm: bool = False
    hidden: int | None = None  # defaults to the Stage-4 width
    dropout: float = 0.1
    no_dca: bool = False
    no_dt: bool = False

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ConfigError(f"model kind must be one of {MODEL_KINDS}, got {self.kind!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if self.kind == "trex" and self.encoder.out_dim % self.dca_heads:
            raise ConfigError(f"DCA: C={self.encoder.out_dim} not divisible by {self.dca_heads} heads")

    @property
    def head_input_width(self) -> int:
        c = self.encoder.out_dim
        return {"trex": 3 * c + 1, "cat": 2 * c, "si": c}[self.kind]


class DualCrossAttention(nn.Module):
    """Bidirectional cross-attention between two Stage-4 token grids.

    ``CA(F_res)`` uses res tokens as queries over fup keys/values and vice
    versa; each result is fused with its query features by element-wise
    product before layer normalisation.
    """

    def __init__(self, dim: int, heads: int = 8, share_projections: bool = False, share_layer_norm: bool = False):
        super().__init__()
        self.ca_res = CrossAttention(dim, heads)
        self.ca_fup = self.ca_res if share_projections else CrossAttention(dim, heads)
        self.ln_res = LayerNorm(dim)
        self.ln_fup = self.ln_res if share_layer_norm else LayerNorm(dim)

    def forward(self, f_res: Tensor, f_fup: Tensor) -> DcaOutput:
        return dual_cross_attention(f_res, f_fup, self)


def _flatten(f: Tensor) -> Tensor:
    *lead, hs, ws, c = f.shape
    return f.reshape(*lead, hs * ws, c)


def dual_cross_attention(f_res: Tensor, f_fup: Tensor, dca: DualCrossAttention) -> DcaOutput:
    if f_res.shape != f_fup.shape:
        raise ShapeError(f"DCA: feature grids differ, {tuple(f_res.shape)} vs {tuple(f_fup.shape)}")
    shape = f_res.shape
    t_res, t_fup = _flatten(f_res), _flatten(f_fup)
    ca_res, a_res = dca.ca_res(t_res, t_fup)
    ca_fup, a_fup = dca.ca_fup(t_fup, t_res)
    h_res = dca.ln_res(t_res * ca_res).reshape(shape)
    h_fup = dca.ln_fup(t_fup * ca_fup).reshape(shape)
    return DcaOutput(h_res, h_fup, a_res, a_fup)


class FusionHead(nn.Module):
    """linear -> ReLU -> dropout -> linear, emitting two logits (CR, LR)."""

    def __init__(self, d_in: int, hidden: int, dropout: float = 0.1):
        super().__init__()
        self.d_in = d_in
        self.fc1 = Linear(d_in, hidden)
        self.drop = nn.Dropout(dropout)
        self.fc2 = Linear(hidden, 2)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise ShapeError(f"head: expected input width {self.d_in}, got {x.shape[-1]}")
        return self.fc2(self.drop(relu(self.fc1(x))))


def _as_dt(dt_norm, like: Tensor) -> Tensor:
    dt = torch.as_tensor(dt_norm, dtype=like.dtype, device=like.device)
    if dt.dim() == 0:
        dt = dt.expand(like.shape[:-1])
    if ((dt < 0) | (dt > 1)).any() or not torch.isfinite(dt).all():
        raise ValueError(f"dt_norm must lie in [0, 1], got {dt.tolist()}")
    return dt[..., None]


def trex_classify(dca: DcaOutput, f_fup: Tensor, dt_norm, head: FusionHead) -> Tensor:
    """Logits from ``[GP(H_res), GP(H_fup), GP(F_fup), dt]``."""
    pooled_fup = global_avg_pool(f_fup)
    x = torch.cat(
        [global_avg_pool(dca.h_res), global_avg_pool(dca.h_fup), pooled_fup, _as_dt(dt_norm, pooled_fup)], dim=-1
    )
    return head(x)


def cat_classify(f_res: Tensor, f_fup: Tensor, head: FusionHead) -> Tensor:
    if f_res.shape != f_fup.shape:
        raise ShapeError(f"CAT: feature grids differ, {tuple(f_res.shape)} vs {tuple(f_fup.shape)}")
    return head(torch.cat([global_avg_pool(f_res), global_avg_pool(f_fup)], dim=-1))


def si_classify(f: Tensor, head: FusionHead) -> Tensor:
    return head(global_avg_pool(f))


def lr_probability(logits: Tensor) -> Tensor:
    return softmax(logits, axis=-1)[..., LR_INDEX]


class PairClassifier(nn.Module):
    """Siamese encoder plus one of the three heads.

    ``forward(x_ref, x_later, dt_norm)`` returns ``[B, 2]`` logits.  The
    single-image model ignores ``x_ref`` and ``dt_norm``.  After each forward
    pass the Stage-4 tensors (and DCA output for TREX) are kept in
    ``self.last`` for interpretability.
    """

    def __init__(self, cfg: ModelConfig = ModelConfig()):
        super().__init__()
        self.cfg = cfg
        c = cfg.encoder.out_dim
        self.encoder = Encoder(cfg.encoder)
        self.dca = (
            DualCrossAttention(c, cfg.dca_heads, cfg.share_projections, cfg.share_layer_norm)
            if cfg.kind == "trex"
            else None
        )
        self.head = FusionHead(cfg.head_input_width, cfg.hidden or c, cfg.dropout)
        self.last: dict[str, object] = {}
        self.retain_features = False

    def features(self, x_ref: Tensor | None, x_later: Tensor) -> tuple[Tensor | None, Tensor]:
        if self.cfg.kind == "si":
            return None, self.encoder(x_later)
        # one encoder pass over both images keeps the siamese weights literally shared
        both = self.encoder(torch.cat([x_ref, x_later], dim=0))
        n = x_ref.shape[0]
        return both[:n], both[n:]

    def classify(self, f_res: Tensor | None, f_fup: Tensor, dt_norm) -> Tensor:
        kind = self.cfg.kind
        if kind == "si":
            return si_classify(f_fup, self.head)
        if kind == "cat":
            return cat_classify(f_res, f_fup, self.head)
        if self.cfg.no_dca:
            dca = DcaOutput(f_res, f_fup, None, None)
        else:
            dca = self.dca(f_res, f_fup)
        if self.retain_features:
            self.last["dca"] = dca
        if self.cfg.no_dt:
            dt_norm = torch.zeros(f_fup.shape[:-3], dtype=f_fup.dtype)
        return trex_classify(dca, f_fup, dt_norm, self.head)

    def forward(self, x_ref: Tensor | None, x_later: Tensor, dt_norm=None) -> Tensor:
        f_res, f_fup = self.features(x_ref, x_later)
        if self.retain_features:
            self.last = {"f_res": f_res, "f_fup": f_fup}
        if dt_norm is None:
            dt_norm = torch.zeros(x_later.shape[0], dtype=x_later.dtype)
        return self.classify(f_res, f_fup, dt_norm)


def build_model(cfg: ModelConfig, seed: int = 0) -> PairClassifier:
    torch.manual_seed(seed)
    return PairClassifier(cfg)


def encode_pair(model: PairClassifier, x_ref: Tensor, x_later: Tensor) -> tuple[StageFeatures, StageFeatures]:
    f_res, f_fup = model.features(x_ref, x_later)
    return StageFeatures(f_res), StageFeatures(f_fup)
