"""Query-to-target attention maps, Grad-CAM saliency and overlay export."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from torch import Tensor

from .data.images import write_image
from .fusion import LR_INDEX, DcaOutput, PairClassifier

DIRECTIONS = ("res2fup", "fup2res")
OVERLAY_INDEX_HEADER = ("file", "patient_id", "date_days", "source", "detail")


@dataclass
class HeatMap:
    values: np.ndarray  # [Hs, Ws], in [0, 1]
    source: str  # "attention" or "gradcam"
    detail: dict = field(default_factory=dict)
    degenerate: bool = False  # all-zero map (nothing to normalise)

    @property
    def grid(self) -> tuple[int, int]:
        return self.values.shape


def max_normalize(values: np.ndarray) -> tuple[np.ndarray, bool]:
    """Scale a nonnegative map so its maximum is 1; all-zero maps stay zero and are flagged."""
    v = np.asarray(values, dtype=np.float64)
    if (v < 0).any():
        raise ValueError("heat map values must be nonnegative")
    m = v.max() if v.size else 0.0
    if m <= 0:
        return np.zeros_like(v), True
    return v / m, False


def attn_heatmap(
    dca: DcaOutput,
    query_index: int,
    direction: str = "res2fup",
    batch_index: int = 0,
    per_head: bool = False,
) -> HeatMap | list[HeatMap]:
    """Attention of one query token over the other image's grid.

    ``res2fup`` uses restaging queries over follow-up keys, so the map lives on
    the follow-up grid; ``fup2res`` is the reverse.  Heads are averaged unless
    ``per_head`` is set, in which case one map per head is returned.
    """
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be one of {DIRECTIONS}")
    attn = dca.attn_res2fup if direction == "res2fup" else dca.attn_fup2res
    if attn is None:
        raise ValueError("no attention weights: model was run without DCA")
    target = dca.h_fup if direction == "res2fup" else dca.h_res
    grid = tuple(target.shape[-3:-1])
    a = attn.detach()
    if a.dim() == 4:
        a = a[batch_index]
    n = a.shape[-2]
    if not 0 <= query_index < n:
        raise IndexError(f"query_index {query_index} out of range for {n} tokens")
    rows = a[:, query_index, :].double().numpy()  # [h, M]
    detail = {"query_index": query_index, "direction": direction}
    if per_head:
        out = []
        for h, row in enumerate(rows):
            vals, deg = max_normalize(row.reshape(grid))
            out.append(HeatMap(vals, "attention", {**detail, "head": h}, deg))
        return out
    vals, deg = max_normalize(rows.mean(axis=0).reshape(grid))
    return HeatMap(vals, "attention", detail, deg)


def cam_from_gradients(activations: Tensor, gradients: Tensor) -> Tensor:
    """``ReLU(sum_c w_c F_c)`` with ``w_c`` the spatial mean of the gradient; inputs ``[..., Hs, Ws, C]``."""
    w = gradients.mean(dim=(-3, -2), keepdim=True)
    return torch.clamp((w * activations).sum(dim=-1), min=0.0)


def grad_cam(
    model: PairClassifier,
    x_ref: Tensor | None,
    x_later: Tensor,
    dt_norm: Tensor | float | None = None,
    target_class: int = LR_INDEX,
) -> list[HeatMap]:
    """Grad-CAM on the follow-up branch's Stage-4 activations, one map per batch element.

    The model is run in inference mode (no dropout) with gradients enabled
    for the activations only.
    """
    was_training = model.training
    model.eval()
    try:
        with torch.enable_grad():
            with torch.no_grad():
                f_res, f_fup = model.features(x_ref, x_later)
            f_fup = f_fup.detach().requires_grad_(True)
            b = x_later.shape[0]
            if dt_norm is None:
                dt = torch.zeros(b, dtype=x_later.dtype)
            else:
                dt = torch.as_tensor(dt_norm, dtype=x_later.dtype).reshape(-1).expand(b)
            logits = model.classify(f_res, f_fup, dt)
            (grads,) = torch.autograd.grad(logits[:, target_class].sum(), f_fup, allow_unused=True)
        if grads is None:
            grads = torch.zeros_like(f_fup)
        cams = cam_from_gradients(f_fup.detach(), grads).double().numpy()
    finally:
        model.train(was_training)
    out = []
    for cam in cams:
        vals, deg = max_normalize(cam)
        out.append(HeatMap(vals, "gradcam", {"class": target_class}, deg))
    return out


def upsample_nearest(values: np.ndarray, hw: tuple[int, int]) -> np.ndarray:
    gh, gw = values.shape
    rows = (np.arange(hw[0]) * gh) // hw[0]
    cols = (np.arange(hw[1]) * gw) // hw[1]
    return values[rows][:, cols]


def colorize(values: np.ndarray) -> np.ndarray:
    """Jet-style colour map of ``[0, 1]`` values -> float RGB in ``[0, 255]``."""
    v = np.clip(values, 0.0, 1.0)[..., None]
    r = np.clip(1.5 - np.abs(4 * v - 3), 0, 1)
    g = np.clip(1.5 - np.abs(4 * v - 2), 0, 1)
    b = np.clip(1.5 - np.abs(4 * v - 1), 0, 1)
    return np.concatenate([r, g, b], axis=-1) * 255.0


def overlay(image: np.ndarray, heatmap: HeatMap | np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Blend the colourised map into ``image``; per-pixel opacity is ``alpha * value``.

    Zero-valued cells leave the image untouched, so ``alpha=0`` reproduces it exactly.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha={alpha} outside [0, 1]")
    vals = heatmap.values if isinstance(heatmap, HeatMap) else np.asarray(heatmap)
    up = upsample_nearest(vals, image.shape[:2])
    a = (alpha * up)[..., None]
    out = (1.0 - a) * image.astype(np.float64) + a * colorize(up)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def overlay_export(image: np.ndarray, heatmap: HeatMap | np.ndarray, path: str | Path, alpha: float = 0.5) -> Path:
    """Write the overlay as PNG or PPM (by suffix)."""
    out = overlay(image, heatmap, alpha)
    write_image(path, out)
    return Path(path)


def write_overlay_index(rows: Iterable[Sequence], path: str | Path) -> None:
    """Sidecar CSV mapping overlay file -> (patient, date, source, query index or class)."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(OVERLAY_INDEX_HEADER)
        w.writerows(rows)


def peak_cell_box(heatmap: HeatMap, hw: tuple[int, int]) -> tuple[int, int, int, int]:
    """Pixel box ``(r0, c0, r1, c1)`` (exclusive ends) covered by the map's argmax cell."""
    gh, gw = heatmap.values.shape
    i, j = np.unravel_index(int(np.argmax(heatmap.values)), (gh, gw))
    r0 = -(-i * hw[0] // gh)
    r1 = -(-(i + 1) * hw[0] // gh)
    c0 = -(-j * hw[1] // gw)
    c1 = -(-(j + 1) * hw[1] // gw)
    return r0, c0, r1, c1


def peak_in_box(heatmap: HeatMap, bbox: tuple[int, int, int, int], hw: tuple[int, int]) -> bool:
    """Whether the upsampled argmax cell overlaps ``bbox = (r0, c0, r1, c1)`` (inclusive ends).

    At a coarse Stage-4 grid one cell spans many pixels, so the map's maximum
    is a block rather than a point; overlap is the natural localisation test.
    """
    if heatmap.degenerate:
        return False
    r0, c0, r1, c1 = peak_cell_box(heatmap, hw)
    b0, b1, b2, b3 = bbox
    return r0 <= b2 and b0 < r1 and c0 <= b3 and b1 < c1
